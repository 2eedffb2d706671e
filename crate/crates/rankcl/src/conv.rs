//! Direct 2D convolution for the small image encoder stem.
//!
//! Tensors stay 2D: an image batch is `[batch, channels*h*w]`, a filter bank
//! is `[filters, in_channels*kernel*kernel]`, and the geometry travels in
//! [`Conv2d`]. Desk-scale inputs make the naive loop nest fast enough.

use crate::tensor::{ConvParams, Tensor, TensorError};

/// Configuration of one convolution layer over square inputs.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_side(&self, side: usize) -> Result<usize, TensorError> {
        let padded = side + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return Err(TensorError::Contract {
                op: "conv2d",
                reason: format!(
                    "kernel {} stride {} padding {} does not fit side {side}",
                    self.kernel, self.stride, self.padding
                ),
            });
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Apply the layer. `input` is `[batch, in_channels*side*side]`, `weight`
    /// is `[filters, in_channels*kernel*kernel]`, `bias` (optional) is
    /// `[filters]`. Output is `[batch, filters*out*out]`.
    pub fn forward(
        &self,
        input: &Tensor,
        weight: &Tensor,
        bias: Option<&Tensor>,
        side: usize,
    ) -> Result<Tensor, TensorError> {
        let in_shape = input.shape();
        if in_shape.len() != 2 || in_shape[1] != self.in_channels * side * side {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: in_shape,
                reason: format!(
                    "expected [batch, {}] for {} channels of {side}x{side}",
                    self.in_channels * side * side,
                    self.in_channels
                ),
            });
        }
        let w_shape = weight.shape();
        let patch = self.in_channels * self.kernel * self.kernel;
        if w_shape != vec![self.filters, patch] {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: w_shape,
                reason: format!("expected weight [{}, {patch}]", self.filters),
            });
        }
        if let Some(b) = bias {
            if b.shape() != vec![self.filters] {
                return Err(TensorError::InvalidShape {
                    op: "conv2d",
                    shape: b.shape(),
                    reason: format!("expected bias [{}]", self.filters),
                });
            }
        }
        let out = self.out_side(side)?;
        let params = ConvParams {
            batch: in_shape[0],
            in_channels: self.in_channels,
            in_h: side,
            in_w: side,
            filters: self.filters,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_h: out,
            out_w: out,
        };
        let data = {
            let x = input.borrow_data();
            let w = weight.borrow_data();
            let b = bias.map(|t| t.value());
            conv_forward(&x, &w, b.as_deref(), params)
        };
        Tensor::conv2d_internal(
            input,
            weight,
            bias,
            params,
            data,
            vec![params.batch, self.filters * out * out],
        )
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, p: ConvParams) -> Vec<f64> {
    let mut out = vec![0.0; p.batch * p.filters * p.out_h * p.out_w];
    let in_plane = p.in_h * p.in_w;
    let in_img = p.in_channels * in_plane;
    let out_plane = p.out_h * p.out_w;
    let patch = p.in_channels * p.kernel * p.kernel;
    for n in 0..p.batch {
        for f in 0..p.filters {
            let bias = b.map(|b| b[f]).unwrap_or(0.0);
            for oy in 0..p.out_h {
                for ox in 0..p.out_w {
                    let mut acc = bias;
                    for c in 0..p.in_channels {
                        for ky in 0..p.kernel {
                            let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                            if iy < 0 || iy as usize >= p.in_h {
                                continue;
                            }
                            for kx in 0..p.kernel {
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if ix < 0 || ix as usize >= p.in_w {
                                    continue;
                                }
                                let xv = x[n * in_img + c * in_plane + iy as usize * p.in_w + ix as usize];
                                let wv = w[f * patch + c * p.kernel * p.kernel + ky * p.kernel + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[n * p.filters * out_plane + f * out_plane + oy * p.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    p: ConvParams,
    g: &[f64],
) {
    let in_plane = p.in_h * p.in_w;
    let in_img = p.in_channels * in_plane;
    let out_plane = p.out_h * p.out_w;
    let patch = p.in_channels * p.kernel * p.kernel;

    let want_input = input.requires_grad();
    let want_weight = weight.requires_grad();
    let want_bias = bias.map(|b| b.requires_grad()).unwrap_or(false);
    if !(want_input || want_weight || want_bias) {
        return;
    }

    let mut gx = if want_input {
        vec![0.0; p.batch * in_img]
    } else {
        Vec::new()
    };
    let mut gw = if want_weight {
        vec![0.0; p.filters * patch]
    } else {
        Vec::new()
    };
    let mut gb = if want_bias {
        vec![0.0; p.filters]
    } else {
        Vec::new()
    };

    let x = input.borrow_data();
    let w = weight.borrow_data();
    for n in 0..p.batch {
        for f in 0..p.filters {
            for oy in 0..p.out_h {
                for ox in 0..p.out_w {
                    let go = g[n * p.filters * out_plane + f * out_plane + oy * p.out_w + ox];
                    if go == 0.0 {
                        continue;
                    }
                    if want_bias {
                        gb[f] += go;
                    }
                    for c in 0..p.in_channels {
                        for ky in 0..p.kernel {
                            let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                            if iy < 0 || iy as usize >= p.in_h {
                                continue;
                            }
                            for kx in 0..p.kernel {
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if ix < 0 || ix as usize >= p.in_w {
                                    continue;
                                }
                                let xi = n * in_img + c * in_plane + iy as usize * p.in_w + ix as usize;
                                let wi = f * patch + c * p.kernel * p.kernel + ky * p.kernel + kx;
                                if want_input {
                                    gx[xi] += go * w[wi];
                                }
                                if want_weight {
                                    gw[wi] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    drop(x);
    drop(w);

    if want_input {
        crate::tensor::accumulate_external(input, &gx);
    }
    if want_weight {
        crate::tensor::accumulate_external(weight, &gw);
    }
    if want_bias {
        if let Some(b) = bias {
            crate::tensor::accumulate_external(b, &gb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_through() {
        // 1x1 kernel with weight 1.0: output equals input.
        let conv = Conv2d {
            in_channels: 1,
            filters: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let x = Tensor::from_vec((1..=9).map(f64::from).collect(), &[1, 9], false).unwrap();
        let w = Tensor::from_vec(vec![1.0], &[1, 1], false).unwrap();
        let y = conv.forward(&x, &w, None, 3).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn known_three_by_three_sum_kernel() {
        // all-ones 3x3 kernel on a 3x3 image, no padding: single output = sum.
        let conv = Conv2d {
            in_channels: 1,
            filters: 1,
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        let x = Tensor::from_vec((1..=9).map(f64::from).collect(), &[1, 9], false).unwrap();
        let w = Tensor::from_vec(vec![1.0; 9], &[1, 9], false).unwrap();
        let y = conv.forward(&x, &w, None, 3).unwrap();
        assert_eq!(y.value(), vec![45.0]);
    }

    #[test]
    fn padding_and_stride_geometry() {
        let conv = Conv2d {
            in_channels: 3,
            filters: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!(conv.out_side(32).unwrap(), 16);
        assert_eq!(conv.out_side(16).unwrap(), 8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let conv = Conv2d {
            in_channels: 2,
            filters: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let side = 4;
        let x0: Vec<f64> = (0..2 * 2 * side * side)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();
        let w0: Vec<f64> = (0..2 * 2 * 9).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let b0 = vec![0.1, -0.2];

        let x = Tensor::from_vec(x0.clone(), &[2, 2 * side * side], true).unwrap();
        let w = Tensor::from_vec(w0.clone(), &[2, 18], true).unwrap();
        let b = Tensor::from_vec(b0.clone(), &[2], true).unwrap();
        let loss = conv
            .forward(&x, &w, Some(&b), side)
            .unwrap()
            .mul(&conv.forward(&x, &w, Some(&b), side).unwrap())
            .unwrap()
            .mean()
            .unwrap();
        loss.backward().unwrap();

        let eval = |xv: &[f64], wv: &[f64], bv: &[f64]| -> f64 {
            let x = Tensor::from_vec(xv.to_vec(), &[2, 2 * side * side], false).unwrap();
            let w = Tensor::from_vec(wv.to_vec(), &[2, 18], false).unwrap();
            let b = Tensor::from_vec(bv.to_vec(), &[2], false).unwrap();
            let y = conv.forward(&x, &w, Some(&b), side).unwrap();
            y.mul(&y).unwrap().mean().unwrap().item()
        };

        let h = 1e-5;
        let check = |analytic: &[f64], base: &[f64], which: usize| {
            for i in 0..base.len() {
                let mut plus = base.to_vec();
                plus[i] += h;
                let mut minus = base.to_vec();
                minus[i] -= h;
                let (fp, fm) = match which {
                    0 => (eval(&plus, &w0, &b0), eval(&minus, &w0, &b0)),
                    1 => (eval(&x0, &plus, &b0), eval(&x0, &minus, &b0)),
                    _ => (eval(&x0, &w0, &plus), eval(&x0, &w0, &minus)),
                };
                let numeric = (fp - fm) / (2.0 * h);
                let denom = numeric.abs().max(analytic[i].abs()).max(1.0);
                assert!(
                    (numeric - analytic[i]).abs() / denom < 1e-4,
                    "which {which} coord {i}: analytic {} numeric {numeric}",
                    analytic[i]
                );
            }
        };
        check(&x.grad().unwrap(), &x0, 0);
        check(&w.grad().unwrap(), &w0, 1);
        check(&b.grad().unwrap(), &b0, 2);
    }
}
