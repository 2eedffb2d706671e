//! Class-similarity rankings and the temperature schedule.
//!
//! A ranking assigns, per anchor class, an ordered list of rank sets: rank 1
//! is implicitly the anchor's own class, ranks 2.. are the listed entries in
//! order, and every class mentioned nowhere is a negative. Rankings are
//! directional; `a: [b]` says nothing about how `b` ranks `a`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown class name {name:?} (line {line})")]
    UnknownClass { name: String, line: usize },
    #[error("class {name:?} ranked twice for anchor {anchor:?} (ranks {first} and {second})")]
    DuplicateRank {
        anchor: String,
        name: String,
        first: usize,
        second: usize,
    },
    #[error("anchor {name:?} listed twice (lines {first} and {second})")]
    DuplicateAnchor {
        name: String,
        first: usize,
        second: usize,
    },
    #[error("anchor {name:?} ranks itself (line {line})")]
    SelfRank { name: String, line: usize },
    #[error("empty rank set for anchor {name:?} (line {line})")]
    EmptyRankSet { name: String, line: usize },
    #[error("invalid class id {id} (have {count} classes)")]
    InvalidClassId { id: usize, count: usize },
    #[error("temperature schedule: {0}")]
    Schedule(String),
}

/// Where one class stands relative to an anchor class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    /// 1 = same class; 2.. = listed similarity ranks.
    Level(usize),
    /// Not ranked: a plain negative.
    Negative,
}

/// Per-class similarity rankings over a fixed set of named classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingTable {
    names: Vec<String>,
    /// ranks[c][k] is the set of class ids at rank k+2 for anchor class c,
    /// each set sorted by id. Lists may have different lengths per class.
    ranks: Vec<Vec<Vec<usize>>>,
}

impl RankingTable {
    /// Table with no listed ranks: every non-anchor class is negative (r=1).
    pub fn flat(names: &[String]) -> RankingTable {
        RankingTable {
            names: names.to_vec(),
            ranks: vec![Vec::new(); names.len()],
        }
    }

    /// Build directly from id lists. `ranks[c]` are the rank sets for class c
    /// starting at rank 2.
    pub fn from_ids(names: &[String], ranks: Vec<Vec<Vec<usize>>>) -> Result<RankingTable, RankingError> {
        if ranks.len() != names.len() {
            return Err(RankingError::Schedule(format!(
                "rank lists for {} classes, {} names",
                ranks.len(),
                names.len()
            )));
        }
        let mut table = RankingTable {
            names: names.to_vec(),
            ranks,
        };
        for c in 0..table.names.len() {
            let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
            for (k, set) in table.ranks[c].iter_mut().enumerate() {
                if set.is_empty() {
                    return Err(RankingError::EmptyRankSet {
                        name: table.names[c].clone(),
                        line: 0,
                    });
                }
                set.sort_unstable();
                for &id in set.iter() {
                    if id >= table.names.len() {
                        return Err(RankingError::InvalidClassId {
                            id,
                            count: table.names.len(),
                        });
                    }
                    if id == c {
                        return Err(RankingError::SelfRank {
                            name: table.names[c].clone(),
                            line: 0,
                        });
                    }
                    if let Some(&first) = seen.get(&id) {
                        return Err(RankingError::DuplicateRank {
                            anchor: table.names[c].clone(),
                            name: table.names[id].clone(),
                            first,
                            second: k + 2,
                        });
                    }
                    seen.insert(id, k + 2);
                }
                if set.windows(2).any(|w| w[0] == w[1]) {
                    let dup = set.windows(2).find(|w| w[0] == w[1]).unwrap()[0];
                    return Err(RankingError::DuplicateRank {
                        anchor: table.names[c].clone(),
                        name: table.names[dup].clone(),
                        first: k + 2,
                        second: k + 2,
                    });
                }
            }
        }
        Ok(table)
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Rank sets for one anchor class, starting at rank 2.
    pub fn rank_sets(&self, class: usize) -> &[Vec<usize>] {
        &self.ranks[class]
    }

    /// Total rank count for one anchor class, including the implicit rank 1.
    pub fn depth(&self, class: usize) -> usize {
        1 + self.ranks[class].len()
    }

    /// Maximum rank count over all classes; the schedule must cover this.
    pub fn max_depth(&self) -> usize {
        1 + self.ranks.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Rank of `other` relative to `anchor`.
    pub fn rank_of(&self, anchor: usize, other: usize) -> Result<Rank, RankingError> {
        let count = self.names.len();
        for id in [anchor, other] {
            if id >= count {
                return Err(RankingError::InvalidClassId { id, count });
            }
        }
        if anchor == other {
            return Ok(Rank::Level(1));
        }
        for (k, set) in self.ranks[anchor].iter().enumerate() {
            if set.binary_search(&other).is_ok() {
                return Ok(Rank::Level(k + 2));
            }
        }
        Ok(Rank::Negative)
    }

    /// Keep only ranks `<= depth` (depth 1 drops every listed rank).
    pub fn truncated(&self, depth: usize) -> RankingTable {
        let keep = depth.saturating_sub(1);
        RankingTable {
            names: self.names.clone(),
            ranks: self
                .ranks
                .iter()
                .map(|sets| sets.iter().take(keep).cloned().collect())
                .collect(),
        }
    }

    /// Drop the given classes entirely: their anchor rows disappear, every
    /// reference to them is deleted, rank sets left empty are removed with the
    /// later ranks shifted up, and the surviving class ids are compacted in
    /// their original order. Returns the new table and the old→new id map.
    pub fn without_classes(&self, withheld: &[usize]) -> Result<(RankingTable, Vec<Option<usize>>), RankingError> {
        let count = self.names.len();
        for &id in withheld {
            if id >= count {
                return Err(RankingError::InvalidClassId { id, count });
            }
        }
        let mut keep = vec![true; count];
        for &id in withheld {
            keep[id] = false;
        }
        if keep.iter().all(|k| !k) {
            return Err(RankingError::Schedule("all classes withheld".into()));
        }
        let mut remap: Vec<Option<usize>> = Vec::with_capacity(count);
        let mut next = 0;
        for &k in &keep {
            if k {
                remap.push(Some(next));
                next += 1;
            } else {
                remap.push(None);
            }
        }
        let mut names = Vec::with_capacity(next);
        let mut ranks = Vec::with_capacity(next);
        for c in 0..count {
            if !keep[c] {
                continue;
            }
            names.push(self.names[c].clone());
            let mut sets: Vec<Vec<usize>> = Vec::new();
            for set in &self.ranks[c] {
                let filtered: Vec<usize> = set.iter().filter_map(|&id| remap[id]).collect();
                if !filtered.is_empty() {
                    sets.push(filtered);
                }
            }
            ranks.push(sets);
        }
        Ok((RankingTable { names, ranks }, remap))
    }

    /// Canonical text form; `parse` of the output reproduces the table.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (c, sets) in self.ranks.iter().enumerate() {
            if sets.is_empty() {
                continue;
            }
            write!(out, "{}: [", self.names[c]).unwrap();
            for (k, set) in sets.iter().enumerate() {
                if k > 0 {
                    out.push_str(", ");
                }
                if set.len() == 1 {
                    out.push_str(&self.names[set[0]]);
                } else {
                    out.push('{');
                    for (j, &id) in set.iter().enumerate() {
                        if j > 0 {
                            out.push_str(", ");
                        }
                        out.push_str(&self.names[id]);
                    }
                    out.push('}');
                }
            }
            out.push_str("]\n");
        }
        out
    }

    /// Parse the ranking document format:
    ///
    /// ```text
    /// # comment
    /// airplane: [bird, ship]
    /// cat: [dog, {deer, horse}]
    /// ```
    ///
    /// One line per anchor class; entries in order of decreasing similarity;
    /// braces group classes sharing one rank. Classes without a line get no
    /// listed ranks. Unknown names anywhere are errors.
    pub fn parse(text: &str, names: &[String]) -> Result<RankingTable, RankingError> {
        let resolve = |token: &str, line: usize| -> Result<usize, RankingError> {
            names
                .iter()
                .position(|n| n == token)
                .ok_or_else(|| RankingError::UnknownClass {
                    name: token.to_string(),
                    line,
                })
        };

        let mut ranks: Vec<Vec<Vec<usize>>> = vec![Vec::new(); names.len()];
        let mut anchor_lines: BTreeMap<usize, usize> = BTreeMap::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(':').ok_or_else(|| RankingError::Syntax {
                line: line_no,
                reason: "expected `class: [entries]`".into(),
            })?;
            let key = key.trim();
            let anchor = resolve(key, line_no)?;
            if let Some(&first) = anchor_lines.get(&anchor) {
                return Err(RankingError::DuplicateAnchor {
                    name: key.to_string(),
                    first,
                    second: line_no,
                });
            }
            anchor_lines.insert(anchor, line_no);

            let rest = rest.trim();
            let body = rest
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| RankingError::Syntax {
                    line: line_no,
                    reason: "entries must be bracketed: [a, {b, c}]".into(),
                })?
                .trim();

            let mut sets: Vec<Vec<usize>> = Vec::new();
            let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
            let mut rank_self = |set: Vec<usize>, sets: &mut Vec<Vec<usize>>| -> Result<(), RankingError> {
                let rank = sets.len() + 2;
                for &id in &set {
                    if id == anchor {
                        return Err(RankingError::SelfRank {
                            name: key.to_string(),
                            line: line_no,
                        });
                    }
                    if let Some(&first) = seen.get(&id) {
                        return Err(RankingError::DuplicateRank {
                            anchor: key.to_string(),
                            name: names[id].clone(),
                            first,
                            second: rank,
                        });
                    }
                    seen.insert(id, rank);
                }
                let mut set = set;
                set.sort_unstable();
                sets.push(set);
                Ok(())
            };

            let mut chars = body.char_indices().peekable();
            let mut cursor = 0;
            while cursor < body.len() {
                // skip separators; the cursor only advances on real tokens
                while let Some(&(_, c)) = chars.peek() {
                    if c == ',' || c.is_whitespace() {
                        chars.next();
                    } else {
                        break;
                    }
                }
                let Some(&(start, c)) = chars.peek() else { break };
                if c == '{' {
                    chars.next();
                    let mut end = None;
                    for (i, c2) in chars.by_ref() {
                        if c2 == '}' {
                            end = Some(i);
                            break;
                        }
                        if c2 == '{' {
                            return Err(RankingError::Syntax {
                                line: line_no,
                                reason: "nested braces".into(),
                            });
                        }
                    }
                    let end = end.ok_or_else(|| RankingError::Syntax {
                        line: line_no,
                        reason: "unclosed brace".into(),
                    })?;
                    let inner = &body[start + 1..end];
                    let mut set = Vec::new();
                    for token in inner.split(',') {
                        let token = token.trim();
                        if token.is_empty() {
                            continue;
                        }
                        set.push(resolve(token, line_no)?);
                    }
                    if set.is_empty() {
                        return Err(RankingError::EmptyRankSet {
                            name: key.to_string(),
                            line: line_no,
                        });
                    }
                    rank_self(set, &mut sets)?;
                    cursor = end + 1;
                } else {
                    let mut end = body.len();
                    while let Some(&(i, c2)) = chars.peek() {
                        if c2 == ',' || c2 == '{' {
                            end = i;
                            break;
                        }
                        chars.next();
                        if chars.peek().is_none() {
                            end = body.len();
                        }
                    }
                    let token = body[start..end].trim();
                    if token.is_empty() {
                        cursor = end;
                        continue;
                    }
                    if token.contains('}') {
                        return Err(RankingError::Syntax {
                            line: line_no,
                            reason: "stray closing brace".into(),
                        });
                    }
                    rank_self(vec![resolve(token, line_no)?], &mut sets)?;
                    cursor = end;
                }
            }
            ranks[anchor] = sets;
        }
        RankingTable::from_ids(names, ranks)
    }
}

/// Strictly increasing positive temperatures, one per rank level.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureSchedule {
    taus: Vec<f64>,
}

impl TemperatureSchedule {
    pub fn new(taus: Vec<f64>) -> Result<TemperatureSchedule, RankingError> {
        if taus.is_empty() {
            return Err(RankingError::Schedule("needs at least one temperature".into()));
        }
        if taus.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(RankingError::Schedule(format!(
                "temperatures must be positive and finite, got {taus:?}"
            )));
        }
        if taus.windows(2).any(|w| w[1] <= w[0]) {
            return Err(RankingError::Schedule(format!(
                "temperatures must strictly increase, got {taus:?}"
            )));
        }
        Ok(TemperatureSchedule { taus })
    }

    /// Geometric schedule τ_i = tau1·growth^(i-1).
    pub fn geometric(r: usize, tau1: f64, growth: f64) -> Result<TemperatureSchedule, RankingError> {
        if r < 1 {
            return Err(RankingError::Schedule("rank count must be >= 1".into()));
        }
        if !(tau1 > 0.0) {
            return Err(RankingError::Schedule(format!("tau1 must be positive, got {tau1}")));
        }
        if r > 1 && growth <= 1.0 {
            return Err(RankingError::Schedule(format!(
                "growth must exceed 1 for an increasing schedule, got {growth}"
            )));
        }
        let taus = (0..r).map(|i| tau1 * growth.powi(i as i32)).collect();
        TemperatureSchedule::new(taus)
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn tau(&self, level: usize) -> f64 {
        self.taus[level - 1]
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    /// Truncate to the first `r` levels.
    pub fn truncated(&self, r: usize) -> Result<TemperatureSchedule, RankingError> {
        if r == 0 || r > self.taus.len() {
            return Err(RankingError::Schedule(format!(
                "cannot truncate schedule of length {} to {r}",
                self.taus.len()
            )));
        }
        Ok(TemperatureSchedule {
            taus: self.taus[..r].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_names() -> Vec<String> {
        ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn parse_two_entry_list() {
        let t = RankingTable::parse("airplane: [bird, ship]", &cifar_names()).unwrap();
        let a = t.class_id("airplane").unwrap();
        assert_eq!(t.rank_sets(a), &[vec![2], vec![8]]);
        assert_eq!(t.depth(a), 3);
        assert_eq!(t.rank_of(a, t.class_id("bird").unwrap()).unwrap(), Rank::Level(2));
        assert_eq!(t.rank_of(a, t.class_id("ship").unwrap()).unwrap(), Rank::Level(3));
        assert_eq!(t.rank_of(a, t.class_id("dog").unwrap()).unwrap(), Rank::Negative);
        assert_eq!(t.rank_of(a, a).unwrap(), Rank::Level(1));
    }

    #[test]
    fn parse_empty_config_is_flat() {
        let t = RankingTable::parse("# nothing ranked\n", &cifar_names()).unwrap();
        assert_eq!(t.max_depth(), 1);
        assert_eq!(t.rank_of(0, 1).unwrap(), Rank::Negative);
    }

    #[test]
    fn parse_tied_set() {
        let t = RankingTable::parse("cat: [dog, {deer, horse}]", &cifar_names()).unwrap();
        let c = t.class_id("cat").unwrap();
        assert_eq!(t.rank_sets(c), &[vec![5], vec![4, 7]]);
        assert_eq!(t.rank_of(c, 4).unwrap(), Rank::Level(3));
        assert_eq!(t.rank_of(c, 7).unwrap(), Rank::Level(3));
        assert_eq!(t.rank_of(c, 5).unwrap(), Rank::Level(2));
    }

    #[test]
    fn parse_rejects_unknown_name() {
        let err = RankingTable::parse("airplane: [zeppelin]", &cifar_names()).unwrap_err();
        assert!(matches!(err, RankingError::UnknownClass { ref name, .. } if name == "zeppelin"));
        let err = RankingTable::parse("zeppelin: [bird]", &cifar_names()).unwrap_err();
        assert!(matches!(err, RankingError::UnknownClass { .. }));
    }

    #[test]
    fn parse_rejects_duplicate_across_ranks() {
        let err = RankingTable::parse("cat: [dog, {deer, dog}]", &cifar_names()).unwrap_err();
        match err {
            RankingError::DuplicateRank { anchor, name, first, second } => {
                assert_eq!(anchor, "cat");
                assert_eq!(name, "dog");
                assert_eq!((first, second), (2, 3));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn parse_rejects_self_empty_and_duplicate_anchor() {
        let names = cifar_names();
        assert!(matches!(
            RankingTable::parse("cat: [cat]", &names),
            Err(RankingError::SelfRank { .. })
        ));
        assert!(matches!(
            RankingTable::parse("cat: [{}]", &names),
            Err(RankingError::EmptyRankSet { .. })
        ));
        assert!(matches!(
            RankingTable::parse("cat: [dog]\ncat: [deer]", &names),
            Err(RankingError::DuplicateAnchor { .. })
        ));
    }

    #[test]
    fn rank_of_rejects_bad_ids() {
        let t = RankingTable::flat(&cifar_names());
        assert!(matches!(t.rank_of(0, 10), Err(RankingError::InvalidClassId { .. })));
    }

    #[test]
    fn directional_not_symmetrized() {
        let t = RankingTable::parse("airplane: [bird]", &cifar_names()).unwrap();
        assert_eq!(t.rank_of(0, 2).unwrap(), Rank::Level(2));
        assert_eq!(t.rank_of(2, 0).unwrap(), Rank::Negative);
    }

    #[test]
    fn rank_sets_partition_classes() {
        let names = cifar_names();
        let t = RankingTable::parse(
            "airplane: [bird, ship]\ncat: [dog, {deer, horse}]\ntruck: [automobile]",
            &names,
        )
        .unwrap();
        for anchor in 0..names.len() {
            let mut covered = vec![0usize; names.len()];
            for other in 0..names.len() {
                match t.rank_of(anchor, other).unwrap() {
                    Rank::Level(_) | Rank::Negative => covered[other] += 1,
                }
            }
            assert!(covered.iter().all(|&c| c == 1));
            // listed sets plus self plus negatives must cover with no overlap
            let listed: usize = t.rank_sets(anchor).iter().map(Vec::len).sum();
            let negatives = (0..names.len())
                .filter(|&o| t.rank_of(anchor, o).unwrap() == Rank::Negative)
                .count();
            assert_eq!(1 + listed + negatives, names.len());
        }
    }

    #[test]
    fn serialize_parse_round_trip() {
        let names = cifar_names();
        let t = RankingTable::parse(
            "airplane: [bird, ship]\ncat: [dog, {deer, horse}]\nship: [{airplane, truck}]",
            &names,
        )
        .unwrap();
        let text = t.serialize();
        let back = RankingTable::parse(&text, &names).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn truncated_drops_deep_ranks() {
        let t = RankingTable::parse("cat: [dog, {deer, horse}]", &cifar_names()).unwrap();
        let t2 = t.truncated(2);
        let c = t2.class_id("cat").unwrap();
        assert_eq!(t2.rank_sets(c), &[vec![5]]);
        assert_eq!(t2.max_depth(), 2);
        let t1 = t.truncated(1);
        assert_eq!(t1.max_depth(), 1);
    }

    #[test]
    fn without_classes_compacts_and_remaps() {
        let names = cifar_names();
        // cat ranks dog then {deer, horse}; withholding dog and deer must
        // leave cat ranking only horse, shifted up to rank 2.
        let t = RankingTable::parse("cat: [dog, {deer, horse}]\nairplane: [dog]", &names).unwrap();
        let (t2, remap) = t.without_classes(&[5, 4]).unwrap();
        assert_eq!(t2.class_count(), 8);
        assert_eq!(remap[5], None);
        assert_eq!(remap[4], None);
        let cat = t2.class_id("cat").unwrap();
        let horse = t2.class_id("horse").unwrap();
        assert_eq!(t2.rank_sets(cat), &[vec![horse]]);
        assert_eq!(t2.rank_of(cat, horse).unwrap(), Rank::Level(2));
        // airplane ranked only dog; its list collapses to flat
        let a2 = t2.class_id("airplane").unwrap();
        assert_eq!(t2.depth(a2), 1);
    }

    #[test]
    fn without_all_classes_errors() {
        let names = vec!["a".to_string(), "b".to_string()];
        let t = RankingTable::flat(&names);
        assert!(t.without_classes(&[0, 1]).is_err());
    }

    #[test]
    fn schedule_geometric_examples() {
        let s = TemperatureSchedule::geometric(1, 0.1, 1.5).unwrap();
        assert_eq!(s.taus(), &[0.1]);
        let s = TemperatureSchedule::geometric(3, 0.1, 2.0).unwrap();
        assert_eq!(s.taus(), &[0.1, 0.2, 0.4]);
        assert!(TemperatureSchedule::geometric(2, 0.07, 1.0).is_err());
    }

    #[test]
    fn schedule_rejects_non_increasing() {
        assert!(TemperatureSchedule::new(vec![0.1, 0.1]).is_err());
        assert!(TemperatureSchedule::new(vec![0.2, 0.1]).is_err());
        assert!(TemperatureSchedule::new(vec![-0.1, 0.2]).is_err());
        assert!(TemperatureSchedule::new(vec![0.1, 0.2, 0.4]).is_ok());
    }
}
