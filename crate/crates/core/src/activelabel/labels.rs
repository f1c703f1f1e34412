use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::container::Container;
use crate::error::{input_err, Error, Result};

/// Provenance of a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelKind {
    Sparse,
    Propagated,
    Negative,
    Pseudo,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Sparse => "sparse",
            LabelKind::Propagated => "propagated",
            LabelKind::Negative => "negative",
            LabelKind::Pseudo => "pseudo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub class: usize,
    /// E-step confidence at generation time, in `[0, 1]`.
    pub confidence: f64,
    pub iteration: usize,
}

/// Labels over the point indices of one scene.
///
/// Sparse, propagated and negative entries are pairwise disjoint. Pseudo labels
/// never touch sparse or propagated points but may cover negative ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    pub num_points: usize,
    pub sparse: BTreeMap<usize, usize>,
    pub propagated: BTreeMap<usize, usize>,
    /// Permitted classes (sorted, at least two) per point.
    pub negative: BTreeMap<usize, Vec<usize>>,
    pub pseudo: BTreeMap<usize, PseudoLabel>,
}

impl LabelSet {
    pub fn new(num_points: usize) -> Self {
        Self { num_points, ..Default::default() }
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.num_points {
            return Err(input_err(format!("point {i} out of range ({} points)", self.num_points)));
        }
        Ok(())
    }

    fn annotated(&self, i: usize) -> bool {
        self.sparse.contains_key(&i) || self.propagated.contains_key(&i) || self.negative.contains_key(&i)
    }

    pub fn add_sparse(&mut self, i: usize, class: usize) -> Result<()> {
        self.check_index(i)?;
        if self.annotated(i) || self.pseudo.contains_key(&i) {
            return Err(input_err(format!("point {i} already labeled")));
        }
        self.sparse.insert(i, class);
        Ok(())
    }

    pub fn add_propagated(&mut self, i: usize, class: usize) -> Result<()> {
        self.check_index(i)?;
        if self.annotated(i) || self.pseudo.contains_key(&i) {
            return Err(input_err(format!("point {i} already labeled")));
        }
        self.propagated.insert(i, class);
        Ok(())
    }

    pub fn add_negative(&mut self, i: usize, mut classes: Vec<usize>) -> Result<()> {
        self.check_index(i)?;
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(input_err("a negative label needs at least two permitted classes"));
        }
        if self.annotated(i) {
            return Err(input_err(format!("point {i} already labeled")));
        }
        self.negative.insert(i, classes);
        Ok(())
    }

    /// Adds a pseudo label; returns `false` (and keeps the old one) when the point
    /// is already pseudo-labeled.
    pub fn add_pseudo(&mut self, i: usize, label: PseudoLabel) -> Result<bool> {
        self.check_index(i)?;
        if self.sparse.contains_key(&i) || self.propagated.contains_key(&i) {
            return Err(input_err(format!("point {i} has a definite label")));
        }
        if !(0.0..=1.0).contains(&label.confidence) {
            return Err(input_err("pseudo-label confidence outside [0, 1]"));
        }
        if self.pseudo.contains_key(&i) {
            return Ok(false);
        }
        self.pseudo.insert(i, label);
        Ok(true)
    }

    /// Sparse or propagated class.
    pub fn definite(&self, i: usize) -> Option<usize> {
        self.sparse.get(&i).or_else(|| self.propagated.get(&i)).copied()
    }

    pub fn is_unlabeled(&self, i: usize) -> bool {
        !self.annotated(i) && !self.pseudo.contains_key(&i)
    }

    /// Whether `class` is permitted for point `i` (the `c_ij = 1` indicator).
    pub fn permits(&self, i: usize, class: usize) -> bool {
        if let Some(d) = self.definite(i) {
            return d == class;
        }
        match self.negative.get(&i) {
            Some(set) => set.contains(&class),
            None => true,
        }
    }

    pub fn count(&self, kind: LabelKind) -> usize {
        match kind {
            LabelKind::Sparse => self.sparse.len(),
            LabelKind::Propagated => self.propagated.len(),
            LabelKind::Negative => self.negative.len(),
            LabelKind::Pseudo => self.pseudo.len(),
        }
    }

    /// Concatenates label sets into one index space, scene after scene.
    pub fn concat(sets: &[LabelSet]) -> LabelSet {
        let mut out = LabelSet::new(sets.iter().map(|s| s.num_points).sum());
        let mut off = 0;
        for s in sets {
            out.sparse.extend(s.sparse.iter().map(|(&i, &c)| (i + off, c)));
            out.propagated.extend(s.propagated.iter().map(|(&i, &c)| (i + off, c)));
            out.negative.extend(s.negative.iter().map(|(&i, c)| (i + off, c.clone())));
            out.pseudo.extend(s.pseudo.iter().map(|(&i, &p)| (i + off, p)));
            off += s.num_points;
        }
        out
    }

    /// Inverse of [`LabelSet::concat`] for the given per-scene sizes.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<LabelSet>> {
        if sizes.iter().sum::<usize>() != self.num_points {
            return Err(input_err("split sizes do not add up to the point count"));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &n in sizes {
            let r = off..off + n;
            let mut s = LabelSet::new(n);
            s.sparse.extend(self.sparse.range(r.clone()).map(|(&i, &c)| (i - off, c)));
            s.propagated.extend(self.propagated.range(r.clone()).map(|(&i, &c)| (i - off, c)));
            s.negative.extend(self.negative.range(r.clone()).map(|(&i, c)| (i - off, c.clone())));
            s.pseudo.extend(self.pseudo.range(r).map(|(&i, &p)| (i - off, p)));
            out.push(s);
            off += n;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for &i in self.sparse.keys() {
            if self.propagated.contains_key(&i) || self.negative.contains_key(&i) || self.pseudo.contains_key(&i) {
                return Err(input_err(format!("point {i} has a sparse label and another label")));
            }
        }
        for &i in self.propagated.keys() {
            if self.negative.contains_key(&i) || self.pseudo.contains_key(&i) {
                return Err(input_err(format!("point {i} has a propagated label and another label")));
            }
        }
        for (i, set) in &self.negative {
            if set.len() < 2 || set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(input_err(format!("point {i}: negative set must be sorted with >= 2 classes")));
            }
        }
        let max = [
            self.sparse.keys().next_back(),
            self.propagated.keys().next_back(),
            self.negative.keys().next_back(),
            self.pseudo.keys().next_back(),
        ]
        .into_iter()
        .flatten()
        .max();
        if let Some(&m) = max {
            self.check_index(m)?;
        }
        Ok(())
    }

    /// Line-oriented export: `point_index kind class[,classes...]`, pseudo lines also
    /// carry `conf=` and `iter=` fields.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(usize, LabelKind, String)> = Vec::new();
        rows.extend(self.sparse.iter().map(|(&i, c)| (i, LabelKind::Sparse, c.to_string())));
        rows.extend(self.propagated.iter().map(|(&i, c)| (i, LabelKind::Propagated, c.to_string())));
        rows.extend(self.negative.iter().map(|(&i, set)| {
            let s: Vec<String> = set.iter().map(|c| c.to_string()).collect();
            (i, LabelKind::Negative, s.join(","))
        }));
        rows.extend(self.pseudo.iter().map(|(&i, p)| {
            (i, LabelKind::Pseudo, format!("{} conf={:.6} iter={}", p.class, p.confidence, p.iteration))
        }));
        rows.sort_by_key(|a| (a.0, a.1));
        let mut out = String::new();
        for (i, kind, rest) in rows {
            writeln!(out, "{i} {} {rest}", kind.as_str()).unwrap();
        }
        out
    }

    pub fn write_sections(&self, c: &mut Container, prefix: &str) -> Result<()> {
        c.push_i64(&format!("{prefix}num_points"), &[1], vec![self.num_points as i64])?;
        let pairs =
            |m: &BTreeMap<usize, usize>| -> Vec<i64> { m.iter().flat_map(|(&i, &c)| [i as i64, c as i64]).collect() };
        c.push_i64(&format!("{prefix}sparse"), &[self.sparse.len(), 2], pairs(&self.sparse))?;
        c.push_i64(&format!("{prefix}propagated"), &[self.propagated.len(), 2], pairs(&self.propagated))?;
        // negative: (point, offset) index plus flat class list
        let mut index = Vec::new();
        let mut flat = Vec::new();
        for (&i, set) in &self.negative {
            index.push(i as i64);
            index.push(set.len() as i64);
            flat.extend(set.iter().map(|&c| c as i64));
        }
        c.push_i64(&format!("{prefix}negative.index"), &[self.negative.len(), 2], index)?;
        c.push_i64(&format!("{prefix}negative.classes"), &[flat.len()], flat)?;
        let mut pi = Vec::new();
        let mut pc = Vec::new();
        for (&i, p) in &self.pseudo {
            pi.extend([i as i64, p.class as i64, p.iteration as i64]);
            pc.push(p.confidence);
        }
        c.push_i64(&format!("{prefix}pseudo"), &[self.pseudo.len(), 3], pi)?;
        c.push_f64(&format!("{prefix}pseudo.confidence"), &[self.pseudo.len()], pc)?;
        Ok(())
    }

    pub fn read_sections(c: &Container, prefix: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("label section `{prefix}{what}` malformed"));
        let num_points = c.i64(&format!("{prefix}num_points"))?.1[0] as usize;
        let mut out = LabelSet::new(num_points);
        let read_pairs = |name: &str| -> Result<Vec<(usize, usize)>> {
            let (_, v) = c.i64(&format!("{prefix}{name}"))?;
            if v.len() % 2 != 0 || v.iter().any(|&x| x < 0) {
                return Err(bad(name));
            }
            Ok(v.chunks_exact(2).map(|p| (p[0] as usize, p[1] as usize)).collect())
        };
        out.sparse = read_pairs("sparse")?.into_iter().collect();
        out.propagated = read_pairs("propagated")?.into_iter().collect();
        let index = read_pairs("negative.index")?;
        let (_, flat) = c.i64(&format!("{prefix}negative.classes"))?;
        let mut at = 0usize;
        for (i, len) in index {
            let end = at + len;
            if end > flat.len() {
                return Err(bad("negative.classes"));
            }
            out.negative.insert(i, flat[at..end].iter().map(|&x| x as usize).collect());
            at = end;
        }
        let (_, pi) = c.i64(&format!("{prefix}pseudo"))?;
        let (_, pc) = c.f64(&format!("{prefix}pseudo.confidence"))?;
        if pi.len() != 3 * pc.len() {
            return Err(bad("pseudo"));
        }
        for (row, &conf) in pi.chunks_exact(3).zip(pc) {
            out.pseudo.insert(
                row[0] as usize,
                PseudoLabel { class: row[1] as usize, confidence: conf, iteration: row[2] as usize },
            );
        }
        out.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(out)
    }
}

/// Flat cluster assignment; `-1` marks noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    pub cluster_id: Vec<i64>,
    pub num_clusters: usize,
}

impl Clustering {
    pub fn all_noise(n: usize) -> Self {
        Self { cluster_id: vec![-1; n], num_clusters: 0 }
    }

    /// Member indices per cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, &c) in self.cluster_id.iter().enumerate() {
            if c >= 0 {
                out[c as usize].push(i);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_clusters];
        for &c in &self.cluster_id {
            if c < -1 || c >= self.num_clusters as i64 {
                return Err(input_err(format!("cluster id {c} outside [-1, {})", self.num_clusters)));
            }
            if c >= 0 {
                seen[c as usize] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(input_err("cluster ids are not dense"));
        }
        Ok(())
    }

    /// Annotation units: the detected ground as unit 0 (when non-empty), followed
    /// by the clusters of the non-ground points (`sub` is indexed like `non_ground`).
    pub fn with_ground(ground: &[bool], non_ground: &[usize], sub: &Clustering) -> Self {
        let has_ground = ground.iter().any(|&g| g);
        let offset = has_ground as i64;
        let mut cluster_id = vec![-1i64; ground.len()];
        for (i, &g) in ground.iter().enumerate() {
            if g {
                cluster_id[i] = 0;
            }
        }
        for (k, &i) in non_ground.iter().enumerate() {
            let c = sub.cluster_id[k];
            if c >= 0 {
                cluster_id[i] = c + offset;
            }
        }
        Self { cluster_id, num_clusters: sub.num_clusters + offset as usize }
    }
}
