//! HDBSCAN: core distances, mutual reachability, Prim MST, condensed tree and
//! excess-of-mass selection.
//!
//! MST edges of equal weight are merged as a single multi-way split, so the
//! hierarchy is the level-set tree of the mutual-reachability graph and does not
//! depend on which of several equal-weight MSTs Prim happened to find.

use super::labels::Clustering;
use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HdbscanConfig {
    pub min_cluster_size: usize,
    /// Neighbour count for core distances, the point itself included.
    pub min_samples: usize,
}

impl Default for HdbscanConfig {
    fn default() -> Self {
        Self { min_cluster_size: 10, min_samples: 5 }
    }
}

impl HdbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 || self.min_samples < 1 {
            return Err(input_err("HDBSCAN needs min_cluster_size >= 2 and min_samples >= 1"));
        }
        Ok(())
    }
}

fn dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance to the `min_samples`-th nearest neighbour, counting the point itself.
pub fn core_distances<const D: usize>(points: &[[f64; D]], min_samples: usize) -> Vec<f64> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = min_samples.clamp(1, n);
    let mut buf = vec![0.0; n];
    points
        .iter()
        .map(|p| {
            for (j, q) in points.iter().enumerate() {
                buf[j] = dist(p, q);
            }
            *buf.select_nth_unstable_by(k - 1, f64::total_cmp).1
        })
        .collect()
}

/// Minimum spanning tree of the mutual-reachability graph as `(a, b, weight)`.
pub fn mutual_reachability_mst<const D: usize>(points: &[[f64; D]], core: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = points.len();
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    if n < 2 {
        return edges;
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let w = dist(&points[cur], &points[j]).max(core[cur]).max(core[j]);
            if w < best[j] {
                best[j] = w;
                from[j] = cur;
            }
            if next == usize::MAX || best[j] < best[next] {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next], next, best[next]));
        cur = next;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.parent[a.max(b)] = a.min(b);
        }
    }
}

/// Multi-way single-linkage hierarchy. Nodes `0..n` are points.
struct Hierarchy {
    children: Vec<Vec<usize>>,
    weight: Vec<f64>,
    size: Vec<usize>,
}

fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Hierarchy {
    edges.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut h = Hierarchy { children: vec![Vec::new(); n], weight: vec![0.0; n], size: vec![1; n] };
    // component representative point -> current hierarchy node
    let mut uf = UnionFind::new(n);
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut start = 0;
    while start < edges.len() {
        let w = edges[start].2;
        let mut end = start;
        while end < edges.len() && edges[end].2 == w {
            end += 1;
        }
        let group = &edges[start..end];
        let roots_before: Vec<(usize, usize)> = group.iter().map(|&(a, b, _)| (uf.find(a), uf.find(b))).collect();
        for &(a, b, _) in group {
            uf.union(a, b);
        }
        // new root -> merged previous components
        let mut merged: Vec<(usize, Vec<usize>)> = Vec::new();
        for (ra, rb) in roots_before {
            let root = uf.find(ra);
            let slot = match merged.iter().position(|(r, _)| *r == root) {
                Some(s) => s,
                None => {
                    merged.push((root, Vec::new()));
                    merged.len() - 1
                }
            };
            for r in [ra, rb] {
                if !merged[slot].1.contains(&r) {
                    merged[slot].1.push(r);
                }
            }
        }
        for (root, parts) in merged {
            let kids: Vec<usize> = parts.iter().map(|&r| node_of[r]).collect();
            let id = h.children.len();
            h.size.push(kids.iter().map(|&k| h.size[k]).sum());
            h.children.push(kids);
            h.weight.push(w);
            node_of[root] = id;
        }
        start = end;
    }
    h
}

/// Condensed tree in flat form.
#[derive(Debug, Clone, Default)]
pub struct CondensedTree {
    /// Parent cluster of each cluster (`usize::MAX` for the root, cluster 0).
    pub parent: Vec<usize>,
    pub birth: Vec<f64>,
    pub stability: Vec<f64>,
    /// `(cluster, lambda)` at which each point leaves the tree.
    pub point_exit: Vec<(usize, f64)>,
}

fn lambda(w: f64) -> f64 {
    1.0 / w.max(f64::MIN_POSITIVE)
}

fn condense(h: &Hierarchy, n: usize, min_cluster_size: usize) -> CondensedTree {
    let mut t = CondensedTree {
        parent: vec![usize::MAX],
        birth: vec![0.0],
        stability: vec![0.0],
        point_exit: vec![(0, 0.0); n],
    };
    let root = h.children.len() - 1;
    let mut stack = vec![(root, 0usize)];
    let mut leaves = Vec::new();
    while let Some((node, cluster)) = stack.pop() {
        if node < n {
            t.point_exit[node] = (cluster, f64::INFINITY);
            continue;
        }
        let l = lambda(h.weight[node]);
        let big: Vec<usize> = h.children[node].iter().copied().filter(|&c| h.size[c] >= min_cluster_size).collect();
        for &child in &h.children[node] {
            let spawn = big.len() >= 2 && big.contains(&child);
            if spawn {
                let id = t.parent.len();
                t.parent.push(cluster);
                t.birth.push(l);
                t.stability.push(0.0);
                t.stability[cluster] += (l - t.birth[cluster]) * h.size[child] as f64;
                stack.push((child, id));
            } else if big.len() == 1 && big[0] == child {
                stack.push((child, cluster));
            } else {
                leaves.clear();
                collect_leaves(h, n, child, &mut leaves);
                t.stability[cluster] += (l - t.birth[cluster]) * leaves.len() as f64;
                for &p in &leaves {
                    t.point_exit[p] = (cluster, l);
                }
            }
        }
    }
    t
}

fn collect_leaves(h: &Hierarchy, n: usize, node: usize, out: &mut Vec<usize>) {
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            stack.extend_from_slice(&h.children[x]);
        }
    }
}

/// Excess-of-mass selection; the root is never selected.
fn select(t: &CondensedTree) -> Vec<bool> {
    let m = t.parent.len();
    let mut children = vec![Vec::new(); m];
    for c in 1..m {
        children[t.parent[c]].push(c);
    }
    let mut selected = vec![false; m];
    let mut score = t.stability.clone();
    for c in (1..m).rev() {
        let sub: f64 = children[c].iter().map(|&k| score[k]).sum();
        if children[c].is_empty() || sub <= t.stability[c] {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend_from_slice(&children[k]);
            }
        } else {
            score[c] = sub;
        }
    }
    selected
}

pub fn hdbscan<const D: usize>(points: &[[f64; D]], cfg: &HdbscanConfig) -> Result<Clustering> {
    cfg.validate()?;
    let n = points.len();
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(input_err("HDBSCAN input contains non-finite coordinates"));
    }
    if n < cfg.min_cluster_size || n < 2 {
        return Ok(Clustering::all_noise(n));
    }
    let core = core_distances(points, cfg.min_samples);
    let mst = mutual_reachability_mst(points, &core);
    let tree = condense(&single_linkage(n, mst), n, cfg.min_cluster_size);
    let selected = select(&tree);

    // nearest selected ancestor, per condensed cluster
    let mut owner = vec![usize::MAX; tree.parent.len()];
    for c in 1..tree.parent.len() {
        let p = tree.parent[c];
        owner[c] = if selected[c] {
            c
        } else if p == 0 {
            usize::MAX
        } else {
            owner[p]
        };
    }
    let mut dense = vec![usize::MAX; tree.parent.len()];
    let mut next = 0usize;
    let cluster_id = tree
        .point_exit
        .iter()
        .map(|&(c, _)| {
            let o = if c == 0 { usize::MAX } else { owner[c] };
            if o == usize::MAX {
                return -1;
            }
            if dense[o] == usize::MAX {
                dense[o] = next;
                next += 1;
            }
            dense[o] as i64
        })
        .collect();
    Ok(Clustering { cluster_id, num_clusters: next })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_input_is_noise() {
        let pts = [[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0]];
        let c = hdbscan(&pts, &HdbscanConfig { min_cluster_size: 10, min_samples: 3 }).unwrap();
        assert_eq!(c, Clustering::all_noise(5));
    }

    #[test]
    fn core_distance_counts_self() {
        let pts = [[0.0], [1.0], [3.0]];
        assert_eq!(core_distances(&pts, 1), vec![0.0, 0.0, 0.0]);
        assert_eq!(core_distances(&pts, 2), vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn ties_merge_as_one_level() {
        // four equidistant points on a line plus a far pair: equal weights form one node
        let h = single_linkage(4, vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 2.0)]);
        assert_eq!(h.children.len(), 6);
        assert_eq!(h.children[4].len(), 3);
        assert_eq!(h.size[5], 4);
    }

    #[test]
    fn separated_squares() {
        let mut pts = Vec::new();
        for k in 0..25 {
            pts.push([(k % 5) as f64 * 0.1, (k / 5) as f64 * 0.1]);
            pts.push([10.0 + (k % 5) as f64 * 0.1, (k / 5) as f64 * 0.1]);
        }
        let c = hdbscan(&pts, &HdbscanConfig { min_cluster_size: 5, min_samples: 3 }).unwrap();
        assert_eq!(c.num_clusters, 2);
        for (i, &id) in c.cluster_id.iter().enumerate() {
            assert_eq!(id, (i % 2) as i64);
        }
    }
}
