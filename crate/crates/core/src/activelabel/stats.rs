use super::labels::LabelSet;
use crate::error::{input_err, Result};

/// Label coverage over a dataset. The sparse rate is taken against every point of
/// the full clouds, the propagated and negative rates against the training points
/// (the points the label sets are defined over).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelStatistics {
    pub total_points: usize,
    pub training_points: usize,
    pub sparse: usize,
    pub propagated: usize,
    pub negative: usize,
    pub sparse_rate: f64,
    pub propagated_rate: f64,
    pub negative_rate: f64,
}

/// `full_cloud_sizes[k]` is the size of scene `k` before restriction to training points.
pub fn label_statistics(sets: &[LabelSet], full_cloud_sizes: &[usize]) -> Result<LabelStatistics> {
    if sets.len() != full_cloud_sizes.len() {
        return Err(input_err("one full-cloud size per label set is required"));
    }
    if sets.iter().zip(full_cloud_sizes).any(|(s, &n)| s.num_points > n) {
        return Err(input_err("a label set covers more points than its full cloud"));
    }
    let total_points: usize = full_cloud_sizes.iter().sum();
    let training_points: usize = sets.iter().map(|s| s.num_points).sum();
    let sparse: usize = sets.iter().map(|s| s.sparse.len()).sum();
    let propagated: usize = sets.iter().map(|s| s.propagated.len()).sum();
    let negative: usize = sets.iter().map(|s| s.negative.len()).sum();
    let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(LabelStatistics {
        total_points,
        training_points,
        sparse,
        propagated,
        negative,
        sparse_rate: rate(sparse, total_points),
        propagated_rate: rate(propagated, training_points),
        negative_rate: rate(negative, training_points),
    })
}
