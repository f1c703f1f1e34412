use std::collections::BTreeMap;

use super::labels::{Clustering, LabelSet};
use crate::error::{input_err, Result};
use crate::geometry::Point3;

fn d(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Member minimizing the summed distance to the others; ties go to the smallest index.
pub fn medoid(points: &[Point3], members: &[usize]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for &i in members {
        let cost: f64 = members.iter().map(|&j| d(&points[i], &points[j])).sum();
        if best.is_none_or(|(bc, bi)| cost < bc || (cost == bc && i < bi)) {
            best = Some((cost, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Oracle annotator over clusters: a pure cluster gets one click at its medoid and
/// the class propagates to the rest; a mixed cluster gets one click per class (at
/// the class medoid) and every other member a negative label naming the classes.
pub fn simulate_annotation(points: &[Point3], clustering: &Clustering, gt_class: &[usize]) -> Result<LabelSet> {
    if points.len() != gt_class.len() || points.len() != clustering.cluster_id.len() {
        return Err(input_err("points, clustering and gt_class differ in length"));
    }
    clustering.validate()?;
    let mut labels = LabelSet::new(points.len());
    for members in clustering.members() {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &members {
            by_class.entry(gt_class[i]).or_default().push(i);
        }
        if by_class.len() == 1 {
            let (&class, _) = by_class.iter().next().unwrap();
            let click = medoid(points, &members).unwrap();
            labels.add_sparse(click, class)?;
            for &i in members.iter().filter(|&&i| i != click) {
                labels.add_propagated(i, class)?;
            }
        } else {
            let classes: Vec<usize> = by_class.keys().copied().collect();
            let mut clicks = Vec::with_capacity(classes.len());
            for (&class, of_class) in &by_class {
                let click = medoid(points, of_class).unwrap();
                labels.add_sparse(click, class)?;
                clicks.push(click);
            }
            for &i in members.iter().filter(|i| !clicks.contains(i)) {
                labels.add_negative(i, classes.clone())?;
            }
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medoid_of_line_is_middle() {
        let pts: Vec<Point3> = (0..5).map(|k| [k as f64, 0.0, 0.0]).collect();
        assert_eq!(medoid(&pts, &[0, 1, 2, 3, 4]), Some(2));
        assert_eq!(medoid(&pts, &[0, 1]), Some(0));
        assert_eq!(medoid(&pts, &[]), None);
    }
}
