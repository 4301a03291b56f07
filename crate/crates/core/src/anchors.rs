//! Anchor shapes from k-means over label box shapes, using `1 - IoU` of
//! co-centered boxes as the distance.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// `(w, h)`, sorted by area ascending.
    pub anchors: Vec<(f64, f64)>,
    /// Mean over shapes of the best IoU to any anchor.
    pub mean_best_iou: f64,
    /// `mean_best_iou` after each accepted Lloyd update.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// IoU of two boxes sharing a center.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn nearest(shape: (f64, f64), centers: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, shape_iou(shape, centers[0]));
    for (k, &c) in centers.iter().enumerate().skip(1) {
        let iou = shape_iou(shape, c);
        if iou > best.1 {
            best = (k, iou);
        }
    }
    best
}

pub fn mean_best_iou(shapes: &[(f64, f64)], centers: &[(f64, f64)]) -> f64 {
    shapes.iter().map(|&s| nearest(s, centers).1).sum::<f64>() / shapes.len() as f64
}

/// One Lloyd step: assign, re-center on member means, and re-seed empty
/// clusters from the shape farthest from its current center.
fn lloyd_step(shapes: &[(f64, f64)], centers: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let k = centers.len();
    let assigned: Vec<(usize, f64)> = shapes.iter().map(|&s| nearest(s, centers)).collect();
    // running means, exact when all members are equal
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    for (&s, &(c, _)) in shapes.iter().zip(&assigned) {
        let m = &mut sums[c];
        m.2 += 1;
        m.0 += (s.0 - m.0) / m.2 as f64;
        m.1 += (s.1 - m.1) / m.2 as f64;
    }
    let mut taken = vec![false; shapes.len()];
    let mut next = Vec::with_capacity(k);
    for &(mw, mh, n) in &sums {
        if n > 0 {
            next.push((mw, mh));
        } else {
            // farthest = lowest IoU to its assigned center; ties to lowest index
            let far = (0..shapes.len())
                .filter(|&i| !taken[i])
                .min_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(a.cmp(&b)))
                .expect("at least k shapes");
            taken[far] = true;
            next.push(shapes[far]);
        }
    }
    next
}

/// k-means anchor clustering.
///
/// Initial centers are `k` distinct shapes drawn by the seeded generator.
/// The first Lloyd update is always taken; later updates are accepted only
/// while they do not lower `mean_best_iou`, so [`AnchorSet::history`] is
/// non-decreasing. Iteration stops at a fixed point or after `max_iters`.
pub fn kmeans_anchors(shapes: &[(f64, f64)], k: usize, max_iters: usize, seed: u64) -> Result<AnchorSet> {
    if k == 0 {
        return Err(Error::Anchors("k must be >= 1".into()));
    }
    if let Some(s) = shapes.iter().find(|(w, h)| !(*w > 0.0 && *h > 0.0 && w.is_finite() && h.is_finite())) {
        return Err(Error::Anchors(format!("non-positive shape {s:?}")));
    }
    let mut distinct: Vec<(f64, f64)> = shapes.to_vec();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if k > shapes.len() {
        return Err(Error::Anchors(format!("k = {k} exceeds {} shapes", shapes.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<(f64, f64)> = if distinct.len() >= k {
        sample(&mut rng, distinct.len(), k).into_iter().map(|i| distinct[i]).collect()
    } else {
        // fewer distinct shapes than clusters: duplicates are unavoidable
        sample(&mut rng, shapes.len(), k).into_iter().map(|i| shapes[i]).collect()
    };

    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters.max(1) {
        let next = lloyd_step(shapes, &centers);
        let score = mean_best_iou(shapes, &next);
        if let Some(&last) = history.last() {
            if score < last {
                break;
            }
        }
        iterations += 1;
        history.push(score);
        let converged = next == centers;
        centers = next;
        if converged {
            break;
        }
    }

    centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
    let mean_best_iou = mean_best_iou(shapes, &centers);
    Ok(AnchorSet {
        anchors: centers,
        mean_best_iou,
        history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_modes() -> Vec<(f64, f64)> {
        (0..20).map(|i| if i % 2 == 0 { (0.1, 0.1) } else { (0.3, 0.3) }).collect()
    }

    #[test]
    fn single_shape() {
        let a = kmeans_anchors(&[(0.1, 0.1); 7], 1, DEFAULT_MAX_ITERS, 3).unwrap();
        assert_eq!(a.anchors, vec![(0.1, 0.1)]);
        assert_eq!(a.mean_best_iou, 1.0);
    }

    #[test]
    fn two_modes_recovered() {
        for seed in 0..10 {
            let a = kmeans_anchors(&two_modes(), 2, DEFAULT_MAX_ITERS, seed).unwrap();
            assert!((a.anchors[0].0 - 0.1).abs() < 1e-6 && (a.anchors[0].1 - 0.1).abs() < 1e-6);
            assert!((a.anchors[1].0 - 0.3).abs() < 1e-6 && (a.anchors[1].1 - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn one_cluster_is_mean() {
        let a = kmeans_anchors(&two_modes(), 1, DEFAULT_MAX_ITERS, 0).unwrap();
        assert!((a.anchors[0].0 - 0.2).abs() < 1e-12);
        assert!((a.anchors[0].1 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(kmeans_anchors(&[(0.1, 0.1)], 2, 10, 0).is_err());
        assert!(kmeans_anchors(&[(0.1, 0.0), (0.2, 0.2)], 1, 10, 0).is_err());
        assert!(kmeans_anchors(&[(0.1, 0.1)], 0, 10, 0).is_err());
    }

    proptest! {
        #[test]
        fn history_monotone_and_deterministic(
            shapes in prop::collection::vec((0.01..0.5f64, 0.01..0.5f64), 3..60),
            k in 1usize..4, seed in 0u64..1000,
        ) {
            let a = kmeans_anchors(&shapes, k, DEFAULT_MAX_ITERS, seed).unwrap();
            for w in a.history.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            prop_assert_eq!(a.anchors.len(), k);
            for w in a.anchors.windows(2) {
                prop_assert!(w[0].0 * w[0].1 <= w[1].0 * w[1].1);
            }
            prop_assert_eq!(&a, &kmeans_anchors(&shapes, k, DEFAULT_MAX_ITERS, seed).unwrap());
            let mut members = vec![0; k];
            for &s in &shapes {
                members[nearest(s, &a.anchors).0] += 1;
            }
            prop_assert!(members.iter().all(|&m| m > 0), "empty cluster: {:?}", members);
        }
    }
}
