#![allow(dead_code)]

use shiftmatch::rng::XorShift64Star;
use shiftmatch::{ClipQueryTensor, FrameQuerySet, SimilarityMatrix};

pub fn random_frame(rng: &mut XorShift64Star, n: usize, d: usize) -> FrameQuerySet {
    let data = (0..n * d).map(|_| rng.gaussian()).collect();
    FrameQuerySet::new(n, d, data).unwrap()
}

pub fn random_clip(rng: &mut XorShift64Star, t: usize, n: usize, d: usize) -> ClipQueryTensor {
    ClipQueryTensor::new((0..t).map(|_| random_frame(rng, n, d)).collect()).unwrap()
}

/// Uniform entries in [-1, 1]. With `levels > 0` the entries are snapped to
/// a grid of that many steps so that ties between assignments are common.
pub fn random_similarity(rng: &mut XorShift64Star, n: usize, levels: u64) -> SimilarityMatrix {
    let values = (0..n * n)
        .map(|_| {
            if levels > 0 {
                -1.0 + 2.0 * rng.below(levels + 1) as f64 / levels as f64
            } else {
                2.0 * rng.next_f64() - 1.0
            }
        })
        .collect();
    SimilarityMatrix::new(n, values).unwrap()
}
