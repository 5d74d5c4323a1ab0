//! K-means segmentation of patch tokens into feature-space segments.
//!
//! Lloyd's algorithm with k-means++ initialization, fully deterministic under
//! a seed. Empty clusters are dropped and indices compacted, so every
//! returned segment has at least one member and every landmark downstream is
//! the mean of a real group of tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Segment IDs, per-segment populations, centroids and the clustering
/// objective for one token matrix.
#[derive(Debug, Clone)]
pub struct SegmentAssignment {
    /// Segment index per token, each in `0..n_segments()`.
    pub ids: Vec<usize>,
    /// Population of each segment; all entries >= 1 and they sum to N.
    pub counts: Vec<usize>,
    /// One centroid row per segment.
    pub centroids: Matrix,
    /// Within-cluster sum of squares at the final assignment.
    pub wcss: f64,
    /// WCSS measured after each assignment step; non-increasing.
    pub wcss_history: Vec<f64>,
}

impl SegmentAssignment {
    pub fn n_segments(&self) -> usize {
        self.counts.len()
    }

    /// Singleton assignment: token i is its own segment.
    pub fn singletons(tokens: &Matrix) -> SegmentAssignment {
        SegmentAssignment {
            ids: (0..tokens.rows()).collect(),
            counts: vec![1; tokens.rows()],
            centroids: tokens.clone(),
            wcss: 0.0,
            wcss_history: vec![0.0],
        }
    }

    /// Contiguous index blocks, sized as evenly as possible with the
    /// remainder spread over the leading segments.
    pub fn contiguous(n_tokens: usize, n_segments: usize) -> SegmentAssignment {
        let k = n_segments.min(n_tokens).max(1);
        let base = n_tokens / k;
        let extra = n_tokens % k;
        let mut ids = Vec::with_capacity(n_tokens);
        let mut counts = Vec::with_capacity(k);
        for s in 0..k {
            let size = base + usize::from(s < extra);
            counts.push(size);
            ids.extend(std::iter::repeat_n(s, size));
        }
        SegmentAssignment {
            ids,
            counts,
            centroids: Matrix::zeros(0, 0),
            wcss: 0.0,
            wcss_history: Vec::new(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance, lowest index on ties.
fn nearest(row: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows() {
        let d = sq_dist(row, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn sample_by_weight(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut target = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}

/// Greedy k-means++: each new center is the best of a few D^2-sampled
/// candidates, judged by the potential it leaves behind.
fn kmeans_plusplus(tokens: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = tokens.rows();
    let n_candidates = 2 + (k as f64).ln().ceil().max(0.0) as usize;
    let first = rng.random_range(0..n);
    let mut centroids = tokens.slice_rows(first, 1);
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(tokens.row(i), centroids.row(0)))
        .collect();
    while centroids.rows() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut best_idx = 0;
            let mut best_potential = f64::INFINITY;
            for _ in 0..n_candidates {
                let cand = sample_by_weight(&d2, total, rng);
                let potential: f64 = (0..n)
                    .map(|i| d2[i].min(sq_dist(tokens.row(i), tokens.row(cand))))
                    .sum();
                if potential < best_potential {
                    best_potential = potential;
                    best_idx = cand;
                }
            }
            best_idx
        } else {
            // all points coincide with an existing centroid; the duplicate
            // center will be dropped as empty later
            rng.random_range(0..n)
        };
        centroids = Matrix::concat_rows(&centroids, &tokens.slice_rows(pick, 1))
            .expect("centroid concat");
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = sq_dist(tokens.row(i), centroids.row(centroids.rows() - 1));
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Drop centroids with no members and compact ids to `0..k_effective`.
fn drop_empty(ids: &mut [usize], centroids: &Matrix, k: usize) -> (Matrix, Vec<usize>) {
    let mut counts = vec![0usize; k];
    for &s in ids.iter() {
        counts[s] += 1;
    }
    let mut remap = vec![usize::MAX; k];
    let mut kept_rows: Vec<usize> = Vec::new();
    for (s, &c) in counts.iter().enumerate() {
        if c > 0 {
            remap[s] = kept_rows.len();
            kept_rows.push(s);
        }
    }
    let compacted = Matrix::from_fn(kept_rows.len(), centroids.cols(), |i, j| {
        centroids.get(kept_rows[i], j)
    });
    for s in ids.iter_mut() {
        *s = remap[*s];
    }
    let new_counts = kept_rows.iter().map(|&s| counts[s]).collect();
    (compacted, new_counts)
}

fn means_of(tokens: &Matrix, ids: &[usize], counts: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(counts.len(), tokens.cols());
    for (i, &s) in ids.iter().enumerate() {
        for (o, &v) in out.row_mut(s).iter_mut().zip(tokens.row(i)) {
            *o += v;
        }
    }
    for (s, &c) in counts.iter().enumerate() {
        let inv = 1.0 / c as f64;
        for o in out.row_mut(s) {
            *o *= inv;
        }
    }
    out
}

/// Lloyd's algorithm with k-means++ initialization seeded by `seed`.
///
/// Runs until the assignment reaches a fixpoint or `max_iters`, whichever
/// comes first. If there are fewer tokens than requested segments the
/// effective segment count is the token count.
pub fn kmeans(
    tokens: &Matrix,
    n_segments: usize,
    seed: u64,
    max_iters: usize,
) -> Result<SegmentAssignment> {
    if tokens.rows() == 0 {
        return Err(Error::EmptyInput("kmeans needs at least one token"));
    }
    if n_segments == 0 {
        return Err(Error::InvalidArg("kmeans needs at least one segment".into()));
    }
    let k = n_segments.min(tokens.rows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plusplus(tokens, k, &mut rng);

    let n = tokens.rows();
    let mut ids = vec![0usize; n];
    let mut wcss_history = Vec::new();
    for _iter in 0..max_iters.max(1) {
        let mut changed = false;
        let mut wcss = 0.0;
        for i in 0..n {
            let (best, d) = nearest(tokens.row(i), &centroids);
            wcss += d;
            if ids[i] != best {
                ids[i] = best;
                changed = true;
            }
        }
        if let Some(&prev) = wcss_history.last() {
            debug_assert!(
                wcss <= prev * (1.0 + 1e-12) + 1e-12,
                "wcss must not increase: {prev} -> {wcss}"
            );
        }
        wcss_history.push(wcss);
        if !changed && wcss_history.len() > 1 {
            break;
        }
        let (_, counts) = drop_empty(&mut ids, &centroids, centroids.rows());
        centroids = means_of(tokens, &ids, &counts);
    }
    // Final sync so every token points at its nearest returned centroid.
    let mut wcss = 0.0;
    for i in 0..n {
        let (best, d) = nearest(tokens.row(i), &centroids);
        ids[i] = best;
        wcss += d;
    }
    let (centroids, counts) = drop_empty(&mut ids, &centroids, centroids.rows());
    Ok(SegmentAssignment {
        ids,
        counts,
        centroids,
        wcss,
        wcss_history,
    })
}

/// Row j of the output is the mean of the tokens assigned to segment j.
pub fn segment_means(tokens: &Matrix, assignment: &SegmentAssignment) -> Result<Matrix> {
    if assignment.ids.len() != tokens.rows() {
        return Err(Error::LengthMismatch {
            what: "segment assignment",
            expected: tokens.rows(),
            got: assignment.ids.len(),
        });
    }
    Ok(means_of(tokens, &assignment.ids, &assignment.counts))
}
