//! Cross-frame query correspondence.
//!
//! Queries of adjacent frames are paired by maximizing the summed cosine
//! similarity over all permutations. The assignment is solved exactly with a
//! shortest-augmenting-path Hungarian method on the cost `1 - sim`; among
//! optimal permutations the lexicographically smallest mapping is returned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tensor::{ClipQueryTensor, FrameQuerySet};

/// Two permutations whose totals differ by at most this much are treated as
/// tied; the same threshold marks an edge as tight in the dual solution.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Largest `N` accepted by [`brute_force_match`].
pub const BRUTE_FORCE_MAX_N: usize = 9;

/// Square matrix of similarities in `[-1, 1]`; entry `(i, j)` compares query
/// `i` of one frame with query `j` of the next.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::domain(format!(
                "similarity matrix must be square: {} values for n = {n}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::domain(format!(
                "similarity {bad} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self { n, values })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.as_ref().len() != n) {
            return Err(Error::domain("similarity matrix must be square"));
        }
        Self::new(n, rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Sum of `sim(i, mapping(i))`.
    pub fn total(&self, mapping: &Permutation) -> f64 {
        mapping
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &j)| self.get(i, j))
            .sum()
    }
}

/// A bijection on `0..n`, stored as `mapping[i] = image of i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(mapping: Vec<usize>) -> Result<Self> {
        Permutation::new(mapping)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.mapping
    }
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::domain(format!("{mapping:?} is not a permutation")));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn apply(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// `self ∘ inner`: first apply `inner`, then `self`.
    pub fn compose(&self, inner: &Permutation) -> Self {
        assert_eq!(self.len(), inner.len(), "composing permutations of different size");
        Self {
            mapping: inner.mapping.iter().map(|&i| self.mapping[i]).collect(),
        }
    }
}

fn unit_rows(set: &FrameQuerySet) -> Vec<f64> {
    let mut out = Vec::with_capacity(set.as_slice().len());
    for row in set.rows() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            out.extend(std::iter::repeat_n(0.0, row.len()));
        } else {
            out.extend(row.iter().map(|v| v / norm));
        }
    }
    out
}

/// Pairwise cosine similarity between the queries of `a` and `b`. Zero-norm
/// queries have similarity 0 with everything.
pub fn cosine_similarity(a: &FrameQuerySet, b: &FrameQuerySet) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() || a.n_queries() != b.n_queries() {
        return Err(Error::domain(format!(
            "cannot compare {}x{} queries with {}x{}",
            a.n_queries(),
            a.dim(),
            b.n_queries(),
            b.dim()
        )));
    }
    let (n, d) = (a.n_queries(), a.dim());
    let (ua, ub) = (unit_rows(a), unit_rows(b));
    let mut values = Vec::with_capacity(n * n);
    for ra in ua.chunks_exact(d) {
        for rb in ub.chunks_exact(d) {
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            values.push(dot.clamp(-1.0, 1.0));
        }
    }
    SimilarityMatrix::new(n, values)
}

/// Minimizes `sum cost[i][assign[i]]` over permutations; returns the
/// assignment together with row and column potentials `(u, v)` such that
/// `cost[i][j] - u[i] - v[j] >= 0`, with equality on assigned edges.
fn solve_assignment(n: usize, cost: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based shortest augmenting path formulation; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < min_to[j] {
                    min_to[j] = cur;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[col_owner[j] - 1] = j - 1;
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Rewrites `row_match` into the lexicographically smallest perfect matching
/// that uses only edges marked in `tight`.
fn lexicographic_matching(n: usize, tight: &[bool], row_match: &mut [usize]) {
    let mut col_match = vec![0; n];
    for (i, &j) in row_match.iter().enumerate() {
        col_match[j] = i;
    }
    let mut locked_col = vec![false; n];

    // Search for an alternating path that moves `row` onto some column and
    // ultimately frees up `target`.
    #[allow(clippy::too_many_arguments)]
    fn reroute(
        row: usize,
        target: usize,
        n: usize,
        tight: &[bool],
        locked_col: &[bool],
        visited: &mut [bool],
        row_match: &mut [usize],
        col_match: &mut [usize],
    ) -> bool {
        for c in 0..n {
            if !tight[row * n + c] || locked_col[c] || visited[c] {
                continue;
            }
            visited[c] = true;
            let found = c == target || {
                let holder = col_match[c];
                reroute(holder, target, n, tight, locked_col, visited, row_match, col_match)
            };
            if found {
                row_match[row] = c;
                col_match[c] = row;
                return true;
            }
        }
        false
    }

    for i in 0..n {
        for j in 0..n {
            if !tight[i * n + j] || locked_col[j] {
                continue;
            }
            if row_match[i] == j {
                break;
            }
            let holder = col_match[j];
            let freed = row_match[i];
            let mut visited = vec![false; n];
            // `j` goes to row i, so the holder may not take it back.
            visited[j] = true;
            locked_col[j] = true;
            let mut trial_rows = row_match.to_vec();
            let mut trial_cols = col_match.clone();
            if reroute(
                holder,
                freed,
                n,
                tight,
                &locked_col,
                &mut visited,
                &mut trial_rows,
                &mut trial_cols,
            ) {
                trial_rows[i] = j;
                trial_cols[j] = i;
                row_match.copy_from_slice(&trial_rows);
                col_match = trial_cols;
                break;
            }
            locked_col[j] = false;
        }
        locked_col[row_match[i]] = true;
    }
}

/// Optimal assignment maximizing total similarity, in `O(N^3)` plus the
/// tie-break pass over tight edges.
pub fn optimal_match(sim: &SimilarityMatrix) -> Result<(Permutation, f64)> {
    let n = sim.n();
    if n == 0 {
        return Ok((Permutation::identity(0), 0.0));
    }
    let cost: Vec<f64> = sim.as_slice().iter().map(|s| 1.0 - s).collect();
    let (mut assign, u, v) = solve_assignment(n, &cost);
    let tight: Vec<bool> = (0..n * n)
        .map(|k| cost[k] - u[k / n] - v[k % n] <= TIE_TOLERANCE)
        .collect();
    lexicographic_matching(n, &tight, &mut assign);
    let perm = Permutation::new(assign)?;
    let total = sim.total(&perm);
    Ok((perm, total))
}

/// Exhaustive search over all `N!` permutations (`N <= 9`), with the same
/// tie rule as [`optimal_match`]. Used as a verification oracle.
pub fn brute_force_match(sim: &SimilarityMatrix) -> Result<(Permutation, f64)> {
    let n = sim.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::Budget {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }

    // Depth-first in lexicographic order; `visit` sees every complete mapping.
    fn walk(
        sim: &SimilarityMatrix,
        row: usize,
        partial: f64,
        used: &mut [bool],
        current: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize], f64) -> bool,
    ) -> bool {
        let n = sim.n();
        if row == n {
            return visit(current, partial);
        }
        for c in 0..n {
            if used[c] {
                continue;
            }
            used[c] = true;
            current.push(c);
            let stop = walk(sim, row + 1, partial + sim.get(row, c), used, current, visit);
            current.pop();
            used[c] = false;
            if stop {
                return true;
            }
        }
        false
    }

    let mut best = f64::NEG_INFINITY;
    walk(sim, 0, 0.0, &mut vec![false; n], &mut Vec::new(), &mut |_, total| {
        best = best.max(total);
        false
    });
    let mut chosen = Vec::new();
    walk(sim, 0, 0.0, &mut vec![false; n], &mut Vec::new(), &mut |m, total| {
        if total >= best - TIE_TOLERANCE {
            chosen = m.to_vec();
            true
        } else {
            false
        }
    });
    let perm = Permutation::new(chosen)?;
    let total = sim.total(&perm);
    Ok((perm, total))
}

/// Per-frame maps from query index into a track space anchored at frame 0.
///
/// `adjacent[t]` sends query `i` of frame `t` to its match in frame `t + 1`;
/// `per_frame[t + 1] = per_frame[t] ∘ adjacent[t]⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAlignment {
    per_frame: Vec<Permutation>,
    adjacent: Vec<Permutation>,
    pair_total_similarity: Vec<f64>,
}

impl ClipAlignment {
    /// The alignment that leaves every frame in its own index order.
    pub fn identity(t_len: usize, n: usize) -> Self {
        Self {
            per_frame: vec![Permutation::identity(n); t_len],
            adjacent: vec![Permutation::identity(n); t_len.saturating_sub(1)],
            pair_total_similarity: Vec::new(),
        }
    }

    /// Builds the track maps from adjacent matches.
    pub fn from_adjacent(n: usize, adjacent: Vec<Permutation>, totals: Vec<f64>) -> Result<Self> {
        if adjacent.iter().any(|p| p.len() != n) {
            return Err(Error::domain("adjacent matches disagree on query count"));
        }
        let mut per_frame = vec![Permutation::identity(n)];
        for step in &adjacent {
            let next = per_frame.last().unwrap().compose(&step.inverse());
            per_frame.push(next);
        }
        Ok(Self {
            per_frame,
            adjacent,
            pair_total_similarity: totals,
        })
    }

    pub fn t_len(&self) -> usize {
        self.per_frame.len()
    }

    pub fn n_queries(&self) -> usize {
        self.per_frame[0].len()
    }

    pub fn per_frame(&self) -> &[Permutation] {
        &self.per_frame
    }

    pub fn adjacent(&self) -> &[Permutation] {
        &self.adjacent
    }

    /// Achieved total similarity per adjacent pair; empty for alignments not
    /// produced by matching.
    pub fn pair_total_similarity(&self) -> &[f64] {
        &self.pair_total_similarity
    }

    pub fn is_identity(&self) -> bool {
        self.per_frame.iter().all(Permutation::is_identity)
    }
}

pub fn align_clip(clip: &ClipQueryTensor) -> Result<ClipAlignment> {
    align_clip_with(clip, Execution::default())
}

/// Matches every adjacent frame pair (concurrently under `exec`), then
/// composes the matches sequentially into the anchored track space.
pub fn align_clip_with(clip: &ClipQueryTensor, exec: Execution) -> Result<ClipAlignment> {
    let pairs = clip.t_len() - 1;
    let matches = exec
        .map_range(pairs, |t| {
            cosine_similarity(clip.frame(t), clip.frame(t + 1)).and_then(|s| optimal_match(&s))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (adjacent, totals) = matches.into_iter().unzip();
    ClipAlignment::from_adjacent(clip.n_queries(), adjacent, totals)
}
