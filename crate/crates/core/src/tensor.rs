//! Dense numeric containers shared by every stage of the pipeline.
//!
//! All containers validate their shape and finiteness on construction and are
//! immutable afterwards, so they can be shared freely across threads.

use crate::error::{Error, Result};

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// Decoded queries of a single frame: an `n_queries x dim` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameQuerySet {
    n_queries: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FrameQuerySet {
    pub fn new(n_queries: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n_queries == 0 || dim == 0 {
            return Err(Error::domain(format!(
                "frame query set needs N >= 1 and D >= 1, got N={n_queries}, D={dim}"
            )));
        }
        if data.len() != n_queries * dim {
            return Err(Error::domain(format!(
                "frame query set {n_queries}x{dim} needs {} values, got {}",
                n_queries * dim,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            n_queries,
            dim,
            data,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::domain("ragged query rows"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), dim, data)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Builds a new set whose row `k` is row `order[k]` of `self`.
    pub fn gather_rows(&self, order: &[usize]) -> Self {
        debug_assert_eq!(order.len(), self.n_queries);
        let mut data = Vec::with_capacity(self.data.len());
        for &src in order {
            data.extend_from_slice(self.row(src));
        }
        Self {
            n_queries: self.n_queries,
            dim: self.dim,
            data,
        }
    }

    /// Multiplies every entry by `factor` (which must be finite).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.n_queries,
            self.dim,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

/// A `T x N x D` stack of per-frame decoded queries for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipQueryTensor {
    frames: Vec<FrameQuerySet>,
}

impl ClipQueryTensor {
    pub fn new(frames: Vec<FrameQuerySet>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::domain("a clip needs at least one frame"))?;
        let (n, d) = (first.n_queries, first.dim);
        if let Some(t) = frames.iter().position(|f| f.n_queries != n || f.dim != d) {
            return Err(Error::domain(format!(
                "frame {t} is {}x{}, expected {n}x{d}",
                frames[t].n_queries, frames[t].dim
            )));
        }
        Ok(Self { frames })
    }

    /// Builds a clip from a flat `t`-major, then query-major, then channel buffer.
    pub fn from_flat(t_len: usize, n_queries: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if t_len == 0 {
            return Err(Error::domain("a clip needs at least one frame"));
        }
        if data.len() != t_len * n_queries * dim {
            return Err(Error::domain(format!(
                "clip {t_len}x{n_queries}x{dim} needs {} values, got {}",
                t_len * n_queries * dim,
                data.len()
            )));
        }
        check_finite(&data)?;
        let per_frame = n_queries * dim;
        let frames = data
            .chunks_exact(per_frame.max(1))
            .take(t_len)
            .map(|chunk| FrameQuerySet::new(n_queries, dim, chunk.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }

    pub fn t_len(&self) -> usize {
        self.frames.len()
    }

    pub fn n_queries(&self) -> usize {
        self.frames[0].n_queries
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim
    }

    pub fn frames(&self) -> &[FrameQuerySet] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &FrameQuerySet {
        &self.frames[t]
    }

    pub fn into_frames(self) -> Vec<FrameQuerySet> {
        self.frames
    }

    pub fn get(&self, t: usize, i: usize, d: usize) -> f64 {
        self.frames[t].row(i)[d]
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().flat_map(|f| f.data.iter().copied())
    }
}

/// Per-pixel embeddings of one frame, `height x width x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEmbeddingMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PixelEmbeddingMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::domain("pixel embedding map needs H, W, D >= 1"));
        }
        if data.len() != height * width * dim {
            return Err(Error::domain(format!(
                "pixel map {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, h: usize, w: usize) -> &[f64] {
        let start = (h * self.width + w) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Pixels in row-major order, one embedding each.
    pub fn pixels(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// The map viewed as a `(H*W) x D` query set (row index `h * W + w`).
    pub fn to_rows(&self) -> FrameQuerySet {
        FrameQuerySet {
            n_queries: self.height * self.width,
            dim: self.dim,
            data: self.data.clone(),
        }
    }

    pub fn from_rows(height: usize, width: usize, rows: &FrameQuerySet) -> Result<Self> {
        if rows.n_queries() != height * width {
            return Err(Error::domain(format!(
                "{} pixel rows cannot form a {height}x{width} grid",
                rows.n_queries()
            )));
        }
        Self::new(height, width, rows.dim(), rows.as_slice().to_vec())
    }
}

/// A grid of class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::domain(format!(
                "label map {height}x{width} needs {} cells, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: usize, label: u32) -> Result<Self> {
        Self::new(height, width, num_classes, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn at(&self, h: usize, w: usize) -> u32 {
        self.labels[h * self.width + w]
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.num_classes == other.num_classes
    }
}
