//! Seeded synthetic scenes with known query-to-track correspondence.
//!
//! Generation consumes one [`XorShift64Star`] stream seeded with
//! `SceneSpec::seed`, in this order:
//!
//! 1. `N` prototype vectors of `D` Gaussian draws each, orthonormalized by
//!    modified Gram-Schmidt (two passes; a vector whose residual norm drops
//!    below `1e-6` is redrawn). Rows `0..K` are track prototypes, rows
//!    `K..N` are no-object prototypes for the surplus queries.
//! 2. Per track: rectangle height in `[max(1, H/8), max(1, H/4)]`, width in
//!    `[max(1, W/8), max(1, W/4)]`, top row `below(H)`, left column
//!    `below(W)`, then (only when `motion` is absent) a velocity `(dy, dx)`
//!    with both components in `[-2, 2]`.
//! 3. Per frame: a Fisher-Yates permutation of `0..N` (only when
//!    `permute_per_frame` is set), then `N * D` Gaussian noise draws scaled
//!    by `noise_sigma / sqrt(D)`. Noise draws are consumed even when
//!    `noise_sigma` is 0, so scenes differing only in noise share everything
//!    else.
//!
//! Rectangles wrap around the grid and later tracks paint over earlier ones.
//! Track `k` has class `k mod (C - 1)`; the background is class `C - 1`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format;
use crate::matching::{ClipAlignment, Permutation};
use crate::pipeline::ClassHead;
use crate::rng::XorShift64Star;
use crate::tensor::{ClipQueryTensor, FrameQuerySet, LabelMap, PixelEmbeddingMap};

pub const QUERIES_FILE: &str = "queries.qtn";
pub const PIXELS_FILE: &str = "pixels.qtn";
pub const TRACKS_FILE: &str = "tracks.json";

pub fn labels_file(t: usize) -> String {
    format!("labels_{t}.pgm")
}

fn default_logit_scale() -> f64 {
    8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub t_len: usize,
    pub n_tracks: usize,
    pub n_queries: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub permute_per_frame: bool,
    /// Per-track velocity `[dy, dx]` in pixels per frame; drawn from the
    /// seed when absent.
    #[serde(default)]
    pub motion: Option<Vec<[i64; 2]>>,
    pub seed: u64,
    /// Logit magnitude of the synthetic classification head.
    #[serde(default = "default_logit_scale")]
    pub class_logit_scale: f64,
}

impl SceneSpec {
    /// A small default scene: 6 frames, 8 tracks and queries, 64 channels,
    /// 9 classes on a 64x64 grid.
    pub fn desk(seed: u64) -> Self {
        Self {
            t_len: 6,
            n_tracks: 8,
            n_queries: 8,
            dim: 64,
            num_classes: 9,
            height: 64,
            width: 64,
            noise_sigma: 0.0,
            permute_per_frame: true,
            motion: None,
            seed,
            class_logit_scale: default_logit_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_len", self.t_len),
            ("n_tracks", self.n_tracks),
            ("n_queries", self.n_queries),
            ("dim", self.dim),
            ("num_classes", self.num_classes),
            ("height", self.height),
            ("width", self.width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::domain(format!("scene {name} must be positive")));
        }
        if self.n_tracks > self.n_queries || self.n_queries > self.dim {
            return Err(Error::Infeasible(format!(
                "prototype separability needs n_tracks <= n_queries <= dim, got {} / {} / {}",
                self.n_tracks, self.n_queries, self.dim
            )));
        }
        if self.num_classes > self.n_tracks + 1 {
            return Err(Error::Infeasible(format!(
                "{} classes cannot be covered by {} tracks plus background",
                self.num_classes, self.n_tracks
            )));
        }
        if self.num_classes > 256 {
            return Err(Error::domain("at most 256 classes fit in a PGM label map"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::domain(format!(
                "noise_sigma must be a finite non-negative number, got {}",
                self.noise_sigma
            )));
        }
        if !(self.class_logit_scale.is_finite() && self.class_logit_scale > 0.0) {
            return Err(Error::domain("class_logit_scale must be positive"));
        }
        if let Some(motion) = &self.motion {
            if motion.len() != self.n_tracks {
                return Err(Error::domain(format!(
                    "motion lists {} velocities for {} tracks",
                    motion.len(),
                    self.n_tracks
                )));
            }
        }
        Ok(())
    }

    pub fn background_class(&self) -> u32 {
        (self.num_classes - 1) as u32
    }

    pub fn track_class(&self, k: usize) -> u32 {
        if self.num_classes == 1 {
            0
        } else {
            (k % (self.num_classes - 1)) as u32
        }
    }
}

/// A generated clip with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneClip {
    pub spec: SceneSpec,
    pub queries: ClipQueryTensor,
    pub pixels: Vec<PixelEmbeddingMap>,
    pub gt_labels: Vec<LabelMap>,
    /// `gt_tracks[t].apply(i)` is the track (or no-object slot, `>= K`)
    /// carried by query `i` of frame `t`.
    pub gt_tracks: Vec<Permutation>,
    /// `N x D` orthonormal rows; rows `K..N` are the no-object prototypes.
    pub prototypes: FrameQuerySet,
    pub class_head: ClassHead,
}

impl SceneClip {
    pub fn track_prototype(&self, k: usize) -> &[f64] {
        self.prototypes.row(k)
    }
}

fn orthonormal_rows(rng: &mut XorShift64Star, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        for _pass in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
}

/// Probability the head assigns to a track's own class (the rest of its
/// mass goes to background) so that, at zero noise, the worst own-class
/// margin on a track pixel equals the worst background margin on an empty
/// pixel. Positive margins require every class to be shared by fewer than
/// `K` tracks.
pub(crate) fn own_class_share(spec: &SceneSpec) -> f64 {
    let k = spec.n_tracks as f64;
    let lift = 1.0 / (1.0 + libm::exp(-1.0)) - 0.5;
    let counts: Vec<usize> = (0..spec.num_classes.saturating_sub(1))
        .map(|c| (0..spec.n_tracks).filter(|&t| spec.track_class(t) as usize == c).count())
        .collect();
    let m_min = counts.iter().copied().min().unwrap_or(1) as f64;
    let m_max = counts.iter().copied().max().unwrap_or(1) as f64;
    ((k + lift) / (k + 2.0 * lift + 0.5 * (m_min + m_max))).clamp(0.05, 0.95)
}

fn build_class_head(spec: &SceneSpec, prototypes: &[Vec<f64>]) -> Result<ClassHead> {
    let (dim, c) = (spec.dim, spec.num_classes);
    let mut weights = vec![0.0; dim * c];
    if c > 1 {
        let scale = spec.class_logit_scale;
        let share = own_class_share(spec);
        let bg = spec.background_class() as usize;
        for (k, proto) in prototypes.iter().take(spec.n_tracks).enumerate() {
            let mut logits = vec![0.0; c];
            logits[spec.track_class(k) as usize] = scale;
            logits[bg] = scale + libm::log((1.0 - share) / share);
            for (d, &p) in proto.iter().enumerate() {
                for (w, l) in weights[d * c..(d + 1) * c].iter_mut().zip(&logits) {
                    *w += p * l;
                }
            }
        }
        // No-object prototypes map to all-zero logits: a uniform class
        // distribution adds the same amount to every class sum.
    }
    ClassHead::new(dim, c, weights, vec![0.0; c])
}

struct TrackGeometry {
    top: i64,
    left: i64,
    rows: i64,
    cols: i64,
    velocity: [i64; 2],
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SceneClip> {
    spec.validate()?;
    let (t_len, k, n, dim, h, w) = (
        spec.t_len,
        spec.n_tracks,
        spec.n_queries,
        spec.dim,
        spec.height as i64,
        spec.width as i64,
    );
    let mut rng = XorShift64Star::new(spec.seed);
    let protos = orthonormal_rows(&mut rng, n, dim);

    let tracks: Vec<TrackGeometry> = (0..k)
        .map(|track| {
            let rows = rng.range_inclusive((h / 8).max(1), (h / 4).max(1));
            let cols = rng.range_inclusive((w / 8).max(1), (w / 4).max(1));
            let top = rng.below(h as u64) as i64;
            let left = rng.below(w as u64) as i64;
            let velocity = match &spec.motion {
                Some(m) => m[track],
                None => [rng.range_inclusive(-2, 2), rng.range_inclusive(-2, 2)],
            };
            TrackGeometry {
                top,
                left,
                rows,
                cols,
                velocity,
            }
        })
        .collect();

    let noise_scale = spec.noise_sigma / (dim as f64).sqrt();
    let mut frames = Vec::with_capacity(t_len);
    let mut gt_tracks = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let perm = if spec.permute_per_frame {
            rng.permutation(n)
        } else {
            (0..n).collect()
        };
        let mut data = Vec::with_capacity(n * dim);
        for &slot in &perm {
            for &p in &protos[slot] {
                data.push(p + noise_scale * rng.gaussian());
            }
        }
        frames.push(FrameQuerySet::new(n, dim, data)?);
        gt_tracks.push(Permutation::new(perm)?);
    }

    let bg = spec.background_class();
    let mut pixels = Vec::with_capacity(t_len);
    let mut gt_labels = Vec::with_capacity(t_len);
    for t in 0..t_len as i64 {
        let mut emb = vec![0.0; (h * w) as usize * dim];
        let mut labels = vec![bg; (h * w) as usize];
        for (track, geo) in tracks.iter().enumerate() {
            let top = geo.top + geo.velocity[0] * t;
            let left = geo.left + geo.velocity[1] * t;
            for dy in 0..geo.rows {
                let y = (top + dy).rem_euclid(h);
                for dx in 0..geo.cols {
                    let x = (left + dx).rem_euclid(w);
                    let px = (y * w + x) as usize;
                    labels[px] = spec.track_class(track);
                    emb[px * dim..(px + 1) * dim].copy_from_slice(&protos[track]);
                }
            }
        }
        pixels.push(PixelEmbeddingMap::new(spec.height, spec.width, dim, emb)?);
        gt_labels.push(LabelMap::new(spec.height, spec.width, spec.num_classes, labels)?);
    }

    let class_head = build_class_head(spec, &protos)?;
    Ok(SceneClip {
        spec: spec.clone(),
        queries: ClipQueryTensor::new(frames)?,
        pixels,
        gt_labels,
        gt_tracks,
        prototypes: FrameQuerySet::from_rows(&protos)?,
        class_head,
    })
}

/// Fraction of `(frame, query)` slots whose alignment-implied track matches
/// the ground truth. The implied track of query `i` at frame `t` is the
/// ground-truth track of the frame-0 query at index `per_frame[t](i)`.
pub fn recovery_rate(alignment: &ClipAlignment, clip: &SceneClip) -> Result<f64> {
    let (t_len, n) = (clip.gt_tracks.len(), clip.queries.n_queries());
    if alignment.t_len() != t_len || alignment.n_queries() != n {
        return Err(Error::domain(format!(
            "alignment is {}x{}, scene is {t_len}x{n}",
            alignment.t_len(),
            alignment.n_queries()
        )));
    }
    let anchor = &clip.gt_tracks[0];
    let hits: usize = alignment
        .per_frame()
        .iter()
        .zip(&clip.gt_tracks)
        .map(|(perm, gt)| (0..n).filter(|&i| anchor.apply(perm.apply(i)) == gt.apply(i)).count())
        .sum();
    Ok(hits as f64 / (t_len * n) as f64)
}

/// Everything besides the QTN and PGM payloads that a scene directory needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackFile {
    pub spec: SceneSpec,
    pub gt_tracks: Vec<Permutation>,
    pub track_classes: Vec<u32>,
    pub prototypes: Vec<Vec<f64>>,
    pub class_head: ClassHead,
}

/// Writes `queries.qtn`, `pixels.qtn` (each frame reshaped to `H*W` rows,
/// row index `h * W + w`), `labels_<t>.pgm` and `tracks.json` into `dir`.
pub fn save_scene(scene: &SceneClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    format::save_tensor(&scene.queries, &dir.join(QUERIES_FILE))?;
    let pixel_rows = ClipQueryTensor::new(scene.pixels.iter().map(|p| p.to_rows()).collect())?;
    format::save_tensor(&pixel_rows, &dir.join(PIXELS_FILE))?;
    for (t, labels) in scene.gt_labels.iter().enumerate() {
        format::save_pgm(labels, &dir.join(labels_file(t)))?;
    }
    let tracks = TrackFile {
        spec: scene.spec.clone(),
        gt_tracks: scene.gt_tracks.clone(),
        track_classes: (0..scene.spec.n_tracks).map(|k| scene.spec.track_class(k)).collect(),
        prototypes: scene.prototypes.rows().map(<[f64]>::to_vec).collect(),
        class_head: scene.class_head.clone(),
    };
    let path = dir.join(TRACKS_FILE);
    let json = serde_json::to_string_pretty(&tracks).map_err(|e| Error::json(TRACKS_FILE, e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_scene(dir: &Path) -> Result<SceneClip> {
    let path = dir.join(TRACKS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let tracks: TrackFile =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let spec = tracks.spec;
    spec.validate()?;
    let queries = format::load_tensor(&dir.join(QUERIES_FILE))?;
    let pixel_rows = format::load_tensor(&dir.join(PIXELS_FILE))?;
    if queries.t_len() != spec.t_len
        || queries.n_queries() != spec.n_queries
        || queries.dim() != spec.dim
    {
        return Err(Error::domain(format!(
            "{QUERIES_FILE} is {}x{}x{}, tracks.json declares {}x{}x{}",
            queries.t_len(),
            queries.n_queries(),
            queries.dim(),
            spec.t_len,
            spec.n_queries,
            spec.dim
        )));
    }
    if pixel_rows.t_len() != spec.t_len || pixel_rows.dim() != spec.dim {
        return Err(Error::domain(format!("{PIXELS_FILE} does not match the scene shape")));
    }
    let pixels = pixel_rows
        .frames()
        .iter()
        .map(|rows| PixelEmbeddingMap::from_rows(spec.height, spec.width, rows))
        .collect::<Result<Vec<_>>>()?;
    let gt_labels = (0..spec.t_len)
        .map(|t| {
            let labels = format::load_pgm(&dir.join(labels_file(t)), spec.num_classes)?;
            if labels.height() != spec.height || labels.width() != spec.width {
                return Err(Error::domain(format!("{} has the wrong size", labels_file(t))));
            }
            Ok(labels)
        })
        .collect::<Result<Vec<_>>>()?;
    if tracks.gt_tracks.len() != spec.t_len || tracks.gt_tracks.iter().any(|p| p.len() != spec.n_queries) {
        return Err(Error::domain("gt_tracks do not match the scene shape"));
    }
    let head = tracks.class_head;
    if head.dim() != spec.dim || head.num_classes() != spec.num_classes {
        return Err(Error::domain("class head does not match the scene shape"));
    }
    Ok(SceneClip {
        queries,
        pixels,
        gt_labels,
        gt_tracks: tracks.gt_tracks,
        prototypes: FrameQuerySet::from_rows(&tracks.prototypes)?,
        class_head: head,
        spec,
    })
}
