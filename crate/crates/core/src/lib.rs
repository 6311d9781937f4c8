//! Temporal feature shift and cross-frame query matching for query-based
//! video semantic segmentation, with a synthetic scene generator and the
//! metrics needed to check the mechanism end to end.
//!
//! The flow for one clip:
//!
//! 1. [`matching::align_clip`] pairs the decoded queries of adjacent frames
//!    by maximum total cosine similarity and composes the pairings into a
//!    track space anchored at frame 0.
//! 2. [`shift::feature_shift`] moves the first `D_f` channels of every track
//!    one frame forward and the last `D_b` channels one frame backward.
//! 3. Queries return to their original per-frame order and are decoded into
//!    masks and labels by [`pipeline::decode_masks`] and
//!    [`pipeline::semantic_inference`].
//!
//! Loops over frame pairs, frames and sweep cells run on rayon when the
//! `parallel` feature (on by default) is enabled; see [`exec::Execution`].

pub mod error;
pub mod exec;
pub mod experiment;
pub mod format;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod shift;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use experiment::{evaluate, run_clip, run_sweep, SweepSpec};
pub use matching::{align_clip, brute_force_match, cosine_similarity, optimal_match, ClipAlignment, Permutation, SimilarityMatrix};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use pipeline::{decode_masks, semantic_inference, shift_with_matching, ClassHead, PipelineConfig, SoftMaskSet};
pub use shift::{feature_shift, plan_shift, Boundary, Fraction, ShiftConfig};
pub use synth::{generate_scene, recovery_rate, SceneClip, SceneSpec};
pub use tensor::{ClipQueryTensor, FrameQuerySet, LabelMap, PixelEmbeddingMap};
