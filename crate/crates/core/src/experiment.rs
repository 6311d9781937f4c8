//! Evaluation of one configuration on one scene, and the fraction x matching
//! sweep over many seeds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{
    miou, pixel_accuracy, static_masks, temporal_consistency, ConfusionMatrix, EvalReport,
};
use crate::pipeline::{run_frames, PipelineConfig};
use crate::shift::{Boundary, Fraction};
use crate::synth::{generate_scene, recovery_rate, SceneClip, SceneSpec};
use crate::matching::ClipAlignment;
use crate::tensor::LabelMap;

/// Shift, decode and label every frame of `scene`.
pub fn run_clip(scene: &SceneClip, cfg: &PipelineConfig) -> Result<(Vec<LabelMap>, ClipAlignment)> {
    run_clip_with(scene, cfg, Execution::default())
}

pub fn run_clip_with(
    scene: &SceneClip,
    cfg: &PipelineConfig,
    exec: Execution,
) -> Result<(Vec<LabelMap>, ClipAlignment)> {
    run_frames(&scene.queries, &scene.pixels, &scene.class_head, cfg, exec)
}

/// Runs `cfg` on `scene` and scores the predictions against ground truth.
///
/// Temporal consistency is reported as 1.0 when the clip has a single frame
/// or no ground-truth-static pixels, since there is nothing that could flicker.
pub fn evaluate(scene: &SceneClip, cfg: &PipelineConfig, exec: Execution) -> Result<EvalReport> {
    let (preds, alignment) = run_clip_with(scene, cfg, exec)?;
    let cm = ConfusionMatrix::from_frames(&preds, &scene.gt_labels, exec)?;
    let statics = static_masks(&scene.gt_labels);
    let temporal = if preds.len() < 2 || !statics.iter().flatten().any(|&s| s) {
        1.0
    } else {
        temporal_consistency(&preds, &statics)?
    };
    Ok(EvalReport {
        miou: miou(&cm)?,
        pixel_accuracy: pixel_accuracy(&cm)?,
        temporal_consistency: temporal,
        recovery: recovery_rate(&alignment, scene)?,
        config: *cfg,
    })
}

fn default_fractions() -> Vec<Fraction> {
    Fraction::standard_grid()
}

fn default_matching() -> Vec<bool> {
    vec![false, true]
}

fn default_repeats() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_fractions")]
    pub fractions: Vec<Fraction>,
    #[serde(default = "default_matching")]
    pub matching: Vec<bool>,
    pub scene: SceneSpec,
    #[serde(default)]
    pub boundary: Boundary,
    /// Seeds used are `scene.seed, scene.seed + 1, ...`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::domain("sweep needs at least one fraction"));
        }
        if self.matching.is_empty() {
            return Err(Error::domain("sweep needs at least one matching setting"));
        }
        if self.repeats == 0 {
            return Err(Error::domain("sweep needs repeats >= 1"));
        }
        self.scene.validate()?;
        for &f in &self.fractions {
            PipelineConfig::new(f, self.boundary, false).shift_for(self.scene.dim)?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repeats as u64).map(|r| self.scene.seed.wrapping_add(r))
    }
}

/// Column order of the sweep CSV.
pub const SWEEP_HEADER: [&str; 8] = [
    "fraction",
    "channels_shifted",
    "matching",
    "seed",
    "miou",
    "pixel_accuracy",
    "temporal_consistency",
    "recovery",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: Fraction,
    pub channels_shifted: usize,
    #[serde(with = "on_off")]
    pub matching: bool,
    pub seed: u64,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub temporal_consistency: f64,
    pub recovery: f64,
}

mod on_off {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(if *v { "on" } else { "off" })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match String::deserialize(d)?.as_str() {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(serde::de::Error::custom(format!("expected on/off, got {other:?}"))),
        }
    }
}

/// All rows for one seed, plus that seed's no-shift baseline mIoU.
fn sweep_seed(spec: &SweepSpec, seed: u64, exec: Execution) -> Result<(Vec<SweepRow>, f64)> {
    let scene = generate_scene(&SceneSpec {
        seed,
        ..spec.scene.clone()
    })?;
    let mut rows = Vec::with_capacity(spec.fractions.len() * spec.matching.len());
    let mut baseline = None;
    for &fraction in &spec.fractions {
        for &matching in &spec.matching {
            let cfg = PipelineConfig::new(fraction, spec.boundary, matching);
            let report = evaluate(&scene, &cfg, exec)?;
            if fraction.is_zero() {
                baseline.get_or_insert(report.miou);
            }
            rows.push(SweepRow {
                fraction,
                channels_shifted: cfg.shift_for(spec.scene.dim)?.total_channels(),
                matching,
                seed,
                miou: report.miou,
                pixel_accuracy: report.pixel_accuracy,
                temporal_consistency: report.temporal_consistency,
                recovery: report.recovery,
            });
        }
    }
    let baseline = match baseline {
        Some(b) => b,
        None => evaluate(&scene, &PipelineConfig::new(Fraction::ZERO, spec.boundary, false), exec)?.miou,
    };
    Ok((rows, baseline))
}

/// Result of a sweep: every CSV row plus the seed-averaged no-shift mIoU.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub baseline_miou: f64,
}

/// Runs every `(seed, fraction, matching)` cell and streams rows to `out` as
/// CSV in seed-major order. Seeds are processed in batches (concurrently
/// under `exec`); each finished batch is written and flushed before the next
/// starts, so an interrupted sweep leaves only complete rows behind.
pub fn run_sweep<W: Write>(spec: &SweepSpec, out: W, exec: Execution) -> Result<SweepOutcome> {
    spec.validate()?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(SWEEP_HEADER)?;
    writer.flush().map_err(|e| Error::io("sweep CSV", e))?;

    let seeds: Vec<u64> = spec.seeds().collect();
    let batch = if exec.is_parallel() {
        (2 * current_threads()).max(1)
    } else {
        1
    };
    let mut rows = Vec::new();
    let mut baseline_sum = 0.0;
    for chunk in seeds.chunks(batch) {
        let results = exec.map(chunk, |&seed| sweep_seed(spec, seed, exec));
        for result in results {
            let (seed_rows, baseline) = result?;
            for row in &seed_rows {
                writer.serialize(row)?;
            }
            baseline_sum += baseline;
            rows.extend(seed_rows);
        }
        writer.flush().map_err(|e| Error::io("sweep CSV", e))?;
    }
    Ok(SweepOutcome {
        rows,
        baseline_miou: baseline_sum / seeds.len() as f64,
    })
}

fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Seed-averaged metrics for one `(fraction, matching)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub fraction: Fraction,
    pub channels_shifted: usize,
    pub matching: bool,
    pub seeds: usize,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub temporal_consistency: f64,
    pub recovery: f64,
    /// Mean mIoU minus the seed-averaged no-shift mIoU.
    pub miou_delta: f64,
}

/// Averages rows per cell in first-appearance order.
pub fn summarize(outcome: &SweepOutcome) -> Vec<SummaryRow> {
    let mut cells: Vec<(Fraction, bool, Vec<&SweepRow>)> = Vec::new();
    for row in &outcome.rows {
        match cells
            .iter_mut()
            .find(|(f, m, _)| *f == row.fraction && *m == row.matching)
        {
            Some((_, _, rows)) => rows.push(row),
            None => cells.push((row.fraction, row.matching, vec![row])),
        }
    }
    cells.sort_by_key(|(f, m, _)| {
        // Fraction order by value (cross-multiplied), then off before on.
        (
            (u64::from(f.num()) << 32) / u64::from(f.den()).max(1),
            *m,
        )
    });
    cells
        .into_iter()
        .map(|(fraction, matching, rows)| {
            let n = rows.len() as f64;
            let mean = |f: fn(&SweepRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let miou = mean(|r| r.miou);
            SummaryRow {
                fraction,
                channels_shifted: rows[0].channels_shifted,
                matching,
                seeds: rows.len(),
                miou,
                pixel_accuracy: mean(|r| r.pixel_accuracy),
                temporal_consistency: mean(|r| r.temporal_consistency),
                recovery: mean(|r| r.recovery),
                miou_delta: miou - outcome.baseline_miou,
            }
        })
        .collect()
}

/// Human-readable table with mIoU deltas from the no-shift baseline in
/// parentheses.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<9}{:>9}  {:<9}{:>20}{:>12}{:>12}{:>10}\n",
        "fraction", "channels", "matching", "mIoU", "pix.acc", "temporal", "recovery"
    );
    for row in summary {
        let miou = format!("{:.4} ({:+.4})", row.miou, row.miou_delta);
        out.push_str(&format!(
            "{:<9}{:>9}  {:<9}{:>20}{:>12.4}{:>12.4}{:>10.4}\n",
            row.fraction.to_string(),
            row.channels_shifted,
            if row.matching { "on" } else { "off" },
            miou,
            row.pixel_accuracy,
            row.temporal_consistency,
            row.recovery
        ));
    }
    out
}
