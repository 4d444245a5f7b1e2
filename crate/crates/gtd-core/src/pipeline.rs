//! Sampling over a dataset, the prediction-record file format, and report
//! evaluation.
//!
//! Predictions are decoupled from evaluation through a line-delimited JSON
//! file: one record per (sequence, sample) pair, sorted by `(id, sample)`.
//! Evaluation consumes only that file plus the dataset's ground truth, so
//! any producer of the format is scoreable.

use crate::data::{build_condition, split_protocol, Dataset};
use crate::diffusion::{
    decode_labels, sample_many, DiffusionConfig, GtanDenoiser, NoiseSchedule, ReconstructionMap,
};
use crate::gtan::{gtan_forward, ForwardInput, GtanConfig, ModelParams};
use crate::metrics::{
    evaluate_samples, mfss_one, quartile_report, spearman_rank_correlation, QuartileTable,
    VideoSummary,
};
use crate::tensor::{NumericsError, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("prediction io: {0}")]
    Io(#[from] std::io::Error),
    #[error("prediction line {line}: {detail}")]
    Line { line: usize, detail: String },
    #[error("prediction set: {detail}")]
    Schema { detail: String },
    #[error("pipeline numerics: {0}")]
    Numerics(#[from] NumericsError),
}

fn schema_err(detail: impl Into<String>) -> PipelineError {
    PipelineError::Schema {
        detail: detail.into(),
    }
}

/// One predicted window for one sequence and one sample index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    /// Sample index within this sequence, `0..num_samples`.
    pub sample: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Predicted dense labels over the whole model window (observed frames
    /// first, then the anticipated region).
    pub labels: Vec<usize>,
}

/// How to sample a dataset: the windowing fractions, the number of futures
/// per sequence, and the base seed every random stream derives from.
#[derive(Debug, Clone, Copy)]
pub struct SamplePlan {
    pub alpha: f64,
    pub beta: f64,
    pub num_samples: usize,
    pub seed: u64,
}

/// Seed tag separating per-sequence sampling streams (see
/// [`crate::derive_stream_seed`]).
pub const SEED_TAG_PREDICT: u64 = 0x9D;

/// Runs the reverse diffusion process `num_samples` times per sequence and
/// decodes each reconstruction into dense labels. Records come out sorted by
/// `(id, sample)` and are bitwise deterministic in the plan's seed no matter
/// how work is scheduled.
pub fn predict_dataset(
    params: &ModelParams,
    gtan: &GtanConfig,
    diffusion: &DiffusionConfig,
    map: ReconstructionMap,
    dataset: &Dataset,
    plan: &SamplePlan,
) -> Result<Vec<PredictionRecord>, PipelineError> {
    if plan.num_samples == 0 {
        return Err(schema_err("num_samples must be >= 1"));
    }
    let schedule = NoiseSchedule::new(diffusion.schedule, diffusion.t_max)?;
    let denoiser = GtanDenoiser {
        params,
        config: gtan,
        map,
    };
    let mut out = Vec::with_capacity(dataset.records.len() * plan.num_samples);
    for (i, record) in dataset.records.iter().enumerate() {
        let split = split_protocol(record.labels.len(), plan.alpha, plan.beta)?;
        let cond = build_condition(&record.features, &split)?;
        let seq_seed = crate::derive_stream_seed(plan.seed, SEED_TAG_PREDICT, i as u64);
        let samples = sample_many(
            &denoiser,
            &cond,
            diffusion,
            &schedule,
            plan.num_samples,
            seq_seed,
        )?;
        for (m, (reconstruction, _trace)) in samples.iter().enumerate() {
            out.push(PredictionRecord {
                id: record.id.clone(),
                sample: m,
                alpha: plan.alpha,
                beta: plan.beta,
                labels: decode_labels(reconstruction)?,
            });
        }
    }
    sort_predictions(&mut out);
    Ok(out)
}

/// Single-pass prediction: one forward with zero label inputs and no step
/// embedding, last-stage argmax. One record per sequence, `sample` 0.
pub fn predict_dataset_deterministic(
    params: &ModelParams,
    gtan: &GtanConfig,
    dataset: &Dataset,
    alpha: f64,
    beta: f64,
) -> Result<Vec<PredictionRecord>, PipelineError> {
    let mut out = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        let split = split_protocol(record.labels.len(), alpha, beta)?;
        let cond = build_condition(&record.features, &split)?;
        let zeros = Tensor::zeros(&[split.total(), gtan.num_classes]);
        let input = ForwardInput {
            noisy: &zeros,
            self_cond: &zeros,
            cond: &cond,
            step: None,
        };
        let (scores, _) = gtan_forward(params, gtan, &input, false)?;
        let last = scores.last().expect("at least one stage");
        out.push(PredictionRecord {
            id: record.id.clone(),
            sample: 0,
            alpha,
            beta,
            labels: decode_labels(last)?,
        });
    }
    sort_predictions(&mut out);
    Ok(out)
}

fn sort_predictions(records: &mut [PredictionRecord]) {
    records.sort_by(|a, b| a.id.cmp(&b.id).then(a.sample.cmp(&b.sample)));
}

/// Writes records as line-delimited JSON, sorted by `(id, sample)`.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), PipelineError> {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id).then(a.sample.cmp(&b.sample)));
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in sorted {
        let line = serde_json::to_string(r).map_err(|e| schema_err(e.to_string()))?;
        writeln!(file, "{line}")?;
    }
    file.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

/// Reads a prediction file; every line must parse, blank lines are rejected.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, PipelineError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        let record: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| PipelineError::Line {
                line: idx + 1,
                detail: e.to_string(),
            })?;
        out.push(record);
    }
    Ok(out)
}

/// Scores for one (alpha, beta) group of predictions.
#[derive(Debug, Clone, Serialize)]
pub struct EvalGroup {
    pub alpha: f64,
    pub beta: f64,
    pub num_videos: usize,
    pub num_samples: usize,
    /// Future-region accuracy averaged over samples, then videos.
    pub future_mean_moc: f64,
    /// Future-region accuracy of each video's best sample, averaged.
    pub future_top1_moc: f64,
    /// Diversity means; absent with a single sample per video.
    pub observed_mfss: Option<f64>,
    pub future_mfss: Option<f64>,
    /// Rank correlation between per-video observed diversity and future
    /// mean accuracy; absent when either quantity is constant or undefined.
    pub diversity_accuracy_correlation: Option<f64>,
    /// Videos ranked by observed diversity; needs >= 4 videos and >= 2
    /// samples.
    pub quartiles: Option<QuartileTable>,
    pub videos: Vec<VideoSummary>,
}

/// Evaluation of a whole prediction file, one group per (alpha, beta).
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub groups: Vec<EvalGroup>,
}

/// Joins predictions with ground truth and scores every (alpha, beta) group.
///
/// Strict about the join: every prediction id must exist in the dataset,
/// sample indices per sequence must be dense from zero and equal across the
/// group, and every label vector must match its window length.
pub fn evaluate_predictions(
    predictions: &[PredictionRecord],
    dataset: &Dataset,
) -> Result<EvalReport, PipelineError> {
    if predictions.is_empty() {
        return Err(schema_err("no prediction records"));
    }
    // Group by the exact bits of (alpha, beta); f64 keys would be a footgun
    // under Ord, bit patterns are not.
    let mut groups: BTreeMap<(u64, u64), Vec<&PredictionRecord>> = BTreeMap::new();
    for p in predictions {
        if !(p.alpha.is_finite() && p.beta.is_finite()) {
            return Err(schema_err(format!(
                "sequence '{}' has non-finite window fractions",
                p.id
            )));
        }
        groups
            .entry((p.alpha.to_bits(), p.beta.to_bits()))
            .or_default()
            .push(p);
    }

    let mut report = EvalReport { groups: Vec::new() };
    for ((alpha_bits, beta_bits), mut members) in groups {
        let alpha = f64::from_bits(alpha_bits);
        let beta = f64::from_bits(beta_bits);
        members.sort_by(|a, b| a.id.cmp(&b.id).then(a.sample.cmp(&b.sample)));

        let mut by_id: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
        for p in members {
            by_id.entry(&p.id).or_default().push(p);
        }
        let num_samples = by_id.values().next().expect("non-empty group").len();

        let mut videos = Vec::with_capacity(by_id.len());
        let mut mean_sum = 0.0;
        let mut top1_sum = 0.0;
        for (id, preds) in &by_id {
            if preds.len() != num_samples {
                return Err(schema_err(format!(
                    "sequence '{id}' has {} samples, group has {num_samples}",
                    preds.len()
                )));
            }
            for (m, p) in preds.iter().enumerate() {
                if p.sample != m {
                    return Err(schema_err(format!(
                        "sequence '{id}' sample indices are not dense from zero"
                    )));
                }
            }
            let record = dataset
                .records
                .iter()
                .find(|r| r.id == *id)
                .ok_or_else(|| schema_err(format!("sequence '{id}' is not in the dataset")))?;
            let split = split_protocol(record.labels.len(), alpha, beta)?;
            let window = &record.labels[..split.total()];
            let samples: Vec<Vec<usize>> = preds.iter().map(|p| p.labels.clone()).collect();
            for s in &samples {
                if s.len() != split.total() {
                    return Err(schema_err(format!(
                        "sequence '{id}' prediction covers {} frames, window has {}",
                        s.len(),
                        split.total()
                    )));
                }
            }
            let (mean_moc, top1_moc) =
                evaluate_samples(&samples, window, split.future_range())?;
            mean_sum += mean_moc;
            top1_sum += top1_moc;
            if num_samples >= 2 {
                videos.push(VideoSummary {
                    id: id.to_string(),
                    observed_mfss: mfss_one(&samples, split.observed_range())?,
                    future_mfss: mfss_one(&samples, split.future_range())?,
                    future_mean_moc: mean_moc,
                });
            } else {
                videos.push(VideoSummary {
                    id: id.to_string(),
                    observed_mfss: 0.0,
                    future_mfss: 0.0,
                    future_mean_moc: mean_moc,
                });
            }
        }

        let n = by_id.len() as f64;
        let diverse = num_samples >= 2;
        let observed_mfss = diverse
            .then(|| videos.iter().map(|v| v.observed_mfss).sum::<f64>() / n);
        let future_mfss =
            diverse.then(|| videos.iter().map(|v| v.future_mfss).sum::<f64>() / n);
        let correlation = if diverse && videos.len() >= 2 {
            let x: Vec<f64> = videos.iter().map(|v| v.observed_mfss).collect();
            let y: Vec<f64> = videos.iter().map(|v| v.future_mean_moc).collect();
            spearman_rank_correlation(&x, &y).ok()
        } else {
            None
        };
        let quartiles = if diverse && videos.len() >= 4 {
            Some(quartile_report(&videos)?)
        } else {
            None
        };
        report.groups.push(EvalGroup {
            alpha,
            beta,
            num_videos: by_id.len(),
            num_samples,
            future_mean_moc: mean_sum / n,
            future_top1_moc: top1_sum / n,
            observed_mfss,
            future_mfss,
            diversity_accuracy_correlation: correlation,
            quartiles,
            videos,
        });
    }
    Ok(report)
}

/// Human-readable report: one block per group, quartile table included when
/// available.
pub fn render_report_text(report: &EvalReport) -> String {
    let mut out = String::new();
    for g in &report.groups {
        let _ = writeln!(
            out,
            "alpha={} beta={}  ({} videos, {} samples each)",
            g.alpha, g.beta, g.num_videos, g.num_samples
        );
        let _ = writeln!(out, "  future Mean MoC   {:8.3}", g.future_mean_moc);
        let _ = writeln!(out, "  future Top-1 MoC  {:8.3}", g.future_top1_moc);
        if let Some(v) = g.observed_mfss {
            let _ = writeln!(out, "  observed MFSS     {v:8.3}");
        }
        if let Some(v) = g.future_mfss {
            let _ = writeln!(out, "  future MFSS       {v:8.3}");
        }
        if let Some(v) = g.diversity_accuracy_correlation {
            let _ = writeln!(out, "  rank corr (observed MFSS vs future MoC)  {v:+.3}");
        }
        if let Some(q) = &g.quartiles {
            let _ = writeln!(out, "{q}");
        }
    }
    out
}

/// Machine-readable report: one JSON line per group (without the per-video
/// list), then one line per video, so downstream plots can consume either
/// granularity.
pub fn render_report_jsonl(report: &EvalReport) -> Result<String, PipelineError> {
    let mut out = String::new();
    for g in &report.groups {
        let group = serde_json::json!({
            "kind": "group",
            "alpha": g.alpha,
            "beta": g.beta,
            "num_videos": g.num_videos,
            "num_samples": g.num_samples,
            "future_mean_moc": g.future_mean_moc,
            "future_top1_moc": g.future_top1_moc,
            "observed_mfss": g.observed_mfss,
            "future_mfss": g.future_mfss,
            "diversity_accuracy_correlation": g.diversity_accuracy_correlation,
            "quartiles": g.quartiles,
        });
        out.push_str(&serde_json::to_string(&group).map_err(|e| schema_err(e.to_string()))?);
        out.push('\n');
        for v in &g.videos {
            let video = serde_json::json!({
                "kind": "video",
                "alpha": g.alpha,
                "beta": g.beta,
                "id": v.id,
                "observed_mfss": v.observed_mfss,
                "future_mfss": v.future_mfss,
                "future_mean_moc": v.future_mean_moc,
            });
            out.push_str(&serde_json::to_string(&video).map_err(|e| schema_err(e.to_string()))?);
            out.push('\n');
        }
    }
    Ok(out)
}
