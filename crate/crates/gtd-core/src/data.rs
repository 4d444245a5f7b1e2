//! Synthetic dense-label sequence data.
//!
//! Sequences are drawn from small segment grammars: an activity is a set of
//! branches, a branch is an ordered list of segments, and a segment is one
//! class repeated for a uniformly drawn number of frames. Per-frame features
//! are noisy class embeddings, so a network can in principle read the class
//! of every observed frame but must infer everything after the observation
//! boundary from grammar statistics.
//!
//! Two built-in grammars cover the interesting regimes: one whose observed
//! prefix always determines the future, and one whose two activities share
//! an identical prefix longer than any observation window, making the future
//! genuinely multi-modal. An optional per-sequence "ambiguity window" adds
//! extra feature noise at the start of a sequence, degrading the observation
//! without changing the labels.

use crate::container::{ArrayContainer, ContainerError};
use crate::tensor::{NumericsError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset container: {0}")]
    Container(#[from] ContainerError),
    #[error("meta.jsonl line {line}: {detail}")]
    Meta { line: usize, detail: String },
    #[error("dataset schema: {detail}")]
    Schema { detail: String },
    #[error("dataset numerics: {0}")]
    Numerics(#[from] NumericsError),
}

fn schema_err(detail: impl Into<String>) -> DataError {
    DataError::Schema {
        detail: detail.into(),
    }
}

/// One class held for a uniform number of frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub class: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

/// An ordered realization of segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub segments: Vec<SegmentSpec>,
}

/// A named activity with one or more equally likely branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivitySpec {
    pub id: String,
    pub branches: Vec<BranchSpec>,
}

/// A complete segment grammar over a dense class inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub num_classes: usize,
    pub activities: Vec<ActivitySpec>,
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(schema_err("grammar needs at least two classes"));
        }
        if self.activities.is_empty() {
            return Err(schema_err("grammar needs at least one activity"));
        }
        let mut used = vec![false; self.num_classes];
        for act in &self.activities {
            if act.branches.is_empty() {
                return Err(schema_err(format!("activity '{}' has no branches", act.id)));
            }
            for (b, branch) in act.branches.iter().enumerate() {
                if branch.segments.is_empty() {
                    return Err(schema_err(format!(
                        "activity '{}' branch {b} has no segments",
                        act.id
                    )));
                }
                for seg in &branch.segments {
                    if seg.class >= self.num_classes {
                        return Err(schema_err(format!(
                            "activity '{}' uses class {} of {}",
                            act.id, seg.class, self.num_classes
                        )));
                    }
                    if seg.min_frames == 0 || seg.min_frames > seg.max_frames {
                        return Err(schema_err(format!(
                            "activity '{}' has a segment with frame range {}..={}",
                            act.id, seg.min_frames, seg.max_frames
                        )));
                    }
                    used[seg.class] = true;
                }
            }
        }
        if let Some(unused) = used.iter().position(|u| !u) {
            return Err(schema_err(format!(
                "class {unused} is never produced by any segment"
            )));
        }
        Ok(())
    }

    /// Shortest and longest sequence the grammar can emit.
    pub fn length_bounds(&self) -> (usize, usize) {
        let mut lo = usize::MAX;
        let mut hi = 0;
        for act in &self.activities {
            for branch in &act.branches {
                let min: usize = branch.segments.iter().map(|s| s.min_frames).sum();
                let max: usize = branch.segments.iter().map(|s| s.max_frames).sum();
                lo = lo.min(min);
                hi = hi.max(max);
            }
        }
        (lo, hi)
    }
}

/// One sampled sequence: which activity and branch produced it, plus the
/// dense frame labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceDraw {
    pub activity: usize,
    pub branch: usize,
    pub labels: Vec<usize>,
}

/// Draws activity, branch, and all segment durations uniformly.
pub fn sample_sequence(grammar: &GrammarSpec, rng: &mut ChaCha8Rng) -> SequenceDraw {
    let activity = rng.random_range(0..grammar.activities.len());
    let act = &grammar.activities[activity];
    let branch = rng.random_range(0..act.branches.len());
    let mut labels = Vec::new();
    for seg in &act.branches[branch].segments {
        let frames = rng.random_range(seg.min_frames..=seg.max_frames);
        labels.extend(std::iter::repeat_n(seg.class, frames));
    }
    SequenceDraw {
        activity,
        branch,
        labels,
    }
}

/// Draws one unit-norm embedding per class, resampling until all pairwise
/// distances are at least 1 so that classes stay separable under feature
/// noise. Fails if `dim` is too small to fit `num_classes` spread-out
/// directions within the attempt budget.
pub fn class_embeddings(
    num_classes: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, NumericsError> {
    if dim == 0 || num_classes == 0 {
        return Err(NumericsError::InvalidArgument {
            op: "class_embeddings",
            detail: "need at least one class and one dimension".into(),
        });
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    let mut attempts = 0;
    while rows.len() < num_classes {
        attempts += 1;
        if attempts > 1000 {
            return Err(NumericsError::InvalidArgument {
                op: "class_embeddings",
                detail: format!("could not separate {num_classes} classes in {dim} dimensions"),
            });
        }
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let far_enough = rows.iter().all(|r| {
            let d2: f64 = r.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 >= 1.0
        });
        if far_enough {
            rows.push(v);
        }
    }
    Tensor::from_vec(
        &[num_classes, dim],
        rows.into_iter().flatten().collect(),
    )
}

/// Per-frame features: the class embedding plus isotropic noise. Frames
/// inside `ambiguity` (a frame range with an extra sigma) receive additional
/// noise on top of the base level.
pub fn synthesize_features(
    labels: &[usize],
    embeddings: &Tensor,
    noise_sigma: f64,
    ambiguity: Option<(std::ops::Range<usize>, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, NumericsError> {
    let (classes, dim) = (embeddings.dims()[0], embeddings.dims()[1]);
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(NumericsError::InvalidArgument {
            op: "synthesize_features",
            detail: format!("label {bad} has no embedding row (only {classes})"),
        });
    }
    let mut out = Tensor::zeros(&[labels.len(), dim]);
    for (f, &class) in labels.iter().enumerate() {
        let extra = match &ambiguity {
            Some((window, sigma)) if window.contains(&f) => *sigma,
            _ => 0.0,
        };
        let sigma = noise_sigma + extra;
        let emb = embeddings.row(class);
        for (d, &mean) in emb.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            out.data_mut()[f * dim + d] = mean + sigma * z;
        }
    }
    Ok(out)
}

/// Observation/anticipation windows measured in frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub alpha: f64,
    pub beta: f64,
    /// Frames whose features are visible.
    pub observed: usize,
    /// Frames to anticipate, directly after the observed window.
    pub anticipated: usize,
}

impl ProtocolSplit {
    /// Frames in the model window: observed plus anticipated.
    pub fn total(&self) -> usize {
        self.observed + self.anticipated
    }

    /// The anticipated region as a frame range within the window.
    pub fn future_range(&self) -> std::ops::Range<usize> {
        self.observed..self.total()
    }

    /// The observed region as a frame range within the window.
    pub fn observed_range(&self) -> std::ops::Range<usize> {
        0..self.observed
    }
}

/// Computes the windows for a sequence of `len` frames: observe the first
/// `max(1, floor(alpha * len))` frames and anticipate the following
/// `max(1, floor(beta * len))`. Fails if the sequence is too short to hold
/// both windows.
pub fn split_protocol(len: usize, alpha: f64, beta: f64) -> Result<ProtocolSplit, NumericsError> {
    if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(NumericsError::InvalidArgument {
            op: "split_protocol",
            detail: format!("fractions must lie in (0, 1), got alpha={alpha}, beta={beta}"),
        });
    }
    let observed = ((alpha * len as f64).floor() as usize).max(1);
    let anticipated = ((beta * len as f64).floor() as usize).max(1);
    if observed + anticipated > len {
        return Err(NumericsError::InvalidArgument {
            op: "split_protocol",
            detail: format!(
                "windows of {observed}+{anticipated} frames exceed sequence length {len}"
            ),
        });
    }
    Ok(ProtocolSplit {
        alpha,
        beta,
        observed,
        anticipated,
    })
}

/// Assembles the conditioning tensor for one window: observed feature rows
/// first, then exact zeros for every anticipated frame.
pub fn build_condition(features: &Tensor, split: &ProtocolSplit) -> Result<Tensor, NumericsError> {
    let dims = features.dims();
    if dims.len() != 2 || dims[0] < split.total() {
        return Err(NumericsError::ShapeMismatch {
            op: "build_condition",
            detail: format!(
                "features {:?} cannot fill a {}-frame window",
                dims,
                split.total()
            ),
        });
    }
    let dim = dims[1];
    let mut out = Tensor::zeros(&[split.total(), dim]);
    out.data_mut()[..split.observed * dim]
        .copy_from_slice(&features.data()[..split.observed * dim]);
    Ok(out)
}

/// One stored sequence: identity, source activity, dense labels, features.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub activity: String,
    pub labels: Vec<usize>,
    pub features: Tensor,
}

/// An in-memory dataset with uniform feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SequenceRecord>,
    pub feature_dim: usize,
}

impl Dataset {
    /// Smallest class inventory consistent with the stored labels.
    pub fn min_num_classes(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| r.labels.iter())
            .max()
            .map_or(0, |&m| m + 1)
    }

    pub fn get(&self, id: &str) -> Option<&SequenceRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// The serialized form of one meta.jsonl row. Strict: unknown fields fail.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRow {
    id: String,
    activity: String,
    labels: Vec<usize>,
    length: usize,
}

const META_FILE: &str = "meta.jsonl";
const FEATURES_FILE: &str = "features.bin";

/// Writes `meta.jsonl` (one JSON object per sequence) and `features.bin`
/// (one `[length, dim]` array per sequence, named by id) into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let mut meta = std::io::BufWriter::new(std::fs::File::create(dir.join(META_FILE))?);
    let mut features = ArrayContainer::new();
    for rec in &dataset.records {
        let row = MetaRow {
            id: rec.id.clone(),
            activity: rec.activity.clone(),
            labels: rec.labels.clone(),
            length: rec.labels.len(),
        };
        let line = serde_json::to_string(&row).map_err(|e| schema_err(e.to_string()))?;
        writeln!(meta, "{line}")?;
        if rec.features.dims() != [rec.labels.len(), dataset.feature_dim] {
            return Err(schema_err(format!(
                "sequence '{}': features {:?} do not match {} labeled frames x {} dims",
                rec.id,
                rec.features.dims(),
                rec.labels.len(),
                dataset.feature_dim
            )));
        }
        features.push(&rec.id, rec.features.clone())?;
    }
    meta.flush()?;
    features.write_file(&dir.join(FEATURES_FILE))?;
    Ok(())
}

/// Reads a dataset back, validating that metadata and feature arrays agree
/// exactly: same ids (no extras on either side), same lengths, one uniform
/// feature width.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join(META_FILE);
    let file = std::fs::File::open(&meta_path)?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: MetaRow = serde_json::from_str(&line).map_err(|e| DataError::Meta {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if row.length != row.labels.len() {
            return Err(DataError::Meta {
                line: i + 1,
                detail: format!(
                    "length field says {} but {} labels are present",
                    row.length,
                    row.labels.len()
                ),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(schema_err("dataset has no sequences"));
    }

    let features = ArrayContainer::read_file(&dir.join(FEATURES_FILE))?;
    if features.len() != rows.len() {
        return Err(schema_err(format!(
            "{} feature arrays for {} metadata rows",
            features.len(),
            rows.len()
        )));
    }

    let mut feature_dim = None;
    let mut records = Vec::with_capacity(rows.len());
    for row in rows {
        let tensor = features
            .get(&row.id)
            .ok_or_else(|| schema_err(format!("no feature array for sequence '{}'", row.id)))?;
        let dims = tensor.dims();
        if dims.len() != 2 || dims[0] != row.length {
            return Err(schema_err(format!(
                "sequence '{}': feature array {:?} does not match {} frames",
                row.id, dims, row.length
            )));
        }
        match feature_dim {
            None => feature_dim = Some(dims[1]),
            Some(d) if d != dims[1] => {
                return Err(schema_err(format!(
                    "sequence '{}': feature width {} differs from {}",
                    row.id, dims[1], d
                )));
            }
            _ => {}
        }
        records.push(SequenceRecord {
            id: row.id,
            activity: row.activity,
            labels: row.labels,
            features: tensor.clone(),
        });
    }
    Ok(Dataset {
        records,
        feature_dim: feature_dim.expect("at least one record"),
    })
}

/// Which built-in grammar to synthesize from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrammarPreset {
    /// Eight classes, four single-branch activities with disjoint openings:
    /// the observed prefix identifies the activity, so the future is
    /// essentially deterministic.
    Unambiguous,
    /// Seven classes, two activities that share one long opening segment:
    /// any observation window inside the prefix leaves both futures equally
    /// likely.
    SharedPrefix,
}

/// Everything `generate_dataset` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub grammar: GrammarPreset,
    pub num_sequences: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Fraction of sequences that get an ambiguity window of extra feature
    /// noise at the start.
    pub ambiguous_fraction: f64,
    /// Length of that window as a fraction of the sequence.
    pub ambiguity_window: f64,
    /// Upper bound of the extra noise level; each ambiguous sequence draws
    /// its own level between a quarter of this and all of it.
    pub ambiguity_extra_sigma: f64,
    pub seed: u64,
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_sequences == 0 {
            return Err(schema_err("num_sequences must be >= 1"));
        }
        if self.feature_dim < 4 {
            return Err(schema_err("feature_dim must be >= 4 to separate classes"));
        }
        if self.noise_sigma < 0.0 || self.ambiguity_extra_sigma < 0.0 {
            return Err(schema_err("noise levels must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction)
            || !(0.0..=1.0).contains(&self.ambiguity_window)
        {
            return Err(schema_err("fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn preset_grammar(preset: GrammarPreset) -> GrammarSpec {
    let seg = |class: usize, min: usize, max: usize| SegmentSpec {
        class,
        min_frames: min,
        max_frames: max,
    };
    let branch = |segments: Vec<SegmentSpec>| BranchSpec { segments };
    match preset {
        GrammarPreset::Unambiguous => {
            // Four activities whose first segments are pairwise distinct, so
            // one observed segment pins the whole remainder. Durations are
            // fixed: any duration jitter would itself be a source of
            // ambiguity (uncertain segment boundaries), and this grammar is
            // the control where the future is exactly determined by the
            // observation.
            let orders: [[usize; 4]; 4] = [[0, 4, 2, 5], [1, 5, 3, 6], [2, 6, 0, 7], [3, 7, 1, 4]];
            GrammarSpec {
                num_classes: 8,
                activities: orders
                    .iter()
                    .enumerate()
                    .map(|(i, order)| ActivitySpec {
                        id: format!("act{i}"),
                        branches: vec![branch(
                            order.iter().map(|&c| seg(c, 16, 16)).collect(),
                        )],
                    })
                    .collect(),
            }
        }
        GrammarPreset::SharedPrefix => {
            // Both activities open with the same long class-0 segment; an
            // observation window inside it carries no branch information.
            // The prefix stays longer than any realistic observed window but
            // short enough that most of the anticipated region lies past the
            // divergence point, where the two futures actually differ.
            GrammarSpec {
                num_classes: 7,
                activities: vec![
                    ActivitySpec {
                        id: "act0".into(),
                        branches: vec![branch(vec![
                            seg(0, 20, 24),
                            seg(1, 16, 18),
                            seg(2, 16, 18),
                            seg(3, 16, 18),
                        ])],
                    },
                    ActivitySpec {
                        id: "act1".into(),
                        branches: vec![branch(vec![
                            seg(0, 20, 24),
                            seg(4, 16, 18),
                            seg(5, 16, 18),
                            seg(6, 16, 18),
                        ])],
                    },
                ],
            }
        }
    }
}

const SEED_TAG_EMBEDDINGS: u64 = 0xEB;
const SEED_TAG_SEQUENCE: u64 = 0xDA;

/// Synthesizes a dataset: class embeddings once, then one independent random
/// stream per sequence, so any subset of ids is reproducible from the seed.
pub fn generate_dataset(config: &DataGenConfig) -> Result<(Dataset, GrammarSpec), DataError> {
    config.validate()?;
    let grammar = preset_grammar(config.grammar);
    grammar.validate()?;

    let mut emb_rng = ChaCha8Rng::seed_from_u64(crate::derive_stream_seed(
        config.seed,
        SEED_TAG_EMBEDDINGS,
        0,
    ));
    let embeddings = class_embeddings(grammar.num_classes, config.feature_dim, &mut emb_rng)?;

    let mut records = Vec::with_capacity(config.num_sequences);
    for i in 0..config.num_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_stream_seed(
            config.seed,
            SEED_TAG_SEQUENCE,
            i as u64,
        ));
        let draw = sample_sequence(&grammar, &mut rng);
        let ambiguous = rng.random::<f64>() < config.ambiguous_fraction;
        let ambiguity = ambiguous.then(|| {
            let frames =
                ((config.ambiguity_window * draw.labels.len() as f64).round() as usize).max(1);
            let level = config.ambiguity_extra_sigma * rng.random_range(0.25..=1.0);
            (0..frames.min(draw.labels.len()), level)
        });
        let features = synthesize_features(
            &draw.labels,
            &embeddings,
            config.noise_sigma,
            ambiguity,
            &mut rng,
        )?;
        records.push(SequenceRecord {
            id: format!("seq{i:04}"),
            activity: grammar.activities[draw.activity].id.clone(),
            labels: draw.labels,
            features,
        });
    }
    Ok((
        Dataset {
            records,
            feature_dim: config.feature_dim,
        },
        grammar,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_windows_match_hand_values() {
        let s = split_protocol(100, 0.2, 0.3).unwrap();
        assert_eq!((s.observed, s.anticipated), (20, 30));
        let s = split_protocol(10, 0.5, 0.5).unwrap();
        assert_eq!((s.observed, s.anticipated), (5, 5));
        // Tiny sequences floor to zero and are pulled up to one frame each.
        let s = split_protocol(7, 0.2, 0.3).unwrap();
        assert_eq!((s.observed, s.anticipated), (1, 2));
        assert_eq!(s.total(), 3);
        assert_eq!(s.future_range(), 1..3);

        assert!(split_protocol(3, 0.9, 0.9).is_err());
        assert!(split_protocol(1, 0.5, 0.5).is_err());
        assert!(split_protocol(100, 0.0, 0.5).is_err());
        assert!(split_protocol(100, 0.5, 1.0).is_err());
    }

    #[test]
    fn condition_copies_observed_rows_and_zeroes_the_future() {
        let features = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let split = split_protocol(4, 0.5, 0.5).unwrap();
        let cond = build_condition(&features, &split).unwrap();
        assert_eq!(cond.dims(), &[4, 1]);
        assert_eq!(cond.data(), &[1.0, 2.0, 0.0, 0.0]);
        // The anticipated rows must be exact zeros, not merely small.
        for f in split.future_range() {
            assert!(cond.row(f).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn grammar_validation_catches_structural_errors() {
        let mut g = preset_grammar(GrammarPreset::Unambiguous);
        assert!(g.validate().is_ok());
        g.num_classes = 9; // class 8 now exists but nothing produces it
        assert!(g.validate().is_err());

        let mut g = preset_grammar(GrammarPreset::SharedPrefix);
        g.activities[0].branches[0].segments[0].min_frames = 40; // min > max
        assert!(g.validate().is_err());

        let g = GrammarSpec {
            num_classes: 2,
            activities: vec![],
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn sampled_sequences_follow_their_branch() {
        let grammar = preset_grammar(GrammarPreset::Unambiguous);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let draw = sample_sequence(&grammar, &mut rng);
            let branch = &grammar.activities[draw.activity].branches[draw.branch];
            // Re-segment the labels and compare class order and durations.
            let mut pos = 0;
            for seg in &branch.segments {
                let run = draw.labels[pos..]
                    .iter()
                    .take_while(|&&c| c == seg.class)
                    .count();
                assert!(
                    (seg.min_frames..=seg.max_frames).contains(&run),
                    "run of {run} outside {}..={}",
                    seg.min_frames,
                    seg.max_frames
                );
                pos += run;
            }
            assert_eq!(pos, draw.labels.len());
        }
    }

    #[test]
    fn preset_lengths_stay_in_expected_bounds() {
        let (lo, hi) = preset_grammar(GrammarPreset::Unambiguous).length_bounds();
        assert_eq!((lo, hi), (64, 64));
        let (lo, hi) = preset_grammar(GrammarPreset::SharedPrefix).length_bounds();
        assert_eq!((lo, hi), (68, 78));
    }

    #[test]
    fn embeddings_are_unit_norm_and_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = class_embeddings(8, 16, &mut rng).unwrap();
        for c in 0..8 {
            let n: f64 = e.row(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            for other in 0..c {
                let d2: f64 = e
                    .row(c)
                    .iter()
                    .zip(e.row(other))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d2 >= 1.0, "classes {other} and {c} are {d2} apart");
            }
        }
        // Two classes cannot be separated on a 1-sphere... they can (+1/-1),
        // but many classes in a tiny space cannot.
        assert!(class_embeddings(30, 1, &mut rng).is_err());
    }

    #[test]
    fn identical_label_prefixes_give_identical_feature_prefixes() {
        // The feature stream of frame f depends only on the label of frame f
        // and the per-sequence noise stream, never on later labels. Two
        // sequences sharing a 28-frame prefix and a noise seed must agree
        // bitwise on those 28 rows.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = class_embeddings(7, 16, &mut rng).unwrap();
        let mut labels_a = vec![0usize; 28];
        labels_a.extend(vec![1usize; 17]);
        let mut labels_b = vec![0usize; 28];
        labels_b.extend(vec![4usize; 17]);

        let mut rng_a = ChaCha8Rng::seed_from_u64(99);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        let fa = synthesize_features(&labels_a, &emb, 0.1, None, &mut rng_a).unwrap();
        let fb = synthesize_features(&labels_b, &emb, 0.1, None, &mut rng_b).unwrap();
        for f in 0..28 {
            assert_eq!(fa.row(f), fb.row(f), "prefix row {f} differs");
        }
        assert_ne!(fa.row(28), fb.row(28));
    }

    #[test]
    fn ambiguity_window_only_touches_its_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emb = class_embeddings(4, 8, &mut rng).unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2];
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let clean = synthesize_features(&labels, &emb, 0.1, None, &mut r1).unwrap();
        let noisy = synthesize_features(&labels, &emb, 0.1, Some((0..2, 3.0)), &mut r2).unwrap();
        for f in 0..2 {
            assert_ne!(clean.row(f), noisy.row(f));
        }
        for f in 2..6 {
            assert_eq!(clean.row(f), noisy.row(f));
        }
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let config = DataGenConfig {
            grammar: GrammarPreset::Unambiguous,
            num_sequences: 5,
            feature_dim: 8,
            noise_sigma: 0.1,
            ambiguous_fraction: 0.0,
            ambiguity_window: 0.3,
            ambiguity_extra_sigma: 2.0,
            seed: 42,
        };
        let (dataset, _) = generate_dataset(&config).unwrap();
        write_dataset(dir.path(), &dataset).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, dataset);
        assert_eq!(back.min_num_classes(), 8);
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let config = DataGenConfig {
            grammar: GrammarPreset::SharedPrefix,
            num_sequences: 4,
            feature_dim: 8,
            noise_sigma: 0.1,
            ambiguous_fraction: 0.5,
            ambiguity_window: 0.25,
            ambiguity_extra_sigma: 1.5,
            seed: 7,
        };
        let (a, _) = generate_dataset(&config).unwrap();
        let (b, _) = generate_dataset(&config).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_dataset(&DataGenConfig { seed: 8, ..config }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn strict_metadata_parsing_rejects_drift() {
        let dir = tempfile::tempdir().unwrap();
        let write_meta = |text: &str| std::fs::write(dir.path().join("meta.jsonl"), text).unwrap();
        let mut features = ArrayContainer::new();
        features.push("seq0000", Tensor::zeros(&[2, 3])).unwrap();
        features.write_file(&dir.path().join("features.bin")).unwrap();

        // Unknown field.
        write_meta(r#"{"id":"seq0000","activity":"a","labels":[0,1],"length":2,"extra":1}"#);
        assert!(matches!(read_dataset(dir.path()), Err(DataError::Meta { .. })));

        // Length disagrees with labels.
        write_meta(r#"{"id":"seq0000","activity":"a","labels":[0,1],"length":3}"#);
        assert!(matches!(read_dataset(dir.path()), Err(DataError::Meta { .. })));

        // Id missing from the feature container.
        write_meta(r#"{"id":"other","activity":"a","labels":[0,1],"length":2}"#);
        assert!(read_dataset(dir.path()).is_err());

        // Feature frame count disagrees with labels.
        write_meta(r#"{"id":"seq0000","activity":"a","labels":[0,1,1],"length":3}"#);
        assert!(read_dataset(dir.path()).is_err());

        // Extra feature array nothing references.
        write_meta(r#"{"id":"seq0000","activity":"a","labels":[0,1],"length":2}"#);
        let mut extra = ArrayContainer::new();
        extra.push("seq0000", Tensor::zeros(&[2, 3])).unwrap();
        extra.push("ghost", Tensor::zeros(&[1, 3])).unwrap();
        extra.write_file(&dir.path().join("features.bin")).unwrap();
        assert!(read_dataset(dir.path()).is_err());

        // Clean case parses.
        let mut ok = ArrayContainer::new();
        ok.push("seq0000", Tensor::zeros(&[2, 3])).unwrap();
        ok.write_file(&dir.path().join("features.bin")).unwrap();
        assert!(read_dataset(dir.path()).is_ok());
    }
}
