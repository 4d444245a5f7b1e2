//! Training: objectives, the optimizer, the batch loop, and checkpoints.
//!
//! Two training modes share the network. The stochastic mode trains the
//! denoiser: draw a step, noise the clean labels, optionally build a
//! self-conditioning tensor from a gradient-stopped preliminary pass, and
//! regress every stage's scores onto the clean labels. The deterministic
//! mode trains the same network as a single-pass classifier: zero label
//! inputs, no step embedding, cross-entropy on the scores.
//!
//! Everything is reproducible from a base seed: epoch shuffles and per-step
//! batches use functionally derived stream seeds, so training can resume
//! from a checkpoint bitwise.

use crate::container::{ArrayContainer, ContainerError};
use crate::data::{build_condition, split_protocol, ProtocolSplit, SequenceRecord};
use crate::diffusion::{
    encode_labels, q_sample, DiffusionConfig, LabelScaling, NoiseSchedule, ReconstructionMap,
};
use crate::gtan::{forward_on_tape, ForwardInput, GtanConfig, ModelParams};
use crate::tensor::{NumericsError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training numerics: {0}")]
    Numerics(#[from] NumericsError),
    #[error("training produced a non-finite loss on sequence '{id}'")]
    NonFiniteLoss { id: String },
    #[error("training config: {detail}")]
    Config { detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] ContainerError),
    #[error("checkpoint meta: {detail}")]
    CheckpointMeta { detail: String },
}

fn config_err(detail: impl Into<String>) -> TrainError {
    TrainError::Config {
        detail: detail.into(),
    }
}

/// Which objective drives the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Denoiser training inside the diffusion process.
    Stochastic,
    /// Single-pass classifier training (no noise, no step embedding).
    Deterministic,
}

/// Reconstruction objective for stochastic training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared error on the analog label bits.
    Mse,
    /// Per-frame softmax cross-entropy.
    Ce,
    /// Per-bit binary cross-entropy.
    Bce,
}

impl LossKind {
    /// The score map consistent with the objective: what the loss assumes
    /// about the scores is also how reconstructions must be materialized for
    /// self-conditioning and sampling.
    pub fn reconstruction_map(self) -> ReconstructionMap {
        match self {
            LossKind::Mse => ReconstructionMap::Identity,
            LossKind::Ce => ReconstructionMap::Softmax,
            LossKind::Bce => ReconstructionMap::Sigmoid,
        }
    }
}

/// Optimization and objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub loss: LossKind,
    /// Weight of the observed window in the loss. `1.0` means one mean over
    /// the whole window; any other value splits the loss into
    /// `weight * mean(observed) + mean(anticipated)`.
    pub obs_loss_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Probability that a stochastic training pass zeroes its
    /// self-conditioning input instead of running the preliminary pass.
    pub self_cond_zero_prob: f64,
    /// Base seed for parameter init, epoch shuffles, and batch noise.
    pub seed: u64,
    /// Observation and anticipation fractions used to window sequences.
    pub alpha: f64,
    pub beta: f64,
}

impl TrainConfig {
    pub fn validate(&self, scaling: LabelScaling) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(config_err("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.self_cond_zero_prob) {
            return Err(config_err("self_cond_zero_prob must lie in [0, 1]"));
        }
        if self.obs_loss_weight < 0.0 {
            return Err(config_err("obs_loss_weight must be >= 0"));
        }
        if matches!(self.loss, LossKind::Ce | LossKind::Bce)
            && scaling != LabelScaling::ZeroOne
        {
            // Softmax and sigmoid reconstructions live in [0, 1]; feeding
            // them back into a signed-bit process would shift every step.
            return Err(config_err(
                "cross-entropy losses need zero_one label scaling",
            ));
        }
        Ok(())
    }
}

/// One windowed training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub id: String,
    /// Dense labels over the model window (observed plus anticipated).
    pub window_labels: Vec<usize>,
    /// Conditioning tensor: observed features then zero rows.
    pub cond: Tensor,
    pub split: ProtocolSplit,
}

/// Windows one stored sequence for training.
pub fn prepare_train_item(
    record: &SequenceRecord,
    alpha: f64,
    beta: f64,
) -> Result<TrainItem, NumericsError> {
    let split = split_protocol(record.labels.len(), alpha, beta)?;
    let cond = build_condition(&record.features, &split)?;
    Ok(TrainItem {
        id: record.id.clone(),
        window_labels: record.labels[..split.total()].to_vec(),
        cond,
        split,
    })
}

/// Per-frame loss coefficients over the window. With weight 1 every frame
/// carries `1/frames`; otherwise observed frames carry `weight/observed` and
/// anticipated frames `1/anticipated`.
fn frame_coefficients(split: &ProtocolSplit, obs_weight: f64) -> Vec<f64> {
    let n = split.total();
    if obs_weight == 1.0 {
        return vec![1.0 / n as f64; n];
    }
    (0..n)
        .map(|f| {
            if f < split.observed {
                obs_weight / split.observed as f64
            } else {
                1.0 / split.anticipated as f64
            }
        })
        .collect()
}

/// Result of one loss evaluation.
pub struct LossOutcome {
    pub loss: f64,
    pub per_stage: Vec<f64>,
    /// Gradients in canonical parameter order, when requested.
    pub grads: Option<Vec<Tensor>>,
    /// Labels of every op the forward/loss pass recorded, in order; lets
    /// tests assert structural facts about a loss path.
    pub op_labels: Vec<&'static str>,
}

/// Explicit inputs of the stochastic loss. Keeping the noisy tensor and the
/// self-conditioning tensor as inputs (rather than drawing them inside)
/// makes the loss a deterministic function of its arguments, which gradient
/// checks and invariance tests rely on.
pub struct StochasticLossInputs<'a> {
    pub y_t: &'a Tensor,
    pub window_labels: &'a [usize],
    pub self_cond: &'a Tensor,
    pub cond: &'a Tensor,
    pub t: usize,
    pub split: &'a ProtocolSplit,
}

/// Multi-stage reconstruction loss at one diffusion step.
#[allow(clippy::too_many_arguments)]
pub fn stochastic_loss(
    params: &ModelParams,
    gtan: &GtanConfig,
    train: &TrainConfig,
    scaling: LabelScaling,
    inputs: &StochasticLossInputs,
    train_mode_dropout: bool,
    rng: Option<&mut ChaCha8Rng>,
    want_grads: bool,
) -> Result<LossOutcome, TrainError> {
    let forward_input = ForwardInput {
        noisy: inputs.y_t,
        self_cond: inputs.self_cond,
        cond: inputs.cond,
        step: Some(inputs.t),
    };
    let pass = forward_on_tape(
        params,
        gtan,
        &forward_input,
        train_mode_dropout,
        want_grads,
        false,
        rng,
    )?;
    let mut tape = pass.tape;

    let n = inputs.split.total();
    let c = gtan.num_classes;
    if inputs.window_labels.len() != n {
        return Err(config_err(format!(
            "{} window labels for a {n}-frame split",
            inputs.window_labels.len()
        )));
    }
    let frame_coeff = frame_coefficients(inputs.split, train.obs_loss_weight);

    // Targets for the elementwise losses, channel-major like the scores.
    let y0_cm = encode_labels(inputs.window_labels, c, scaling)?.transposed();
    // Elementwise coefficients spread each frame's weight over its C bits.
    let elem_coeff: Vec<f64> = (0..c * n)
        .map(|e| frame_coeff[e % n] / c as f64)
        .collect();

    let mut stage_losses = Vec::with_capacity(pass.stage_scores.len());
    for &scores in &pass.stage_scores {
        let l = match train.loss {
            LossKind::Mse => tape.weighted_sse(scores, y0_cm.clone(), elem_coeff.clone())?,
            LossKind::Bce => tape.sigmoid_bce(scores, y0_cm.clone(), elem_coeff.clone())?,
            LossKind::Ce => {
                tape.softmax_cross_entropy(scores, inputs.window_labels, frame_coeff.clone())?
            }
        };
        stage_losses.push(l);
    }
    let total = tape.sum_scalars(&stage_losses)?;

    finish_loss(tape, total, &stage_losses, &pass.param_ids, want_grads, params)
}

/// Single-pass classification loss: zero label inputs, no step embedding,
/// per-frame cross-entropy summed over stages (one plain mean per stage).
#[allow(clippy::too_many_arguments)]
pub fn deterministic_loss(
    params: &ModelParams,
    gtan: &GtanConfig,
    window_labels: &[usize],
    cond: &Tensor,
    split: &ProtocolSplit,
    train_mode_dropout: bool,
    rng: Option<&mut ChaCha8Rng>,
    want_grads: bool,
) -> Result<LossOutcome, TrainError> {
    let n = split.total();
    if window_labels.len() != n {
        return Err(config_err(format!(
            "{} window labels for a {n}-frame split",
            window_labels.len()
        )));
    }
    let zeros = Tensor::zeros(&[n, gtan.num_classes]);
    let forward_input = ForwardInput {
        noisy: &zeros,
        self_cond: &zeros,
        cond,
        step: None,
    };
    let pass = forward_on_tape(
        params,
        gtan,
        &forward_input,
        train_mode_dropout,
        want_grads,
        false,
        rng,
    )?;
    let mut tape = pass.tape;
    let frame_coeff = vec![1.0 / n as f64; n];
    let mut stage_losses = Vec::with_capacity(pass.stage_scores.len());
    for &scores in &pass.stage_scores {
        stage_losses.push(tape.softmax_cross_entropy(scores, window_labels, frame_coeff.clone())?);
    }
    let total = tape.sum_scalars(&stage_losses)?;
    finish_loss(tape, total, &stage_losses, &pass.param_ids, want_grads, params)
}

fn finish_loss(
    tape: crate::autograd::Tape,
    total: crate::autograd::ValueId,
    stage_losses: &[crate::autograd::ValueId],
    param_ids: &[crate::autograd::ValueId],
    want_grads: bool,
    params: &ModelParams,
) -> Result<LossOutcome, TrainError> {
    let loss = tape.value(total).scalar()?;
    let per_stage = stage_losses
        .iter()
        .map(|&id| tape.value(id).scalar())
        .collect::<Result<Vec<_>, _>>()?;
    let op_labels = tape.op_labels();
    let grads = if want_grads {
        let g = tape.backward(total)?;
        Some(
            param_ids
                .iter()
                .zip(params.tensors())
                .map(|(&id, p)| {
                    g.wrt(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(p.dims()))
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(LossOutcome {
        loss,
        per_stage,
        grads,
        op_labels,
    })
}

/// Seed tags for the training streams (see [`crate::derive_stream_seed`]).
pub const SEED_TAG_EPOCH_SHUFFLE: u64 = 0xE0;
pub const SEED_TAG_STEP: u64 = 0x51;
const SEED_TAG_ITEM: u64 = 0x17;

/// Loss and gradients of one optimizer step over a batch.
pub struct StepOutcome {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

/// Runs one batch: every item gets its own derived random stream (noise
/// draw order per item: step, noise tensor, self-conditioning coin,
/// preliminary-pass dropout, main-pass dropout), losses and gradients are
/// averaged. Bitwise deterministic in `(params, items, step_seed)`.
pub fn training_step(
    params: &ModelParams,
    items: &[&TrainItem],
    gtan: &GtanConfig,
    diffusion: &DiffusionConfig,
    train: &TrainConfig,
    schedule: &NoiseSchedule,
    step_seed: u64,
) -> Result<StepOutcome, TrainError> {
    if items.is_empty() {
        return Err(config_err("empty batch"));
    }
    use rayon::prelude::*;
    let results: Vec<(f64, Vec<Tensor>)> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let seed = crate::derive_stream_seed(step_seed, SEED_TAG_ITEM, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let outcome = match train.mode {
                TrainMode::Stochastic => {
                    item_stochastic_loss(params, item, gtan, diffusion, train, schedule, &mut rng)
                }
                TrainMode::Deterministic => deterministic_loss(
                    params,
                    gtan,
                    &item.window_labels,
                    &item.cond,
                    &item.split,
                    true,
                    Some(&mut rng),
                    true,
                ),
            }?;
            if !outcome.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    id: item.id.clone(),
                });
            }
            Ok((outcome.loss, outcome.grads.expect("grads were requested")))
        })
        .collect::<Result<_, _>>()?;

    // Sequential reduction in item order keeps sums bitwise reproducible
    // regardless of how rayon scheduled the map above.
    let scale = 1.0 / items.len() as f64;
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for (l, g) in results {
        loss += l;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let mut grads = grads.expect("non-empty batch");
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok(StepOutcome {
        loss: loss * scale,
        grads,
    })
}

fn item_stochastic_loss(
    params: &ModelParams,
    item: &TrainItem,
    gtan: &GtanConfig,
    diffusion: &DiffusionConfig,
    train: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutcome, TrainError> {
    let n = item.split.total();
    let c = gtan.num_classes;
    let t = rng.random_range(1..=schedule.t_max());
    let y0 = encode_labels(&item.window_labels, c, diffusion.label_scaling)?;
    let eps = Tensor::from_fn(&[n, c], |_| rng.sample(StandardNormal));
    let y_t = q_sample(&y0, &eps, t, schedule)?;

    let self_cond = if rng.random::<f64>() < train.self_cond_zero_prob {
        Tensor::zeros(&[n, c])
    } else {
        // Gradient-stopped preliminary estimate: same noisy input and step,
        // zero self-conditioning, its own train-mode dropout draws.
        let zeros = Tensor::zeros(&[n, c]);
        let input = ForwardInput {
            noisy: &y_t,
            self_cond: &zeros,
            cond: &item.cond,
            step: Some(t),
        };
        let pass = forward_on_tape(params, gtan, &input, true, false, false, Some(rng))?;
        let last = *pass.stage_scores.last().expect("at least one stage");
        crate::diffusion::map_scores(
            &pass.tape.value(last).transposed(),
            train.loss.reconstruction_map(),
        )?
    };

    let inputs = StochasticLossInputs {
        y_t: &y_t,
        window_labels: &item.window_labels,
        self_cond: &self_cond,
        cond: &item.cond,
        t,
        split: &item.split,
    };
    stochastic_loss(params, gtan, train, diffusion.label_scaling, &inputs, true, Some(rng), true)
}

/// Adam with bias correction; state tensors mirror the canonical parameter
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps_taken: u64,
    pub learning_rate: f64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Adam {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.dims()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            steps_taken: 0,
            learning_rate,
        }
    }

    /// One update in place. `grads` must be in canonical parameter order.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor],
    ) -> Result<(), TrainError> {
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(config_err(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                tensors.len()
            )));
        }
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in tensors
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for e in 0..p.len() {
                let grad = g.data()[e];
                let me = &mut m.data_mut()[e];
                *me = ADAM_BETA1 * *me + (1.0 - ADAM_BETA1) * grad;
                let ve = &mut v.data_mut()[e];
                *ve = ADAM_BETA2 * *ve + (1.0 - ADAM_BETA2) * grad * grad;
                let m_hat = *me / bc1;
                let v_hat = *ve / bc2;
                p.data_mut()[e] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            p.check_finite("adam")?;
        }
        Ok(())
    }
}

/// The stateful training loop: parameters, optimizer, configs, and the
/// global step counter from which every random stream is derived.
pub struct Trainer {
    pub params: ModelParams,
    pub opt: Adam,
    pub gtan: GtanConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub schedule: NoiseSchedule,
    pub steps_done: u64,
}

const CHECKPOINT_META_VERSION: u32 = 1;

/// Non-array checkpoint state, stored as the container's JSON trailer.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    version: u32,
    steps_done: u64,
    opt_steps: u64,
    gtan: GtanConfig,
    diffusion: DiffusionConfig,
    train: TrainConfig,
}

impl Trainer {
    pub fn new(
        gtan: GtanConfig,
        diffusion: DiffusionConfig,
        train: TrainConfig,
    ) -> Result<Trainer, TrainError> {
        gtan.validate()?;
        diffusion.validate()?;
        train.validate(diffusion.label_scaling)?;
        let schedule = NoiseSchedule::new(diffusion.schedule, diffusion.t_max)?;
        let params = ModelParams::init(&gtan, train.seed)?;
        let opt = Adam::new(&params, train.learning_rate);
        Ok(Trainer {
            params,
            opt,
            gtan,
            diffusion,
            train,
            schedule,
            steps_done: 0,
        })
    }

    /// Steps per epoch for a given corpus size.
    pub fn steps_per_epoch(&self, num_items: usize) -> u64 {
        num_items.div_ceil(self.train.batch_size) as u64
    }

    /// Runs `steps` more optimizer steps. The epoch an absolute step belongs
    /// to, its shuffle, and its batch noise are all derived from the base
    /// seed alone, so resuming a loaded trainer continues the exact stream.
    /// Returns the per-step batch losses; `on_step` sees each (absolute
    /// step, loss).
    pub fn run_steps(
        &mut self,
        items: &[TrainItem],
        steps: u64,
        mut on_step: impl FnMut(u64, f64),
    ) -> Result<Vec<f64>, TrainError> {
        if items.is_empty() {
            return Err(config_err("no training items"));
        }
        let spe = self.steps_per_epoch(items.len());
        let mut losses = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let step = self.steps_done;
            let epoch = step / spe;
            let batch_in_epoch = (step % spe) as usize;

            let mut order: Vec<usize> = (0..items.len()).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(crate::derive_stream_seed(
                self.train.seed,
                SEED_TAG_EPOCH_SHUFFLE,
                epoch,
            ));
            // Fisher-Yates; explicit so the stream usage is pinned.
            for i in (1..order.len()).rev() {
                let j = shuffle_rng.random_range(0..=i);
                order.swap(i, j);
            }
            let start = batch_in_epoch * self.train.batch_size;
            let end = (start + self.train.batch_size).min(items.len());
            let batch: Vec<&TrainItem> = order[start..end].iter().map(|&i| &items[i]).collect();

            let step_seed = crate::derive_stream_seed(self.train.seed, SEED_TAG_STEP, step);
            let outcome = training_step(
                &self.params,
                &batch,
                &self.gtan,
                &self.diffusion,
                &self.train,
                &self.schedule,
                step_seed,
            )?;
            self.opt.apply(&mut self.params, &outcome.grads)?;
            self.steps_done += 1;
            on_step(self.steps_done, outcome.loss);
            losses.push(outcome.loss);
        }
        Ok(losses)
    }

    /// Serializes parameters, optimizer state, and configuration.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut container = ArrayContainer::new();
        for (name, tensor) in self.params.named() {
            container.push(&name, tensor.clone())?;
        }
        let names: Vec<String> = self.params.named().into_iter().map(|(n, _)| n).collect();
        for (name, m) in names.iter().zip(&self.opt.m) {
            container.push(&format!("adam.m.{name}"), m.clone())?;
        }
        for (name, v) in names.iter().zip(&self.opt.v) {
            container.push(&format!("adam.v.{name}"), v.clone())?;
        }
        let meta = CheckpointMeta {
            version: CHECKPOINT_META_VERSION,
            steps_done: self.steps_done,
            opt_steps: self.opt.steps_taken,
            gtan: self.gtan.clone(),
            diffusion: self.diffusion.clone(),
            train: self.train.clone(),
        };
        let text = serde_json::to_string(&meta).map_err(|e| TrainError::CheckpointMeta {
            detail: e.to_string(),
        })?;
        container.set_text(Some(text));
        container.write_file(path)?;
        Ok(())
    }

    /// Restores a trainer saved by [`Trainer::save`]. Strict about versions,
    /// array names, and shapes.
    pub fn load(path: &Path) -> Result<Trainer, TrainError> {
        let container = ArrayContainer::read_file(path)?;
        let text = container.text().ok_or_else(|| TrainError::CheckpointMeta {
            detail: "checkpoint has no metadata trailer".into(),
        })?;
        let meta: CheckpointMeta =
            serde_json::from_str(text).map_err(|e| TrainError::CheckpointMeta {
                detail: e.to_string(),
            })?;
        if meta.version != CHECKPOINT_META_VERSION {
            return Err(TrainError::CheckpointMeta {
                detail: format!(
                    "metadata version {} is not supported (this build reads {})",
                    meta.version, CHECKPOINT_META_VERSION
                ),
            });
        }
        meta.gtan.validate()?;
        meta.diffusion.validate()?;
        meta.train.validate(meta.diffusion.label_scaling)?;

        let mut param_map = BTreeMap::new();
        let mut m_map = BTreeMap::new();
        let mut v_map = BTreeMap::new();
        for (name, tensor) in container.iter() {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                m_map.insert(rest.to_string(), tensor.clone());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                v_map.insert(rest.to_string(), tensor.clone());
            } else {
                param_map.insert(name.to_string(), tensor.clone());
            }
        }
        let params = ModelParams::from_named(&meta.gtan, &param_map)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let pick = |map: &BTreeMap<String, Tensor>, kind: &str| -> Result<Vec<Tensor>, TrainError> {
            if map.len() != names.len() {
                return Err(TrainError::CheckpointMeta {
                    detail: format!(
                        "{} optimizer {kind} arrays for {} parameters",
                        map.len(),
                        names.len()
                    ),
                });
            }
            names
                .iter()
                .map(|n| {
                    map.get(n).cloned().ok_or_else(|| TrainError::CheckpointMeta {
                        detail: format!("missing optimizer {kind} state for '{n}'"),
                    })
                })
                .collect()
        };
        let opt = Adam {
            m: pick(&m_map, "momentum")?,
            v: pick(&v_map, "variance")?,
            steps_taken: meta.opt_steps,
            learning_rate: meta.train.learning_rate,
        };
        let schedule = NoiseSchedule::new(meta.diffusion.schedule, meta.diffusion.t_max)?;
        Ok(Trainer {
            params,
            opt,
            gtan: meta.gtan,
            diffusion: meta.diffusion,
            train: meta.train,
            schedule,
            steps_done: meta.steps_done,
        })
    }
}

/// Finite-difference check of the whole network-plus-loss gradient at a
/// small but structurally complete configuration (two stages, gated blocks,
/// all three loss kinds). Returns the worst relative error.
pub fn training_gradient_check(seed: u64) -> Result<f64, TrainError> {
    let gtan = GtanConfig {
        num_stages: 2,
        blocks_per_stage: 3,
        channels: 8,
        kernel_size: 3,
        num_classes: 4,
        cond_dim: 6,
        embed_dim: 8,
        dropout: 0.0,
        gating_mode: crate::gtan::GatingMode::Gated,
    };
    let frames = 16;
    let split = ProtocolSplit {
        alpha: 0.5,
        beta: 0.5,
        observed: 10,
        anticipated: 6,
    };
    let schedule = NoiseSchedule::new(crate::diffusion::ScheduleKind::Linear, 12)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&gtan, rng.random())?;
    let window_labels: Vec<usize> = (0..frames).map(|_| rng.random_range(0..4)).collect();
    let y0 = encode_labels(&window_labels, 4, LabelScaling::ZeroOne)?;
    let eps = Tensor::from_fn(&[frames, 4], |_| rng.sample(StandardNormal));
    let t = 7;
    let y_t = q_sample(&y0, &eps, t, &schedule)?;
    let self_cond = Tensor::from_fn(&[frames, 4], |_| rng.random_range(0.0..1.0));
    let cond = Tensor::from_fn(&[frames, 6], |_| rng.random_range(-1.0..1.0));

    let flat0 = flatten(&params.tensors());
    let mut worst = 0.0f64;
    for loss_kind in [LossKind::Mse, LossKind::Ce, LossKind::Bce] {
        let train = TrainConfig {
            mode: TrainMode::Stochastic,
            loss: loss_kind,
            obs_loss_weight: 0.7,
            learning_rate: 1e-3,
            batch_size: 1,
            epochs: 1,
            self_cond_zero_prob: 0.5,
            seed: 0,
            alpha: 0.5,
            beta: 0.5,
        };
        let gtan_ref = &gtan;
        let split_ref = &split;
        let labels_ref = &window_labels;
        let err = crate::gradcheck::grad_check(
            |flat, want| {
                let p = unflatten(gtan_ref, flat)?;
                let inputs = StochasticLossInputs {
                    y_t: &y_t,
                    window_labels: labels_ref,
                    self_cond: &self_cond,
                    cond: &cond,
                    t,
                    split: split_ref,
                };
                let out = stochastic_loss(
                    &p,
                    gtan_ref,
                    &train,
                    LabelScaling::ZeroOne,
                    &inputs,
                    false,
                    None,
                    want,
                )
                .map_err(|e| NumericsError::InvalidArgument {
                    op: "training_gradient_check",
                    detail: e.to_string(),
                })?;
                let grad = out.grads.map(|g| flatten(&g.iter().collect::<Vec<_>>()));
                Ok((out.loss, grad))
            },
            &flat0,
            // Larger than the per-op suite's step: the composite loss goes
            // through many sigmoids and softplus terms whose tiny per-branch
            // gradients are roundoff-limited at smaller steps, while steps
            // much beyond this start crossing relu kinks.
            1e-4,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn flatten(tensors: &[&Tensor]) -> Tensor {
    let mut data = Vec::new();
    for t in tensors {
        data.extend_from_slice(t.data());
    }
    let len = data.len();
    Tensor::from_vec(&[len], data).expect("flat shape matches data")
}

fn unflatten(config: &GtanConfig, flat: &Tensor) -> Result<ModelParams, NumericsError> {
    let mut params = ModelParams::zeros(config)?;
    let mut offset = 0;
    for slot in params.tensors_mut() {
        let n = slot.len();
        slot.data_mut()
            .copy_from_slice(&flat.data()[offset..offset + n]);
        offset += n;
    }
    if offset != flat.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "unflatten",
            detail: format!("flat vector has {} values, model needs {offset}", flat.len()),
        });
    }
    Ok(params)
}
