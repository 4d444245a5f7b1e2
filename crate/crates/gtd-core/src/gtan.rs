//! Multi-stage gated temporal convolutional network.
//!
//! The generator maps a noisy label tensor, a self-conditioning tensor, and
//! per-frame conditioning features to raw class scores, once per stage.
//! Stage 1 sees the assembled input; every later stage sees its
//! predecessor's scores concatenated with the same assembled input, which
//! lets it revise earlier decisions. Each stage is a projection followed by
//! a stack of gated residual blocks with exponentially growing dilation and
//! a linear head.
//!
//! All frame-major public tensors are `[frames, channels]`; internally the
//! network runs channel-major `[channels, frames]` so convolutions stream
//! along contiguous rows.

use crate::autograd::{Tape, ValueId};
use crate::tensor::{NumericsError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How a block combines its two convolution branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// Sigmoid gate times feature branch, both dilated.
    Gated,
    /// Feature branch only; the gate branch and its parameters do not exist.
    FeatureOnly,
    /// Gate branch runs at dilation 1 while the feature branch dilates.
    GatedUndilatedGate,
}

/// Architecture of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtanConfig {
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub num_classes: usize,
    /// Width of one conditioning feature frame.
    pub cond_dim: usize,
    /// Width of the sinusoidal step embedding; must be even.
    pub embed_dim: usize,
    pub dropout: f64,
    pub gating_mode: GatingMode,
}

impl GtanConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let bad = |detail: String| NumericsError::InvalidArgument {
            op: "gtan_config",
            detail,
        };
        if self.num_stages == 0 || self.blocks_per_stage == 0 || self.channels == 0 {
            return Err(bad("stages, blocks, and channels must all be >= 1".into()));
        }
        if self.blocks_per_stage > 20 {
            return Err(bad(format!(
                "{} blocks per stage would dilate past 2^19 frames",
                self.blocks_per_stage
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(bad(format!("kernel size {} is even", self.kernel_size)));
        }
        if self.num_classes < 2 {
            return Err(bad(format!("need >= 2 classes, got {}", self.num_classes)));
        }
        if self.cond_dim == 0 {
            return Err(bad("conditioning width must be >= 1".into()));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(bad(format!(
                "embedding width must be even and >= 2, got {}",
                self.embed_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Row width of one assembled input frame: noisy labels, self-conditioning
    /// labels, then conditioning features.
    pub fn assembled_width(&self) -> usize {
        2 * self.num_classes + self.cond_dim
    }

    /// Frames on either side of an output frame that can influence it.
    /// Each block reaches `(k-1)/2 * 2^l`; blocks compose additively within a
    /// stage and stages compose additively through the score feedback.
    pub fn receptive_radius(&self) -> usize {
        let half = (self.kernel_size - 1) / 2;
        let per_stage: usize = (0..self.blocks_per_stage).map(|l| half << l).sum();
        self.num_stages * per_stage
    }
}

/// Sinusoidal position embedding of a diffusion step.
///
/// For half-width `h = dim/2` and `i` in `0..h`, frequency
/// `f_i = 10000^(-2i/dim)`; the output is `[sin(t f_0).. sin(t f_{h-1}),
/// cos(t f_0).. cos(t f_{h-1})]`.
pub fn sinusoidal_step_embedding(t: usize, dim: usize) -> Result<Tensor, NumericsError> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(NumericsError::InvalidArgument {
            op: "sinusoidal_step_embedding",
            detail: format!("width must be even and >= 2, got {dim}"),
        });
    }
    let half = dim / 2;
    let mut out = Tensor::zeros(&[dim]);
    for i in 0..half {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out.data_mut()[i] = (t as f64 * freq).sin();
        out.data_mut()[half + i] = (t as f64 * freq).cos();
    }
    Ok(out)
}

/// Concatenates the three per-frame inputs into `[frames, 2*classes + cond]`
/// rows: noisy labels, then self-conditioning labels, then features.
pub fn assemble_input(
    noisy: &Tensor,
    self_cond: &Tensor,
    cond: &Tensor,
) -> Result<Tensor, NumericsError> {
    let err = |detail: String| NumericsError::ShapeMismatch {
        op: "assemble_input",
        detail,
    };
    if noisy.dims().len() != 2 || self_cond.dims().len() != 2 || cond.dims().len() != 2 {
        return Err(err("all inputs must be 2-d [frames, width]".into()));
    }
    let n = noisy.dims()[0];
    if self_cond.dims() != noisy.dims() || cond.dims()[0] != n {
        return Err(err(format!(
            "frame counts differ: {:?}, {:?}, {:?}",
            noisy.dims(),
            self_cond.dims(),
            cond.dims()
        )));
    }
    let c = noisy.dims()[1];
    let d = cond.dims()[1];
    let width = 2 * c + d;
    let mut out = Tensor::zeros(&[n, width]);
    for f in 0..n {
        let row = &mut out.data_mut()[f * width..(f + 1) * width];
        row[..c].copy_from_slice(noisy.row(f));
        row[c..2 * c].copy_from_slice(self_cond.row(f));
        row[2 * c..].copy_from_slice(cond.row(f));
    }
    Ok(out)
}

/// Weights and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    fn init(c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvParams {
        // Uniform in +-1/sqrt(fan_in), the usual scheme for convolutions.
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        ConvParams {
            w: Tensor::from_fn(&[c_out, c_in, k], |_| rng.random_range(-bound..bound)),
            b: Tensor::from_fn(&[c_out], |_| rng.random_range(-bound..bound)),
        }
    }

    fn zeros(c_out: usize, c_in: usize, k: usize) -> ConvParams {
        ConvParams {
            w: Tensor::zeros(&[c_out, c_in, k]),
            b: Tensor::zeros(&[c_out]),
        }
    }
}

/// Parameters of one gated residual block. `gate` is absent exactly in
/// feature-only mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub gate: Option<ConvParams>,
    pub feature: ConvParams,
    pub pointwise: ConvParams,
}

/// Parameters of one stage: input projection, blocks, and scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub in_proj: ConvParams,
    pub blocks: Vec<BlockParams>,
    pub head: ConvParams,
}

/// All generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed_proj: ConvParams,
    pub stages: Vec<StageParams>,
}

impl ModelParams {
    /// Fresh parameters with uniform fan-in initialization, drawn in the
    /// canonical traversal order so a seed pins every weight.
    pub fn init(config: &GtanConfig, seed: u64) -> Result<ModelParams, NumericsError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = config.channels;
        let k = config.kernel_size;
        let embed_proj = ConvParams::init(ch, config.embed_dim, 1, &mut rng);
        let mut stages = Vec::with_capacity(config.num_stages);
        for s in 0..config.num_stages {
            let in_width = stage_input_width(config, s);
            let in_proj = ConvParams::init(ch, in_width, 1, &mut rng);
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for _ in 0..config.blocks_per_stage {
                let gate = (config.gating_mode != GatingMode::FeatureOnly)
                    .then(|| ConvParams::init(ch, ch, k, &mut rng));
                blocks.push(BlockParams {
                    gate,
                    feature: ConvParams::init(ch, ch, k, &mut rng),
                    pointwise: ConvParams::init(ch, ch, 1, &mut rng),
                });
            }
            let head = ConvParams::init(config.num_classes, ch, 1, &mut rng);
            stages.push(StageParams {
                in_proj,
                blocks,
                head,
            });
        }
        Ok(ModelParams { embed_proj, stages })
    }

    /// All-zero parameters with the right shapes (used by tests).
    pub fn zeros(config: &GtanConfig) -> Result<ModelParams, NumericsError> {
        config.validate()?;
        let ch = config.channels;
        let k = config.kernel_size;
        let stages = (0..config.num_stages)
            .map(|s| StageParams {
                in_proj: ConvParams::zeros(ch, stage_input_width(config, s), 1),
                blocks: (0..config.blocks_per_stage)
                    .map(|_| BlockParams {
                        gate: (config.gating_mode != GatingMode::FeatureOnly)
                            .then(|| ConvParams::zeros(ch, ch, k)),
                        feature: ConvParams::zeros(ch, ch, k),
                        pointwise: ConvParams::zeros(ch, ch, 1),
                    })
                    .collect(),
                head: ConvParams::zeros(config.num_classes, ch, 1),
            })
            .collect();
        Ok(ModelParams {
            embed_proj: ConvParams::zeros(ch, config.embed_dim, 1),
            stages,
        })
    }

    /// Canonical name of each tensor paired with a reference, in traversal
    /// order. This order defines gradient vectors, optimizer state, and the
    /// checkpoint layout.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("embed_proj.w".to_string(), &self.embed_proj.w));
        out.push(("embed_proj.b".to_string(), &self.embed_proj.b));
        for (s, stage) in self.stages.iter().enumerate() {
            let sp = format!("stage{}", s + 1);
            out.push((format!("{sp}.in_proj.w"), &stage.in_proj.w));
            out.push((format!("{sp}.in_proj.b"), &stage.in_proj.b));
            for (l, block) in stage.blocks.iter().enumerate() {
                let bp = format!("{sp}.layer{}", l + 1);
                if let Some(gate) = &block.gate {
                    out.push((format!("{bp}.gate.w"), &gate.w));
                    out.push((format!("{bp}.gate.b"), &gate.b));
                }
                out.push((format!("{bp}.feature.w"), &block.feature.w));
                out.push((format!("{bp}.feature.b"), &block.feature.b));
                out.push((format!("{bp}.pointwise.w"), &block.pointwise.w));
                out.push((format!("{bp}.pointwise.b"), &block.pointwise.b));
            }
            out.push((format!("{sp}.head.w"), &stage.head.w));
            out.push((format!("{sp}.head.b"), &stage.head.b));
        }
        out
    }

    /// Mutable references in the same canonical order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.embed_proj.w);
        out.push(&mut self.embed_proj.b);
        for stage in &mut self.stages {
            out.push(&mut stage.in_proj.w);
            out.push(&mut stage.in_proj.b);
            for block in &mut stage.blocks {
                if let Some(gate) = &mut block.gate {
                    out.push(&mut gate.w);
                    out.push(&mut gate.b);
                }
                out.push(&mut block.feature.w);
                out.push(&mut block.feature.b);
                out.push(&mut block.pointwise.w);
                out.push(&mut block.pointwise.b);
            }
            out.push(&mut stage.head.w);
            out.push(&mut stage.head.b);
        }
        out
    }

    /// Immutable references in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters from named tensors (a loaded checkpoint). Every
    /// expected tensor must be present with its exact shape; unknown names
    /// are rejected.
    pub fn from_named(
        config: &GtanConfig,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<ModelParams, NumericsError> {
        let mut params = ModelParams::zeros(config)?;
        let expected: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
        for name in tensors.keys() {
            if !expected.contains(name) {
                return Err(NumericsError::InvalidArgument {
                    op: "model_params",
                    detail: format!("unexpected tensor '{name}' for this architecture"),
                });
            }
        }
        for (name, slot) in expected.iter().zip(params.tensors_mut()) {
            let src = tensors.get(name).ok_or_else(|| NumericsError::InvalidArgument {
                op: "model_params",
                detail: format!("missing tensor '{name}'"),
            })?;
            if src.dims() != slot.dims() {
                return Err(NumericsError::ShapeMismatch {
                    op: "model_params",
                    detail: format!("'{name}' has dims {:?}, expected {:?}", src.dims(), slot.dims()),
                });
            }
            *slot = src.clone();
        }
        Ok(params)
    }
}

fn stage_input_width(config: &GtanConfig, stage: usize) -> usize {
    if stage == 0 {
        config.assembled_width()
    } else {
        config.num_classes + config.assembled_width()
    }
}

/// Sigmoid gate activations recorded during a forward pass, stage-major then
/// block-major, each `[channels, frames]`. Empty inner vectors in
/// feature-only mode.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub stages: Vec<Vec<Tensor>>,
}

impl GateTrace {
    /// Flattens to `(name, tensor)` pairs like `stage1.layer2`.
    pub fn named_arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (l, g) in stage.iter().enumerate() {
                out.push((format!("stage{}.layer{}", s + 1, l + 1), g));
            }
        }
        out
    }
}

/// A recorded forward pass: the tape plus handles to the per-stage scores
/// (channel-major `[classes, frames]`) and to the parameters in canonical
/// order, for gradient extraction.
pub struct ForwardPass {
    pub tape: Tape,
    pub stage_scores: Vec<ValueId>,
    pub param_ids: Vec<ValueId>,
    pub gates: Option<GateTrace>,
}

/// Inputs of one forward pass, frame-major.
pub struct ForwardInput<'a> {
    /// Noisy label tensor `[frames, classes]`.
    pub noisy: &'a Tensor,
    /// Self-conditioning label tensor `[frames, classes]`; all zeros when
    /// self-conditioning is disabled for this pass.
    pub self_cond: &'a Tensor,
    /// Conditioning features `[frames, cond_dim]`.
    pub cond: &'a Tensor,
    /// Diffusion step for the embedding; `None` omits the embedding term
    /// entirely (single-pass regression mode).
    pub step: Option<usize>,
}

/// Runs the network on a fresh tape.
///
/// `train` enables dropout, which then draws its masks from `rng`;
/// `requires_grad` marks the parameters for the backward pass;
/// `capture_gates` stores gate activations for inspection.
pub fn forward_on_tape(
    params: &ModelParams,
    config: &GtanConfig,
    input: &ForwardInput,
    train: bool,
    requires_grad: bool,
    capture_gates: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardPass, NumericsError> {
    config.validate()?;
    validate_forward_shapes(config, input)?;
    if train && config.dropout > 0.0 && rng.is_none() {
        return Err(NumericsError::InvalidArgument {
            op: "gtan_forward",
            detail: "train-mode dropout needs an rng".into(),
        });
    }

    let assembled = assemble_input(input.noisy, input.self_cond, input.cond)?;
    let mut tape = Tape::new();
    let register = |tape: &mut Tape, t: Tensor| {
        if requires_grad {
            tape.param(t)
        } else {
            tape.leaf(t)
        }
    };

    // Parameters enter the tape in canonical order.
    let mut param_ids = Vec::new();
    for (_, tensor) in params.named() {
        param_ids.push(register(&mut tape, tensor.clone())?);
    }
    let mut next_param = param_ids.iter().copied();
    let mut take = || next_param.next().expect("param id order matches traversal");

    let embed_w = take();
    let embed_b = take();

    // Shared projected step embedding, one column broadcast over frames.
    let embed_col = match input.step {
        Some(t) => {
            let emb = sinusoidal_step_embedding(t, config.embed_dim)?;
            let emb_col = Tensor::from_vec(&[config.embed_dim, 1], emb.data().to_vec())?;
            let leaf = tape.leaf(emb_col)?;
            Some(tape.conv1d(leaf, embed_w, embed_b, 1)?)
        }
        None => None,
    };

    let assembled_cm = tape.leaf(assembled.transposed())?;
    let mut stage_scores: Vec<ValueId> = Vec::with_capacity(config.num_stages);
    let mut gate_trace: Vec<Vec<Tensor>> = Vec::with_capacity(config.num_stages);

    for stage in &params.stages {
        let in_proj_w = take();
        let in_proj_b = take();

        let stage_in = match stage_scores.last() {
            None => assembled_cm,
            Some(&prev) => tape.concat_rows(&[prev, assembled_cm])?,
        };
        let mut h = tape.conv1d(stage_in, in_proj_w, in_proj_b, 1)?;
        if let Some(col) = embed_col {
            h = tape.broadcast_add_col(h, col)?;
        }

        let mut stage_gates = Vec::new();
        for (l, block) in stage.blocks.iter().enumerate() {
            let dilation = 1usize << l;
            let gate_ids = block.gate.as_ref().map(|_| (take(), take()));
            let feat_w = take();
            let feat_b = take();
            let pw_w = take();
            let pw_b = take();

            let feature = tape.conv1d(h, feat_w, feat_b, dilation)?;
            let combined = match (config.gating_mode, gate_ids) {
                (GatingMode::FeatureOnly, None) => feature,
                (mode, Some((gw, gb))) => {
                    let gate_dilation = if mode == GatingMode::GatedUndilatedGate {
                        1
                    } else {
                        dilation
                    };
                    let pre = tape.conv1d(h, gw, gb, gate_dilation)?;
                    let gate = tape.sigmoid(pre)?;
                    if capture_gates {
                        stage_gates.push(tape.value(gate).clone());
                    }
                    tape.mul(gate, feature)?
                }
                _ => unreachable!("gate presence follows the gating mode"),
            };
            let dropped = match &mut rng {
                Some(r) => tape.dropout(combined, config.dropout, train, r)?,
                None => combined,
            };
            let mixed = tape.conv1d(dropped, pw_w, pw_b, 1)?;
            let activated = tape.relu(mixed)?;
            h = tape.add(h, activated)?;
        }

        let head_w = take();
        let head_b = take();
        stage_scores.push(tape.conv1d(h, head_w, head_b, 1)?);
        gate_trace.push(stage_gates);
    }

    Ok(ForwardPass {
        tape,
        stage_scores,
        param_ids,
        gates: capture_gates.then_some(GateTrace { stages: gate_trace }),
    })
}

/// Eval-mode convenience wrapper: runs the network without gradients and
/// returns the per-stage scores frame-major `[frames, classes]`.
pub fn gtan_forward(
    params: &ModelParams,
    config: &GtanConfig,
    input: &ForwardInput,
    capture_gates: bool,
) -> Result<(Vec<Tensor>, Option<GateTrace>), NumericsError> {
    let pass = forward_on_tape(params, config, input, false, false, capture_gates, None)?;
    let scores = pass
        .stage_scores
        .iter()
        .map(|&id| pass.tape.value(id).transposed())
        .collect();
    Ok((scores, pass.gates))
}

fn validate_forward_shapes(config: &GtanConfig, input: &ForwardInput) -> Result<(), NumericsError> {
    let c = config.num_classes;
    let nd = input.noisy.dims();
    if nd.len() != 2 || nd[1] != c {
        return Err(NumericsError::ShapeMismatch {
            op: "gtan_forward",
            detail: format!("noisy labels {:?} are not [frames, {c}]", nd),
        });
    }
    if input.self_cond.dims() != nd {
        return Err(NumericsError::ShapeMismatch {
            op: "gtan_forward",
            detail: format!(
                "self-conditioning {:?} differs from noisy {:?}",
                input.self_cond.dims(),
                nd
            ),
        });
    }
    let cd = input.cond.dims();
    if cd.len() != 2 || cd[0] != nd[0] || cd[1] != config.cond_dim {
        return Err(NumericsError::ShapeMismatch {
            op: "gtan_forward",
            detail: format!(
                "conditioning {:?} is not [{}, {}]",
                cd, nd[0], config.cond_dim
            ),
        });
    }
    if nd[0] == 0 {
        return Err(NumericsError::InvalidArgument {
            op: "gtan_forward",
            detail: "need at least one frame".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(mode: GatingMode) -> GtanConfig {
        GtanConfig {
            num_stages: 2,
            blocks_per_stage: 3,
            channels: 6,
            kernel_size: 3,
            num_classes: 4,
            cond_dim: 5,
            embed_dim: 8,
            dropout: 0.0,
            gating_mode: mode,
        }
    }

    fn rand_input(config: &GtanConfig, frames: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.num_classes;
        let mut gen = |w: usize| Tensor::from_fn(&[frames, w], |_| rng.random_range(-1.0..1.0));
        (gen(c), gen(c), gen(config.cond_dim))
    }

    #[test]
    fn embedding_at_step_zero_is_zeros_then_ones() {
        let e = sinusoidal_step_embedding(0, 4).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_first_frequency_is_unit() {
        let e = sinusoidal_step_embedding(1, 2).unwrap();
        assert!((e.data()[0] - 0.8414709848078965).abs() < 1e-12);
        assert!((e.data()[1] - 0.5403023058681398).abs() < 1e-12);
    }

    #[test]
    fn embedding_rejects_odd_width() {
        assert!(sinusoidal_step_embedding(3, 5).is_err());
        assert!(sinusoidal_step_embedding(3, 0).is_err());
    }

    #[test]
    fn assemble_orders_labels_then_features() {
        let noisy = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let sc = Tensor::zeros(&[1, 2]);
        let cond = Tensor::from_vec(&[1, 1], vec![5.0]).unwrap();
        let a = assemble_input(&noisy, &sc, &cond).unwrap();
        assert_eq!(a.dims(), &[1, 5]);
        assert_eq!(a.data(), &[1.0, 2.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn assembled_width_counts_both_label_blocks() {
        let mut c = small_config(GatingMode::Gated);
        c.num_classes = 48;
        c.cond_dim = 64;
        assert_eq!(c.assembled_width(), 160);
    }

    #[test]
    fn zero_parameters_make_each_block_an_identity() {
        // With all-zero block parameters the pointwise output is zero, so the
        // residual path passes the stage input projection through unchanged
        // and the stage scores are exactly the (zero) head output.
        for mode in [
            GatingMode::Gated,
            GatingMode::FeatureOnly,
            GatingMode::GatedUndilatedGate,
        ] {
            let config = small_config(mode);
            let params = ModelParams::zeros(&config).unwrap();
            let (noisy, sc, cond) = rand_input(&config, 9, 11);
            let input = ForwardInput {
                noisy: &noisy,
                self_cond: &sc,
                cond: &cond,
                step: Some(3),
            };
            let (scores, _) = gtan_forward(&params, &config, &input, false).unwrap();
            for s in &scores {
                assert!(s.data().iter().all(|&v| v == 0.0), "mode {mode:?}");
            }
        }
    }

    #[test]
    fn zero_gate_parameters_halve_the_feature_branch() {
        // sigmoid(0) = 0.5, so a zero gate convolution scales the feature
        // branch by exactly one half compared to feature-only mode, which in
        // a linear head shows up as exactly half the scores when the
        // pointwise convolution is linear and the residual input is zero.
        let mut config = small_config(GatingMode::Gated);
        config.num_stages = 1;
        config.blocks_per_stage = 1;
        let params = ModelParams::init(&config, 5).unwrap();
        let mut gated_zeroed = params.clone();
        let gate = gated_zeroed.stages[0].blocks[0].gate.as_mut().unwrap();
        gate.w = Tensor::zeros(gate.w.dims());
        gate.b = Tensor::zeros(gate.b.dims());

        let (noisy, sc, cond) = rand_input(&config, 7, 23);
        let input = ForwardInput {
            noisy: &noisy,
            self_cond: &sc,
            cond: &cond,
            step: Some(1),
        };
        let (_, gates) = gtan_forward(&gated_zeroed, &config, &input, true).unwrap();
        let trace = gates.unwrap();
        assert!(!trace.stages[0].is_empty());
        for g in &trace.stages[0] {
            assert!(g.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn saturated_gate_matches_feature_only() {
        // With gate weights zero and bias +20 the gate is sigmoid(20), which
        // differs from 1 by ~2e-9; the whole network output must match the
        // feature-only variant (same remaining parameters) to 1e-6.
        let config = small_config(GatingMode::Gated);
        let fo_config = GtanConfig {
            gating_mode: GatingMode::FeatureOnly,
            ..config.clone()
        };
        let mut gated = ModelParams::init(&config, 9).unwrap();
        let mut feature_only = ModelParams::zeros(&fo_config).unwrap();
        // Copy the shared parameters and saturate every gate.
        feature_only.embed_proj = gated.embed_proj.clone();
        for (gs, fs) in gated.stages.iter_mut().zip(feature_only.stages.iter_mut()) {
            fs.in_proj = gs.in_proj.clone();
            fs.head = gs.head.clone();
            for (gb, fb) in gs.blocks.iter_mut().zip(fs.blocks.iter_mut()) {
                let gate = gb.gate.as_mut().unwrap();
                gate.w = Tensor::zeros(gate.w.dims());
                gate.b = Tensor::filled(gate.b.dims(), 20.0);
                fb.feature = gb.feature.clone();
                fb.pointwise = gb.pointwise.clone();
            }
        }

        let (noisy, sc, cond) = rand_input(&config, 12, 31);
        let input = ForwardInput {
            noisy: &noisy,
            self_cond: &sc,
            cond: &cond,
            step: Some(2),
        };
        let (gs, _) = gtan_forward(&gated, &config, &input, false).unwrap();
        let (fs, _) = gtan_forward(&feature_only, &fo_config, &input, false).unwrap();
        for (a, b) in gs.iter().zip(&fs) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        let config = small_config(GatingMode::Gated);
        let params = ModelParams::init(&config, 77).unwrap();
        let (noisy, sc, cond) = rand_input(&config, 20, 41);
        let input = ForwardInput {
            noisy: &noisy,
            self_cond: &sc,
            cond: &cond,
            step: Some(5),
        };
        let (_, gates) = gtan_forward(&params, &config, &input, true).unwrap();
        let trace = gates.unwrap();
        assert_eq!(trace.stages.len(), config.num_stages);
        let mut seen = 0;
        for (_, g) in trace.named_arrays() {
            for &v in g.data() {
                assert!(v > 0.0 && v < 1.0, "gate value {v} left (0, 1)");
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn feature_only_mode_has_no_gate_parameters() {
        let config = small_config(GatingMode::FeatureOnly);
        let params = ModelParams::init(&config, 1).unwrap();
        assert!(params
            .named()
            .iter()
            .all(|(name, _)| !name.contains("gate")));
        let gated = ModelParams::init(&small_config(GatingMode::Gated), 1).unwrap();
        assert!(params.num_scalars() < gated.num_scalars());
    }

    #[test]
    fn output_frames_depend_only_on_nearby_input_frames() {
        // Perturbing one conditioning frame must leave scores outside the
        // receptive radius bitwise unchanged: convolutions are zero-padded
        // and nothing else mixes frames.
        let config = small_config(GatingMode::Gated);
        let params = ModelParams::init(&config, 3).unwrap();
        let frames = 40;
        let (noisy, sc, cond) = rand_input(&config, frames, 53);
        let radius = config.receptive_radius();
        assert_eq!(radius, 2 * (1 + 2 + 4));

        let poke = frames - 1;
        let mut cond2 = cond.clone();
        cond2.data_mut()[poke * config.cond_dim] += 1.0;

        let run = |cond: &Tensor| {
            let input = ForwardInput {
                noisy: &noisy,
                self_cond: &sc,
                cond,
                step: Some(4),
            };
            gtan_forward(&params, &config, &input, false).unwrap().0
        };
        let base = run(&cond);
        let poked = run(&cond2);
        let last = base.last().unwrap();
        let last_poked = poked.last().unwrap();
        let mut changed_near = false;
        for f in 0..frames {
            let same = last.row(f) == last_poked.row(f);
            if f + radius < poke {
                assert!(same, "frame {f} is outside radius {radius} of {poke}");
            } else if !same {
                changed_near = true;
            }
        }
        assert!(changed_near, "perturbation had no effect at all");
    }

    #[test]
    fn later_stages_see_previous_scores() {
        // With one versus two stages and identical seeds, the second stage
        // must change the final scores (its input includes stage-one scores).
        let mut config = small_config(GatingMode::Gated);
        config.num_stages = 2;
        let params = ModelParams::init(&config, 13).unwrap();
        let (noisy, sc, cond) = rand_input(&config, 10, 71);
        let input = ForwardInput {
            noisy: &noisy,
            self_cond: &sc,
            cond: &cond,
            step: Some(2),
        };
        let (scores, _) = gtan_forward(&params, &config, &input, false).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores[0].max_abs_diff(&scores[1]) > 1e-9);
    }

    #[test]
    fn named_round_trip_reconstructs_parameters() {
        let config = small_config(GatingMode::Gated);
        let params = ModelParams::init(&config, 19).unwrap();
        let map: BTreeMap<String, Tensor> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let rebuilt = ModelParams::from_named(&config, &map).unwrap();
        assert_eq!(params, rebuilt);

        let mut extra = map.clone();
        extra.insert("stage9.head.w".into(), Tensor::zeros(&[1]));
        assert!(ModelParams::from_named(&config, &extra).is_err());

        let mut missing = map.clone();
        missing.remove("stage1.head.b");
        assert!(ModelParams::from_named(&config, &missing).is_err());

        let mut wrong = map;
        wrong.insert("stage1.head.b".into(), Tensor::zeros(&[1]));
        assert!(ModelParams::from_named(&config, &wrong).is_err());
    }

    #[test]
    fn dropout_in_train_mode_needs_an_rng() {
        let mut config = small_config(GatingMode::Gated);
        config.dropout = 0.5;
        let params = ModelParams::init(&config, 2).unwrap();
        let (noisy, sc, cond) = rand_input(&config, 6, 3);
        let input = ForwardInput {
            noisy: &noisy,
            self_cond: &sc,
            cond: &cond,
            step: Some(1),
        };
        assert!(forward_on_tape(&params, &config, &input, true, false, false, None).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let good = small_config(GatingMode::Gated);
        for f in [
            |c: &mut GtanConfig| c.num_stages = 0,
            |c: &mut GtanConfig| c.kernel_size = 4,
            |c: &mut GtanConfig| c.num_classes = 1,
            |c: &mut GtanConfig| c.embed_dim = 7,
            |c: &mut GtanConfig| c.dropout = 1.0,
            |c: &mut GtanConfig| c.blocks_per_stage = 32,
        ] {
            let mut bad = good.clone();
            f(&mut bad);
            assert!(bad.validate().is_err());
        }
        assert!(good.validate().is_ok());
    }
}
