//! Gated temporal diffusion: anticipating dense future action labels from
//! observed video features by denoising analog-bit label tensors with a
//! multi-stage gated temporal convolutional generator.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense f64 tensors and the shared error type.
//! * [`autograd`] — reverse-mode differentiation on a flat tape.
//! * [`gradcheck`] — finite-difference verification of every operator.
//! * [`gtan`] — the gated temporal convolutional generator.
//! * [`diffusion`] — noise schedules, analog-bit codecs, and samplers.
//! * [`container`] — the named-array binary format for checkpoints and
//!   feature files.
//! * [`data`] — synthetic grammars, feature synthesis, and dataset io.
//! * [`metrics`] — accuracy and diversity scores with the quartile report.
//! * [`trainer`] — losses, the optimizer, the batch loop, checkpoints.
//! * [`pipeline`] — dataset-level sampling, prediction files, evaluation.
//!
//! Everything is deterministic given the seeds passed in: random state is
//! always an explicit [`rand_chacha::ChaCha8Rng`], and independent streams
//! are derived functionally with [`derive_stream_seed`].

pub mod autograd;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod gradcheck;
pub mod gtan;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use container::{ArrayContainer, ContainerError};
pub use data::{DataGenConfig, DataError, Dataset, GrammarPreset, ProtocolSplit, SequenceRecord};
pub use diffusion::{
    DiffusionConfig, LabelScaling, NoiseSchedule, ReconstructionMap, SamplerKind, ScheduleKind,
};
pub use gtan::{GatingMode, GtanConfig, ModelParams};
pub use metrics::{QuartileTable, VideoSummary};
pub use pipeline::{EvalReport, PipelineError, PredictionRecord, SamplePlan};
pub use tensor::{NumericsError, Tensor};
pub use trainer::{LossKind, TrainConfig, TrainError, TrainItem, TrainMode, Trainer};

/// Derives an independent stream seed from a base seed, a purpose tag, and a
/// stream index, via two rounds of 64-bit avalanche mixing. Used everywhere a
/// component needs its own random stream (per-sample noise, per-epoch
/// shuffles, per-step batches) so that parallel order never changes results.
pub fn derive_stream_seed(base: u64, tag: u64, idx: u64) -> u64 {
    const GOLDEN: u64 = 0x9E3779B97F4A7C15;
    let s = mix64(base.wrapping_add(GOLDEN.wrapping_mul(tag.wrapping_add(1))));
    mix64(s.wrapping_add(GOLDEN.wrapping_mul(idx.wrapping_add(1))))
}

/// 64-bit finalizer with full avalanche (the splitmix64 mixing function).
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}
