//! Continuous diffusion over analog-bit label tensors.
//!
//! Dense label sequences are encoded one-hot into real-valued tensors,
//! noised with a closed-form forward process, and recovered by a learned
//! reconstruction network applied along a decreasing subsequence of steps.
//! Both stochastic (posterior sampling) and deterministic (implicit) reverse
//! processes are provided; the two differ only in the posterior variance
//! term.
//!
//! Notation used throughout: `gamma(t)` is the cumulative signal fraction
//! after `t` noising steps (`gamma(0) = 1`), and `beta(t)` the per-step
//! noise fraction, so `gamma(t) = prod_{k<=t} (1 - beta(k))`.

use crate::gtan::{gtan_forward, ForwardInput, GtanConfig, ModelParams};
use crate::tensor::{NumericsError, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Analytic form of the noise ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Noise fraction rises linearly from 1e-4 to 2e-2.
    Linear,
    /// Squared-cosine signal decay with per-step noise clipped at 0.999.
    Cosine,
}

/// Reverse-process variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Stochastic ancestral sampling with the posterior variance.
    Ddpm,
    /// Deterministic implicit sampling (zero posterior variance).
    Ddim,
}

/// How one-hot bits are embedded on the real line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScaling {
    /// Bits become 0.0 / 1.0.
    ZeroOne,
    /// Bits become -1.0 / +1.0.
    Signed,
}

/// How raw network scores are turned into the reconstruction tensor fed to
/// self-conditioning and the next sampler step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionMap {
    /// Scores are already label-space values (squared-error training).
    Identity,
    /// Row-wise softmax (cross-entropy training).
    Softmax,
    /// Element-wise sigmoid (per-bit binary cross-entropy training).
    Sigmoid,
}

/// Sampler configuration shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Total diffusion steps the schedule is built for.
    pub t_max: usize,
    pub schedule: ScheduleKind,
    pub sampler: SamplerKind,
    /// Number of reverse steps actually visited (a subsequence of `1..=t_max`).
    pub num_steps: usize,
    pub label_scaling: LabelScaling,
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.t_max == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "diffusion_config",
                detail: "t_max must be >= 1".into(),
            });
        }
        if self.num_steps == 0 || self.num_steps > self.t_max {
            return Err(NumericsError::InvalidArgument {
                op: "diffusion_config",
                detail: format!(
                    "num_steps {} outside 1..={}",
                    self.num_steps, self.t_max
                ),
            });
        }
        Ok(())
    }
}

/// Precomputed noise tables, 1-based: index `t` holds the value after `t`
/// steps, and index 0 is the clean boundary (`gamma(0) = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_max: usize) -> Result<NoiseSchedule, NumericsError> {
        if t_max == 0 {
            return Err(NumericsError::InvalidArgument {
                op: "noise_schedule",
                detail: "t_max must be >= 1".into(),
            });
        }
        let betas = match kind {
            ScheduleKind::Linear => {
                let (lo, hi) = (1e-4, 2e-2);
                if t_max == 1 {
                    vec![lo]
                } else {
                    (1..=t_max)
                        .map(|t| lo + (t - 1) as f64 / (t_max - 1) as f64 * (hi - lo))
                        .collect()
                }
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let inner = (t / t_max as f64 + 0.008) / 1.008;
                    (inner * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let f0 = f(0.0);
                let mut prev_bar = 1.0;
                (1..=t_max)
                    .map(|t| {
                        let bar = f(t as f64) / f0;
                        let beta = (1.0 - bar / prev_bar).min(0.999);
                        prev_bar = bar;
                        beta
                    })
                    .collect()
            }
        };
        NoiseSchedule::from_betas(betas)
    }

    /// Builds the tables from explicit per-step noise fractions
    /// (`betas[0]` is step 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule, NumericsError> {
        if betas.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "noise_schedule",
                detail: "need at least one step".into(),
            });
        }
        if let Some(&bad) = betas.iter().find(|b| !(0.0..1.0).contains(*b) || **b == 0.0) {
            return Err(NumericsError::InvalidArgument {
                op: "noise_schedule",
                detail: format!("noise fraction {bad} outside (0, 1)"),
            });
        }
        let t_max = betas.len();
        let mut beta = Vec::with_capacity(t_max + 1);
        beta.push(f64::NAN); // index 0 is never a valid step
        beta.extend_from_slice(&betas);

        let mut gamma = Vec::with_capacity(t_max + 1);
        gamma.push(1.0);
        for t in 1..=t_max {
            gamma.push(gamma[t - 1] * (1.0 - beta[t]));
        }

        let mut beta_tilde = Vec::with_capacity(t_max + 1);
        beta_tilde.push(0.0);
        for t in 1..=t_max {
            // Posterior variance of the adjacent reverse transition; zero at
            // t = 1 because gamma(0) = 1.
            beta_tilde.push((1.0 - gamma[t - 1]) / (1.0 - gamma[t]) * beta[t]);
        }

        let sched = NoiseSchedule {
            t_max,
            beta,
            gamma,
            beta_tilde,
        };
        for t in 1..=t_max {
            if !(sched.gamma[t] > 0.0 && sched.gamma[t] < sched.gamma[t - 1]) {
                return Err(NumericsError::InvalidArgument {
                    op: "noise_schedule",
                    detail: format!("signal fraction not strictly decreasing at step {t}"),
                });
            }
        }
        Ok(sched)
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Per-step noise fraction; `t` in `1..=t_max`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "step {t} out of range");
        self.beta[t]
    }

    /// Cumulative signal fraction; `t` in `0..=t_max`.
    pub fn gamma(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "step {t} out of range");
        self.gamma[t]
    }

    /// Adjacent posterior variance; `t` in `1..=t_max`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "step {t} out of range");
        self.beta_tilde[t]
    }

    /// Posterior variance of the reverse jump from `t` to an arbitrary
    /// earlier step `t_prev`; reduces to [`NoiseSchedule::beta_tilde`] when
    /// `t_prev == t - 1`.
    pub fn beta_tilde_between(&self, t: usize, t_prev: usize) -> f64 {
        assert!(t_prev < t && t <= self.t_max, "need t_prev < t <= t_max");
        let (gt, gp) = (self.gamma[t], self.gamma[t_prev]);
        (1.0 - gp) / (1.0 - gt) * (1.0 - gt / gp)
    }
}

/// Applies `t` noising steps in closed form:
/// `sqrt(gamma(t)) * y0 + sqrt(1 - gamma(t)) * eps`.
pub fn q_sample(
    y0: &Tensor,
    eps: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor, NumericsError> {
    if y0.dims() != eps.dims() {
        return Err(NumericsError::ShapeMismatch {
            op: "q_sample",
            detail: format!("{:?} vs {:?}", y0.dims(), eps.dims()),
        });
    }
    let g = schedule.gamma(t);
    let (a, b) = (g.sqrt(), (1.0 - g).sqrt());
    Ok(Tensor::from_fn(y0.dims(), |e| {
        a * y0.data()[e] + b * eps.data()[e]
    }))
}

/// Inverts the forward process for the noise estimate:
/// `(y_t - sqrt(gamma(t)) * y0_hat) / sqrt(1 - gamma(t))`.
pub fn estimate_epsilon(
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor, NumericsError> {
    if y_t.dims() != y0_hat.dims() {
        return Err(NumericsError::ShapeMismatch {
            op: "estimate_epsilon",
            detail: format!("{:?} vs {:?}", y_t.dims(), y0_hat.dims()),
        });
    }
    let g = schedule.gamma(t);
    if g >= 1.0 {
        return Err(NumericsError::InvalidArgument {
            op: "estimate_epsilon",
            detail: format!("no noise at step {t}"),
        });
    }
    let (a, inv_b) = (g.sqrt(), 1.0 / (1.0 - g).sqrt());
    let out = Tensor::from_fn(y_t.dims(), |e| {
        (y_t.data()[e] - a * y0_hat.data()[e]) * inv_b
    });
    out.check_finite("estimate_epsilon")?;
    Ok(out)
}

/// Mean of the reverse transition from `t` to `t_prev`, plus the posterior
/// variance actually used and whether the square root under the noise-match
/// coefficient had to be clamped at zero.
///
/// `sqrt(gamma(t_prev)) * y0_hat + sqrt(1 - gamma(t_prev) - var) * eps_hat`,
/// with `var = 0` for the deterministic sampler.
pub fn posterior_mean(
    y0_hat: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    sampler: SamplerKind,
) -> Result<(Tensor, f64, bool), NumericsError> {
    if y0_hat.dims() != eps_hat.dims() {
        return Err(NumericsError::ShapeMismatch {
            op: "posterior_mean",
            detail: format!("{:?} vs {:?}", y0_hat.dims(), eps_hat.dims()),
        });
    }
    if !(1..=schedule.t_max()).contains(&t) || t_prev >= t {
        return Err(NumericsError::InvalidArgument {
            op: "posterior_mean",
            detail: format!("need 0 <= t_prev < t <= {}, got {t_prev}, {t}", schedule.t_max()),
        });
    }
    let var = match sampler {
        SamplerKind::Ddim => 0.0,
        SamplerKind::Ddpm => schedule.beta_tilde_between(t, t_prev),
    };
    let gp = schedule.gamma(t_prev);
    let radicand = 1.0 - gp - var;
    let clamped = radicand < 0.0;
    let (a, b) = (gp.sqrt(), radicand.max(0.0).sqrt());
    let mean = Tensor::from_fn(y0_hat.dims(), |e| {
        a * y0_hat.data()[e] + b * eps_hat.data()[e]
    });
    mean.check_finite("posterior_mean")?;
    Ok((mean, var, clamped))
}

/// The decreasing subsequence of steps visited by the reverse process:
/// `num_steps` values evenly placed over `1..=t_max`, always including both
/// endpoints, strictly decreasing.
pub fn step_subsequence(t_max: usize, num_steps: usize) -> Result<Vec<usize>, NumericsError> {
    if num_steps == 0 || num_steps > t_max {
        return Err(NumericsError::InvalidArgument {
            op: "step_subsequence",
            detail: format!("num_steps {num_steps} outside 1..={t_max}"),
        });
    }
    if num_steps == 1 {
        return Ok(vec![t_max]);
    }
    let mut steps: Vec<usize> = (0..num_steps)
        .rev()
        .map(|j| {
            let pos = 1.0 + (t_max - 1) as f64 * j as f64 / (num_steps - 1) as f64;
            pos.round() as usize
        })
        .collect();
    // Even placement can collide after rounding when num_steps is close to
    // t_max; nudge collisions apart, which is always possible since
    // num_steps <= t_max.
    for i in 1..steps.len() {
        if steps[i] >= steps[i - 1] {
            steps[i] = steps[i - 1] - 1;
        }
    }
    debug_assert_eq!(steps[0], t_max);
    debug_assert_eq!(*steps.last().unwrap(), 1);
    Ok(steps)
}

/// Encodes a dense label sequence as one analog bit row per frame.
pub fn encode_labels(
    labels: &[usize],
    num_classes: usize,
    scaling: LabelScaling,
) -> Result<Tensor, NumericsError> {
    if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
        return Err(NumericsError::InvalidArgument {
            op: "encode_labels",
            detail: format!("label {bad} out of range for {num_classes} classes"),
        });
    }
    let (off, on) = match scaling {
        LabelScaling::ZeroOne => (0.0, 1.0),
        LabelScaling::Signed => (-1.0, 1.0),
    };
    let mut out = Tensor::filled(&[labels.len(), num_classes], off);
    for (f, &c) in labels.iter().enumerate() {
        out.data_mut()[f * num_classes + c] = on;
    }
    Ok(out)
}

/// Decodes an analog label tensor to one class per frame by row-wise argmax;
/// ties resolve to the lowest class index.
pub fn decode_labels(y: &Tensor) -> Result<Vec<usize>, NumericsError> {
    if y.dims().len() != 2 || y.dims()[1] == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "decode_labels",
            detail: format!("expected [frames, classes], got {:?}", y.dims()),
        });
    }
    Ok((0..y.dims()[0])
        .map(|f| {
            let row = y.row(f);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Applies the configured score-to-label-space map row by row.
pub fn map_scores(scores: &Tensor, map: ReconstructionMap) -> Result<Tensor, NumericsError> {
    if scores.dims().len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "map_scores",
            detail: format!("expected [frames, classes], got {:?}", scores.dims()),
        });
    }
    let out = match map {
        ReconstructionMap::Identity => scores.clone(),
        ReconstructionMap::Sigmoid => {
            Tensor::from_fn(scores.dims(), |e| crate::autograd::sigmoid(scores.data()[e]))
        }
        ReconstructionMap::Softmax => {
            let (n, c) = (scores.dims()[0], scores.dims()[1]);
            let mut out = Tensor::zeros(&[n, c]);
            for f in 0..n {
                let row = scores.row(f);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (j, &s) in row.iter().enumerate() {
                    let e = (s - m).exp();
                    out.data_mut()[f * c + j] = e;
                    denom += e;
                }
                for j in 0..c {
                    out.data_mut()[f * c + j] /= denom;
                }
            }
            out
        }
    };
    out.check_finite("map_scores")?;
    Ok(out)
}

/// Anything that can reconstruct clean analog labels from a noisy state.
/// Implementations must already apply their reconstruction map: the output
/// feeds self-conditioning and the next sampler step directly.
pub trait Denoiser {
    fn num_classes(&self) -> usize;

    /// `y_t` and `self_cond` are `[frames, classes]`, `cond` is
    /// `[frames, cond_dim]`, `t` is the current diffusion step.
    fn reconstruct(
        &self,
        y_t: &Tensor,
        self_cond: &Tensor,
        cond: &Tensor,
        t: usize,
    ) -> Result<Tensor, NumericsError>;
}

/// The trained network as a [`Denoiser`]: eval-mode forward pass, last-stage
/// scores, reconstruction map applied.
pub struct GtanDenoiser<'a> {
    pub params: &'a ModelParams,
    pub config: &'a GtanConfig,
    pub map: ReconstructionMap,
}

impl Denoiser for GtanDenoiser<'_> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn reconstruct(
        &self,
        y_t: &Tensor,
        self_cond: &Tensor,
        cond: &Tensor,
        t: usize,
    ) -> Result<Tensor, NumericsError> {
        let input = ForwardInput {
            noisy: y_t,
            self_cond,
            cond,
            step: Some(t),
        };
        let (scores, _) = gtan_forward(self.params, self.config, &input, false)?;
        map_scores(scores.last().expect("at least one stage"), self.map)
    }
}

/// Diagnostics of one reverse pass.
#[derive(Debug, Clone)]
pub struct DenoiseTrace {
    /// Steps visited, descending.
    pub steps: Vec<usize>,
    /// How many transitions clamped a negative noise-match radicand to zero.
    pub clamped_radicands: usize,
}

/// Runs the reverse process once and returns the final reconstruction
/// (`[frames, classes]`, label space) plus diagnostics.
///
/// Starts from pure noise, chains the reconstruction of each step into the
/// next step's self-conditioning input (zeros at the first step), and
/// returns the last reconstruction directly — the final visited step is not
/// re-noised.
pub fn denoise_loop<D: Denoiser>(
    denoiser: &D,
    cond: &Tensor,
    diffusion: &DiffusionConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, DenoiseTrace), NumericsError> {
    diffusion.validate()?;
    if schedule.t_max() != diffusion.t_max {
        return Err(NumericsError::InvalidArgument {
            op: "denoise_loop",
            detail: format!(
                "schedule has {} steps, config expects {}",
                schedule.t_max(),
                diffusion.t_max
            ),
        });
    }
    let frames = cond.dims()[0];
    let c = denoiser.num_classes();
    let steps = step_subsequence(diffusion.t_max, diffusion.num_steps)?;

    let mut y_t = Tensor::from_fn(&[frames, c], |_| rng.sample(StandardNormal));
    let mut self_cond = Tensor::zeros(&[frames, c]);
    let mut clamped = 0usize;
    let mut final_y0 = None;

    for (i, &t) in steps.iter().enumerate() {
        let y0_hat = denoiser.reconstruct(&y_t, &self_cond, cond, t)?;
        y0_hat.check_finite("denoise_loop")?;
        if i + 1 == steps.len() {
            final_y0 = Some(y0_hat);
            break;
        }
        let t_prev = steps[i + 1];
        let eps_hat = estimate_epsilon(&y_t, &y0_hat, t, schedule)?;
        let (mean, var, was_clamped) =
            posterior_mean(&y0_hat, &eps_hat, t, t_prev, schedule, diffusion.sampler)?;
        clamped += was_clamped as usize;
        y_t = if diffusion.sampler == SamplerKind::Ddpm && var > 0.0 {
            let sd = var.sqrt();
            Tensor::from_fn(mean.dims(), |e| {
                mean.data()[e] + sd * rng.sample::<f64, _>(StandardNormal)
            })
        } else {
            mean
        };
        y_t.check_finite("denoise_loop")?;
        self_cond = y0_hat;
    }

    Ok((
        final_y0.expect("loop visits at least one step"),
        DenoiseTrace {
            steps,
            clamped_radicands: clamped,
        },
    ))
}

/// Tag for per-sample random streams (see [`crate::derive_stream_seed`]).
pub const SEED_TAG_SAMPLE: u64 = 0x5A;

/// Draws `count` independent reverse-process samples in parallel. Sample `m`
/// uses the stream seed `derive_stream_seed(base_seed, SEED_TAG_SAMPLE, m)`,
/// so results are bitwise independent of thread count and schedule order.
pub fn sample_many<D: Denoiser + Sync>(
    denoiser: &D,
    cond: &Tensor,
    diffusion: &DiffusionConfig,
    schedule: &NoiseSchedule,
    count: usize,
    base_seed: u64,
) -> Result<Vec<(Tensor, DenoiseTrace)>, NumericsError> {
    use rand::SeedableRng;
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|m| {
            let seed = crate::derive_stream_seed(base_seed, SEED_TAG_SAMPLE, m as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            denoise_loop(denoiser, cond, diffusion, schedule, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn toy_schedule() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap()
    }

    #[test]
    fn gamma_is_the_running_product_of_survival() {
        let s = toy_schedule();
        assert_eq!(s.gamma(0), 1.0);
        assert!((s.gamma(1) - 0.9).abs() < 1e-15);
        assert!((s.gamma(2) - 0.72).abs() < 1e-15);
        assert!((s.gamma(3) - 0.504).abs() < 1e-15);
    }

    #[test]
    fn adjacent_posterior_variance_matches_hand_value() {
        let s = toy_schedule();
        // (1 - 0.9) / (1 - 0.72) * 0.2
        assert!((s.beta_tilde(2) - 0.07142857142857144).abs() < 1e-15);
        assert_eq!(s.beta_tilde(1), 0.0);
    }

    #[test]
    fn skip_variance_reduces_to_adjacent_form() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 50).unwrap();
        for t in 2..=50 {
            let skip = s.beta_tilde_between(t, t - 1);
            assert!(
                (skip - s.beta_tilde(t)).abs() < 1e-15,
                "mismatch at t = {t}"
            );
        }
    }

    #[test]
    fn linear_schedule_endpoints_and_monotonicity() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 100).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(100) - 2e-2).abs() < 1e-18);
        for t in 2..=100 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.gamma(t) < s.gamma(t - 1));
        }
        let single = NoiseSchedule::new(ScheduleKind::Linear, 1).unwrap();
        assert!((single.beta(1) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn cosine_schedule_matches_direct_signal_ratio() {
        // Independent of the constructor's product form: where no clipping
        // occurred, gamma(t) must equal f(t)/f(0) for the squared-cosine f.
        let t_max = 40;
        let s = NoiseSchedule::new(ScheduleKind::Cosine, t_max).unwrap();
        let f = |t: f64| {
            let inner = (t / t_max as f64 + 0.008) / 1.008;
            (inner * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        for t in 1..t_max {
            if s.beta(t) < 0.999 {
                let direct = f(t as f64) / f(0.0);
                assert!(
                    (s.gamma(t) - direct).abs() < 1e-12,
                    "gamma({t}) = {} vs direct {}",
                    s.gamma(t),
                    direct
                );
            }
        }
        for t in 1..=t_max {
            assert!(s.beta(t) <= 0.999);
        }
    }

    #[test]
    fn schedule_rejects_degenerate_fractions() {
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.5, -0.1]).is_err());
    }

    #[test]
    fn forward_noising_matches_hand_value() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        // gamma(2) = 0.25: 0.5 * 1 + sqrt(0.75) * 2
        let y0 = Tensor::filled(&[1, 1], 1.0);
        let eps = Tensor::filled(&[1, 1], 2.0);
        let yt = q_sample(&y0, &eps, 2, &s).unwrap();
        assert!((yt.data()[0] - 2.232050807568877).abs() < 1e-12);
    }

    #[test]
    fn epsilon_estimate_inverts_forward_noising() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let y0 = Tensor::filled(&[1, 1], 1.0);
        let eps = Tensor::filled(&[1, 1], 2.0);
        let yt = q_sample(&y0, &eps, 2, &s).unwrap();
        let eps_hat = estimate_epsilon(&yt, &y0, 2, &s).unwrap();
        assert!((eps_hat.data()[0] - 2.0).abs() < 1e-12);
    }

    proptest! {
        // Round trip across random tensors, steps, and schedules.
        #[test]
        fn epsilon_round_trip_is_exact(
            seed in 0u64..1000,
            t in 1usize..=30,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = NoiseSchedule::new(ScheduleKind::Linear, 30).unwrap();
            let y0 = Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0));
            let eps = Tensor::from_fn(&[4, 3], |_| rng.sample(StandardNormal));
            let yt = q_sample(&y0, &eps, t, &s).unwrap();
            let eps_hat = estimate_epsilon(&yt, &y0, t, &s).unwrap();
            prop_assert!(eps_hat.max_abs_diff(&eps) < 1e-12);
        }
    }

    #[test]
    fn posterior_mean_matches_hand_value() {
        // Schedule [0.1, 0.2, 0.3]; jump 2 -> 1 with unit reconstruction and
        // unit noise estimate: sqrt(0.9) + sqrt(1 - 0.9 - 0.0714285..).
        let s = toy_schedule();
        let one = Tensor::filled(&[1, 1], 1.0);
        let (mean, var, clamped) =
            posterior_mean(&one, &one, 2, 1, &s, SamplerKind::Ddpm).unwrap();
        assert!(!clamped);
        assert!((var - s.beta_tilde(2)).abs() < 1e-15);
        let expect = 0.9f64.sqrt() + (1.0 - 0.9 - s.beta_tilde(2)).sqrt();
        assert!((mean.data()[0] - expect).abs() < 1e-12);
        assert!((mean.data()[0] - 1.117_714_148_996_217).abs() < 1e-9);

        let (dmean, dvar, _) = posterior_mean(&one, &one, 2, 1, &s, SamplerKind::Ddim).unwrap();
        assert_eq!(dvar, 0.0);
        let dexpect = 0.9f64.sqrt() + 0.1f64.sqrt();
        assert!((dmean.data()[0] - dexpect).abs() < 1e-12);
    }

    #[test]
    fn step_subsequence_spans_endpoints_evenly() {
        assert_eq!(step_subsequence(10, 1).unwrap(), vec![10]);
        assert_eq!(step_subsequence(10, 4).unwrap(), vec![10, 7, 4, 1]);
        assert_eq!(step_subsequence(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(step_subsequence(1, 1).unwrap(), vec![1]);
        assert!(step_subsequence(10, 11).is_err());
        assert!(step_subsequence(10, 0).is_err());

        for (t_max, d) in [(100, 7), (500, 50), (37, 36), (1000, 25)] {
            let steps = step_subsequence(t_max, d).unwrap();
            assert_eq!(steps.len(), d);
            assert_eq!(steps[0], t_max);
            assert_eq!(*steps.last().unwrap(), 1);
            for w in steps.windows(2) {
                assert!(w[0] > w[1], "not strictly decreasing: {steps:?}");
            }
        }
    }

    #[test]
    fn labels_encode_one_hot_and_decode_by_argmax() {
        let y = encode_labels(&[2, 0], 3, LabelScaling::ZeroOne).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let signed = encode_labels(&[1], 2, LabelScaling::Signed).unwrap();
        assert_eq!(signed.data(), &[-1.0, 1.0]);
        assert!(encode_labels(&[3], 3, LabelScaling::ZeroOne).is_err());

        let soft = Tensor::from_vec(&[2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.5, 0.1]).unwrap();
        assert_eq!(decode_labels(&soft).unwrap(), vec![1, 0]);
    }

    #[test]
    fn score_maps_produce_label_space_rows() {
        let scores = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, -1.0]).unwrap();
        let id = map_scores(&scores, ReconstructionMap::Identity).unwrap();
        assert_eq!(id, scores);
        let sm = map_scores(&scores, ReconstructionMap::Softmax).unwrap();
        let sum: f64 = sm.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(sm.data()[1] > sm.data()[0] && sm.data()[0] > sm.data()[2]);
        let sg = map_scores(&scores, ReconstructionMap::Sigmoid).unwrap();
        assert_eq!(sg.data()[0], 0.5);
    }

    /// A denoiser that always returns the true clean tensor, for exercising
    /// the sampler loop in isolation.
    struct OracleDenoiser {
        y0: Tensor,
    }

    impl Denoiser for OracleDenoiser {
        fn num_classes(&self) -> usize {
            self.y0.dims()[1]
        }
        fn reconstruct(
            &self,
            _y_t: &Tensor,
            _sc: &Tensor,
            _cond: &Tensor,
            _t: usize,
        ) -> Result<Tensor, NumericsError> {
            Ok(self.y0.clone())
        }
    }

    #[test]
    fn ddim_with_oracle_reconstruction_recovers_the_target() {
        let schedule = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let diffusion = DiffusionConfig {
            t_max: 100,
            schedule: ScheduleKind::Cosine,
            sampler: SamplerKind::Ddim,
            num_steps: 10,
            label_scaling: LabelScaling::ZeroOne,
        };
        let y0 = encode_labels(&[0, 2, 1, 1], 3, LabelScaling::ZeroOne).unwrap();
        let oracle = OracleDenoiser { y0: y0.clone() };
        let cond = Tensor::zeros(&[4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (out, trace) = denoise_loop(&oracle, &cond, &diffusion, &schedule, &mut rng).unwrap();
        assert!(out.max_abs_diff(&y0) < 1e-9);
        assert_eq!(trace.steps.len(), 10);
        assert_eq!(trace.clamped_radicands, 0);
        assert_eq!(decode_labels(&out).unwrap(), vec![0, 2, 1, 1]);
    }

    #[test]
    fn ddim_noise_direction_is_preserved_across_a_step() {
        // With exact reconstructions the implicit sampler keeps the noise
        // estimate constant: stepping t -> p and re-estimating returns the
        // same direction.
        let s = NoiseSchedule::new(ScheduleKind::Linear, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y0 = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.0..1.0));
        let eps = Tensor::from_fn(&[3, 4], |_| rng.sample(StandardNormal));
        let yt = q_sample(&y0, &eps, 15, &s).unwrap();
        let eps_hat = estimate_epsilon(&yt, &y0, 15, &s).unwrap();
        let (yp, _, _) = posterior_mean(&y0, &eps_hat, 15, 7, &s, SamplerKind::Ddim).unwrap();
        let eps_again = estimate_epsilon(&yp, &y0, 7, &s).unwrap();
        assert!(eps_again.max_abs_diff(&eps) < 1e-12);
    }

    #[test]
    fn sampling_is_reproducible_and_order_independent() {
        let schedule = NoiseSchedule::new(ScheduleKind::Linear, 30).unwrap();
        let diffusion = DiffusionConfig {
            t_max: 30,
            schedule: ScheduleKind::Linear,
            sampler: SamplerKind::Ddpm,
            num_steps: 6,
            label_scaling: LabelScaling::ZeroOne,
        };
        let y0 = encode_labels(&[1, 0], 2, LabelScaling::ZeroOne).unwrap();
        let oracle = OracleDenoiser { y0 };
        let cond = Tensor::zeros(&[2, 2]);
        let a = sample_many(&oracle, &cond, &diffusion, &schedule, 5, 77).unwrap();
        let b = sample_many(&oracle, &cond, &diffusion, &schedule, 5, 77).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
        }
    }
}
