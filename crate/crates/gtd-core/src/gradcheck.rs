//! Finite-difference verification of tape gradients.
//!
//! [`grad_check`] compares an analytic gradient against central differences,
//! coordinate by coordinate, and reports the worst relative error.
//! [`run_gradient_suite`] applies it to every differentiable operator with
//! random inputs; both the trainer's self-test command and the integration
//! tests call it.

use crate::autograd::Tape;
use crate::tensor::{NumericsError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest and largest finite-difference step accepted by [`grad_check`].
/// Below this range cancellation dominates; above it truncation does.
pub const GRAD_CHECK_EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

/// Floor used in the relative-error denominator so near-zero gradients are
/// compared on an absolute scale.
pub const GRAD_CHECK_DENOM_FLOOR: f64 = 1e-8;

/// Compares the analytic gradient of a scalar function against central
/// finite differences at `x0`, returning the maximum relative error
/// `|a - n| / max(|a|, |n|, floor)` over all coordinates.
///
/// The closure receives the evaluation point and a flag; when the flag is
/// set it must return the analytic gradient alongside the value (this is
/// requested exactly once, at `x0`). Deterministic closures only: anything
/// stochastic inside must be driven by a seed fixed across calls, or the
/// difference quotient measures noise instead of slope.
pub fn grad_check<F>(mut f: F, x0: &Tensor, eps: f64) -> Result<f64, NumericsError>
where
    F: FnMut(&Tensor, bool) -> Result<(f64, Option<Tensor>), NumericsError>,
{
    let (lo, hi) = GRAD_CHECK_EPS_RANGE;
    if !(lo..=hi).contains(&eps) {
        return Err(NumericsError::InvalidArgument {
            op: "grad_check",
            detail: format!("eps {eps} outside [{lo}, {hi}]"),
        });
    }
    let (_, grad) = f(x0, true)?;
    let grad = grad.ok_or_else(|| NumericsError::InvalidArgument {
        op: "grad_check",
        detail: "closure returned no analytic gradient at x0".into(),
    })?;
    if grad.dims() != x0.dims() {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check",
            detail: format!("gradient {:?} vs point {:?}", grad.dims(), x0.dims()),
        });
    }

    let mut max_rel = 0.0f64;
    let mut x = x0.clone();
    for e in 0..x0.len() {
        let orig = x0.data()[e];
        x.data_mut()[e] = orig + eps;
        let (up, _) = f(&x, false)?;
        x.data_mut()[e] = orig - eps;
        let (down, _) = f(&x, false)?;
        x.data_mut()[e] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let analytic = grad.data()[e];
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_DENOM_FLOOR);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    if !max_rel.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" });
    }
    Ok(max_rel)
}

/// Result of one operator's check in the gradient suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
}

/// Aggregate of [`run_gradient_suite`].
#[derive(Debug, Clone)]
pub struct GradientSuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub tolerance: f64,
}

impl GradientSuiteReport {
    pub fn max_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_err() < self.tolerance
    }
}

impl std::fmt::Display for GradientSuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} max rel err {:.3e}  [{}]",
                e.name,
                e.max_rel_err,
                if e.max_rel_err < self.tolerance {
                    "ok"
                } else {
                    "FAIL"
                }
            )?;
        }
        write!(
            f,
            "overall max {:.3e} (tolerance {:.1e}): {}",
            self.max_err(),
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

const SUITE_EPS: f64 = 1e-5;
const SUITE_TOLERANCE: f64 = 1e-6;

/// Checks every operator's backward rule against finite differences with
/// random inputs drawn in `[-1, 1]`. Each entry perturbs one differentiable
/// input of one operator while holding everything else fixed.
pub fn run_gradient_suite(seed: u64) -> Result<GradientSuiteReport, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    // Fixed reduction coefficients give every output coordinate a distinct,
    // nonzero cotangent so errors cannot cancel in the scalarization.
    let coeffs = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
        (0..len)
            .map(|_| rng.random_range(0.25..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect()
    };
    let uniform = |rng: &mut ChaCha8Rng, dims: &[usize]| -> Tensor {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    };

    // conv1d: gradient with respect to input, weights, and bias in turn.
    {
        let x0 = uniform(&mut rng, &[2, 7]);
        let w0 = uniform(&mut rng, &[3, 2, 3]);
        let b0 = uniform(&mut rng, &[3]);
        let red = coeffs(&mut rng, 21);
        for (role, dims) in [("input", x0.dims()), ("weights", w0.dims()), ("bias", b0.dims())] {
            let (x0c, w0c, b0c, redc) = (x0.clone(), w0.clone(), b0.clone(), red.clone());
            let role_name = role;
            let err = grad_check(
                move |p: &Tensor, want: bool| {
                    let mut tape = Tape::new();
                    let x = if role_name == "input" {
                        tape.param(p.clone())?
                    } else {
                        tape.leaf(x0c.clone())?
                    };
                    let w = if role_name == "weights" {
                        tape.param(p.clone())?
                    } else {
                        tape.leaf(w0c.clone())?
                    };
                    let b = if role_name == "bias" {
                        tape.param(p.clone())?
                    } else {
                        tape.leaf(b0c.clone())?
                    };
                    let y = tape.conv1d(x, w, b, 2)?;
                    let loss = tape.weighted_sum(y, redc.clone())?;
                    finish(&tape, loss, [x, w, b][role_idx(role_name)], want)
                },
                match role {
                    "input" => &x0,
                    "weights" => &w0,
                    _ => &b0,
                },
                SUITE_EPS,
            )?;
            entries.push(SuiteEntry {
                name: format!("conv1d wrt {role} (dims {dims:?})"),
                max_rel_err: err,
            });
        }
    }

    // Pointwise ops.
    {
        let x0 = uniform(&mut rng, &[2, 6]);
        let red = coeffs(&mut rng, 12);
        let redc = red.clone();
        let err = grad_check(
            move |p, want| {
                let mut tape = Tape::new();
                let x = tape.param(p.clone())?;
                let y = tape.sigmoid(x)?;
                let loss = tape.weighted_sum(y, redc.clone())?;
                finish(&tape, loss, x, want)
            },
            &x0,
            SUITE_EPS,
        )?;
        entries.push(SuiteEntry {
            name: "sigmoid".into(),
            max_rel_err: err,
        });

        // Keep inputs away from the kink at zero, where the derivative is
        // not defined and finite differences straddle both sides.
        let x_relu = Tensor::from_fn(&[2, 6], |_| {
            let mag = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        });
        let redc = red.clone();
        let err = grad_check(
            move |p, want| {
                let mut tape = Tape::new();
                let x = tape.param(p.clone())?;
                let y = tape.relu(x)?;
                let loss = tape.weighted_sum(y, redc.clone())?;
                finish(&tape, loss, x, want)
            },
            &x_relu,
            SUITE_EPS,
        )?;
        entries.push(SuiteEntry {
            name: "relu (inputs off the kink)".into(),
            max_rel_err: err,
        });
    }

    // add / mul, perturbing each operand.
    {
        let a0 = uniform(&mut rng, &[3, 4]);
        let b0 = uniform(&mut rng, &[3, 4]);
        let red = coeffs(&mut rng, 12);
        for (op_name, which) in [("add", 0), ("add", 1), ("mul", 0), ("mul", 1)] {
            let (a0c, b0c, redc) = (a0.clone(), b0.clone(), red.clone());
            let err = grad_check(
                move |p, want| {
                    let mut tape = Tape::new();
                    let a = if which == 0 {
                        tape.param(p.clone())?
                    } else {
                        tape.leaf(a0c.clone())?
                    };
                    let b = if which == 1 {
                        tape.param(p.clone())?
                    } else {
                        tape.leaf(b0c.clone())?
                    };
                    let y = if op_name == "add" {
                        tape.add(a, b)?
                    } else {
                        tape.mul(a, b)?
                    };
                    let loss = tape.weighted_sum(y, redc.clone())?;
                    finish(&tape, loss, if which == 0 { a } else { b }, want)
                },
                if which == 0 { &a0 } else { &b0 },
                SUITE_EPS,
            )?;
            entries.push(SuiteEntry {
                name: format!("{op_name} wrt operand {which}"),
                max_rel_err: err,
            });
        }
    }

    // Dropout with the mask replayed from a fixed seed on every evaluation.
    {
        let x0 = uniform(&mut rng, &[2, 8]);
        let red = coeffs(&mut rng, 16);
        let mask_seed = rng.random::<u64>();
        let err = grad_check(
            move |p, want| {
                let mut tape = Tape::new();
                let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
                let x = tape.param(p.clone())?;
                let y = tape.dropout(x, 0.4, true, &mut mask_rng)?;
                let loss = tape.weighted_sum(y, red.clone())?;
                finish(&tape, loss, x, want)
            },
            &x0,
            SUITE_EPS,
        )?;
        entries.push(SuiteEntry {
            name: "dropout (fixed mask)".into(),
            max_rel_err: err,
        });
    }

    // concat_rows and broadcast_add_col.
    {
        let a0 = uniform(&mut rng, &[2, 5]);
        let b0 = uniform(&mut rng, &[3, 5]);
        let red = coeffs(&mut rng, 25);
        let (b0c, redc) = (b0.clone(), red.clone());
        let err = grad_check(
            move |p, want| {
                let mut tape = Tape::new();
                let a = tape.param(p.clone())?;
                let b = tape.leaf(b0c.clone())?;
                let y = tape.concat_rows(&[a, b])?;
                let loss = tape.weighted_sum(y, redc.clone())?;
                finish(&tape, loss, a, want)
            },
            &a0,
            SUITE_EPS,
        )?;
        entries.push(SuiteEntry {
            name: "concat_rows wrt first part".into(),
            max_rel_err: err,
        });

        let x0 = uniform(&mut rng, &[3, 5]);
        let v0 = uniform(&mut rng, &[3]);
        let red = coeffs(&mut rng, 15);
        for which in [0usize, 1] {
            let (x0c, v0c, redc) = (x0.clone(), v0.clone(), red.clone());
            let err = grad_check(
                move |p, want| {
                    let mut tape = Tape::new();
                    let x = if which == 0 {
                        tape.param(p.clone())?
                    } else {
                        tape.leaf(x0c.clone())?
                    };
                    let v = if which == 1 {
                        tape.param(p.clone())?
                    } else {
                        tape.leaf(v0c.clone())?
                    };
                    let y = tape.broadcast_add_col(x, v)?;
                    let loss = tape.weighted_sum(y, redc.clone())?;
                    finish(&tape, loss, if which == 0 { x } else { v }, want)
                },
                if which == 0 { &x0 } else { &v0 },
                SUITE_EPS,
            )?;
            entries.push(SuiteEntry {
                name: format!(
                    "broadcast_add_col wrt {}",
                    if which == 0 { "matrix" } else { "vector" }
                ),
                max_rel_err: err,
            });
        }
    }

    // Scalar losses.
    {
        let p0 = uniform(&mut rng, &[4, 6]);
        let target = uniform(&mut rng, &[4, 6]);
        let coeff: Vec<f64> = (0..24).map(|_| rng.random_range(0.05..0.5)).collect();
        let (tc, cc) = (target.clone(), coeff.clone());
        let err = grad_check(
            move |p, want| {
                let mut tape = Tape::new();
                let x = tape.param(p.clone())?;
                let loss = tape.weighted_sse(x, tc.clone(), cc.clone())?;
                finish(&tape, loss, x, want)
            },
            &p0,
            SUITE_EPS,
        )?;
        entries.push(SuiteEntry {
            name: "weighted_sse".into(),
            max_rel_err: err,
        });

        let z0 = uniform(&mut rng, &[5, 6]);
        let classes: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
        let fc: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..1.0)).collect();
        let (clc, fcc) = (classes.clone(), fc.clone());
        let err = grad_check(
            move |p, want| {
                let mut tape = Tape::new();
                let z = tape.param(p.clone())?;
                let loss = tape.softmax_cross_entropy(z, &clc, fcc.clone())?;
                finish(&tape, loss, z, want)
            },
            &z0,
            SUITE_EPS,
        )?;
        entries.push(SuiteEntry {
            name: "softmax_cross_entropy".into(),
            max_rel_err: err,
        });

        let z0 = uniform(&mut rng, &[3, 6]);
        let target = Tensor::from_fn(&[3, 6], |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let coeff: Vec<f64> = (0..18).map(|_| rng.random_range(0.05..0.5)).collect();
        let (tc, cc) = (target.clone(), coeff.clone());
        let err = grad_check(
            move |p, want| {
                let mut tape = Tape::new();
                let z = tape.param(p.clone())?;
                let loss = tape.sigmoid_bce(z, tc.clone(), cc.clone())?;
                finish(&tape, loss, z, want)
            },
            &z0,
            SUITE_EPS,
        )?;
        entries.push(SuiteEntry {
            name: "sigmoid_bce".into(),
            max_rel_err: err,
        });
    }

    // A small composite: gated unit into a softmax loss, exercising the
    // chain rule across several ops plus sum_scalars.
    {
        let x0 = uniform(&mut rng, &[2, 6]);
        let wg = uniform(&mut rng, &[2, 2, 3]);
        let bg = uniform(&mut rng, &[2]);
        let wf = uniform(&mut rng, &[2, 2, 3]);
        let bf = uniform(&mut rng, &[2]);
        let classes: Vec<usize> = (0..6).map(|_| rng.random_range(0..2)).collect();
        let red = coeffs(&mut rng, 12);
        let err = grad_check(
            move |p, want| {
                let mut tape = Tape::new();
                let x = tape.param(p.clone())?;
                let wgi = tape.leaf(wg.clone())?;
                let bgi = tape.leaf(bg.clone())?;
                let wfi = tape.leaf(wf.clone())?;
                let bfi = tape.leaf(bf.clone())?;
                let gate_pre = tape.conv1d(x, wgi, bgi, 1)?;
                let gate = tape.sigmoid(gate_pre)?;
                let feat = tape.conv1d(x, wfi, bfi, 1)?;
                let gated = tape.mul(gate, feat)?;
                let a = tape.softmax_cross_entropy(gated, &classes, vec![1.0 / 6.0; 6])?;
                let b = tape.weighted_sum(gated, red.clone())?;
                let loss = tape.sum_scalars(&[a, b])?;
                finish(&tape, loss, x, want)
            },
            &x0,
            SUITE_EPS,
        )?;
        entries.push(SuiteEntry {
            name: "gated unit composite".into(),
            max_rel_err: err,
        });
    }

    Ok(GradientSuiteReport {
        entries,
        tolerance: SUITE_TOLERANCE,
    })
}

fn role_idx(role: &str) -> usize {
    match role {
        "input" => 0,
        "weights" => 1,
        _ => 2,
    }
}

/// Shared epilogue for suite closures: extract the scalar and, if requested,
/// run backward and pull the gradient for the perturbed input.
fn finish(
    tape: &Tape,
    loss: crate::autograd::ValueId,
    wrt: crate::autograd::ValueId,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>), NumericsError> {
    let value = tape.value(loss).scalar()?;
    if !want_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let g = grads
        .wrt(wrt)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(tape.value(wrt).dims()));
    Ok((value, Some(g)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        // f(x) = sum x_i^2 has gradient 2x; at [1, 2] that is [2, 4].
        let x0 = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |x, want| {
                let v: f64 = x.data().iter().map(|a| a * a).sum();
                let g = want.then(|| Tensor::from_fn(x.dims(), |e| 2.0 * x.data()[e]));
                Ok((v, g))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn eps_outside_trust_region_is_rejected() {
        let x0 = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let f = |x: &Tensor, want: bool| {
            let v = x.data()[0];
            Ok((v, want.then(|| Tensor::filled(&[1], 1.0))))
        };
        assert!(grad_check(f, &x0, 1e-8).is_err());
        assert!(grad_check(f, &x0, 1e-2).is_err());
        assert!(grad_check(f, &x0, 1e-4).is_ok());
    }

    #[test]
    fn wrong_analytic_gradient_is_detected() {
        // Claiming gradient 3x for f(x) = x^2 must produce a large error.
        let x0 = Tensor::from_vec(&[1], vec![1.5]).unwrap();
        let err = grad_check(
            |x, want| {
                let v = x.data()[0] * x.data()[0];
                let g = want.then(|| Tensor::filled(&[1], 3.0 * x.data()[0]));
                Ok((v, g))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.3, "expected a gross mismatch, got {err}");
    }

    #[test]
    fn gradient_suite_passes_within_tolerance() {
        let report = run_gradient_suite(0).unwrap();
        assert!(report.passed(), "suite failed:\n{report}");
        assert!(report.entries.len() >= 12);
    }
}
