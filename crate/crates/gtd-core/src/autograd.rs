//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every operator application as a node holding the
//! forward value, the ids of its inputs, and whatever activations the
//! backward pass needs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates exact vector-Jacobian products into every value that was
//! registered with [`Tape::param`].
//!
//! The operator set is deliberately small: dilated 1-d convolution plus the
//! handful of pointwise, concatenation, and scalar-reduction ops the gated
//! temporal network and its losses are built from. All ops validate shapes
//! and reject non-finite results instead of letting NaN propagate.

use crate::tensor::{NumericsError, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Centered dilated 1-d convolution with same-length zero padding.
///
/// `x` is `[c_in, n]`, `weights` is `[c_out, c_in, k]` with `k` odd, `bias`
/// is `[c_out]`. Tap `j` of the kernel reads offset `(j - (k-1)/2) * dilation`
/// relative to the output frame; positions outside `[0, n)` contribute zero,
/// so the output is again `[c_out, n]` and residual connections typecheck.
pub fn conv1d_dilated(
    x: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    dilation: usize,
) -> Result<Tensor, NumericsError> {
    let (c_in, n, c_out, k) = conv_check_shapes(x, weights, bias, dilation)?;
    let half = (k - 1) / 2;
    let mut out = Tensor::zeros(&[c_out, n]);
    let xd = x.data();
    let wd = weights.data();
    for o in 0..c_out {
        let row = &mut out.data_mut()[o * n..(o + 1) * n];
        row.fill(bias.data()[o]);
        for i in 0..c_in {
            let xrow = &xd[i * n..(i + 1) * n];
            for j in 0..k {
                let w = wd[(o * c_in + i) * k + j];
                let off = (j as isize - half as isize) * dilation as isize;
                let (t0, t1) = tap_range(n, off);
                for t in t0..t1 {
                    row[t] += w * xrow[(t as isize + off) as usize];
                }
            }
        }
    }
    out.check_finite("conv1d_dilated")?;
    Ok(out)
}

/// Gradients of [`conv1d_dilated`] given the output cotangent `g`.
///
/// Returns `(dx, dw, db)`; `dx` is only computed when `need_dx` is set (the
/// input of the first projection is a constant, so its gradient is wasted
/// work in the common case).
pub fn conv1d_dilated_vjp(
    x: &Tensor,
    weights: &Tensor,
    g: &Tensor,
    dilation: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let c_in = x.dims()[0];
    let n = x.dims()[1];
    let c_out = weights.dims()[0];
    let k = weights.dims()[2];
    let half = (k - 1) / 2;
    debug_assert_eq!(g.dims(), &[c_out, n]);

    let xd = x.data();
    let wd = weights.data();
    let gd = g.data();

    let mut db = Tensor::zeros(&[c_out]);
    for o in 0..c_out {
        db.data_mut()[o] = gd[o * n..(o + 1) * n].iter().sum();
    }

    let mut dw = Tensor::zeros(&[c_out, c_in, k]);
    for o in 0..c_out {
        let grow = &gd[o * n..(o + 1) * n];
        for i in 0..c_in {
            let xrow = &xd[i * n..(i + 1) * n];
            for j in 0..k {
                let off = (j as isize - half as isize) * dilation as isize;
                let (t0, t1) = tap_range(n, off);
                let mut acc = 0.0;
                for t in t0..t1 {
                    acc += grow[t] * xrow[(t as isize + off) as usize];
                }
                dw.data_mut()[(o * c_in + i) * k + j] = acc;
            }
        }
    }

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(&[c_in, n]);
        for o in 0..c_out {
            let grow = &gd[o * n..(o + 1) * n];
            for i in 0..c_in {
                let xrow = &mut dx.data_mut()[i * n..(i + 1) * n];
                for j in 0..k {
                    let w = wd[(o * c_in + i) * k + j];
                    // x[i, t+off] fed out[o, t], so g flows back shifted by -off.
                    let off = -(j as isize - half as isize) * dilation as isize;
                    let (t0, t1) = tap_range(n, off);
                    for t in t0..t1 {
                        xrow[t] += w * grow[(t as isize + off) as usize];
                    }
                }
            }
        }
        dx
    });
    (dx, dw, db)
}

fn conv_check_shapes(
    x: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    dilation: usize,
) -> Result<(usize, usize, usize, usize), NumericsError> {
    if dilation < 1 {
        return Err(NumericsError::InvalidArgument {
            op: "conv1d_dilated",
            detail: "dilation must be >= 1".into(),
        });
    }
    if x.dims().len() != 2 || weights.dims().len() != 3 || bias.dims().len() != 1 {
        return Err(NumericsError::ShapeMismatch {
            op: "conv1d_dilated",
            detail: format!(
                "expected x [c_in, n], w [c_out, c_in, k], b [c_out]; got {:?}, {:?}, {:?}",
                x.dims(),
                weights.dims(),
                bias.dims()
            ),
        });
    }
    let (c_in, n) = (x.dims()[0], x.dims()[1]);
    let (c_out, w_cin, k) = (weights.dims()[0], weights.dims()[1], weights.dims()[2]);
    if w_cin != c_in || bias.dims()[0] != c_out {
        return Err(NumericsError::ShapeMismatch {
            op: "conv1d_dilated",
            detail: format!(
                "channel mismatch: x has {} channels, w expects {}, bias has {}",
                c_in,
                w_cin,
                bias.dims()[0]
            ),
        });
    }
    if k % 2 == 0 {
        return Err(NumericsError::InvalidArgument {
            op: "conv1d_dilated",
            detail: format!("kernel size must be odd, got {}", k),
        });
    }
    Ok((c_in, n, c_out, k))
}

/// Output frames `t` for which `t + off` is a valid input index.
fn tap_range(n: usize, off: isize) -> (usize, usize) {
    let t0 = (-off).max(0) as usize;
    let t1 = (n as isize).min(n as isize - off).max(0) as usize;
    (t0.min(t1), t1)
}

/// One recorded operator application.
enum Op {
    Leaf,
    Conv1d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        dilation: usize,
    },
    Sigmoid {
        x: ValueId,
    },
    Relu {
        x: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Dropout {
        x: ValueId,
        /// Per-element factor: `1/(1-rate)` for survivors, `0` for dropped.
        mask: Vec<f64>,
    },
    ConcatRows {
        parts: Vec<ValueId>,
    },
    BroadcastAddCol {
        x: ValueId,
        v: ValueId,
    },
    WeightedSum {
        x: ValueId,
        coeff: Vec<f64>,
    },
    WeightedSse {
        pred: ValueId,
        target: Tensor,
        coeff: Vec<f64>,
    },
    SoftmaxCe {
        logits: ValueId,
        classes: Vec<usize>,
        frame_coeff: Vec<f64>,
        /// Column-wise softmax saved by the forward pass, `[c, n]` flat.
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: ValueId,
        target: Tensor,
        coeff: Vec<f64>,
    },
    SumScalars {
        parts: Vec<ValueId>,
    },
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Dropout { .. } => "dropout",
            Op::ConcatRows { .. } => "concat_rows",
            Op::BroadcastAddCol { .. } => "broadcast_add_col",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::WeightedSse { .. } => "weighted_sse",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::SigmoidBce { .. } => "sigmoid_bce",
            Op::SumScalars { .. } => "sum_scalars",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// True if this value depends on at least one parameter leaf; backward
    /// skips everything else.
    requires_grad: bool,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to the given value, if the
    /// value participates in the differentiated subgraph.
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Flat record of a forward computation; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    /// Registers a constant input. No gradient will be computed for it.
    pub fn leaf(&mut self, value: Tensor) -> Result<ValueId, NumericsError> {
        value.check_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Registers a parameter: a leaf that gradients are accumulated into.
    pub fn param(&mut self, value: Tensor) -> Result<ValueId, NumericsError> {
        value.check_finite("param")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Labels of all recorded ops, in execution order. Lets tests assert
    /// structural properties such as "this loss path never ran a softmax".
    pub fn op_labels(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.label()).collect()
    }

    pub fn conv1d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        dilation: usize,
    ) -> Result<ValueId, NumericsError> {
        let out = conv1d_dilated(self.value(x), self.value(w), self.value(b), dilation)?;
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(out, Op::Conv1d { x, w, b, dilation }, req))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let out = Tensor::from_vec(
            self.value(x).dims(),
            self.value(x).data().iter().map(|&v| sigmoid(v)).collect(),
        )?;
        out.check_finite("sigmoid")?;
        let req = self.requires(x);
        Ok(self.push(out, Op::Sigmoid { x }, req))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let out = Tensor::from_vec(
            self.value(x).dims(),
            self.value(x).data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        let req = self.requires(x);
        Ok(self.push(out, Op::Relu { x }, req))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.check_same_shape("add", a, b)?;
        let out = Tensor::from_vec(
            self.value(a).dims(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        out.check_finite("add")?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.check_same_shape("mul", a, b)?;
        let out = Tensor::from_vec(
            self.value(a).dims(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        out.check_finite("mul")?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul { a, b }, req))
    }

    /// Inverted dropout. In train mode each entry is zeroed with probability
    /// `rate` and survivors are rescaled by `1/(1-rate)`; in eval mode (or at
    /// rate 0) the input value is returned unchanged without recording a node.
    pub fn dropout(
        &mut self,
        x: ValueId,
        rate: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ValueId, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidArgument {
                op: "dropout",
                detail: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out = Tensor::from_vec(
            self.value(x).dims(),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m)
                .collect(),
        )?;
        out.check_finite("dropout")?;
        let req = self.requires(x);
        Ok(self.push(out, Op::Dropout { x, mask }, req))
    }

    /// Stacks 2-d tensors along the row axis; all parts must share columns.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "concat_rows",
                detail: "need at least one part".into(),
            });
        }
        let cols = self.value(parts[0]).dims()[1];
        let mut rows = 0;
        for &p in parts {
            let d = self.value(p).dims();
            if d.len() != 2 || d[1] != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("parts must be 2-d with {} columns, got {:?}", cols, d),
                });
            }
            rows += d[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[rows, cols], data)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    /// Adds a per-row vector `v` (shape `[c]` or `[c, 1]`) to every column of
    /// the 2-d tensor `x` (shape `[c, n]`).
    pub fn broadcast_add_col(&mut self, x: ValueId, v: ValueId) -> Result<ValueId, NumericsError> {
        let xd = self.value(x).dims().to_vec();
        let c = *self.value(v).dims().first().unwrap_or(&0);
        if xd.len() != 2 || self.value(v).len() != c || xd[0] != c {
            return Err(NumericsError::ShapeMismatch {
                op: "broadcast_add_col",
                detail: format!(
                    "x {:?} and v {:?} are not [c, n] plus [c]",
                    xd,
                    self.value(v).dims()
                ),
            });
        }
        let n = xd[1];
        let mut out = self.value(x).clone();
        for row in 0..c {
            let add = self.value(v).data()[row];
            for t in 0..n {
                out.data_mut()[row * n + t] += add;
            }
        }
        out.check_finite("broadcast_add_col")?;
        let req = self.requires(x) || self.requires(v);
        Ok(self.push(out, Op::BroadcastAddCol { x, v }, req))
    }

    /// Scalar dot product with a constant coefficient vector.
    pub fn weighted_sum(&mut self, x: ValueId, coeff: Vec<f64>) -> Result<ValueId, NumericsError> {
        if coeff.len() != self.value(x).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_sum",
                detail: format!(
                    "coeff has {} entries for {} values",
                    coeff.len(),
                    self.value(x).len()
                ),
            });
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(&coeff)
            .map(|(v, c)| v * c)
            .sum();
        let out = Tensor::from_vec(&[1], vec![s])?;
        out.check_finite("weighted_sum")?;
        let req = self.requires(x);
        Ok(self.push(out, Op::WeightedSum { x, coeff }, req))
    }

    /// Scalar weighted sum of squared errors: `sum_e coeff[e] * (pred[e] - target[e])^2`.
    pub fn weighted_sse(
        &mut self,
        pred: ValueId,
        target: Tensor,
        coeff: Vec<f64>,
    ) -> Result<ValueId, NumericsError> {
        if target.dims() != self.value(pred).dims() || coeff.len() != target.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_sse",
                detail: format!(
                    "pred {:?}, target {:?}, coeff len {}",
                    self.value(pred).dims(),
                    target.dims(),
                    coeff.len()
                ),
            });
        }
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(&coeff)
            .map(|((p, t), c)| c * (p - t) * (p - t))
            .sum();
        let out = Tensor::from_vec(&[1], vec![s])?;
        out.check_finite("weighted_sse")?;
        let req = self.requires(pred);
        Ok(self.push(
            out,
            Op::WeightedSse {
                pred,
                target,
                coeff,
            },
            req,
        ))
    }

    /// Scalar softmax cross-entropy over the columns of `[c, n]` logits:
    /// `sum_t frame_coeff[t] * (logsumexp(logits[:, t]) - logits[classes[t], t])`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        classes: &[usize],
        frame_coeff: Vec<f64>,
    ) -> Result<ValueId, NumericsError> {
        let dims = self.value(logits).dims().to_vec();
        if dims.len() != 2 || classes.len() != dims[1] || frame_coeff.len() != dims[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!(
                    "logits {:?} with {} classes and {} coeffs",
                    dims,
                    classes.len(),
                    frame_coeff.len()
                ),
            });
        }
        let (c, n) = (dims[0], dims[1]);
        if let Some(&bad) = classes.iter().find(|&&y| y >= c) {
            return Err(NumericsError::InvalidArgument {
                op: "softmax_cross_entropy",
                detail: format!("class {bad} out of range for {c} rows"),
            });
        }
        let zd = self.value(logits).data();
        let mut probs = vec![0.0; c * n];
        let mut loss = 0.0;
        for t in 0..n {
            let mut m = f64::NEG_INFINITY;
            for row in 0..c {
                m = m.max(zd[row * n + t]);
            }
            let mut denom = 0.0;
            for row in 0..c {
                let e = (zd[row * n + t] - m).exp();
                probs[row * n + t] = e;
                denom += e;
            }
            for row in 0..c {
                probs[row * n + t] /= denom;
            }
            let lse = m + denom.ln();
            loss += frame_coeff[t] * (lse - zd[classes[t] * n + t]);
        }
        let out = Tensor::from_vec(&[1], vec![loss])?;
        out.check_finite("softmax_cross_entropy")?;
        let req = self.requires(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                classes: classes.to_vec(),
                frame_coeff,
                probs,
            },
            req,
        ))
    }

    /// Scalar binary cross-entropy of `sigmoid(logits)` against heads in
    /// {0, 1}, with one weight per element. Uses the softplus form, which is
    /// stable in both tails.
    pub fn sigmoid_bce(
        &mut self,
        logits: ValueId,
        target: Tensor,
        coeff: Vec<f64>,
    ) -> Result<ValueId, NumericsError> {
        if target.dims() != self.value(logits).dims() || coeff.len() != target.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "sigmoid_bce",
                detail: format!(
                    "logits {:?}, target {:?}, coeff len {}",
                    self.value(logits).dims(),
                    target.dims(),
                    coeff.len()
                ),
            });
        }
        if let Some(bad) = target.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(NumericsError::InvalidArgument {
                op: "sigmoid_bce",
                detail: format!("targets must be 0 or 1, got {bad}"),
            });
        }
        let s: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .zip(&coeff)
            .map(|((&x, &y), c)| c * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()))
            .sum();
        let out = Tensor::from_vec(&[1], vec![s])?;
        out.check_finite("sigmoid_bce")?;
        let req = self.requires(logits);
        Ok(self.push(
            out,
            Op::SigmoidBce {
                logits,
                target,
                coeff,
            },
            req,
        ))
    }

    /// Sum of single-element tensors into one scalar.
    pub fn sum_scalars(&mut self, parts: &[ValueId]) -> Result<ValueId, NumericsError> {
        let mut s = 0.0;
        for &p in parts {
            s += self.value(p).scalar()?;
        }
        let out = Tensor::from_vec(&[1], vec![s])?;
        out.check_finite("sum_scalars")?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            out,
            Op::SumScalars {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    /// Reverse pass from a scalar root. Returns one gradient buffer per
    /// reachable value that depends on a parameter; every buffer has exactly
    /// the shape of the value it differentiates.
    pub fn backward(&self, root: ValueId) -> Result<Gradients, NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, dims are {:?}", self.value(root).dims()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(&[1], 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                debug_assert_eq!(g.dims(), self.nodes[i].value.dims());
                g.check_finite("backward")?;
            }
        }
        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, dilation } => {
                let (dx, dw, db) = conv1d_dilated_vjp(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *dilation,
                    self.requires(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, &dx);
                }
                if self.requires(*w) {
                    self.accumulate(grads, *w, &dw);
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Sigmoid { x } => {
                if self.requires(*x) {
                    let y = &node.value;
                    let dx = Tensor::from_fn(y.dims(), |e| {
                        let s = y.data()[e];
                        g.data()[e] * s * (1.0 - s)
                    });
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    let xin = self.value(*x);
                    let dx = Tensor::from_fn(xin.dims(), |e| {
                        if xin.data()[e] > 0.0 {
                            g.data()[e]
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, g);
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let bd = self.value(*b);
                    let da = Tensor::from_fn(bd.dims(), |e| g.data()[e] * bd.data()[e]);
                    self.accumulate(grads, *a, &da);
                }
                if self.requires(*b) {
                    let ad = self.value(*a);
                    let db = Tensor::from_fn(ad.dims(), |e| g.data()[e] * ad.data()[e]);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Dropout { x, mask } => {
                if self.requires(*x) {
                    let dx = Tensor::from_fn(node.value.dims(), |e| g.data()[e] * mask[e]);
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::ConcatRows { parts } => {
                let cols = node.value.dims()[1];
                let mut row0 = 0;
                for &p in parts {
                    let rows = self.value(p).dims()[0];
                    if self.requires(p) {
                        let slice = &g.data()[row0 * cols..(row0 + rows) * cols];
                        let dp = Tensor::from_vec(&[rows, cols], slice.to_vec())
                            .expect("slice length matches part shape");
                        self.accumulate(grads, p, &dp);
                    }
                    row0 += rows;
                }
            }
            Op::BroadcastAddCol { x, v } => {
                if self.requires(*x) {
                    self.accumulate(grads, *x, g);
                }
                if self.requires(*v) {
                    let (c, n) = (node.value.dims()[0], node.value.dims()[1]);
                    let dv = Tensor::from_fn(self.value(*v).dims(), |row| {
                        g.data()[row * n..(row + 1) * n].iter().sum()
                    });
                    debug_assert_eq!(dv.len(), c);
                    self.accumulate(grads, *v, &dv);
                }
            }
            Op::WeightedSum { x, coeff } => {
                if self.requires(*x) {
                    let gs = g.data()[0];
                    let dx = Tensor::from_fn(self.value(*x).dims(), |e| gs * coeff[e]);
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::WeightedSse {
                pred,
                target,
                coeff,
            } => {
                if self.requires(*pred) {
                    let gs = g.data()[0];
                    let pd = self.value(*pred);
                    let dp = Tensor::from_fn(pd.dims(), |e| {
                        gs * 2.0 * coeff[e] * (pd.data()[e] - target.data()[e])
                    });
                    self.accumulate(grads, *pred, &dp);
                }
            }
            Op::SoftmaxCe {
                logits,
                classes,
                frame_coeff,
                probs,
            } => {
                if self.requires(*logits) {
                    let gs = g.data()[0];
                    let dims = self.value(*logits).dims();
                    let n = dims[1];
                    let dz = Tensor::from_fn(dims, |e| {
                        let (row, t) = (e / n, e % n);
                        let ind = if classes[t] == row { 1.0 } else { 0.0 };
                        gs * frame_coeff[t] * (probs[e] - ind)
                    });
                    self.accumulate(grads, *logits, &dz);
                }
            }
            Op::SigmoidBce {
                logits,
                target,
                coeff,
            } => {
                if self.requires(*logits) {
                    let gs = g.data()[0];
                    let zd = self.value(*logits);
                    let dz = Tensor::from_fn(zd.dims(), |e| {
                        gs * coeff[e] * (sigmoid(zd.data()[e]) - target.data()[e])
                    });
                    self.accumulate(grads, *logits, &dz);
                }
            }
            Op::SumScalars { parts } => {
                for &p in parts {
                    if self.requires(p) {
                        self.accumulate(grads, p, g);
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: ValueId, contribution: &Tensor) {
        debug_assert_eq!(contribution.dims(), self.value(id).dims());
        match &mut grads[id.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution.clone()),
        }
    }

    fn requires(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_same_shape(
        &self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
    ) -> Result<(), NumericsError> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.value(a).dims(), self.value(b).dims()),
            });
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        ValueId(self.nodes.len() - 1)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
