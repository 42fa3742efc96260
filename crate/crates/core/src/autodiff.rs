//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive as it is evaluated. [`Tape::backward`]
//! replays the record in reverse and returns gradients for every node that
//! was marked as requiring one. The primitive set is deliberately small: the
//! affine map, a handful of elementwise nonlinearities, same-shape arithmetic,
//! column slicing, row/total sums, and the discretized-logistic log-mass.
//!
//! A tape is single-use: once `backward` has run, further calls fail.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    RowSum(Var),
    SumAll(Var),
    Bernoulli {
        logits: Var,
        // d(out)/d(logits), computed in the forward pass.
        d_logits: Vec<f32>,
    },
    DiscLogistic {
        mean: Var,
        log_scale: Var,
        // d(out)/d(mean) and d(out)/d(log_scale), computed in the forward pass.
        d_mean: Vec<f32>,
        d_log_scale: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of evaluated primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `var`, or `None` if `var` does not
    /// require a gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Moves the gradient out; leaves `None` behind.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `out[b,o] = Σ_i x[b,i]·w[i,o] + bias[o]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.rank() != 2 {
            return Err(Error::shape(
                "affine",
                format!("weight must be rank 2, got {:?}", wv.shape()),
            ));
        }
        let (rows, inner) = (xv.rows(), xv.cols());
        let (w_in, w_out) = (wv.shape()[0], wv.shape()[1]);
        if inner != w_in {
            return Err(Error::shape(
                "affine",
                format!("input {:?} · weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        if bv.len() != w_out {
            return Err(Error::shape(
                "affine",
                format!("bias {:?} for {w_out} outputs", bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(rows * w_out);
        for _ in 0..rows {
            out.extend_from_slice(bv.data());
        }
        gemm(
            rows,
            inner,
            w_out,
            xv.data(),
            (inner as isize, 1),
            wv.data(),
            (w_out as isize, 1),
            &mut out,
            1.0,
        );
        let value = Tensor::matrix(rows, w_out, out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Op::Affine { x, w, b }, value, rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(op, value, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f32::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self
            .value(x)
            .data()
            .iter()
            .find(|&&v| v <= 0.0 || v.is_nan())
        {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, Op::Log(x), f32::ln))
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        debug_assert!(lo <= hi);
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if start >= end || end > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {cols} columns"),
            ));
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let value = Tensor::matrix(rows, end - start, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SliceCols { x, start }, value, rg))
    }

    /// Sums each row of a matrix, giving a vector with one entry per row.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data: Vec<f32> = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let value = Tensor::vector(data).expect("non-empty");
        let rg = self.rg(&[x]);
        self.push(Op::RowSum(x), value, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::SumAll(x), value, rg)
    }

    /// Elementwise `log p(x)` of binary targets under Bernoulli logits
    /// clamped to `[-bound, bound]`: `x·l − softplus(l)`. The gradient is zero
    /// where the clamp is active.
    pub fn bernoulli_log_prob(&mut self, logits: Var, targets: &[u8], bound: f32) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(Error::shape(
                "bernoulli_log_prob",
                format!("logits {:?}, {} targets", lv.shape(), targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t > 1) {
            return Err(Error::Domain(format!("binary target {bad}")));
        }
        let n = targets.len();
        let mut out = Vec::with_capacity(n);
        let mut d_logits = Vec::with_capacity(n);
        for (&raw, &t) in lv.data().iter().zip(targets) {
            let l = raw.clamp(-bound, bound);
            let e = (-l.abs()).exp();
            let sp = l.max(0.0) + e.ln_1p();
            let sig = if l >= 0.0 {
                1.0 / (1.0 + e)
            } else {
                e / (1.0 + e)
            };
            let x = t as f32;
            out.push(x * l - sp);
            d_logits.push(if raw.abs() <= bound { x - sig } else { 0.0 });
        }
        let value = Tensor::new(lv.shape().to_vec(), out)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(Op::Bernoulli { logits, d_logits }, value, rg))
    }

    /// Elementwise log-mass of integer levels `0..=255` under a logistic
    /// distribution discretized into unit bins on the `[0, 1]`-scaled axis.
    ///
    /// Bin `k` spans `[(k - 0.5)/255, (k + 0.5)/255]`; the edge bins extend to
    /// ±∞ so the 256 masses sum to one.
    pub fn disc_logistic(&mut self, mean: Var, log_scale: Var, levels: &[u8]) -> Result<Var> {
        let (mv, sv) = (self.value(mean), self.value(log_scale));
        if !mv.same_shape(sv) || mv.len() != levels.len() {
            return Err(Error::shape(
                "disc_logistic",
                format!(
                    "mean {:?}, log_scale {:?}, {} levels",
                    mv.shape(),
                    sv.shape(),
                    levels.len()
                ),
            ));
        }
        let n = levels.len();
        let mut out = Vec::with_capacity(n);
        let mut d_mean = Vec::with_capacity(n);
        let mut d_log_scale = Vec::with_capacity(n);
        for ((&level, &m), &ls) in levels.iter().zip(mv.data()).zip(sv.data()) {
            let (lp, dm, ds) = disc_logistic_point(level, m as f64, ls as f64);
            out.push(lp as f32);
            d_mean.push(dm as f32);
            d_log_scale.push(ds as f32);
        }
        let value = Tensor::new(mv.shape().to_vec(), out)?;
        let rg = self.rg(&[mean, log_scale]);
        Ok(self.push(
            Op::DiscLogistic {
                mean,
                log_scale,
                d_mean,
                d_log_scale,
            },
            value,
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    ///
    /// Every node that requires a gradient gets one in the result, zero if the
    /// output does not depend on it.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            } else if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, inner, outs) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if self.requires_grad(*x) {
                    // dx = g · wᵀ
                    let mut dx = vec![0.0f32; rows * inner];
                    gemm(
                        rows,
                        outs,
                        inner,
                        g.data(),
                        (outs as isize, 1),
                        wv.data(),
                        (1, outs as isize),
                        &mut dx,
                        0.0,
                    );
                    accumulate(grads, *x, xv, dx);
                }
                if self.requires_grad(*w) {
                    // dw = xᵀ · g
                    let mut dw = vec![0.0f32; inner * outs];
                    gemm(
                        inner,
                        rows,
                        outs,
                        xv.data(),
                        (1, inner as isize),
                        g.data(),
                        (outs as isize, 1),
                        &mut dw,
                        0.0,
                    );
                    accumulate(grads, *w, wv, dw);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0f32; outs];
                    for r in 0..rows {
                        for (acc, v) in db.iter_mut().zip(g.row(r)) {
                            *acc += *v;
                        }
                    }
                    accumulate(grads, *b, self.value(*b), db);
                }
            }
            Op::Tanh(x) => {
                let d = zip_map(g, y, |g, y| g * (1.0 - y * y));
                accumulate(grads, *x, self.value(*x), d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(g, y, |g, y| g * y * (1.0 - y));
                accumulate(grads, *x, self.value(*x), d);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let d = zip_map(g, xv, |g, x| g * sigmoid(x));
                accumulate(grads, *x, xv, d);
            }
            Op::Exp(x) => {
                let d = zip_map(g, y, |g, y| g * y);
                accumulate(grads, *x, self.value(*x), d);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let d = zip_map(g, xv, |g, x| g / x);
                accumulate(grads, *x, xv, d);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let d = zip_map(g, xv, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 });
                accumulate(grads, *x, xv, d);
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g, g.data().to_vec());
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g, g.data().to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g, g.data().to_vec());
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g, g.data().iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    accumulate(grads, *a, av, zip_map(g, bv, |g, b| g * b));
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, bv, zip_map(g, av, |g, a| g * a));
                }
            }
            Op::Scale(x, c) => {
                let d = g.data().iter().map(|v| v * c).collect();
                accumulate(grads, *x, self.value(*x), d);
            }
            Op::AddScalar(x) => {
                accumulate(grads, *x, self.value(*x), g.data().to_vec());
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols, width) = (xv.rows(), xv.cols(), g.cols());
                let mut d = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, xv, d);
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let d = (0..xv.len()).map(|k| g.data()[k / cols]).collect();
                accumulate(grads, *x, xv, d);
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv, vec![g.item(); xv.len()]);
            }
            Op::Bernoulli { logits, d_logits } => {
                let d = g.data().iter().zip(d_logits).map(|(g, d)| g * d).collect();
                accumulate(grads, *logits, self.value(*logits), d);
            }
            Op::DiscLogistic {
                mean,
                log_scale,
                d_mean,
                d_log_scale,
            } => {
                if self.requires_grad(*mean) {
                    let d = g.data().iter().zip(d_mean).map(|(g, d)| g * d).collect();
                    accumulate(grads, *mean, self.value(*mean), d);
                }
                if self.requires_grad(*log_scale) {
                    let d = g
                        .data()
                        .iter()
                        .zip(d_log_scale)
                        .map(|(g, d)| g * d)
                        .collect();
                    accumulate(grads, *log_scale, self.value(*log_scale), d);
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

fn accumulate(grads: &mut [Option<Tensor>], target: Var, like: &Tensor, data: Vec<f32>) {
    let incoming = Tensor::new(like.shape().to_vec(), data).expect("gradient shape matches value");
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&incoming),
        slot @ None => *slot = Some(incoming),
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Half-width of one intensity bin on the `[0, 1]` axis.
pub const LOGISTIC_HALF_BIN: f64 = 0.5 / 255.0;

/// Log-mass of `level` and its partial derivatives w.r.t. `mean` and
/// `log_scale`, all in `f64`.
pub fn disc_logistic_point(level: u8, mean: f64, log_scale: f64) -> (f64, f64, f64) {
    let inv_s = (-log_scale).exp();
    let centre = level as f64 / 255.0;
    let u = (centre + LOGISTIC_HALF_BIN - mean) * inv_s;
    let l = (centre - LOGISTIC_HALF_BIN - mean) * inv_s;
    let (lp, df_du, df_dl) = match level {
        0 => (-softplus64(-u), sigmoid64(-u), 0.0),
        255 => (-softplus64(l), 0.0, -sigmoid64(l)),
        _ => {
            // σ(u) − σ(l) = σ(u)·σ(−l)·(1 − e^{−(u−l)})
            let d = u - l;
            let gap = 1.0 / d.exp_m1();
            (
                -softplus64(-u) - softplus64(l) + (-(-d).exp_m1()).ln(),
                sigmoid64(-u) + gap,
                -sigmoid64(l) - gap,
            )
        }
    };
    let d_mean = -(df_du + df_dl) * inv_s;
    let d_log_scale = -(u * df_du + l * df_dl);
    (lp, d_mean, d_log_scale)
}
