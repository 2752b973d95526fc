//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape from the loss towards the first node, strictly in reverse record
//! order, accumulating gradients into nodes that require them.

use std::rc::Rc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Log-probability floor used by the KL op (`ln 1e-30`).
pub const LOG_FLOOR: f64 = -69.07755278982137;

/// Key visibility for the fused attention op.
///
/// `rows[i]` lists, for query `i`, the visible key indices in summation
/// order together with the relative-bias slot each score reads.
#[derive(Debug, Clone, Default)]
pub struct AttnMask {
    pub rows: Vec<Vec<(usize, usize)>>,
    /// Bias slots per head (the bias tensor is `[heads, n_bias]`).
    pub n_bias: usize,
}

impl AttnMask {
    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        self.rows[query].iter().any(|&(k, _)| k == key)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    /// Loss ops cache d(loss)/d(input) at forward time.
    CrossEntropy {
        logits: Var,
        dlogits: Tensor,
    },
    KlDivergence {
        p: Var,
        q: Var,
        dp: Tensor,
        dq: Option<Tensor>,
    },
    Transducer {
        log_probs: Var,
        dlog_probs: Tensor,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    OuterAdd {
        a: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttnMask>,
        bias: Option<Var>,
        weights: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    Lerp {
        a: Var,
        b: Var,
        lam: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    backward_trace: Vec<usize>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Node indices visited by the last `backward`, in visit order.
    pub fn backward_trace(&self) -> &[usize] {
        &self.backward_trace
    }

    /// Copy of `v` cut from the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ----- affine / elementwise -------------------------------------------------

    /// `y = x Wᵀ (+ b)` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        if ws.rank() != 2 || xs.cols() != ws.shape()[1] {
            return Err(Error::dims("linear", xs.shape(), ws.shape()));
        }
        let d_out = ws.shape()[0];
        if let Some(b) = b {
            if self.value(b).len() != d_out {
                return Err(Error::dims("linear bias", ws.shape(), self.shape(b)));
            }
        }
        let rows = xs.rows();
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let mut out = Tensor::zeros(&shape);
        let bias = b.map(|b| self.value(b).data());
        for r in 0..rows {
            kernels::affine_row(xs.row(r), ws.data(), bias, out.row_mut(r));
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.map(a, kernels::silu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dims("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.shape());
        let mut stats = Vec::with_capacity(xv.rows());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..xv.rows() {
            stats.push(kernels::layer_norm_row(xv.row(r), g, b, out.row_mut(r)));
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    fn check_finite(&self, v: Var, op: &'static str) -> Result<()> {
        if !self.value(v).all_finite() {
            return Err(Error::Numeric(op));
        }
        Ok(())
    }

    pub fn log_softmax(&mut self, z: Var) -> Result<Var> {
        self.check_finite(z, "log_softmax")?;
        let zv = self.value(z);
        let mut out = Tensor::zeros(zv.shape());
        for r in 0..zv.rows() {
            kernels::log_softmax_row(zv.row(r), out.row_mut(r));
        }
        let rg = self.rg(&[z]);
        Ok(self.push(out, Op::LogSoftmax(z), rg))
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        self.check_finite(z, "softmax")?;
        let zv = self.value(z);
        let mut out = Tensor::zeros(zv.shape());
        for r in 0..zv.rows() {
            kernels::softmax_row(zv.row(r), out.row_mut(r));
        }
        let rg = self.rg(&[z]);
        Ok(self.push(out, Op::Softmax(z), rg))
    }

    // ----- losses ---------------------------------------------------------------

    /// Mean over rows of `-log_softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_finite(logits, "cross_entropy")?;
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::dims("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                len: v,
            });
        }
        let mut dlogits = Tensor::zeros(lv.shape());
        let mut ls = vec![0.0; v];
        let mut total = 0.0;
        let n = rows as f64;
        for (r, &t) in targets.iter().enumerate() {
            kernels::log_softmax_row(lv.row(r), &mut ls);
            total -= ls[t];
            let d = dlogits.row_mut(r);
            for (di, &l) in d.iter_mut().zip(&ls) {
                *di = l.exp() / n;
            }
            d[t] -= 1.0 / n;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy { logits, dlogits },
            rg,
        ))
    }

    /// `Σ_rows Σ_v p (log p − log q)` for row-wise log-distributions.
    ///
    /// With `detach_q` the second argument is treated as a fixed target and
    /// receives no gradient.
    pub fn kl_divergence(&mut self, p_log: Var, q_log: Var, detach_q: bool) -> Result<Var> {
        self.check_same("kl_divergence", p_log, q_log)?;
        let pv = self.value(p_log);
        let qv = self.value(q_log);
        let mut dp = Tensor::zeros(pv.shape());
        let mut dq = Tensor::zeros(pv.shape());
        let mut total = 0.0;
        for i in 0..pv.len() {
            let lp_raw = pv.data()[i];
            let lq_raw = qv.data()[i];
            let lp = lp_raw.max(LOG_FLOOR);
            let lq = lq_raw.max(LOG_FLOOR);
            let p = lp.exp();
            total += p * (lp - lq);
            if lp_raw > LOG_FLOOR {
                dp.data_mut()[i] = p * (lp - lq + 1.0);
            }
            if lq_raw > LOG_FLOOR {
                dq.data_mut()[i] = -p;
            }
        }
        if !total.is_finite() {
            return Err(Error::Numeric("kl_divergence"));
        }
        let rg = if detach_q {
            self.rg(&[p_log])
        } else {
            self.rg(&[p_log, q_log])
        };
        Ok(self.push(
            Tensor::scalar(total),
            Op::KlDivergence {
                p: p_log,
                q: q_log,
                dp,
                dq: (!detach_q).then_some(dq),
            },
            rg,
        ))
    }

    /// Negative log-likelihood of `targets` under a transducer lattice.
    ///
    /// `log_probs` is `[frames * (targets.len() + 1), vocab]`, row `t * (U+1) + u`
    /// holding the output distribution at frame `t` with `u` labels emitted.
    /// Blank is index 0. Summed over all monotone alignments by
    /// forward-backward in log space.
    pub fn transducer_loss(&mut self, log_probs: Var, frames: usize, targets: &[usize]) -> Result<Var> {
        let lp = self.value(log_probs);
        let u1 = targets.len() + 1;
        if lp.rank() != 2 || lp.rows() != frames * u1 {
            return Err(Error::dims("transducer_loss", lp.shape(), &[frames, u1]));
        }
        let vocab = lp.cols();
        if let Some(&bad) = targets.iter().find(|&&y| y == 0 || y >= vocab) {
            return Err(Error::Index {
                what: "transducer target",
                index: bad,
                len: vocab,
            });
        }
        let (nll, dlog_probs) = transducer_forward_backward(lp, frames, targets);
        if !nll.is_finite() {
            return Err(Error::Numeric("transducer_loss"));
        }
        let rg = self.rg(&[log_probs]);
        Ok(self.push(
            Tensor::scalar(nll),
            Op::Transducer {
                log_probs,
                dlog_probs,
            },
            rg,
        ))
    }

    // ----- structural -----------------------------------------------------------

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(Error::dims("concat_cols", self.shape(parts[0]), self.shape(*p)));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if let Some(p) = parts.iter().find(|p| self.value(**p).cols() != cols) {
            return Err(Error::dims("concat_rows", self.shape(parts[0]), self.shape(*p)));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::dims("slice_cols", xv.shape(), &[start, len]));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Row `i * B + j` of the result is `a[i] + b[j]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(Error::dims("outer_add", av.shape(), bv.shape()));
        }
        let (na, nb, d) = (av.rows(), bv.rows(), av.cols());
        let mut data = Vec::with_capacity(na * nb * d);
        for i in 0..na {
            for j in 0..nb {
                data.extend(av.row(i).iter().zip(bv.row(j)).map(|(x, y)| x + y));
            }
        }
        let out = Tensor::new(vec![na * nb, d], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::OuterAdd { a, b }, rg))
    }

    /// Multi-head scaled dot-product attention with an explicit visibility
    /// list per query and an optional additive bias table `[heads, n_bias]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Rc<AttnMask>,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() || d % heads != 0 {
            return Err(Error::dims("attention", qv.shape(), kv.shape()));
        }
        if mask.rows.len() != qv.rows() {
            return Err(Error::dims("attention mask", qv.shape(), &[mask.rows.len()]));
        }
        if let Some(b) = bias {
            if self.value(b).len() != heads * mask.n_bias {
                return Err(Error::dims("attention bias", self.shape(b), &[heads, mask.n_bias]));
            }
        }
        let nk = kv.rows();
        for row in &mask.rows {
            if row.is_empty() {
                return Err(Error::contract("attention query with no visible key"));
            }
            if let Some(&(bad, _)) = row.iter().find(|(key, _)| *key >= nk) {
                return Err(Error::Index {
                    what: "attention key",
                    index: bad,
                    len: nk,
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias_data = bias.map(|b| self.value(b).data());
        let mut out = Tensor::zeros(&[qv.rows(), d]);
        let mut weights = Vec::new();
        let mut keys: Vec<&[f64]> = Vec::new();
        let mut vals: Vec<&[f64]> = Vec::new();
        let mut bvals = Vec::new();
        for (i, row) in mask.rows.iter().enumerate() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                keys.clear();
                vals.clear();
                bvals.clear();
                for &(key, slot) in row {
                    keys.push(&kv.row(key)[cols.clone()]);
                    vals.push(&vv.row(key)[cols.clone()]);
                    bvals.push(bias_data.map_or(0.0, |b| b[h * mask.n_bias + slot]));
                }
                let start = weights.len();
                weights.resize(start + row.len(), 0.0);
                kernels::attend_head(
                    &qv.row(i)[cols.clone()],
                    &keys,
                    &vals,
                    &bvals,
                    scale,
                    &mut weights[start..],
                    &mut out.row_mut(i)[cols],
                );
            }
        }
        let mut inputs = vec![q, k, v];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                bias,
                weights,
            },
            rg,
        ))
    }

    // ----- reductions / scalar combinators --------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `Σ cᵢ sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::dims("weighted_sum", self.shape(v), &[1]));
            }
            total += c * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// `lam · a + (1 − lam) · b` with a scalar `lam`.
    pub fn lerp(&mut self, a: Var, b: Var, lam: Var) -> Result<Var> {
        self.check_same("lerp", a, b)?;
        if self.value(lam).len() != 1 {
            return Err(Error::dims("lerp weight", self.shape(lam), &[1]));
        }
        let l = self.value(lam).item();
        let out = self.zip_map(a, b, |x, y| l * x + (1.0 - l) * y);
        let rg = self.rg(&[a, b, lam]);
        Ok(self.push(out, Op::Lerp { a, b, lam }, rg))
    }

    // ----- backward -------------------------------------------------------------

    /// Populate gradients of `loss` with respect to every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward called twice on the same graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_trace.clear();
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            self.backward_trace.push(idx);
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &gout);
            self.nodes[idx].grad = Some(gout);
        }
        // leaves that require grad but were not reached get zeros
        for n in &mut self.nodes {
            if n.requires_grad && n.grad.is_none() && matches!(n.op, Op::Leaf) {
                n.grad = Some(Tensor::zeros(n.value.shape()));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => add_into(g.data_mut(), delta),
            None => {
                let mut g = Tensor::zeros(node.value.shape());
                g.data_mut().copy_from_slice(delta);
                node.grad = Some(g);
            }
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut g = self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(g.data_mut(), &self.nodes);
        self.nodes[v.0].grad = Some(g);
    }

    fn propagate(&mut self, idx: usize, gout: &Tensor) {
        // Temporarily take the op so its cached data can be read while
        // accumulating into other nodes.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let gy = gout.data();
        match &op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let d_out = self.value(w).shape()[0];
                let d_in = self.value(w).shape()[1];
                let rows = self.value(x).rows();
                self.accumulate_with(x, |gx, nodes| {
                    let wv = nodes[w.0].value.data();
                    for r in 0..rows {
                        let gyr = &gy[r * d_out..(r + 1) * d_out];
                        let gxr = &mut gx[r * d_in..(r + 1) * d_in];
                        for (o, &g) in gyr.iter().enumerate() {
                            if g != 0.0 {
                                for (gxi, wi) in gxr.iter_mut().zip(&wv[o * d_in..(o + 1) * d_in]) {
                                    *gxi += g * wi;
                                }
                            }
                        }
                    }
                });
                self.accumulate_with(w, |gw, nodes| {
                    let xv = nodes[x.0].value.data();
                    for r in 0..rows {
                        let xr = &xv[r * d_in..(r + 1) * d_in];
                        for o in 0..d_out {
                            let g = gy[r * d_out + o];
                            if g != 0.0 {
                                for (gwi, xi) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(xr) {
                                    *gwi += g * xi;
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate_with(b, |gb, _| {
                        for r in 0..rows {
                            add_into(gb, &gy[r * d_out..(r + 1) * d_out]);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, gy);
                self.accumulate(*b, gy);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, gy);
                let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga: Vec<f64> = gy.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gy.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = gy.iter().map(|g| g * c).collect();
                self.accumulate(*a, &d);
            }
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.data();
                let d: Vec<f64> = gy.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(*a, &d);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let d: Vec<f64> = gy.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(*a, &d);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = gy
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.value(x).cols();
                let rows = self.value(x).rows();
                let xv = self.value(x).data().to_vec();
                let gv = self.value(gamma).data().to_vec();
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    let xr = &xv[r * d..(r + 1) * d];
                    let gyr = &gy[r * d..(r + 1) * d];
                    for i in 0..d {
                        xhat[i] = (xr[i] - mean) * rstd;
                        dxhat[i] = gyr[i] * gv[i];
                        gg[i] += gyr[i] * xhat[i];
                        gb[i] += gyr[i];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        gx[r * d + i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(gamma, &gg);
                self.accumulate(beta, &gb);
            }
            Op::LogSoftmax(z) => {
                let y = &self.nodes[idx].value;
                let c = y.cols();
                let mut gz = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let s: f64 = gy[r * c..(r + 1) * c].iter().sum();
                    for i in 0..c {
                        gz[r * c + i] = gy[r * c + i] - y.row(r)[i].exp() * s;
                    }
                }
                self.accumulate(*z, &gz);
            }
            Op::Softmax(z) => {
                let y = &self.nodes[idx].value;
                let c = y.cols();
                let mut gz = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let s: f64 = gy[r * c..(r + 1) * c].iter().zip(yr).map(|(g, p)| g * p).sum();
                    for i in 0..c {
                        gz[r * c + i] = yr[i] * (gy[r * c + i] - s);
                    }
                }
                self.accumulate(*z, &gz);
            }
            Op::CrossEntropy { logits, dlogits } => {
                let d: Vec<f64> = dlogits.data().iter().map(|v| v * gy[0]).collect();
                self.accumulate(*logits, &d);
            }
            Op::KlDivergence { p, q, dp, dq } => {
                let d: Vec<f64> = dp.data().iter().map(|v| v * gy[0]).collect();
                self.accumulate(*p, &d);
                if let Some(dq) = dq {
                    let d: Vec<f64> = dq.data().iter().map(|v| v * gy[0]).collect();
                    self.accumulate(*q, &d);
                }
            }
            Op::Transducer {
                log_probs,
                dlog_probs,
            } => {
                let d: Vec<f64> = dlog_probs.data().iter().map(|v| v * gy[0]).collect();
                self.accumulate(*log_probs, &d);
            }
            Op::GatherRows { x, idx: rows } => {
                let c = self.value(*x).cols();
                self.accumulate_with(*x, |gx, _| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &gy[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = gout.cols();
                let rows = gout.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut d = vec![0.0; rows * c];
                    for r in 0..rows {
                        d[r * c..(r + 1) * c]
                            .copy_from_slice(&gy[r * total + offset..r * total + offset + c]);
                    }
                    self.accumulate(p, &d);
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(p, &gy[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let x = *x;
                let len = gout.cols();
                let c = self.value(x).cols();
                let rows = gout.rows();
                let start = *start;
                self.accumulate_with(x, |gx, _| {
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * c + start..r * c + start + len],
                            &gy[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::OuterAdd { a, b } => {
                let (a, b) = (*a, *b);
                let (na, nb) = (self.value(a).rows(), self.value(b).rows());
                let d = gout.cols();
                let mut ga = vec![0.0; na * d];
                let mut gb = vec![0.0; nb * d];
                for i in 0..na {
                    for j in 0..nb {
                        let r = &gy[(i * nb + j) * d..(i * nb + j + 1) * d];
                        add_into(&mut ga[i * d..(i + 1) * d], r);
                        add_into(&mut gb[j * d..(j + 1) * d], r);
                    }
                }
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                bias,
                weights,
            } => {
                self.attention_backward(*q, *k, *v, *heads, mask, *bias, weights, gy);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(*a, &vec![gy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(*a, &vec![gy[0] / n as f64; n]);
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(v, &[gy[0] * c]);
                }
            }
            Op::Lerp { a, b, lam } => {
                let (a, b, lam) = (*a, *b, *lam);
                let l = self.value(lam).item();
                let ga: Vec<f64> = gy.iter().map(|g| g * l).collect();
                let gb: Vec<f64> = gy.iter().map(|g| g * (1.0 - l)).collect();
                let gl: f64 = gy
                    .iter()
                    .zip(self.value(a).data().iter().zip(self.value(b).data()))
                    .map(|(g, (x, y))| g * (x - y))
                    .sum();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
                self.accumulate(lam, &[gl]);
            }
        }
        self.nodes[idx].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
        bias: Option<Var>,
        weights: &[f64],
        gy: &[f64],
    ) {
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut gb = vec![0.0; heads * mask.n_bias];
        let mut dw = Vec::new();
        let mut w_off = 0;
        for (i, row) in mask.rows.iter().enumerate() {
            for h in 0..heads {
                let c0 = h * dh;
                let w = &weights[w_off..w_off + row.len()];
                w_off += row.len();
                let go = &gy[i * d + c0..i * d + c0 + dh];
                dw.clear();
                for (j, &(key, _)) in row.iter().enumerate() {
                    let vrow = &vv[key * d + c0..key * d + c0 + dh];
                    dw.push(kernels::dot(go, vrow));
                    for (g, o) in gv[key * d + c0..key * d + c0 + dh].iter_mut().zip(go) {
                        *g += w[j] * o;
                    }
                }
                let s: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                for (j, &(key, slot)) in row.iter().enumerate() {
                    let ds = w[j] * (dw[j] - s);
                    if ds == 0.0 {
                        continue;
                    }
                    gb[h * mask.n_bias + slot] += ds;
                    let f = ds * scale;
                    for t in 0..dh {
                        gq[i * d + c0 + t] += f * kv[key * d + c0 + t];
                        gk[key * d + c0 + t] += f * qv[i * d + c0 + t];
                    }
                }
            }
        }
        self.accumulate(q, &gq);
        self.accumulate(k, &gk);
        self.accumulate(v, &gv);
        if let Some(b) = bias {
            self.accumulate(b, &gb);
        }
    }
}

/// Forward-backward over a transducer lattice. Returns the negative
/// log-likelihood and its gradient with respect to every lattice entry.
pub fn transducer_forward_backward(lp: &Tensor, frames: usize, targets: &[usize]) -> (f64, Tensor) {
    let u1 = targets.len() + 1;
    let at = |t: usize, u: usize, k: usize| lp.row(t * u1 + u)[k];
    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * u1];
    for t in 0..frames {
        for u in 0..u1 {
            let a = if t == 0 && u == 0 {
                0.0
            } else {
                let from_blank = if t > 0 {
                    alpha[(t - 1) * u1 + u] + at(t - 1, u, 0)
                } else {
                    ninf
                };
                let from_emit = if u > 0 {
                    alpha[t * u1 + u - 1] + at(t, u - 1, targets[u - 1])
                } else {
                    ninf
                };
                kernels::log_add_exp(from_blank, from_emit)
            };
            alpha[t * u1 + u] = a;
        }
    }
    let mut beta = vec![ninf; frames * u1];
    for t in (0..frames).rev() {
        for u in (0..u1).rev() {
            let b = if t == frames - 1 && u == u1 - 1 {
                at(t, u, 0)
            } else {
                let via_blank = if t + 1 < frames {
                    beta[(t + 1) * u1 + u] + at(t, u, 0)
                } else {
                    ninf
                };
                let via_emit = if u + 1 < u1 {
                    beta[t * u1 + u + 1] + at(t, u, targets[u])
                } else {
                    ninf
                };
                kernels::log_add_exp(via_blank, via_emit)
            };
            beta[t * u1 + u] = b;
        }
    }
    let log_like = beta[0];
    let mut grad = Tensor::zeros(lp.shape());
    for t in 0..frames {
        for u in 0..u1 {
            let a = alpha[t * u1 + u];
            let row = grad.row_mut(t * u1 + u);
            let next_blank = if t == frames - 1 && u == u1 - 1 {
                0.0
            } else if t + 1 < frames {
                beta[(t + 1) * u1 + u]
            } else {
                ninf
            };
            row[0] = -(a + at(t, u, 0) + next_blank - log_like).exp();
            if u + 1 < u1 {
                let y = targets[u];
                row[y] = -(a + at(t, u, y) + beta[t * u1 + u + 1] - log_like).exp();
            }
        }
    }
    (-log_like, grad)
}
