//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation in evaluation order. Parameters are
//! referenced from a [`ParamStore`] rather than copied; constants never
//! receive gradients. [`Graph::backward`] walks the tape in reverse and
//! returns gradients keyed by [`ParamId`].
//!
//! Token sequences are batched as stacked rows: a batch of `B` sequences of
//! length `T` is a `(B·T) × width` tensor, and attention operates on
//! consecutive blocks of `T` rows.

use crate::error::{Error, Result};
use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_tn_acc, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddTiled {
        x: Var,
        tile: Var,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Normalised input and per-row reciprocal std.
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Attention {
        qkv: Var,
        seq_len: usize,
        heads: usize,
        key_valid: Option<Vec<bool>>,
        /// Softmax weights, laid out `[seq][head][query][key]`.
        probs: Vec<T>,
    },
    SelectRows {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Transpose {
        x: Var,
    },
    InvTemperature {
        x: Var,
        log_tau: Var,
        tau: T,
        clamped: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    DotConst {
        x: Var,
        c: Tensor<T>,
    },
    BlockLeftMul {
        u: Tensor<T>,
        x: Var,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to parameters.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, zero-filled when the parameter was unused.
    pub fn get_or_zeros(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = store.get(id).shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
}

const LN_EPS: f64 = 1e-5;

impl<'s, T: Scalar> Graph<'s, T> {
    /// A graph whose parameters receive gradients.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            track_params: true,
        }
    }

    /// A graph where parameters are treated as constants (inference, frozen probes).
    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Self {
            track_params: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `x · w (+ b)` with `w: in × out` and `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.rows(), "linear input width");
        let mut y = matmul(xv, wv);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, wv.cols()), "linear bias shape");
            let bias = bv.data().to_vec();
            for r in 0..y.rows() {
                for (o, &bb) in y.row_mut(r).iter_mut().zip(&bias) {
                    *o += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(y, Op::Linear { x, w, b }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = matmul(self.value(a), self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::MatMul { a, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        assert_eq!(y.shape(), self.shape(b), "add shapes");
        y.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::Add { a, b }, needs)
    }

    /// Adds `tile` to every block of `tile.rows()` consecutive rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Var {
        let tv = self.value(tile);
        let mut y = self.value(x).clone();
        assert_eq!(y.cols(), tv.cols(), "add_tiled width");
        assert!(
            tv.rows() > 0 && y.rows().is_multiple_of(tv.rows()),
            "add_tiled rows {} not a multiple of {}",
            y.rows(),
            tv.rows()
        );
        for r in 0..y.rows() {
            let t = tv.row(r % tv.rows());
            for (o, &v) in y.row_mut(r).iter_mut().zip(t) {
                *o += v;
            }
        }
        let needs = self.needs(x) || self.needs(tile);
        self.push(y, Op::AddTiled { x, tile }, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| gelu(v).0);
        let needs = self.needs(x);
        self.push(y, Op::Gelu { x }, needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        assert_eq!(gv.len(), d, "layer_norm gamma width");
        let eps = T::of(LN_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = Tensor::zeros(n, d);
        let mut rstd = vec![T::zero(); n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut y = xhat.clone();
        for r in 0..n {
            for ((o, &g), &b) in y.row_mut(r).iter_mut().zip(&gv).zip(&bv) {
                *o = *o * g + b;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Multi-head self-attention over consecutive blocks of `seq_len` rows.
    ///
    /// `qkv` is `(B·seq_len) × 3W` holding queries, keys and values side by
    /// side. Keys with `key_valid[row] == false` are excluded from the softmax
    /// entirely, so rows at those positions never influence valid rows.
    pub fn attention(
        &mut self,
        qkv: Var,
        seq_len: usize,
        heads: usize,
        key_valid: Option<Vec<bool>>,
    ) -> Var {
        let qv = self.value(qkv);
        let (rows, c3) = qv.shape();
        assert!(c3 % 3 == 0 && (c3 / 3) % heads == 0, "attention width");
        assert!(seq_len > 0 && rows % seq_len == 0, "attention sequence layout");
        if let Some(kv) = &key_valid {
            assert_eq!(kv.len(), rows, "key mask length");
        }
        let width = c3 / 3;
        let dh = width / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let nseq = rows / seq_len;
        let block = heads * seq_len * seq_len;
        let mut probs = vec![T::zero(); nseq * block];
        let mut out = Tensor::zeros(rows, width);
        {
            let kvalid = key_valid.as_deref();
            let q = qv.data();
            let per_seq: Vec<(Vec<T>, Vec<T>)> = par::map_range(nseq, |s| {
                let base = s * seq_len;
                let mut p = vec![T::zero(); block];
                let mut o = vec![T::zero(); seq_len * width];
                let mut scores = vec![T::zero(); seq_len];
                for h in 0..heads {
                    let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
                    for i in 0..seq_len {
                        let qi = &q[(base + i) * c3 + qo..(base + i) * c3 + qo + dh];
                        let mut max = T::neg_infinity();
                        for j in 0..seq_len {
                            if kvalid.is_some_and(|m| !m[base + j]) {
                                continue;
                            }
                            let kj = &q[(base + j) * c3 + ko..(base + j) * c3 + ko + dh];
                            let sc = dot(qi, kj) * scale;
                            scores[j] = sc;
                            if sc > max {
                                max = sc;
                            }
                        }
                        let prow = &mut p[(h * seq_len + i) * seq_len..(h * seq_len + i + 1) * seq_len];
                        let mut z = T::zero();
                        for j in 0..seq_len {
                            if kvalid.is_some_and(|m| !m[base + j]) {
                                continue;
                            }
                            let e = (scores[j] - max).exp();
                            prow[j] = e;
                            z += e;
                        }
                        let inv = T::one() / z;
                        let orow = &mut o[i * width + h * dh..i * width + h * dh + dh];
                        for j in 0..seq_len {
                            if kvalid.is_some_and(|m| !m[base + j]) {
                                continue;
                            }
                            prow[j] *= inv;
                            let vj = &q[(base + j) * c3 + vo..(base + j) * c3 + vo + dh];
                            for (ov, &vv) in orow.iter_mut().zip(vj) {
                                *ov += prow[j] * vv;
                            }
                        }
                    }
                }
                (p, o)
            });
            for (s, (p, o)) in per_seq.into_iter().enumerate() {
                probs[s * block..(s + 1) * block].copy_from_slice(&p);
                out.data_mut()[s * seq_len * width..(s + 1) * seq_len * width]
                    .copy_from_slice(&o);
            }
        }
        let needs = self.needs(qkv);
        self.push(
            out,
            Op::Attention {
                qkv,
                seq_len,
                heads,
                key_valid,
                probs,
            },
            needs,
        )
    }

    /// Builds a tensor whose row `r` is row `picks[r].1` of `sources[picks[r].0]`.
    pub fn select_rows(&mut self, sources: &[Var], picks: Vec<(usize, usize)>) -> Result<Var> {
        let cols = sources
            .first()
            .map(|&s| self.value(s).cols())
            .ok_or_else(|| Error::Shape("select_rows needs at least one source".into()))?;
        for &s in sources {
            if self.value(s).cols() != cols {
                return Err(Error::Shape(format!(
                    "select_rows sources disagree on width ({} vs {cols})",
                    self.value(s).cols()
                )));
            }
        }
        let mut y = Tensor::zeros(picks.len(), cols);
        for (r, &(si, row)) in picks.iter().enumerate() {
            let src = self.value(*sources.get(si).ok_or_else(|| {
                Error::InvalidArgument(format!("select_rows source {si} out of range"))
            })?);
            if row >= src.rows() {
                return Err(Error::InvalidArgument(format!(
                    "select_rows row {row} out of range for {} rows",
                    src.rows()
                )));
            }
            y.row_mut(r).copy_from_slice(src.row(row));
        }
        let needs = sources.iter().any(|&s| self.needs(s));
        Ok(self.push(
            y,
            Op::SelectRows {
                sources: sources.to_vec(),
                picks,
            },
            needs,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.select_rows(&[x], rows.iter().map(|&r| (0, r)).collect())
    }

    /// Divides each row by its L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut y = xv.clone();
        let tiny = T::of(1e-12);
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt().max(tiny);
            norms.push(n);
            for v in y.row_mut(r) {
                *v = *v / n;
            }
        }
        let needs = self.needs(x);
        self.push(y, Op::L2Normalize { x, norms }, needs)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let y = self.value(x).transpose();
        let needs = self.needs(x);
        self.push(y, Op::Transpose { x }, needs)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let bt = self.transpose(b);
        self.matmul(a, bt)
    }

    /// `x / τ` with `τ = clamp(exp(log_tau), tau_min, tau_max)`.
    pub fn inv_temperature(&mut self, x: Var, log_tau: Var, tau_min: f64, tau_max: f64) -> Var {
        let lt = self.value(log_tau).item();
        let raw = lt.exp();
        let (lo, hi) = (T::of(tau_min), T::of(tau_max));
        let clamped = raw < lo || raw > hi;
        let tau = raw.max(lo).min(hi);
        let y = self.value(x).map(|v| v / tau);
        let needs = self.needs(x) || self.needs(log_tau);
        self.push(
            y,
            Op::InvTemperature {
                x,
                log_tau,
                tau,
                clamped,
            },
            needs,
        )
    }

    /// Mean softmax cross-entropy of each row against its target class.
    /// Zero rows give a loss of exactly 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "target {t} at row {i} outside {c} classes"
            )));
        }
        let mut probs = Tensor::zeros(n, c);
        let mut total = T::zero();
        for r in 0..n {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in probs.row_mut(r) {
                *p = *p / z;
            }
            total += max + z.ln() - row[targets[r]];
        }
        let loss = if n == 0 {
            T::zero()
        } else {
            total / T::of(n as f64)
        };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean squared error against a constant target; 0 for an empty input.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let loss = if pv.is_empty() {
            T::zero()
        } else {
            let s: T = pv
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            s / T::of(pv.len() as f64)
        };
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, needs))
    }

    /// `Σ wᵢ · termᵢ` over `1 × 1` terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = T::zero();
        let mut needs = false;
        let mut stored = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let w = T::of(w);
            s += w * self.value(v).item();
            needs |= self.needs(v) && w != T::zero();
            stored.push((v, w));
        }
        self.push(Tensor::scalar(s), Op::WeightedSum { terms: stored }, needs)
    }

    /// `Σ x ∘ c` for a constant `c` of the same shape.
    pub fn dot_const(&mut self, x: Var, c: Tensor<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), c.shape(), "dot_const shapes");
        let s = dot(xv.data(), c.data());
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::DotConst { x, c }, needs)
    }

    /// For each block of `u.cols()` rows of `x`, computes `u · block`.
    pub fn block_left_mul(&mut self, u: Tensor<T>, x: Var) -> Var {
        let xv = self.value(x);
        let p = u.cols();
        assert!(p > 0 && xv.rows().is_multiple_of(p), "block_left_mul layout");
        let blocks = xv.rows() / p;
        let parts: Vec<Tensor<T>> = par::map_range(blocks, |b| matmul(&u, &xv.slice_rows(b * p, p)));
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        let y = Tensor::vstack(&refs).expect("uniform widths");
        let needs = self.needs(x);
        self.push(y, Op::BlockLeftMul { u, x }, needs)
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            self.backward_node(i, &dy, &mut grads);
        }
        let mut out: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if self.nodes[v.0].needs_grad {
                    out[pid] = grads[v.0].take();
                }
            }
        }
        Gradients { grads: out }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w) = (*x, *w);
                if self.needs(x) {
                    let wt = self.value(w).transpose();
                    self.accumulate(grads, x, matmul(dy, &wt));
                }
                if self.needs(w) {
                    let wv = self.value(w);
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    matmul_tn_acc(self.value(x), dy, &mut dw);
                    self.accumulate(grads, w, dw);
                }
                if let Some(b) = *b {
                    if self.needs(b) {
                        self.accumulate(grads, b, column_sums(dy));
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let bt = self.value(b).transpose();
                    self.accumulate(grads, a, matmul(dy, &bt));
                }
                if self.needs(b) {
                    let av = self.value(a);
                    let mut db = Tensor::zeros(av.cols(), dy.cols());
                    matmul_tn_acc(av, dy, &mut db);
                    self.accumulate(grads, b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddTiled { x, tile } => {
                self.accumulate(grads, *x, dy.clone());
                if self.needs(*tile) {
                    let tr = self.value(*tile).rows();
                    let mut dt = Tensor::zeros(tr, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, &g) in dt.row_mut(r % tr).iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    self.accumulate(grads, *tile, dt);
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let mut dx = dy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *d *= gelu(v).1;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let (n, d) = xhat.shape();
                if self.needs(*x) {
                    let inv_d = T::one() / T::of(d as f64);
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let dyr = dy.row(r);
                        let xh = xhat.row(r);
                        let mut mean_g = T::zero();
                        let mut mean_gx = T::zero();
                        for k in 0..d {
                            let g = dyr[k] * gv[k];
                            mean_g += g;
                            mean_gx += g * xh[k];
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        for (k, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dyr[k] * gv[k] - mean_g - xh[k] * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    let mut dg = Tensor::zeros(1, d);
                    for r in 0..n {
                        for ((o, &g), &xh) in dg.row_mut(0).iter_mut().zip(dy.row(r)).zip(xhat.row(r)) {
                            *o += g * xh;
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, column_sums(dy));
                }
            }
            Op::Attention {
                qkv,
                seq_len,
                heads,
                key_valid,
                probs,
            } => {
                if !self.needs(*qkv) {
                    return;
                }
                let dq = attention_backward(
                    self.value(*qkv),
                    dy,
                    *seq_len,
                    *heads,
                    key_valid.as_deref(),
                    probs,
                );
                self.accumulate(grads, *qkv, dq);
            }
            Op::SelectRows { sources, picks } => {
                let mut parts: Vec<Option<Tensor<T>>> = sources
                    .iter()
                    .map(|&s| {
                        self.needs(s).then(|| {
                            let (r, c) = self.shape(s);
                            Tensor::zeros(r, c)
                        })
                    })
                    .collect();
                for (r, &(si, row)) in picks.iter().enumerate() {
                    if let Some(t) = &mut parts[si] {
                        for (o, &g) in t.row_mut(row).iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                }
                for (s, part) in sources.iter().zip(parts) {
                    if let Some(p) = part {
                        self.accumulate(grads, *s, p);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let mut dx = dy.clone();
                for r in 0..dy.rows() {
                    let yr = y.row(r);
                    let proj = dot(yr, dy.row(r));
                    for (o, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *o = (*o - yv * proj) / norms[r];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Transpose { x } => {
                self.accumulate(grads, *x, dy.transpose());
            }
            Op::InvTemperature {
                x,
                log_tau,
                tau,
                clamped,
            } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, dy.map(|g| g / *tau));
                }
                if self.needs(*log_tau) {
                    let d = if *clamped {
                        T::zero()
                    } else {
                        -dot(dy.data(), y.data())
                    };
                    self.accumulate(grads, *log_tau, Tensor::scalar(d));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                if n == 0 {
                    return;
                }
                let scale = dy.item() / T::of(n as f64);
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(r);
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                if pv.is_empty() {
                    return;
                }
                let scale = dy.item() * T::of(2.0) / T::of(pv.len() as f64);
                let mut dp = pv.clone();
                for (o, &t) in dp.data_mut().iter_mut().zip(target.data()) {
                    *o = (*o - t) * scale;
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::WeightedSum { terms } => {
                let g = dy.item();
                for &(v, w) in terms {
                    if w != T::zero() {
                        self.accumulate(grads, v, Tensor::scalar(w * g));
                    }
                }
            }
            Op::DotConst { x, c } => {
                let g = dy.item();
                self.accumulate(grads, *x, c.map(|v| v * g));
            }
            Op::BlockLeftMul { u, x } => {
                let p = u.cols();
                let q = u.rows();
                let blocks = dy.rows() / q;
                let ut = u.transpose();
                let parts: Vec<Tensor<T>> =
                    par::map_range(blocks, |b| matmul(&ut, &dy.slice_rows(b * q, q)));
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                let dx = Tensor::vstack(&refs).expect("uniform widths");
                debug_assert_eq!(dx.rows(), blocks * p);
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn attention_backward<T: Scalar>(
    qkv: &Tensor<T>,
    dy: &Tensor<T>,
    seq_len: usize,
    heads: usize,
    key_valid: Option<&[bool]>,
    probs: &[T],
) -> Tensor<T> {
    let (rows, c3) = qkv.shape();
    let width = c3 / 3;
    let dh = width / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let nseq = rows / seq_len;
    let block = heads * seq_len * seq_len;
    let q = qkv.data();
    let mut dq = Tensor::zeros(rows, c3);
    par::for_each_chunk(dq.data_mut(), seq_len * c3, |s, out| {
        let base = s * seq_len;
        let p = &probs[s * block..(s + 1) * block];
        let mut dp = vec![T::zero(); seq_len];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
            for i in 0..seq_len {
                let prow = &p[(h * seq_len + i) * seq_len..(h * seq_len + i + 1) * seq_len];
                let doi = &dy.data()[(base + i) * width + h * dh..(base + i) * width + h * dh + dh];
                let mut acc = T::zero();
                for j in 0..seq_len {
                    if key_valid.is_some_and(|m| !m[base + j]) {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &q[(base + j) * c3 + vo..(base + j) * c3 + vo + dh];
                    dp[j] = dot(doi, vj);
                    acc += prow[j] * dp[j];
                    // dV_j += p_ij · dO_i
                    let dv = &mut out[j * c3 + vo..j * c3 + vo + dh];
                    for (o, &g) in dv.iter_mut().zip(doi) {
                        *o += prow[j] * g;
                    }
                }
                let qi: Vec<T> = q[(base + i) * c3 + qo..(base + i) * c3 + qo + dh].to_vec();
                for j in 0..seq_len {
                    if key_valid.is_some_and(|m| !m[base + j]) {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - acc) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj: Vec<T> = q[(base + j) * c3 + ko..(base + j) * c3 + ko + dh].to_vec();
                    for (o, &kv) in out[i * c3 + qo..i * c3 + qo + dh].iter_mut().zip(&kj) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in out[j * c3 + ko..j * c3 + ko + dh].iter_mut().zip(&qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
    });
    debug_assert_eq!(nseq * seq_len, rows);
    dq
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn column_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

/// Tanh-approximated GELU and its derivative.
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let y = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (y, dy)
}
