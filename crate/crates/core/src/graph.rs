//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node, so node order is already a topological order and
//! the backward sweep simply walks the tape in reverse. A graph created with
//! [`Graph::inference`] records values only; nothing is kept for backward.

use crate::error::{dim_err, Error, Result};
use crate::model::ssm::{self, ScanDims};
use crate::tensor::{self, log_softmax_row, sigmoid, silu, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    ReluSq(Var),
    NegExp(Var),
    Sum(Var),
    RmsNorm {
        x: Var,
        w: Var,
        width: usize,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        seq_len: usize,
    },
    Scan {
        inputs: [Var; 6],
        dims: ScanDims,
        seq_len: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        head_dim: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        probs: Vec<f64>,
    },
    Kd {
        student: Var,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
        tau: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

pub const RMS_EPS: f64 = 1e-6;

impl Graph {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph that only evaluates.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        let track = self.track;
        self.push(t, Op::Leaf, track)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.track && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `[C]` vector to every row of an `[N×C]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(a).dims2()?;
        let bv = self.value(bias);
        if bv.numel() != c {
            return Err(dim_err!("bias of {} for {c} columns", bv.numel()));
        }
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.any_grad(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    /// `max(x, 0)²`
    pub fn relu_sq(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x * x } else { 0.0 });
        let ng = self.any_grad(&[a]);
        self.push(out, Op::ReluSq(a), ng)
    }

    /// `-exp(x)`
    pub fn neg_exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x.exp());
        let ng = self.any_grad(&[a]);
        self.push(out, Op::NegExp(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    /// Row-wise RMS normalisation with a learned scale. The mean of squares is
    /// taken as `Σx² / width`, where `width` may exceed the row length (a
    /// trimmed layer keeps its parent's width).
    pub fn rms_norm(&mut self, x: Var, w: Var, width: usize) -> Result<Var> {
        let (n, c) = self.value(x).dims2()?;
        let wv = self.value(w);
        if wv.numel() != c {
            return Err(dim_err!("norm weight of {} for {c} columns", wv.numel()));
        }
        let denom = width.max(1) as f64;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        let mut inv_rms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xv[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / denom;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            for j in 0..c {
                out[i * c + j] = row[j] * r * wv.data()[j];
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        let ng = self.any_grad(&[x, w]);
        Ok(self.push(
            out,
            Op::RmsNorm {
                x,
                w,
                width,
                inv_rms,
            },
            ng,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, dim) = t.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Input(format!(
                    "token id {id} out of range for vocabulary {vocab}"
                )));
            }
            out.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), dim], out)?;
        let ng = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn conv1d_causal(&mut self, x: Var, kernel: Var, bias: Var, seq_len: usize) -> Result<Var> {
        let out = tensor::conv1d_causal_batched(
            self.value(x),
            self.value(kernel),
            self.value(bias),
            seq_len,
        )?;
        let ng = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                seq_len,
            },
            ng,
        ))
    }

    /// Selective scan over stacked sequences. `x [N×H·P]`, `b`/`c [N×G·S]`,
    /// `a`/`d [H]`, `dt [N×H]` (pre-softplus).
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(
        &mut self,
        x: Var,
        b: Var,
        c: Var,
        a: Var,
        d: Var,
        dt: Var,
        dims: ScanDims,
        seq_len: usize,
    ) -> Result<Var> {
        let n = self.value(x).dims2()?.0;
        let out = ssm::scan_forward(
            self.value(x).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(a).data(),
            self.value(d).data(),
            self.value(dt).data(),
            dims,
            n,
            seq_len,
            ssm::DEFAULT_CHUNK,
        )?;
        let out = Tensor::new(vec![n, dims.inner()], out)?;
        let inputs = [x, b, c, a, d, dt];
        let ng = self.any_grad(&inputs);
        Ok(self.push(
            out,
            Op::Scan {
                inputs,
                dims,
                seq_len,
            },
            ng,
        ))
    }

    /// Causal multi-head softmax attention. `q`, `k`, `v` are
    /// `[N×heads·head_dim]`; the result has the same layout.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        head_dim: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (n, w) = self.value(q).dims2()?;
        if w != heads * head_dim
            || self.value(k).shape() != self.value(q).shape()
            || self.value(v).shape() != self.value(q).shape()
        {
            return Err(dim_err!(
                "attention inputs must all be [{n}×{}]",
                heads * head_dim
            ));
        }
        if seq_len == 0 || n % seq_len != 0 {
            return Err(dim_err!("{n} rows do not split into sequences of {seq_len}"));
        }
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let tri = seq_len * (seq_len + 1) / 2;
        let n_seq = n / seq_len;
        let mut probs = vec![0.0; n_seq * heads * tri];
        let mut out = vec![0.0; n * w];
        let mut scores = vec![0.0; seq_len];
        for sq in 0..n_seq {
            let s0 = sq * seq_len;
            for h in 0..heads {
                let off = h * head_dim;
                let pbase = (sq * heads + h) * tri;
                for t in 0..seq_len {
                    let qt = &qd[(s0 + t) * w + off..(s0 + t) * w + off + head_dim];
                    let mut max = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let ks = &kd[(s0 + s) * w + off..(s0 + s) * w + off + head_dim];
                        scores[s] = tensor::dot(qt, ks) * scale;
                        max = max.max(scores[s]);
                    }
                    let mut z = 0.0;
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let prow = pbase + t * (t + 1) / 2;
                    let orow = &mut out[(s0 + t) * w + off..(s0 + t) * w + off + head_dim];
                    for s in 0..=t {
                        let p = scores[s] / z;
                        probs[prow + s] = p;
                        let vs = &vd[(s0 + s) * w + off..(s0 + s) * w + off + head_dim];
                        for (o, vv) in orow.iter_mut().zip(vs) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, w], out)?;
        let ng = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                head_dim,
                seq_len,
                probs,
            },
            ng,
        ))
    }

    /// Mean next-token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.dims2()?;
        if targets.len() != n {
            return Err(dim_err!("{} targets for {n} logit rows", targets.len()));
        }
        if !lv.is_finite() {
            return Err(Error::Input("non-finite logits".into()));
        }
        let mut logp = vec![0.0; n * vocab];
        let mut loss = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            let dst = &mut logp[i * vocab..(i + 1) * vocab];
            log_softmax_row(lv.row(i), 1.0, dst);
            if let Some(t) = targets[i] {
                if t as usize >= vocab {
                    return Err(Error::Input(format!("target {t} out of range {vocab}")));
                }
                loss -= dst[t as usize];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyData("no positions with a target".into()));
        }
        let probs = logp.into_iter().map(f64::exp).collect();
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over rows of `KL(softmax(teacher/τ) ‖ softmax(student/τ))`. The
    /// teacher side is a constant.
    pub fn kd_loss(&mut self, student: Var, teacher_logits: &Tensor, tau: f64) -> Result<Var> {
        let sv = self.value(student);
        if sv.shape() != teacher_logits.shape() {
            return Err(dim_err!(
                "student logits {:?} vs teacher {:?}",
                sv.shape(),
                teacher_logits.shape()
            ));
        }
        let log_s = tensor::log_softmax_temp(sv, tau)?;
        let log_t = tensor::log_softmax_temp(teacher_logits, tau)?;
        let (n, _) = sv.dims2()?;
        let loss = kl_rows(log_t.data(), log_s.data(), sv.dims2()?.1) / n as f64;
        let teacher_probs = log_t.into_data().into_iter().map(f64::exp).collect();
        let student_probs = log_s.into_data().into_iter().map(f64::exp).collect();
        let ng = self.any_grad(&[student]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Kd {
                student,
                teacher_probs,
                student_probs,
                tau,
            },
            ng,
        ))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(
        &self,
        op: &Op,
        value: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).numel();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, gb)?);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.map(|x| x * s));
                }
            }
            Op::Silu(a) => {
                let d = self.value(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                accumulate(grads, *a, g.zip_map(&d, |x, y| x * y)?);
            }
            Op::ReluSq(a) => {
                let d = self.value(*a).map(|x| if x > 0.0 { 2.0 * x } else { 0.0 });
                accumulate(grads, *a, g.zip_map(&d, |x, y| x * y)?);
            }
            Op::NegExp(a) => {
                accumulate(grads, *a, g.zip_map(value, |x, y| x * y)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::RmsNorm {
                x,
                w,
                width,
                inv_rms,
            } => {
                let xv = self.value(*x);
                let wv = self.value(*w).data();
                let (n, c) = xv.dims2()?;
                let denom = (*width).max(1) as f64;
                let mut gx = vec![0.0; n * c];
                let mut gw = vec![0.0; c];
                for i in 0..n {
                    let r = inv_rms[i];
                    let xr = xv.row(i);
                    let gr = g.row(i);
                    let mut proj = 0.0;
                    for j in 0..c {
                        proj += gr[j] * wv[j] * xr[j];
                        gw[j] += gr[j] * xr[j] * r;
                    }
                    let k = r * r * r * proj / denom;
                    for j in 0..c {
                        gx[i * c + j] = r * gr[j] * wv[j] - k * xr[j];
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::new(vec![n, c], gx)?);
                }
                if self.wants(*w) {
                    let shape = self.value(*w).shape().to_vec();
                    accumulate(grads, *w, Tensor::new(shape, gw)?);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let (_, dim) = tv.dims2()?;
                let mut gt = Tensor::zeros(tv.shape());
                let gd = gt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gd[id as usize * dim..(id as usize + 1) * dim];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                seq_len,
            } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (n, c) = xv.dims2()?;
                let (k, _) = kv.dims2()?;
                let mut gx = vec![0.0; n * c];
                let mut gk = vec![0.0; k * c];
                let mut gb = vec![0.0; c];
                for s0 in (0..n).step_by(*seq_len) {
                    for t in 0..*seq_len {
                        let gr = g.row(s0 + t);
                        for (o, v) in gb.iter_mut().zip(gr) {
                            *o += v;
                        }
                        for tap in 0..k {
                            let back = k - 1 - tap;
                            if back > t {
                                continue;
                            }
                            let src = s0 + t - back;
                            let xr = xv.row(src);
                            let kr = &kv.data()[tap * c..(tap + 1) * c];
                            for j in 0..c {
                                gx[src * c + j] += kr[j] * gr[j];
                                gk[tap * c + j] += xr[j] * gr[j];
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, Tensor::new(vec![n, c], gx)?);
                }
                if self.wants(*kernel) {
                    accumulate(grads, *kernel, Tensor::new(vec![k, c], gk)?);
                }
                if self.wants(*bias) {
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, gb)?);
                }
            }
            Op::Scan {
                inputs,
                dims,
                seq_len,
            } => {
                let [x, b, c, a, d, dt] = *inputs;
                let n = self.value(x).dims2()?.0;
                let sg = ssm::scan_backward(
                    self.value(x).data(),
                    self.value(b).data(),
                    self.value(c).data(),
                    self.value(a).data(),
                    self.value(d).data(),
                    self.value(dt).data(),
                    g.data(),
                    *dims,
                    n,
                    *seq_len,
                );
                for (v, data) in [(x, sg.x), (b, sg.b), (c, sg.c), (a, sg.a), (d, sg.d), (dt, sg.dt)]
                {
                    if self.wants(v) {
                        let shape = self.value(v).shape().to_vec();
                        accumulate(grads, v, Tensor::new(shape, data)?);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                head_dim,
                seq_len,
                probs,
            } => {
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let (n, w) = self.value(*q).dims2()?;
                let (heads, hd, sl) = (*heads, *head_dim, *seq_len);
                let scale = 1.0 / (hd as f64).sqrt();
                let tri = sl * (sl + 1) / 2;
                let mut gq = vec![0.0; n * w];
                let mut gk = vec![0.0; n * w];
                let mut gv = vec![0.0; n * w];
                let mut dp = vec![0.0; sl];
                let gd = g.data();
                for sq in 0..n / sl {
                    let s0 = sq * sl;
                    for h in 0..heads {
                        let off = h * hd;
                        let pbase = (sq * heads + h) * tri;
                        for t in 0..sl {
                            let prow = &probs[pbase + t * (t + 1) / 2..pbase + t * (t + 1) / 2 + t + 1];
                            let go = &gd[(s0 + t) * w + off..(s0 + t) * w + off + hd];
                            let mut inner = 0.0;
                            for s in 0..=t {
                                let vs = &vd[(s0 + s) * w + off..(s0 + s) * w + off + hd];
                                dp[s] = tensor::dot(go, vs);
                                inner += prow[s] * dp[s];
                                let gvs = &mut gv[(s0 + s) * w + off..(s0 + s) * w + off + hd];
                                for (o, gov) in gvs.iter_mut().zip(go) {
                                    *o += prow[s] * gov;
                                }
                            }
                            let qt = (s0 + t) * w + off;
                            for s in 0..=t {
                                let ds = prow[s] * (dp[s] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ks = (s0 + s) * w + off;
                                for j in 0..hd {
                                    gq[qt + j] += ds * kd[ks + j];
                                    gk[ks + j] += ds * qd[qt + j];
                                }
                            }
                        }
                    }
                }
                for (var, data) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.wants(var) {
                        accumulate(grads, var, Tensor::new(vec![n, w], data)?);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, vocab) = self.value(*logits).dims2()?;
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let gv = g.data()[0] / count;
                let mut out = vec![0.0; n * vocab];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let row = &mut out[i * vocab..(i + 1) * vocab];
                        for (o, p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                            *o = p * gv;
                        }
                        row[*t as usize] -= gv;
                    }
                }
                accumulate(grads, *logits, Tensor::new(vec![n, vocab], out)?);
            }
            Op::Kd {
                student,
                teacher_probs,
                student_probs,
                tau,
            } => {
                let (n, vocab) = self.value(*student).dims2()?;
                let gv = g.data()[0] / (n as f64 * tau);
                let out = student_probs
                    .iter()
                    .zip(teacher_probs)
                    .map(|(ps, pt)| (ps - pt) * gv)
                    .collect();
                accumulate(grads, *student, Tensor::new(vec![n, vocab], out)?);
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Σ over rows of Σ_v p_t (log p_t − log p_s), given log-probabilities.
pub(crate) fn kl_rows(log_t: &[f64], log_s: &[f64], vocab: usize) -> f64 {
    let mut total = 0.0;
    for (lt, ls) in log_t.chunks(vocab).zip(log_s.chunks(vocab)) {
        let mut row = 0.0;
        for (&a, &b) in lt.iter().zip(ls) {
            let p = a.exp();
            if p > 0.0 {
                row += p * (a - b);
            }
        }
        total += row;
    }
    total
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the
    /// loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
