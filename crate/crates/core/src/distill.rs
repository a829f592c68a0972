//! Logit distillation, language-model pretraining for toy teachers, and
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::data::BatchSampler;
use crate::error::{dim_err, Error, Result};
use crate::graph::{kl_rows, Graph, Var};
use crate::importance::for_each_batch;
use crate::model::{forward_graph, ForwardOptions, HybridModel, ModelParams};
use crate::tensor::{log_softmax_temp, Tensor};

/// Parameter update rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent without momentum.
    #[default]
    Sgd,
    /// Adam with β = (0.9, 0.999) and ε = 1e-8.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KDConfig {
    pub tau: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Multiplies every scheduled rate.
    pub lr_scale: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write a checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lr_start: 1.6e-4,
            lr_end: 8e-6,
            warmup_steps: 60,
            total_steps: 1000,
            batch_size: 8,
            seq_len: 64,
            seed: 0,
            lr_scale: 1.0,
            optimizer: Optimizer::Sgd,
            grad_clip: None,
            checkpoint_every: 0,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr_start > 0.0) || !(self.lr_end > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if !(self.lr_scale >= 0.0) {
            return bad("lr_scale must be non-negative".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(s).map_err(|e| Error::Config(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean over rows of `KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<f64> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(dim_err!(
            "teacher logits {:?} vs student {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        ));
    }
    let (n, v) = teacher_logits.dims2()?;
    if n == 0 {
        return Err(Error::EmptyData("no logit rows".into()));
    }
    let lt = log_softmax_temp(teacher_logits, tau)?;
    let ls = log_softmax_temp(student_logits, tau)?;
    Ok(kl_rows(lt.data(), ls.data(), v) / n as f64)
}

/// Linear warmup from 0 to `lr_start`, then cosine decay to `lr_end` at
/// `total_steps`. Steps past the end stay at `lr_end`.
pub fn lr_schedule(step: usize, cfg: &KDConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step < w {
        return cfg.lr_start * step as f64 / w as f64;
    }
    if t <= w {
        return cfg.lr_start;
    }
    let progress = ((step - w) as f64 / (t - w) as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.lr_end + (cfg.lr_start - cfg.lr_end) * cos
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in trace {
        out.push_str(&format!("{},{:.9e},{:.12e}\n", r.step, r.lr, r.loss));
    }
    out
}

struct OptState {
    kind: Optimizer,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl OptState {
    fn new(kind: Optimizer, params: &ModelParams) -> Self {
        let zeros = || {
            params
                .named()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect()
        };
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam => (zeros(), zeros()),
        };
        Self { kind, m, v, t: 0 }
    }

    fn apply(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        if lr == 0.0 {
            return;
        }
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, (w, g)) in params.values_mut().into_iter().zip(grads).enumerate() {
            match self.kind {
                Optimizer::Sgd => {
                    for (x, &d) in w.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
                Optimizer::Adam => {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (((x, &d), mi), vi) in
                        w.data_mut().iter_mut().zip(g.data()).zip(m).zip(v)
                    {
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *vi = b2 * *vi + (1.0 - b2) * d * d;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One forward/backward pass: returns the loss and one gradient per
/// parameter in `ModelParams::named` order.
fn loss_and_grads(
    model: &HybridModel,
    ids: &[u32],
    seq_len: usize,
    loss_fn: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let logits = forward_graph(&mut g, &model.config, &p, ids, seq_len, ForwardOptions::default())?;
    if !g.value(logits).is_finite() {
        // Overflowing weights: reported by the caller as divergence.
        return Ok((f64::NAN, Vec::new()));
    }
    let loss = loss_fn(&mut g, logits)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let out = p
        .named()
        .into_iter()
        .zip(model.params.named())
        .map(|((_, v), (_, t))| grads.get_or_zeros(*v, t))
        .collect();
    Ok((value, out))
}

fn clip(grads: &mut [Tensor], max_norm: Option<f64>) {
    let Some(max) = max_norm else { return };
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

fn check_step(step: usize, loss: f64, grads: &[Tensor]) -> Result<()> {
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &HybridModel) -> Result<()>;

/// Distils `teacher` into `student` with the tempered forward-KL loss.
/// Returns one trace row per step (steps are numbered from 1).
pub fn distill(
    student: &mut HybridModel,
    teacher: &HybridModel,
    data: &mut BatchSampler,
    cfg: &KDConfig,
) -> Result<Vec<TraceRow>> {
    distill_with_hook(student, teacher, data, cfg, None)
}

pub fn distill_with_hook(
    student: &mut HybridModel,
    teacher: &HybridModel,
    data: &mut BatchSampler,
    cfg: &KDConfig,
    mut hook: Option<CheckpointHook<'_>>,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if student.config.vocab != teacher.config.vocab {
        return Err(Error::Usage(format!(
            "student vocabulary {} differs from teacher's {}",
            student.config.vocab, teacher.config.vocab
        )));
    }
    let seq_len = data.seq_len();
    let mut opt = OptState::new(cfg.optimizer, &student.params);
    let mut trace = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let ids = data.next_batch(cfg.batch_size);
        let t_logits = teacher.forward_with(&ids, seq_len, ForwardOptions::default())?;
        let (loss, mut grads) = loss_and_grads(student, &ids, seq_len, |g, logits| {
            g.kd_loss(logits, &t_logits, cfg.tau)
        })?;
        check_step(step, loss, &grads)?;
        clip(&mut grads, cfg.grad_clip);
        let lr = lr_schedule(step, cfg) * cfg.lr_scale;
        opt.apply(&mut student.params, &grads, lr);
        trace.push(TraceRow { step, lr, loss });
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(h) = hook.as_mut() {
                h(step, student)?;
            }
        }
    }
    Ok(trace)
}

fn next_token_targets(ids: &[u32], seq_len: usize) -> Vec<Option<u32>> {
    let mut t = Vec::with_capacity(ids.len());
    for seq in ids.chunks(seq_len) {
        t.extend(seq[1..].iter().map(|&x| Some(x)));
        t.push(None);
    }
    t
}

/// Trains `model` as a next-token language model with the same schedule
/// machinery as distillation (`tau` is ignored).
pub fn pretrain(
    model: &mut HybridModel,
    data: &mut BatchSampler,
    cfg: &KDConfig,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let seq_len = data.seq_len();
    if seq_len < 2 {
        return Err(Error::Input("language-model training needs seq_len ≥ 2".into()));
    }
    let mut opt = OptState::new(cfg.optimizer, &model.params);
    let mut trace = Vec::with_capacity(cfg.total_steps);
    for step in 1..=cfg.total_steps {
        let ids = data.next_batch(cfg.batch_size);
        let targets = next_token_targets(&ids, seq_len);
        let (loss, mut grads) =
            loss_and_grads(model, &ids, seq_len, |g, logits| g.cross_entropy(logits, &targets))?;
        check_step(step, loss, &grads)?;
        clip(&mut grads, cfg.grad_clip);
        let lr = lr_schedule(step, cfg) * cfg.lr_scale;
        opt.apply(&mut model.params, &grads, lr);
        trace.push(TraceRow { step, lr, loss });
    }
    Ok(trace)
}

/// Mean next-token cross-entropy over every predicted position.
pub fn eval_ce(model: &HybridModel, data: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for_each_batch(data, 16, |ids, seq_len| {
        if seq_len < 2 {
            return Ok(());
        }
        let logits = model.forward_with(ids, seq_len, ForwardOptions::default())?;
        let logp = log_softmax_temp(&logits, 1.0)?;
        let v = model.config.vocab;
        for (i, t) in next_token_targets(ids, seq_len).into_iter().enumerate() {
            if let Some(t) = t {
                total -= logp.data()[i * v + t as usize];
                count += 1;
            }
        }
        Ok(())
    })?;
    if count == 0 {
        return Err(Error::EmptyData("no sequence has two or more tokens".into()));
    }
    Ok(total / count as f64)
}

/// Mean over positions of the teacher→student forward KL.
pub fn eval_fkld(
    student: &HybridModel,
    teacher: &HybridModel,
    data: &[Vec<u32>],
    tau: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for_each_batch(data, 16, |ids, seq_len| {
        let s = student.forward_with(ids, seq_len, ForwardOptions::default())?;
        let t = teacher.forward_with(ids, seq_len, ForwardOptions::default())?;
        total += kd_loss(&t, &s, tau)? * ids.len() as f64;
        count += ids.len();
        Ok(())
    })?;
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cross_entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fkld: Option<f64>,
}

pub fn evaluate(
    model: &HybridModel,
    teacher: Option<&HybridModel>,
    data: &[Vec<u32>],
    tau: f64,
) -> Result<EvalReport> {
    Ok(EvalReport {
        cross_entropy: eval_ce(model, data)?,
        fkld: teacher.map(|t| eval_fkld(model, t, data, tau)).transpose()?,
    })
}
