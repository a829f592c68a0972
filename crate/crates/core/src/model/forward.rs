//! Forward evaluation on a [`Graph`]. The same code path serves training
//! (tracked graph) and scoring/inference (untracked graph).

use super::config::ModelConfig;
use super::params::{AttentionParams, Block, FfnParams, MambaParams, ModelParams};
use super::ssm::ScanDims;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Activation sites exposed to observers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    /// Normalised block input, `[N×d_model]`.
    BlockInput,
    /// `LN(X)·W_x` before the convolution, `[N×heads·head_dim]`.
    MambaX,
    /// `LN(X)·W_z`, `[N×heads·head_dim]`.
    MambaZ,
    /// Gated-norm output feeding `W_O`, `[N×heads·head_dim]`.
    MambaOutProjInput,
    /// `LN(X)·W_1ᵀ` before the activation, `[N×d_ffn]`.
    FfnPreAct,
    /// Activated hidden units feeding `W_2`, `[N×d_ffn]`.
    FfnDownInput,
    /// Concatenated per-head attention outputs feeding `W_o`.
    AttnHeads,
    /// Final normalised stream feeding the unembedding, `[N×d_model]`.
    FinalNorm,
}

/// Receives activations during a forward pass. `layer` is `None` for the
/// final norm.
pub trait Observer {
    fn wants(&self, layer: Option<usize>, site: Site) -> bool;
    fn observe(&mut self, layer: Option<usize>, site: Site, acts: &Tensor, seq_len: usize);
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Layer whose residual contribution is dropped.
    pub skip_layer: Option<usize>,
    pub observer: Option<&'a mut dyn Observer>,
}

struct Ctx<'g, 'o> {
    g: &'g mut Graph,
    cfg: &'g ModelConfig,
    seq_len: usize,
    observer: Option<&'o mut dyn Observer>,
}

impl Ctx<'_, '_> {
    fn tap(&mut self, layer: Option<usize>, site: Site, v: Var) {
        if let Some(obs) = self.observer.as_deref_mut() {
            if obs.wants(layer, site) {
                obs.observe(layer, site, self.g.value(v), self.seq_len);
            }
        }
    }
}

/// Runs the model on `ids`, a stack of sequences of `seq_len` tokens each,
/// and returns logits `[N×vocab]`.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    ids: &[u32],
    seq_len: usize,
    opts: ForwardOptions<'_>,
) -> Result<Var> {
    let ForwardOptions {
        skip_layer,
        observer,
    } = opts;
    let mut ctx = Ctx {
        g,
        cfg,
        seq_len,
        observer,
    };
    let mut stream = ctx.g.embedding(params.embedding, ids)?;
    for (i, block) in params.blocks.iter().enumerate() {
        let out = match block {
            Block::Mamba(p) => mamba_block(&mut ctx, i, p, stream)?,
            Block::Attention(p) => attention_block(&mut ctx, i, p, stream)?,
            Block::Ffn(p) => ffn_block(&mut ctx, i, p, stream)?,
        };
        if skip_layer != Some(i) {
            stream = ctx.g.add(stream, out)?;
        }
    }
    let normed = ctx.g.rms_norm(stream, params.final_norm, cfg.norm_width)?;
    ctx.tap(None, Site::FinalNorm, normed);
    ctx.g.matmul(normed, params.unembedding)
}

fn mamba_block(ctx: &mut Ctx, layer: usize, p: &MambaParams<Var>, x: Var) -> Result<Var> {
    let cfg = ctx.cfg;
    let seq_len = ctx.seq_len;
    let u = ctx.g.rms_norm(x, p.norm, cfg.norm_width)?;
    ctx.tap(Some(layer), Site::BlockInput, u);
    let g = &mut *ctx.g;
    let z = g.matmul(u, p.w_z)?;
    let xs = g.matmul(u, p.w_x)?;
    let bs = g.matmul(u, p.w_b)?;
    let cs = g.matmul(u, p.w_c)?;
    let dt = g.matmul(u, p.w_dt)?;
    ctx.tap(Some(layer), Site::MambaX, xs);
    ctx.tap(Some(layer), Site::MambaZ, z);
    let g = &mut *ctx.g;
    let xc = g.conv1d_causal(xs, p.conv_x, p.conv_x_bias, seq_len)?;
    let xc = g.silu(xc);
    let bc = g.conv1d_causal(bs, p.conv_b, p.conv_b_bias, seq_len)?;
    let bc = g.silu(bc);
    let cc = g.conv1d_causal(cs, p.conv_c, p.conv_c_bias, seq_len)?;
    let cc = g.silu(cc);
    let dt = g.add_bias(dt, p.dt_bias)?;
    let a = g.neg_exp(p.a_log);
    let dims = ScanDims {
        heads: cfg.mamba_heads,
        head_dim: cfg.mamba_head_dim,
        groups: cfg.mamba_groups,
        state: cfg.ssm_state,
    };
    let y = g.ssm_scan(xc, bc, cc, a, p.d, dt, dims, seq_len)?;
    let yn = g.rms_norm(y, p.gate_norm, cfg.ssm_norm_width)?;
    let gate = g.silu(z);
    let gated = g.mul(yn, gate)?;
    ctx.tap(Some(layer), Site::MambaOutProjInput, gated);
    ctx.g.matmul(gated, p.w_o)
}

fn attention_block(
    ctx: &mut Ctx,
    layer: usize,
    p: &AttentionParams<Var>,
    x: Var,
) -> Result<Var> {
    let cfg = ctx.cfg;
    let u = ctx.g.rms_norm(x, p.norm, cfg.norm_width)?;
    ctx.tap(Some(layer), Site::BlockInput, u);
    let g = &mut *ctx.g;
    let q = g.matmul(u, p.w_q)?;
    let k = g.matmul(u, p.w_k)?;
    let v = g.matmul(u, p.w_v)?;
    let o = g.causal_attention(q, k, v, cfg.attn_heads, cfg.attn_head_dim, ctx.seq_len)?;
    ctx.tap(Some(layer), Site::AttnHeads, o);
    ctx.g.matmul(o, p.w_o)
}

fn ffn_block(ctx: &mut Ctx, layer: usize, p: &FfnParams<Var>, x: Var) -> Result<Var> {
    let u = ctx.g.rms_norm(x, p.norm, ctx.cfg.norm_width)?;
    ctx.tap(Some(layer), Site::BlockInput, u);
    let h = ctx.g.matmul_nt(u, p.w_1)?;
    ctx.tap(Some(layer), Site::FfnPreAct, h);
    let a = ctx.g.relu_sq(h);
    ctx.tap(Some(layer), Site::FfnDownInput, a);
    ctx.g.matmul_nt(a, p.w_2)
}

/// Runs a single Mamba mixer (pre-norm included, residual excluded) on one
/// sequence `x [L×d_model]`.
pub fn mamba_forward(weights: &MambaParams, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let (l, _) = x.dims2()?;
    let mut g = Graph::inference();
    let p = weights.map(|_, t| g.constant(t.clone()));
    let xv = g.constant(x.clone());
    let mut ctx = Ctx {
        g: &mut g,
        cfg,
        seq_len: l.max(1),
        observer: None,
    };
    let out = mamba_block(&mut ctx, 0, &p, xv)?;
    Ok(g.take_value(out))
}
