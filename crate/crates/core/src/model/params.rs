//! Weight containers. Each struct is generic over the element it stores so
//! the same layout serves concrete tensors, graph handles and gradients.

use rand::Rng;

use super::config::{LayerKind, ModelConfig};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = Tensor> {
            $(pub $field: T),+
        }

        impl $name<()> {
            pub(crate) fn unit() -> Self {
                $name { $($field: ()),+ }
            }
        }

        impl<T> $name<T> {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn fields(&self) -> Vec<(&'static str, &T)> {
                vec![$((stringify!($field), &self.$field)),+]
            }

            pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$((stringify!($field), &mut self.$field)),+]
            }

            pub fn map<U>(&self, mut f: impl FnMut(&'static str, &T) -> U) -> $name<U> {
                $name { $($field: f(stringify!($field), &self.$field)),+ }
            }

            pub fn try_map<U, E>(
                &self,
                mut f: impl FnMut(&'static str, &T) -> std::result::Result<U, E>,
            ) -> std::result::Result<$name<U>, E> {
                Ok($name { $($field: f(stringify!($field), &self.$field)?),+ })
            }
        }
    };
}

param_struct! {
    /// One Mamba2 mixer with its pre-norm. Projections multiply from the
    /// right (`X · W`): `w_z`, `w_x` are `[d_model × heads·head_dim]`, `w_b`,
    /// `w_c` are `[d_model × groups·state]`, `w_dt` is `[d_model × heads]`
    /// and `w_o` is `[heads·head_dim × d_model]`. `A = -exp(a_log)`.
    MambaParams {
        norm, w_z, w_x, w_b, w_c, w_dt, dt_bias, a_log, d,
        conv_x, conv_x_bias, conv_b, conv_b_bias, conv_c, conv_c_bias,
        gate_norm, w_o,
    }
}

param_struct! {
    /// Causal multi-head attention; `w_q`, `w_k`, `w_v` are
    /// `[d_model × heads·head_dim]`, `w_o` is `[heads·head_dim × d_model]`.
    AttentionParams { norm, w_q, w_k, w_v, w_o }
}

param_struct! {
    /// Squared-ReLU MLP; `w_1` is `[d_ffn × d_model]` (row `i` feeds neuron
    /// `i`), `w_2` is `[d_model × d_ffn]`.
    FfnParams { norm, w_1, w_2 }
}

pub type MambaLayerWeights = MambaParams<Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub enum Block<T = Tensor> {
    Mamba(MambaParams<T>),
    Attention(AttentionParams<T>),
    Ffn(FfnParams<T>),
}

impl<T> Block<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Block::Mamba(_) => LayerKind::Mamba,
            Block::Attention(_) => LayerKind::Attention,
            Block::Ffn(_) => LayerKind::Ffn,
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &T)> {
        match self {
            Block::Mamba(p) => p.fields(),
            Block::Attention(p) => p.fields(),
            Block::Ffn(p) => p.fields(),
        }
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        match self {
            Block::Mamba(p) => p.fields_mut(),
            Block::Attention(p) => p.fields_mut(),
            Block::Ffn(p) => p.fields_mut(),
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&'static str, &T) -> U) -> Block<U> {
        match self {
            Block::Mamba(p) => Block::Mamba(p.map(f)),
            Block::Attention(p) => Block::Attention(p.map(f)),
            Block::Ffn(p) => Block::Ffn(p.map(f)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub embedding: T,
    pub blocks: Vec<Block<T>>,
    pub final_norm: T,
    pub unembedding: T,
}

impl<T> ModelParams<T> {
    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (f, t) in b.fields() {
                out.push((format!("layers.{i}.{}.{f}", b.kind()), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembedding".into(), &self.unembedding));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.fields_mut().into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembedding);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            embedding: f(&self.embedding),
            blocks: self.blocks.iter().map(|b| b.map(|_, t| f(t))).collect(),
            final_norm: f(&self.final_norm),
            unembedding: f(&self.unembedding),
        }
    }
}

/// Expected shape of every field of a block under `cfg`.
pub fn block_shapes(kind: LayerKind, cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let e = cfg.d_model;
    match kind {
        LayerKind::Mamba => {
            let inner = cfg.mamba_inner();
            let bc = cfg.bc_width();
            let h = cfg.mamba_heads;
            let k = cfg.conv_kernel;
            vec![
                ("norm", vec![e]),
                ("w_z", vec![e, inner]),
                ("w_x", vec![e, inner]),
                ("w_b", vec![e, bc]),
                ("w_c", vec![e, bc]),
                ("w_dt", vec![e, h]),
                ("dt_bias", vec![h]),
                ("a_log", vec![h]),
                ("d", vec![h]),
                ("conv_x", vec![k, inner]),
                ("conv_x_bias", vec![inner]),
                ("conv_b", vec![k, bc]),
                ("conv_b_bias", vec![bc]),
                ("conv_c", vec![k, bc]),
                ("conv_c_bias", vec![bc]),
                ("gate_norm", vec![inner]),
                ("w_o", vec![inner, e]),
            ]
        }
        LayerKind::Attention => {
            let inner = cfg.attn_inner();
            vec![
                ("norm", vec![e]),
                ("w_q", vec![e, inner]),
                ("w_k", vec![e, inner]),
                ("w_v", vec![e, inner]),
                ("w_o", vec![inner, e]),
            ]
        }
        LayerKind::Ffn => vec![
            ("norm", vec![e]),
            ("w_1", vec![cfg.d_ffn, e]),
            ("w_2", vec![e, cfg.d_ffn]),
        ],
    }
}

/// Analytic parameter count of one block.
pub fn block_param_count(kind: LayerKind, cfg: &ModelConfig) -> u64 {
    let e = cfg.d_model as u64;
    match kind {
        LayerKind::Mamba => {
            let inner = cfg.mamba_inner() as u64;
            let bc = cfg.bc_width() as u64;
            let h = cfg.mamba_heads as u64;
            let k = cfg.conv_kernel as u64;
            // norm + in-projections + dt/A/D + convs + gated norm + out-projection
            e + e * (2 * inner + 2 * bc + h) + 3 * h + (k + 1) * (inner + 2 * bc) + inner + inner * e
        }
        LayerKind::Attention => e + 4 * e * cfg.attn_inner() as u64,
        LayerKind::Ffn => e + 2 * e * cfg.d_ffn as u64,
    }
}

/// Exact parameter count of a model built from `cfg`. Embedding and
/// unembedding are separate matrices and both counted.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let e = cfg.d_model as u64;
    let v = cfg.vocab as u64;
    let blocks: u64 = cfg
        .layer_pattern
        .iter()
        .map(|&k| block_param_count(k, cfg))
        .sum();
    2 * v * e + e + blocks
}

pub(crate) fn check_block(block: &Block, cfg: &ModelConfig, layer: usize) -> Result<()> {
    let shapes = block_shapes(block.kind(), cfg);
    for ((name, t), (_, want)) in block.fields().into_iter().zip(shapes) {
        if t.shape() != want.as_slice() {
            return Err(dim_err!(
                "layer {layer} {} {name}: shape {:?}, expected {:?}",
                block.kind(),
                t.shape(),
                want
            ));
        }
    }
    Ok(())
}

/// A block of the right kind and shapes with every weight zero.
pub(crate) fn zero_block(kind: LayerKind, cfg: &ModelConfig) -> Block {
    let mut shapes = block_shapes(kind, cfg).into_iter();
    let mut next = |_: &'static str, _: &()| Tensor::zeros(&shapes.next().expect("shape").1);
    match kind {
        LayerKind::Mamba => Block::Mamba(MambaParams::<()>::unit().map(&mut next)),
        LayerKind::Attention => Block::Attention(AttentionParams::<()>::unit().map(&mut next)),
        LayerKind::Ffn => Block::Ffn(FfnParams::<()>::unit().map(&mut next)),
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub(crate) fn init_block<R: Rng>(kind: LayerKind, cfg: &ModelConfig, rng: &mut R) -> Block {
    let e = cfg.d_model;
    let proj = |fan_in: usize, shape: &[usize], rng: &mut R| {
        Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
    };
    // residual branches start small so the stream is dominated by the embedding
    let out_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    match kind {
        LayerKind::Mamba => {
            let inner = cfg.mamba_inner();
            let bc = cfg.bc_width();
            let h = cfg.mamba_heads;
            let k = cfg.conv_kernel;
            let conv_bound = 1.0 / (k as f64).sqrt();
            let dt_bias = (0..h)
                .map(|_| {
                    let dt = (rng.gen_range(0.001f64.ln()..0.1f64.ln())).exp();
                    inverse_softplus(dt)
                })
                .collect();
            let a_log = (0..h).map(|_| rng.gen_range(1.0f64..16.0).ln()).collect();
            Block::Mamba(MambaParams {
                norm: Tensor::full(&[e], 1.0),
                w_z: proj(e, &[e, inner], rng),
                w_x: proj(e, &[e, inner], rng),
                w_b: proj(e, &[e, bc], rng),
                w_c: proj(e, &[e, bc], rng),
                w_dt: proj(e, &[e, h], rng),
                dt_bias: Tensor::from_vec(dt_bias),
                a_log: Tensor::from_vec(a_log),
                d: Tensor::full(&[h], 1.0),
                conv_x: Tensor::uniform(&[k, inner], -conv_bound, conv_bound, rng),
                conv_x_bias: Tensor::uniform(&[inner], -conv_bound, conv_bound, rng),
                conv_b: Tensor::uniform(&[k, bc], -conv_bound, conv_bound, rng),
                conv_b_bias: Tensor::uniform(&[bc], -conv_bound, conv_bound, rng),
                conv_c: Tensor::uniform(&[k, bc], -conv_bound, conv_bound, rng),
                conv_c_bias: Tensor::uniform(&[bc], -conv_bound, conv_bound, rng),
                gate_norm: Tensor::full(&[inner], 1.0),
                w_o: proj(inner, &[inner, e], rng).map(|v| v * out_scale),
            })
        }
        LayerKind::Attention => {
            let inner = cfg.attn_inner();
            Block::Attention(AttentionParams {
                norm: Tensor::full(&[e], 1.0),
                w_q: proj(e, &[e, inner], rng),
                w_k: proj(e, &[e, inner], rng),
                w_v: proj(e, &[e, inner], rng),
                w_o: proj(inner, &[inner, e], rng).map(|v| v * out_scale),
            })
        }
        LayerKind::Ffn => Block::Ffn(FfnParams {
            norm: Tensor::full(&[e], 1.0),
            w_1: proj(e, &[cfg.d_ffn, e], rng),
            w_2: proj(cfg.d_ffn, &[e, cfg.d_ffn], rng).map(|v| v * out_scale),
        }),
    }
}
