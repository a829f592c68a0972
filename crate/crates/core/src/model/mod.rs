//! The toy hybrid architecture: token embedding, a stack of pre-norm residual
//! blocks (Mamba2 mixer, causal attention or squared-ReLU MLP) and an untied
//! unembedding.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;
pub mod ssm;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{LayerKind, ModelConfig};
pub use forward::{forward_graph, mamba_forward, ForwardOptions, Observer, Site};
pub use params::{
    param_count, AttentionParams, Block, FfnParams, MambaLayerWeights, MambaParams, ModelParams,
};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl HybridModel {
    /// Random initialisation, deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = config.d_model;
        let embedding = Tensor::randn(&[config.vocab, e], 1.0, &mut rng);
        let blocks = config
            .layer_pattern
            .iter()
            .map(|&k| params::init_block(k, &config, &mut rng))
            .collect();
        let unembedding = Tensor::randn(&[e, config.vocab], 1.0 / (e as f64).sqrt(), &mut rng);
        Ok(Self {
            params: ModelParams {
                embedding,
                blocks,
                final_norm: Tensor::full(&[e], 1.0),
                unembedding,
            },
            config,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let m = Self { config, params };
        m.validate()?;
        Ok(m)
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.params.blocks.len() != cfg.n_layers {
            return Err(dim_err!(
                "{} blocks for {} layers",
                self.params.blocks.len(),
                cfg.n_layers
            ));
        }
        for (i, (b, k)) in self.params.blocks.iter().zip(&cfg.layer_pattern).enumerate() {
            if b.kind() != *k {
                return Err(dim_err!("layer {i} is {} but the pattern says {k}", b.kind()));
            }
            params::check_block(b, cfg, i)?;
        }
        let e = cfg.d_model;
        let want = [
            ("embedding", &self.params.embedding, vec![cfg.vocab, e]),
            ("final_norm", &self.params.final_norm, vec![e]),
            ("unembedding", &self.params.unembedding, vec![e, cfg.vocab]),
        ];
        for (name, t, shape) in want {
            if t.shape() != shape.as_slice() {
                return Err(dim_err!("{name}: shape {:?}, expected {shape:?}", t.shape()));
            }
        }
        Ok(())
    }

    /// Sum of the sizes of all instantiated tensors.
    pub fn num_params(&self) -> u64 {
        self.params
            .named()
            .iter()
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    /// Places every weight on `g` as a trainable leaf (or a constant).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelParams<Var> {
        self.params.map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Logits `[L×vocab]` for one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward_with(tokens, tokens.len(), ForwardOptions::default())
    }

    /// Logits for `ids`, a stack of sequences of `seq_len` tokens each.
    pub fn forward_with(
        &self,
        ids: &[u32],
        seq_len: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::EmptyData("empty token sequence".into()));
        }
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false);
        let out = forward_graph(&mut g, &self.config, &p, ids, seq_len, opts)?;
        Ok(g.take_value(out))
    }

    /// Order-sensitive FNV-1a digest over the config and every weight's bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(self.config.to_toml_string().as_bytes());
        for (name, t) in self.params.named() {
            feed(name.as_bytes());
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
