use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Block type of one residual layer. In pattern strings a Mamba block is
/// `M`, an attention block `*` and an FFN block `-`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Mamba,
    Attention,
    Ffn,
}

impl LayerKind {
    pub fn symbol(self) -> char {
        match self {
            LayerKind::Mamba => 'M',
            LayerKind::Attention => '*',
            LayerKind::Ffn => '-',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            'M' => Some(LayerKind::Mamba),
            '*' => Some(LayerKind::Attention),
            '-' => Some(LayerKind::Ffn),
            _ => None,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LayerKind::Mamba => "mamba",
            LayerKind::Attention => "attention",
            LayerKind::Ffn => "ffn",
        };
        f.write_str(name)
    }
}

pub fn parse_pattern(s: &str) -> Result<Vec<LayerKind>> {
    s.chars()
        .map(|c| {
            LayerKind::from_symbol(c).ok_or_else(|| {
                Error::Config(format!("unknown layer symbol {c:?} in pattern {s:?}"))
            })
        })
        .collect()
}

pub fn pattern_string(p: &[LayerKind]) -> String {
    p.iter().map(|k| k.symbol()).collect()
}

mod pattern_serde {
    use super::*;

    pub fn serialize<S: Serializer>(p: &[LayerKind], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&pattern_string(p))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<LayerKind>, D::Error> {
        let s = String::deserialize(d)?;
        parse_pattern(&s).map_err(serde::de::Error::custom)
    }
}

/// Architectural hyperparameters of a hybrid model.
///
/// `norm_width` and `ssm_norm_width` are the denominators of the mean of
/// squares in the residual-stream RMS norms and the gated Mamba norm. They
/// start equal to `d_model` and `mamba_heads · mamba_head_dim` and are left
/// unchanged by trimming, so removing an all-zero channel or head does not
/// change any normalised value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    #[serde(with = "pattern_serde")]
    pub layer_pattern: Vec<LayerKind>,
    pub d_model: usize,
    pub d_ffn: usize,
    pub mamba_heads: usize,
    pub mamba_head_dim: usize,
    pub mamba_groups: usize,
    pub ssm_state: usize,
    pub attn_heads: usize,
    pub attn_head_dim: usize,
    pub vocab: usize,
    pub conv_kernel: usize,
    pub norm_width: usize,
    pub ssm_norm_width: usize,
}

/// The on-disk key/value form. Derived fields may be omitted.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    n_layers: Option<usize>,
    layer_pattern: String,
    d_model: usize,
    d_ffn: usize,
    mamba_heads: usize,
    mamba_head_dim: usize,
    mamba_groups: usize,
    ssm_state: usize,
    attn_heads: usize,
    attn_head_dim: Option<usize>,
    vocab: usize,
    #[serde(default = "default_conv")]
    conv_kernel: usize,
    norm_width: Option<usize>,
    ssm_norm_width: Option<usize>,
}

fn default_conv() -> usize {
    4
}

impl ModelConfig {
    /// Builds a config, deriving the attention head width as
    /// `d_model / attn_heads` and the norm widths from the layer widths.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layer_pattern: &str,
        d_model: usize,
        d_ffn: usize,
        mamba_heads: usize,
        mamba_head_dim: usize,
        mamba_groups: usize,
        ssm_state: usize,
        attn_heads: usize,
        vocab: usize,
    ) -> Result<Self> {
        let layer_pattern = parse_pattern(layer_pattern)?;
        if attn_heads == 0 || !d_model.is_multiple_of(attn_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {attn_heads} attention heads"
            )));
        }
        let cfg = Self {
            n_layers: layer_pattern.len(),
            layer_pattern,
            d_model,
            d_ffn,
            mamba_heads,
            mamba_head_dim,
            mamba_groups,
            ssm_state,
            attn_heads,
            attn_head_dim: d_model / attn_heads,
            vocab,
            conv_kernel: 4,
            norm_width: d_model,
            ssm_norm_width: mamba_heads * mamba_head_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("a model needs at least one layer".into());
        }
        if self.layer_pattern.len() != self.n_layers {
            return fail(format!(
                "layer pattern has {} entries but n_layers = {}",
                self.layer_pattern.len(),
                self.n_layers
            ));
        }
        let named = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("mamba_heads", self.mamba_heads),
            ("mamba_head_dim", self.mamba_head_dim),
            ("mamba_groups", self.mamba_groups),
            ("ssm_state", self.ssm_state),
            ("attn_heads", self.attn_heads),
            ("attn_head_dim", self.attn_head_dim),
            ("vocab", self.vocab),
            ("conv_kernel", self.conv_kernel),
            ("norm_width", self.norm_width),
            ("ssm_norm_width", self.ssm_norm_width),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if !self.mamba_heads.is_multiple_of(self.mamba_groups) {
            return fail(format!(
                "mamba_heads {} is not divisible by mamba_groups {}",
                self.mamba_heads, self.mamba_groups
            ));
        }
        if self.vocab > u32::MAX as usize {
            return fail("vocabulary does not fit 32-bit token ids".into());
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let raw: ConfigFile =
            toml::from_str(s).map_err(|e| Error::Config(format!("config file: {e}")))?;
        let layer_pattern = parse_pattern(&raw.layer_pattern)?;
        let attn_head_dim = match raw.attn_head_dim {
            Some(v) => v,
            None => {
                if raw.attn_heads == 0 || !raw.d_model.is_multiple_of(raw.attn_heads) {
                    return Err(Error::Config(format!(
                        "d_model {} is not divisible by {} attention heads",
                        raw.d_model, raw.attn_heads
                    )));
                }
                raw.d_model / raw.attn_heads
            }
        };
        let cfg = Self {
            n_layers: raw.n_layers.unwrap_or(layer_pattern.len()),
            layer_pattern,
            d_model: raw.d_model,
            d_ffn: raw.d_ffn,
            mamba_heads: raw.mamba_heads,
            mamba_head_dim: raw.mamba_head_dim,
            mamba_groups: raw.mamba_groups,
            ssm_state: raw.ssm_state,
            attn_heads: raw.attn_heads,
            attn_head_dim,
            vocab: raw.vocab,
            conv_kernel: raw.conv_kernel,
            norm_width: raw.norm_width.unwrap_or(raw.d_model),
            ssm_norm_width: raw
                .ssm_norm_width
                .unwrap_or(raw.mamba_heads * raw.mamba_head_dim),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("n_layers", self.n_layers.to_string());
        line("layer_pattern", format!("\"{}\"", pattern_string(&self.layer_pattern)));
        line("d_model", self.d_model.to_string());
        line("d_ffn", self.d_ffn.to_string());
        line("mamba_heads", self.mamba_heads.to_string());
        line("mamba_head_dim", self.mamba_head_dim.to_string());
        line("mamba_groups", self.mamba_groups.to_string());
        line("ssm_state", self.ssm_state.to_string());
        line("attn_heads", self.attn_heads.to_string());
        line("attn_head_dim", self.attn_head_dim.to_string());
        line("vocab", self.vocab.to_string());
        line("conv_kernel", self.conv_kernel.to_string());
        line("norm_width", self.norm_width.to_string());
        line("ssm_norm_width", self.ssm_norm_width.to_string());
        s
    }

    pub fn pattern(&self) -> String {
        pattern_string(&self.layer_pattern)
    }

    pub fn mamba_inner(&self) -> usize {
        self.mamba_heads * self.mamba_head_dim
    }

    pub fn attn_inner(&self) -> usize {
        self.attn_heads * self.attn_head_dim
    }

    pub fn bc_width(&self) -> usize {
        self.mamba_groups * self.ssm_state
    }

    pub fn heads_per_group(&self) -> usize {
        self.mamba_heads / self.mamba_groups
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layer_pattern.iter().filter(|&&k| k == kind).count()
    }

    /// Nemotron-H 8B shaped configuration (52 layers: 24 Mamba, 24 FFN,
    /// 4 attention).
    pub fn nemotron_h_8b() -> Self {
        let pattern = format!("{}{}", "M-M-M-M*-".repeat(4), "M-".repeat(8));
        let layer_pattern = parse_pattern(&pattern).expect("static pattern");
        Self {
            n_layers: layer_pattern.len(),
            layer_pattern,
            d_model: 4096,
            d_ffn: 21504,
            mamba_heads: 128,
            mamba_head_dim: 64,
            mamba_groups: 8,
            ssm_state: 128,
            attn_heads: 32,
            attn_head_dim: 128,
            vocab: 131072,
            conv_kernel: 4,
            norm_width: 4096,
            ssm_norm_width: 128 * 64,
        }
    }
}
