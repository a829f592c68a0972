//! Group-constrained ranking and physical trimming.
//!
//! A [`PrunePlan`] lists explicit keep-sets indexed by the parent model's
//! layer numbers. [`apply_plan`] removes layers first, then embedding
//! channels, then Mamba heads/channels, FFN neurons and finally attention
//! heads.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{
    channel_scores, layers_by_importance, score_heads, select_channels, top_k, MambaScores,
    ScoreSet,
};
use crate::model::{
    AttentionParams, Block, FfnParams, HybridModel, LayerKind, MambaParams, ModelConfig,
    ModelParams,
};
use crate::tensor::Tensor;

fn plan_err(m: impl Into<String>) -> Error {
    Error::Plan(m.into())
}

/// Ranks heads within every group by descending score (ties → lower index)
/// and keeps the first `k_g` of each, concatenated in group order.
pub fn rank_group_constrained(f_h: &[f64], groups: usize, k_g: usize) -> Result<Vec<usize>> {
    let m_h = f_h.len();
    if groups == 0 || !m_h.is_multiple_of(groups) {
        return Err(Error::Parameter(format!(
            "{m_h} heads cannot be split into {groups} equal groups"
        )));
    }
    let per = m_h / groups;
    if k_g == 0 || k_g > per {
        return Err(Error::Parameter(format!("k_g = {k_g} outside 1..={per}")));
    }
    let mut out = Vec::with_capacity(groups * k_g);
    for g in 0..groups {
        let mut idx: Vec<usize> = (g * per..(g + 1) * per).collect();
        idx.sort_by(|&a, &b| f_h[b].total_cmp(&f_h[a]).then(a.cmp(&b)));
        out.extend_from_slice(&idx[..k_g]);
    }
    Ok(out)
}

/// Checks that `heads` keeps the same number of heads from every group,
/// lists them group by group, and never repeats one.
pub fn check_group_order(heads: &[usize], m_h: usize, groups: usize) -> Result<usize> {
    if heads.is_empty() || groups == 0 || !heads.len().is_multiple_of(groups) {
        return Err(plan_err(format!(
            "{} kept heads cannot be spread evenly over {groups} groups",
            heads.len()
        )));
    }
    let per = m_h / groups;
    let k_g = heads.len() / groups;
    let mut seen = vec![false; m_h];
    for (pos, &h) in heads.iter().enumerate() {
        if h >= m_h {
            return Err(plan_err(format!("head {h} out of range {m_h}")));
        }
        if std::mem::replace(&mut seen[h], true) {
            return Err(plan_err(format!("head {h} kept twice")));
        }
        let slot_group = pos / k_g;
        if h / per != slot_group {
            return Err(plan_err(format!(
                "head {h} belongs to group {} but occupies a slot of group {slot_group}",
                h / per
            )));
        }
    }
    Ok(k_g)
}

/// Checks a keep-set of distinct in-range indices. Order is preserved by
/// the trims, so callers decide whether it must be ascending.
fn check_keep(what: &str, keep: &[usize], n: usize) -> Result<()> {
    if keep.is_empty() {
        return Err(plan_err(format!("{what}: empty keep-set")));
    }
    let mut seen = vec![false; n];
    for &i in keep {
        if i >= n {
            return Err(plan_err(format!("{what}: index {i} out of range {n}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(plan_err(format!("{what}: index {i} repeated")));
        }
    }
    Ok(())
}

fn check_ascending(what: &str, keep: &[usize]) -> Result<()> {
    if keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(plan_err(format!("{what}: indices must be strictly ascending")));
    }
    Ok(())
}

fn select_vec(t: &Tensor, idx: &[usize]) -> Tensor {
    Tensor::from_vec(idx.iter().map(|&i| t.data()[i]).collect())
}

/// Inner (head-major) indices of the kept head/channel pairs.
fn inner_index(heads: &[usize], channels: &[usize], m_d: usize) -> Vec<usize> {
    heads
        .iter()
        .flat_map(|&h| channels.iter().map(move |&d| h * m_d + d))
        .collect()
}

/// Removes dropped heads and channels from one Mamba mixer. `heads` must be
/// group-ordered; `channels` is shared by every kept head. `B`/`C`
/// projections and their convolutions are left intact.
pub fn trim_mamba(
    weights: &MambaParams,
    cfg: &ModelConfig,
    heads: &[usize],
    channels: &[usize],
) -> Result<MambaParams> {
    let (m_h, m_d) = (cfg.mamba_heads, cfg.mamba_head_dim);
    check_group_order(heads, m_h, cfg.mamba_groups)?;
    check_keep("mamba channels", channels, m_d)?;
    check_ascending("mamba channels", channels)?;
    let inner = inner_index(heads, channels, m_d);
    let w = weights;
    Ok(MambaParams {
        norm: w.norm.clone(),
        w_z: w.w_z.select_cols(&inner)?,
        w_x: w.w_x.select_cols(&inner)?,
        w_b: w.w_b.clone(),
        w_c: w.w_c.clone(),
        w_dt: w.w_dt.select_cols(heads)?,
        dt_bias: select_vec(&w.dt_bias, heads),
        a_log: select_vec(&w.a_log, heads),
        d: select_vec(&w.d, heads),
        conv_x: w.conv_x.select_cols(&inner)?,
        conv_x_bias: select_vec(&w.conv_x_bias, &inner),
        conv_b: w.conv_b.clone(),
        conv_b_bias: w.conv_b_bias.clone(),
        conv_c: w.conv_c.clone(),
        conv_c_bias: w.conv_c_bias.clone(),
        gate_norm: select_vec(&w.gate_norm, &inner),
        w_o: w.w_o.select_rows(&inner)?,
    })
}

/// Keeps the listed FFN neurons (rows of `W_1`, columns of `W_2`).
pub fn trim_ffn(weights: &FfnParams, kept: &[usize]) -> Result<FfnParams> {
    let (d_ffn, _) = weights.w_1.dims2()?;
    check_keep("ffn neurons", kept, d_ffn)?;
    Ok(FfnParams {
        norm: weights.norm.clone(),
        w_1: weights.w_1.select_rows(kept)?,
        w_2: weights.w_2.select_cols(kept)?,
    })
}

/// Keeps the listed attention heads.
pub fn trim_attention_heads(
    weights: &AttentionParams,
    cfg: &ModelConfig,
    kept: &[usize],
) -> Result<AttentionParams> {
    check_keep("attention heads", kept, cfg.attn_heads)?;
    let inner = inner_index(kept, &(0..cfg.attn_head_dim).collect::<Vec<_>>(), cfg.attn_head_dim);
    Ok(AttentionParams {
        norm: weights.norm.clone(),
        w_q: weights.w_q.select_cols(&inner)?,
        w_k: weights.w_k.select_cols(&inner)?,
        w_v: weights.w_v.select_cols(&inner)?,
        w_o: weights.w_o.select_rows(&inner)?,
    })
}

/// Keeps the listed residual-stream channels everywhere they appear.
pub fn trim_embedding(model: &HybridModel, kept: &[usize]) -> Result<HybridModel> {
    check_keep("embedding channels", kept, model.config.d_model)?;
    let p = &model.params;
    let blocks = p
        .blocks
        .iter()
        .map(|b| -> Result<Block> {
            Ok(match b {
                Block::Mamba(w) => Block::Mamba(MambaParams {
                    norm: select_vec(&w.norm, kept),
                    w_z: w.w_z.select_rows(kept)?,
                    w_x: w.w_x.select_rows(kept)?,
                    w_b: w.w_b.select_rows(kept)?,
                    w_c: w.w_c.select_rows(kept)?,
                    w_dt: w.w_dt.select_rows(kept)?,
                    w_o: w.w_o.select_cols(kept)?,
                    ..w.clone()
                }),
                Block::Attention(w) => Block::Attention(AttentionParams {
                    norm: select_vec(&w.norm, kept),
                    w_q: w.w_q.select_rows(kept)?,
                    w_k: w.w_k.select_rows(kept)?,
                    w_v: w.w_v.select_rows(kept)?,
                    w_o: w.w_o.select_cols(kept)?,
                }),
                Block::Ffn(w) => Block::Ffn(FfnParams {
                    norm: select_vec(&w.norm, kept),
                    w_1: w.w_1.select_cols(kept)?,
                    w_2: w.w_2.select_rows(kept)?,
                }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        d_model: kept.len(),
        ..model.config.clone()
    };
    HybridModel::from_parts(
        config,
        ModelParams {
            embedding: p.embedding.select_cols(kept)?,
            blocks,
            final_norm: select_vec(&p.final_norm, kept),
            unembedding: p.unembedding.select_rows(kept)?,
        },
    )
}

/// Keeps the listed layers (ascending parent indices).
pub fn trim_depth(model: &HybridModel, kept: &[usize]) -> Result<HybridModel> {
    check_keep("layers", kept, model.config.n_layers)?;
    check_ascending("layers", kept)?;
    let layer_pattern: Vec<LayerKind> = kept.iter().map(|&i| model.config.layer_pattern[i]).collect();
    let config = ModelConfig {
        n_layers: kept.len(),
        layer_pattern,
        ..model.config.clone()
    };
    HybridModel::from_parts(
        config,
        ModelParams {
            blocks: kept.iter().map(|&i| model.params.blocks[i].clone()).collect(),
            ..model.params.clone()
        },
    )
}

/// Kept heads (group-ordered) and channels (ascending) of one Mamba layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaKeep {
    pub heads: Vec<usize>,
    pub channels: Vec<usize>,
}

/// Target widths for a pruned model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneTargets {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub mamba_heads: usize,
    pub mamba_head_dim: usize,
    pub attn_heads: usize,
}

impl PruneTargets {
    /// Targets equal to the current widths (prune nothing).
    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            d_model: cfg.d_model,
            d_ffn: cfg.d_ffn,
            mamba_heads: cfg.mamba_heads,
            mamba_head_dim: cfg.mamba_head_dim,
            attn_heads: cfg.attn_heads,
        }
    }

    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        let axes = [
            ("n_layers", self.n_layers, cfg.n_layers),
            ("d_model", self.d_model, cfg.d_model),
            ("d_ffn", self.d_ffn, cfg.d_ffn),
            ("mamba_heads", self.mamba_heads, cfg.mamba_heads),
            ("mamba_head_dim", self.mamba_head_dim, cfg.mamba_head_dim),
            ("attn_heads", self.attn_heads, cfg.attn_heads),
        ];
        for (name, want, have) in axes {
            if want == 0 || want > have {
                return Err(plan_err(format!("target {name} = {want} outside 1..={have}")));
            }
        }
        if !self.mamba_heads.is_multiple_of(cfg.mamba_groups) {
            return Err(plan_err(format!(
                "target mamba_heads {} is not a multiple of {} groups",
                self.mamba_heads, cfg.mamba_groups
            )));
        }
        Ok(())
    }
}

/// Explicit keep-sets, indexed by the parent model's layer numbers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub targets: PruneTargets,
    pub kept_layers: Vec<usize>,
    pub embedding: Vec<usize>,
    pub mamba: BTreeMap<usize, MambaKeep>,
    pub ffn: BTreeMap<usize, Vec<usize>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attention: BTreeMap<usize, Vec<usize>>,
}

impl PrunePlan {
    /// The plan that keeps everything in its original order.
    pub fn identity(cfg: &ModelConfig) -> Self {
        let all = |n: usize| (0..n).collect::<Vec<_>>();
        let mut mamba = BTreeMap::new();
        let mut ffn = BTreeMap::new();
        let mut attention = BTreeMap::new();
        for (i, k) in cfg.layer_pattern.iter().enumerate() {
            match k {
                LayerKind::Mamba => {
                    mamba.insert(
                        i,
                        MambaKeep {
                            heads: all(cfg.mamba_heads),
                            channels: all(cfg.mamba_head_dim),
                        },
                    );
                }
                LayerKind::Ffn => {
                    ffn.insert(i, all(cfg.d_ffn));
                }
                LayerKind::Attention => {
                    attention.insert(i, all(cfg.attn_heads));
                }
            }
        }
        Self {
            targets: PruneTargets::of(cfg),
            kept_layers: all(cfg.n_layers),
            embedding: all(cfg.d_model),
            mamba,
            ffn,
            attention,
        }
    }

    /// Validates the plan against `parent` and returns the config of the
    /// model it produces.
    pub fn result_config(&self, parent: &ModelConfig) -> Result<ModelConfig> {
        parent.validate()?;
        check_keep("layers", &self.kept_layers, parent.n_layers)?;
        check_ascending("layers", &self.kept_layers)?;
        check_keep("embedding channels", &self.embedding, parent.d_model)?;

        let mut ffn_width = None;
        let mut att_heads = None;
        let uniform = |slot: &mut Option<usize>, v: usize, what: &str| -> Result<()> {
            match *slot {
                Some(prev) if prev != v => Err(plan_err(format!(
                    "{what} differ across layers ({prev} vs {v}); configs are uniform"
                ))),
                _ => {
                    *slot = Some(v);
                    Ok(())
                }
            }
        };
        let mut mamba_dims = None;
        for &i in &self.kept_layers {
            match parent.layer_pattern[i] {
                LayerKind::Mamba => {
                    let k = self
                        .mamba
                        .get(&i)
                        .ok_or_else(|| plan_err(format!("no Mamba keep-set for layer {i}")))?;
                    check_group_order(&k.heads, parent.mamba_heads, parent.mamba_groups)?;
                    check_keep("mamba channels", &k.channels, parent.mamba_head_dim)?;
                    check_ascending("mamba channels", &k.channels)?;
                    let dims = (k.heads.len(), k.channels.len());
                    if mamba_dims.is_some_and(|d| d != dims) {
                        return Err(plan_err("Mamba keep-set sizes differ across layers"));
                    }
                    mamba_dims = Some(dims);
                }
                LayerKind::Ffn => {
                    let k = self
                        .ffn
                        .get(&i)
                        .ok_or_else(|| plan_err(format!("no FFN keep-set for layer {i}")))?;
                    check_keep("ffn neurons", k, parent.d_ffn)?;
                    uniform(&mut ffn_width, k.len(), "FFN widths")?;
                }
                LayerKind::Attention => {
                    if let Some(k) = self.attention.get(&i) {
                        check_keep("attention heads", k, parent.attn_heads)?;
                        uniform(&mut att_heads, k.len(), "attention head counts")?;
                    } else {
                        uniform(&mut att_heads, parent.attn_heads, "attention head counts")?;
                    }
                }
            }
        }
        let stray = |keys: Vec<usize>, kind: LayerKind| -> Result<()> {
            for i in keys {
                if !self.kept_layers.contains(&i) || parent.layer_pattern.get(i) != Some(&kind) {
                    return Err(plan_err(format!(
                        "keep-set for layer {i} does not match a kept {kind} layer"
                    )));
                }
            }
            Ok(())
        };
        stray(self.mamba.keys().copied().collect(), LayerKind::Mamba)?;
        stray(self.ffn.keys().copied().collect(), LayerKind::Ffn)?;
        stray(self.attention.keys().copied().collect(), LayerKind::Attention)?;

        let (mh, md) = mamba_dims.unwrap_or((self.targets.mamba_heads, self.targets.mamba_head_dim));
        let cfg = ModelConfig {
            n_layers: self.kept_layers.len(),
            layer_pattern: self.kept_layers.iter().map(|&i| parent.layer_pattern[i]).collect(),
            d_model: self.embedding.len(),
            d_ffn: ffn_width.unwrap_or(self.targets.d_ffn),
            mamba_heads: mh,
            mamba_head_dim: md,
            attn_heads: att_heads.unwrap_or(self.targets.attn_heads),
            ..parent.clone()
        };
        let t = &self.targets;
        let got = PruneTargets::of(&cfg);
        if got != *t {
            return Err(plan_err(format!(
                "keep-sets give {got:?} but the plan's targets are {t:?}"
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("prune plan: {e}")))
    }
}

/// Applies every trim of `plan` in the fixed order depth → embedding →
/// Mamba → FFN → attention heads.
pub fn apply_plan(model: &HybridModel, plan: &PrunePlan) -> Result<HybridModel> {
    let want = plan.result_config(&model.config)?;
    let mut m = trim_depth(model, &plan.kept_layers)?;
    m = trim_embedding(&m, &plan.embedding)?;
    let parent_cfg = &model.config;
    let mut blocks = Vec::with_capacity(m.params.blocks.len());
    for (pos, &orig) in plan.kept_layers.iter().enumerate() {
        let b = &m.params.blocks[pos];
        blocks.push(match b {
            Block::Mamba(w) => {
                let k = &plan.mamba[&orig];
                Block::Mamba(trim_mamba(w, parent_cfg, &k.heads, &k.channels)?)
            }
            Block::Ffn(w) => Block::Ffn(trim_ffn(w, &plan.ffn[&orig])?),
            Block::Attention(w) => match plan.attention.get(&orig) {
                Some(k) => Block::Attention(trim_attention_heads(w, parent_cfg, k)?),
                None => Block::Attention(w.clone()),
            },
        });
    }
    HybridModel::from_parts(
        want,
        ModelParams {
            blocks,
            ..m.params
        },
    )
}

/// Which scores drive Mamba and FFN ranking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMetric {
    #[default]
    L2,
    Flap,
}

/// Builds a plan reaching `targets` from one set of parent scores. Scores
/// are only required for axes that actually shrink.
pub fn build_plan(
    model: &HybridModel,
    scores: &ScoreSet,
    targets: &PruneTargets,
    metric: RankingMetric,
) -> Result<PrunePlan> {
    let cfg = &model.config;
    targets.validate_for(cfg)?;
    let missing = |what: &str| Error::Usage(format!("pruning needs {what} scores"));
    let all = |n: usize| (0..n).collect::<Vec<_>>();

    let kept_layers = if targets.n_layers < cfg.n_layers {
        let kld = scores.layer_kld.as_ref().ok_or_else(|| missing("layer_kld"))?;
        if kld.len() != cfg.n_layers {
            return Err(plan_err("layer_kld length does not match the model"));
        }
        let drop = cfg.n_layers - targets.n_layers;
        let mut keep: Vec<usize> = layers_by_importance(kld)[drop..].to_vec();
        keep.sort_unstable();
        keep
    } else {
        all(cfg.n_layers)
    };

    let embedding = if targets.d_model < cfg.d_model {
        top_k(scores.emb.as_ref().ok_or_else(|| missing("emb"))?, targets.d_model)
    } else {
        all(cfg.d_model)
    };

    let mut mamba = BTreeMap::new();
    let mut ffn = BTreeMap::new();
    let mut attention = BTreeMap::new();
    let k_g = targets.mamba_heads / cfg.mamba_groups;
    for &i in &kept_layers {
        match cfg.layer_pattern[i] {
            LayerKind::Mamba => {
                let keep = if targets.mamba_heads == cfg.mamba_heads
                    && targets.mamba_head_dim == cfg.mamba_head_dim
                {
                    MambaKeep {
                        heads: all(cfg.mamba_heads),
                        channels: all(cfg.mamba_head_dim),
                    }
                } else {
                    let sc: MambaScores = match metric {
                        RankingMetric::L2 => {
                            scores.mamba.get(&i).cloned().ok_or_else(|| missing("mamba"))?
                        }
                        RankingMetric::Flap => scores.flap_as_mamba(model, i, None)?,
                    };
                    let s = sc.matrix();
                    let s_d = channel_scores(&s)?;
                    let channels = select_channels(&s_d, targets.mamba_head_dim)?;
                    let f_h = score_heads(&s, &channels)?;
                    let heads = rank_group_constrained(&f_h, cfg.mamba_groups, k_g)?;
                    MambaKeep { heads, channels }
                };
                mamba.insert(i, keep);
            }
            LayerKind::Ffn => {
                let keep = if targets.d_ffn == cfg.d_ffn {
                    all(cfg.d_ffn)
                } else {
                    let sc = match metric {
                        RankingMetric::L2 => scores.ffn.get(&i),
                        RankingMetric::Flap => scores.flap.get(&i),
                    }
                    .ok_or_else(|| missing("ffn"))?;
                    top_k(sc, targets.d_ffn)
                };
                ffn.insert(i, keep);
            }
            LayerKind::Attention => {
                let keep = if targets.attn_heads == cfg.attn_heads {
                    all(cfg.attn_heads)
                } else {
                    let sc = match metric {
                        RankingMetric::L2 => scores.att.get(&i).cloned().ok_or_else(|| missing("att"))?,
                        RankingMetric::Flap => scores.flap_attention_heads(model, i)?,
                    };
                    top_k(&sc, targets.attn_heads)
                };
                attention.insert(i, keep);
            }
        }
    }
    let plan = PrunePlan {
        targets: *targets,
        kept_layers,
        embedding,
        mamba,
        ffn,
        attention,
    };
    plan.result_config(cfg)?;
    Ok(plan)
}

/// Config obtained by shrinking `cfg` to `targets` (layers removed by
/// `kept_layers`).
pub fn target_config(cfg: &ModelConfig, targets: &PruneTargets, kept_layers: &[usize]) -> ModelConfig {
    ModelConfig {
        n_layers: kept_layers.len(),
        layer_pattern: kept_layers.iter().map(|&i| cfg.layer_pattern[i]).collect(),
        d_model: targets.d_model,
        d_ffn: targets.d_ffn,
        mamba_heads: targets.mamba_heads,
        mamba_head_dim: targets.mamba_head_dim,
        attn_heads: targets.attn_heads,
        ..cfg.clone()
    }
}
