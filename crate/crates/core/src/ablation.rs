//! Ablation harnesses: L2 versus FLAP ranking at equal prune targets, and
//! Mamba heads versus head channels pruned in isolation.

use serde::{Deserialize, Serialize};

use crate::distill::eval_ce;
use crate::error::{Error, Result};
use crate::importance::{csv_err, ScoreSet};
use crate::model::{param_count, HybridModel, ModelConfig};
use crate::pruner::{apply_plan, build_plan, PruneTargets, RankingMetric};
use crate::search::throughput_proxy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCase {
    pub pruning_type: String,
    pub configuration: String,
    pub targets: PruneTargets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub pruning_type: String,
    pub configuration: String,
    pub params: u64,
    pub l2_loss: f64,
    pub flap_loss: f64,
}

fn round_to(v: f64, multiple: usize) -> usize {
    let m = multiple.max(1);
    (((v / m as f64).round() as usize) * m).max(m)
}

/// A default case list: no pruning, three FFN widths, half the attention
/// heads, three Mamba head counts and one mixed configuration. Cases that
/// round to the same targets as an earlier one are dropped.
pub fn default_cases(cfg: &ModelConfig) -> Vec<ComparisonCase> {
    let base = PruneTargets::of(cfg);
    let g = cfg.mamba_groups;
    let mut cases = vec![ComparisonCase {
        pruning_type: "baseline".into(),
        configuration: "no pruning".into(),
        targets: base,
    }];
    for frac in [0.75, 0.5, 0.375] {
        let d_ffn = round_to(cfg.d_ffn as f64 * frac, 1);
        cases.push(ComparisonCase {
            pruning_type: "ffn".into(),
            configuration: format!("ffn = {d_ffn}"),
            targets: PruneTargets { d_ffn, ..base },
        });
    }
    let attn_heads = (cfg.attn_heads / 2).max(1);
    cases.push(ComparisonCase {
        pruning_type: "attention".into(),
        configuration: format!("att heads = {attn_heads}"),
        targets: PruneTargets { attn_heads, ..base },
    });
    for frac in [0.875, 0.75, 0.5] {
        let mamba_heads = round_to(cfg.mamba_heads as f64 * frac, g).min(cfg.mamba_heads);
        cases.push(ComparisonCase {
            pruning_type: "mamba".into(),
            configuration: format!("mamba heads = {mamba_heads}"),
            targets: PruneTargets { mamba_heads, ..base },
        });
    }
    let mixed = PruneTargets {
        d_model: round_to(cfg.d_model as f64 * 0.75, 1),
        d_ffn: round_to(cfg.d_ffn as f64 * 0.57, 1),
        mamba_heads: round_to(cfg.mamba_heads as f64 * 0.875, g).min(cfg.mamba_heads),
        ..base
    };
    cases.push(ComparisonCase {
        pruning_type: "mixed".into(),
        configuration: format!(
            "emb {} / ffn {} / heads {}",
            mixed.d_model, mixed.d_ffn, mixed.mamba_heads
        ),
        targets: mixed,
    });
    let mut seen = Vec::new();
    cases.retain(|c| {
        let fresh = !seen.contains(&c.targets);
        seen.push(c.targets);
        fresh
    });
    cases
}

/// Zero-shot loss of `targets` pruned with `metric`.
pub fn zero_shot_loss(
    model: &HybridModel,
    scores: &ScoreSet,
    targets: &PruneTargets,
    metric: RankingMetric,
    calib: &[Vec<u32>],
) -> Result<f64> {
    let plan = build_plan(model, scores, targets, metric)?;
    eval_ce(&apply_plan(model, &plan)?, calib)
}

/// Prunes every case with both rankings and records the zero-shot losses.
/// `scores` needs the L2 families that the cases shrink plus FLAP scores.
/// Embedding channels have no FLAP score; both columns use the L2 ranking
/// for that axis.
pub fn compare_metrics(
    model: &HybridModel,
    scores: &ScoreSet,
    cases: &[ComparisonCase],
    calib: &[Vec<u32>],
) -> Result<Vec<ComparisonRow>> {
    cases
        .iter()
        .map(|c| {
            let plan = build_plan(model, scores, &c.targets, RankingMetric::L2)?;
            let params = param_count(&plan.result_config(&model.config)?);
            Ok(ComparisonRow {
                pruning_type: c.pruning_type.clone(),
                configuration: c.configuration.clone(),
                params,
                l2_loss: zero_shot_loss(model, scores, &c.targets, RankingMetric::L2, calib)?,
                flap_loss: zero_shot_loss(model, scores, &c.targets, RankingMetric::Flap, calib)?,
            })
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pruning_type", "configuration", "params", "l2_loss", "flap_loss"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.pruning_type.clone(),
            r.configuration.clone(),
            r.params.to_string(),
            format!("{:.6}", r.l2_loss),
            format!("{:.6}", r.flap_loss),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MambaAxis {
    Heads,
    Channels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisRow {
    pub axis: MambaAxis,
    pub keep_fraction: f64,
    pub mamba_heads: usize,
    pub mamba_head_dim: usize,
    pub params: u64,
    pub loss: f64,
    pub throughput_proxy: f64,
}

/// Prunes Mamba heads alone and head channels alone to the same kept
/// fractions, everything else unchanged.
pub fn mamba_axes_sweep(
    model: &HybridModel,
    scores: &ScoreSet,
    fractions: &[f64],
    calib: &[Vec<u32>],
    proxy_seq_len: usize,
) -> Result<Vec<AxisRow>> {
    let cfg = &model.config;
    let base = PruneTargets::of(cfg);
    let mut rows = Vec::new();
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Parameter(format!("keep fraction {f} outside (0, 1]")));
        }
        for axis in [MambaAxis::Heads, MambaAxis::Channels] {
            let targets = match axis {
                MambaAxis::Heads => PruneTargets {
                    mamba_heads: round_to(cfg.mamba_heads as f64 * f, cfg.mamba_groups)
                        .min(cfg.mamba_heads),
                    ..base
                },
                MambaAxis::Channels => PruneTargets {
                    mamba_head_dim: round_to(cfg.mamba_head_dim as f64 * f, 1)
                        .min(cfg.mamba_head_dim),
                    ..base
                },
            };
            let plan = build_plan(model, scores, &targets, RankingMetric::L2)?;
            let pruned = apply_plan(model, &plan)?;
            rows.push(AxisRow {
                axis,
                keep_fraction: f,
                mamba_heads: targets.mamba_heads,
                mamba_head_dim: targets.mamba_head_dim,
                params: pruned.num_params(),
                loss: eval_ce(&pruned, calib)?,
                throughput_proxy: throughput_proxy(cfg, &pruned.config, proxy_seq_len),
            });
        }
    }
    Ok(rows)
}

pub fn axes_csv(rows: &[AxisRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "axis",
        "keep_fraction",
        "heads",
        "head_channels",
        "params",
        "loss",
        "throughput_proxy",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let axis = match r.axis {
            MambaAxis::Heads => "heads",
            MambaAxis::Channels => "channels",
        };
        w.write_record([
            axis.to_string(),
            format!("{:.4}", r.keep_fraction),
            r.mamba_heads.to_string(),
            r.mamba_head_dim.to_string(),
            r.params.to_string(),
            format!("{:.6}", r.loss),
            format!("{:.6}", r.throughput_proxy),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}
