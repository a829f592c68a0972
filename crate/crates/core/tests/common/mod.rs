//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hybridprune::model::params::Block;
use hybridprune::model::{ForwardOptions, Observer, Site};
use hybridprune::model::config::parse_pattern;
use hybridprune::pruner::{MambaKeep, PrunePlan, PruneTargets};
use hybridprune::{HybridModel, LayerKind, ModelConfig, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let len = rng.gen_range(1..=5);
    let pattern: String = (0..len).map(|_| *['M', '*', '-'].choose(rng).unwrap()).collect();
    let layer_pattern = parse_pattern(&pattern).unwrap();
    let d_model = rng.gen_range(3..=9);
    let groups = rng.gen_range(1..=3);
    let mamba_heads = groups * rng.gen_range(1..=3);
    let mamba_head_dim = rng.gen_range(1..=4);
    let cfg = ModelConfig {
        n_layers: len,
        layer_pattern,
        d_model,
        d_ffn: rng.gen_range(2..=10),
        mamba_heads,
        mamba_head_dim,
        mamba_groups: groups,
        ssm_state: rng.gen_range(1..=4),
        attn_heads: rng.gen_range(1..=3),
        attn_head_dim: rng.gen_range(1..=4),
        vocab: rng.gen_range(5..=20),
        conv_kernel: rng.gen_range(1..=4),
        norm_width: d_model,
        ssm_norm_width: mamba_heads * mamba_head_dim,
    };
    cfg.validate().unwrap();
    cfg
}

fn subset<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let k = rng.gen_range(1..=n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// A valid plan with random keep-sets. Heads keep a random order inside
/// each group.
pub fn random_plan<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> PrunePlan {
    let kept_layers = subset(cfg.n_layers, rng);
    let embedding = subset(cfg.d_model, rng);
    let per = cfg.mamba_heads / cfg.mamba_groups;
    let k_g = rng.gen_range(1..=per);
    let channels = subset(cfg.mamba_head_dim, rng);
    let ffn_keep = subset(cfg.d_ffn, rng);
    let att_keep = subset(cfg.attn_heads, rng);
    let mut mamba = BTreeMap::new();
    let mut ffn = BTreeMap::new();
    let mut attention = BTreeMap::new();
    for &i in &kept_layers {
        match cfg.layer_pattern[i] {
            LayerKind::Mamba => {
                let mut heads = Vec::new();
                for g in 0..cfg.mamba_groups {
                    let mut h: Vec<usize> = (g * per..(g + 1) * per).collect();
                    h.shuffle(rng);
                    heads.extend_from_slice(&h[..k_g]);
                }
                mamba.insert(
                    i,
                    MambaKeep {
                        heads,
                        channels: channels.clone(),
                    },
                );
            }
            LayerKind::Ffn => {
                ffn.insert(i, ffn_keep.clone());
            }
            LayerKind::Attention => {
                attention.insert(i, att_keep.clone());
            }
        }
    }
    PrunePlan {
        targets: PruneTargets {
            n_layers: kept_layers.len(),
            d_model: embedding.len(),
            d_ffn: ffn_keep.len(),
            mamba_heads: k_g * cfg.mamba_groups,
            mamba_head_dim: channels.len(),
            attn_heads: att_keep.len(),
        },
        kept_layers,
        embedding,
        mamba,
        ffn,
        attention,
    }
}

fn zero_cols(t: &mut Tensor, cols: &[usize]) {
    let c = t.shape()[1];
    for row in t.data_mut().chunks_mut(c) {
        for &j in cols {
            row[j] = 0.0;
        }
    }
}

fn zero_rows(t: &mut Tensor, rows: &[usize]) {
    let c = t.shape()[1];
    for &i in rows {
        t.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 0.0);
    }
}

fn zero_entries(t: &mut Tensor, idx: &[usize]) {
    for &i in idx {
        t.data_mut()[i] = 0.0;
    }
}

fn complement(keep: &[usize], n: usize) -> Vec<usize> {
    (0..n).filter(|i| !keep.contains(i)).collect()
}

/// Zeroes exactly the weights that make every component the plan drops
/// contribute nothing, leaving the architecture unchanged.
pub fn mask(model: &HybridModel, plan: &PrunePlan) -> HybridModel {
    let cfg = &model.config;
    let mut m = model.clone();
    let drop_emb = complement(&plan.embedding, cfg.d_model);
    zero_cols(&mut m.params.embedding, &drop_emb);
    let m_d = cfg.mamba_head_dim;
    for (i, block) in m.params.blocks.iter_mut().enumerate() {
        let kept = plan.kept_layers.contains(&i);
        match block {
            Block::Mamba(p) => {
                zero_cols(&mut p.w_o, &drop_emb);
                if !kept {
                    zero_cols(&mut p.w_o, &(0..cfg.d_model).collect::<Vec<_>>());
                    continue;
                }
                let keep = &plan.mamba[&i];
                let inner: Vec<usize> = (0..cfg.mamba_heads * m_d)
                    .filter(|&k| !(keep.heads.contains(&(k / m_d)) && keep.channels.contains(&(k % m_d))))
                    .collect();
                zero_cols(&mut p.w_x, &inner);
                zero_entries(&mut p.conv_x_bias, &inner);
            }
            Block::Attention(p) => {
                zero_cols(&mut p.w_o, &drop_emb);
                if !kept {
                    zero_cols(&mut p.w_o, &(0..cfg.d_model).collect::<Vec<_>>());
                    continue;
                }
                let hd = cfg.attn_head_dim;
                let cols: Vec<usize> = complement(&plan.attention[&i], cfg.attn_heads)
                    .into_iter()
                    .flat_map(|h| h * hd..(h + 1) * hd)
                    .collect();
                zero_cols(&mut p.w_v, &cols);
            }
            Block::Ffn(p) => {
                zero_rows(&mut p.w_2, &drop_emb);
                if !kept {
                    zero_rows(&mut p.w_2, &(0..cfg.d_model).collect::<Vec<_>>());
                    continue;
                }
                zero_rows(&mut p.w_1, &complement(&plan.ffn[&i], cfg.d_ffn));
            }
        }
    }
    m
}

pub fn random_tokens<R: Rng>(vocab: usize, n: usize, rng: &mut R) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Per-group selection by repeated arg-max (ties to the lower index).
pub fn brute_rank(f_h: &[f64], groups: usize, k_g: usize) -> Vec<usize> {
    let per = f_h.len() / groups;
    let mut out = Vec::new();
    for g in 0..groups {
        let mut left: Vec<usize> = (g * per..(g + 1) * per).collect();
        for _ in 0..k_g {
            let mut best = 0;
            for j in 1..left.len() {
                if f_h[left[j]] > f_h[left[best]] {
                    best = j;
                }
            }
            out.push(left.remove(best));
        }
    }
    out
}

/// Scores drawn from a handful of values so ties are common.
pub fn tie_heavy_scores<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0..4) as f64 * 0.5).collect()
}

/// Records the raw activations at one site.
pub struct Capture {
    pub key: (Option<usize>, Site),
    pub seqs: Vec<Tensor>,
}

impl Observer for Capture {
    fn wants(&self, layer: Option<usize>, site: Site) -> bool {
        (layer, site) == self.key
    }

    fn observe(&mut self, _layer: Option<usize>, _site: Site, acts: &Tensor, _seq_len: usize) {
        self.seqs.push(acts.clone());
    }
}

/// Activations at `key`, one `[L×C]` tensor per sequence, each sequence run
/// through its own forward pass.
pub fn capture(model: &HybridModel, calib: &[Vec<u32>], key: (Option<usize>, Site)) -> Vec<Tensor> {
    let mut cap = Capture { key, seqs: Vec::new() };
    for s in calib {
        model
            .forward_with(
                s,
                s.len(),
                ForwardOptions {
                    skip_layer: None,
                    observer: Some(&mut cap),
                },
            )
            .unwrap();
    }
    cap.seqs
}

/// `sqrt(Σ_sequences (mean over positions)²)` per channel.
pub fn l2_oracle(seqs: &[Tensor]) -> Vec<f64> {
    let c = seqs[0].shape()[1];
    let mut out = vec![0.0; c];
    for s in seqs {
        let l = s.shape()[0];
        for (j, o) in out.iter_mut().enumerate() {
            let mean = (0..l).map(|t| s.at2(t, j)).sum::<f64>() / l as f64;
            *o += mean * mean;
        }
    }
    out.into_iter().map(f64::sqrt).collect()
}

/// Two-pass FLAP score: sample variance over every position times the
/// squared norm of the matching weight slice.
pub fn flap_oracle(seqs: &[Tensor], w_sq: &[f64]) -> Vec<f64> {
    let rows: Vec<&[f64]> = seqs
        .iter()
        .flat_map(|s| (0..s.shape()[0]).map(move |t| s.row(t)))
        .collect();
    let n = rows.len() as f64;
    (0..w_sq.len())
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var * w_sq[j]
        })
        .collect()
}

/// Head-channel matrix, channel scores and head scores from a flat
/// head-major score vector.
pub fn mamba_oracle(flat: &[f64], heads: usize, head_dim: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let s: Vec<Vec<f64>> = flat.chunks(head_dim).map(|c| c.to_vec()).collect();
    let s_d: Vec<f64> = (0..head_dim)
        .map(|d| (0..heads).map(|h| s[h][d] * s[h][d]).sum::<f64>().sqrt())
        .collect();
    let f_h: Vec<f64> = s.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    (s, s_d, f_h)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

pub fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// The recurrence evaluated one step at a time.
pub fn naive_scan(x: &Tensor, b: &Tensor, c: &Tensor, a: &Tensor, d: &Tensor, dt: &Tensor) -> Vec<f64> {
    let (l, h, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (g, n) = (b.shape()[1], b.shape()[2]);
    let hpg = h / g;
    let mut y = vec![0.0; l * h * p];
    for head in 0..h {
        let grp = head / hpg;
        let mut s = vec![0.0; p * n];
        for t in 0..l {
            let delta = softplus(dt.data()[t * h + head]);
            let decay = (delta * a.data()[head]).exp();
            for ch in 0..p {
                let xv = x.data()[(t * h + head) * p + ch];
                let mut out = d.data()[head] * xv;
                for k in 0..n {
                    let bk = b.data()[(t * g + grp) * n + k];
                    let ck = c.data()[(t * g + grp) * n + k];
                    s[ch * n + k] = decay * s[ch * n + k] + delta * bk * xv;
                    out += ck * s[ch * n + k];
                }
                y[(t * h + head) * p + ch] = out;
            }
        }
    }
    y
}

pub struct ScanInputs {
    pub x: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub a: Tensor,
    pub d: Tensor,
    pub dt: Tensor,
}

pub fn random_inputs(rng: &mut ChaCha8Rng, l: usize, h: usize, p: usize, g: usize, n: usize) -> ScanInputs {
    ScanInputs {
        x: Tensor::randn(&[l, h, p], 1.0, rng),
        b: Tensor::randn(&[l, g, n], 1.0, rng),
        c: Tensor::randn(&[l, g, n], 1.0, rng),
        a: Tensor::uniform(&[h], -2.0, -0.05, rng),
        d: Tensor::randn(&[h], 1.0, rng),
        dt: Tensor::randn(&[l, h], 1.0, rng),
    }
}

/// `(layers, emb, ffn, heads, head channels, params)` for every grid point
/// that survives plan construction, found by pruning the parent for real
/// and counting the resulting tensors, filtered to the budget.
pub fn brute_enumerate(
    parent: &HybridModel,
    scores: &hybridprune::importance::ScoreSet,
    grid: &hybridprune::search::SearchGrid,
    budget: u64,
    tol: f64,
) -> Vec<(usize, usize, usize, usize, usize, u64)> {
    use hybridprune::pruner::{apply_plan, build_plan, RankingMetric};
    let mut want = Vec::new();
    for &l in &grid.n_layers {
        for &e in &grid.d_model {
            for &f in &grid.d_ffn {
                for &h in &grid.mamba_heads {
                    for &d in &grid.mamba_head_dim {
                        let t = PruneTargets {
                            n_layers: l,
                            d_model: e,
                            d_ffn: f,
                            mamba_heads: h,
                            mamba_head_dim: d,
                            attn_heads: parent.config.attn_heads,
                        };
                        let Ok(plan) = build_plan(parent, scores, &t, RankingMetric::L2) else {
                            continue;
                        };
                        let n = apply_plan(parent, &plan).unwrap().num_params();
                        if (n as f64 - budget as f64).abs() <= tol * budget as f64 {
                            want.push((l, e, f, h, d, n));
                        }
                    }
                }
            }
        }
    }
    want.sort_unstable();
    want.dedup();
    want
}
