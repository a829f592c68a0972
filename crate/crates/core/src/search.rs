//! Architecture search under a parameter budget.
//!
//! Candidates come from the cross product of per-axis value lists. They are
//! ranked by zero-shot loss, the best few are briefly distilled and
//! re-ranked, and ties in the final loss are broken by an analytic
//! throughput proxy.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::BatchSampler;
use crate::distill::{distill, eval_ce, KDConfig};
use crate::error::{Error, Result};
use crate::importance::{csv_err, layers_by_importance, ScoreSet};
use crate::model::{param_count, HybridModel, LayerKind, ModelConfig};
use crate::pruner::{apply_plan, build_plan, target_config, PruneTargets, RankingMetric};

/// Loss gap under which two candidates count as tied.
pub const TIE_EPS: f64 = 1e-4;

/// Value lists for every searched axis.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub n_layers: Vec<usize>,
    pub d_model: Vec<usize>,
    pub d_ffn: Vec<usize>,
    pub mamba_heads: Vec<usize>,
    pub mamba_head_dim: Vec<usize>,
}

impl SearchGrid {
    fn axes(&self) -> [(&'static str, &Vec<usize>); 5] {
        [
            ("n_layers", &self.n_layers),
            ("d_model", &self.d_model),
            ("d_ffn", &self.d_ffn),
            ("mamba_heads", &self.mamba_heads),
            ("mamba_head_dim", &self.mamba_head_dim),
        ]
    }

    pub fn points(&self) -> usize {
        self.axes().iter().map(|(_, v)| v.len()).product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Position in enumeration order.
    pub index: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub mamba_heads: usize,
    pub mamba_head_dim: usize,
    pub params: u64,
    pub zero_shot_loss: Option<f64>,
    pub kd_loss: Option<f64>,
    pub throughput_proxy: Option<f64>,
    #[serde(default)]
    pub failed: bool,
}

impl Candidate {
    pub fn targets(&self, parent: &ModelConfig) -> PruneTargets {
        PruneTargets {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            mamba_heads: self.mamba_heads,
            mamba_head_dim: self.mamba_head_dim,
            attn_heads: parent.attn_heads,
        }
    }

    /// The loss used for final selection: post-KD when available.
    pub fn best_loss(&self) -> Option<f64> {
        if self.failed {
            return None;
        }
        self.kd_loss.or(self.zero_shot_loss)
    }
}

/// Layers kept when depth is reduced to `n_layers`, dropping the first
/// entries of `removal_order`.
pub fn kept_layers(n_total: usize, n_layers: usize, removal_order: &[usize]) -> Vec<usize> {
    let drop = n_total.saturating_sub(n_layers);
    let mut keep: Vec<usize> = (0..n_total).filter(|i| !removal_order[..drop].contains(i)).collect();
    keep.sort_unstable();
    keep
}

/// Cross product of the grid (each axis sorted and de-duplicated, crossed
/// in axis order) filtered to `|params − budget| ≤ tolerance · budget`.
/// Points wider than the parent or with head counts not divisible by the
/// group count are skipped. `removal_order` lists layers from least to most
/// important and decides which layers a shallower candidate drops.
pub fn enumerate_candidates(
    parent: &ModelConfig,
    grid: &SearchGrid,
    budget: u64,
    tolerance: f64,
    removal_order: &[usize],
) -> Result<Vec<Candidate>> {
    for (name, v) in grid.axes() {
        if v.is_empty() {
            return Err(Error::Parameter(format!("search axis {name} is empty")));
        }
    }
    if !(tolerance >= 0.0) {
        return Err(Error::Parameter(format!("tolerance {tolerance} must be ≥ 0")));
    }
    if removal_order.len() != parent.n_layers {
        return Err(Error::Parameter(format!(
            "layer removal order has {} entries for {} layers",
            removal_order.len(),
            parent.n_layers
        )));
    }
    let sorted = |v: &Vec<usize>| {
        let mut v = v.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (ls, es, fs, hs, ds) = (
        sorted(&grid.n_layers),
        sorted(&grid.d_model),
        sorted(&grid.d_ffn),
        sorted(&grid.mamba_heads),
        sorted(&grid.mamba_head_dim),
    );
    let slack = tolerance * budget as f64;
    let mut out = Vec::new();
    for &l in &ls {
        if l == 0 || l > parent.n_layers {
            continue;
        }
        let kept = kept_layers(parent.n_layers, l, removal_order);
        for &e in &es {
            for &f in &fs {
                for &h in &hs {
                    for &d in &ds {
                        let targets = PruneTargets {
                            n_layers: l,
                            d_model: e,
                            d_ffn: f,
                            mamba_heads: h,
                            mamba_head_dim: d,
                            attn_heads: parent.attn_heads,
                        };
                        if targets.validate_for(parent).is_err() {
                            continue;
                        }
                        let params = param_count(&target_config(parent, &targets, &kept));
                        if (params as f64 - budget as f64).abs() > slack {
                            continue;
                        }
                        out.push(Candidate {
                            index: out.len(),
                            n_layers: l,
                            d_model: e,
                            d_ffn: f,
                            mamba_heads: h,
                            mamba_head_dim: d,
                            params,
                            zero_shot_loss: None,
                            kd_loss: None,
                            throughput_proxy: None,
                            failed: false,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Multiply-accumulates per generated token at context length `seq_len`.
pub fn macs_per_token(cfg: &ModelConfig, seq_len: usize) -> u64 {
    let e = cfg.d_model as u64;
    let inner = cfg.mamba_inner() as u64;
    let bc = cfg.bc_width() as u64;
    let h = cfg.mamba_heads as u64;
    let k = cfg.conv_kernel as u64;
    let ds = cfg.ssm_state as u64;
    let att = cfg.attn_inner() as u64;
    let ctx = seq_len.max(1) as u64;
    let mut total = e * cfg.vocab as u64;
    for kind in &cfg.layer_pattern {
        total += match kind {
            LayerKind::Mamba => {
                e * (2 * inner + 2 * bc + h) + k * (inner + 2 * bc) + 2 * inner * ds + inner * e
            }
            LayerKind::Attention => 4 * e * att + 2 * ctx * att,
            LayerKind::Ffn => 2 * e * cfg.d_ffn as u64,
        };
    }
    total
}

/// Parent MACs divided by candidate MACs: larger means faster.
pub fn throughput_proxy(parent: &ModelConfig, cand: &ModelConfig, seq_len: usize) -> f64 {
    macs_per_token(parent, seq_len) as f64 / macs_per_token(cand, seq_len) as f64
}

/// Runs `f(0..n)` on up to `jobs` worker threads pulling from a shared
/// counter; results are returned in index order.
pub fn run_jobs<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Shared inputs for pruning candidates out of one parent.
pub struct SearchContext<'a> {
    pub parent: &'a HybridModel,
    pub scores: &'a ScoreSet,
    pub metric: RankingMetric,
    pub jobs: usize,
}

impl SearchContext<'_> {
    pub fn prune(&self, cand: &Candidate) -> Result<HybridModel> {
        let plan = build_plan(
            self.parent,
            self.scores,
            &cand.targets(&self.parent.config),
            self.metric,
        )?;
        apply_plan(self.parent, &plan)
    }
}

fn sort_by_loss(cands: &mut [Candidate], key: impl Fn(&Candidate) -> Option<f64>) {
    // stable: equal losses keep their incoming order
    cands.sort_by(|a, b| match (key(a), key(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

/// Prunes every candidate (no retraining), records its mean next-token
/// cross-entropy on `calib` and sorts ascending.
pub fn zero_shot_rank(
    ctx: &SearchContext<'_>,
    candidates: &[Candidate],
    calib: &[Vec<u32>],
) -> Result<Vec<Candidate>> {
    let losses = run_jobs(candidates.len(), ctx.jobs, |i| {
        ctx.prune(&candidates[i]).and_then(|m| eval_ce(&m, calib))
    });
    let mut out = candidates.to_vec();
    for (c, l) in out.iter_mut().zip(losses) {
        c.zero_shot_loss = Some(l?);
    }
    sort_by_loss(&mut out, |c| c.zero_shot_loss);
    Ok(out)
}

/// Distils each of the first `top_k` ranked candidates from the parent for
/// `kd_tokens` tokens (same hyperparameters and data order for all), then
/// re-ranks them by validation cross-entropy. Diverging candidates are
/// marked failed and ranked last.
pub fn lightweight_kd_rank(
    ctx: &SearchContext<'_>,
    ranked: &[Candidate],
    top_k: usize,
    kd_tokens: usize,
    train_windows: &[Vec<u32>],
    kd: &KDConfig,
    validation: &[Vec<u32>],
) -> Result<Vec<Candidate>> {
    if top_k > ranked.len() {
        return Err(Error::Parameter(format!(
            "top-k {top_k} exceeds {} candidates",
            ranked.len()
        )));
    }
    let seq_len = train_windows.first().map_or(0, |w| w.len());
    let steps = if seq_len == 0 {
        0
    } else {
        kd_tokens / (kd.batch_size * seq_len)
    };
    let cfg = KDConfig {
        total_steps: steps,
        warmup_steps: kd.warmup_steps.min(steps),
        ..kd.clone()
    };
    let results = run_jobs(top_k, ctx.jobs, |i| -> Result<Option<f64>> {
        let mut student = ctx.prune(&ranked[i])?;
        if steps > 0 {
            let mut data = BatchSampler::new(train_windows.to_vec(), cfg.seed)?;
            match distill(&mut student, ctx.parent, &mut data, &cfg) {
                Ok(_) => {}
                Err(Error::Divergence { .. }) => return Ok(None),
                Err(e) => return Err(e),
            }
        }
        match eval_ce(&student, validation) {
            Ok(l) if l.is_finite() => Ok(Some(l)),
            Ok(_) | Err(Error::Input(_)) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut out: Vec<Candidate> = ranked[..top_k].to_vec();
    for (c, r) in out.iter_mut().zip(results) {
        match r? {
            Some(l) => c.kd_loss = Some(l),
            None => c.failed = true,
        }
    }
    sort_by_loss(&mut out, |c| if c.failed { None } else { c.kd_loss });
    Ok(out)
}

/// Lowest loss wins; among candidates within `eps` of the best, the one
/// with the highest throughput proxy wins (then earlier rank).
pub fn select_winner(ranked: &[Candidate], eps: f64) -> Result<Candidate> {
    let best = ranked
        .iter()
        .filter_map(Candidate::best_loss)
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::EmptyData("no successful candidate to select".into()))?;
    let mut winner: Option<&Candidate> = None;
    for c in ranked {
        let Some(l) = c.best_loss() else { continue };
        if l > best + eps {
            continue;
        }
        let proxy = c.throughput_proxy.unwrap_or(f64::NEG_INFINITY);
        match winner {
            Some(w) if w.throughput_proxy.unwrap_or(f64::NEG_INFINITY) >= proxy => {}
            _ => winner = Some(c),
        }
    }
    Ok(winner.expect("best loss belongs to a candidate").clone())
}

/// Bumped whenever [`CSV_COLUMNS`] changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 10] = [
    "rank",
    "layers",
    "emb",
    "ffn",
    "heads",
    "head_channels",
    "params",
    "zero_shot_loss",
    "kd_loss",
    "throughput_proxy",
];

/// Search report rows in the given order, ranked from 1; missing values
/// are empty cells.
pub fn candidates_csv(cands: &[Candidate]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (rank, c) in cands.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            c.n_layers.to_string(),
            c.d_model.to_string(),
            c.d_ffn.to_string(),
            c.mamba_heads.to_string(),
            c.mamba_head_dim.to_string(),
            c.params.to_string(),
            opt(c.zero_shot_loss),
            if c.failed { "failed".into() } else { opt(c.kd_loss) },
            opt(c.throughput_proxy),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub grid: SearchGrid,
    pub budget: u64,
    pub tolerance: f64,
    pub top_k: usize,
    pub kd_tokens: usize,
    pub kd: KDConfig,
    pub metric: RankingMetric,
    pub jobs: usize,
    /// Context length for the throughput proxy.
    pub proxy_seq_len: usize,
}

/// The on-disk key/value form of a search. Axis lists are required;
/// everything else falls back to the defaults below.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchFile {
    n_layers: Vec<usize>,
    d_model: Vec<usize>,
    d_ffn: Vec<usize>,
    mamba_heads: Vec<usize>,
    mamba_head_dim: Vec<usize>,
    budget: u64,
    #[serde(default = "default_tolerance")]
    tolerance: f64,
    #[serde(default = "default_top_k")]
    top_k: usize,
    #[serde(default)]
    kd_tokens: usize,
    #[serde(default)]
    metric: RankingMetric,
    #[serde(default = "default_jobs")]
    jobs: usize,
    #[serde(default = "default_proxy_seq_len")]
    proxy_seq_len: usize,
}

fn default_tolerance() -> f64 {
    0.02
}
fn default_top_k() -> usize {
    3
}
fn default_jobs() -> usize {
    1
}
fn default_proxy_seq_len() -> usize {
    64
}

impl SearchConfig {
    /// Parses a flat search file; `kd` supplies the short distillation runs.
    pub fn from_toml_str(s: &str, kd: KDConfig) -> Result<Self> {
        let f: SearchFile =
            toml::from_str(s).map_err(|e| Error::Config(format!("search config: {e}")))?;
        let cfg = Self {
            grid: SearchGrid {
                n_layers: f.n_layers,
                d_model: f.d_model,
                d_ffn: f.d_ffn,
                mamba_heads: f.mamba_heads,
                mamba_head_dim: f.mamba_head_dim,
            },
            budget: f.budget,
            tolerance: f.tolerance,
            top_k: f.top_k,
            kd_tokens: f.kd_tokens,
            kd,
            metric: f.metric,
            jobs: f.jobs,
            proxy_seq_len: f.proxy_seq_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("tolerance {} is negative", self.tolerance)));
        }
        if self.top_k == 0 || self.jobs == 0 || self.proxy_seq_len == 0 {
            return Err(Error::Config("top_k, jobs and proxy_seq_len must be positive".into()));
        }
        self.kd.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    /// Every candidate in final order: distilled ones first (post-KD
    /// order), then the rest in zero-shot order.
    pub ranked: Vec<Candidate>,
    pub zero_shot_order: Vec<usize>,
    pub kd_order: Vec<usize>,
    pub winner: Candidate,
    /// Whether distillation changed the order of the distilled candidates.
    pub kd_changed_order: bool,
}

/// The full three-step procedure.
pub fn run_search(
    parent: &HybridModel,
    scores: &ScoreSet,
    cfg: &SearchConfig,
    calib: &[Vec<u32>],
    train_windows: &[Vec<u32>],
    validation: &[Vec<u32>],
) -> Result<SearchReport> {
    let pc = &parent.config;
    let removal_order = match &scores.layer_kld {
        Some(kld) => layers_by_importance(kld),
        None if cfg.grid.n_layers.iter().all(|&l| l >= pc.n_layers) => (0..pc.n_layers).collect(),
        None => return Err(Error::Usage("depth search needs layer_kld scores".into())),
    };
    let mut cands = enumerate_candidates(pc, &cfg.grid, cfg.budget, cfg.tolerance, &removal_order)?;
    if cands.is_empty() {
        return Err(Error::EmptyData(format!(
            "no grid point within {:.1}% of {} parameters",
            cfg.tolerance * 100.0,
            cfg.budget
        )));
    }
    for c in &mut cands {
        let kept = kept_layers(pc.n_layers, c.n_layers, &removal_order);
        let cc = target_config(pc, &c.targets(pc), &kept);
        c.throughput_proxy = Some(throughput_proxy(pc, &cc, cfg.proxy_seq_len));
    }
    let ctx = SearchContext {
        parent,
        scores,
        metric: cfg.metric,
        jobs: cfg.jobs,
    };
    let zs = zero_shot_rank(&ctx, &cands, calib)?;
    let k = cfg.top_k.min(zs.len());
    let kd = lightweight_kd_rank(&ctx, &zs, k, cfg.kd_tokens, train_windows, &cfg.kd, validation)?;
    let winner = select_winner(&kd, TIE_EPS)?;
    let zero_shot_order: Vec<usize> = zs.iter().map(|c| c.index).collect();
    let kd_order: Vec<usize> = kd.iter().map(|c| c.index).collect();
    let kd_changed_order = kd_order != zero_shot_order[..k];
    let mut ranked = kd;
    ranked.extend_from_slice(&zs[k..]);
    Ok(SearchReport {
        ranked,
        zero_shot_order,
        kd_order,
        winner,
        kd_changed_order,
    })
}
