//! Forward-only importance estimators.
//!
//! Activation aggregates are collected by an [`ActivationStats`] observer.
//! Each calibration sequence contributes the mean of its activations over
//! positions; sequences are then combined by an L2 norm. FLAP scores use a
//! mergeable mean/variance accumulator over every position instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::kd_loss;
use crate::error::{dim_err, Error, Result};
use crate::model::{Block, ForwardOptions, HybridModel, LayerKind, Observer, Site};
use crate::tensor::Tensor;

/// Number of calibration sequences stacked into one forward pass.
const CALIB_BATCH: usize = 8;

/// How per-sequence activations are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over positions, then L2 over sequences.
    #[default]
    MeanL2,
    /// Plain sum over positions and sequences (signed).
    RawSum,
}

/// Per-element mean-over-positions / L2-over-sequences accumulator. The raw
/// signed sum is kept alongside.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct L2Accumulator {
    sumsq: Vec<f64>,
    raw: Vec<f64>,
    sequences: u64,
}

impl L2Accumulator {
    pub fn new(width: usize) -> Self {
        Self {
            sumsq: vec![0.0; width],
            raw: vec![0.0; width],
            sequences: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.sumsq.len()
    }

    pub fn sequences(&self) -> u64 {
        self.sequences
    }

    /// Adds one sequence given as `[L×C]` rows.
    pub fn push_sequence(&mut self, rows: &[f64], width: usize) {
        if self.sumsq.is_empty() {
            *self = Self::new(width);
        }
        debug_assert_eq!(width, self.width());
        let len = rows.len() / width;
        if len == 0 {
            return;
        }
        let mut sum = vec![0.0; width];
        for r in rows.chunks_exact(width) {
            for (s, &v) in sum.iter_mut().zip(r) {
                *s += v;
            }
        }
        for ((sq, raw), s) in self.sumsq.iter_mut().zip(&mut self.raw).zip(&sum) {
            let mean = s / len as f64;
            *sq += mean * mean;
            *raw += s;
        }
        self.sequences += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        if other.sequences == 0 {
            return;
        }
        if self.sequences == 0 {
            *self = other.clone();
            return;
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
        for (a, b) in self.raw.iter_mut().zip(&other.raw) {
            *a += b;
        }
        self.sequences += other.sequences;
    }

    pub fn finish(&self, agg: Aggregation) -> Vec<f64> {
        match agg {
            Aggregation::MeanL2 => self.sumsq.iter().map(|v| v.sqrt()).collect(),
            Aggregation::RawSum => self.raw.clone(),
        }
    }
}

/// Streaming per-feature mean and sum of squared deviations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; width],
            m2: vec![0.0; width],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn push(&mut self, sample: &[f64]) {
        if self.mean.is_empty() {
            *self = Self::new(sample.len());
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, m2), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let delta = x - *m;
            *m += delta / n;
            *m2 += delta * (x - *m);
        }
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    /// Sample variance (denominator `N − 1`).
    pub fn variance(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(Error::Usage(format!(
                "variance needs at least 2 samples, have {}",
                self.count
            )));
        }
        let d = (self.count - 1) as f64;
        Ok(self.m2.iter().map(|m| m / d).collect())
    }
}

/// Key of one tapped activation: `layer` is `None` for the final norm.
pub type SiteKey = (Option<usize>, Site);

/// Observer collecting the requested aggregates.
#[derive(Clone, Debug, Default)]
pub struct ActivationStats {
    pub l2: BTreeMap<SiteKey, L2Accumulator>,
    pub moments: BTreeMap<SiteKey, Moments>,
}

impl ActivationStats {
    pub fn new(l2_sites: &[SiteKey], moment_sites: &[SiteKey]) -> Self {
        Self {
            l2: l2_sites.iter().map(|&k| (k, L2Accumulator::default())).collect(),
            moments: moment_sites.iter().map(|&k| (k, Moments::default())).collect(),
        }
    }

    /// Combines `other` into `self`, site by site.
    pub fn merge(&mut self, other: &Self) {
        for (k, v) in &other.l2 {
            self.l2.entry(*k).or_default().merge(v);
        }
        for (k, v) in &other.moments {
            self.moments.entry(*k).or_default().merge(v);
        }
    }

    /// Runs `model` over `calib` and feeds every tapped site.
    pub fn collect(&mut self, model: &HybridModel, calib: &[Vec<u32>]) -> Result<()> {
        for_each_batch(calib, CALIB_BATCH, |ids, seq_len| {
            model
                .forward_with(
                    ids,
                    seq_len,
                    ForwardOptions {
                        skip_layer: None,
                        observer: Some(self),
                    },
                )
                .map(|_| ())
        })
    }

    fn l2_get(&self, key: SiteKey) -> Result<&L2Accumulator> {
        self.l2
            .get(&key)
            .filter(|a| a.sequences > 0)
            .ok_or_else(|| Error::EmptyData(format!("no activations recorded at {key:?}")))
    }
}

impl Observer for ActivationStats {
    fn wants(&self, layer: Option<usize>, site: Site) -> bool {
        self.l2.contains_key(&(layer, site)) || self.moments.contains_key(&(layer, site))
    }

    fn observe(&mut self, layer: Option<usize>, site: Site, acts: &Tensor, seq_len: usize) {
        let width = *acts.shape().last().unwrap_or(&0);
        if width == 0 || seq_len == 0 {
            return;
        }
        if let Some(acc) = self.l2.get_mut(&(layer, site)) {
            for seq in acts.data().chunks(seq_len * width) {
                acc.push_sequence(seq, width);
            }
        }
        if let Some(m) = self.moments.get_mut(&(layer, site)) {
            for row in acts.data().chunks_exact(width) {
                m.push(row);
            }
        }
    }
}

/// Calls `f` on stacks of up to `max_batch` consecutive equal-length
/// sequences. Empty sequences are skipped; an all-empty set is an error.
pub fn for_each_batch(
    calib: &[Vec<u32>],
    max_batch: usize,
    mut f: impl FnMut(&[u32], usize) -> Result<()>,
) -> Result<()> {
    let seqs: Vec<&Vec<u32>> = calib.iter().filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(Error::EmptyData("calibration set has no tokens".into()));
    }
    let mut i = 0;
    let mut ids = Vec::new();
    while i < seqs.len() {
        let len = seqs[i].len();
        let mut j = i;
        ids.clear();
        while j < seqs.len() && j - i < max_batch.max(1) && seqs[j].len() == len {
            ids.extend_from_slice(seqs[j]);
            j += 1;
        }
        f(&ids, len)?;
        i = j;
    }
    Ok(())
}

/// Mean-over-positions / L2-over-sequences aggregate of explicit
/// per-sequence activations `[L×C]`.
pub fn aggregate(seqs: &[Tensor], agg: Aggregation) -> Result<Vec<f64>> {
    let mut acc = L2Accumulator::default();
    for s in seqs {
        let (_, c) = s.dims2()?;
        if acc.sequences > 0 && c != acc.width() {
            return Err(dim_err!("sequence width {c} vs {}", acc.width()));
        }
        acc.push_sequence(s.data(), c);
    }
    if acc.sequences == 0 {
        return Err(Error::EmptyData("no activations to aggregate".into()));
    }
    Ok(acc.finish(agg))
}

/// Which projection defines the Mamba head/channel activations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MambaSource {
    /// `LN(X)·W_x`.
    #[default]
    Wx,
    /// `LN(X)·W_z`.
    Wz,
    /// The gated-norm output entering `W_O`.
    OutProjInput,
}

impl MambaSource {
    fn site(self) -> Site {
        match self {
            MambaSource::Wx => Site::MambaX,
            MambaSource::Wz => Site::MambaZ,
            MambaSource::OutProjInput => Site::MambaOutProjInput,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub aggregation: Aggregation,
    pub mamba_source: MambaSource,
    /// Channels kept when computing head scores; all channels when `None`.
    pub k_d: Option<usize>,
    /// Adds the final norm to the embedding-score sites.
    pub emb_include_final_norm: bool,
}

/// Head×channel scores of one Mamba layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MambaScores {
    /// `[heads][head_dim]`.
    pub s: Vec<Vec<f64>>,
    pub s_d: Vec<f64>,
    pub f_h: Vec<f64>,
}

impl MambaScores {
    /// Derives `s_d` and the head scores from a raw `[heads×head_dim]`
    /// matrix, restricting head scores to the top `k_d` channels.
    pub fn from_matrix(s: &Tensor, k_d: Option<usize>) -> Result<Self> {
        let (_, m_d) = s.dims2()?;
        let s_d = channel_scores(s)?;
        let top = select_channels(&s_d, k_d.unwrap_or(m_d))?;
        let f_h = score_heads(s, &top)?;
        Ok(Self {
            s: (0..s.shape()[0]).map(|h| s.row(h).to_vec()).collect(),
            s_d,
            f_h,
        })
    }

    pub fn matrix(&self) -> Tensor {
        Tensor::from_rows(&self.s)
    }
}

/// `s_d`: L2 norm over heads of every channel column.
pub fn channel_scores(s: &Tensor) -> Result<Vec<f64>> {
    let (m_h, m_d) = s.dims2()?;
    Ok((0..m_d)
        .map(|d| (0..m_h).map(|h| s.at2(h, d).powi(2)).sum::<f64>().sqrt())
        .collect())
}

/// Indices of the `k` largest scores (ties → lower index), ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// The top `k_d` channels by `s_d`, returned in ascending order.
pub fn select_channels(s_d: &[f64], k_d: usize) -> Result<Vec<usize>> {
    if k_d == 0 || k_d > s_d.len() {
        return Err(Error::Parameter(format!(
            "k_d = {k_d} outside 1..={}",
            s_d.len()
        )));
    }
    Ok(top_k(s_d, k_d))
}

/// Head scores: L2 norm of every row of `s` restricted to `channels`.
pub fn score_heads(s: &Tensor, channels: &[usize]) -> Result<Vec<f64>> {
    let (m_h, m_d) = s.dims2()?;
    if channels.is_empty() {
        return Err(Error::Parameter("empty channel set".into()));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= m_d) {
        return Err(Error::Parameter(format!("channel {c} out of range {m_d}")));
    }
    Ok((0..m_h)
        .map(|h| channels.iter().map(|&d| s.at2(h, d).powi(2)).sum::<f64>().sqrt())
        .collect())
}

fn expect_kind(model: &HybridModel, layer: usize, kind: LayerKind) -> Result<()> {
    match model.config.layer_pattern.get(layer) {
        Some(&k) if k == kind => Ok(()),
        Some(&k) => Err(Error::Usage(format!("layer {layer} is {k}, not {kind}"))),
        None => Err(Error::Usage(format!(
            "layer {layer} out of range ({} layers)",
            model.config.n_layers
        ))),
    }
}

/// Raw `[heads×head_dim]` Mamba scores of one layer.
pub fn score_mamba(
    model: &HybridModel,
    layer: usize,
    calib: &[Vec<u32>],
    opts: &ScoreOptions,
) -> Result<MambaScores> {
    expect_kind(model, layer, LayerKind::Mamba)?;
    let key = (Some(layer), opts.mamba_source.site());
    let mut stats = ActivationStats::new(&[key], &[]);
    stats.collect(model, calib)?;
    mamba_from_stats(model, &stats, layer, opts)
}

fn mamba_from_stats(
    model: &HybridModel,
    stats: &ActivationStats,
    layer: usize,
    opts: &ScoreOptions,
) -> Result<MambaScores> {
    let cfg = &model.config;
    let flat = stats
        .l2_get((Some(layer), opts.mamba_source.site()))?
        .finish(opts.aggregation);
    let s = Tensor::new(vec![cfg.mamba_heads, cfg.mamba_head_dim], flat)?;
    MambaScores::from_matrix(&s, opts.k_d)
}

/// Per-neuron aggregate of the FFN pre-activation `LN(X)·W_1ᵀ`.
pub fn score_ffn(
    model: &HybridModel,
    layer: usize,
    calib: &[Vec<u32>],
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    expect_kind(model, layer, LayerKind::Ffn)?;
    let key = (Some(layer), Site::FfnPreAct);
    let mut stats = ActivationStats::new(&[key], &[]);
    stats.collect(model, calib)?;
    Ok(stats.l2_get(key)?.finish(opts.aggregation))
}

fn embedding_sites(model: &HybridModel, include_final: bool) -> Vec<SiteKey> {
    let mut sites: Vec<SiteKey> = (0..model.config.n_layers)
        .map(|i| (Some(i), Site::BlockInput))
        .collect();
    if include_final {
        sites.push((None, Site::FinalNorm));
    }
    sites
}

fn embedding_from_stats(
    model: &HybridModel,
    stats: &ActivationStats,
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    let mut total = vec![0.0; model.config.d_model];
    for key in embedding_sites(model, opts.emb_include_final_norm) {
        for (t, v) in total.iter_mut().zip(stats.l2_get(key)?.finish(opts.aggregation)) {
            *t += v;
        }
    }
    Ok(total)
}

/// Embedding-channel scores: per-site aggregates of every block's
/// normalised input, summed over sites.
pub fn score_embedding(
    model: &HybridModel,
    calib: &[Vec<u32>],
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    let sites = embedding_sites(model, opts.emb_include_final_norm);
    let mut stats = ActivationStats::new(&sites, &[]);
    stats.collect(model, calib)?;
    embedding_from_stats(model, &stats, opts)
}

/// `S_j = ‖w_j‖² · Var(X_j)` from squared weight norms and feature moments.
pub fn flap_scores(weight_sq_norms: &[f64], moments: &Moments) -> Result<Vec<f64>> {
    let var = moments.variance()?;
    if var.len() != weight_sq_norms.len() {
        return Err(dim_err!(
            "{} weight columns vs {} features",
            weight_sq_norms.len(),
            var.len()
        ));
    }
    Ok(weight_sq_norms.iter().zip(&var).map(|(w, v)| w * v).collect())
}

/// Squared norm of the output-projection weights attached to every input
/// feature of the layer's down/out projection.
fn out_proj_sq_norms(block: &Block) -> Result<Vec<f64>> {
    let rows = |w: &Tensor| -> Result<Vec<f64>> {
        let (r, _) = w.dims2()?;
        Ok((0..r).map(|j| w.row(j).iter().map(|v| v * v).sum()).collect())
    };
    match block {
        // x·W_O with W_O [inner×e]: feature j multiplies row j
        Block::Mamba(p) => rows(&p.w_o),
        Block::Attention(p) => rows(&p.w_o),
        // a·W_2ᵀ with W_2 [e×d_ffn]: feature j multiplies column j
        Block::Ffn(p) => {
            let (e, f) = p.w_2.dims2()?;
            Ok((0..f)
                .map(|j| (0..e).map(|i| p.w_2.at2(i, j).powi(2)).sum())
                .collect())
        }
    }
}

fn flap_site(model: &HybridModel, layer: usize) -> Result<SiteKey> {
    match model.config.layer_pattern.get(layer) {
        Some(LayerKind::Mamba) => Ok((Some(layer), Site::MambaOutProjInput)),
        Some(LayerKind::Ffn) => Ok((Some(layer), Site::FfnDownInput)),
        Some(LayerKind::Attention) => Ok((Some(layer), Site::AttnHeads)),
        None => Err(Error::Usage(format!("layer {layer} out of range"))),
    }
}

/// FLAP fluctuation scores for the inputs of a layer's output projection
/// (Mamba `W_O`, FFN `W_2` or attention `W_o`).
pub fn score_flap(model: &HybridModel, layer: usize, calib: &[Vec<u32>]) -> Result<Vec<f64>> {
    let key = flap_site(model, layer)?;
    let mut stats = ActivationStats::new(&[], &[key]);
    stats.collect(model, calib)?;
    flap_from_stats(model, &stats, layer)
}

fn flap_from_stats(model: &HybridModel, stats: &ActivationStats, layer: usize) -> Result<Vec<f64>> {
    let key = flap_site(model, layer)?;
    let w = out_proj_sq_norms(&model.params.blocks[layer])?;
    let m = stats.moments.get(&key).cloned().unwrap_or_default();
    flap_scores(&w, &m)
}

/// Head scores of an attention layer from its concatenated head outputs.
pub fn score_attention_heads(
    model: &HybridModel,
    layer: usize,
    calib: &[Vec<u32>],
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    expect_kind(model, layer, LayerKind::Attention)?;
    let key = (Some(layer), Site::AttnHeads);
    let mut stats = ActivationStats::new(&[key], &[]);
    stats.collect(model, calib)?;
    attention_from_stats(model, &stats, layer, opts)
}

fn attention_from_stats(
    model: &HybridModel,
    stats: &ActivationStats,
    layer: usize,
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    let flat = stats
        .l2_get((Some(layer), Site::AttnHeads))?
        .finish(opts.aggregation);
    Ok(flat
        .chunks(model.config.attn_head_dim)
        .map(|h| h.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Mean over positions of `KL(p_full ‖ p_ablated)` at unit temperature when
/// each layer's residual contribution is removed in turn.
pub fn layer_importance_kld(model: &HybridModel, calib: &[Vec<u32>]) -> Result<Vec<f64>> {
    let n = model.config.n_layers;
    let mut total = vec![0.0; n];
    let mut positions = 0usize;
    for_each_batch(calib, CALIB_BATCH, |ids, seq_len| {
        let full = model.forward_with(ids, seq_len, ForwardOptions::default())?;
        for (l, t) in total.iter_mut().enumerate() {
            let ablated = model.forward_with(
                ids,
                seq_len,
                ForwardOptions {
                    skip_layer: Some(l),
                    observer: None,
                },
            )?;
            *t += kd_loss(&full, &ablated, 1.0)? * ids.len() as f64;
        }
        positions += ids.len();
        Ok(())
    })?;
    Ok(total.into_iter().map(|t| (t / positions as f64).max(0.0)).collect())
}

/// Score families selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mamba,
    Ffn,
    Emb,
    Flap,
    Att,
    LayerKld,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Mamba,
        Metric::Ffn,
        Metric::Emb,
        Metric::Flap,
        Metric::Att,
        Metric::LayerKld,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mamba => "mamba",
            Metric::Ffn => "ffn",
            Metric::Emb => "emb",
            Metric::Flap => "flap",
            Metric::Att => "att",
            Metric::LayerKld => "layer_kld",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown metric '{s}' (expected one of mamba, ffn, emb, flap, att, layer_kld)"
                ))
            })
    }
}

/// Every score computed for one model. Maps are keyed by layer index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mamba: BTreeMap<usize, MambaScores>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ffn: BTreeMap<usize, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emb: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flap: BTreeMap<usize, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub att: BTreeMap<usize, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_kld: Option<Vec<f64>>,
}

impl ScoreSet {
    /// Computes the requested metrics with one shared activation pass plus
    /// one ablation pass per layer for `layer_kld`.
    pub fn compute(
        model: &HybridModel,
        calib: &[Vec<u32>],
        metrics: &[Metric],
        opts: &ScoreOptions,
    ) -> Result<Self> {
        let want: BTreeSet<Metric> = metrics.iter().copied().collect();
        let cfg = &model.config;
        let layers_of = |k: LayerKind| -> Vec<usize> {
            (0..cfg.n_layers).filter(|&i| cfg.layer_pattern[i] == k).collect()
        };
        let mut l2 = Vec::new();
        let mut moments = Vec::new();
        if want.contains(&Metric::Mamba) {
            l2.extend(layers_of(LayerKind::Mamba).into_iter().map(|i| (Some(i), opts.mamba_source.site())));
        }
        if want.contains(&Metric::Ffn) {
            l2.extend(layers_of(LayerKind::Ffn).into_iter().map(|i| (Some(i), Site::FfnPreAct)));
        }
        if want.contains(&Metric::Att) {
            l2.extend(layers_of(LayerKind::Attention).into_iter().map(|i| (Some(i), Site::AttnHeads)));
        }
        if want.contains(&Metric::Emb) {
            l2.extend(embedding_sites(model, opts.emb_include_final_norm));
        }
        let flap_layers: Vec<usize> = if want.contains(&Metric::Flap) {
            (0..cfg.n_layers).collect()
        } else {
            Vec::new()
        };
        for &i in &flap_layers {
            moments.push(flap_site(model, i)?);
        }

        let mut out = ScoreSet::default();
        if !l2.is_empty() || !moments.is_empty() {
            let mut stats = ActivationStats::new(&l2, &moments);
            stats.collect(model, calib)?;
            if want.contains(&Metric::Mamba) {
                for i in layers_of(LayerKind::Mamba) {
                    out.mamba.insert(i, mamba_from_stats(model, &stats, i, opts)?);
                }
            }
            if want.contains(&Metric::Ffn) {
                for i in layers_of(LayerKind::Ffn) {
                    let v = stats.l2_get((Some(i), Site::FfnPreAct))?.finish(opts.aggregation);
                    out.ffn.insert(i, v);
                }
            }
            if want.contains(&Metric::Att) {
                for i in layers_of(LayerKind::Attention) {
                    out.att.insert(i, attention_from_stats(model, &stats, i, opts)?);
                }
            }
            if want.contains(&Metric::Emb) {
                out.emb = Some(embedding_from_stats(model, &stats, opts)?);
            }
            for &i in &flap_layers {
                out.flap.insert(i, flap_from_stats(model, &stats, i)?);
            }
        }
        if want.contains(&Metric::LayerKld) {
            out.layer_kld = Some(layer_importance_kld(model, calib)?);
        }
        Ok(out)
    }

    /// FLAP scores of a Mamba layer reshaped to `[heads×head_dim]` so they
    /// can drive the same nested channel/head ranking as the L2 scores.
    pub fn flap_as_mamba(&self, model: &HybridModel, layer: usize, k_d: Option<usize>) -> Result<MambaScores> {
        let flat = self
            .flap
            .get(&layer)
            .ok_or_else(|| Error::Usage(format!("no FLAP scores for layer {layer}")))?;
        let s = Tensor::new(
            vec![model.config.mamba_heads, model.config.mamba_head_dim],
            flat.clone(),
        )?;
        MambaScores::from_matrix(&s, k_d)
    }

    /// FLAP scores of an attention layer summed over each head's features.
    pub fn flap_attention_heads(&self, model: &HybridModel, layer: usize) -> Result<Vec<f64>> {
        let flat = self
            .flap
            .get(&layer)
            .ok_or_else(|| Error::Usage(format!("no FLAP scores for layer {layer}")))?;
        Ok(flat
            .chunks(model.config.attn_head_dim)
            .map(|h| h.iter().sum())
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scores serialise")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("score report: {e}")))
    }

    /// `layer,kind,kld` rows for plotting layer importance.
    pub fn layer_kld_csv(&self, model: &HybridModel) -> Result<String> {
        let kld = self
            .layer_kld
            .as_ref()
            .ok_or_else(|| Error::Usage("report has no layer_kld scores".into()))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "kind", "kld"]).map_err(csv_err)?;
        for (i, v) in kld.iter().enumerate() {
            let kind = model.config.layer_pattern[i].to_string();
            w.write_record([i.to_string(), kind, format!("{v:.12e}")])
                .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("ascii csv"))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Layer indices sorted from least to most important (ties → lower index).
pub fn layers_by_importance(kld: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..kld.len()).collect();
    idx.sort_by(|&a, &b| kld[a].total_cmp(&kld[b]).then(a.cmp(&b)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_model(seed: u64) -> HybridModel {
        let cfg = ModelConfig::new("M*-M", 8, 16, 4, 4, 2, 4, 2, 32).unwrap();
        HybridModel::init(cfg, seed).unwrap()
    }

    fn calib() -> Vec<Vec<u32>> {
        (0..5u32)
            .map(|s| (0..6).map(|t| (s * 7 + t * 3) % 32).collect())
            .collect()
    }

    #[test]
    fn worked_channel_and_head_example() {
        let s = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]);
        let s_d = channel_scores(&s).unwrap();
        assert!((s_d[0] - 10f64.sqrt()).abs() < 1e-15);
        assert!((s_d[1] - 20f64.sqrt()).abs() < 1e-15);
        let top = select_channels(&s_d, 1).unwrap();
        assert_eq!(top, vec![1]);
        assert_eq!(score_heads(&s, &top).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn select_channels_ties_and_range() {
        assert_eq!(select_channels(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_channels(&[0.5, 3.0], 2).unwrap(), vec![0, 1]);
        assert!(matches!(select_channels(&[1.0], 0), Err(Error::Parameter(_))));
        assert!(matches!(select_channels(&[1.0], 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn flap_worked_example() {
        let mut m = Moments::default();
        m.push(&[0.0]);
        m.push(&[2.0]);
        assert_eq!(flap_scores(&[2.0], &m).unwrap(), vec![4.0]);
        let mut one = Moments::default();
        one.push(&[1.0]);
        assert!(matches!(flap_scores(&[1.0], &one), Err(Error::Usage(_))));
    }

    #[test]
    fn ffn_worked_example() {
        // X rows [[1,0],[0,1]] with W_1^i = [1,1]: pre-activations are [1,1]
        let pre = Tensor::from_rows(&[vec![1.0], vec![1.0]]);
        assert_eq!(aggregate(&[pre], Aggregation::MeanL2).unwrap(), vec![1.0]);
    }

    #[test]
    fn moments_merge_matches_single_stream() {
        let xs: Vec<f64> = (0..37).map(|i| ((i * 31 % 17) as f64).sin() * 3.0).collect();
        let mut all = Moments::default();
        for &x in &xs {
            all.push(&[x]);
        }
        let mut a = Moments::default();
        let mut b = Moments::default();
        for &x in &xs[..11] {
            a.push(&[x]);
        }
        for &x in &xs[11..] {
            b.push(&[x]);
        }
        a.merge(&b);
        assert_eq!(a.count(), all.count());
        assert!((a.variance().unwrap()[0] - all.variance().unwrap()[0]).abs() < 1e-9);
    }

    #[test]
    fn compute_matches_individual_scorers() {
        let m = toy_model(2);
        let c = calib();
        let opts = ScoreOptions::default();
        let set = ScoreSet::compute(&m, &c, &Metric::ALL, &opts).unwrap();
        assert_eq!(set.mamba[&0], score_mamba(&m, 0, &c, &opts).unwrap());
        assert_eq!(set.ffn[&2], score_ffn(&m, 2, &c, &opts).unwrap());
        assert_eq!(set.att[&1], score_attention_heads(&m, 1, &c, &opts).unwrap());
        assert_eq!(set.flap[&3], score_flap(&m, 3, &c).unwrap());
        assert_eq!(set.emb.as_ref().unwrap(), &score_embedding(&m, &c, &opts).unwrap());
        let kld = set.layer_kld.as_ref().unwrap();
        assert_eq!(kld.len(), 4);
        assert!(kld.iter().all(|&v| v >= 0.0));
        let back = ScoreSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back.mamba[&0].s_d.len(), 4);
        assert_eq!(back.mamba[&0].f_h.len(), 4);
    }

    #[test]
    fn wrong_layer_kind_is_usage_error() {
        let m = toy_model(0);
        let c = calib();
        let o = ScoreOptions::default();
        assert!(matches!(score_ffn(&m, 0, &c, &o), Err(Error::Usage(_))));
        assert!(matches!(score_mamba(&m, 2, &c, &o), Err(Error::Usage(_))));
        assert!(matches!(score_flap(&m, 9, &c), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_calibration() {
        let m = toy_model(0);
        let o = ScoreOptions::default();
        assert!(matches!(score_mamba(&m, 0, &[], &o), Err(Error::EmptyData(_))));
        assert!(matches!(score_mamba(&m, 0, &[vec![]], &o), Err(Error::EmptyData(_))));
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("bogus".parse::<Metric>().is_err());
    }

    #[test]
    fn importance_order_is_ascending_with_stable_ties() {
        assert_eq!(layers_by_importance(&[0.3, 0.1, 0.1, 0.0]), vec![3, 1, 2, 0]);
    }
}
