//! Command-line driver for the pruning and distillation pipeline.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hybridprune::ablation::{axes_csv, compare_metrics, comparison_csv, default_cases, mamba_axes_sweep};
use hybridprune::data::{load_calibration, save_calibration, windows, BatchSampler, MarkovChain};
use hybridprune::distill::{distill_with_hook, evaluate, pretrain, trace_csv, KDConfig};
use hybridprune::importance::{Metric, ScoreOptions, ScoreSet};
use hybridprune::model::checkpoint;
use hybridprune::pruner::{apply_plan, build_plan, PrunePlan, PruneTargets, RankingMetric};
use hybridprune::search::{candidates_csv, run_search, SearchConfig, CSV_SCHEMA_VERSION};
use hybridprune::{Error, HybridModel, ModelConfig};

use manifest::Run;

#[derive(Parser)]
#[command(name = "hybridprune", version, about = "Prune and distill hybrid Mamba2 / attention / MLP models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialised model from a config file.
    InitToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample token sequences from a random Markov chain.
    GenData {
        /// Model config whose vocabulary size is used.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 64)]
        seqs: usize,
        #[arg(long, default_value_t = 128)]
        len: usize,
        /// Successors per token in the chain.
        #[arg(long, default_value_t = 4)]
        branching: usize,
        /// Seed of the chain itself; sequences use `--seed`.
        #[arg(long, default_value_t = 0)]
        chain_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on next-token prediction.
    Pretrain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training config (same keys as distillation).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss and learning-rate CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compute importance scores over calibration data.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Comma-separated subset of mamba,ffn,emb,flap,att,layer_kld.
        #[arg(long, value_delimiter = ',', default_value = "mamba,ffn,emb,flap,att,layer_kld")]
        metrics: Vec<Metric>,
        /// Channels per head used to score Mamba heads.
        #[arg(long)]
        k_d: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-layer KL importances as CSV.
        #[arg(long)]
        kld_csv: Option<PathBuf>,
    },
    /// Apply a plan, or build one from scores and target widths.
    Prune(PruneArgs),
    /// Search a grid of architectures under a parameter budget.
    Search(SearchArgs),
    /// Distil a teacher into a student.
    Distill {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Mean cross-entropy and, with a teacher, forward KL to it.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot losses of L2 and FLAP rankings at equal targets.
    CompareMetrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mamba heads versus head channels pruned alone.
    MambaAxes {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,0.75,0.5,0.25")]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 64)]
        proxy_seq_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Plan JSON to apply. Without it a plan is built from `--scores`.
    #[arg(long, conflicts_with = "scores")]
    plan: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Where to save the plan that was applied.
    #[arg(long)]
    plan_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "l2")]
    ranking: Ranking,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    emb: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_channels: Option<usize>,
    #[arg(long)]
    att_heads: Option<usize>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    /// Data for zero-shot ranking.
    #[arg(long)]
    calib: PathBuf,
    /// Data for the short distillation runs.
    #[arg(long)]
    train: PathBuf,
    /// Data for re-ranking after distillation; defaults to `--calib`.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Search file with the axis lists and defaults.
    #[arg(long)]
    config: PathBuf,
    /// Distillation config for the short runs.
    #[arg(long)]
    kd_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    kd_tokens: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Candidate table (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Plan JSON for the winning candidate.
    #[arg(long)]
    plan_out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Ranking {
    L2,
    Flap,
}

impl From<Ranking> for RankingMetric {
    fn from(r: Ranking) -> Self {
        match r {
            Ranking::L2 => RankingMetric::L2,
            Ranking::Flap => RankingMetric::Flap,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(std::fs::write(path, text).map_err(|e| Error::io(path, e))?)
}

fn load_model(run: &mut Run, path: &Path) -> Result<HybridModel> {
    run.input(path);
    let (m, _) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(m)
}

fn load_data(run: &mut Run, path: &Path) -> Result<Vec<Vec<u32>>> {
    run.input(path);
    load_calibration(path).with_context(|| format!("loading {}", path.display()))
}

fn load_kd(path: &Path, seed: Option<u64>) -> Result<KDConfig> {
    let mut cfg = KDConfig::from_toml_str(&read_text(path)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn save_model(run: &mut Run, path: &Path, model: &HybridModel) -> Result<()> {
    run.output(path);
    checkpoint::save(path, model, Some(&run.header_value()))?;
    Ok(())
}

fn sampler(data: &[Vec<u32>], seq_len: usize, seed: u64) -> Result<BatchSampler> {
    Ok(BatchSampler::new(windows(data, seq_len), seed)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitToy { config, seed, out } => {
            let mut run = Run::start("init-toy", Some(&config), Some(seed));
            let cfg = ModelConfig::from_toml_file(&config)?;
            let model = HybridModel::init(cfg, seed)?;
            save_model(&mut run, &out, &model)?;
            println!("{} parameters", model.num_params());
            run.finish()
        }
        Command::GenData { config, seqs, len, branching, chain_seed, seed, out } => {
            let mut run = Run::start("gen-data", Some(&config), Some(seed));
            let cfg = ModelConfig::from_toml_file(&config)?;
            let chain = MarkovChain::new(cfg.vocab, branching, chain_seed)?;
            let data = chain.corpus(seqs, len, seed);
            run.output(&out);
            save_calibration(&out, &data)?;
            println!("mean transition entropy {:.4} nats", chain.mean_transition_entropy());
            run.finish()
        }
        Command::Pretrain { model, data, config, seed, out, trace } => {
            let mut run = Run::start("pretrain", Some(&config), seed);
            let cfg = load_kd(&config, seed)?;
            let mut m = load_model(&mut run, &model)?;
            let seqs = load_data(&mut run, &data)?;
            let rows = pretrain(&mut m, &mut sampler(&seqs, cfg.seq_len, cfg.seed)?, &cfg)?;
            save_model(&mut run, &out, &m)?;
            if let Some(t) = trace {
                run.output(&t);
                write_text(&t, &trace_csv(&rows))?;
            }
            if let Some(last) = rows.last() {
                println!("final loss {:.6}", last.loss);
            }
            run.finish()
        }
        Command::Score { model, calib, metrics, k_d, out, kld_csv } => {
            let mut run = Run::start("score", None, None);
            let m = load_model(&mut run, &model)?;
            let data = load_data(&mut run, &calib)?;
            let opts = ScoreOptions { k_d, ..ScoreOptions::default() };
            let scores = ScoreSet::compute(&m, &data, &metrics, &opts)?;
            run.output(&out);
            write_text(&out, &scores.to_json())?;
            if let Some(p) = kld_csv {
                run.output(&p);
                write_text(&p, &scores.layer_kld_csv(&m)?)?;
            }
            run.finish()
        }
        Command::Prune(a) => prune(a),
        Command::Search(a) => search(a),
        Command::Distill { student, teacher, data, config, seed, out, trace } => {
            let mut run = Run::start("distill", Some(&config), seed);
            let cfg = load_kd(&config, seed)?;
            let mut s = load_model(&mut run, &student)?;
            let t = load_model(&mut run, &teacher)?;
            let seqs = load_data(&mut run, &data)?;
            let mut sm = sampler(&seqs, cfg.seq_len, cfg.seed)?;
            let header = run.header_value();
            let out_path = out.clone();
            let mut hook = |step: usize, model: &HybridModel| {
                let mut p = out_path.as_os_str().to_owned();
                p.push(format!(".step{step}"));
                checkpoint::save(Path::new(&p), model, Some(&header))
            };
            let rows = distill_with_hook(&mut s, &t, &mut sm, &cfg, Some(&mut hook))?;
            save_model(&mut run, &out, &s)?;
            if let Some(tp) = trace {
                run.output(&tp);
                write_text(&tp, &trace_csv(&rows))?;
            }
            if let Some(last) = rows.last() {
                println!("final loss {:.6}", last.loss);
            }
            run.finish()
        }
        Command::Eval { model, teacher, data, tau, out } => {
            let mut run = Run::start("eval", None, None);
            let m = load_model(&mut run, &model)?;
            let t = teacher.as_deref().map(|p| load_model(&mut run, p)).transpose()?;
            let seqs = load_data(&mut run, &data)?;
            let report = evaluate(&m, t.as_ref(), &seqs, tau)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(o) = out {
                run.output(&o);
                write_text(&o, &text)?;
            }
            run.finish()
        }
        Command::CompareMetrics { model, calib, out } => {
            let mut run = Run::start("compare-metrics", None, None);
            let m = load_model(&mut run, &model)?;
            let data = load_data(&mut run, &calib)?;
            let metrics = [Metric::Mamba, Metric::Ffn, Metric::Emb, Metric::Flap, Metric::Att];
            let scores = ScoreSet::compute(&m, &data, &metrics, &ScoreOptions::default())?;
            let rows = compare_metrics(&m, &scores, &default_cases(&m.config), &data)?;
            run.output(&out);
            write_text(&out, &comparison_csv(&rows)?)?;
            run.finish()
        }
        Command::MambaAxes { model, calib, fractions, proxy_seq_len, out } => {
            let mut run = Run::start("mamba-axes", None, None);
            let m = load_model(&mut run, &model)?;
            let data = load_data(&mut run, &calib)?;
            let scores = ScoreSet::compute(&m, &data, &[Metric::Mamba], &ScoreOptions::default())?;
            let rows = mamba_axes_sweep(&m, &scores, &fractions, &data, proxy_seq_len)?;
            run.output(&out);
            write_text(&out, &axes_csv(&rows)?)?;
            run.finish()
        }
    }
}

fn prune(a: PruneArgs) -> Result<()> {
    let mut run = Run::start("prune", None, None);
    let m = load_model(&mut run, &a.model)?;
    let plan = match (&a.plan, &a.scores) {
        (Some(p), _) => {
            run.input(p);
            PrunePlan::from_json(&read_text(p)?)?
        }
        (None, Some(s)) => {
            run.input(s);
            let scores = ScoreSet::from_json(&read_text(s)?)?;
            let base = PruneTargets::of(&m.config);
            let targets = PruneTargets {
                n_layers: a.layers.unwrap_or(base.n_layers),
                d_model: a.emb.unwrap_or(base.d_model),
                d_ffn: a.ffn.unwrap_or(base.d_ffn),
                mamba_heads: a.heads.unwrap_or(base.mamba_heads),
                mamba_head_dim: a.head_channels.unwrap_or(base.mamba_head_dim),
                attn_heads: a.att_heads.unwrap_or(base.attn_heads),
            };
            build_plan(&m, &scores, &targets, a.ranking.into())?
        }
        (None, None) => {
            return Err(Error::Usage("prune needs --plan or --scores".into()).into());
        }
    };
    let pruned = apply_plan(&m, &plan)?;
    save_model(&mut run, &a.out, &pruned)?;
    if let Some(p) = &a.plan_out {
        run.output(p);
        write_text(p, &plan.to_json())?;
    }
    println!("{} -> {} parameters", m.num_params(), pruned.num_params());
    run.finish()
}

fn search(a: SearchArgs) -> Result<()> {
    let mut run = Run::start("search", Some(&a.config), a.seed);
    let kd = match &a.kd_config {
        Some(p) => {
            run.input(p);
            load_kd(p, a.seed)?
        }
        None => KDConfig { seed: a.seed.unwrap_or(0), ..KDConfig::default() },
    };
    let mut cfg = SearchConfig::from_toml_str(&read_text(&a.config)?, kd)?;
    cfg.budget = a.budget.unwrap_or(cfg.budget);
    cfg.tolerance = a.tolerance.unwrap_or(cfg.tolerance);
    cfg.top_k = a.topk.unwrap_or(cfg.top_k);
    cfg.kd_tokens = a.kd_tokens.unwrap_or(cfg.kd_tokens);
    cfg.jobs = a.jobs.unwrap_or(cfg.jobs);
    cfg.validate()?;

    let m = load_model(&mut run, &a.model)?;
    run.input(&a.scores);
    let scores = ScoreSet::from_json(&read_text(&a.scores)?)?;
    let calib = load_data(&mut run, &a.calib)?;
    let train = windows(&load_data(&mut run, &a.train)?, cfg.kd.seq_len);
    let valid = match &a.valid {
        Some(p) => load_data(&mut run, p)?,
        None => calib.clone(),
    };
    let report = run_search(&m, &scores, &cfg, &calib, &train, &valid)?;
    run.manifest.csv_schema = Some(CSV_SCHEMA_VERSION);
    run.output(&a.out);
    write_text(&a.out, &candidates_csv(&report.ranked)?)?;
    let w = &report.winner;
    if let Some(p) = &a.plan_out {
        let plan = build_plan(&m, &scores, &w.targets(&m.config), cfg.metric)?;
        run.output(p);
        write_text(p, &plan.to_json())?;
    }
    println!(
        "winner: layers {} emb {} ffn {} heads {} head_channels {} ({} parameters)",
        w.n_layers, w.d_model, w.d_ffn, w.mamba_heads, w.mamba_head_dim, w.params
    );
    if report.kd_changed_order {
        println!("distillation changed the candidate order");
    }
    run.finish()
}

/// Maps library errors to the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    let lib = err.chain().find_map(|e| e.downcast_ref::<Error>());
    match lib {
        Some(Error::EmptyData(_)) => 3,
        Some(Error::Plan(_)) => 4,
        Some(Error::Divergence { .. }) => 5,
        Some(Error::Dimension(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
