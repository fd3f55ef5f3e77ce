//! Command-line entry point.
//!
//! Artifacts live under `<out>/<pretrain digest>/`: `checkpoints/` for the
//! model, judge, corpus and covariance caches, `reports/` for run tables and
//! `logs/` for training curves. The output root is `--out`, else the
//! `MEMEDIT_OUT` environment variable, else `out`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use memedit_core::corpus::{build_corpus, Corpus};
use memedit_core::diagnostics::{adjusted_perplexity, layer_similarity, saliency_flows, summarize_perplexity};
use memedit_core::digest::sha256_hex;
use memedit_core::editors::{estimate_covariance, CovarianceStats, EditState};
use memedit_core::harness::{
    run_sequential_state, sweep, Clock, RunInputs, RunReport, SweepAxis, SweepValue,
};
use memedit_core::model::{ModelState, Predictor, Token};
use memedit_core::train::{fact_recall, train};

use crate::checkpoint::{read_checkpoint, read_covariance, write_checkpoint, write_covariance, Checkpoint};
use crate::codebook_file::write_codebook;
use crate::config::{ConfigError, Overrides, RunConfig};
use crate::corpus_file::{read_corpus, write_corpus};
use crate::report_file::{append_long, check_long, merge_long, read_long, write_report, LongRow, ReportId};

pub const OUT_ENV: &str = "MEMEDIT_OUT";

#[derive(Debug, Parser)]
#[command(name = "memedit", version, about = "Sequential memory-editing laboratory on a micro transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the corpus, train the model and save model and judge checkpoints.
    Pretrain(Common),
    /// Run the sequential-editing protocol on the pretrained model.
    Edit(Common),
    /// One editing run per value of an axis, plus a merged table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Diagnostics on checkpoints and generation logs.
    Diagnose {
        #[command(subcommand)]
        what: Diagnose,
    },
    /// Merge long-format report tables into one plot-ready table.
    Report {
        /// Comma-separated `report_long.csv` files.
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        /// Merge tables produced from different models.
        #[arg(long)]
        force: bool,
        /// Fail with exit code 3 if any value is out of range.
        #[arg(long)]
        check: bool,
        /// Merged table; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Layer,
    BatchSize,
    Epsilon,
    Method,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Layer => SweepAxis::Layer,
            Axis::BatchSize => SweepAxis::BatchSize,
            Axis::Epsilon => SweepAxis::Epsilon,
            Axis::Method => SweepAxis::Method,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Diagnose {
    /// Pearson correlation of every layer's `mlp_proj` between two checkpoints.
    Similarity {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        /// Long table to append to; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Mean saliency flows of the in-context prompts, per layer.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Judge-scored adjusted perplexity of a generation log.
    Perplexity {
        #[arg(long)]
        judge: PathBuf,
        /// Lines of `question<TAB>answer`, both space-separated words.
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = memedit_core::diagnostics::DEFAULT_NGRAM)]
        ngram: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Config file and the flags that override it.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config; all defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub last_layer: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Comma-separated edit counts.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<usize>>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&Overrides {
            seed: self.seed,
            steps: self.steps,
            method: self.method.clone(),
            layer: self.layer,
            last_layer: self.last_layer,
            batch_size: self.batch_size,
            epsilon: self.epsilon,
            schedule: self.schedule.clone(),
            out_dir: self.out.clone(),
        })
    }
}

/// How a command ended; maps onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Directory layout of one pretrained model.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        let out = cfg.out_dir.clone().unwrap_or_else(|| "out".into());
        Self { root: Path::new(&out).join(&cfg.pretrain_digest()[..16]) }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn model(&self) -> PathBuf {
        self.checkpoints().join("model.ckpt")
    }

    pub fn judge(&self) -> PathBuf {
        self.checkpoints().join("judge.ckpt")
    }

    pub fn corpus(&self) -> PathBuf {
        self.checkpoints().join("corpus.tsv")
    }

    pub fn covariance(&self, layer: usize, ridge: Option<f64>) -> PathBuf {
        let r = ridge.map_or_else(|| "auto".to_string(), |r| r.to_string());
        self.checkpoints().join(format!("cov_l{layer}_{r}.mat"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

/// Parses `args` and runs the command. Progress goes to stderr.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(c) => pretrain(&c.resolve()?),
        Command::Edit(c) => edit(&c.resolve()?),
        Command::Sweep { common, axis, values } => run_sweep(&common.resolve()?, axis.into(), values.as_deref()),
        Command::Diagnose { what } => diagnose(what),
        Command::Report { inputs, force, check, output } => report(&inputs, force, check, output.as_deref()),
    }
}

fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let layout = Layout::new(cfg);
    let corpus = build_corpus(cfg.seed, cfg.corpus_spec()).context("building the corpus")?;
    let init = ModelState::init(cfg.arch_spec(), cfg.seed).context("initializing the model")?;
    let t0 = Instant::now();
    let (model, log) = train(&init, &corpus, &cfg.train_config()).context("training")?;
    let recall = fact_recall(&model, &corpus.base_facts, false).context("measuring recall")?;
    eprintln!(
        "trained {} steps in {:.1}s: loss {:.4} -> {:.4}, base-fact recall {recall:.3}",
        cfg.train.steps,
        t0.elapsed().as_secs_f64(),
        log.initial_loss().unwrap_or(f64::NAN),
        log.final_loss().unwrap_or(f64::NAN),
    );
    let digest = cfg.digest();
    write_checkpoint(&layout.model(), &model, &digest)?;
    write_checkpoint(&layout.judge(), &model, &digest)?;
    write_corpus(&layout.corpus(), &corpus)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in log.losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    std::fs::create_dir_all(layout.logs()).context("creating the log directory")?;
    std::fs::write(layout.logs().join("train_loss.csv"), curve).context("writing the training log")?;
    println!("{}", layout.checkpoints().display());
    Ok(())
}

impl From<crate::error::FormatError> for CliError {
    fn from(e: crate::error::FormatError) -> Self {
        CliError::Runtime(e.into())
    }
}

/// Loads the artifacts written by `pretrain`.
fn load_pretrained(layout: &Layout) -> anyhow::Result<(Checkpoint, Checkpoint, Corpus)> {
    for p in [layout.model(), layout.judge(), layout.corpus()] {
        if !p.exists() {
            return Err(anyhow!("missing {}; run `memedit pretrain` with the same config first", p.display()));
        }
    }
    Ok((read_checkpoint(&layout.model())?, read_checkpoint(&layout.judge())?, read_corpus(&layout.corpus())?))
}

/// Covariance statistics of `layers`, from the cache when it matches the model.
fn covariance(layout: &Layout, cfg: &RunConfig, model: &ModelState, corpus: &Corpus, layers: &[usize]) -> anyhow::Result<Vec<CovarianceStats>> {
    let ridge = cfg.diagnostics.ridge;
    let digest = model.digest();
    let mut out = Vec::new();
    for &l in layers {
        let path = layout.covariance(l, ridge);
        if let Ok((s, d)) = read_covariance(&path) {
            if d == digest {
                out.push(s);
                continue;
            }
        }
        let s = estimate_covariance(model, l, &corpus.filler_train, ridge)
            .with_context(|| format!("estimating the key covariance of layer {l}"))?;
        write_covariance(&path, &s, &digest, &cfg.pretrain_digest())?;
        out.push(s);
    }
    Ok(out)
}

fn all_layers(cfg: &RunConfig) -> Vec<usize> {
    (0..cfg.arch.n_layers).collect()
}

fn edit(cfg: &RunConfig) -> Result<(), CliError> {
    let layout = Layout::new(cfg);
    let (model, judge, corpus) = load_pretrained(&layout)?;
    let options = cfg.run_options()?;
    let layers: Vec<usize> = if options.plan.method.is_parametric() { options.plan.layers().collect() } else { vec![] };
    let stats = covariance(&layout, cfg, &model.model, &corpus, &layers)?;
    let inputs = RunInputs { model: &model.model, judge: &judge.model, corpus: &corpus, stats: &stats };
    let (report, state) = run_sequential_state(inputs, &options, &WallClock(Instant::now())).context("editing run")?;
    let id = ReportId {
        cell: options.plan.method.name().into(),
        config: cfg.digest(),
        model: cfg.pretrain_digest(),
        judge: judge.model.digest(),
    };
    let dir = layout.reports().join(format!("{}-{}", &id.config[..12], id.cell));
    write_report(&dir, &id, &report)?;
    write_final_state(&dir, cfg, &corpus, &state)?;
    print_summary(&id.cell, &report);
    println!("{}", dir.display());
    Ok(())
}

/// Edited checkpoint, codebook and a generation log of the final state.
fn write_final_state(dir: &Path, cfg: &RunConfig, corpus: &Corpus, state: &EditState) -> anyhow::Result<()> {
    write_checkpoint(&dir.join("edited.ckpt"), &state.model, &cfg.digest())?;
    if let Some(cb) = &state.codebook {
        write_codebook(&dir.join("codebook.csv"), cb, &cfg.digest())?;
    }
    let p = cfg.probe_settings();
    let mut log = String::new();
    for q in corpus.filler_prompts(p.prefix_words) {
        let a = state.generate(&q, p.max_new, Some(memedit_core::corpus::EOS))?;
        log.push_str(&format!("{}\t{}\n", corpus.vocab.render(&q), corpus.vocab.render(&a)));
    }
    std::fs::write(dir.join("generations.tsv"), log).context("writing the generation log")?;
    Ok(())
}

fn print_summary(cell: &str, r: &RunReport) {
    for row in &r.rows {
        eprintln!(
            "{cell} t={:<3} rel {:.3} gen {:.3} seq-rel {:.3} seq-gen {:.3} locality {:.3} adj-ppl {:.3} icl {:.3}",
            row.t,
            row.individual.reliability,
            row.individual.generalization,
            row.sequential.reliability,
            row.sequential.generalization,
            row.probes.locality,
            row.probes.lm.mean_adjusted,
            row.probes.icl_accuracy,
        );
    }
    if !r.failures.is_empty() {
        eprintln!("{cell}: {} failed editing steps", r.failures.len());
    }
}

fn default_values(axis: SweepAxis, cfg: &RunConfig) -> Vec<String> {
    match axis {
        SweepAxis::Layer => all_layers(cfg).iter().map(|l| l.to_string()).collect(),
        SweepAxis::BatchSize => ["1", "10", "100"].map(String::from).to_vec(),
        SweepAxis::Epsilon => ["1", "5", "10", "20"].map(String::from).to_vec(),
        SweepAxis::Method => ["rank_one", "batched", "codebook"].map(String::from).to_vec(),
    }
}

fn run_sweep(cfg: &RunConfig, axis: SweepAxis, values: Option<&[String]>) -> Result<(), CliError> {
    let raw = values.map_or_else(|| default_values(axis, cfg), <[String]>::to_vec);
    let values = raw
        .iter()
        .map(|s| SweepValue::parse(axis, s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let layout = Layout::new(cfg);
    let (model, judge, corpus) = load_pretrained(&layout)?;
    let options = cfg.run_options()?;
    let stats = covariance(&layout, cfg, &model.model, &corpus, &all_layers(cfg))?;
    let inputs = RunInputs { model: &model.model, judge: &judge.model, corpus: &corpus, stats: &stats };
    let cells = sweep(axis, &values, inputs, &options, &WallClock(Instant::now())).context("sweep")?;

    let base = cfg.digest();
    let dir = layout.reports().join(format!("{}-sweep-{}", &base[..12], axis.name()));
    let mut tables = Vec::new();
    let mut failed = Vec::new();
    for cell in &cells {
        let label = format!("{}={}", axis.name(), cell.value);
        match &cell.result {
            Ok(report) => {
                let id = ReportId {
                    cell: label.clone(),
                    config: sha256_hex(format!("{}\nsweep {label}\n", cfg.canonical()).as_bytes()),
                    model: cfg.pretrain_digest(),
                    judge: judge.model.digest(),
                };
                let paths = write_report(&dir.join(cell.value.to_string()), &id, report)?;
                print_summary(&label, report);
                tables.push(read_long(&paths[1])?);
            }
            Err(e) => {
                eprintln!("{label}: {e}");
                failed.push(label);
            }
        }
    }
    if !tables.is_empty() {
        let merged = merge_long(&tables, false).map_err(anyhow::Error::from)?;
        std::fs::write(dir.join("merged.csv"), merged).context("writing the merged table")?;
    }
    println!("{}", dir.display());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("{} sweep cells failed: {}", failed.len(), failed.join(", "))))
    }
}

fn emit(csv: Option<&Path>, id: &ReportId, rows: &[LongRow]) -> anyhow::Result<()> {
    match csv {
        Some(p) => append_long(p, id, rows)?,
        None => {
            println!("t,metric,value");
            for r in rows {
                println!("{},{},{}", r.t, r.metric, r.value);
            }
        }
    }
    Ok(())
}

fn diag_id(ck: &Checkpoint) -> ReportId {
    ReportId { cell: "diagnose".into(), config: ck.config_digest.clone(), model: ck.model.digest(), judge: String::from("-") }
}

fn diagnose(what: Diagnose) -> Result<(), CliError> {
    match what {
        Diagnose::Similarity { original, edited, csv } => {
            let a = read_checkpoint(&original)?;
            let b = read_checkpoint(&edited)?;
            let t = b.model.edit_history_len as usize;
            let layers: Vec<usize> = (0..a.model.arch().n_layers).collect();
            let rows = layer_similarity(&a.model, &b.model, &layers, t).context("comparing checkpoints")?;
            let rows: Vec<LongRow> =
                rows.iter().map(|r| LongRow { t, metric: format!("pearson_r_layer{}", r.layer), value: r.r }).collect();
            emit(csv.as_deref(), &diag_id(&b), &rows)?;
        }
        Diagnose::Saliency { model, corpus, csv } => {
            let m = read_checkpoint(&model)?;
            let c = read_corpus(&corpus)?;
            let prompts = c.icl_prompts();
            let n_layers = m.model.arch().n_layers;
            let mut sums = vec![[0.0f64; 3]; n_layers];
            for p in &prompts {
                let r = saliency_flows(&m.model, &p.tokens, &p.label_positions, p.target_position, p.gold)
                    .context("saliency of an in-context prompt")?;
                for l in &r.layers {
                    sums[l.layer][0] += l.s_wp;
                    sums[l.layer][1] += l.s_pq;
                    sums[l.layer][2] += l.s_ww;
                }
            }
            let t = m.model.edit_history_len as usize;
            let n = prompts.len() as f64;
            let mut rows = Vec::new();
            for (l, s) in sums.iter().enumerate() {
                for (name, v) in ["s_wp", "s_pq", "s_ww"].iter().zip(s) {
                    rows.push(LongRow { t, metric: format!("saliency_{name}_layer{l}"), value: v / n });
                }
            }
            emit(csv.as_deref(), &diag_id(&m), &rows)?;
        }
        Diagnose::Perplexity { judge, log, corpus, ngram, csv } => {
            let j = read_checkpoint(&judge)?;
            let c = read_corpus(&corpus)?;
            let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let tok = |s: &str| -> anyhow::Result<Vec<Token>> {
                s.split(' ')
                    .filter(|w| !w.is_empty())
                    .map(|w| c.vocab.id(w).ok_or_else(|| anyhow!("unknown word {w:?} in {}", log.display())))
                    .collect()
            };
            let mut reports = Vec::new();
            for line in text.lines().filter(|l| !l.is_empty()) {
                let (q, a) = line.split_once('\t').ok_or_else(|| anyhow!("log line without a tab: {line:?}"))?;
                reports.push(adjusted_perplexity(&j.model, &tok(q)?, &tok(a)?, ngram).context("scoring a generation")?);
            }
            let s = summarize_perplexity(&reports, &j.model.digest());
            let mut id = diag_id(&j);
            id.judge = s.judge_digest.clone();
            let rows = [
                ("lm_ppl", s.mean_ppl),
                ("lm_adjusted_ppl", s.mean_adjusted),
                ("lm_rho", s.mean_rho),
                ("lm_scored", s.scored as f64),
                ("lm_excluded", s.excluded as f64),
            ]
            .map(|(m, v)| LongRow { t: 0, metric: m.into(), value: v });
            emit(csv.as_deref(), &id, &rows)?;
        }
    }
    Ok(())
}

fn report(inputs: &[PathBuf], force: bool, check: bool, output: Option<&Path>) -> Result<(), CliError> {
    let tables = inputs.iter().map(|p| read_long(p)).collect::<Result<Vec<_>, _>>()?;
    let merged = merge_long(&tables, force).map_err(|e| CliError::Runtime(e.into()))?;
    match output {
        Some(p) => std::fs::write(p, merged).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{merged}"),
    }
    if check {
        let problems: Vec<String> = tables.iter().flat_map(check_long).collect();
        if !problems.is_empty() {
            return Err(CliError::Check(format!("{} values out of range:\n{}", problems.len(), problems.join("\n"))));
        }
    }
    Ok(())
}
