//! Command-line front end. Exit status 0 on success, 1 on runtime
//! failure, 2 on configuration errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{
    load_interactions, read_split_manifests, split_dataset, synthesize, write_interactions, write_split_manifests,
    DataError, DatasetSplit, IdMap, SyntheticSpec,
};
use crate::eval::{write_reports_csv, write_reports_jsonl, MetricsReport};
use crate::experiments::{evaluate_model, evaluate_popularity, noise_sweep, run_ablation, sparsity_report, ExperimentError};
use crate::graph::sparsity_groups;
use crate::model::{ModelError, ModelState};
use crate::toy::{joint_grad_check, toy_config, toy_graph};
use crate::train::{train, write_jsonl, TrainError};

pub const VERSION: &str = env!("AUTOCF_VERSION");

#[derive(Debug, Parser)]
#[command(name = "autocf", version = VERSION, about = "Masked graph autoencoder recommender experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `KEY=VALUE` override; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel kernels and evaluation.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split an interaction file and write the split manifests.
    Prepare(Common),
    /// Train, checkpoint and evaluate on the test split.
    Train(Common),
    /// Evaluate a checkpoint (plus the popularity baseline).
    Evaluate(Common),
    /// Train and evaluate each ablation variant.
    Ablate(Common),
    /// Retrain under injected training noise.
    NoiseSweep(Common),
    /// Per user-degree group metrics of a checkpoint.
    SparsityReport(Common),
    /// Finite-difference check of the joint loss on the toy graph.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 280)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Dump final embeddings with original ids.
    ExportEmbeddings(Common),
    /// Write a synthetic clustered interaction file.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4000)]
        users: usize,
        #[arg(long, default_value_t = 3000)]
        items: usize,
        #[arg(long, default_value_t = 100_000)]
        interactions: usize,
        #[arg(long, default_value_t = 20)]
        clusters: usize,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing required config key `{0}`")]
    Missing(&'static str),
    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("grad check failed: max relative error {0:e}")]
    GradCheck(f64),
    #[error("{0}")]
    Other(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Missing(_) | CliError::CheckpointNotFound(_) => 2,
            CliError::Model(ModelError::NotFound(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    fingerprint: String,
    config: std::collections::BTreeMap<String, String>,
    started_unix: u64,
    wall_seconds: f64,
}

struct Run {
    command: &'static str,
    config: ExperimentConfig,
    started: Instant,
    started_unix: u64,
}

impl Run {
    fn new(command: &'static str, common: &Common) -> Result<Self, CliError> {
        let mut config = ExperimentConfig::default();
        if let Some(path) = &common.config {
            config.apply_file(path)?;
        }
        for pair in &common.overrides {
            config.apply_override(pair)?;
        }
        if let Some(seed) = common.seed {
            config.train.seed = seed;
        }
        if let Some(out) = &common.out {
            config.out = out.clone();
        }
        config.validate()?;
        if let Some(n) = common.threads {
            // only the first call in a process can size the global pool
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        std::fs::create_dir_all(&config.out)?;
        Ok(Self {
            command,
            config,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    fn finish(&self) -> Result<(), CliError> {
        std::fs::write(self.out("config.resolved"), self.config.to_text())?;
        let record = RunRecord {
            command: self.command,
            version: VERSION,
            seed: self.config.train.seed,
            fingerprint: self.config.train.fingerprint(),
            config: self.config.echo(),
            started_unix: self.started_unix,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&record).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(self.out("run.json"), text + "\n")?;
        Ok(())
    }

    fn load_split(&self) -> Result<(DatasetSplit, IdMap, IdMap), CliError> {
        let data = self.config.data.as_ref().ok_or(CliError::Missing("data"))?;
        if data.is_dir() {
            return Ok(read_split_manifests(data)?);
        }
        let loaded = load_interactions(data)?;
        let split = split_dataset(&loaded.graph, self.config.ratios, self.config.split_seed)?;
        Ok((split, loaded.users, loaded.items))
    }

    fn checkpoint_path(&self) -> Result<PathBuf, CliError> {
        let path = self
            .config
            .checkpoint
            .clone()
            .ok_or_else(|| CliError::CheckpointNotFound("no `checkpoint` configured".into()))?;
        if !path.is_file() {
            return Err(CliError::CheckpointNotFound(path.display().to_string()));
        }
        Ok(path)
    }

    fn write_reports(&self, stem: &str, reports: &[MetricsReport]) -> Result<(), CliError> {
        write_reports_jsonl(&self.out(&format!("{stem}.jsonl")), reports)?;
        write_reports_csv(&self.out(&format!("{stem}.csv")), reports)?;
        Ok(())
    }
}

fn summary(report: &MetricsReport) -> String {
    report
        .metrics
        .iter()
        .map(|m| format!("recall@{}={:.4} ndcg@{}={:.4}", m.n, m.recall, m.n, m.ndcg))
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_prepare(common: &Common) -> Result<(), CliError> {
    let run = Run::new("prepare", common)?;
    let data = run.config.data.as_ref().ok_or(CliError::Missing("data"))?;
    let loaded = load_interactions(data)?;
    let split = split_dataset(&loaded.graph, run.config.ratios, run.config.split_seed)?;
    write_split_manifests(&run.out("split"), &split, &loaded.users, &loaded.items)?;
    println!(
        "users={} items={} train={} val={} test={}",
        split.num_users(),
        split.num_items(),
        split.train.num_edges(),
        split.validation.len(),
        split.test.len()
    );
    run.finish()
}

fn cmd_train(common: &Common) -> Result<(), CliError> {
    let run = Run::new("train", common)?;
    let (split, _, _) = run.load_split()?;
    let outcome = match train(&run.config.train, &split) {
        Ok(outcome) => outcome,
        Err(TrainError::Diverged { epoch, step, last_good }) => {
            last_good.save(&run.out("checkpoint.json"))?;
            run.finish()?;
            return Err(CliError::Other(format!(
                "loss became non-finite at epoch {epoch}, step {step}; last good state saved"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.state.save(&run.out("checkpoint.json"))?;
    outcome.log.write(&run.config.out)?;
    let groups = sparsity_groups(&split.train, &run.config.sparsity_bounds).map_err(ExperimentError::from)?;
    let report = evaluate_model(&outcome.state, &split, &run.config.cutoffs, &groups, "test")?;
    run.write_reports("metrics", std::slice::from_ref(&report))?;
    println!(
        "epochs={} best_epoch={:?} {}",
        outcome.log.epochs.len(),
        outcome.best_epoch,
        summary(&report)
    );
    run.finish()
}

fn cmd_evaluate(common: &Common) -> Result<(), CliError> {
    let run = Run::new("evaluate", common)?;
    let path = run.checkpoint_path()?;
    let (split, _, _) = run.load_split()?;
    let state = ModelState::load(&path)?;
    let groups = sparsity_groups(&split.train, &run.config.sparsity_bounds).map_err(ExperimentError::from)?;
    let model = evaluate_model(&state, &split, &run.config.cutoffs, &groups, "test")?;
    let pop = evaluate_popularity(&split, &run.config.cutoffs, &groups)?;
    println!("model {}", summary(&model));
    println!("popularity {}", summary(&pop));
    run.write_reports("metrics", &[model, pop])?;
    run.finish()
}

fn cmd_ablate(common: &Common) -> Result<(), CliError> {
    let run = Run::new("ablate", common)?;
    let (split, _, _) = run.load_split()?;
    let mut reports = Vec::new();
    for &variant in &run.config.variants {
        let result = run_ablation(variant, &run.config.train, &split, &run.config.cutoffs)?;
        let dir = run.out(&format!("variant{}", variant.tag()));
        std::fs::create_dir_all(&dir)?;
        result.outcome.log.write(&dir)?;
        println!("{variant} {}", summary(&result.report));
        reports.push(result.report);
    }
    reports.push(evaluate_popularity(&split, &run.config.cutoffs, &[])?);
    run.write_reports("ablation", &reports)?;
    run.finish()
}

fn cmd_noise_sweep(common: &Common) -> Result<(), CliError> {
    let run = Run::new("noise-sweep", common)?;
    let (split, _, _) = run.load_split()?;
    let points = noise_sweep(&run.config.noise_ratios, &run.config.train, &split, &run.config.cutoffs)?;
    for p in &points {
        let noise = p.report.noise.as_ref().expect("sweep reports carry noise info");
        println!(
            "ratio={} added={} {} degradation={:?}",
            noise.ratio,
            noise.added_edges,
            summary(&p.report),
            p.degradation
        );
    }
    write_jsonl(&run.out("noise_sweep.jsonl"), &points)?;
    let reports: Vec<MetricsReport> = points.into_iter().map(|p| p.report).collect();
    write_reports_csv(&run.out("noise_sweep.csv"), &reports)?;
    run.finish()
}

fn cmd_sparsity(common: &Common) -> Result<(), CliError> {
    let run = Run::new("sparsity-report", common)?;
    let path = run.checkpoint_path()?;
    let (split, _, _) = run.load_split()?;
    let state = ModelState::load(&path)?;
    let report = sparsity_report(&state, &split, &run.config.sparsity_bounds, &run.config.cutoffs)?;
    for g in &report.groups {
        let r20 = g.metrics.first().map_or(0.0, |m| m.recall);
        println!("{} users={} recall@{}={:.4}", g.label, g.users, run.config.cutoffs[0], r20);
    }
    run.write_reports("sparsity", std::slice::from_ref(&report))?;
    run.finish()
}

fn cmd_grad_check(common: &Common, samples: usize, tolerance: f64) -> Result<(), CliError> {
    let run = Run::new("grad-check", common)?;
    let mut config = toy_config();
    config.seed = run.config.train.seed;
    config.precision = run.config.train.precision;
    let report = joint_grad_check(&config, &toy_graph(), samples, 1e-6).map_err(|e| CliError::Other(e.to_string()))?;
    let pass = report.max_rel_error < tolerance;
    println!(
        "coordinates={} max_rel_error={:e} tolerance={:e} {}",
        report.coordinates,
        report.max_rel_error,
        tolerance,
        if pass { "PASS" } else { "FAIL" }
    );
    run.finish()?;
    if pass {
        Ok(())
    } else {
        Err(CliError::GradCheck(report.max_rel_error))
    }
}

fn cmd_export(common: &Common) -> Result<(), CliError> {
    let run = Run::new("export-embeddings", common)?;
    let path = run.checkpoint_path()?;
    let (split, users, items) = run.load_split()?;
    let state = ModelState::load(&path)?;
    let h = state.embeddings(&split.train)?;
    let file = std::fs::File::create(run.out("embeddings.tsv"))?;
    let mut out = std::io::BufWriter::new(file);
    for v in 0..h.rows() {
        let (kind, name) = if v < split.num_users() {
            ("user", users.name(v))
        } else {
            ("item", items.name(v - split.num_users()))
        };
        let values: Vec<String> = h.row(v).iter().map(|x| x.to_string()).collect();
        writeln!(out, "{kind}\t{name}\t{}", values.join("\t"))?;
    }
    out.flush()?;
    run.finish()
}

fn cmd_synth(common: &Common, spec: SyntheticSpec) -> Result<(), CliError> {
    let run = Run::new("synth", common)?;
    let rows = synthesize(&SyntheticSpec {
        seed: run.config.train.seed,
        ..spec
    });
    write_interactions(&run.out("interactions.tsv"), &rows)?;
    println!("wrote {} interactions", rows.len());
    run.finish()
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Prepare(c) => cmd_prepare(c),
        Command::Train(c) => cmd_train(c),
        Command::Evaluate(c) => cmd_evaluate(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::NoiseSweep(c) => cmd_noise_sweep(c),
        Command::SparsityReport(c) => cmd_sparsity(c),
        Command::GradCheck {
            common,
            samples,
            tolerance,
        } => cmd_grad_check(common, *samples, *tolerance),
        Command::ExportEmbeddings(c) => cmd_export(c),
        Command::Synth {
            common,
            users,
            items,
            interactions,
            clusters,
        } => cmd_synth(
            common,
            SyntheticSpec {
                num_users: *users,
                num_items: *items,
                interactions: *interactions,
                clusters: *clusters,
                ..SyntheticSpec::default()
            },
        ),
    }
}

/// Parses `args` and runs the command, returning the exit status.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
