//! Experiment configuration, subcommand orchestration and output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, PairedAttack};
use crate::comms::{improvement_rates, CommSummary, MethodCost};
use crate::contribution::{self, ContributionReport};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, Activation, MlpConfig, Tensor2D};
use crate::pipeline::{self, AdversaryKind, Federation, RunConfig, RunHistory};
use crate::shuffle::DefenseConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodSelector {
    Tricon,
    Fedavg,
    Both,
}

impl MethodSelector {
    fn methods(self) -> &'static [Method] {
        match self {
            MethodSelector::Tricon => &[Method::Tricon],
            MethodSelector::Fedavg => &[Method::Fedavg],
            MethodSelector::Both => &[Method::Tricon, Method::Fedavg],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Tricon,
    Fedavg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Tricon => "tricon",
            Method::Fedavg => "fedavg",
        }
    }
}

/// Synthetic data settings; class count and dimension come from the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Load a labelled CSV (`f0..,label`) instead of generating data.
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

fn default_per_class() -> usize {
    100
}
fn default_spread() -> f64 {
    1.0
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            per_class: default_per_class(),
            spread: default_spread(),
            csv: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    pub kind: AdversaryKind,
    pub client: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    /// Sampled permutations.
    pub m: usize,
    /// Rounds of serial training per coalition utility.
    #[serde(default = "default_t_util")]
    pub t_util: usize,
}

fn default_t_util() -> usize {
    10
}

/// Victim model, sample and optimizer settings for the paired attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// Side of the square grayscale victim image.
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_attack_classes")]
    pub n_classes: usize,
    #[serde(default)]
    pub label: usize,
    #[serde(default = "default_attack_steps")]
    pub steps: usize,
    #[serde(default = "default_attack_lr")]
    pub attack_lr: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Defense used for the protected run; `enabled` is ignored.
    #[serde(default)]
    pub defense: DefenseConfig,
    /// Also write `x_true.pgm`, `unprotected.pgm` and `protected.pgm`.
    #[serde(default)]
    pub pgm: bool,
}

fn default_side() -> usize {
    8
}
fn default_hidden() -> usize {
    32
}
fn default_attack_classes() -> usize {
    4
}
fn default_attack_steps() -> usize {
    2000
}
fn default_attack_lr() -> f64 {
    0.1
}
fn default_restarts() -> usize {
    2
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            side: default_side(),
            hidden: default_hidden(),
            n_classes: default_attack_classes(),
            label: 0,
            steps: default_attack_steps(),
            attack_lr: default_attack_lr(),
            restarts: default_restarts(),
            defense: DefenseConfig::default(),
            pgm: false,
        }
    }
}

/// Top-level experiment document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub run: RunConfig,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default = "default_method")]
    pub method: MethodSelector,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Seeds for `compare`; defaults to `run.seed`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub adversaries: Vec<AdversarySpec>,
    #[serde(default)]
    pub audit: Option<AuditSpec>,
    #[serde(default)]
    pub attack: AttackSpec,
}

fn default_method() -> MethodSelector {
    MethodSelector::Both
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate().map_err(|e| prefix("run", e))?;
        if self.data.csv.is_none() && self.data.per_class == 0 {
            return Err(Error::Config("at `data.per_class`: must be >= 1".into()));
        }
        if !(self.data.spread >= 0.0 && self.data.spread.is_finite()) {
            return Err(Error::Config("at `data.spread`: must be a finite value >= 0".into()));
        }
        if matches!(&self.seeds, Some(s) if s.is_empty()) {
            return Err(Error::Config("at `seeds`: must not be empty".into()));
        }
        for (i, a) in self.adversaries.iter().enumerate() {
            if a.client >= self.run.n_clients {
                return Err(Error::Config(format!(
                    "at `adversaries[{i}].client`: {} out of range for {} clients",
                    a.client, self.run.n_clients
                )));
            }
        }
        if let Some(a) = &self.audit {
            if a.m == 0 {
                return Err(Error::Config("at `audit.m`: number of permutations must be >= 1".into()));
            }
            if a.t_util == 0 {
                return Err(Error::Config("at `audit.t_util`: must be >= 1".into()));
            }
        }
        let at = &self.attack;
        if at.side == 0 || at.hidden == 0 || at.n_classes < 2 || at.label >= at.n_classes {
            return Err(Error::Config(
                "at `attack`: side and hidden must be >= 1, n_classes >= 2 and label < n_classes".into(),
            ));
        }
        self.attack_config().validate().map_err(|e| prefix("attack", e))
    }

    /// Apply a `--seed` override to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self.seeds = None;
        self
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![self.run.seed])
    }

    pub fn run_for_seed(&self, seed: u64) -> RunConfig {
        RunConfig { seed, ..self.run.clone() }
    }

    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        let m = &self.run.model;
        let ds = match &self.data.csv {
            Some(path) => Dataset::from_csv(path, m.n_classes)?,
            None => data::generate_synthetic(m.n_classes, m.input_dim, self.data.per_class, self.data.spread, seed)?,
        };
        if ds.dim() != m.input_dim {
            return Err(Error::Config(format!(
                "at `data.csv`: {} features but model.input_dim = {}",
                ds.dim(),
                m.input_dim
            )));
        }
        Ok(ds)
    }

    /// Dataset, split, partition and segmentation for one seed, with the
    /// configured adversaries injected.
    pub fn federation(&self, seed: u64) -> Result<Federation> {
        let config = self.run_for_seed(seed);
        let mut fed = Federation::build(&config, &self.dataset(seed)?)?;
        for a in &self.adversaries {
            pipeline::inject_adversary(&mut fed, a.kind, a.client)?;
        }
        Ok(fed)
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            steps: self.attack.steps,
            attack_lr: self.attack.attack_lr,
            restarts: self.attack.restarts,
            seed: self.run.seed,
            ..AttackConfig::default()
        }
    }
}

fn prefix(key: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("at `{key}`: {m}")),
        other => other,
    }
}

/// Read, parse and validate an experiment file. Partition feasibility is
/// checked here so an impossible `k * s_min` fails before any training.
pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let spec = ExperimentSpec::from_json(&text)?;
    spec.federation(spec.run.seed)?;
    Ok(spec)
}

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub seed: u64,
    pub final_accuracy: f64,
    pub rounds: Option<usize>,
    pub cost_bits: Option<u64>,
    pub rounds_up: Option<f64>,
    pub cost_up: Option<f64>,
}

fn na<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| v.to_string())
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "seed", "final_accuracy", "R#", "C#", "R_up", "C_up"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.seed.to_string(),
            r.final_accuracy.to_string(),
            na(r.rounds),
            na(r.cost_bits),
            na(r.rounds_up),
            na(r.cost_up),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of one method on one seed.
pub struct MethodRun {
    pub method: Method,
    pub seed: u64,
    pub history: RunHistory,
    pub test_accuracy: f64,
    pub rounds: Option<usize>,
    pub cost_bits: Option<u64>,
    pub wall_seconds: f64,
}

pub fn run_method(spec: &ExperimentSpec, fed: &Federation, method: Method, seed: u64) -> Result<MethodRun> {
    let config = spec.run_for_seed(seed);
    let start = Instant::now();
    let history = match method {
        Method::Tricon => pipeline::run_tricon(&config, fed)?,
        Method::Fedavg => pipeline::run_fedavg(&config, fed)?,
    };
    let wall_seconds = start.elapsed().as_secs_f64();
    let (test_accuracy, _) = model::evaluate(&history.final_params, fed.test.features(), fed.test.labels())?;
    let rounds = pipeline::rounds_to_target(&history, config.target_accuracy);
    let cost_bits = rounds.map(|r| history.ledger.bits_through(r));
    log::info!(
        "{} seed {seed}: test accuracy {test_accuracy:.4}, rounds to target {}",
        method.name(),
        na(rounds)
    );
    Ok(MethodRun {
        method,
        seed,
        history,
        test_accuracy,
        rounds,
        cost_bits,
        wall_seconds,
    })
}

fn cost_of(run: &MethodRun) -> MethodCost {
    match (run.rounds, run.cost_bits) {
        (Some(r), Some(c)) => MethodCost::new(r as f64, c as f64),
        _ => MethodCost::not_reached(),
    }
}

/// Summary rows for one seed; rates are relative to the FedAvg run if present.
pub fn summarize(runs: &[MethodRun]) -> Result<Vec<SummaryRow>> {
    let baseline = runs.iter().find(|r| r.method == Method::Fedavg).map(cost_of);
    runs.iter()
        .map(|r| {
            let (rounds_up, cost_up) = match baseline {
                Some(b) => improvement_rates(b, cost_of(r))?,
                None => (None, None),
            };
            Ok(SummaryRow {
                method: r.method.name().to_string(),
                seed: r.seed,
                final_accuracy: r.test_accuracy,
                rounds: r.rounds,
                cost_bits: r.cost_bits,
                rounds_up,
                cost_up,
            })
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    method: &'static str,
    seed: u64,
    wall_seconds: f64,
}

fn train_and_write(spec: &ExperimentSpec, selector: MethodSelector, seeds: &[u64], out: &Path) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let mut comms = Vec::new();
    let multi = seeds.len() > 1;
    for &seed in seeds {
        let fed = spec.federation(seed)?;
        let runs = selector
            .methods()
            .iter()
            .map(|&m| run_method(spec, &fed, m, seed))
            .collect::<Result<Vec<_>>>()?;
        let seed_rows = summarize(&runs)?;
        for (run, row) in runs.iter().zip(&seed_rows) {
            let suffix = if multi { format!("_seed{seed}") } else { String::new() };
            let name = run.method.name();
            run.history.save_jsonl(&out.join(format!("history_{name}{suffix}.jsonl")))?;
            let primary = run.method == selector.methods()[0];
            let ledger = if primary {
                format!("ledger{suffix}.csv")
            } else {
                format!("ledger_{name}{suffix}.csv")
            };
            run.history.ledger.save_csv(&out.join(ledger))?;
            timing.push(Timing {
                method: name,
                seed,
                wall_seconds: run.wall_seconds,
            });
            comms.push(CommSummary {
                method: format!("{name}@{seed}"),
                rounds: row.rounds,
                cost_bits: row.cost_bits,
                rounds_up: row.rounds_up,
                cost_up: row.cost_up,
            });
        }
        rows.extend(seed_rows);
    }
    write_summary(&out.join("summary.csv"), &rows)?;
    write_json(&out.join("comms.json"), &comms)?;
    write_json(&out.join("timing.json"), &timing)?;
    Ok(rows)
}

pub fn cmd_run(spec: &ExperimentSpec, selector: MethodSelector, out: &Path) -> Result<Vec<SummaryRow>> {
    train_and_write(spec, selector, &[spec.run.seed], out)
}

/// Both methods on identical partitions and seeds, FedAvg as the baseline.
pub fn cmd_compare(spec: &ExperimentSpec, selector: MethodSelector, out: &Path) -> Result<Vec<SummaryRow>> {
    if selector != MethodSelector::Both {
        return Err(Error::Config(format!(
            "compare needs --method both, got {}",
            selector.to_possible_value().expect("no skipped variants").get_name()
        )));
    }
    train_and_write(spec, selector, &spec.seeds(), out)
}

#[derive(Serialize)]
struct AuditOutput<'a> {
    #[serde(flatten)]
    report: &'a ContributionReport,
    adversaries: &'a [AdversarySpec],
    t_util: usize,
}

pub fn cmd_shapley(spec: &ExperimentSpec, out: &Path) -> Result<ContributionReport> {
    let audit = spec
        .audit
        .ok_or_else(|| Error::Config("at `audit`: shapley needs audit settings".into()))?;
    let fed = spec.federation(spec.run.seed)?;
    let report = contribution::audit(&spec.run, &fed, audit.m, audit.t_util, spec.run.seed)?;
    fs::create_dir_all(out)?;
    write_json(
        &out.join("report.json"),
        &AuditOutput {
            report: &report,
            adversaries: &spec.adversaries,
            t_util: audit.t_util,
        },
    )?;
    Ok(report)
}

/// Victim model and private sample for the paired attack.
pub fn attack_victim(spec: &ExperimentSpec) -> Result<(model::LayeredParams, Tensor2D, Vec<usize>)> {
    let a = &spec.attack;
    let params = model::init_params(
        &MlpConfig {
            input_dim: a.side * a.side,
            hidden_dims: vec![a.hidden],
            n_classes: a.n_classes,
            activation: Activation::Tanh,
        },
        spec.run.seed,
    )?;
    let x = Tensor2D::new(1, a.side * a.side, attack::synthetic_image(a.side, spec.run.seed))?;
    Ok((params, x, vec![a.label]))
}

pub fn cmd_attack(spec: &ExperimentSpec, out: &Path) -> Result<PairedAttack> {
    let (params, x, y) = attack_victim(spec)?;
    let res = attack::paired_attack(&params, &x, &y, &spec.attack_config(), &spec.attack.defense, spec.run.seed)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("attack.json"), &res)?;
    if spec.attack.pgm {
        let side = spec.attack.side;
        attack::write_pgm(&out.join("x_true.pgm"), x.data(), side)?;
        attack::write_pgm(&out.join("unprotected.pgm"), res.unprotected.reconstruction.data(), side)?;
        attack::write_pgm(&out.join("protected.pgm"), res.protected.reconstruction.data(), side)?;
    }
    Ok(res)
}

/// Per-client shard sizes, class counts and label skew as `partition.csv`.
pub fn cmd_partition_report(spec: &ExperimentSpec, out: &Path) -> Result<f64> {
    let fed = spec.federation(spec.run.seed)?;
    let global = data::label_distribution(&fed.train, &(0..fed.train.len()).collect::<Vec<_>>());
    let c = fed.train.n_classes();
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("partition.csv"))?;
    let mut header = vec!["client".to_string(), "size".into(), "segments".into()];
    header.extend((0..c).map(|k| format!("class_{k}")));
    header.push("tv_distance".into());
    w.write_record(&header)?;
    for s in &fed.shards {
        let sub = fed.train.subset(&s.indices);
        let mut rec = vec![
            s.client_id.to_string(),
            s.len().to_string(),
            s.segments.iter().map(|g| g.len().to_string()).collect::<Vec<_>>().join(";"),
        ];
        rec.extend(sub.class_counts().iter().map(|n| n.to_string()));
        let tv = data::total_variation(&data::label_distribution(&fed.train, &s.indices), &global);
        rec.push(tv.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let skew = data::mean_label_skew(&fed.train, &fed.shards);
    log::info!("mean label skew (total variation) {skew:.4}");
    Ok(skew)
}

#[derive(Debug, Parser)]
#[command(name = "tricon", about = "Serial federated learning simulator", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodSelector>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with the selected method(s) for one seed.
    Run(CommonArgs),
    /// Train both methods and report improvement rates over FedAvg.
    Compare(CommonArgs),
    /// Monte Carlo Shapley audit of client contributions.
    Shapley(CommonArgs),
    /// Paired gradient-inversion attack with and without the defense.
    Attack(CommonArgs),
    /// Per-client label distribution of the partition.
    PartitionReport(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Run(a)
            | Command::Compare(a)
            | Command::Shapley(a)
            | Command::Attack(a)
            | Command::PartitionReport(a) => a,
        }
    }
}

/// Execute a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let args = cli.command.args();
    let mut spec = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        spec = spec.with_seed(seed);
    }
    let out = args
        .out
        .clone()
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let selector = args.method.unwrap_or(spec.method);
    match &cli.command {
        Command::Run(_) => cmd_run(&spec, selector, &out).map(|_| ()),
        Command::Compare(_) => cmd_compare(&spec, selector, &out).map(|_| ()),
        Command::Shapley(_) => cmd_shapley(&spec, &out).map(|_| ()),
        Command::Attack(_) => cmd_attack(&spec, &out).map(|_| ()),
        Command::PartitionReport(_) => cmd_partition_report(&spec, &out).map(|_| ()),
    }
}
