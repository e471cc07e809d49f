//! Command implementations behind the `lsaq` binary.
//!
//! Every command reads its inputs from files, writes deterministic output,
//! and returns an [`anyhow::Result`]. [`exit_code`] maps errors to the
//! scripting contract: 0 success, 2 insufficient memory, 1 anything else.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lsaq_core::planner::{
    resolve_budget, BudgetProvider, ConfigFileBudget, DeviceError, DeviceReport, DeviceSource,
    EnvBudget, FileDeviceSource, FixedBudget, NvidiaSmiSource, ProbeBudget, BUDGET_ENV_VAR,
};
use lsaq_core::toy::{calibration_prompts, capture_bundle, perplexity, synthetic_corpus};
use lsaq_core::{
    allocate_precision, apply_plan, init_toy, load_bundle, load_dequantized, score_layers,
    select_device, ImportanceReport, LayerNameRule, Metric, ModelProfile, PlanError, Precision,
    QuantPlan, TensorStore, ToyConfig,
};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INSUFFICIENT_MEMORY: i32 = 2;

/// Interval between budget polls under `--wait`.
pub const POLL_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, Parser)]
#[command(name = "lsaq", version, about = "Layer-specific adaptive quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Initialize the seeded toy model and capture a calibration bundle.
    CaptureToy(CaptureToyArgs),
    /// Score layer importance from a calibration bundle.
    Importance(ImportanceArgs),
    /// Allocate per-layer precision under a memory budget.
    Plan(PlanArgs),
    /// Quantize a weight store according to a plan.
    Quantize(QuantizeArgs),
    /// Compare toy perplexity before and after quantization.
    EvalToy(EvalToyArgs),
    /// List devices, pick one, and show the resolved budget.
    Probe(ProbeArgs),
    /// Pretty-print a plan as a strategy table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CaptureToyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of calibration prompts.
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// Tokens per prompt.
    #[arg(long, default_value_t = 32)]
    pub prompt_len: usize,
    #[arg(long)]
    pub weights_out: PathBuf,
    #[arg(long)]
    pub bundle_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long, default_value_t = Metric::Jaccard)]
    pub metric: Metric,
    /// Top-k size; defaults to the bundle's `k_hint`, then 10.
    #[arg(long)]
    pub k: Option<usize>,
    /// Report path; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a `layer,score` CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct BudgetArgs {
    /// Memory budget, e.g. 6GB or 8GiB. Overrides the environment and config.
    #[arg(long)]
    pub memory: Option<String>,
    /// JSON config file with a "memory" key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON device report file used instead of nvidia-smi.
    #[arg(long)]
    pub devices: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Importance report from `importance`.
    #[arg(long)]
    pub importance: PathBuf,
    /// Built-in profile name or a profile JSON path.
    #[arg(long)]
    pub profile: String,
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Poll the budget every second until the plan fits.
    #[arg(long)]
    pub wait: bool,
    /// Give up waiting after this many seconds.
    #[arg(long)]
    pub timeout: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalToyArgs {
    /// Original toy weights.
    #[arg(long)]
    pub weights: PathBuf,
    /// Quantized store from `quantize`.
    #[arg(long)]
    pub quantized: PathBuf,
    /// Seed of the synthetic evaluation corpus.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2048)]
    pub corpus_len: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub budget: BudgetArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub plan: PathBuf,
}

/// Perplexity comparison written by `eval-toy`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub ppl_fp: f64,
    pub ppl_quant: f64,
    pub relative_delta: f64,
    pub corpus_seed: u64,
    pub corpus_len: usize,
}

/// Sleeps between budget polls. Tests substitute a fake.
pub trait Sleeper {
    fn sleep(&mut self, duration: Duration);
}

pub struct RealSleeper;

impl Sleeper for RealSleeper {
    fn sleep(&mut self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Exit code for the result of [`run`].
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) if is_insufficient_memory(e) => EXIT_INSUFFICIENT_MEMORY,
        Err(_) => EXIT_ERROR,
    }
}

fn is_insufficient_memory(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<PlanError>(),
            Some(PlanError::InsufficientMemory { .. })
        )
    })
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::CaptureToy(a) => cmd_capture_toy(&a),
        Command::Importance(a) => cmd_importance(&a, stdout),
        Command::Plan(a) => {
            let providers = BudgetSources::from_args(&a.budget);
            cmd_plan(&a, &providers.as_list(), &mut RealSleeper, stdout)
        }
        Command::Quantize(a) => cmd_quantize(&a),
        Command::EvalToy(a) => cmd_eval_toy(&a, stdout),
        Command::Probe(a) => cmd_probe(&a, stdout),
        Command::Report(a) => cmd_report(&a, stdout),
    }
}

fn read_store(path: &Path) -> Result<TensorStore> {
    TensorStore::load(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => Ok(stdout.write_all(text.as_bytes())?),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn cmd_capture_toy(a: &CaptureToyArgs) -> Result<()> {
    if a.samples == 0 {
        bail!("--samples must be at least 1");
    }
    let config = ToyConfig::with_seed(a.seed);
    let weights = init_toy(config)?;
    let prompts = calibration_prompts(a.seed, a.samples, a.prompt_len, config.vocab);
    let bundle = capture_bundle(&weights, &prompts)?;
    write_file(&a.weights_out, &weights.to_store()?.to_bytes())?;
    write_file(
        &a.bundle_out,
        &bundle
            .to_store(&format!("toy-seed{}", a.seed), None)?
            .to_bytes(),
    )
}

pub fn cmd_importance(a: &ImportanceArgs, stdout: &mut dyn Write) -> Result<()> {
    let store = read_store(&a.bundle)?;
    let k = match a.k {
        Some(k) => k,
        None => match store.metadata().get("k_hint") {
            Some(hint) => hint.parse().context("bundle k_hint is not an integer")?,
            None => lsaq_core::DEFAULT_K,
        },
    };
    let bundle = load_bundle(&store)?;
    let report = score_layers(&bundle, a.metric, k)?;
    if let Some(csv) = &a.csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_file(csv, &buf)?;
    }
    emit(a.out.as_deref(), &(report.to_json() + "\n"), stdout)
}

/// Budget providers in priority order: flag, environment, config file,
/// device probe.
pub struct BudgetSources {
    flag: FixedBudget,
    env: EnvBudget,
    config: ConfigFileBudget,
    probe: ProbeBudget<AnySource>,
}

/// A file fixture or nvidia-smi, chosen at runtime.
pub struct AnySource(Box<dyn DeviceSource>);

impl DeviceSource for AnySource {
    fn devices(&self) -> Result<Vec<DeviceReport>, DeviceError> {
        self.0.devices()
    }
}

impl BudgetSources {
    pub fn from_args(a: &BudgetArgs) -> Self {
        Self {
            flag: FixedBudget::flag(a.memory.clone()),
            env: EnvBudget::default(),
            config: ConfigFileBudget {
                path: a.config.clone(),
            },
            probe: ProbeBudget {
                source: device_source(a),
            },
        }
    }

    pub fn as_list(&self) -> Vec<&dyn BudgetProvider> {
        vec![&self.flag, &self.env, &self.config, &self.probe]
    }
}

fn device_source(a: &BudgetArgs) -> AnySource {
    match &a.devices {
        Some(path) => AnySource(Box::new(FileDeviceSource::new(path))),
        None => AnySource(Box::new(NvidiaSmiSource)),
    }
}

/// Resolves the budget and allocates. With `wait`, an insufficient-memory
/// result is retried every [`POLL_INTERVAL`] until it fits or `timeout`
/// seconds of waiting have passed.
pub fn plan_with_wait(
    ranked: &[usize],
    profile: &ModelProfile,
    providers: &[&dyn BudgetProvider],
    wait: bool,
    timeout: Option<Duration>,
    sleeper: &mut dyn Sleeper,
) -> Result<QuantPlan> {
    let mut waited = Duration::ZERO;
    loop {
        let budget = resolve_budget(providers)?;
        match allocate_precision(ranked, profile, budget) {
            Err(e @ PlanError::InsufficientMemory { .. }) => {
                let out_of_time = timeout.is_some_and(|t| waited + POLL_INTERVAL > t);
                if !wait || out_of_time {
                    return Err(e.into());
                }
                sleeper.sleep(POLL_INTERVAL);
                waited += POLL_INTERVAL;
            }
            other => return Ok(other?),
        }
    }
}

pub fn cmd_plan(
    a: &PlanArgs,
    providers: &[&dyn BudgetProvider],
    sleeper: &mut dyn Sleeper,
    stdout: &mut dyn Write,
) -> Result<()> {
    let report: ImportanceReport = read_json(&a.importance)?;
    report.validate()?;
    let profile = ModelProfile::resolve(&a.profile)?;
    if report.num_layers() != profile.num_layers {
        bail!(
            "importance report has {} layers but profile {} has {}",
            report.num_layers(),
            profile.model_id,
            profile.num_layers
        );
    }
    let plan = plan_with_wait(
        &report.ordering,
        &profile,
        providers,
        a.wait,
        a.timeout.map(Duration::from_secs),
        sleeper,
    )?;
    emit(a.out.as_deref(), &(plan.to_json() + "\n"), stdout)
}

pub fn cmd_quantize(a: &QuantizeArgs) -> Result<()> {
    let weights = read_store(&a.weights)?;
    let plan: QuantPlan = read_json(&a.plan)?;
    let out = apply_plan(&weights, &plan, &LayerNameRule::default())?;
    write_file(&a.out, &out.to_bytes())
}

pub fn eval_toy(a: &EvalToyArgs) -> Result<EvalReport> {
    let fp = load_dequantized(&read_store(&a.weights)?)?;
    let quant = load_dequantized(&read_store(&a.quantized)?)?;
    if fp.config != quant.config {
        bail!("weights and quantized store describe different toy configs");
    }
    let corpus = synthetic_corpus(a.seed, a.corpus_len, fp.config.vocab);
    let ppl_fp = perplexity(&fp, &corpus)?;
    let ppl_quant = perplexity(&quant, &corpus)?;
    Ok(EvalReport {
        ppl_fp,
        ppl_quant,
        relative_delta: (ppl_quant - ppl_fp) / ppl_fp,
        corpus_seed: a.seed,
        corpus_len: a.corpus_len,
    })
}

pub fn cmd_eval_toy(a: &EvalToyArgs, stdout: &mut dyn Write) -> Result<()> {
    let report = eval_toy(a)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    emit(a.out.as_deref(), &text, stdout)
}

pub fn cmd_probe(a: &ProbeArgs, stdout: &mut dyn Write) -> Result<()> {
    let source = device_source(&a.budget);
    let devices = source.devices()?;
    let chosen = select_device(&devices)?;
    for d in &devices {
        let mark = if d.device_id == chosen.device_id {
            "*"
        } else {
            " "
        };
        writeln!(
            stdout,
            "{mark} {:<12} {:>16} B free",
            d.device_id, d.free_bytes
        )?;
    }
    writeln!(stdout, "selected: {}", chosen.device_id)?;
    let sources = BudgetSources::from_args(&a.budget);
    match resolve_budget(&sources.as_list()) {
        Ok(b) => writeln!(stdout, "budget: {b} B")?,
        Err(e) => writeln!(stdout, "budget: unresolved ({e}; env {BUDGET_ENV_VAR})")?,
    }
    Ok(())
}

fn human_bytes(bytes: u64) -> String {
    if bytes >= 100_000_000 {
        format!("{:.2} GB", bytes as f64 / 1e9)
    } else {
        format!("{bytes} B")
    }
}

/// Strategy table: budget, layer counts per precision, average bits.
pub fn format_plan_table(plan: &QuantPlan) -> String {
    let (f, e, q) = plan.assignment.counts();
    let int4 = plan.assignment.layers_at(Precision::Int4);
    let mut s = format!("model: {}\n", plan.model_id);
    s += "| Memory       | FP16 | INT8 | INT4 | Avg bits | Predicted    |\n";
    s += "|--------------|------|------|------|----------|--------------|\n";
    s += &format!(
        "| {:>12} | {:>4} | {:>4} | {:>4} | {:>8} | {:>12} |\n",
        human_bytes(plan.budget_bytes),
        f,
        e,
        q,
        plan.average_bits,
        human_bytes(plan.predicted_bytes)
    );
    if !int4.is_empty() {
        let list: Vec<String> = int4.iter().map(|l| l.to_string()).collect();
        s += &format!("INT4 layers: {}\n", list.join(", "));
    }
    s
}

pub fn cmd_report(a: &ReportArgs, stdout: &mut dyn Write) -> Result<()> {
    let plan: QuantPlan = read_json(&a.plan)?;
    stdout.write_all(format_plan_table(&plan).as_bytes())?;
    Ok(())
}
