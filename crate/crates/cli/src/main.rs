//! Command-line front end: simulation, ingestion, confounder fitting,
//! residuals, effect estimation, sweeps and reports.
//!
//! Every subcommand reads its settings from an optional JSON config file
//! (see [`FileConfig`]); flags given on the command line override the file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use mcei::baselines::{naive_regress, pca_correct_regress};
use mcei::confounder::{FittedConfounder, TrainConfig};
use mcei::dataset::Dataset;
use mcei::gaussian::NoiseDraw;
use mcei::harness::{
    emit_report, ingest, read_results_csv, run_mcei, run_mcei_fitted, run_sweep, write_results_csv,
    Binarize, EffectConfig, ExperimentConfig, IngestSpec, Method,
};
use mcei::numeric::RngStream;
use mcei::outcome::{write_effects_csv, OutcomeArch, OutcomeConfig};
use mcei::residuals::{
    fit_lagrangian_residuals, independence_report, invert_residuals, LagrangianConfig,
};
use mcei::simulation::{generate, OutcomeLink, SimConfig};
use mcei::{Error, Result};

/// Sections of the JSON config file. Every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    sim: SimConfig,
    ingest: IngestSpec,
    train: TrainConfig,
    outcome: OutcomeConfig,
    effects: EffectConfig,
    lagrangian: LagrangianConfig,
    experiment: ExperimentConfig,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))
            }
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mcei",
    version,
    about = "Causal effects of multiple treatments with a learned shared confounder"
)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and its truth.
    Simulate(SimulateArgs),
    /// Preprocess a CSV (impute, log-shift, standardize, binarize).
    Ingest(IngestArgs),
    /// Fit the confounder model over the α grid.
    Fit(FitArgs),
    /// Extract treatment residuals from a fitted model.
    Residuals(ResidualArgs),
    /// Estimate per-treatment causal effects.
    Effects(EffectArgs),
    /// Run a simulation sweep and write the results CSV.
    Sweep(SweepArgs),
    /// Summarize a results CSV.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Abs,
    Linear,
}

impl From<LinkArg> for OutcomeLink {
    fn from(l: LinkArg) -> Self {
        match l {
            LinkArg::Abs => OutcomeLink::Abs,
            LinkArg::Linear => OutcomeLink::Linear,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Mlp,
    PartiallyLinear,
}

impl From<ArchArg> for OutcomeArch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Mlp => OutcomeArch::Mlp,
            ArchArg::PartiallyLinear => OutcomeArch::PartiallyLinear,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sim_sd: Option<f64>,
    #[arg(long)]
    outcome_sd: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stream: Option<u64>,
    #[arg(long, value_enum)]
    outcome_link: Option<LinkArg>,
    #[arg(long)]
    signed_loadings: bool,
    /// Output CSV (t_1..t_T, y).
    #[arg(long)]
    out: PathBuf,
    /// Truth sidecar; defaults to `<out>` with the extension `.truth.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated treatment columns.
    #[arg(long, value_delimiter = ',')]
    treatments: Option<Vec<String>>,
    #[arg(long)]
    outcome: Option<String>,
    /// Per-column log shift as `name=value`; repeatable.
    #[arg(long = "shift", value_parser = parse_shift)]
    shifts: Vec<(String, f64)>,
    #[arg(long)]
    log_transform: bool,
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    binarize_outcome: bool,
}

/// Training flags shared by `fit`, `effects` and `sweep`.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.latent_dim, self.latent_dim);
        set(&mut c.hidden_width, self.hidden_width);
        set(&mut c.alpha_grid, self.alpha_grid.clone());
        set(&mut c.learning_rate, self.learning_rate);
        set(&mut c.steps, self.steps);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.seed, self.seed);
    }
}

#[derive(Args)]
struct OutcomeArgs {
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long)]
    outcome_steps: Option<usize>,
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    step_fraction: Option<f64>,
    #[arg(long)]
    bank_size: Option<usize>,
}

impl OutcomeArgs {
    fn apply(&self, o: &mut OutcomeConfig, e: &mut EffectConfig) {
        set(&mut o.arch, self.arch.map(Into::into));
        set(&mut o.steps, self.outcome_steps);
        set(&mut e.probes, self.probes);
        set(&mut e.step_fraction, self.step_fraction);
        if self.bank_size.is_some() {
            e.bank_size = self.bank_size;
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Numeric CSV; every column except `--outcome` is a treatment.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome: Option<String>,
    #[command(flatten)]
    train: TrainArgs,
    /// Fitted model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional training trace CSV for the chosen α.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ResidualArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome: Option<String>,
    /// Fitted model JSON from `fit`.
    #[arg(long)]
    model: PathBuf,
    /// Use the Lagrangian estimator instead of exact inversion.
    #[arg(long)]
    lagrangian: bool,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EffectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    outcome: String,
    #[arg(long, default_value = "mcei")]
    method: String,
    /// Confounder dimension for `mcei` and `pca_correct`.
    #[arg(long)]
    fit_dim: Option<usize>,
    /// Reuse a fitted model instead of fitting (`mcei` only).
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    outcome_args: OutcomeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
    #[arg(long)]
    redraws: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, value_enum)]
    outcome_link: Option<LinkArg>,
    #[arg(long)]
    signed_loadings: bool,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    fit_dims: Option<Vec<usize>>,
    #[arg(long)]
    sweep_seed: Option<u64>,
    #[arg(long)]
    record_timing: bool,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    outcome_args: OutcomeArgs,
    /// Directory for `results.csv`; also writes the report when `--report` is set.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    report: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_shift(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected name=value, got '{s}'"))?;
    let v: f64 = value
        .parse()
        .map_err(|e| format!("shift for '{name}': {e}"))?;
    Ok((name.to_string(), v))
}

fn simulate(file: FileConfig, a: SimulateArgs) -> Result<()> {
    let mut c = file.sim;
    set(&mut c.n, a.n);
    set(&mut c.t, a.t);
    set(&mut c.d, a.d);
    set(&mut c.gamma, a.gamma);
    set(&mut c.sim_sd, a.sim_sd);
    set(&mut c.outcome_sd, a.outcome_sd);
    set(&mut c.seed, a.seed);
    set(&mut c.stream, a.stream);
    set(&mut c.outcome_link, a.outcome_link.map(Into::into));
    c.signed_loadings |= a.signed_loadings;
    let (data, truth) = generate(&c)?;
    data.write_csv(&a.out)?;
    let truth_path = a
        .truth
        .unwrap_or_else(|| a.out.with_extension("truth.json"));
    truth.write_json(&truth_path)?;
    eprintln!("wrote {} rows to {}", data.n(), a.out.display());
    Ok(())
}

fn ingest_cmd(file: FileConfig, a: IngestArgs) -> Result<()> {
    let mut spec = file.ingest;
    set(&mut spec.treatment_columns, a.treatments);
    if a.outcome.is_some() {
        spec.outcome_column = a.outcome;
    }
    spec.shift.extend(a.shifts);
    spec.log_transform |= a.log_transform;
    spec.standardize |= a.standardize;
    if a.binarize_outcome {
        spec.binarize_outcome = Binarize::MeanThreshold;
    }
    let data = ingest(&a.input, &spec)?;
    data.write_csv(&a.out)?;
    eprintln!(
        "wrote {} rows × {} treatments to {}",
        data.n(),
        data.t(),
        a.out.display()
    );
    Ok(())
}

fn fit_cmd(file: FileConfig, a: FitArgs) -> Result<()> {
    let mut train = file.train;
    a.train.apply(&mut train);
    let data = Dataset::read_csv(&a.data, a.outcome.as_deref())?;
    let fitted = mcei::confounder::fit(&data.treatments, &train)?;
    std::fs::write(&a.out, fitted.to_json()?)?;
    if let Some(p) = &a.trace {
        fitted.write_trace_csv(p)?;
    }
    for r in &fitted.alpha_results {
        eprintln!("α={}: {} score={:?}", r.alpha, r.status, r.holdout_score);
    }
    eprintln!("chose α={}", fitted.chosen_alpha);
    Ok(())
}

fn load_model(path: &Path) -> Result<FittedConfounder> {
    FittedConfounder::from_json(&std::fs::read_to_string(path)?)
}

fn residuals_cmd(file: FileConfig, a: ResidualArgs) -> Result<()> {
    let data = Dataset::read_csv(&a.data, a.outcome.as_deref())?;
    let fitted = load_model(&a.model)?;
    let mut rng = RngStream::new(a.seed, 0);
    let noise = NoiseDraw::draw(&mut rng, data.n(), fitted.params.d());
    let inverted = invert_residuals(&fitted, &data.treatments, &noise)?;
    let res = if a.lagrangian {
        let mut cfg = file.lagrangian;
        set(&mut cfg.kappa, a.kappa);
        fit_lagrangian_residuals(&data.treatments, &inverted.z_samples, &cfg)?.0
    } else {
        inverted
    };
    res.write_csv(&a.out)?;
    eprintln!(
        "max |corr(ε, z)| = {:.4}",
        independence_report(&res)?.max_abs
    );
    Ok(())
}

fn effects_cmd(file: FileConfig, a: EffectArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let mut train = file.train;
    a.train.apply(&mut train);
    let mut outcome = file.outcome;
    let mut effects = file.effects;
    a.outcome_args.apply(&mut outcome, &mut effects);
    let data = Dataset::read_csv(&a.data, Some(&a.outcome))?;
    let fit_dim = a.fit_dim.unwrap_or(train.latent_dim);
    let names = data.treatment_names.clone();
    match method {
        Method::Naive => {
            let r = naive_regress(&data)?;
            write_effects_csv(&a.out, method.name(), &names, &r.coefficients, None)?;
        }
        Method::PcaCorrect => {
            let r = pca_correct_regress(&data, fit_dim)?;
            write_effects_csv(&a.out, method.name(), &names, &r.coefficients, None)?;
        }
        Method::Mcei => {
            let run = match &a.model {
                Some(p) => run_mcei_fitted(&data, load_model(p)?, &outcome, &effects)?,
                None => {
                    train.latent_dim = fit_dim;
                    run_mcei(&data, &train, &outcome, &effects)?
                }
            };
            for w in &run.estimate.warnings {
                eprintln!("warning: {w}");
            }
            run.estimate.write_csv(&a.out, method.name(), &names)?;
        }
    }
    eprintln!("wrote effects to {}", a.out.display());
    Ok(())
}

fn sweep_cmd(file: FileConfig, a: SweepArgs) -> Result<()> {
    let mut c = file.experiment;
    set(&mut c.gammas, a.gammas);
    set(&mut c.redraws, a.redraws);
    set(&mut c.n, a.n);
    set(&mut c.t, a.t);
    set(&mut c.d, a.d);
    set(&mut c.outcome_link, a.outcome_link.map(Into::into));
    c.signed_loadings |= a.signed_loadings;
    if let Some(m) = a.methods {
        c.methods = m.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    }
    set(&mut c.fit_dims, a.fit_dims);
    set(&mut c.seed, a.sweep_seed);
    c.record_timing |= a.record_timing;
    a.train.apply(&mut c.train);
    a.outcome_args.apply(&mut c.outcome, &mut c.effects);
    if a.output_dir.is_some() {
        c.output_dir = a.output_dir;
    }
    let dir = c
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("sweep needs an output directory".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| {
        Error::Config(format!(
            "output directory {} is not writable: {e}",
            dir.display()
        ))
    })?;
    let rows = run_sweep(&c)?;
    let path = dir.join("results.csv");
    write_results_csv(&path, &rows)?;
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    eprintln!(
        "wrote {} rows ({failed} failed) to {}",
        rows.len(),
        path.display()
    );
    if a.report {
        emit_report(&rows, &dir)?;
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let rows = read_results_csv(&a.results)?;
    if rows.is_empty() {
        return Err(Error::Data("results file has no rows".into()));
    }
    std::fs::create_dir_all(&a.output_dir)?;
    let summary = emit_report(&rows, &a.output_dir)?;
    for g in &summary.groups {
        eprintln!(
            "γ={} {} d={}: mean {:?} sd {:?} ({} ok, {} failed)",
            g.gamma, g.method, g.fit_dim, g.mean, g.sd, g.count, g.failed
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(file, a),
        Command::Ingest(a) => ingest_cmd(file, a),
        Command::Fit(a) => fit_cmd(file, a),
        Command::Residuals(a) => residuals_cmd(file, a),
        Command::Effects(a) => effects_cmd(file, a),
        Command::Sweep(a) => sweep_cmd(file, a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
