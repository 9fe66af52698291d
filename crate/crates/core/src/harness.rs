//! Ingestion, end-to-end estimation, simulation sweeps and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{naive_regress, pca_correct_regress};
use crate::confounder::{fit, FittedConfounder, TrainConfig};
use crate::dataset::{format_f64, Dataset, RawTable};
use crate::error::{Error, Result};
use crate::gaussian::NoiseDraw;
use crate::numeric::{to_versioned_json, Matrix, OptimizerKind, RngStream, SCHEMA_VERSION};
use crate::outcome::{
    default_steps, effect_vector, fit_outcome, probe_points, CausalEstimate, DoEvaluator,
    OutcomeArch, OutcomeConfig, OutcomeParams,
};
use crate::residuals::{invert_residuals, ResidualSet};
use crate::simulation::{generate, scaled_mse, OutcomeLink, SimConfig};

/// Version string written into every results row.
pub const CODE_VERSION: &str = concat!("mcei-", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impute {
    #[default]
    Median,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarize {
    #[default]
    None,
    /// 1 when the value exceeds the column mean, else 0.
    MeanThreshold,
}

/// Preprocessing for a user-supplied CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSpec {
    /// Treatment columns; empty means every column except the outcome.
    pub treatment_columns: Vec<String>,
    pub outcome_column: Option<String>,
    /// Per-column shift for the log transform; unlisted columns use `1 − min`.
    pub shift: BTreeMap<String, f64>,
    pub log_transform: bool,
    pub standardize: bool,
    pub impute: Impute,
    pub binarize_outcome: Binarize,
}

impl IngestSpec {
    /// Leaves complete data unchanged.
    pub fn identity(outcome_column: Option<String>) -> Self {
        Self {
            outcome_column,
            ..Self::default()
        }
    }
}

/// Reads a CSV and applies the preprocessing in `spec`. Missing cells are
/// imputed to the column median before any transform; treatments are then
/// log-shifted and standardized as requested.
pub fn ingest(path: &Path, spec: &IngestSpec) -> Result<Dataset> {
    let table = RawTable::read(path)?;
    let outcome_idx = spec
        .outcome_column
        .as_deref()
        .map(|n| table.column_index(n))
        .transpose()?;
    let names: Vec<String> = if spec.treatment_columns.is_empty() {
        table
            .header
            .iter()
            .enumerate()
            .filter(|(c, _)| Some(*c) != outcome_idx)
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        spec.treatment_columns.clone()
    };
    if names.is_empty() {
        return Err(Error::Data("no treatment columns".into()));
    }
    for name in spec.shift.keys() {
        if !names.contains(name) {
            return Err(Error::Data(format!(
                "shift given for '{name}', which is not a treatment column"
            )));
        }
    }
    let n = table.rows.len();
    let mut t = Matrix::zeros(n, names.len());
    for (k, name) in names.iter().enumerate() {
        let mut col = impute_median(&table.column(table.column_index(name)?), name)?;
        if spec.log_transform {
            let shift = match spec.shift.get(name) {
                Some(&s) => s,
                None => 1.0 - col.iter().cloned().fold(f64::INFINITY, f64::min),
            };
            for v in &mut col {
                let arg = *v + shift;
                if !(arg > 0.0) {
                    return Err(Error::Data(format!(
                        "column '{name}': log argument {arg} is not positive"
                    )));
                }
                *v = arg.ln();
            }
        }
        if spec.standardize {
            standardize(&mut col);
        }
        for (r, v) in col.into_iter().enumerate() {
            t.set(r, k, v);
        }
    }
    let outcome = match outcome_idx {
        Some(c) => {
            let mut y = impute_median(&table.column(c), &table.header[c])?;
            if spec.binarize_outcome == Binarize::MeanThreshold {
                y = binarize_by_mean(&y);
            }
            Some(y)
        }
        None => None,
    };
    Dataset::with_names(names, t, spec.outcome_column.clone(), outcome)
}

/// Replaces missing entries by the median of the observed ones.
pub fn impute_median(col: &[Option<f64>], name: &str) -> Result<Vec<f64>> {
    let mut seen: Vec<f64> = col.iter().flatten().copied().collect();
    if seen.is_empty() {
        return Err(Error::Data(format!(
            "column '{name}' has no observed values"
        )));
    }
    seen.sort_by(f64::total_cmp);
    let m = seen.len();
    let median = if m % 2 == 1 {
        seen[m / 2]
    } else {
        0.5 * (seen[m / 2 - 1] + seen[m / 2])
    };
    Ok(col.iter().map(|v| v.unwrap_or(median)).collect())
}

pub fn binarize_by_mean(y: &[f64]) -> Vec<f64> {
    let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    y.iter()
        .map(|&v| if v > mean { 1.0 } else { 0.0 })
        .collect()
}

/// Centers and scales to unit sample standard deviation; constant columns
/// are only centered.
fn standardize(col: &mut [f64]) {
    let n = col.len();
    let mean = col.iter().sum::<f64>() / n.max(1) as f64;
    let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (n.saturating_sub(1)).max(1) as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mcei,
    PcaCorrect,
    Naive,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mcei => "mcei",
            Method::PcaCorrect => "pca_correct",
            Method::Naive => "naive",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcei" => Ok(Method::Mcei),
            "pca_correct" => Ok(Method::PcaCorrect),
            "naive" => Ok(Method::Naive),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// How effects are read off a fitted outcome model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectConfig {
    pub probes: usize,
    /// Finite-difference step as a fraction of each treatment's standard deviation.
    pub step_fraction: f64,
    /// Cap on confounder draws averaged per intervention; `None` uses one per row.
    pub bank_size: Option<usize>,
}

impl Default for EffectConfig {
    fn default() -> Self {
        Self {
            probes: 100,
            step_fraction: 0.1,
            bank_size: None,
        }
    }
}

/// Everything produced by one end-to-end estimate.
#[derive(Clone, Debug)]
pub struct McEiRun {
    pub fitted: FittedConfounder,
    pub residuals: ResidualSet,
    pub outcome: OutcomeParams,
    pub evaluator: DoEvaluator,
    pub estimate: CausalEstimate,
}

/// Confounder fit, residual inversion, outcome regression and effect
/// extraction. All randomness derives from `train.seed`.
pub fn run_mcei(
    data: &Dataset,
    train: &TrainConfig,
    outcome: &OutcomeConfig,
    effects: &EffectConfig,
) -> Result<McEiRun> {
    data.outcome()?;
    let fitted = fit(&data.treatments, train)?;
    run_mcei_fitted(data, fitted, outcome, effects)
}

/// The steps of [`run_mcei`] after the confounder fit. Randomness derives
/// from the seed stored in the fitted model's training config.
pub fn run_mcei_fitted(
    data: &Dataset,
    fitted: FittedConfounder,
    outcome: &OutcomeConfig,
    effects: &EffectConfig,
) -> Result<McEiRun> {
    let y = data.outcome()?;
    let t = &data.treatments;
    if t.cols() != fitted.params.t() {
        return Err(Error::Shape(format!(
            "data has {} treatments, the fitted model has {}",
            t.cols(),
            fitted.params.t()
        )));
    }
    let root = RngStream::new(fitted.config.seed, 0);
    let mut rng = root.child_named("residuals");
    let residuals = invert_residuals(
        &fitted,
        t,
        &NoiseDraw::draw(&mut rng, t.rows(), fitted.params.d()),
    )?;
    let outcome_cfg = OutcomeConfig {
        seed: root.child_named("outcome").next_u64(),
        ..outcome.clone()
    };
    let outcome = fit_outcome(&residuals, y, &outcome_cfg)?;
    let mut rng = root.child_named("bank");
    let bank_rows = match effects.bank_size {
        Some(m) if m < t.rows() => {
            let mut idx = rng.permutation(t.rows());
            idx.truncate(m);
            t.select_rows(&idx)
        }
        _ => t.clone(),
    };
    let evaluator = DoEvaluator::from_data(&outcome, &fitted, &bank_rows, &mut rng)?;
    let probes = probe_points(t, effects.probes, &mut root.child_named("probes"));
    let estimate = effect_vector(
        &evaluator,
        &probes,
        &default_steps(t, effects.step_fraction),
    )?;
    Ok(McEiRun {
        fitted,
        residuals,
        outcome,
        evaluator,
        estimate,
    })
}

/// Effect vector from one method with confounder dimension `fit_dim`.
pub fn estimate_effects(
    method: Method,
    data: &Dataset,
    fit_dim: usize,
    train: &TrainConfig,
    outcome: &OutcomeConfig,
    effects: &EffectConfig,
) -> Result<Vec<f64>> {
    match method {
        Method::Naive => Ok(naive_regress(data)?.coefficients),
        Method::PcaCorrect => Ok(pca_correct_regress(data, fit_dim)?.coefficients),
        Method::Mcei => {
            let train = TrainConfig {
                latent_dim: fit_dim,
                ..train.clone()
            };
            Ok(run_mcei(data, &train, outcome, effects)?
                .estimate
                .effect_vector)
        }
    }
}

/// A simulation sweep over confounding strength, redraws, estimator
/// dimensions and methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gammas: Vec<f64>,
    pub redraws: usize,
    pub n: usize,
    pub t: usize,
    /// True confounder dimension.
    pub d: usize,
    pub sim_sd: f64,
    pub outcome_sd: f64,
    pub outcome_link: OutcomeLink,
    pub signed_loadings: bool,
    pub methods: Vec<Method>,
    pub fit_dims: Vec<usize>,
    pub train: TrainConfig,
    pub outcome: OutcomeConfig,
    pub effects: EffectConfig,
    pub seed: u64,
    /// Write measured wall-clock times; off keeps results byte-reproducible.
    pub record_timing: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            gammas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            redraws: 5,
            n: sim.n,
            t: sim.t,
            d: sim.d,
            sim_sd: sim.sim_sd,
            outcome_sd: sim.outcome_sd,
            outcome_link: sim.outcome_link,
            signed_loadings: sim.signed_loadings,
            methods: vec![Method::Mcei, Method::PcaCorrect, Method::Naive],
            fit_dims: vec![2, 10],
            train: TrainConfig {
                steps: 2000,
                learning_rate: 0.005,
                final_lr_fraction: 0.1,
                optimizer: OptimizerKind::Adam,
                ..TrainConfig::default()
            },
            outcome: OutcomeConfig {
                arch: OutcomeArch::PartiallyLinear,
                ..OutcomeConfig::default()
            },
            effects: EffectConfig::default(),
            seed: 0,
            record_timing: false,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.gammas.is_empty() || self.fit_dims.is_empty() || self.redraws == 0 {
            return Err(Error::Config(
                "gammas, fit_dims and redraws must be nonempty".into(),
            ));
        }
        if self.fit_dims.contains(&0) && self.methods.contains(&Method::Mcei) {
            return Err(Error::Config("mcei needs fit_dim ≥ 1".into()));
        }
        for (i, &g) in self.gammas.iter().enumerate() {
            self.sim_config(i, g, 0).validate()?;
        }
        self.train.validate()?;
        if self.effects.probes == 0 || !(self.effects.step_fraction > 0.0) {
            return Err(Error::Config(
                "effects need positive probes and step_fraction".into(),
            ));
        }
        if let Some(dir) = &self.output_dir {
            std::fs::create_dir_all(dir).map_err(|e| {
                Error::Config(format!("output_dir {} is not writable: {e}", dir.display()))
            })?;
        }
        Ok(())
    }

    /// Simulation settings for one `(γ, redraw)` pair; shared by all methods.
    pub fn sim_config(&self, gamma_idx: usize, gamma: f64, redraw: usize) -> SimConfig {
        SimConfig {
            n: self.n,
            t: self.t,
            d: self.d,
            gamma,
            sim_sd: self.sim_sd,
            outcome_sd: self.outcome_sd,
            seed: self.seed,
            stream: RngStream::new(self.seed, 0)
                .child(gamma_idx as u64)
                .child(redraw as u64)
                .next_u64(),
            outcome_link: self.outcome_link,
            signed_loadings: self.signed_loadings,
        }
    }

    /// Seed for one cell; depends only on the cell's own coordinates.
    pub fn cell_seed(
        &self,
        gamma_idx: usize,
        redraw: usize,
        method: Method,
        fit_dim: usize,
    ) -> u64 {
        RngStream::new(self.seed, 1)
            .child(gamma_idx as u64)
            .child(redraw as u64)
            .child_named(method.name())
            .child(fit_dim as u64)
            .next_u64()
    }

    /// SHA-256 of the canonical JSON form, first 16 hex digits. The output
    /// directory is excluded.
    pub fn hash(&self) -> Result<String> {
        let canonical = Self {
            output_dir: None,
            ..self.clone()
        };
        let digest = Sha256::digest(serde_json::to_vec(&canonical)?);
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub gamma: f64,
    pub redraw: usize,
    pub method: Method,
    pub fit_dim: usize,
    pub scaled_mse: Option<f64>,
    pub wall_seconds: f64,
    /// `ok`, or the error message for a failed cell.
    pub status: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

const RESULT_HEADER: [&str; 10] = [
    "gamma",
    "redraw",
    "method",
    "fit_dim",
    "scaled_mse",
    "wall_seconds",
    "status",
    "config_hash",
    "seed",
    "code_version",
];

/// Runs every cell and returns rows ordered by `(γ, redraw, fit_dim, method)`.
/// Cell failures are recorded in the row's status.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let hash = config.hash()?;
    let draws: Vec<(usize, f64, usize)> = config
        .gammas
        .iter()
        .enumerate()
        .flat_map(|(gi, &g)| (0..config.redraws).map(move |r| (gi, g, r)))
        .collect();
    let mut cells = Vec::new();
    for &(gi, g, r) in &draws {
        for &fd in &config.fit_dims {
            for &m in &config.methods {
                cells.push((gi, g, r, fd, m));
            }
        }
    }
    let data: Vec<Result<(Dataset, Vec<f64>)>> = draws
        .par_iter()
        .map(|&(gi, g, r)| {
            let (d, truth) = generate(&config.sim_config(gi, g, r))?;
            Ok((d, truth.true_effects))
        })
        .collect();
    let mut rows: Vec<((usize, usize, usize, Method), ResultRow)> = cells
        .par_iter()
        .map(|&(gi, g, r, fd, m)| {
            let seed = config.cell_seed(gi, r, m, fd);
            let start = Instant::now();
            let outcome = match &data[gi * config.redraws + r] {
                Ok((d, truth)) => {
                    let train = TrainConfig {
                        seed,
                        ..config.train.clone()
                    };
                    estimate_effects(m, d, fd, &train, &config.outcome, &config.effects)
                        .and_then(|e| scaled_mse(&e, truth))
                }
                Err(e) => Err(Error::Data(format!("simulation failed: {e}"))),
            };
            let wall = if config.record_timing {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let (mse, status) = match outcome {
                Ok(v) => (Some(v), "ok".to_string()),
                Err(e) => (None, e.to_string()),
            };
            (
                (gi, r, fd, m),
                ResultRow {
                    gamma: g,
                    redraw: r,
                    method: m,
                    fit_dim: fd,
                    scaled_mse: mse,
                    wall_seconds: wall,
                    status,
                    config_hash: hash.clone(),
                    seed,
                    code_version: CODE_VERSION.to_string(),
                },
            )
        })
        .collect();
    rows.sort_by_key(|a| a.0);
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record([
            format_f64(r.gamma),
            r.redraw.to_string(),
            r.method.to_string(),
            r.fit_dim.to_string(),
            r.scaled_mse.map(format_f64).unwrap_or_default(),
            format_f64(r.wall_seconds),
            r.status.clone(),
            r.config_hash.clone(),
            r.seed.to_string(),
            r.code_version.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RESULT_HEADER {
        return Err(Error::Data(format!("unexpected results header {header:?}")));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Data(format!("bad {what} '{s}'")))
    };
    let int = |s: &str, what: &str| -> Result<u64> {
        s.parse::<u64>()
            .map_err(|_| Error::Data(format!("bad {what} '{s}'")))
    };
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ResultRow {
                gamma: num(&rec[0], "gamma")?,
                redraw: int(&rec[1], "redraw")? as usize,
                method: rec[2].parse()?,
                fit_dim: int(&rec[3], "fit_dim")? as usize,
                scaled_mse: if rec[4].is_empty() {
                    None
                } else {
                    Some(num(&rec[4], "scaled_mse")?)
                },
                wall_seconds: num(&rec[5], "wall_seconds")?,
                status: rec[6].to_string(),
                config_hash: rec[7].to_string(),
                seed: int(&rec[8], "seed")?,
                code_version: rec[9].to_string(),
            })
        })
        .collect()
}

/// Mean and sample standard deviation of successful cells per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub gamma: f64,
    pub method: Method,
    pub fit_dim: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub count: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub groups: Vec<SummaryRow>,
}

impl Summary {
    pub fn get(&self, gamma: f64, method: Method, fit_dim: usize) -> Option<&SummaryRow> {
        self.groups
            .iter()
            .find(|g| g.gamma == gamma && g.method == method && g.fit_dim == fit_dim)
    }
}

/// Groups by `(γ, method, fit_dim)`; `sd` uses `n − 1` and is 0 for one row.
pub fn summarize(rows: &[ResultRow]) -> Summary {
    let mut groups: BTreeMap<(u64, Method, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let e = groups
            .entry((r.gamma.to_bits(), r.method, r.fit_dim))
            .or_default();
        match r.scaled_mse {
            Some(v) if r.is_ok() => e.0.push(v),
            _ => e.1 += 1,
        }
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((g, method, fit_dim), (vals, failed))| {
            let k = vals.len();
            let mean = (k > 0).then(|| vals.iter().sum::<f64>() / k as f64);
            let sd = mean.map(|m| {
                if k > 1 {
                    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (k - 1) as f64).sqrt()
                } else {
                    0.0
                }
            });
            SummaryRow {
                gamma: f64::from_bits(g),
                method,
                fit_dim,
                mean,
                sd,
                count: k,
                failed,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.gamma
            .total_cmp(&b.gamma)
            .then(a.fit_dim.cmp(&b.fit_dim))
            .then(a.method.cmp(&b.method))
    });
    Summary { groups: out }
}

/// Writes `summary.json`, one `gamma_<γ>.csv` per γ and one two-column
/// `plot_<method>_d<fit_dim>.dat` series per method and dimension.
pub fn emit_report(rows: &[ResultRow], dir: &Path) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Data("no results to report".into()));
    }
    std::fs::create_dir_all(dir)?;
    let summary = summarize(rows);
    std::fs::write(dir.join("summary.json"), to_versioned_json(&summary)?)?;
    let mut by_gamma: BTreeMap<u64, Vec<&SummaryRow>> = BTreeMap::new();
    let mut series: BTreeMap<(Method, usize), Vec<&SummaryRow>> = BTreeMap::new();
    for g in &summary.groups {
        by_gamma.entry(g.gamma.to_bits()).or_default().push(g);
        series.entry((g.method, g.fit_dim)).or_default().push(g);
    }
    let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    for (bits, groups) in by_gamma {
        let mut w = csv::Writer::from_path(
            dir.join(format!("gamma_{}.csv", format_f64(f64::from_bits(bits)))),
        )?;
        w.write_record([
            "method",
            "fit_dim",
            "mean_scaled_mse",
            "sd_scaled_mse",
            "count",
            "failed",
        ])?;
        for g in groups {
            w.write_record([
                g.method.to_string(),
                g.fit_dim.to_string(),
                opt(g.mean),
                opt(g.sd),
                g.count.to_string(),
                g.failed.to_string(),
            ])?;
        }
        w.flush()?;
    }
    for ((method, fit_dim), groups) in series {
        let mut text = String::from("# gamma mean_scaled_mse\n");
        for g in groups.iter().filter(|g| g.mean.is_some()) {
            text.push_str(&format!("{} {}\n", format_f64(g.gamma), opt(g.mean)));
        }
        std::fs::write(dir.join(format!("plot_{method}_d{fit_dim}.dat")), text)?;
    }
    Ok(summary)
}

/// Schema version of every JSON file this crate writes.
pub fn schema_version() -> u32 {
    SCHEMA_VERSION
}
