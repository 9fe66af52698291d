//! Confounder estimation by maximizing reconstruction plus an α-weighted
//! lower bound on the negative additional mutual information, with α chosen
//! on held-out rows.
//!
//! The encoder `p_θ(z | t)` has a linear mean and a network scale. The
//! decoder `p_β(t | z)` is a shared network whose `i`-th output is the mean
//! of treatment `i`, with one learned constant scale per treatment. The
//! auxiliary family `r_ξi(z | t_{-i})` has linear means and constant scales.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ami::{
    ami_estimate, aux_integrand_on_tape, direct_integrand_on_tape, leave_one_out, permute_column,
    AmiEstimate, AuxFamily,
};
use crate::error::{Error, Result};
use crate::gaussian::{
    normal_entropy, tape_log_normal, CondGaussian, CondGaussianVars, NoiseDraw, Scale, LN_2PI,
};
use crate::numeric::{
    from_versioned_json, to_versioned_json, Activation, Ascent, Matrix, Mlp, OptimizerKind,
    Parameterized, RngStream, Tape, Var,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    #[default]
    Auxiliary,
    Direct,
}

/// Training and selection settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Confounder dimension `D`.
    pub latent_dim: usize,
    /// Width of every hidden layer.
    pub hidden_width: usize,
    /// Candidate α values, ascending.
    pub alpha_grid: Vec<f64>,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one, reached by
    /// linear decay; 1 keeps it constant.
    pub final_lr_fraction: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Confounder draws per row and step.
    pub mc_samples: usize,
    pub holdout_fraction: f64,
    /// Relative slack for choosing a larger α than the best-scoring one.
    pub rel_tolerance: f64,
    /// Confounder draws per row for the held-out predictive score.
    pub holdout_samples: usize,
    pub seed: u64,
    pub bound_kind: BoundKind,
    pub optimizer: OptimizerKind,
    /// Replace the linear encoder mean with a two-hidden-layer network.
    pub nonlinear_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            hidden_width: 32,
            alpha_grid: vec![0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0],
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            steps: 2000,
            batch_size: 128,
            mc_samples: 1,
            holdout_fraction: 0.2,
            rel_tolerance: 0.01,
            holdout_samples: 32,
            seed: 0,
            bound_kind: BoundKind::Auxiliary,
            optimizer: OptimizerKind::Sgd,
            nonlinear_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.hidden_width == 0 {
            return bad("hidden_width must be at least 1");
        }
        if self.alpha_grid.is_empty() {
            return bad("alpha_grid must not be empty");
        }
        if self.alpha_grid.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return bad("alpha_grid values must be finite and non-negative");
        }
        if self.alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("alpha_grid must be strictly ascending");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must lie in (0, 1]");
        }
        if self.steps == 0
            || self.batch_size == 0
            || self.mc_samples == 0
            || self.holdout_samples == 0
        {
            return bad("steps, batch_size, mc_samples and holdout_samples must be positive");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must lie in (0, 1)");
        }
        if !(self.rel_tolerance >= 0.0) {
            return bad("rel_tolerance must be non-negative");
        }
        Ok(())
    }
}

/// Encoder θ, decoder β and auxiliary family ξ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderParams {
    pub encoder: CondGaussian,
    pub decoder: CondGaussian,
    pub aux: AuxFamily,
    /// Number of updates the auxiliary family has received.
    pub aux_steps: u64,
}

impl ConfounderParams {
    /// Random initialization for `t` treatments.
    pub fn init(t: usize, config: &TrainConfig, rng: &mut RngStream) -> Result<Self> {
        if t < 2 {
            return Err(Error::Data(format!(
                "at least 2 treatments are required, got {t}"
            )));
        }
        let (d, h) = (config.latent_dim, config.hidden_width);
        let mean = if config.nonlinear_encoder {
            Mlp::new(&[t, h, h, d], Activation::Tanh, Activation::Identity, rng)
        } else {
            Mlp::linear(t, d, rng)
        };
        let scale = Mlp::new(&[t, h, h, d], Activation::Tanh, Activation::Identity, rng);
        let encoder = CondGaussian::new(mean, Scale::Net(scale))?;
        let dec_mean = Mlp::new(
            &[d, h, h, h, t],
            Activation::Tanh,
            Activation::Identity,
            rng,
        );
        let decoder = CondGaussian::new(dec_mean, Scale::constant(&vec![1.0; t])?)?;
        let aux = AuxFamily::linear(t, d, 1.0, rng)?;
        Ok(Self {
            encoder,
            decoder,
            aux,
            aux_steps: 0,
        })
    }

    pub fn t(&self) -> usize {
        self.decoder.dim()
    }

    pub fn d(&self) -> usize {
        self.encoder.dim()
    }
}

impl Parameterized for ConfounderParams {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.aux.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.aux.params_mut());
        p
    }
}

/// Which AMI bound enters the objective.
#[derive(Clone, Debug, PartialEq)]
pub enum BoundChoice {
    Auxiliary,
    /// Direct bound; one row permutation per treatment.
    Direct(Vec<Vec<usize>>),
}

/// Objective value with its parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub objective: f64,
    /// Mean over rows of `Σ_i log p_β(t_i | z)`.
    pub recon: f64,
    /// Sum of the per-treatment bound terms.
    pub bound: f64,
    pub per_treatment: Vec<f64>,
}

/// Gradients of the objective, grouped by parameter set.
#[derive(Clone, Debug)]
pub struct MclboGradients {
    pub parts: ObjectiveParts,
    pub encoder: Vec<Matrix>,
    pub decoder: Vec<Matrix>,
    /// Gradient of the objective with respect to ξ (carries the factor α).
    pub aux: Vec<Matrix>,
    /// Gradient of `Σ_i mean log r_i(z | t_{-i})` with `z` held fixed; used
    /// to train ξ independently of α.
    pub aux_fit: Vec<Matrix>,
}

struct Built {
    objective: Var,
    recon: Var,
    terms: Vec<Var>,
    aux_fit: Option<Var>,
    enc: CondGaussianVars,
    dec: CondGaussianVars,
    aux: Vec<CondGaussianVars>,
    aux_fit_vars: Vec<CondGaussianVars>,
}

fn check_inputs(params: &ConfounderParams, batch: &Matrix, noise: &NoiseDraw) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if batch.cols() != params.t() {
        return Err(Error::Shape(format!(
            "batch has {} treatments, model has {}",
            batch.cols(),
            params.t()
        )));
    }
    if noise.delta().shape() != (batch.rows(), params.d()) {
        return Err(Error::Shape(format!(
            "noise {:?} does not match batch rows {} × D {}",
            noise.delta().shape(),
            batch.rows(),
            params.d()
        )));
    }
    Ok(())
}

fn build(
    tape: &mut Tape,
    params: &ConfounderParams,
    batch: &Matrix,
    noise: &NoiseDraw,
    alpha: f64,
    choice: &BoundChoice,
    with_aux_fit: bool,
) -> Built {
    let enc = params.encoder.bind(tape);
    let dec = params.decoder.bind(tape);
    let aux = params.aux.bind(tape);
    let t = tape.constant(batch.clone());
    let delta = tape.constant(noise.delta().clone());
    let (z, mu, sd) = enc.reparam_sample(tape, t, delta);

    let dec_mu = dec.mean(tape, z);
    let dec_sd = dec.scale(tape, z);
    let recon_rows = tape_log_normal(tape, t, dec_mu, dec_sd);
    let recon = tape.mean(recon_rows);

    let loo = leave_one_out(batch);
    let loo_vars: Vec<Var> = loo.into_iter().map(|m| tape.constant(m)).collect();
    let terms: Vec<Var> = match choice {
        BoundChoice::Auxiliary => {
            let log_q = tape_log_normal(tape, z, mu, sd);
            (0..params.t())
                .map(|i| {
                    let rows = aux_integrand_on_tape(tape, &aux[i], loo_vars[i], z, log_q);
                    tape.mean(rows)
                })
                .collect()
        }
        BoundChoice::Direct(perms) => (0..params.t())
            .map(|i| {
                let t_hat = tape.constant(permute_column(batch, i, &perms[i]));
                let rows = direct_integrand_on_tape(tape, &enc, t_hat, z, sd);
                tape.mean(rows)
            })
            .collect(),
    };
    let all = tape.hcat(&terms);
    let bound = tape.sum(all);
    let weighted = tape.scale(bound, alpha);
    let objective = tape.add(recon, weighted);

    let (aux_fit, aux_fit_vars) = if with_aux_fit {
        let fit_vars = params.aux.bind(tape);
        let z_fixed = tape.detach(z);
        let fits: Vec<Var> = (0..params.t())
            .map(|i| {
                let lp = fit_vars[i].log_prob(tape, loo_vars[i], z_fixed);
                tape.mean(lp)
            })
            .collect();
        let all = tape.hcat(&fits);
        (Some(tape.sum(all)), fit_vars)
    } else {
        (None, Vec::new())
    };
    Built {
        objective,
        recon,
        terms,
        aux_fit,
        enc,
        dec,
        aux,
        aux_fit_vars,
    }
}

fn parts_of(tape: &Tape, b: &Built) -> Result<ObjectiveParts> {
    let recon = tape.value(b.recon).item();
    if !recon.is_finite() {
        return Err(Error::numerical("reconstruction", format!("value {recon}")));
    }
    let per_treatment: Vec<f64> = b.terms.iter().map(|&v| tape.value(v).item()).collect();
    if let Some(i) = per_treatment.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(
            format!("bound term {i}"),
            format!("value {}", per_treatment[i]),
        ));
    }
    let objective = tape.value(b.objective).item();
    if !objective.is_finite() {
        return Err(Error::numerical("objective", format!("value {objective}")));
    }
    Ok(ObjectiveParts {
        objective,
        recon,
        bound: per_treatment.iter().sum(),
        per_treatment,
    })
}

/// Monte Carlo MCLBO on one batch with the auxiliary bound.
pub fn mclbo_objective(
    params: &ConfounderParams,
    batch: &Matrix,
    noise: &NoiseDraw,
    alpha: f64,
) -> Result<ObjectiveParts> {
    mclbo_objective_with(params, batch, noise, alpha, &BoundChoice::Auxiliary)
}

/// Monte Carlo MCLBO on one batch with a chosen bound.
pub fn mclbo_objective_with(
    params: &ConfounderParams,
    batch: &Matrix,
    noise: &NoiseDraw,
    alpha: f64,
    choice: &BoundChoice,
) -> Result<ObjectiveParts> {
    check_inputs(params, batch, noise)?;
    let mut tape = Tape::new();
    let b = build(&mut tape, params, batch, noise, alpha, choice, false);
    parts_of(&tape, &b)
}

/// Reparameterized gradients of the MCLBO by reverse-mode differentiation.
pub fn mclbo_gradients(
    params: &ConfounderParams,
    batch: &Matrix,
    noise: &NoiseDraw,
    alpha: f64,
    choice: &BoundChoice,
) -> Result<MclboGradients> {
    check_inputs(params, batch, noise)?;
    let mut tape = Tape::new();
    let b = build(&mut tape, params, batch, noise, alpha, choice, true);
    let parts = parts_of(&tape, &b)?;
    let aux_fit = b.aux_fit.expect("aux fit requested");
    let total = tape.add(b.objective, aux_fit);
    let g = tape.backward(total)?;
    let collect = |vars: Vec<Var>| -> Vec<Matrix> { vars.iter().map(|&v| g.wrt(v)).collect() };
    Ok(MclboGradients {
        parts,
        encoder: collect(b.enc.leaves()),
        decoder: collect(b.dec.leaves()),
        aux: collect(b.aux.iter().flat_map(|a| a.leaves()).collect()),
        aux_fit: collect(b.aux_fit_vars.iter().flat_map(|a| a.leaves()).collect()),
    })
}

/// One joint ascent step on θ, β (objective gradient) and ξ (auxiliary
/// likelihood gradient). `step` is reported on failure.
pub fn grad_step(
    params: &mut ConfounderParams,
    optimizer: &mut Ascent,
    batch: &Matrix,
    noise: &NoiseDraw,
    alpha: f64,
    choice: &BoundChoice,
    step: usize,
) -> Result<ObjectiveParts> {
    let g = mclbo_gradients(params, batch, noise, alpha, choice)
        .map_err(|e| Error::numerical("mclbo", format!("step {step}: {e}")))?;
    let grads: Vec<Matrix> = g
        .encoder
        .into_iter()
        .chain(g.decoder)
        .chain(g.aux_fit)
        .collect();
    if grads.iter().any(|m| !m.is_finite()) {
        return Err(Error::numerical(
            "mclbo gradient",
            format!("step {step}: non-finite gradient"),
        ));
    }
    optimizer.step(params.params_mut(), &grads);
    params.aux_steps += 1;
    Ok(g.parts)
}

/// Held-out leave-one-out predictive score with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutScore {
    /// `−(1/N) Σ_n Σ_i log[(1/S) Σ_s p_β(t_ni | z_s)]`, `z_s ∼ r_i(· | t_{n,-i})`.
    pub score: f64,
    pub stderr: f64,
    pub per_treatment: Vec<f64>,
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Scores how well each treatment is predicted from the others through the
/// confounder, using `samples` draws from each auxiliary conditional.
pub fn holdout_predictive(
    params: &ConfounderParams,
    holdout: &Matrix,
    samples: usize,
    rng: &mut RngStream,
) -> Result<HoldoutScore> {
    if params.aux_steps == 0 {
        return Err(Error::Config(
            "the auxiliary family has not been trained".into(),
        ));
    }
    if holdout.rows() == 0 || holdout.cols() != params.t() || samples == 0 {
        return Err(Error::Data(
            "holdout must be nonempty with matching treatments".into(),
        ));
    }
    let (n, t, d) = (holdout.rows(), params.t(), params.d());
    let sd = params
        .decoder
        .constant_sd()
        .expect("decoder scale is constant");
    let tiled: Vec<usize> = (0..n)
        .flat_map(|r| std::iter::repeat_n(r, samples))
        .collect();
    let mut row_totals = vec![0.0; n];
    let mut per_treatment = vec![0.0; t];
    for (i, tm) in leave_one_out(holdout).iter().enumerate() {
        let cond = tm.select_rows(&tiled);
        let noise = NoiseDraw::draw(rng, n * samples, d);
        let z = params.aux.member(i).reparam_sample(&cond, &noise)?;
        let mu = params.decoder.mean(&z)?;
        let mut buf = vec![0.0; samples];
        for r in 0..n {
            let target = holdout.get(r, i);
            for (s, b) in buf.iter_mut().enumerate() {
                let m = mu.get(r * samples + s, i);
                let q = (target - m) / sd[i];
                *b = -0.5 * LN_2PI - sd[i].ln() - 0.5 * q * q;
            }
            let lp = log_mean_exp(&buf);
            row_totals[r] -= lp;
            per_treatment[i] -= lp / n as f64;
        }
    }
    if row_totals.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("holdout predictive", "non-finite score"));
    }
    let score = row_totals.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        row_totals
            .iter()
            .map(|v| (v - score) * (v - score))
            .sum::<f64>()
            / (n - 1) as f64
    } else {
        0.0
    };
    Ok(HoldoutScore {
        score,
        stderr: (var / n as f64).sqrt(),
        per_treatment,
    })
}

/// Gaussian plug-in estimate of `Σ_i H(t_i)`: the score a model that ignores
/// the other treatments would approach.
pub fn marginal_entropy_estimate(t: &Matrix) -> f64 {
    t.column_sds().iter().map(|&s| normal_entropy(s)).sum()
}

/// Largest α whose score is within `tol · |best|` of the best (lowest)
/// score. Entries with `None` (failed fits) are skipped.
pub fn select_alpha(scores: &[(f64, Option<f64>)], tol: f64) -> Option<f64> {
    let best = scores
        .iter()
        .filter_map(|(_, s)| *s)
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return None;
    }
    let cut = best + tol * best.abs();
    scores
        .iter()
        .filter(|(_, s)| s.is_some_and(|s| s <= cut))
        .map(|(a, _)| *a)
        .fold(None, |acc: Option<f64>, a| {
            Some(acc.map_or(a, |b| b.max(a)))
        })
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub objective: f64,
    pub recon: f64,
    pub bound: f64,
}

/// Outcome of training at one α.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    pub alpha: f64,
    /// `"ok"` or `"failed: <reason>"`.
    pub status: String,
    pub holdout_score: Option<f64>,
    pub holdout_stderr: Option<f64>,
    /// Auxiliary bounds on the held-out rows after training.
    pub ami: Option<AmiEstimate>,
    pub final_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedConfounder {
    pub config: TrainConfig,
    pub params: ConfounderParams,
    pub chosen_alpha: f64,
    pub alpha_results: Vec<AlphaResult>,
    /// Trace for the chosen α.
    pub training_trace: Vec<TraceRow>,
    pub train_rows: usize,
    pub holdout_rows: usize,
}

impl FittedConfounder {
    pub fn encoder(&self) -> &CondGaussian {
        &self.params.encoder
    }

    pub fn decoder(&self) -> &CondGaussian {
        &self.params.decoder
    }

    pub fn aux(&self) -> &AuxFamily {
        &self.params.aux
    }

    /// Decoder standard deviations `s_i`.
    pub fn decoder_scales(&self) -> Vec<f64> {
        self.params
            .decoder
            .constant_sd()
            .expect("decoder scale is constant")
    }

    /// One draw `z ∼ p_θ(z | t)` per row.
    pub fn posterior_sample(&self, t: &Matrix, rng: &mut RngStream) -> Result<Matrix> {
        let noise = NoiseDraw::draw(rng, t.rows(), self.params.d());
        self.params.encoder.reparam_sample(t, &noise)
    }

    pub fn posterior_mean(&self, t: &Matrix) -> Result<Matrix> {
        self.params.encoder.mean(t)
    }

    /// `(α, holdout score)` pairs in grid order.
    pub fn holdout_scores(&self) -> Vec<(f64, Option<f64>)> {
        self.alpha_results
            .iter()
            .map(|r| (r.alpha, r.holdout_score))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        to_versioned_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        from_versioned_json(text)
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        write_trace_csv(&self.training_trace, path)
    }
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Row split into (train, holdout) indices.
pub fn split_rows(
    n: usize,
    holdout_fraction: f64,
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_hold = ((n as f64) * holdout_fraction).round() as usize;
    let n_hold = n_hold.max(1);
    if n < n_hold + 2 {
        return Err(Error::Data(format!(
            "{n} rows leave fewer than 2 training rows"
        )));
    }
    let perm = rng.permutation(n);
    let mut hold = perm[..n_hold].to_vec();
    let mut train = perm[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    Ok((train, hold))
}

/// Trains from `init` at a single α. Returns the trained parameters and trace.
pub fn train_at_alpha(
    init: &ConfounderParams,
    train: &Matrix,
    alpha: f64,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(ConfounderParams, Vec<TraceRow>)> {
    let mut params = init.clone();
    let mut opt = Ascent::new(config.optimizer, config.learning_rate);
    let n = train.rows();
    let bs = config.batch_size.min(n);
    let mut trace = Vec::with_capacity(config.steps);
    let decay = (1.0 - config.final_lr_fraction) / config.steps.max(2).saturating_sub(1) as f64;
    for step in 0..config.steps {
        opt.set_learning_rate(config.learning_rate * (1.0 - decay * step as f64));
        let idx: Vec<usize> = (0..bs).map(|_| rng.below(n)).collect();
        let rows: Vec<usize> = (0..config.mc_samples)
            .flat_map(|_| idx.iter().copied())
            .collect();
        let batch = train.select_rows(&rows);
        let noise = NoiseDraw::draw(rng, rows.len(), config.latent_dim);
        let choice = match config.bound_kind {
            BoundKind::Auxiliary => BoundChoice::Auxiliary,
            BoundKind::Direct => BoundChoice::Direct(
                (0..params.t())
                    .map(|_| rng.permutation(rows.len()))
                    .collect(),
            ),
        };
        let parts = grad_step(&mut params, &mut opt, &batch, &noise, alpha, &choice, step)?;
        trace.push(TraceRow {
            step,
            objective: parts.objective,
            recon: parts.recon,
            bound: parts.bound,
        });
    }
    if !params.all_finite() {
        return Err(Error::numerical("parameters", "non-finite after training"));
    }
    Ok((params, trace))
}

/// Trains at every α on a row split, scores each on the held-out rows, and
/// keeps the largest α within tolerance of the best score.
pub fn fit(data: &Matrix, config: &TrainConfig) -> Result<FittedConfounder> {
    config.validate()?;
    if data.cols() < 2 {
        return Err(Error::Data(format!(
            "at least 2 treatments are required, got {}",
            data.cols()
        )));
    }
    if !data.is_finite() {
        return Err(Error::Data("treatments contain non-finite values".into()));
    }
    let root = RngStream::new(config.seed, 0);
    let (train_idx, hold_idx) = split_rows(
        data.rows(),
        config.holdout_fraction,
        &mut root.child_named("split"),
    )?;
    let train = data.select_rows(&train_idx);
    let holdout = data.select_rows(&hold_idx);
    let init = ConfounderParams::init(data.cols(), config, &mut root.child_named("init"))?;

    type Cell = (AlphaResult, Option<(ConfounderParams, Vec<TraceRow>)>);
    let cells: Vec<Cell> = config
        .alpha_grid
        .par_iter()
        .enumerate()
        .map(|(k, &alpha)| {
            let mut rng = root.child_named("train").child(k as u64);
            let trained =
                train_at_alpha(&init, &train, alpha, config, &mut rng).and_then(|(p, trace)| {
                    // common random numbers across α for the held-out comparison
                    let mut hold_rng = root.child_named("holdout");
                    let score =
                        holdout_predictive(&p, &holdout, config.holdout_samples, &mut hold_rng)?;
                    let noise = NoiseDraw::draw(&mut hold_rng, holdout.rows(), config.latent_dim);
                    let ami = ami_estimate(&p.encoder, &p.aux, &holdout, &noise)?;
                    Ok((p, trace, score, ami))
                });
            match trained {
                Ok((p, trace, score, ami)) => (
                    AlphaResult {
                        alpha,
                        status: "ok".into(),
                        holdout_score: Some(score.score),
                        holdout_stderr: Some(score.stderr),
                        ami: Some(ami),
                        final_objective: trace.last().map(|r| r.objective),
                    },
                    Some((p, trace)),
                ),
                Err(e) => (
                    AlphaResult {
                        alpha,
                        status: format!("failed: {e}"),
                        holdout_score: None,
                        holdout_stderr: None,
                        ami: None,
                        final_objective: None,
                    },
                    None,
                ),
            }
        })
        .collect();

    let scores: Vec<(f64, Option<f64>)> = cells
        .iter()
        .map(|(r, _)| (r.alpha, r.holdout_score))
        .collect();
    let chosen = select_alpha(&scores, config.rel_tolerance).ok_or_else(|| {
        let reasons: Vec<String> = cells
            .iter()
            .map(|(r, _)| format!("α={}: {}", r.alpha, r.status))
            .collect();
        Error::numerical(
            "confounder fit",
            format!("every α failed ({})", reasons.join("; ")),
        )
    })?;
    let mut alpha_results = Vec::with_capacity(cells.len());
    let mut picked = None;
    for (r, trained) in cells {
        if r.alpha == chosen {
            picked = trained;
        }
        alpha_results.push(r);
    }
    let (params, training_trace) = picked.expect("chosen α has parameters");
    Ok(FittedConfounder {
        config: config.clone(),
        params,
        chosen_alpha: chosen,
        alpha_results,
        training_trace,
        train_rows: train_idx.len(),
        holdout_rows: hold_idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(seed: u64) -> (ConfounderParams, Matrix, NoiseDraw) {
        let cfg = TrainConfig {
            latent_dim: 2,
            hidden_width: 4,
            ..TrainConfig::default()
        };
        let mut rng = RngStream::new(seed, 0);
        let p = ConfounderParams::init(3, &cfg, &mut rng).unwrap();
        let batch = rng.normal_matrix(8, 3);
        let noise = NoiseDraw::draw(&mut rng, 8, 2);
        (p, batch, noise)
    }

    #[test]
    fn alpha_zero_is_reconstruction() {
        let (p, b, n) = tiny_params(7);
        let parts = mclbo_objective(&p, &b, &n, 0.0).unwrap();
        assert_eq!(parts.objective, parts.recon);
        let parts = mclbo_objective(&p, &b, &n, 2.0).unwrap();
        assert!((parts.objective - (parts.recon + 2.0 * parts.bound)).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (mut p, b, n) = tiny_params(3);
        let before = p.flat();
        let mut opt = Ascent::new(OptimizerKind::Sgd, 0.0);
        grad_step(&mut p, &mut opt, &b, &n, 1.0, &BoundChoice::Auxiliary, 0).unwrap();
        assert_eq!(p.flat(), before);
    }

    #[test]
    fn selection_rule() {
        let s = [(0.1, Some(1.000)), (0.5, Some(1.005)), (1.0, Some(1.100))];
        assert_eq!(select_alpha(&s, 0.01), Some(0.5));
        assert_eq!(select_alpha(&[(0.3, Some(-2.0))], 0.01), Some(0.3));
        // negative scores: tolerance is relative to |best|
        let s = [(0.0, Some(-10.0)), (1.0, Some(-9.95)), (2.0, Some(-9.0))];
        assert_eq!(select_alpha(&s, 0.01), Some(1.0));
        let s = [(0.0, Some(1.0)), (5.0, None)];
        assert_eq!(select_alpha(&s, 0.5), Some(0.0));
        assert_eq!(select_alpha(&[(1.0, None)], 0.01), None);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig {
                alpha_grid: vec![],
                ..ok.clone()
            },
            TrainConfig {
                alpha_grid: vec![1.0, 0.5],
                ..ok.clone()
            },
            TrainConfig {
                holdout_fraction: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn untrained_aux_is_rejected() {
        let (p, b, _) = tiny_params(1);
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(
            holdout_predictive(&p, &b, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let mut rng = RngStream::new(5, 5);
        let (tr, ho) = split_rows(50, 0.2, &mut rng).unwrap();
        assert_eq!(ho.len(), 10);
        let mut all: Vec<usize> = tr.iter().chain(&ho).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(split_rows(2, 0.5, &mut rng).is_err());
    }
}
