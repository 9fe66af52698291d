//! Outcome regression on `(z, ε)` and interventional estimates.
//!
//! The regression never sees raw treatments. An intervention `do(t = t*)`
//! is evaluated by inverting the decoder at each banked confounder draw,
//! `ε_m = (t* − μ(z_m)) / s`, and averaging the regression mean over the
//! bank.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confounder::FittedConfounder;
use crate::dataset::format_f64;
use crate::error::{Error, Result};
use crate::gaussian::{tape_log_normal, NoiseDraw, Scale, SCALE_FLOOR};
use crate::numeric::tape::softplus;
use crate::numeric::{
    Activation, Ascent, Matrix, Mlp, OptimizerKind, Parameterized, RngStream, Tape,
};
use crate::residuals::ResidualSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    /// Gaussian likelihood with a learned constant scale.
    #[default]
    Gaussian,
    /// Bernoulli likelihood with a logit link; estimates are log-odds.
    Logistic,
}

/// Shape of the regression mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeArch {
    /// One network over `[z, ε]`.
    #[default]
    Mlp,
    /// A network over `z` plus a linear term in `ε`.
    PartiallyLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeConfig {
    pub family: OutcomeFamily,
    pub arch: OutcomeArch,
    pub hidden_width: usize,
    /// Hidden-layer activation of the regression network.
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        Self {
            family: OutcomeFamily::Gaussian,
            arch: OutcomeArch::Mlp,
            hidden_width: 32,
            activation: Activation::Tanh,
            steps: 3000,
            batch_size: 128,
            learning_rate: 0.005,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

/// Regression of the outcome on `z` (`D` columns) and `ε` (`T` columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    pub family: OutcomeFamily,
    pub arch: OutcomeArch,
    /// Three hidden layers; input `[z, ε]`, or `z` alone when partially linear.
    pub mean: Mlp,
    /// `1 × T` coefficients on `ε` when partially linear.
    pub eps_weights: Option<Matrix>,
    /// Raw scale (`1 × 1`) for the Gaussian family.
    pub raw_scale: Matrix,
    pub latent_dim: usize,
    pub treatments: usize,
}

impl OutcomeParams {
    pub fn new(
        latent_dim: usize,
        treatments: usize,
        config: &OutcomeConfig,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let h = config.hidden_width;
        if h == 0 {
            return Err(Error::Config("hidden_width must be at least 1".into()));
        }
        let Scale::Constant(raw_scale) = Scale::constant(&[1.0])? else {
            unreachable!()
        };
        let (input, eps_weights) = match config.arch {
            OutcomeArch::Mlp => (latent_dim + treatments, None),
            OutcomeArch::PartiallyLinear => (latent_dim, Some(Matrix::zeros(1, treatments))),
        };
        Ok(Self {
            family: config.family,
            arch: config.arch,
            mean: Mlp::new(
                &[input, h, h, h, 1],
                config.activation,
                Activation::Identity,
                rng,
            ),
            eps_weights,
            raw_scale,
            latent_dim,
            treatments,
        })
    }

    pub fn scale(&self) -> f64 {
        softplus(self.raw_scale.item()) + SCALE_FLOOR
    }

    /// Regression mean (log-odds for the logistic family) per row.
    pub fn predict(&self, z: &Matrix, eps: &Matrix) -> Result<Vec<f64>> {
        if z.cols() != self.latent_dim || eps.cols() != self.treatments || z.rows() != eps.rows() {
            return Err(Error::Shape(format!(
                "outcome model expects [{} + {}] inputs, got {:?} and {:?}",
                self.latent_dim,
                self.treatments,
                z.shape(),
                eps.shape()
            )));
        }
        Ok(self.mean_of(z, eps))
    }

    fn mean_of(&self, z: &Matrix, eps: &Matrix) -> Vec<f64> {
        match &self.eps_weights {
            None => self.mean.forward(&Matrix::hcat(&[z, eps])).into_vec(),
            Some(a) => {
                let mut m = self.mean.forward(z);
                m.axpy(1.0, &eps.matmul(&a.transpose()));
                m.into_vec()
            }
        }
    }
}

impl Parameterized for OutcomeParams {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = self.mean.params();
        p.extend(self.eps_weights.iter());
        p.push(&self.raw_scale);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.mean.params_mut();
        p.extend(self.eps_weights.iter_mut());
        p.push(&mut self.raw_scale);
        p
    }
}

/// Maximizes the outcome log-likelihood given residuals and their confounder draws.
pub fn fit_outcome(
    residuals: &ResidualSet,
    y: &[f64],
    config: &OutcomeConfig,
) -> Result<OutcomeParams> {
    let n = residuals.epsilon.rows();
    if y.len() != n {
        return Err(Error::Data(format!(
            "outcome has {} rows, residuals have {n}",
            y.len()
        )));
    }
    if n == 0 {
        return Err(Error::Data("no rows to fit".into()));
    }
    if config.family == OutcomeFamily::Logistic && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("logistic outcome must be 0/1".into()));
    }
    let root = RngStream::new(config.seed, 0);
    let mut params = OutcomeParams::new(
        residuals.z_samples.cols(),
        residuals.epsilon.cols(),
        config,
        &mut root.child_named("init"),
    )?;
    let yv = Matrix::column_vector(y);
    let mut rng = root.child_named("train");
    let mut opt = Ascent::new(config.optimizer, config.learning_rate);
    let bs = config.batch_size.min(n);
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.below(n)).collect();
        let mut tape = Tape::new();
        let vars = params.mean.bind(&mut tape);
        let a = params.eps_weights.as_ref().map(|a| tape.leaf(a.clone()));
        let raw = tape.leaf(params.raw_scale.clone());
        let zb = residuals.z_samples.select_rows(&idx);
        let eb = residuals.epsilon.select_rows(&idx);
        let yb = tape.constant(yv.select_rows(&idx));
        let m = match a {
            None => {
                let xb = tape.constant(Matrix::hcat(&[&zb, &eb]));
                vars.forward(&mut tape, xb)
            }
            Some(a) => {
                let zv = tape.constant(zb);
                let ev = tape.constant(eb);
                let g = vars.forward(&mut tape, zv);
                let lin = tape.matmul_t(ev, false, a, true);
                tape.add(g, lin)
            }
        };
        let ll = match config.family {
            OutcomeFamily::Gaussian => {
                let sp = tape.softplus(raw);
                let sd = tape.offset(sp, SCALE_FLOOR);
                tape_log_normal(&mut tape, yb, m, sd)
            }
            OutcomeFamily::Logistic => {
                // y·m − softplus(m)
                let ym = tape.mul(yb, m);
                let sp = tape.softplus(m);
                tape.sub(ym, sp)
            }
        };
        let obj = tape.mean(ll);
        let g = tape
            .backward(obj)
            .map_err(|e| Error::numerical("outcome fit", format!("step {step}: {e}")))?;
        let mut grads: Vec<Matrix> = vars.leaves().iter().map(|&l| g.wrt(l)).collect();
        grads.extend(a.map(|a| g.wrt(a)));
        grads.push(g.wrt(raw));
        opt.step(params.params_mut(), &grads);
    }
    if !params.all_finite() {
        return Err(Error::numerical("outcome fit", "non-finite parameters"));
    }
    Ok(params)
}

/// Confounder draws representing `p(z)` together with the decoder means
/// and scales needed to invert any intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoEvaluator {
    pub z_bank: Matrix,
    /// Decoder means at each banked draw (`M × T`).
    pub decoder_means: Matrix,
    pub decoder_scales: Vec<f64>,
    pub outcome: OutcomeParams,
}

impl DoEvaluator {
    /// Uses the given bank of confounder draws.
    pub fn new(outcome: &OutcomeParams, fitted: &FittedConfounder, z_bank: Matrix) -> Result<Self> {
        if z_bank.rows() == 0 {
            return Err(Error::Data("empty confounder bank".into()));
        }
        Ok(Self {
            decoder_means: fitted.decoder().mean(&z_bank)?,
            decoder_scales: fitted.decoder_scales(),
            z_bank,
            outcome: outcome.clone(),
        })
    }

    /// One draw `z ∼ p_θ(z | t_n)` per observed row.
    pub fn from_data(
        outcome: &OutcomeParams,
        fitted: &FittedConfounder,
        t: &Matrix,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let noise = NoiseDraw::draw(rng, t.rows(), fitted.params.d());
        let z = fitted.encoder().reparam_sample(t, &noise)?;
        Self::new(outcome, fitted, z)
    }

    pub fn treatments(&self) -> usize {
        self.decoder_scales.len()
    }

    /// `(1/M) Σ_m f(z_m, (t* − μ(z_m)) / s)`.
    pub fn evaluate(&self, t_star: &[f64]) -> Result<f64> {
        Ok(self.evaluate_many(&Matrix::row_vector(t_star))?[0])
    }

    /// [`DoEvaluator::evaluate`] for each row of `t_stars`.
    pub fn evaluate_many(&self, t_stars: &Matrix) -> Result<Vec<f64>> {
        let t = self.treatments();
        if t_stars.cols() != t {
            return Err(Error::Shape(format!(
                "interventions have {} columns, expected {t}",
                t_stars.cols()
            )));
        }
        let m = self.z_bank.rows();
        let d = self.z_bank.cols();
        let k = t_stars.rows();
        if let Some(a) = &self.outcome.eps_weights {
            // additive in ε: the bank average separates
            let g = self.outcome.mean.forward(&self.z_bank).sum() / m as f64;
            let mu_bar = self.decoder_means.column_means();
            let a = a.as_slice();
            let out: Vec<f64> = (0..k)
                .map(|j| {
                    let ts = t_stars.row(j);
                    g + (0..t)
                        .map(|i| a[i] * (ts[i] - mu_bar[i]) / self.decoder_scales[i])
                        .sum::<f64>()
                })
                .collect();
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical("do estimate", "non-finite value"));
            }
            return Ok(out);
        }
        let mut z = Matrix::zeros(m * k, d);
        let mut eps = Matrix::zeros(m * k, t);
        for j in 0..k {
            let ts = t_stars.row(j);
            for r in 0..m {
                z.row_mut(j * m + r).copy_from_slice(self.z_bank.row(r));
                for (i, e) in eps.row_mut(j * m + r).iter_mut().enumerate() {
                    *e = (ts[i] - self.decoder_means.get(r, i)) / self.decoder_scales[i];
                }
            }
        }
        let f = self.outcome.mean_of(&z, &eps);
        let out: Vec<f64> = (0..k)
            .map(|j| f[j * m..(j + 1) * m].iter().sum::<f64>() / m as f64)
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("do estimate", "non-finite value"));
        }
        Ok(out)
    }
}

/// Interventional mean at `t_star`, averaging over `z_bank`.
pub fn do_estimate(
    outcome: &OutcomeParams,
    fitted: &FittedConfounder,
    z_bank: &Matrix,
    t_star: &[f64],
) -> Result<f64> {
    DoEvaluator::new(outcome, fitted, z_bank.clone())?.evaluate(t_star)
}

/// Per-treatment average marginal effects with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimate {
    pub effect_vector: Vec<f64>,
    /// Standard error of each effect across probe points.
    pub stderr: Vec<f64>,
    pub warnings: Vec<String>,
    pub probes: usize,
}

impl CausalEstimate {
    /// `method, treatment, effect, stderr` rows.
    pub fn write_csv(&self, path: &Path, method: &str, names: &[String]) -> Result<()> {
        write_effects_csv(path, method, names, &self.effect_vector, Some(&self.stderr))
    }
}

/// Writes an effects table; `stderr` may be absent for closed-form methods.
pub fn write_effects_csv(
    path: &Path,
    method: &str,
    names: &[String],
    effects: &[f64],
    stderr: Option<&[f64]>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "treatment", "effect", "stderr"])?;
    for (i, e) in effects.iter().enumerate() {
        let name = names
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("t_{}", i + 1));
        let se = stderr.map_or(String::new(), |s| format_f64(s[i]));
        w.write_record([method.to_string(), name, format_f64(*e), se])?;
    }
    w.flush()?;
    Ok(())
}

/// Finite-difference steps of `fraction` × each treatment's standard deviation.
pub fn default_steps(t: &Matrix, fraction: f64) -> Vec<f64> {
    t.column_sds().iter().map(|s| fraction * s).collect()
}

/// `probes` rows drawn uniformly from `t`.
pub fn probe_points(t: &Matrix, probes: usize, rng: &mut RngStream) -> Matrix {
    let idx: Vec<usize> = (0..probes).map(|_| rng.below(t.rows())).collect();
    t.select_rows(&idx)
}

/// Averages central differences `[do(t + h_i e_i) − do(t − h_i e_i)] / 2h_i`
/// over the probe points.
pub fn effect_vector(eval: &DoEvaluator, probes: &Matrix, steps: &[f64]) -> Result<CausalEstimate> {
    let t = eval.treatments();
    if probes.rows() == 0 {
        return Err(Error::Config("at least one probe point is required".into()));
    }
    if steps.len() != t || steps.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Config(
            "one positive step per treatment is required".into(),
        ));
    }
    let k = probes.rows();
    // per probe: 2T shifted interventions evaluated together
    let diffs: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|p| {
            let base = probes.row(p);
            let mut shifted = Matrix::zeros(2 * t, t);
            for i in 0..t {
                shifted.row_mut(2 * i).copy_from_slice(base);
                shifted.row_mut(2 * i + 1).copy_from_slice(base);
                shifted.row_mut(2 * i)[i] += steps[i];
                shifted.row_mut(2 * i + 1)[i] -= steps[i];
            }
            let v = eval.evaluate_many(&shifted)?;
            Ok((0..t)
                .map(|i| (v[2 * i] - v[2 * i + 1]) / (2.0 * steps[i]))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut effect = vec![0.0; t];
    let mut stderr = vec![0.0; t];
    let mut warnings = Vec::new();
    for i in 0..t {
        let col: Vec<f64> = diffs.iter().map(|d| d[i]).collect();
        let m = col.iter().sum::<f64>() / k as f64;
        let var = if k > 1 {
            col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (k - 1) as f64
        } else {
            0.0
        };
        effect[i] = m;
        stderr[i] = (var / k as f64).sqrt();
        // differences near rounding level make the slope meaningless
        let scale = eval
            .outcome
            .mean_of(&Matrix::zeros(1, eval.z_bank.cols()), &Matrix::zeros(1, t))[0]
            .abs()
            .max(1.0);
        if steps[i] < 1e-6 * scale {
            warnings.push(format!(
                "treatment {}: step {} is too small for a reliable difference",
                i + 1,
                steps[i]
            ));
        }
    }
    Ok(CausalEstimate {
        effect_vector: effect,
        stderr,
        warnings,
        probes: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Layer;

    fn linear_outcome(d: usize, t: usize, a: &[f64], b: &[f64], c: f64) -> OutcomeParams {
        let mut w: Vec<f64> = b.to_vec();
        w.extend_from_slice(a);
        let layer = Layer {
            weight: Matrix::row_vector(&w),
            bias: Matrix::scalar(c),
            activation: Activation::Identity,
        };
        OutcomeParams {
            family: OutcomeFamily::Gaussian,
            arch: OutcomeArch::Mlp,
            mean: Mlp::from_layers(vec![layer]).unwrap(),
            eps_weights: None,
            raw_scale: Matrix::scalar(0.0),
            latent_dim: d,
            treatments: t,
        }
    }

    fn small() -> OutcomeConfig {
        OutcomeConfig {
            hidden_width: 4,
            ..OutcomeConfig::default()
        }
    }

    fn evaluator(outcome: OutcomeParams, mu_w: &Matrix, scales: &[f64], z: Matrix) -> DoEvaluator {
        DoEvaluator {
            decoder_means: z.matmul(&mu_w.transpose()),
            decoder_scales: scales.to_vec(),
            z_bank: z,
            outcome,
        }
    }

    #[test]
    fn constant_outcome_gives_constant_do_and_zero_effects() {
        let mut rng = RngStream::new(1, 0);
        let z = rng.normal_matrix(50, 2);
        let w = rng.normal_matrix(3, 2);
        let ev = evaluator(
            linear_outcome(2, 3, &[0.0; 3], &[0.0; 2], 4.5),
            &w,
            &[1.0; 3],
            z,
        );
        for _ in 0..3 {
            let ts: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            assert!((ev.evaluate(&ts).unwrap() - 4.5).abs() < 1e-12);
        }
        let probes = rng.normal_matrix(5, 3);
        let est = effect_vector(&ev, &probes, &[0.1; 3]).unwrap();
        assert!(est.effect_vector.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn linear_system_difference_matches_closed_form() {
        let mut rng = RngStream::new(2, 0);
        let z = rng.normal_matrix(100, 2);
        let w = rng.normal_matrix(3, 2);
        let a = [1.0, -0.5, 2.0];
        let s = [1.0, 0.5, 2.0];
        let ev = evaluator(linear_outcome(2, 3, &a, &[0.7, -1.1], 0.3), &w, &s, z);
        let t1 = [0.4, 1.0, -2.0];
        let t2 = [-0.3, 0.2, 1.0];
        let diff = ev.evaluate(&t1).unwrap() - ev.evaluate(&t2).unwrap();
        let expect: f64 = (0..3).map(|i| a[i] / s[i] * (t1[i] - t2[i])).sum();
        assert!((diff - expect).abs() < 1e-10);
        let est = effect_vector(&ev, &rng.normal_matrix(10, 3), &[0.05; 3]).unwrap();
        for i in 0..3 {
            assert!((est.effect_vector[i] - a[i] / s[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicated_probes_are_deterministic() {
        let mut rng = RngStream::new(3, 0);
        let outcome = OutcomeParams::new(2, 3, &small(), &mut rng).unwrap();
        let ev = evaluator(
            outcome,
            &rng.normal_matrix(3, 2),
            &[1.0; 3],
            rng.normal_matrix(30, 2),
        );
        let p = rng.normal_matrix(1, 3);
        let twice = Matrix::vcat(&[&p, &p]);
        let a = effect_vector(&ev, &p, &[0.1; 3]).unwrap();
        let b = effect_vector(&ev, &twice, &[0.1; 3]).unwrap();
        assert_eq!(a.effect_vector, b.effect_vector);
        assert!(effect_vector(&ev, &p, &[0.0; 3]).is_err());
    }

    #[test]
    fn tiny_step_warns() {
        let mut rng = RngStream::new(3, 1);
        let outcome = OutcomeParams::new(1, 2, &small(), &mut rng).unwrap();
        let ev = evaluator(
            outcome,
            &rng.normal_matrix(2, 1),
            &[1.0; 2],
            rng.normal_matrix(10, 1),
        );
        let est = effect_vector(&ev, &rng.normal_matrix(2, 2), &[1e-9, 0.1]).unwrap();
        assert_eq!(est.warnings.len(), 1);
    }

    #[test]
    fn fits_zero_and_planted_slopes() {
        let mut rng = RngStream::new(5, 0);
        let n = 2000;
        let z = rng.normal_matrix(n, 1);
        let eps = rng.normal_matrix(n, 2);
        let cfg = OutcomeConfig {
            steps: 1500,
            hidden_width: 16,
            ..OutcomeConfig::default()
        };
        let res = ResidualSet::new(
            eps.clone(),
            z.clone(),
            crate::residuals::ResidualSource::Inversion,
        )
        .unwrap();
        let zero = fit_outcome(&res, &vec![0.0; n], &cfg).unwrap();
        let pred = zero.predict(&z, &eps).unwrap();
        assert!(
            pred.iter().all(|p| p.abs() <= 1e-2),
            "{:?}",
            pred.iter().fold(0.0f64, |a, b| a.max(b.abs()))
        );

        let y: Vec<f64> = (0..n)
            .map(|r| 3.0 * eps.get(r, 0) + 0.05 * rng.normal())
            .collect();
        let fit = fit_outcome(&res, &y, &cfg).unwrap();
        let h = 0.1;
        let mut slope = 0.0;
        for r in 0..200 {
            let mut up = eps.select_rows(&[r]);
            let mut dn = up.clone();
            up.set(0, 0, up.get(0, 0) + h);
            dn.set(0, 0, dn.get(0, 0) - h);
            let zr = z.select_rows(&[r]);
            slope +=
                (fit.predict(&zr, &up).unwrap()[0] - fit.predict(&zr, &dn).unwrap()[0]) / (2.0 * h);
        }
        slope /= 200.0;
        assert!((slope - 3.0).abs() <= 0.15, "{slope}");
    }
}
