//! Per-treatment residuals `ε_i` that carry the part of `t_i` not explained
//! by the confounder.
//!
//! With a location-scale decoder `t_i = μ_i(z) + s_i ε_i` the residual is
//! recovered exactly by inversion. [`fit_lagrangian_residuals`] learns a
//! stochastic residual encoder instead, trading reconstruction against an
//! estimate of `I(ε_i; z)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confounder::FittedConfounder;
use crate::dataset::format_f64;
use crate::error::{Error, Result};
use crate::gaussian::{CondGaussian, CondGaussianVars, NoiseDraw, Scale};
use crate::numeric::{
    Activation, Ascent, Matrix, Mlp, OptimizerKind, Parameterized, RngStream, Tape, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSource {
    Inversion,
    Lagrangian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    /// `N × T`.
    pub epsilon: Matrix,
    /// `N × D` confounder draws the residuals were computed against.
    pub z_samples: Matrix,
    pub source: ResidualSource,
}

impl ResidualSet {
    pub fn new(epsilon: Matrix, z_samples: Matrix, source: ResidualSource) -> Result<Self> {
        if epsilon.rows() != z_samples.rows() {
            return Err(Error::Shape(format!(
                "{} residual rows but {} confounder rows",
                epsilon.rows(),
                z_samples.rows()
            )));
        }
        if !epsilon.is_finite() || !z_samples.is_finite() {
            return Err(Error::numerical("residuals", "non-finite entries"));
        }
        Ok(Self {
            epsilon,
            z_samples,
            source,
        })
    }

    /// `eps_1..eps_T, z_1..z_D` columns, one row per observation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.epsilon.cols())
            .map(|i| format!("eps_{i}"))
            .collect();
        header.extend((1..=self.z_samples.cols()).map(|d| format!("z_{d}")));
        w.write_record(&header)?;
        for r in 0..self.epsilon.rows() {
            let rec: Vec<String> = self
                .epsilon
                .row(r)
                .iter()
                .chain(self.z_samples.row(r))
                .map(|v| format_f64(*v))
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(t − μ(z)) / s` for a decoder with constant per-treatment scales `s`.
pub fn invert_with(decoder: &CondGaussian, t: &Matrix, z: &Matrix) -> Result<Matrix> {
    let s = decoder.constant_sd().ok_or_else(|| {
        Error::Config("decoder scale depends on z; use the Lagrangian residual estimator".into())
    })?;
    if t.rows() != z.rows() || t.cols() != decoder.dim() {
        return Err(Error::Shape(format!(
            "treatments {:?} and confounder {:?} do not match the decoder",
            t.shape(),
            z.shape()
        )));
    }
    let mu = decoder.mean(z)?;
    let mut eps = t.clone();
    for r in 0..t.rows() {
        for ((e, m), si) in eps.row_mut(r).iter_mut().zip(mu.row(r)).zip(&s) {
            *e = (*e - m) / si;
        }
    }
    Ok(eps)
}

/// One confounder draw per row from the encoder, then exact inversion.
pub fn invert_residuals(
    fitted: &FittedConfounder,
    t: &Matrix,
    noise: &NoiseDraw,
) -> Result<ResidualSet> {
    let z = fitted.encoder().reparam_sample(t, noise)?;
    let eps = invert_with(fitted.decoder(), t, &z)?;
    ResidualSet::new(eps, z, ResidualSource::Inversion)
}

/// Inversion averaged over `draws` confounder draws per row; the reported
/// confounder is the average draw.
pub fn invert_residuals_averaged(
    fitted: &FittedConfounder,
    t: &Matrix,
    draws: usize,
    rng: &mut RngStream,
) -> Result<ResidualSet> {
    if draws == 0 {
        return Err(Error::Config("draws must be positive".into()));
    }
    let mut eps = Matrix::zeros(t.rows(), t.cols());
    let mut zbar = Matrix::zeros(t.rows(), fitted.params.d());
    for _ in 0..draws {
        let noise = NoiseDraw::draw(rng, t.rows(), fitted.params.d());
        let one = invert_residuals(fitted, t, &noise)?;
        eps.axpy(1.0 / draws as f64, &one.epsilon);
        zbar.axpy(1.0 / draws as f64, &one.z_samples);
    }
    ResidualSet::new(eps, zbar, ResidualSource::Inversion)
}

/// Pearson correlations between residual columns and confounder dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    /// `T × D`; entries involving a zero-variance column are `None`.
    pub corr: Vec<Vec<Option<f64>>>,
    /// Largest defined `|corr|`.
    pub max_abs: f64,
    /// Residual columns with zero variance.
    pub constant_residuals: Vec<usize>,
    /// Confounder dimensions with zero variance.
    pub constant_confounders: Vec<usize>,
}

fn centered(col: &[f64]) -> (Vec<f64>, f64) {
    let m = col.iter().sum::<f64>() / col.len() as f64;
    let c: Vec<f64> = col.iter().map(|v| v - m).collect();
    let ss = c.iter().map(|v| v * v).sum::<f64>();
    (c, ss)
}

pub fn independence_report(res: &ResidualSet) -> Result<IndependenceReport> {
    let n = res.epsilon.rows();
    if n < 30 {
        return Err(Error::Data(format!(
            "independence report needs at least 30 rows, got {n}"
        )));
    }
    let eps: Vec<(Vec<f64>, f64)> = (0..res.epsilon.cols())
        .map(|i| centered(&res.epsilon.column(i)))
        .collect();
    let zs: Vec<(Vec<f64>, f64)> = (0..res.z_samples.cols())
        .map(|d| centered(&res.z_samples.column(d)))
        .collect();
    let mut max_abs: f64 = 0.0;
    let corr = eps
        .iter()
        .map(|(e, se)| {
            zs.iter()
                .map(|(z, sz)| {
                    if *se > 0.0 && *sz > 0.0 {
                        let c = e.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (se * sz).sqrt();
                        max_abs = max_abs.max(c.abs());
                        Some(c)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    Ok(IndependenceReport {
        corr,
        max_abs,
        constant_residuals: (0..eps.len()).filter(|&i| !(eps[i].1 > 0.0)).collect(),
        constant_confounders: (0..zs.len()).filter(|&d| !(zs[d].1 > 0.0)).collect(),
    })
}

/// Settings for [`fit_lagrangian_residuals`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LagrangianConfig {
    /// Lagrange multiplier on the residual–confounder information.
    pub kappa: f64,
    pub hidden_width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for LagrangianConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            hidden_width: 16,
            steps: 3000,
            batch_size: 256,
            learning_rate: 0.005,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

/// Residual model for one treatment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualHead {
    /// `p_λ(ε_i | z, t_i)`.
    pub encoder: CondGaussian,
    /// `p_ν(t_i | z, ε_i)`.
    pub decoder: CondGaussian,
    /// `q(ε_i | z)`, used for `H(ε_i | z)`.
    pub cond_entropy: CondGaussian,
    /// `r(ε_i)` with a constant input, used for `H(ε_i)`.
    pub marg_entropy: CondGaussian,
}

impl ResidualHead {
    fn init(d: usize, h: usize, rng: &mut RngStream) -> Result<Self> {
        let net = |i: usize, rng: &mut RngStream| {
            Mlp::new(&[i, h, h, 1], Activation::Tanh, Activation::Identity, rng)
        };
        Ok(Self {
            encoder: CondGaussian::new(net(d + 1, rng), Scale::constant(&[0.1])?)?,
            decoder: CondGaussian::new(net(d + 1, rng), Scale::constant(&[1.0])?)?,
            cond_entropy: CondGaussian::new(net(d, rng), Scale::constant(&[1.0])?)?,
            marg_entropy: CondGaussian::new(Mlp::linear(1, 1, rng), Scale::constant(&[1.0])?)?,
        })
    }

    fn trained(&self) -> Vec<&Matrix> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }
}

impl Parameterized for ResidualHead {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = self.trained();
        p.extend(self.cond_entropy.params());
        p.extend(self.marg_entropy.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.cond_entropy.params_mut());
        p.extend(self.marg_entropy.params_mut());
        p
    }
}

/// Learned residual heads plus the multiplier they were trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianTrainer {
    pub heads: Vec<ResidualHead>,
    pub kappa: f64,
}

/// Per-step values of the Lagrangian for one treatment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianParts {
    pub recon: f64,
    /// Estimate of `I(ε_i; z)`.
    pub info: f64,
    pub objective: f64,
}

struct HeadVars {
    encoder: CondGaussianVars,
    decoder: CondGaussianVars,
    cond_frozen: CondGaussianVars,
    marg_frozen: CondGaussianVars,
    cond_fit: CondGaussianVars,
    marg_fit: CondGaussianVars,
}

impl LagrangianTrainer {
    pub fn new(t: usize, d: usize, config: &LagrangianConfig, rng: &mut RngStream) -> Result<Self> {
        if !(config.kappa >= 0.0) {
            return Err(Error::Config("kappa must be non-negative".into()));
        }
        let heads = (0..t)
            .map(|_| ResidualHead::init(d, config.hidden_width, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            kappa: config.kappa,
        })
    }

    /// Value and gradients of the treatment-`i` Lagrangian
    /// `mean log p_ν(t_i | z, ε_i) − κ Î(ε_i; z)` on a batch. Gradients are
    /// in [`ResidualHead::params`] order: the Lagrangian gradient for `λ`
    /// and `ν`, and the maximum-likelihood gradient (on detached `ε`) for
    /// the two entropy models.
    pub fn head_gradients(
        &self,
        i: usize,
        z: &Matrix,
        ti: &Matrix,
        delta: &Matrix,
    ) -> Result<(LagrangianParts, Vec<Matrix>)> {
        let head = &self.heads[i];
        let mut tape = Tape::new();
        let v = HeadVars {
            encoder: head.encoder.bind(&mut tape),
            decoder: head.decoder.bind(&mut tape),
            cond_frozen: head.cond_entropy.bind_frozen(&mut tape),
            marg_frozen: head.marg_entropy.bind_frozen(&mut tape),
            cond_fit: head.cond_entropy.bind(&mut tape),
            marg_fit: head.marg_entropy.bind(&mut tape),
        };
        let zv = tape.constant(z.clone());
        let tv = tape.constant(ti.clone());
        let ones = tape.constant(Matrix::filled(z.rows(), 1, 1.0));
        let dv = tape.constant(delta.clone());
        let enc_in = tape.hcat(&[zv, tv]);
        let (eps, _, _) = v.encoder.reparam_sample(&mut tape, enc_in, dv);
        let dec_in = tape.hcat(&[zv, eps]);
        let lp = v.decoder.log_prob(&mut tape, dec_in, tv);
        let recon = tape.mean(lp);
        let lq = v.cond_frozen.log_prob(&mut tape, zv, eps);
        let lr = v.marg_frozen.log_prob(&mut tape, ones, eps);
        let diff = tape.sub(lq, lr);
        let info = tape.mean(diff);
        let pen = tape.scale(info, -self.kappa);
        let objective = tape.add(recon, pen);
        let eps_fixed = tape.detach(eps);
        let fq = v.cond_fit.log_prob(&mut tape, zv, eps_fixed);
        let fr = v.marg_fit.log_prob(&mut tape, ones, eps_fixed);
        let fq = tape.mean(fq);
        let fr = tape.mean(fr);
        let fit = tape.add(fq, fr);
        let total = tape.add(objective, fit);
        let g = tape.backward(total)?;
        let leaves: Vec<Var> = [&v.encoder, &v.decoder, &v.cond_fit, &v.marg_fit]
            .iter()
            .flat_map(|h| h.leaves())
            .collect();
        let parts = LagrangianParts {
            recon: tape.value(recon).item(),
            info: tape.value(info).item(),
            objective: tape.value(objective).item(),
        };
        Ok((parts, leaves.iter().map(|&l| g.wrt(l)).collect()))
    }

    /// Draws `ε_i ∼ p_λ(ε_i | z, t_i)` for every treatment.
    pub fn sample(&self, z: &Matrix, t: &Matrix, rng: &mut RngStream) -> Result<Matrix> {
        let mut eps = Matrix::zeros(t.rows(), t.cols());
        for (i, head) in self.heads.iter().enumerate() {
            let input = Matrix::hcat(&[z, &t.select_columns(&[i])]);
            let noise = NoiseDraw::draw(rng, t.rows(), 1);
            let e = head.encoder.reparam_sample(&input, &noise)?;
            for r in 0..t.rows() {
                eps.set(r, i, e.get(r, 0));
            }
        }
        Ok(eps)
    }
}

/// Trains one residual head per treatment against fixed confounder draws
/// `z` (one per row) and returns sampled residuals with the trainer.
pub fn fit_lagrangian_residuals(
    t: &Matrix,
    z: &Matrix,
    config: &LagrangianConfig,
) -> Result<(ResidualSet, LagrangianTrainer)> {
    if t.rows() != z.rows() || t.rows() == 0 {
        return Err(Error::Shape(
            "treatments and confounder draws must share a nonzero row count".into(),
        ));
    }
    let root = RngStream::new(config.seed, 0);
    let mut trainer =
        LagrangianTrainer::new(t.cols(), z.cols(), config, &mut root.child_named("init"))?;
    let n = t.rows();
    let bs = config.batch_size.min(n);
    for i in 0..t.cols() {
        let mut rng = root.child_named("train").child(i as u64);
        let ti = t.select_columns(&[i]);
        let mut opt = Ascent::new(config.optimizer, config.learning_rate);
        for step in 0..config.steps {
            let idx: Vec<usize> = (0..bs).map(|_| rng.below(n)).collect();
            let delta = rng.normal_matrix(bs, 1);
            let (parts, grads) =
                trainer.head_gradients(i, &z.select_rows(&idx), &ti.select_rows(&idx), &delta)?;
            if !parts.objective.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::numerical(
                    format!("residual head {i}"),
                    format!("diverged at step {step}"),
                ));
            }
            opt.step(trainer.heads[i].params_mut(), &grads);
        }
    }
    let eps = trainer.sample(z, t, &mut root.child_named("sample"))?;
    Ok((
        ResidualSet::new(eps, z.clone(), ResidualSource::Lagrangian)?,
        trainer,
    ))
}
