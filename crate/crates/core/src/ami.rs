//! Lower bounds on the negative additional mutual information
//! `−I(t_i; z | t_{-i})` of a stochastic confounder estimate.
//!
//! Two estimators are provided. The auxiliary bound replaces `p(z | t_{-i})`
//! with a learned Gaussian `r_i(z | t_{-i})` and is tight when `r_i` matches
//! it. The direct bound evaluates the encoder on a batch where column `i`
//! has been permuted, and is valid up to an additive constant that does not
//! depend on the encoder.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{
    tape_entropy, tape_log_normal, CondGaussian, CondGaussianVars, NoiseDraw, Scale,
};
use crate::numeric::{Ascent, Matrix, Mlp, OptimizerKind, Parameterized, RngStream, Tape, Var};

/// One leave-one-out conditional `r_i(z | t_{-i})` per treatment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxFamily {
    members: Vec<CondGaussian>,
}

impl AuxFamily {
    /// Validates that there are `T` members, each mapping `T − 1` inputs to
    /// the same output dimension.
    pub fn new(members: Vec<CondGaussian>) -> Result<Self> {
        let t = members.len();
        if t < 2 {
            return Err(Error::Config(format!(
                "an auxiliary family needs at least 2 members, got {t}"
            )));
        }
        let d = members[0].dim();
        for (i, m) in members.iter().enumerate() {
            if m.in_dim() != t - 1 || m.dim() != d {
                return Err(Error::Shape(format!(
                    "auxiliary member {i} maps {}→{}, expected {}→{d}",
                    m.in_dim(),
                    m.dim(),
                    t - 1
                )));
            }
        }
        Ok(Self { members })
    }

    /// Linear means with a learned constant scale, initialised at `init_sd`.
    pub fn linear(t: usize, d: usize, init_sd: f64, rng: &mut RngStream) -> Result<Self> {
        let members = (0..t)
            .map(|_| {
                CondGaussian::new(
                    Mlp::linear(t - 1, d, rng),
                    Scale::constant(&vec![init_sd; d])?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }

    pub fn member(&self, i: usize) -> &CondGaussian {
        &self.members[i]
    }

    pub fn members(&self) -> &[CondGaussian] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [CondGaussian] {
        &mut self.members
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<CondGaussianVars> {
        self.members.iter().map(|m| m.bind(tape)).collect()
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<CondGaussianVars> {
        self.members.iter().map(|m| m.bind_frozen(tape)).collect()
    }
}

impl Parameterized for AuxFamily {
    fn params(&self) -> Vec<&Matrix> {
        self.members.iter().flat_map(|m| m.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.members
            .iter_mut()
            .flat_map(|m| m.params_mut())
            .collect()
    }
}

/// A Monte Carlo estimate of a bound with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    pub stderr: f64,
}

impl BoundValue {
    fn from_rows(rows: &[f64]) -> Self {
        let n = rows.len() as f64;
        let value = rows.iter().sum::<f64>() / n;
        let var = if rows.len() > 1 {
            rows.iter().map(|v| (v - value) * (v - value)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            value,
            stderr: (var / n).sqrt(),
        }
    }
}

/// Auxiliary bounds for every treatment, sharing one confounder draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmiEstimate {
    /// Sum of the per-treatment bounds (a lower bound on `−Σ_i I`).
    pub value: f64,
    pub per_treatment: Vec<f64>,
    pub mc_stderr: Vec<f64>,
}

/// `t` with column `i` removed, for every `i`.
pub fn leave_one_out(t: &Matrix) -> Vec<Matrix> {
    (0..t.cols()).map(|i| t.drop_column(i)).collect()
}

/// Per-row `log r_i(z | t_{-i}) − log p_θ(z | t)` on the tape (`rows × 1`).
pub fn aux_integrand_on_tape(
    tape: &mut Tape,
    aux_i: &CondGaussianVars,
    t_minus_i: Var,
    z: Var,
    log_q: Var,
) -> Var {
    let lr = aux_i.log_prob(tape, t_minus_i, z);
    tape.sub(lr, log_q)
}

fn check_batch(
    encoder: &CondGaussian,
    aux: Option<&AuxFamily>,
    batch: &Matrix,
    i: usize,
) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if batch.cols() != encoder.in_dim() {
        return Err(Error::Shape(format!(
            "batch has {} treatments, encoder expects {}",
            batch.cols(),
            encoder.in_dim()
        )));
    }
    if i >= batch.cols() {
        return Err(Error::Config(format!("treatment index {i} out of range")));
    }
    if let Some(aux) = aux {
        if aux.len() != batch.cols() || aux.dim() != encoder.dim() {
            return Err(Error::Shape(
                "auxiliary family does not match encoder".into(),
            ));
        }
    }
    Ok(())
}

/// Per-row integrands of every auxiliary bound, computed from one shared draw.
fn aux_integrands(
    encoder: &CondGaussian,
    aux: &AuxFamily,
    batch: &Matrix,
    noise: &NoiseDraw,
) -> Result<Vec<Vec<f64>>> {
    let z = encoder.reparam_sample(batch, noise)?;
    let log_q = encoder.log_prob(batch, &z)?;
    let rows: Vec<Vec<f64>> = leave_one_out(batch)
        .iter()
        .zip(aux.members())
        .map(|(tm, r)| {
            let lr = r.log_prob(tm, &z)?;
            Ok(lr.iter().zip(&log_q).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_>>()?;
    for (i, r) in rows.iter().enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                format!("aux bound {i}"),
                "non-finite density",
            ));
        }
    }
    Ok(rows)
}

/// Monte Carlo estimate of `E[log r_i(z | t_{-i}) − log p_θ(z | t)]`.
pub fn aux_bound(
    encoder: &CondGaussian,
    aux: &AuxFamily,
    batch: &Matrix,
    noise: &NoiseDraw,
    i: usize,
) -> Result<BoundValue> {
    check_batch(encoder, Some(aux), batch, i)?;
    let rows = aux_integrands(encoder, aux, batch, noise)?;
    Ok(BoundValue::from_rows(&rows[i]))
}

/// Auxiliary bounds for all treatments from one shared draw.
pub fn ami_estimate(
    encoder: &CondGaussian,
    aux: &AuxFamily,
    batch: &Matrix,
    noise: &NoiseDraw,
) -> Result<AmiEstimate> {
    check_batch(encoder, Some(aux), batch, 0)?;
    let rows = aux_integrands(encoder, aux, batch, noise)?;
    let est: Vec<BoundValue> = rows.iter().map(|r| BoundValue::from_rows(r)).collect();
    Ok(AmiEstimate {
        value: est.iter().map(|b| b.value).sum(),
        per_treatment: est.iter().map(|b| b.value).collect(),
        mc_stderr: est.iter().map(|b| b.stderr).collect(),
    })
}

/// `t` with column `i` reordered by `perm`.
pub fn permute_column(t: &Matrix, i: usize, perm: &[usize]) -> Matrix {
    let mut out = t.clone();
    for (r, &p) in perm.iter().enumerate() {
        out.set(r, i, t.get(p, i));
    }
    out
}

/// Per-row `log p_θ(z | t_{-i}, t̂_i) + H_θ(z | t)` on the tape (`rows × 1`),
/// where `t_hat` is the batch with column `i` already resampled.
pub fn direct_integrand_on_tape(
    tape: &mut Tape,
    encoder: &CondGaussianVars,
    t_hat: Var,
    z: Var,
    sd: Var,
) -> Var {
    let mu_hat = encoder.mean(tape, t_hat);
    let sd_hat = encoder.scale(tape, t_hat);
    let lp = tape_log_normal(tape, z, mu_hat, sd_hat);
    let h = tape_entropy(tape, sd);
    tape.add(lp, h)
}

/// Monte Carlo estimate of the direct entropy bound for treatment `i`.
/// `t̂_i` is drawn by permuting column `i` within the batch.
pub fn direct_entropy_bound(
    encoder: &CondGaussian,
    batch: &Matrix,
    noise: &NoiseDraw,
    i: usize,
    shuffle_stream: &mut RngStream,
) -> Result<BoundValue> {
    check_batch(encoder, None, batch, i)?;
    if batch.rows() < 2 {
        return Err(Error::Data("the direct bound needs at least 2 rows".into()));
    }
    let z = encoder.reparam_sample(batch, noise)?;
    let perm = shuffle_stream.permutation(batch.rows());
    let t_hat = permute_column(batch, i, &perm);
    let lp = encoder.log_prob(&t_hat, &z)?;
    let h = encoder.entropy(batch)?;
    let rows: Vec<f64> = lp.iter().zip(&h).map(|(a, b)| a + b).collect();
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            format!("direct bound {i}"),
            "non-finite density",
        ));
    }
    Ok(BoundValue::from_rows(&rows))
}

/// Settings for [`optimize_aux`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxFitConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for AuxFitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Maximizes every auxiliary bound over the auxiliary parameters with the
/// encoder held fixed. Returns the final minibatch objective.
pub fn optimize_aux(
    encoder: &CondGaussian,
    aux: &mut AuxFamily,
    data: &Matrix,
    config: &AuxFitConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    check_batch(encoder, Some(aux), data, 0)?;
    let n = data.rows();
    let bs = config.batch_size.min(n).max(1);
    let mut opt = Ascent::new(config.optimizer, config.learning_rate);
    let mut last = f64::NAN;
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.below(n)).collect();
        let batch = data.select_rows(&idx);
        let noise = NoiseDraw::draw(rng, bs, encoder.dim());
        let z = encoder.reparam_sample(&batch, &noise)?;
        let mut tape = Tape::new();
        let vars = aux.bind(&mut tape);
        let zv = tape.constant(z);
        let mut terms = Vec::with_capacity(aux.len());
        for (tm, r) in leave_one_out(&batch).into_iter().zip(&vars) {
            let tv = tape.constant(tm);
            let lp = r.log_prob(&mut tape, tv, zv);
            terms.push(tape.mean(lp));
        }
        let all = tape.hcat(&terms);
        let obj = tape.sum(all);
        let grads = tape
            .backward(obj)
            .map_err(|e| Error::numerical("auxiliary fit", format!("step {step}: {e}")))?;
        last = tape.value(obj).item();
        let leaves: Vec<Var> = vars.iter().flat_map(|v| v.leaves()).collect();
        let g: Vec<Matrix> = leaves.iter().map(|&l| grads.wrt(l)).collect();
        opt.step(aux.params_mut(), &g);
    }
    Ok(last)
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn sub_block(cov: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| cov[(rows[r], cols[c])])
}

/// `ln det Σ_{A|B}` for a jointly Gaussian vector with covariance `cov`.
fn conditional_log_det(cov: &DMatrix<f64>, a: &[usize], b: &[usize]) -> Result<f64> {
    let saa = sub_block(cov, a, a);
    let cond = if b.is_empty() {
        saa
    } else {
        let sbb = sub_block(cov, b, b);
        let sab = sub_block(cov, a, b);
        let chol = sbb.cholesky().ok_or(Error::NotPositiveDefinite)?;
        let x = chol.solve(&sab.transpose());
        saa - sab * x
    };
    let chol = cond.cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Exact `I(t_i; z | t_{-i})` for a jointly Gaussian `(z, t)` whose
/// covariance lists the `d` confounder coordinates first.
pub fn gaussian_cmi_oracle(joint_cov: &Matrix, d: usize, i: usize) -> Result<f64> {
    let n = joint_cov.rows();
    if joint_cov.cols() != n || d == 0 || d >= n || i >= n - d {
        return Err(Error::Shape(format!(
            "joint covariance {:?} with d={d}, i={i}",
            joint_cov.shape()
        )));
    }
    let cov = to_dmatrix(joint_cov);
    if (&cov - cov.transpose()).abs().max() > 1e-10 * cov.abs().max().max(1.0) {
        return Err(Error::NotPositiveDefinite);
    }
    cov.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let z: Vec<usize> = (0..d).collect();
    let t_all: Vec<usize> = (d..n).collect();
    let t_minus: Vec<usize> = (d..n).filter(|&k| k != d + i).collect();
    let a = conditional_log_det(&cov, &z, &t_minus)?;
    let b = conditional_log_det(&cov, &z, &t_all)?;
    Ok(0.5 * (a - b))
}
