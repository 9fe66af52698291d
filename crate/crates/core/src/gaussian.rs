//! Diagonal Gaussian conditionals with reparameterized sampling.
//!
//! A [`CondGaussian`] maps a conditioning matrix (one row per observation)
//! to a mean and a standard deviation per output dimension. Standard
//! deviations are `softplus(raw) + SCALE_FLOOR`, where `raw` is either a
//! learned constant row or the output of a network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::tape::softplus;
use crate::numeric::{Matrix, Mlp, MlpVars, Parameterized, RngStream, Tape, Var};

/// Lower bound added to every standard deviation.
pub const SCALE_FLOOR: f64 = 1e-4;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log density of `N(mu, sd)` at `v`.
pub fn log_normal(v: f64, mu: f64, sd: f64) -> f64 {
    let q = (v - mu) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * q * q
}

/// Entropy of a univariate normal with standard deviation `sd`.
pub fn normal_entropy(sd: f64) -> f64 {
    0.5 * (LN_2PI + 1.0) + sd.ln()
}

/// Raw parameter giving standard deviation `sd` after softplus and floor.
pub fn raw_for_sd(sd: f64) -> Result<f64> {
    let s = sd - SCALE_FLOOR;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::NonPositiveScale(sd));
    }
    // inverse softplus, stable for large s
    Ok(if s > 30.0 { s } else { s.exp_m1().ln() })
}

/// How standard deviations are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// One raw value per output dimension (`1 × dim`), shared by every row.
    Constant(Matrix),
    /// A network from the conditioning input to raw values.
    Net(Mlp),
}

impl Scale {
    pub fn constant(sds: &[f64]) -> Result<Self> {
        let raw = sds
            .iter()
            .map(|&s| raw_for_sd(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Scale::Constant(Matrix::row_vector(&raw)))
    }
}

/// Standard-normal noise for [`CondGaussian::reparam_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    delta: Matrix,
}

impl NoiseDraw {
    /// `rows × dim` independent standard normals from `rng`.
    pub fn draw(rng: &mut RngStream, rows: usize, dim: usize) -> Self {
        Self {
            delta: rng.normal_matrix(rows, dim),
        }
    }

    /// Wraps a previously drawn (frozen) noise matrix.
    pub fn frozen(delta: Matrix) -> Self {
        Self { delta }
    }

    pub fn delta(&self) -> &Matrix {
        &self.delta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondGaussian {
    mean: Mlp,
    scale: Scale,
}

impl CondGaussian {
    pub fn new(mean: Mlp, scale: Scale) -> Result<Self> {
        let dim = mean.out_dim();
        match &scale {
            Scale::Constant(raw) if raw.shape() != (1, dim) => {
                return Err(Error::Shape(format!(
                    "constant scale {:?} does not match output dim {dim}",
                    raw.shape()
                )))
            }
            Scale::Net(net) if net.out_dim() != dim || net.in_dim() != mean.in_dim() => {
                return Err(Error::Shape(format!(
                    "scale net {}→{} does not match mean {}→{dim}",
                    net.in_dim(),
                    net.out_dim(),
                    mean.in_dim()
                )))
            }
            _ => {}
        }
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.out_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.mean.in_dim()
    }

    pub fn mean_net(&self) -> &Mlp {
        &self.mean
    }

    pub fn mean_net_mut(&mut self) -> &mut Mlp {
        &mut self.mean
    }

    pub fn scale_kind(&self) -> &Scale {
        &self.scale
    }

    pub fn scale_kind_mut(&mut self) -> &mut Scale {
        &mut self.scale
    }

    /// Constant standard deviations, or `None` for a network scale.
    pub fn constant_sd(&self) -> Option<Vec<f64>> {
        match &self.scale {
            Scale::Constant(raw) => Some(
                raw.as_slice()
                    .iter()
                    .map(|&r| softplus(r) + SCALE_FLOOR)
                    .collect(),
            ),
            Scale::Net(_) => None,
        }
    }

    fn check_cond(&self, cond: &Matrix) -> Result<()> {
        if cond.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "conditioning input has {} columns, expected {}",
                cond.cols(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn mean(&self, cond: &Matrix) -> Result<Matrix> {
        self.check_cond(cond)?;
        Ok(self.mean.forward(cond))
    }

    /// Per-row standard deviations (`rows × dim`).
    pub fn scale(&self, cond: &Matrix) -> Result<Matrix> {
        self.check_cond(cond)?;
        Ok(match &self.scale {
            Scale::Constant(raw) => {
                let sd: Vec<f64> = raw
                    .as_slice()
                    .iter()
                    .map(|&r| softplus(r) + SCALE_FLOOR)
                    .collect();
                let mut out = Matrix::zeros(cond.rows(), sd.len());
                for r in 0..cond.rows() {
                    out.row_mut(r).copy_from_slice(&sd);
                }
                out
            }
            Scale::Net(net) => net.forward(cond).map(|r| softplus(r) + SCALE_FLOOR),
        })
    }

    /// `mean(cond) + scale(cond) ⊙ delta`.
    pub fn reparam_sample(&self, cond: &Matrix, noise: &NoiseDraw) -> Result<Matrix> {
        let d = noise.delta();
        if d.shape() != (cond.rows(), self.dim()) {
            return Err(Error::Shape(format!(
                "noise {:?} does not match {} rows × dim {}",
                d.shape(),
                cond.rows(),
                self.dim()
            )));
        }
        let mu = self.mean(cond)?;
        let sd = self.scale(cond)?;
        let mut out = mu;
        for ((o, s), e) in out
            .as_mut_slice()
            .iter_mut()
            .zip(sd.as_slice())
            .zip(d.as_slice())
        {
            *o += s * e;
        }
        Ok(out)
    }

    /// Per-row log density of `value` (summed over dimensions).
    pub fn log_prob(&self, cond: &Matrix, value: &Matrix) -> Result<Vec<f64>> {
        if value.shape() != (cond.rows(), self.dim()) {
            return Err(Error::Shape(format!(
                "value {:?} does not match {} rows × dim {}",
                value.shape(),
                cond.rows(),
                self.dim()
            )));
        }
        let mu = self.mean(cond)?;
        let sd = self.scale(cond)?;
        log_prob_rows(&mu, &sd, value)
    }

    /// Per-row entropy `Σ_d ½ log(2πe σ_d²)`.
    pub fn entropy(&self, cond: &Matrix) -> Result<Vec<f64>> {
        let sd = self.scale(cond)?;
        Ok((0..sd.rows())
            .map(|r| sd.row(r).iter().map(|&s| normal_entropy(s)).sum())
            .collect())
    }

    pub fn bind(&self, tape: &mut Tape) -> CondGaussianVars {
        CondGaussianVars {
            mean: self.mean.bind(tape),
            scale: match &self.scale {
                Scale::Constant(raw) => ScaleVars::Constant(tape.leaf(raw.clone())),
                Scale::Net(net) => ScaleVars::Net(net.bind(tape)),
            },
        }
    }

    /// Binds with every parameter held constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> CondGaussianVars {
        CondGaussianVars {
            mean: self.mean.bind_frozen(tape),
            scale: match &self.scale {
                Scale::Constant(raw) => ScaleVars::Constant(tape.constant(raw.clone())),
                Scale::Net(net) => ScaleVars::Net(net.bind_frozen(tape)),
            },
        }
    }
}

/// Per-row log density of `value` under `N(mu, sd)` with diagonal scales.
pub fn log_prob_rows(mu: &Matrix, sd: &Matrix, value: &Matrix) -> Result<Vec<f64>> {
    if let Some(&bad) = sd.as_slice().iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::NonPositiveScale(bad));
    }
    Ok((0..value.rows())
        .map(|r| {
            value
                .row(r)
                .iter()
                .zip(mu.row(r))
                .zip(sd.row(r))
                .map(|((&v, &m), &s)| log_normal(v, m, s))
                .sum()
        })
        .collect())
}

impl Parameterized for CondGaussian {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = self.mean.params();
        match &self.scale {
            Scale::Constant(raw) => p.push(raw),
            Scale::Net(net) => p.extend(net.params()),
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.mean.params_mut();
        match &mut self.scale {
            Scale::Constant(raw) => p.push(raw),
            Scale::Net(net) => p.extend(net.params_mut()),
        }
        p
    }
}

#[derive(Clone, Debug)]
enum ScaleVars {
    Constant(Var),
    Net(MlpVars),
}

/// Tape handles for a bound [`CondGaussian`].
#[derive(Clone, Debug)]
pub struct CondGaussianVars {
    mean: MlpVars,
    scale: ScaleVars,
}

impl CondGaussianVars {
    pub fn mean(&self, tape: &mut Tape, cond: Var) -> Var {
        self.mean.forward(tape, cond)
    }

    /// Standard deviations: `1 × dim` for a constant scale, `rows × dim` otherwise.
    pub fn scale(&self, tape: &mut Tape, cond: Var) -> Var {
        let raw = match &self.scale {
            ScaleVars::Constant(v) => *v,
            ScaleVars::Net(net) => net.forward(tape, cond),
        };
        let sp = tape.softplus(raw);
        tape.offset(sp, SCALE_FLOOR)
    }

    /// `mean + scale ⊙ delta` on the tape.
    pub fn reparam_sample(&self, tape: &mut Tape, cond: Var, delta: Var) -> (Var, Var, Var) {
        let mu = self.mean(tape, cond);
        let sd = self.scale(tape, cond);
        let noise = tape.mul(sd, delta);
        (tape.add(mu, noise), mu, sd)
    }

    /// Per-row log density (`rows × 1`).
    pub fn log_prob(&self, tape: &mut Tape, cond: Var, value: Var) -> Var {
        let mu = self.mean(tape, cond);
        let sd = self.scale(tape, cond);
        tape_log_normal(tape, value, mu, sd)
    }

    /// Leaves in [`Parameterized::params`] order.
    pub fn leaves(&self) -> Vec<Var> {
        let mut v = self.mean.leaves();
        match &self.scale {
            ScaleVars::Constant(c) => v.push(*c),
            ScaleVars::Net(net) => v.extend(net.leaves()),
        }
        v
    }
}

/// Per-row diagonal-Gaussian log density on the tape (`rows × 1`). `sd` may
/// be `1 × dim` or `rows × dim`.
pub fn tape_log_normal(tape: &mut Tape, value: Var, mu: Var, sd: Var) -> Var {
    let dim = tape.value(value).cols();
    let diff = tape.sub(value, mu);
    let q = tape.div(diff, sd);
    let sq = tape.square(q);
    let ssq = tape.sum_cols(sq);
    let half = tape.scale(ssq, -0.5);
    let lsd = tape.ln(sd);
    let lsum = tape.sum_cols(lsd);
    let out = tape.sub(half, lsum);
    tape.offset(out, -0.5 * LN_2PI * dim as f64)
}

/// Per-row diagonal-Gaussian entropy on the tape (`rows × 1` or `1 × 1`).
pub fn tape_entropy(tape: &mut Tape, sd: Var) -> Var {
    let dim = tape.value(sd).cols();
    let lsd = tape.ln(sd);
    let lsum = tape.sum_cols(lsd);
    tape.offset(lsum, 0.5 * (LN_2PI + 1.0) * dim as f64)
}
