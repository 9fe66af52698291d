//! Multilayer perceptrons evaluated either directly or on a [`Tape`].

use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix};
use super::rng::RngStream;
use super::tape::{self, Tape, Var};
use super::Parameterized;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
            Activation::Softplus => tape::softplus(x),
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
            Activation::Softplus => tape.softplus(x),
        }
    }
}

/// One affine layer followed by an activation. `weight` is `out × in`,
/// `bias` is `1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Layer>", into = "Vec<Layer>")]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl From<Mlp> for Vec<Layer> {
    fn from(m: Mlp) -> Self {
        m.layers
    }
}

impl TryFrom<Vec<Layer>> for Mlp {
    type Error = String;

    fn try_from(layers: Vec<Layer>) -> std::result::Result<Self, String> {
        Mlp::from_layers(layers).map_err(|e| e.to_string())
    }
}

impl Mlp {
    /// Glorot-uniform weights and zero biases. `sizes` lists every layer
    /// width including input and output; hidden layers use `hidden`, the
    /// last layer uses `output`.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut RngStream,
    ) -> Self {
        assert!(
            sizes.len() >= 2,
            "Mlp::new needs at least input and output sizes"
        );
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform_range(-limit, limit))
                    .collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, data),
                    bias: Matrix::zeros(1, fan_out),
                    activation: if l + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    /// Single affine map with identity activation.
    pub fn linear(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        Self::new(
            &[in_dim, out_dim],
            Activation::Identity,
            Activation::Identity,
            rng,
        )
    }

    /// Validates that adjacent layers chain and all parameters are finite.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.rows()) {
                return Err(Error::Shape(format!(
                    "layer {i}: bias {:?} does not match weight {:?}",
                    l.bias.shape(),
                    l.weight.shape()
                )));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs but layer {} emits {}",
                    l.weight.cols(),
                    i - 1,
                    layers[i - 1].weight.rows()
                )));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::numerical(
                    format!("layer {i}"),
                    "non-finite parameter",
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    /// Evaluates the network on each row of `x` without recording a tape.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = gemm(&h, false, &l.weight, true);
            let b = l.bias.as_slice();
            let act = l.activation;
            for r in 0..z.rows() {
                for (v, bj) in z.row_mut(r).iter_mut().zip(b) {
                    *v = act.apply(*v + bj);
                }
            }
            h = z;
        }
        h
    }

    /// Registers every weight and bias as a tape leaf, in [`Parameterized::params`] order.
    pub fn bind(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone()),
                        tape.leaf(l.bias.clone()),
                        l.activation,
                    )
                })
                .collect(),
        }
    }

    /// Like [`Mlp::bind`] but with the parameters held constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.constant(l.weight.clone()),
                        tape.constant(l.bias.clone()),
                        l.activation,
                    )
                })
                .collect(),
        }
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Tape handles for a bound [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var, Activation)>,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            let z = tape.matmul_t(h, false, w, true);
            let z = tape.add(z, b);
            h = act.on_tape(tape, z);
        }
        h
    }

    pub fn leaves(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}
