//! Numeric core: dense matrices, a reverse-mode tape, MLPs, random streams
//! and optimizers.
//!
//! ```
//! use mcei::numeric::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0));
//! let y = tape.square(x);
//! let g = tape.backward(y).unwrap();
//! assert_eq!(g.wrt(x).item(), 6.0);
//! ```

pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod tape;

pub use matrix::{gemm, Matrix};
pub use mlp::{Activation, Layer, Mlp, MlpVars};
pub use optim::{Ascent, OptimizerKind};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version stamped into every serialized parameter document.
pub const SCHEMA_VERSION: u32 = 1;

/// Central-difference gradient of `f` at `point` with step `step`.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|k| {
            let orig = x[k];
            x[k] = orig + step;
            let hi = f(&x);
            x[k] = orig - step;
            let lo = f(&x);
            x[k] = orig;
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// Anything holding an ordered list of parameter matrices.
pub trait Parameterized {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// All parameters concatenated in `params` order.
    fn flat(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    /// Inverse of [`Parameterized::flat`]. Panics on a length mismatch.
    fn set_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        for m in self.params_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        assert_eq!(off, values.len(), "set_flat: length mismatch");
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

/// Serializes `value` as a JSON object carrying `schema_version`.
pub fn to_versioned_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Versioned {
        schema_version: SCHEMA_VERSION,
        body: value,
    })?)
}

/// Parses a document written by [`to_versioned_json`], rejecting other versions.
pub fn from_versioned_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let doc: Versioned<T> = serde_json::from_str(text)?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    Ok(doc.body)
}
