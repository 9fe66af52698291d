//! Treatments plus an optional outcome, with CSV I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub treatment_names: Vec<String>,
    /// `N × T`.
    pub treatments: Matrix,
    pub outcome_name: Option<String>,
    pub outcome: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(treatments: Matrix, outcome: Option<Vec<f64>>) -> Result<Self> {
        let names = (1..=treatments.cols()).map(|i| format!("t_{i}")).collect();
        let outcome_name = outcome.as_ref().map(|_| "y".to_string());
        Self::with_names(names, treatments, outcome_name, outcome)
    }

    pub fn with_names(
        treatment_names: Vec<String>,
        treatments: Matrix,
        outcome_name: Option<String>,
        outcome: Option<Vec<f64>>,
    ) -> Result<Self> {
        if treatment_names.len() != treatments.cols() {
            return Err(Error::Data(format!(
                "{} treatment names for {} columns",
                treatment_names.len(),
                treatments.cols()
            )));
        }
        if let Some(y) = &outcome {
            if y.len() != treatments.rows() {
                return Err(Error::Data(format!(
                    "outcome has {} rows, treatments have {}",
                    y.len(),
                    treatments.rows()
                )));
            }
        }
        if outcome.is_some() != outcome_name.is_some() {
            return Err(Error::Data(
                "outcome values and outcome name must come together".into(),
            ));
        }
        Ok(Self {
            treatment_names,
            treatments,
            outcome_name,
            outcome,
        })
    }

    pub fn n(&self) -> usize {
        self.treatments.rows()
    }

    pub fn t(&self) -> usize {
        self.treatments.cols()
    }

    pub fn outcome(&self) -> Result<&[f64]> {
        self.outcome
            .as_deref()
            .ok_or_else(|| Error::Data("dataset has no outcome column".into()))
    }

    /// Rows listed in `idx`.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            treatment_names: self.treatment_names.clone(),
            treatments: self.treatments.select_rows(idx),
            outcome_name: self.outcome_name.clone(),
            outcome: self
                .outcome
                .as_ref()
                .map(|y| idx.iter().map(|&i| y[i]).collect()),
        }
    }

    /// Writes a header row followed by one row per observation; the outcome
    /// column, if any, comes last.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.treatment_names.clone();
        if let Some(name) = &self.outcome_name {
            header.push(name.clone());
        }
        w.write_record(&header)?;
        for r in 0..self.n() {
            let mut rec: Vec<String> = self
                .treatments
                .row(r)
                .iter()
                .map(|v| format_f64(*v))
                .collect();
            if let Some(y) = &self.outcome {
                rec.push(format_f64(y[r]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a fully numeric CSV. `outcome` names the outcome column; every
    /// other column is a treatment.
    pub fn read_csv(path: &Path, outcome: Option<&str>) -> Result<Self> {
        let table = RawTable::read(path)?;
        let oidx = match outcome {
            Some(name) => Some(table.column_index(name)?),
            None => None,
        };
        let tcols: Vec<usize> = (0..table.header.len())
            .filter(|&c| Some(c) != oidx)
            .collect();
        let mut t = Matrix::zeros(table.rows.len(), tcols.len());
        let mut y = oidx.map(|_| Vec::with_capacity(table.rows.len()));
        for (r, row) in table.rows.iter().enumerate() {
            for (k, &c) in tcols.iter().enumerate() {
                t.set(r, k, table.require(r, c, row[c])?);
            }
            if let (Some(ys), Some(c)) = (y.as_mut(), oidx) {
                ys.push(table.require(r, c, row[c])?);
            }
        }
        Self::with_names(
            tcols.iter().map(|&c| table.header[c].clone()).collect(),
            t,
            oidx.map(|c| table.header[c].clone()),
            y,
        )
    }
}

/// Shortest decimal representation that round-trips.
pub fn format_f64(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// A parsed CSV with missing cells kept as `None`.
#[derive(Clone, Debug)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl RawTable {
    /// Header row required; empty cells are missing; anything else must parse as a number.
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Data(format!(
                    "row {} has {} fields, header has {}",
                    line + 1,
                    rec.len(),
                    header.len()
                )));
            }
            let row = rec
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>().map(Some).map_err(|_| {
                            Error::Data(format!(
                                "row {}, column '{}': non-numeric cell '{cell}'",
                                line + 1,
                                header[c]
                            ))
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("unknown column '{name}'")))
    }

    pub fn column(&self, c: usize) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r[c]).collect()
    }

    fn require(&self, r: usize, c: usize, v: Option<f64>) -> Result<f64> {
        v.ok_or_else(|| {
            Error::Data(format!(
                "row {}, column '{}': missing value",
                r + 1,
                self.header[c]
            ))
        })
    }
}
