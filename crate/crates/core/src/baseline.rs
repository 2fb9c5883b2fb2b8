//! Ordinary least squares on standardized features.
//!
//! The normal equations are solved with a Cholesky factorization. A design
//! whose Gram matrix is numerically singular falls back to a tiny ridge
//! penalty `lambda = 1e-8 * trace(X'X) / d` unless the caller forbids it.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{mean, FeatureTable};
use crate::error::{Error, Result};
use crate::model_file::{self, PayloadReader, PayloadWriter};
use crate::neural::Standardizer;
use crate::Predictor;

pub const LINEAR_SCHEMA: &str = "demand.linear/1";

/// Relative pivot size below which a column counts as linearly dependent.
const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    standardizer: Standardizer,
    /// Coefficients on the standardized scale.
    coefficients: Vec<f64>,
    intercept: f64,
    ridge_lambda: Option<f64>,
    train_mse: f64,
    train_seconds: f64,
}

pub fn fit_ols(table: &FeatureTable) -> Result<LinearModel> {
    fit_ols_with(table, true)
}

pub fn fit_ols_with(table: &FeatureTable, ridge_fallback: bool) -> Result<LinearModel> {
    if table.is_empty() {
        return Err(Error::Table("cannot fit OLS on an empty table".into()));
    }
    let started = Instant::now();
    let standardizer = Standardizer::fit(table);
    let z = standardizer.transform(table)?;
    let d = table.n_cols();
    let y = table.target();
    let y_mean = mean(y);

    // Z is column-centred, so the intercept decouples.
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for (row, &yi) in z.chunks(d.max(1)).zip(y) {
        let r = yi - y_mean;
        for a in 0..d {
            rhs[a] += row[a] * r;
            for b in 0..=a {
                gram[a * d + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[b * d + a] = gram[a * d + b];
        }
    }

    let mut ridge_lambda = None;
    let coefficients = match cholesky(&gram, d) {
        Ok(l) => solve_cholesky(&l, d, &rhs),
        Err(bad) => {
            let names: Vec<String> = bad.iter().map(|&j| table.columns()[j].clone()).collect();
            if !ridge_fallback {
                return Err(Error::RankDeficient(names));
            }
            let trace: f64 = (0..d).map(|j| gram[j * d + j]).sum();
            log::warn!("rank-deficient design (columns {names:?}); using ridge fallback");
            if trace == 0.0 {
                ridge_lambda = Some(0.0);
                vec![0.0; d]
            } else {
                let lambda = 1e-8 * trace / d as f64;
                let mut g = gram.clone();
                for j in 0..d {
                    g[j * d + j] += lambda;
                }
                ridge_lambda = Some(lambda);
                let l = cholesky(&g, d).map_err(|_| {
                    Error::Numeric("ridge-regularized Gram matrix is not positive definite".into())
                })?;
                solve_cholesky(&l, d, &rhs)
            }
        }
    };
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite OLS coefficient".into()));
    }
    let mut model = LinearModel {
        standardizer,
        coefficients,
        intercept: y_mean,
        ridge_lambda,
        train_mse: 0.0,
        train_seconds: 0.0,
    };
    let pred = model.predict_standardized(&z);
    model.train_mse = pred
        .iter()
        .zip(y)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / y.len() as f64;
    model.train_seconds = started.elapsed().as_secs_f64();
    Ok(model)
}

/// Lower-triangular factor of a symmetric positive-definite matrix, or the
/// indices of every column whose pivot collapsed.
fn cholesky(a: &[f64], d: usize) -> std::result::Result<Vec<f64>, Vec<usize>> {
    let mut l = vec![0.0; d * d];
    let mut bad = Vec::new();
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= l[j * d + k] * l[j * d + k];
        }
        if !(s > PIVOT_TOL * a[j * d + j]) || s <= 0.0 {
            // treat the column as absent so later pivots are still judged
            bad.push(j);
            continue;
        }
        let p = s.sqrt();
        l[j * d + j] = p;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / p;
        }
    }
    if bad.is_empty() {
        Ok(l)
    } else {
        Err(bad)
    }
}

fn solve_cholesky(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

#[derive(Debug, Serialize, Deserialize)]
struct LinearHeader {
    columns: Vec<String>,
    ridge_lambda: Option<f64>,
    train_mse: f64,
    train_seconds: f64,
}

impl LinearModel {
    pub fn columns(&self) -> &[String] {
        self.standardizer.columns()
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    /// `Some(lambda)` when the ridge fallback was used.
    pub fn ridge_lambda(&self) -> Option<f64> {
        self.ridge_lambda
    }

    pub fn train_mse(&self) -> f64 {
        self.train_mse
    }

    pub fn train_seconds(&self) -> f64 {
        self.train_seconds
    }

    /// Slopes and intercept on the original (unstandardized) feature scale.
    pub fn raw_coefficients(&self) -> (Vec<f64>, f64) {
        let mut intercept = self.intercept;
        let slopes = (0..self.coefficients.len())
            .map(|j| {
                if self.standardizer.is_constant(j) {
                    return 0.0;
                }
                let s = self.coefficients[j] / self.standardizer.sds()[j];
                intercept -= s * self.standardizer.means()[j];
                s
            })
            .collect();
        (slopes, intercept)
    }

    fn predict_standardized(&self, z: &[f64]) -> Vec<f64> {
        let d = self.coefficients.len();
        if d == 0 {
            return vec![self.intercept; z.len()];
        }
        z.chunks(d)
            .map(|row| {
                self.intercept
                    + row
                        .iter()
                        .zip(&self.coefficients)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = LinearHeader {
            columns: self.columns().to_vec(),
            ridge_lambda: self.ridge_lambda,
            train_mse: self.train_mse,
            train_seconds: self.train_seconds,
        };
        let mut w = PayloadWriter::new();
        w.f64s(self.standardizer.means());
        w.f64s(self.standardizer.sds());
        w.f64s(&self.coefficients);
        w.f64(self.intercept);
        model_file::encode(LINEAR_SCHEMA, &header, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (LinearHeader, _) = model_file::decode(LINEAR_SCHEMA, bytes)?;
        let mut r = PayloadReader::new(&payload);
        let means = r.f64s()?;
        let sds = r.f64s()?;
        let coefficients = r.f64s()?;
        let intercept = r.f64()?;
        r.finish()?;
        if coefficients.len() != h.columns.len() {
            return Err(Error::Model("coefficient count does not match columns".into()));
        }
        Ok(Self {
            standardizer: Standardizer::from_parts(h.columns, means, sds)?,
            coefficients,
            intercept,
            ridge_lambda: h.ridge_lambda,
            train_mse: h.train_mse,
            train_seconds: h.train_seconds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Predictor for LinearModel {
    fn input_columns(&self) -> &[String] {
        self.standardizer.columns()
    }

    fn predict_table(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        let z = self.standardizer.transform(table)?;
        let mut p = self.predict_standardized(&z);
        p.truncate(table.n_rows());
        Ok(p)
    }
}
