//! Poisson regression of tweet counts on burden and paper counts.
//!
//! Maximum likelihood under the log link, fitted by Fisher scoring (IRLS).
//! Covariates are standardized internally (centered, scaled by the sample
//! standard deviation) so that case counts on the order of millions do not
//! ill-condition the information matrix; reported coefficients and standard
//! errors are transformed back to the original scale, which leaves z, p,
//! deviance and the percentage changes untouched.
//!
//! Effect sizes follow the percentage-change-in-expected-count convention:
//! `100 * (exp(beta * sd) - 1)` is the percent change in the expected count
//! for a one-standard-deviation increase of the covariate, holding the
//! others constant.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linkage::RegionPanel;

const SCORE_TOL: f64 = 1e-8;
const DEVIANCE_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 50;
/// Linear predictors beyond this make exp() useless in f64; treat as
/// separation.
const ETA_OVERFLOW: f64 = 690.0;

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("response is all zeros; the Poisson MLE has no finite optimum")]
    AllZeroResponse,
    #[error("separation or divergence: {0}")]
    Separation(String),
    #[error("information matrix is singular (collinear covariates?)")]
    SingularInformation,
}

/// Response and covariate columns on the original scale, plus the moments
/// used for internal standardization. The intercept column is implicit.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub y: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    pub means: Vec<f64>,
    /// Sample standard deviations, denominator n-1.
    pub sds: Vec<f64>,
}

fn sample_moments(column: &[f64]) -> (f64, f64) {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let ss: f64 = column.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

impl DesignMatrix {
    pub fn new(
        y: Vec<f64>,
        columns: Vec<Vec<f64>>,
        labels: Vec<String>,
    ) -> Result<Self, GlmError> {
        let n = y.len();
        let k = columns.len();
        if n == 0 {
            return Err(GlmError::InvalidDesign("empty response".into()));
        }
        if labels.len() != k {
            return Err(GlmError::InvalidDesign(format!(
                "{k} columns but {} labels",
                labels.len()
            )));
        }
        if n <= k {
            return Err(GlmError::InvalidDesign(format!(
                "n={n} rows cannot identify {k} covariates plus intercept"
            )));
        }
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(GlmError::InvalidDesign(format!(
                    "column {} has {} rows, expected {n}",
                    labels[j],
                    col.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(GlmError::InvalidDesign(format!(
                    "column {} contains non-finite values",
                    labels[j]
                )));
            }
        }
        if y.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(GlmError::InvalidDesign(
                "response must be finite and nonnegative".into(),
            ));
        }
        let mut means = Vec::with_capacity(k);
        let mut sds = Vec::with_capacity(k);
        for (j, col) in columns.iter().enumerate() {
            let (mean, sd) = sample_moments(col);
            if sd == 0.0 {
                return Err(GlmError::InvalidDesign(format!(
                    "column {} is constant; only the intercept may be",
                    labels[j]
                )));
            }
            means.push(mean);
            sds.push(sd);
        }
        Ok(DesignMatrix {
            y,
            columns,
            labels,
            means,
            sds,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    /// Standardized design including the leading intercept column.
    fn standardized(&self) -> DMatrix<f64> {
        let n = self.n();
        let k = self.k();
        DMatrix::from_fn(n, k + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                (self.columns[j - 1][i] - self.means[j - 1]) / self.sds[j - 1]
            }
        })
    }
}

/// Fitted Poisson model: coefficients on the original covariate scale, Wald
/// inference, and per-standard-deviation percentage changes.
#[derive(Debug, Clone, Serialize)]
pub struct GlmFit {
    /// Intercept first, then one coefficient per covariate.
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub loglik: f64,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// 100*(exp(beta_j * sd_j) - 1), one per covariate.
    pub pct_change: Vec<f64>,
    pub sds: Vec<f64>,
    pub means: Vec<f64>,
    pub labels: Vec<String>,
    /// Fitted means, one per observation.
    pub fitted: Vec<f64>,
}

impl GlmFit {
    pub fn n(&self) -> usize {
        self.fitted.len()
    }
}

/// Percent change in the expected count for a one-SD increase of a
/// covariate: `100 * (exp(beta * sd) - 1)`.
pub fn pct_change(beta: f64, sd: f64) -> f64 {
    100.0 * ((beta * sd).exp() - 1.0)
}

fn poisson_deviance(y: &[f64], mu: &DVector<f64>) -> f64 {
    let mut dev = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let mui = mu[i];
        let term = if yi > 0.0 { yi * (yi / mui).ln() } else { 0.0 };
        dev += term - (yi - mui);
    }
    2.0 * dev
}

fn poisson_loglik(y: &[f64], eta: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    y.iter()
        .enumerate()
        .map(|(i, &yi)| yi * eta[i] - mu[i] - ln_gamma(yi + 1.0))
        .sum()
}

fn linear_predictor(xs: &DMatrix<f64>, beta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), GlmError> {
    let eta = xs * beta;
    if eta.iter().any(|e| !e.is_finite() || *e > ETA_OVERFLOW) {
        return Err(GlmError::Separation(format!(
            "linear predictor diverged (max eta {:.3e})",
            eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        )));
    }
    let mu = eta.map(f64::exp);
    Ok((eta, mu))
}

fn score_vector(xs: &DMatrix<f64>, y: &[f64], mu: &DVector<f64>) -> DVector<f64> {
    let resid = DVector::from_fn(y.len(), |i, _| y[i] - mu[i]);
    xs.transpose() * resid
}

fn information(xs: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut weighted = xs.clone();
    for i in 0..xs.nrows() {
        let w = mu[i];
        for j in 0..xs.ncols() {
            weighted[(i, j)] *= w;
        }
    }
    xs.transpose() * weighted
}

/// Fit by Fisher scoring on the standardized design.
///
/// Starts at intercept = log(mean(y) + 1e-8), slopes zero. Stops when the
/// infinity norm of the score drops below 1e-8 (converged) or the deviance
/// change falls below 1e-10 (stalled; converged only if the score bound
/// also holds), capped at 50 iterations.
pub fn fit(design: &DesignMatrix) -> Result<GlmFit, GlmError> {
    let n = design.n();
    let k = design.k();
    let y = &design.y;
    if y.iter().sum::<f64>() == 0.0 {
        return Err(GlmError::AllZeroResponse);
    }
    let xs = design.standardized();

    let mut beta = DVector::zeros(k + 1);
    beta[0] = (y.iter().sum::<f64>() / n as f64 + 1e-8).ln();

    let (mut eta, mut mu) = linear_predictor(&xs, &beta)?;
    let mut deviance = poisson_deviance(y, &mu);
    let mut iterations = 0;
    let mut converged = score_vector(&xs, y, &mu).amax() < SCORE_TOL;

    while !converged && iterations < MAX_ITERATIONS {
        let score = score_vector(&xs, y, &mu);
        let info = information(&xs, &mu);
        let chol = Cholesky::new(info).ok_or(GlmError::SingularInformation)?;
        let delta = chol.solve(&score);
        beta += &delta;
        let (eta_new, mu_new) = linear_predictor(&xs, &beta)?;
        eta = eta_new;
        mu = mu_new;
        iterations += 1;

        let deviance_new = poisson_deviance(y, &mu);
        if !deviance_new.is_finite() {
            return Err(GlmError::Separation(format!(
                "deviance diverged at iteration {iterations}"
            )));
        }
        let stalled = (deviance_new - deviance).abs() < DEVIANCE_TOL;
        deviance = deviance_new;
        if score_vector(&xs, y, &mu).amax() < SCORE_TOL {
            converged = true;
        } else if stalled {
            break;
        }
    }

    // Covariance on the standardized scale, then the exact linear transform
    // back to the original scale: beta_0 = b_0 - sum b_j m_j / s_j,
    // beta_j = b_j / s_j.
    let info = information(&xs, &mu);
    let cov_std = Cholesky::new(info)
        .ok_or(GlmError::SingularInformation)?
        .inverse();
    let mut transform = DMatrix::zeros(k + 1, k + 1);
    transform[(0, 0)] = 1.0;
    for j in 1..=k {
        transform[(0, j)] = -design.means[j - 1] / design.sds[j - 1];
        transform[(j, j)] = 1.0 / design.sds[j - 1];
    }
    let cov = &transform * cov_std * transform.transpose();
    let beta_orig = &transform * &beta;

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut se = Vec::with_capacity(k + 1);
    let mut zs = Vec::with_capacity(k + 1);
    let mut ps = Vec::with_capacity(k + 1);
    for j in 0..=k {
        let s = cov[(j, j)].sqrt();
        let z = beta_orig[j] / s;
        se.push(s);
        zs.push(z);
        ps.push(2.0 * normal.cdf(-z.abs()));
    }
    let pct: Vec<f64> = (0..k)
        .map(|j| pct_change(beta_orig[j + 1], design.sds[j]))
        .collect();

    Ok(GlmFit {
        beta: beta_orig.iter().copied().collect(),
        se,
        z: zs,
        p: ps,
        loglik: poisson_loglik(y, &eta, &mu),
        deviance,
        iterations,
        converged,
        pct_change: pct,
        sds: design.sds.clone(),
        means: design.means.clone(),
        labels: design.labels.clone(),
        fitted: mu.iter().copied().collect(),
    })
}

/// Fit tweets on burden and papers for a region panel.
pub fn fit_poisson(panel: &[RegionPanel]) -> Result<GlmFit, GlmError> {
    if panel.is_empty() {
        return Err(GlmError::InvalidDesign("empty panel".into()));
    }
    if panel.len() < 4 {
        return Err(GlmError::InvalidDesign(format!(
            "panel has {} regions; at least 4 are needed for two covariates",
            panel.len()
        )));
    }
    let y: Vec<f64> = panel.iter().map(|r| r.tweets as f64).collect();
    let burden: Vec<f64> = panel.iter().map(|r| r.burden).collect();
    let papers: Vec<f64> = panel.iter().map(|r| r.papers as f64).collect();
    let design = DesignMatrix::new(
        y,
        vec![burden, papers],
        vec!["burden".to_string(), "papers".to_string()],
    )?;
    fit(&design)
}

fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else {
        ""
    }
}

/// Render the fit in the familiar coefficient-table layout: one row per
/// covariate with coefficient, standard error and percentage change, a
/// constant row with the percentage column blank, the sample size, and the
/// significance note. Coefficients are printed in scientific notation with
/// three significant digits, percentages with one decimal.
pub fn summarize(fit: &GlmFit, labels: &[String], region_kind_label: &str) -> String {
    let label_width = labels
        .iter()
        .map(|l| l.len())
        .chain(std::iter::once("Independent variable".len()))
        .max()
        .unwrap_or(20)
        + 2;
    let mut out = String::new();
    out.push_str(&format!(
        "{:<label_width$}  {:<15} {:<15} {}\n",
        "Independent variable", "Coefficient", "Standard error", "Percentage change in expected count"
    ));
    for j in 0..fit.pct_change.len() {
        out.push_str(&format!(
            "{:<label_width$}  {:<15} {:<15} {:.1}\n",
            labels.get(j).map(String::as_str).unwrap_or(&fit.labels[j]),
            format!("{:.2e}{}", fit.beta[j + 1], stars(fit.p[j + 1])),
            format!("{:.2e}", fit.se[j + 1]),
            fit.pct_change[j]
        ));
    }
    out.push_str(&format!(
        "{:<label_width$}  {:<15} {:<15}\n",
        "Constant",
        format!("{:.2e}{}", fit.beta[0], stars(fit.p[0])),
        format!("{:.2e}", fit.se[0])
    ));
    out.push_str(&format!("n={} {}\n", fit.n(), region_kind_label));
    out.push_str("Note: *** p < .001\n");
    out
}

/// Full-precision CSV of the fit for external verification.
pub fn summary_csv(fit: &GlmFit, labels: &[String]) -> String {
    let mut out = String::from("term,coefficient,std_error,z,p,pct_change,sd\n");
    out.push_str(&format!(
        "Constant,{},{},{},{},,\n",
        fit.beta[0], fit.se[0], fit.z[0], fit.p[0]
    ));
    for j in 0..fit.pct_change.len() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            labels.get(j).map(String::as_str).unwrap_or(&fit.labels[j]),
            fit.beta[j + 1],
            fit.se[j + 1],
            fit.z[j + 1],
            fit.p[j + 1],
            fit.pct_change[j],
            fit.sds[j]
        ));
    }
    out
}
