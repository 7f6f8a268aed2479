//! Kriging surrogates: a polynomial trend plus a stationary Gaussian
//! process, one independent model per station.
//!
//! Inputs are mapped to the unit cube with the design bounds and responses
//! are centered and scaled before fitting. Correlation lengths maximize the
//! profiled log-likelihood (trend coefficients by generalized least squares,
//! process variance in closed form) over several bounded simplex searches.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::digest::sha256_file;
use crate::doe::{lhs_points, ErrorTable};
use crate::error::{Error, Result};
use crate::estuary::ParameterBounds;
use crate::metrics::{Aggregate, StationErrors};
use crate::parallel::map_ordered;
use crate::simplex::nelder_mead;

pub const FORMAT_VERSION: u32 = 1;

/// Search range for correlation lengths, in unit-cube coordinates.
pub const THETA_RANGE: (f64, f64) = (0.05, 10.0);

/// Keeps the profiled variance strictly positive when the trend already
/// explains the responses exactly.
const SIGMA2_FLOOR: f64 = 1e-300;

/// Largest training-point bias the jitter may introduce, relative to the
/// largest absolute response.
const INTERPOLATION_TOL: f64 = 1e-7;

/// Search objective offset for correlation lengths that violate the
/// interpolation guard; keeps them worse than any admissible point while
/// still ranking them by how far they are from admissible.
const INFEASIBLE: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Matern52,
    SquaredExponential,
}

impl Kernel {
    /// Correlation as a function of the squared scaled distance.
    #[inline]
    fn corr(self, r2: f64) -> f64 {
        match self {
            Kernel::Matern52 => {
                let s = (5.0 * r2).sqrt();
                (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
            }
            Kernel::SquaredExponential => (-0.5 * r2).exp(),
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matern52" => Ok(Kernel::Matern52),
            "squared_exponential" | "se" => Ok(Kernel::SquaredExponential),
            _ => Err(Error::Config(format!(
                "unknown kernel {s:?} (matern52, se)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    #[default]
    Constant,
    Linear,
}

impl Basis {
    fn size(self, d: usize) -> usize {
        match self {
            Basis::Constant => 1,
            Basis::Linear => d + 1,
        }
    }

    fn eval(self, u: &[f64]) -> Vec<f64> {
        let mut g = vec![1.0];
        if self == Basis::Linear {
            g.extend_from_slice(u);
        }
        g
    }
}

impl std::str::FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Basis::Constant),
            "linear" => Ok(Basis::Linear),
            _ => Err(Error::Config(format!(
                "unknown basis {s:?} (constant, linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrigingConfig {
    pub kernel: Kernel,
    pub basis: Basis,
    /// First rung of the jitter ladder.
    pub nugget: f64,
    pub max_nugget: f64,
    pub restarts: usize,
    /// Likelihood evaluations allowed per restart.
    pub max_evals: usize,
    pub seed: u64,
}

impl Default for KrigingConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Matern52,
            basis: Basis::Constant,
            nugget: 1e-10,
            max_nugget: 1e-4,
            restarts: 8,
            max_evals: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrigingModel {
    format_version: u32,
    kernel: Kernel,
    basis: Basis,
    bounds: ParameterBounds,
    /// Training inputs in unit-cube coordinates.
    x_train: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    /// Trend coefficients for scaled responses and unit-cube inputs.
    trend_coeffs: Vec<f64>,
    /// Process variance in squared response units.
    process_variance: f64,
    corr_lengths: Vec<f64>,
    nugget: f64,
    /// `R^-1 (y - F lambda)` for scaled responses.
    dual_weights: Vec<f64>,
    /// Row-major lower Cholesky factor of `R + nugget I`.
    chol: Vec<f64>,
    /// Row-major lower Cholesky factor of `F^T R^-1 F`.
    gram_chol: Vec<f64>,
    log_likelihood: f64,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// The query lies outside the training bounds.
    pub extrapolated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub start_log_theta: Vec<f64>,
    pub start_log_likelihood: f64,
    pub final_log_likelihood: f64,
    pub evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub restarts: Vec<RestartTrace>,
    pub nugget: f64,
}

struct Likelihood<'a> {
    kernel: Kernel,
    n: usize,
    d: usize,
    /// Squared coordinate differences for every pair `i < j`, `d` per pair.
    diff2: Vec<f64>,
    y: &'a [f64],
    f: DMatrix<f64>,
    /// Admissible jitter bias in scaled response units.
    bias_tol: f64,
}

struct Solved {
    log_likelihood: f64,
    /// Training-point bias caused by the jitter, scaled units.
    jitter_bias: f64,
    l: DMatrix<f64>,
    beta: DVector<f64>,
    sigma2: f64,
    w: DVector<f64>,
    gram_l: DMatrix<f64>,
}

impl<'a> Likelihood<'a> {
    fn new(kernel: Kernel, basis: Basis, x: &[Vec<f64>], y: &'a [f64], bias_tol: f64) -> Self {
        let (n, d) = (x.len(), x[0].len());
        let mut diff2 = Vec::with_capacity(n * (n - 1) / 2 * d);
        for i in 0..n {
            for j in i + 1..n {
                diff2.extend(x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)));
            }
        }
        let k = basis.size(d);
        let f = DMatrix::from_fn(n, k, |i, c| basis.eval(&x[i])[c]);
        Self {
            kernel,
            n,
            d,
            diff2,
            y,
            f,
            bias_tol,
        }
    }

    fn correlation(&self, theta: &[f64], nugget: f64) -> DMatrix<f64> {
        let inv2: Vec<f64> = theta.iter().map(|t| 1.0 / (t * t)).collect();
        let mut r = DMatrix::identity(self.n, self.n) * (1.0 + nugget);
        let mut p = 0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                let h = &self.diff2[p * self.d..(p + 1) * self.d];
                let r2: f64 = h.iter().zip(&inv2).map(|(a, b)| a * b).sum();
                let c = self.kernel.corr(r2);
                r[(i, j)] = c;
                r[(j, i)] = c;
                p += 1;
            }
        }
        r
    }

    fn solve(&self, theta: &[f64], nugget: f64) -> Option<Solved> {
        let chol = self.correlation(theta, nugget).cholesky()?;
        let l = chol.unpack();
        let ly = l.solve_lower_triangular(&DVector::from_column_slice(self.y))?;
        let lf = l.solve_lower_triangular(&self.f)?;
        let gram = lf.transpose() * &lf;
        let gram_chol = gram.cholesky()?;
        let beta = gram_chol.solve(&(lf.transpose() * &ly));
        let resid = &ly - &lf * &beta;
        let sigma2 = (resid.norm_squared() / self.n as f64).max(SIGMA2_FLOOR);
        // With jitter the predictor at training point i is off by nugget * w_i.
        let w = l.transpose().solve_upper_triangular(&resid)?;
        let jitter_bias = nugget * w.amax();
        let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let n = self.n as f64;
        let ll = -0.5 * (n * sigma2.ln() + logdet + n * (1.0 + (2.0 * std::f64::consts::PI).ln()));
        if !ll.is_finite() {
            return None;
        }
        Some(Solved {
            log_likelihood: ll,
            jitter_bias,
            l,
            beta,
            sigma2,
            w,
            gram_l: gram_chol.unpack(),
        })
    }

    /// Negative log-likelihood, or a penalty when the factorization fails
    /// or the jitter would visibly bias the interpolant.
    fn search_objective(&self, log_theta: &[f64], nugget: f64) -> f64 {
        let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
        match self.solve(&theta, nugget) {
            None => f64::INFINITY,
            Some(s) if s.jitter_bias > self.bias_tol => {
                INFEASIBLE + (s.jitter_bias / self.bias_tol).ln()
            }
            Some(s) => -s.log_likelihood,
        }
    }
}

/// Log-likelihood for admissible search values, `-inf` otherwise.
fn admissible_ll(objective: f64) -> f64 {
    if objective < INFEASIBLE {
        -objective
    } else {
        f64::NEG_INFINITY
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

/// Solves `L z = b` in place for a row-major lower-triangular `L`.
fn forward_substitute(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s: f64 = row.iter().zip(&b[..i]).map(|(a, z)| a * z).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}

fn check_training_set(points: &[Vec<f64>], y: &[f64], bounds: &ParameterBounds) -> Result<()> {
    let (n, d) = (points.len(), bounds.dim());
    if y.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} inputs but {} responses",
            y.len()
        )));
    }
    if n < d + 2 {
        return Err(Error::IllPosedDesign(format!(
            "{n} training rows for {d} inputs; need at least {}",
            d + 2
        )));
    }
    for (i, p) in points.iter().enumerate() {
        bounds.validate_point(p).map_err(|e| e.at_row(i))?;
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("response {i} is not finite")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for w in order.windows(2) {
        if points[w[0]] == points[w[1]] {
            return Err(Error::IllPosedDesign(format!(
                "rows {} and {} are duplicates",
                w[0].min(w[1]),
                w[0].max(w[1])
            )));
        }
    }
    Ok(())
}

impl KrigingModel {
    /// Fits the model for one station column of an error table.
    pub fn fit(table: &ErrorTable, station: usize, config: &KrigingConfig) -> Result<Self> {
        Ok(Self::fit_detailed(table, station, config)?.0)
    }

    pub fn fit_detailed(
        table: &ErrorTable,
        station: usize,
        config: &KrigingConfig,
    ) -> Result<(Self, FitTrace)> {
        if station >= table.n_stations() {
            return Err(Error::InvalidInput(format!(
                "no station at index {station}"
            )));
        }
        Self::fit_points(
            &table.design.points,
            &table.column(station),
            &table.design.bounds,
            config,
        )
    }

    /// Fits on arbitrary physical inputs within `bounds`.
    pub fn fit_points(
        points: &[Vec<f64>],
        y: &[f64],
        bounds: &ParameterBounds,
        config: &KrigingConfig,
    ) -> Result<(Self, FitTrace)> {
        check_training_set(points, y, bounds)?;
        if !(config.nugget >= 0.0 && config.nugget <= config.max_nugget) {
            return Err(Error::Config("need 0 <= nugget <= max_nugget".into()));
        }
        let (n, d) = (points.len(), bounds.dim());
        let x: Vec<Vec<f64>> = points.iter().map(|p| bounds.normalize(p)).collect();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let spread = (y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64).sqrt();
        let constant = spread == 0.0;
        let y_scale = if constant { 1.0 } else { spread };
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
        let y_max = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let bias_tol = INTERPOLATION_TOL * y_max / y_scale;
        let lik = Likelihood::new(config.kernel, config.basis, &x, &ys, bias_tol);

        let (lo, hi) = (THETA_RANGE.0.ln(), THETA_RANGE.1.ln());
        let log_bounds = ParameterBounds::new(vec![lo; d], vec![hi; d])?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let starts = lhs_points(config.restarts.max(1), &log_bounds, &mut rng);

        let mut nugget = config.nugget;
        loop {
            let mut trace = FitTrace {
                restarts: Vec::new(),
                nugget,
            };
            let mut best: Option<(f64, Vec<f64>)> = None;
            if constant {
                // Nothing to learn about correlation; any length works.
                let ll = admissible_ll(lik.search_objective(&vec![0.0; d], nugget));
                if ll.is_finite() {
                    best = Some((ll, vec![0.0; d]));
                }
            } else {
                for start in &starts {
                    let start_ll = admissible_ll(lik.search_objective(start, nugget));
                    let r = nelder_mead(
                        |lt| lik.search_objective(lt, nugget),
                        start,
                        log_bounds.lower(),
                        log_bounds.upper(),
                        0.1 * (hi - lo),
                        config.max_evals,
                        1e-9,
                    );
                    trace.restarts.push(RestartTrace {
                        start_log_theta: start.clone(),
                        start_log_likelihood: start_ll,
                        final_log_likelihood: admissible_ll(r.f),
                        evals: r.evals + 1,
                    });
                    let ll = admissible_ll(r.f);
                    if ll.is_finite() && best.as_ref().is_none_or(|(b, _)| ll > *b) {
                        best = Some((ll, r.x));
                    }
                }
            }
            if let Some((_, log_theta)) = best {
                let theta: Vec<f64> = log_theta.iter().map(|v| v.exp()).collect();
                if let Some(s) = lik.solve(&theta, nugget) {
                    let model =
                        Self::assemble(config, bounds, x, y_mean, y_scale, theta, nugget, s);
                    return Ok((model, trace));
                }
            }
            if nugget >= config.max_nugget {
                return Err(Error::Conditioning { nugget });
            }
            nugget = if nugget == 0.0 {
                1e-12
            } else {
                (nugget * 10.0).min(config.max_nugget)
            };
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: &KrigingConfig,
        bounds: &ParameterBounds,
        x_train: Vec<Vec<f64>>,
        y_mean: f64,
        y_scale: f64,
        corr_lengths: Vec<f64>,
        nugget: f64,
        s: Solved,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kernel: config.kernel,
            basis: config.basis,
            bounds: bounds.clone(),
            x_train,
            y_mean,
            y_scale,
            trend_coeffs: s.beta.iter().copied().collect(),
            process_variance: s.sigma2 * y_scale * y_scale,
            corr_lengths,
            nugget,
            dual_weights: s.w.iter().copied().collect(),
            chol: row_major(&s.l),
            gram_chol: row_major(&s.gram_l),
            log_likelihood: s.log_likelihood,
            seed: config.seed,
        }
    }

    pub fn bounds(&self) -> &ParameterBounds {
        &self.bounds
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn corr_lengths(&self) -> &[f64] {
        &self.corr_lengths
    }

    pub fn process_variance(&self) -> f64 {
        self.process_variance
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn n_train(&self) -> usize {
        self.x_train.len()
    }

    /// Training inputs in physical units.
    pub fn training_inputs(&self) -> Vec<Vec<f64>> {
        self.x_train
            .iter()
            .map(|u| self.bounds.denormalize(u))
            .collect()
    }

    /// Trend coefficients in physical units: intercept first, then one slope
    /// per input for the linear basis.
    pub fn trend_coefficients(&self) -> Vec<f64> {
        let (m, s) = (self.y_mean, self.y_scale);
        let b = &self.trend_coeffs;
        let mut out = vec![m + s * b[0]];
        if self.basis == Basis::Linear {
            for j in 0..self.bounds.dim() {
                let w = self.bounds.width(j);
                out[0] -= s * b[j + 1] * self.bounds.lower()[j] / w;
                out.push(s * b[j + 1] / w);
            }
        }
        out
    }

    fn corr_vector(&self, u: &[f64]) -> Vec<f64> {
        let inv2: Vec<f64> = self.corr_lengths.iter().map(|t| 1.0 / (t * t)).collect();
        self.x_train
            .iter()
            .map(|xi| {
                let r2: f64 = xi
                    .iter()
                    .zip(u)
                    .zip(&inv2)
                    .map(|((a, b), w)| (a - b) * (a - b) * w)
                    .sum();
                self.kernel.corr(r2)
            })
            .collect()
    }

    fn scaled_mean(&self, u: &[f64], r: &[f64]) -> f64 {
        let g = self.basis.eval(u);
        let trend: f64 = g.iter().zip(&self.trend_coeffs).map(|(a, b)| a * b).sum();
        trend
            + r.iter()
                .zip(&self.dual_weights)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    /// Predictive mean only.
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        let u = self.bounds.normalize(x);
        let r = self.corr_vector(&u);
        self.y_mean + self.y_scale * self.scaled_mean(&u, &r)
    }

    /// Predictive mean and universal-kriging variance.
    pub fn predict(&self, x: &[f64]) -> Prediction {
        let u = self.bounds.normalize(x);
        let r = self.corr_vector(&u);
        let mean = self.y_mean + self.y_scale * self.scaled_mean(&u, &r);

        let n = self.n_train();
        let mut v = r;
        forward_substitute(&self.chol, n, &mut v);
        let explained: f64 = v.iter().map(|a| a * a).sum();
        // R^-1 r = L^-T v, needed for the trend correction.
        let mut rinv_r = v;
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.chol[k * n + i] * rinv_r[k]).sum();
            rinv_r[i] = (rinv_r[i] - s) / self.chol[i * n + i];
        }
        let g = self.basis.eval(&u);
        let k = g.len();
        let mut t: Vec<f64> = (0..k)
            .map(|c| {
                let fc: f64 = self
                    .x_train
                    .iter()
                    .zip(&rinv_r)
                    .map(|(xi, w)| self.basis.eval(xi)[c] * w)
                    .sum();
                fc - g[c]
            })
            .collect();
        forward_substitute(&self.gram_chol, k, &mut t);
        let correction: f64 = t.iter().map(|a| a * a).sum();
        let variance = (self.process_variance * (1.0 - explained + correction)).max(0.0);
        Prediction {
            mean,
            variance,
            extrapolated: !self.bounds.contains(x),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.format_version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "model format version {} (expected {FORMAT_VERSION})",
                model.format_version
            )));
        }
        let n = model.x_train.len();
        let k = model.basis.size(model.bounds.dim());
        if model.chol.len() != n * n
            || model.dual_weights.len() != n
            || model.gram_chol.len() != k * k
            || model.trend_coeffs.len() != k
            || model.corr_lengths.len() != model.bounds.dim()
        {
            return Err(Error::Integrity(
                "model arrays have inconsistent sizes".into(),
            ));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub mse: f64,
    /// `None` when the test responses are constant.
    pub r2: Option<f64>,
    pub sst_zero: bool,
    pub n_test: usize,
    pub residuals: Vec<f64>,
}

/// Scores predictions against held-out truths.
pub fn validation_report(predicted: &[f64], actual: &[f64]) -> Result<ValidationReport> {
    if actual.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    if predicted.len() != actual.len() {
        return Err(Error::InvalidInput(
            "prediction/test length mismatch".into(),
        ));
    }
    let n = actual.len() as f64;
    let residuals: Vec<f64> = predicted.iter().zip(actual).map(|(p, a)| p - a).collect();
    let sse: f64 = residuals.iter().map(|r| r * r).sum();
    let mean = actual.iter().sum::<f64>() / n;
    let sst: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    let sst_zero = sst == 0.0;
    Ok(ValidationReport {
        mse: sse / n,
        r2: if sst_zero {
            None
        } else {
            Some(1.0 - sse / sst)
        },
        sst_zero,
        n_test: actual.len(),
        residuals,
    })
}

pub fn validate(
    model: &KrigingModel,
    test: &ErrorTable,
    station: usize,
) -> Result<ValidationReport> {
    if station >= test.n_stations() {
        return Err(Error::InvalidInput(format!(
            "no station at index {station}"
        )));
    }
    let predicted: Vec<f64> = test
        .design
        .points
        .iter()
        .map(|x| model.predict_mean(x))
        .collect();
    validation_report(&predicted, &test.column(station))
}

/// One fitted model per station, sharing bounds and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSet {
    pub station_ids: Vec<u32>,
    pub models: Vec<KrigingModel>,
    pub config: KrigingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub station_id: u32,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub bounds: ParameterBounds,
    pub config: KrigingConfig,
    pub models: Vec<ModelEntry>,
}

pub const MODEL_MANIFEST: &str = "models.json";

impl SurrogateSet {
    /// Fits every station column; stations run concurrently, each with the
    /// same restart seed.
    pub fn fit(table: &ErrorTable, config: &KrigingConfig) -> Result<Self> {
        let stations: Vec<usize> = (0..table.n_stations()).collect();
        let models = map_ordered(&stations, |_, &s| KrigingModel::fit(table, s, config))?;
        Ok(Self {
            station_ids: table.station_ids.clone(),
            models,
            config: config.clone(),
        })
    }

    pub fn n_stations(&self) -> usize {
        self.models.len()
    }

    pub fn bounds(&self) -> &ParameterBounds {
        self.models[0].bounds()
    }

    pub fn station_index(&self, id: u32) -> Option<usize> {
        self.station_ids.iter().position(|&s| s == id)
    }

    /// Surrogate RMSE at every station, clamped at zero.
    pub fn predict_all(&self, x: &[f64]) -> StationErrors {
        StationErrors {
            per_station: self
                .models
                .iter()
                .map(|m| m.predict_mean(x).max(0.0))
                .collect(),
        }
    }

    pub fn predict_aggregate(&self, x: &[f64], kind: Aggregate) -> f64 {
        self.predict_all(x)
            .aggregate(kind)
            .expect("at least one station")
    }

    /// Writes one JSON document per station plus a manifest with checksums.
    pub fn save(&self, dir: &Path) -> Result<ModelManifest> {
        std::fs::create_dir_all(dir)?;
        let mut models = Vec::new();
        for (id, m) in self.station_ids.iter().zip(&self.models) {
            let file = format!("model_{id}.json");
            let path = dir.join(&file);
            std::fs::write(&path, m.to_json())?;
            models.push(ModelEntry {
                station_id: *id,
                file,
                sha256: sha256_file(&path)?,
            });
        }
        let manifest = ModelManifest {
            format_version: FORMAT_VERSION,
            bounds: self.bounds().clone(),
            config: self.config.clone(),
            models,
        };
        std::fs::write(
            dir.join(MODEL_MANIFEST),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MODEL_MANIFEST);
        if !manifest_path.exists() {
            return Err(Error::Stage(format!(
                "{} not found",
                manifest_path.display()
            )));
        }
        let manifest: ModelManifest =
            serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let mut station_ids = Vec::new();
        let mut models = Vec::new();
        for entry in &manifest.models {
            let path: PathBuf = dir.join(&entry.file);
            if !path.exists() {
                return Err(Error::Stage(format!(
                    "model file {} is missing",
                    path.display()
                )));
            }
            if sha256_file(&path)? != entry.sha256 {
                return Err(Error::Integrity(format!(
                    "checksum mismatch for {}",
                    path.display()
                )));
            }
            let model = KrigingModel::from_json(&std::fs::read_to_string(&path)?)
                .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
            if model.bounds() != &manifest.bounds {
                return Err(Error::Integrity(format!(
                    "{}: bounds differ from manifest",
                    path.display()
                )));
            }
            station_ids.push(entry.station_id);
            models.push(model);
        }
        if models.is_empty() {
            return Err(Error::Integrity("model manifest lists no stations".into()));
        }
        Ok(Self {
            station_ids,
            models,
            config: manifest.config,
        })
    }
}
