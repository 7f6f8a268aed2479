//! Synthetic forward model of estuary water levels.
//!
//! The marine boundary is forced by a sum of harmonic constituents whose
//! range is scaled by `alpha` and whose mean level is shifted by `gamma`.
//! Each station sees every constituent damped by a Strickler-type friction
//! factor `exp(-mu)` and delayed by the shallow-water travel time
//! `distance / sqrt(g h)`, where
//!
//! ```text
//! mu = c_damp * distance * beta * U_i / (K_S(zone)^2 * h^(4/3))
//! ```
//!
//! The model is closed-form, so simulation cost is a few cosines per station
//! and time step. It stands in for an expensive hydrodynamic solver.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.81;
pub const N_PARAMS: usize = 9;
pub const N_ZONES: usize = 6;

/// Column names used in every CSV that carries a parameter vector.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "alpha", "beta", "gamma", "ks1", "ks2", "ks3", "ks4", "ks5", "ks6",
];

/// A calibration point: tidal range multiplier, velocity multiplier,
/// sea-level correction (m) and six Strickler coefficients (m^(1/3)/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub ks: [f64; N_ZONES],
}

impl ParameterVector {
    pub fn to_array(&self) -> [f64; N_PARAMS] {
        let mut out = [0.0; N_PARAMS];
        out[0] = self.alpha;
        out[1] = self.beta;
        out[2] = self.gamma;
        out[3..].copy_from_slice(&self.ks);
        out
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if x.len() != N_PARAMS {
            return Err(Error::InvalidInput(format!(
                "parameter vector needs {N_PARAMS} components, got {}",
                x.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "parameter {} is not finite",
                PARAM_NAMES[i]
            )));
        }
        let mut ks = [0.0; N_ZONES];
        ks.copy_from_slice(&x[3..]);
        Ok(Self {
            alpha: x[0],
            beta: x[1],
            gamma: x[2],
            ks,
        })
    }

    /// Strickler coefficient of a 1-based friction zone.
    pub fn strickler(&self, zone: usize) -> f64 {
        self.ks[zone - 1]
    }
}

/// Axis-aligned box `lower <= x <= upper` of any dimension.
///
/// The calibration problem uses the nine-dimensional default, but designs,
/// sensitivity analysis and optimizers work on arbitrary boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParameterBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidBounds(format!(
                "lower has {} entries, upper has {}",
                lower.len(),
                upper.len()
            )));
        }
        if lower.is_empty() {
            return Err(Error::InvalidDimension(0));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::InvalidBounds(format!(
                    "component {i}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The unit hypercube `[0, 1]^d`.
    pub fn unit(d: usize) -> Result<Self> {
        Self::new(vec![0.0; d], vec![1.0; d])
    }

    /// Tidal parameters (alpha, beta, gamma) followed by the six Strickler
    /// coefficients.
    pub fn calibration_default() -> Self {
        Self {
            lower: vec![0.8, 0.8, 0.35, 30.0, 64.0, 80.0, 20.0, 64.0, 36.0],
            upper: vec![1.2, 1.2, 0.54, 46.0, 96.0, 100.0, 30.0, 96.0, 54.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn validate_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "point has {} components, bounds have {}",
                x.len(),
                self.dim()
            )));
        }
        for (i, v) in x.iter().enumerate() {
            if !v.is_finite() || *v < self.lower[i] || *v > self.upper[i] {
                return Err(Error::InvalidInput(format!(
                    "component {i} = {v} outside [{}, {}]",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }

    /// Maps a physical point to `[0, 1]^d`.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.lower[i]) / self.width(i))
            .collect()
    }

    pub fn denormalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, v)| self.lower[i] + v * self.width(i))
            .collect()
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TideConstituent {
    pub name: String,
    /// Water-level amplitude, m.
    pub amplitude: f64,
    /// Period, s.
    pub period: f64,
    /// Local phase, rad.
    pub phase: f64,
    #[serde(default = "one")]
    pub nodal_factor: f64,
    #[serde(default)]
    pub nodal_phase: f64,
    #[serde(default)]
    pub origin_phase: f64,
}

fn one() -> f64 {
    1.0
}

impl TideConstituent {
    fn validate(&self) -> Result<()> {
        let finite = [
            self.amplitude,
            self.period,
            self.phase,
            self.nodal_factor,
            self.nodal_phase,
            self.origin_phase,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.amplitude < 0.0 || self.period <= 0.0 {
            return Err(Error::Config(format!(
                "constituent {}: need finite values, amplitude >= 0 and period > 0",
                self.name
            )));
        }
        Ok(())
    }

    /// Undamped, unscaled contribution at time `t`, delayed by `lag` seconds.
    #[inline]
    fn wave(&self, t: f64, lag: f64) -> f64 {
        let arg =
            2.0 * PI * (t - lag) / self.period - self.phase + self.origin_phase + self.nodal_phase;
        self.nodal_factor * self.amplitude * arg.cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConfig {
    /// Bottom elevation at the boundary, m.
    pub z_f: f64,
    /// Mean reference level, m.
    pub z_mean: f64,
    pub constituents: Vec<TideConstituent>,
    /// Depth-averaged velocity amplitude of each constituent, m/s.
    pub u_amplitudes: Vec<f64>,
}

impl BoundaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.constituents.is_empty() {
            return Err(Error::Config(
                "boundary needs at least one constituent".into(),
            ));
        }
        if self.u_amplitudes.len() != self.constituents.len() {
            return Err(Error::Config(format!(
                "{} velocity amplitudes for {} constituents",
                self.u_amplitudes.len(),
                self.constituents.len()
            )));
        }
        if self.u_amplitudes.iter().any(|u| !u.is_finite() || *u < 0.0) {
            return Err(Error::Config(
                "velocity amplitudes must be finite and >= 0".into(),
            ));
        }
        if !self.z_f.is_finite() || !self.z_mean.is_finite() {
            return Err(Error::Config("z_f and z_mean must be finite".into()));
        }
        self.constituents
            .iter()
            .try_for_each(TideConstituent::validate)
    }

    /// Index of the constituent with the largest amplitude.
    pub fn dominant(&self) -> usize {
        self.constituents
            .iter()
            .enumerate()
            .fold(0, |best, (i, c)| {
                if c.amplitude > self.constituents[best].amplitude {
                    i
                } else {
                    best
                }
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationConfig {
    pub id: u32,
    pub name: String,
    /// Along-channel distance from the marine boundary, m.
    pub distance: f64,
    /// Mean water depth along the path, m.
    pub depth: f64,
    /// Friction zone, 1..=6.
    pub zone: usize,
}

impl StationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance.is_finite() && self.distance >= 0.0) {
            return Err(Error::Config(format!(
                "station {}: distance must be >= 0",
                self.id
            )));
        }
        if !(self.depth.is_finite() && self.depth > 0.0) {
            return Err(Error::Config(format!(
                "station {}: depth must be > 0",
                self.id
            )));
        }
        if !(1..=N_ZONES).contains(&self.zone) {
            return Err(Error::Config(format!(
                "station {}: zone {} outside 1..={N_ZONES}",
                self.id, self.zone
            )));
        }
        Ok(())
    }

    /// Shallow-water travel time from the boundary, s.
    pub fn lag(&self) -> f64 {
        self.distance / (GRAVITY * self.depth).sqrt()
    }
}

/// Uniform output grid `t0, t0 + dt, ..., t0 + (len - 1) dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub len: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, len: usize) -> Result<Self> {
        if !t0.is_finite() || !(dt.is_finite() && dt > 0.0) || len == 0 {
            return Err(Error::InvalidInput(format!(
                "time grid needs finite t0, dt > 0 and at least one point (t0={t0}, dt={dt}, len={len})"
            )));
        }
        Ok(Self { t0, dt, len })
    }

    /// Grid covering `[t0, t0 + duration]` inclusive of both ends.
    pub fn spanning(t0: f64, dt: f64, duration: f64) -> Result<Self> {
        if !(duration.is_finite() && duration >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "duration {duration} must be >= 0"
            )));
        }
        let steps = (duration / dt + 1e-9).floor() as usize;
        Self::new(t0, dt, steps + 1)
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(move |i| self.time(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            t0: self.t0,
            dt: self.dt,
            len: self.values.len(),
        }
    }
}

/// Free-surface elevation at the marine boundary at time `t`.
///
/// Fails when the water depth `eta - z_f` is not positive.
pub fn boundary_level(params: &ParameterVector, boundary: &BoundaryConfig, t: f64) -> Result<f64> {
    let eta = params.alpha
        * boundary
            .constituents
            .iter()
            .map(|c| c.wave(t, 0.0))
            .sum::<f64>()
        + boundary.z_mean
        + params.gamma;
    check_depth(eta, boundary.z_f, t)?;
    Ok(eta)
}

fn check_depth(eta: f64, z_f: f64, t: f64) -> Result<()> {
    let depth = eta - z_f;
    if depth > 0.0 {
        Ok(())
    } else {
        Err(Error::DegenerateConfiguration { time: t, depth })
    }
}

/// The estuary geometry and forcing that do not change during calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estuary {
    pub boundary: BoundaryConfig,
    pub stations: Vec<StationConfig>,
    /// Dimensionless damping scale of the friction exponent.
    pub c_damp: f64,
}

impl Estuary {
    pub fn validate(&self) -> Result<()> {
        self.boundary.validate()?;
        if self.stations.is_empty() {
            return Err(Error::Config("at least one station is required".into()));
        }
        self.stations.iter().try_for_each(StationConfig::validate)?;
        if !(self.c_damp.is_finite() && self.c_damp >= 0.0) {
            return Err(Error::Config("c_damp must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn station_ids(&self) -> Vec<u32> {
        self.stations.iter().map(|s| s.id).collect()
    }

    pub fn station_index(&self, id: u32) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    /// Friction exponent of one constituent at one station.
    pub fn damping_exponent(
        &self,
        params: &ParameterVector,
        station: &StationConfig,
        u_amplitude: f64,
    ) -> f64 {
        let ks = params.strickler(station.zone);
        self.c_damp * station.distance * params.beta * u_amplitude
            / (ks * ks * station.depth.powf(4.0 / 3.0))
    }

    pub fn propagate_to_station(
        &self,
        params: &ParameterVector,
        station: &StationConfig,
        grid: &TimeGrid,
    ) -> Result<TimeSeries> {
        let b = &self.boundary;
        let lag = station.lag();
        let damp: Vec<f64> = b
            .u_amplitudes
            .iter()
            .map(|&u| (-self.damping_exponent(params, station, u)).exp())
            .collect();

        let mut values = Vec::with_capacity(grid.len);
        for t in grid.times() {
            // The boundary must stay wet over the whole window.
            let eta0 = params.alpha * b.constituents.iter().map(|c| c.wave(t, 0.0)).sum::<f64>()
                + b.z_mean
                + params.gamma;
            check_depth(eta0, b.z_f, t)?;

            let eta = params.alpha
                * b.constituents
                    .iter()
                    .zip(&damp)
                    .map(|(c, d)| d * c.wave(t, lag))
                    .sum::<f64>()
                + b.z_mean
                + params.gamma;
            values.push(eta);
        }
        Ok(TimeSeries {
            t0: grid.t0,
            dt: grid.dt,
            values,
        })
    }

    /// Water levels at every station, in station order.
    pub fn simulate(&self, params: &ParameterVector, grid: &TimeGrid) -> Result<Vec<TimeSeries>> {
        self.stations
            .iter()
            .map(|s| self.propagate_to_station(params, s, grid))
            .collect()
    }

    /// Simulation plus i.i.d. Gaussian noise, reproducible under `seed`.
    pub fn synthesize_observations(
        &self,
        true_params: &ParameterVector,
        grid: &TimeGrid,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Vec<TimeSeries>> {
        check_sigma(noise_sigma)?;
        let mut series = self.simulate(true_params, grid)?;
        add_noise(&mut series, noise_sigma, seed)?;
        Ok(series)
    }
}

fn check_sigma(noise_sigma: f64) -> Result<()> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise_sigma {noise_sigma} must be >= 0"
        )));
    }
    Ok(())
}

/// Stations are perturbed in order from a single stream.
fn add_noise(series: &mut [TimeSeries], noise_sigma: f64, seed: u64) -> Result<()> {
    if noise_sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in series {
        for v in &mut s.values {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(())
}

/// An estuary bound to a time grid with the parameter-independent
/// waveforms tabulated once.
///
/// Only the damping factors, `alpha` and `gamma` depend on the parameters,
/// so a simulation reduces to a weighted sum of cached waves. Results are
/// bit-identical to [`Estuary::simulate`].
#[derive(Debug, Clone)]
pub struct ForwardModel {
    estuary: Estuary,
    grid: TimeGrid,
    /// Sum of undelayed constituent waves at the boundary, per time step.
    boundary_sum: Vec<f64>,
    /// `waves[s][i][k]`: constituent `i` at station `s`, time step `k`.
    waves: Vec<Vec<Vec<f64>>>,
}

impl ForwardModel {
    pub fn new(estuary: Estuary, grid: TimeGrid) -> Result<Self> {
        estuary.validate()?;
        let b = &estuary.boundary;
        let boundary_sum = grid
            .times()
            .map(|t| b.constituents.iter().map(|c| c.wave(t, 0.0)).sum::<f64>())
            .collect();
        let waves = estuary
            .stations
            .iter()
            .map(|s| {
                let lag = s.lag();
                b.constituents
                    .iter()
                    .map(|c| grid.times().map(|t| c.wave(t, lag)).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            estuary,
            grid,
            boundary_sum,
            waves,
        })
    }

    pub fn estuary(&self) -> &Estuary {
        &self.estuary
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_stations(&self) -> usize {
        self.estuary.stations.len()
    }

    pub fn simulate(&self, params: &ParameterVector) -> Result<Vec<TimeSeries>> {
        let b = &self.estuary.boundary;
        for (k, s) in self.boundary_sum.iter().enumerate() {
            check_depth(
                params.alpha * s + b.z_mean + params.gamma,
                b.z_f,
                self.grid.time(k),
            )?;
        }
        Ok(self
            .estuary
            .stations
            .iter()
            .zip(&self.waves)
            .map(|(station, waves)| {
                let damp: Vec<f64> = b
                    .u_amplitudes
                    .iter()
                    .map(|&u| (-self.estuary.damping_exponent(params, station, u)).exp())
                    .collect();
                let values = (0..self.grid.len)
                    .map(|k| {
                        params.alpha * waves.iter().zip(&damp).map(|(w, d)| d * w[k]).sum::<f64>()
                            + b.z_mean
                            + params.gamma
                    })
                    .collect();
                TimeSeries {
                    t0: self.grid.t0,
                    dt: self.grid.dt,
                    values,
                }
            })
            .collect())
    }

    /// Same stream as [`Estuary::synthesize_observations`].
    pub fn synthesize_observations(
        &self,
        true_params: &ParameterVector,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Vec<TimeSeries>> {
        check_sigma(noise_sigma)?;
        let mut series = self.simulate(true_params)?;
        add_noise(&mut series, noise_sigma, seed)?;
        Ok(series)
    }
}

/// Damping scale that leaves `station` with `retention` of the dominant
/// constituent's amplitude when its zone has Strickler coefficient `ks`
/// and `beta = 1`.
pub fn calibrate_damping(
    boundary: &BoundaryConfig,
    station: &StationConfig,
    ks: f64,
    retention: f64,
) -> Result<f64> {
    if !(retention > 0.0 && retention < 1.0) {
        return Err(Error::InvalidInput(format!(
            "retention {retention} must lie in (0, 1)"
        )));
    }
    if station.distance <= 0.0 {
        return Err(Error::InvalidInput(
            "reference station must be away from the boundary".into(),
        ));
    }
    let u = boundary.u_amplitudes[boundary.dominant()];
    if u <= 0.0 {
        return Err(Error::InvalidInput(
            "dominant constituent has no velocity".into(),
        ));
    }
    Ok(-retention.ln() * ks * ks * station.depth.powf(4.0 / 3.0) / (station.distance * u))
}
