//! Error functionals between simulated and observed water levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estuary::TimeSeries;

fn check_pair(sim: &[f64], obs: &[f64]) -> Result<()> {
    if sim.len() != obs.len() {
        return Err(Error::Alignment(format!(
            "simulated series has {} values, observed has {}",
            sim.len(),
            obs.len()
        )));
    }
    if sim.is_empty() {
        return Err(Error::Alignment("series are empty".into()));
    }
    Ok(())
}

/// Checks that two series share the same time grid.
pub fn check_aligned(sim: &TimeSeries, obs: &TimeSeries) -> Result<()> {
    if sim.t0 != obs.t0 || sim.dt != obs.dt || sim.len() != obs.len() {
        return Err(Error::Alignment(format!(
            "grids differ: (t0={}, dt={}, n={}) vs (t0={}, dt={}, n={})",
            sim.t0,
            sim.dt,
            sim.len(),
            obs.t0,
            obs.dt,
            obs.len()
        )));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn rmse(sim: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(sim, obs)?;
    let sse: f64 = sim.iter().zip(obs).map(|(s, o)| (s - o) * (s - o)).sum();
    Ok((sse / sim.len() as f64).sqrt())
}

/// `mean(sim) - mean(obs)`, sign preserved.
pub fn bias(sim: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(sim, obs)?;
    Ok(mean(sim) - mean(obs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NashVariant {
    /// Denominator `sum (sim_i - mean(obs))^2`.
    #[default]
    SimulatedSpread,
    /// Textbook Nash–Sutcliffe: denominator `sum (obs_i - mean(obs))^2`.
    StandardNse,
}

pub fn nash(sim: &[f64], obs: &[f64], variant: NashVariant) -> Result<f64> {
    check_pair(sim, obs)?;
    let obs_mean = mean(obs);
    let num: f64 = sim.iter().zip(obs).map(|(s, o)| (s - o) * (s - o)).sum();
    let den: f64 = match variant {
        NashVariant::SimulatedSpread => sim.iter().map(|s| (s - obs_mean) * (s - obs_mean)).sum(),
        NashVariant::StandardNse => obs.iter().map(|o| (o - obs_mean) * (o - obs_mean)).sum(),
    };
    if den == 0.0 {
        return Err(Error::DegenerateMetric(
            "Nash denominator is zero (series constant at the observed mean)".into(),
        ));
    }
    Ok(1.0 - num / den)
}

pub fn series_rmse(sim: &TimeSeries, obs: &TimeSeries) -> Result<f64> {
    check_aligned(sim, obs)?;
    rmse(&sim.values, &obs.values)
}

/// Per-station RMSE between two aligned lists of series.
pub fn station_rmse(sim: &[TimeSeries], obs: &[TimeSeries]) -> Result<StationErrors> {
    if sim.len() != obs.len() {
        return Err(Error::Alignment(format!(
            "{} simulated stations, {} observed",
            sim.len(),
            obs.len()
        )));
    }
    let per_station = sim
        .iter()
        .zip(obs)
        .map(|(s, o)| series_rmse(s, o))
        .collect::<Result<Vec<_>>>()?;
    Ok(StationErrors { per_station })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Mean,
    /// Population standard deviation (divides by the station count).
    Std,
    Max,
}

/// RMSE per station, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationErrors {
    pub per_station: Vec<f64>,
}

impl StationErrors {
    pub fn aggregate(&self, kind: Aggregate) -> Result<f64> {
        aggregate(&self.per_station, kind)
    }
}

pub fn aggregate(errors: &[f64], kind: Aggregate) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidInput(
            "cannot aggregate an empty error vector".into(),
        ));
    }
    let m = mean(errors);
    Ok(match kind {
        Aggregate::Mean => m,
        Aggregate::Std => {
            (errors.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / errors.len() as f64).sqrt()
        }
        Aggregate::Max => errors.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}
