//! Latin hypercube designs and batch evaluation of the forward model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::estuary::{ForwardModel, ParameterBounds, ParameterVector, TimeSeries, PARAM_NAMES};
use crate::metrics::{self, NashVariant};
use crate::parallel::map_ordered;

/// Rule of thumb of ten model runs per parameter.
pub fn default_design_size(dim: usize) -> Result<usize> {
    if dim < 1 {
        return Err(Error::InvalidDimension(dim));
    }
    Ok(10 * dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub points: Vec<Vec<f64>>,
    pub bounds: ParameterBounds,
}

impl DesignMatrix {
    pub fn new(points: Vec<Vec<f64>>, bounds: ParameterBounds) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            bounds.validate_point(p).map_err(|e| e.at_row(i))?;
        }
        Ok(Self { points, bounds })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn column_names(&self) -> Vec<String> {
        column_names(self.dim())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.column_names())?;
        for p in &self.points {
            w.write_record(p.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, bounds: ParameterBounds) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let d = bounds.dim();
        if r.headers()?.len() != d {
            return Err(Error::InvalidInput(format!(
                "{}: expected {d} columns",
                path.display()
            )));
        }
        let mut points = Vec::new();
        for rec in r.records() {
            points.push(parse_row(&rec?)?);
        }
        Self::new(points, bounds)
    }
}

pub(crate) fn column_names(d: usize) -> Vec<String> {
    if d == PARAM_NAMES.len() {
        PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=d).map(|i| format!("x{i}")).collect()
    }
}

pub(crate) fn parse_row(rec: &csv::StringRecord) -> Result<Vec<f64>> {
    rec.iter()
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad number {s:?}: {e}")))
        })
        .collect()
}

/// Random-permutation Latin hypercube: each column has exactly one point in
/// each of the `n` equal-width strata, placed uniformly within its stratum.
pub fn lhs_sample(n: usize, bounds: &ParameterBounds, seed: u64) -> Result<DesignMatrix> {
    if n < 1 {
        return Err(Error::InvalidInput("design size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DesignMatrix {
        points: lhs_points(n, bounds, &mut rng),
        bounds: bounds.clone(),
    })
}

pub(crate) fn lhs_points<R: Rng>(n: usize, bounds: &ParameterBounds, rng: &mut R) -> Vec<Vec<f64>> {
    let d = bounds.dim();
    let mut points = vec![vec![0.0; d]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for j in 0..d {
        strata.shuffle(rng);
        let (lo, width) = (bounds.lower()[j], bounds.width(j));
        for (row, &k) in points.iter_mut().zip(&strata) {
            let u = (k as f64 + rng.random::<f64>()) / n as f64;
            // Rounding can push lo + u * width onto the stratum edge above.
            row[j] = (lo + u * width).min(bounds.upper()[j]);
        }
    }
    points
}

/// Which error functional a response table holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Bias,
    Nash,
}

impl Metric {
    pub fn column_prefix(self) -> &'static str {
        match self {
            Metric::Rmse => "J",
            Metric::Bias => "B",
            Metric::Nash => "N",
        }
    }
}

/// Forward-model responses at every design point, one column per station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub design: DesignMatrix,
    pub responses: Vec<Vec<f64>>,
    pub station_ids: Vec<u32>,
    pub metric: Metric,
}

impl ErrorTable {
    pub fn new(
        design: DesignMatrix,
        responses: Vec<Vec<f64>>,
        station_ids: Vec<u32>,
        metric: Metric,
    ) -> Result<Self> {
        if responses.len() != design.len() {
            return Err(Error::InvalidInput(format!(
                "{} response rows for {} design rows",
                responses.len(),
                design.len()
            )));
        }
        for (i, row) in responses.iter().enumerate() {
            if row.len() != station_ids.len() {
                return Err(Error::InvalidInput(format!("row {i}: wrong station count")));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("row {i}: non-finite response")));
            }
            if metric == Metric::Rmse && row.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidInput(format!("row {i}: negative RMSE")));
            }
        }
        Ok(Self {
            design,
            responses,
            station_ids,
            metric,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.responses.len()
    }

    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn column(&self, station: usize) -> Vec<f64> {
        self.responses.iter().map(|r| r[station]).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.design.column_names();
        let prefix = self.metric.column_prefix();
        header.extend(self.station_ids.iter().map(|id| format!("{prefix}_{id}")));
        w.write_record(&header)?;
        for (x, y) in self.design.points.iter().zip(&self.responses) {
            w.write_record(x.iter().chain(y).map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, bounds: ParameterBounds, metric: Metric) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let d = bounds.dim();
        let header = r.headers()?.clone();
        let prefix = format!("{}_", metric.column_prefix());
        let station_ids = header
            .iter()
            .skip(d)
            .map(|h| {
                h.strip_prefix(&prefix)
                    .and_then(|id| id.parse::<u32>().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad response column {h:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut points = Vec::new();
        let mut responses = Vec::new();
        for rec in r.records() {
            let row = parse_row(&rec?)?;
            if row.len() != d + station_ids.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: ragged row",
                    path.display()
                )));
            }
            points.push(row[..d].to_vec());
            responses.push(row[d..].to_vec());
        }
        Self::new(
            DesignMatrix::new(points, bounds)?,
            responses,
            station_ids,
            metric,
        )
    }
}

/// RMSE, bias and Nash tables computed from the same simulations.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignResponses {
    pub rmse: ErrorTable,
    pub bias: ErrorTable,
    pub nash: ErrorTable,
}

fn check_observations(model: &ForwardModel, observations: &[TimeSeries]) -> Result<()> {
    if observations.len() != model.n_stations() {
        return Err(Error::InvalidInput(format!(
            "{} observed series for {} stations",
            observations.len(),
            model.n_stations()
        )));
    }
    Ok(())
}

/// Per-station RMSE of every design row against the observations.
///
/// Rows are simulated in parallel; the table keeps design order and a
/// failing row is reported by index.
pub fn evaluate_design(
    design: &DesignMatrix,
    model: &ForwardModel,
    observations: &[TimeSeries],
) -> Result<ErrorTable> {
    check_observations(model, observations)?;
    let rows = map_ordered(&design.points, |i, x| {
        let p = ParameterVector::from_slice(x).map_err(|e| e.at_row(i))?;
        let sim = model.simulate(&p).map_err(|e| e.at_row(i))?;
        metrics::station_rmse(&sim, observations)
            .map(|e| e.per_station)
            .map_err(|e| e.at_row(i))
    })?;
    ErrorTable::new(
        design.clone(),
        rows,
        model.estuary().station_ids(),
        Metric::Rmse,
    )
}

pub fn evaluate_design_all(
    design: &DesignMatrix,
    model: &ForwardModel,
    observations: &[TimeSeries],
    nash_variant: NashVariant,
) -> Result<DesignResponses> {
    check_observations(model, observations)?;
    let rows = map_ordered(&design.points, |i, x| {
        let p = ParameterVector::from_slice(x).map_err(|e| e.at_row(i))?;
        let sim = model.simulate(&p).map_err(|e| e.at_row(i))?;
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for (s, o) in sim.iter().zip(observations) {
            metrics::check_aligned(s, o).map_err(|e| e.at_row(i))?;
            out[0].push(metrics::rmse(&s.values, &o.values).map_err(|e| e.at_row(i))?);
            out[1].push(metrics::bias(&s.values, &o.values).map_err(|e| e.at_row(i))?);
            out[2]
                .push(metrics::nash(&s.values, &o.values, nash_variant).map_err(|e| e.at_row(i))?);
        }
        Ok(out)
    })?;
    let ids = model.estuary().station_ids();
    let mut cols: [Vec<Vec<f64>>; 3] = Default::default();
    for [r, b, n] in rows {
        cols[0].push(r);
        cols[1].push(b);
        cols[2].push(n);
    }
    let [r, b, n] = cols;
    Ok(DesignResponses {
        rmse: ErrorTable::new(design.clone(), r, ids.clone(), Metric::Rmse)?,
        bias: ErrorTable::new(design.clone(), b, ids.clone(), Metric::Bias)?,
        nash: ErrorTable::new(design.clone(), n, ids, Metric::Nash)?,
    })
}
