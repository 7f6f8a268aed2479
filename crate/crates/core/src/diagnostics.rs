//! Distribution diagnostics of an error table: correlation PCA, quantile
//! summaries and plot-ready exports.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::doe::ErrorTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub station_ids: Vec<u32>,
    /// Eigenvalues of the correlation matrix, descending.
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// `loadings[s][k]`: weight of station `s` in component `k`.
    pub loadings: Vec<Vec<f64>>,
    /// `scores[i][k]`: row `i` projected on component `k`.
    pub scores: Vec<Vec<f64>>,
    /// Correlation of each station column with the first two components.
    pub correlations: Vec<[f64; 2]>,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Principal components of the standardized station columns.
///
/// Each component is oriented so that its largest-magnitude loading is
/// positive.
pub fn pca(table: &ErrorTable) -> Result<PcaResult> {
    let (n, m) = (table.n_rows(), table.n_stations());
    if n < 3 || m < 2 {
        return Err(Error::InvalidInput(format!(
            "PCA needs at least 3 rows and 2 stations, got {n} x {m}"
        )));
    }
    let columns: Vec<Vec<f64>> = (0..m).map(|s| table.column(s)).collect();
    let mut z = DMatrix::zeros(n, m);
    for (s, col) in columns.iter().enumerate() {
        let (mu, sd) = mean_std(col);
        if sd == 0.0 {
            return Err(Error::DegenerateColumn(table.station_ids[s]));
        }
        for (i, v) in col.iter().enumerate() {
            z[(i, s)] = (v - mu) / sd;
        }
    }
    let corr = z.transpose() * &z / n as f64;
    let eig = SymmetricEigen::new(corr);

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let explained_ratio = eigenvalues.iter().map(|l| l / total).collect();

    let mut vecs = DMatrix::zeros(m, m);
    for (c, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = (0..m).fold(
            0,
            |best, i| if v[i].abs() > v[best].abs() { i } else { best },
        );
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            vecs[(i, c)] = sign * v[i];
        }
    }
    let scores_m = &z * &vecs;

    let rows = |mat: &DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..mat.nrows())
            .map(|i| mat.row(i).iter().copied().collect())
            .collect()
    };
    // corr(z_s, score_k) = loading_sk * sqrt(lambda_k); unlike a sample
    // correlation this stays defined for zero-variance components.
    let correlations = (0..m)
        .map(|s| [0, 1].map(|k| vecs[(s, k)] * eigenvalues[k].sqrt()))
        .collect();

    Ok(PcaResult {
        station_ids: table.station_ids.clone(),
        eigenvalues,
        explained_ratio,
        loadings: rows(&vecs),
        scores: rows(&scores_m),
        correlations,
    })
}

/// Five-number summary plus mean of one station column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

/// Quantile by linear interpolation between order statistics
/// (`h = (n - 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidInput(
            "cannot summarize an empty column".into(),
        ));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Summary {
        min: v[0],
        q25: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q75: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
        mean: v.iter().sum::<f64>() / v.len() as f64,
    })
}

pub fn summary_stats(table: &ErrorTable) -> Result<Vec<(u32, Summary)>> {
    table
        .station_ids
        .iter()
        .enumerate()
        .map(|(s, id)| Ok((*id, summarize(&table.column(s))?)))
        .collect()
}

impl PcaResult {
    pub fn write_explained_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["component", "eigenvalue", "explained_ratio"])?;
        for (k, (l, r)) in self
            .eigenvalues
            .iter()
            .zip(&self.explained_ratio)
            .enumerate()
        {
            w.write_record([(k + 1).to_string(), l.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_circle_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["station", "dim1", "dim2"])?;
        for (id, c) in self.station_ids.iter().zip(&self.correlations) {
            w.write_record([id.to_string(), c[0].to_string(), c[1].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_quantiles_csv(stats: &[(u32, Summary)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["station", "min", "q25", "median", "q75", "max", "mean"])?;
    for (id, s) in stats {
        w.write_record([
            id.to_string(),
            s.min.to_string(),
            s.q25.to_string(),
            s.median.to_string(),
            s.q75.to_string(),
            s.max.to_string(),
            s.mean.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long format `point,station,value` for scatter-matrix plots.
pub fn write_scatter_csv(table: &ErrorTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["point", "station", "value"])?;
    for (i, row) in table.responses.iter().enumerate() {
        for (id, v) in table.station_ids.iter().zip(row) {
            w.write_record([i.to_string(), id.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
