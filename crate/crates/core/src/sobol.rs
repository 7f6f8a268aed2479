//! Variance-based sensitivity indices by pick-freeze Monte Carlo.
//!
//! Two independent uniform sample matrices `A` and `B` are drawn on the
//! box. For each input `i`, the hybrid `AB_i` takes column `i` from `B` and
//! the rest from `A`. First-order indices use the Saltelli estimator
//! `mean(f(B) (f(AB_i) - f(A)))`, total indices the Jansen estimator
//! `mean((f(A) - f(AB_i))^2) / 2`. Second-order indices use one extra
//! hybrid per pair with both columns taken from `B`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::doe::column_names;
use crate::error::{Error, Result};
use crate::estuary::ParameterBounds;
use crate::parallel::map_ordered;

pub const ESTIMATOR: &str = "saltelli-first/jansen-total";
pub const MIN_SAMPLES: usize = 128;

/// Monte Carlo tolerance used when checking index invariants.
pub fn mc_tolerance(n_mc: usize) -> f64 {
    4.0 / (n_mc as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolResult {
    pub names: Vec<String>,
    pub first: Vec<f64>,
    pub total: Vec<f64>,
    /// `second[i][j]` for `i < j`; other entries are zero.
    pub second: Option<Vec<Vec<f64>>>,
    pub n_mc: usize,
    pub seed: u64,
    pub estimator: String,
    /// Output variance estimated from `A` and `B` together.
    pub variance: f64,
    pub evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedParameter {
    pub index: usize,
    pub name: String,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub threshold: f64,
    /// Descending by total index.
    pub significant: Vec<RankedParameter>,
    /// Parameters that could be held fixed.
    pub negligible: Vec<RankedParameter>,
}

pub fn sobol_indices<F>(
    f: F,
    bounds: &ParameterBounds,
    n_mc: usize,
    seed: u64,
    second_order: bool,
) -> Result<SobolResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    try_sobol_indices(|x| Ok(f(x)), bounds, n_mc, seed, second_order)
}

/// Like [`sobol_indices`] for functions that can fail.
pub fn try_sobol_indices<F>(
    f: F,
    bounds: &ParameterBounds,
    n_mc: usize,
    seed: u64,
    second_order: bool,
) -> Result<SobolResult>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if n_mc < MIN_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "n_mc must be at least {MIN_SAMPLES}"
        )));
    }
    let d = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n_mc)
            .map(|_| {
                (0..d)
                    .map(|j| bounds.lower()[j] + rng.random::<f64>() * bounds.width(j))
                    .collect()
            })
            .collect()
    };
    let a = draw(&mut rng);
    let b = draw(&mut rng);

    let eval_block = |label: &str, points: &[Vec<f64>]| -> Result<Vec<f64>> {
        map_ordered(points, |row, x| {
            let v = f(x)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Evaluation(format!(
                    "sample {label} row {row}: {x:?}"
                )))
            }
        })
    };
    let hybrid = |cols: &[usize]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(&b)
            .map(|(ra, rb)| {
                let mut x = ra.clone();
                for &c in cols {
                    x[c] = rb[c];
                }
                x
            })
            .collect()
    };

    let fa = eval_block("A", &a)?;
    let fb = eval_block("B", &b)?;
    let n = n_mc as f64;
    let mean = (fa.iter().sum::<f64>() + fb.iter().sum::<f64>()) / (2.0 * n);
    let variance = fa
        .iter()
        .chain(&fb)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (2.0 * n);
    if variance <= 0.0 {
        return Err(Error::DegenerateMetric("output variance is zero".into()));
    }
    // Centering reduces cancellation in the products below.
    let fa: Vec<f64> = fa.iter().map(|v| v - mean).collect();
    let fb: Vec<f64> = fb.iter().map(|v| v - mean).collect();
    let saltelli = |fab: &[f64]| -> f64 {
        fb.iter()
            .zip(fab)
            .zip(&fa)
            .map(|((b, ab), a)| b * (ab - a))
            .sum::<f64>()
            / n
    };

    let mut first = Vec::with_capacity(d);
    let mut total = Vec::with_capacity(d);
    for i in 0..d {
        let fab: Vec<f64> = eval_block(&format!("AB_{i}"), &hybrid(&[i]))?
            .iter()
            .map(|v| v - mean)
            .collect();
        first.push(saltelli(&fab) / variance);
        let jansen = fa
            .iter()
            .zip(&fab)
            .map(|(a, ab)| (a - ab) * (a - ab))
            .sum::<f64>()
            / (2.0 * n);
        total.push(jansen / variance);
    }
    let mut evals = n_mc * (d + 2);

    let second = if second_order {
        let mut s = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in i + 1..d {
                let fab: Vec<f64> = eval_block(&format!("AB_{i}{j}"), &hybrid(&[i, j]))?
                    .iter()
                    .map(|v| v - mean)
                    .collect();
                // Closed index of the pair minus both main effects.
                s[i][j] = saltelli(&fab) / variance - first[i] - first[j];
                evals += n_mc;
            }
        }
        Some(s)
    } else {
        None
    };

    Ok(SobolResult {
        names: column_names(d),
        first,
        total,
        second,
        n_mc,
        seed,
        estimator: ESTIMATOR.into(),
        variance,
        evals,
    })
}

pub fn rank_parameters(result: &SobolResult, threshold: f64) -> Ranking {
    let mut all: Vec<RankedParameter> = result
        .total
        .iter()
        .enumerate()
        .map(|(index, &total)| RankedParameter {
            index,
            name: result.names[index].clone(),
            total,
        })
        .collect();
    all.sort_by(|a, b| b.total.total_cmp(&a.total).then(a.index.cmp(&b.index)));
    let (significant, negligible) = all.into_iter().partition(|p| p.total >= threshold);
    Ranking {
        threshold,
        significant,
        negligible,
    }
}

impl SobolResult {
    /// CSV with `#` metadata lines, one row per parameter.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# n_mc={}", self.n_mc)?;
        writeln!(file, "# seed={}", self.seed)?;
        writeln!(file, "# estimator={}", self.estimator)?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["parameter".to_string(), "S_first".into(), "S_total".into()];
        if self.second.is_some() {
            header.extend(self.names.iter().map(|n| format!("S2_{n}")));
        }
        w.write_record(&header)?;
        for (i, name) in self.names.iter().enumerate() {
            let mut row = vec![
                name.clone(),
                self.first[i].to_string(),
                self.total[i].to_string(),
            ];
            if let Some(s) = &self.second {
                row.extend(s[i].iter().map(f64::to_string));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit(d: usize) -> ParameterBounds {
        ParameterBounds::unit(d).unwrap()
    }

    fn ishigami(x: &[f64]) -> f64 {
        x[0].sin() + 7.0 * x[1].sin().powi(2) + 0.1 * x[2].powi(4) * x[0].sin()
    }

    /// Closed-form Ishigami partial variances: (V, V1, V2, V13).
    fn ishigami_variances(a: f64, b: f64) -> (f64, f64, f64, f64) {
        let p4 = PI.powi(4);
        let p8 = PI.powi(8);
        let v = a * a / 8.0 + b * p4 / 5.0 + b * b * p8 / 18.0 + 0.5;
        let v1 = 0.5 * (1.0 + b * p4 / 5.0).powi(2);
        let v2 = a * a / 8.0;
        let v13 = b * b * p8 * (1.0 / 18.0 - 1.0 / 50.0);
        (v, v1, v2, v13)
    }

    #[test]
    fn additive_linear() {
        let r = sobol_indices(|x| x[0] + 2.0 * x[1], &unit(2), 1 << 14, 1, false).unwrap();
        assert!(
            (r.first[0] - 0.2).abs() <= 0.02 && (r.first[1] - 0.8).abs() <= 0.02,
            "{r:?}"
        );
        assert!((r.first.iter().sum::<f64>() - 1.0).abs() <= mc_tolerance(r.n_mc));
        assert_eq!(r.evals, (1 << 14) * 4);
    }

    #[test]
    fn inert_variable() {
        let r = sobol_indices(|x| x[0] * x[1] + x[0], &unit(3), 1 << 13, 2, false).unwrap();
        assert!(r.first[2].abs() <= 0.02 && r.total[2].abs() <= 0.02);
    }

    #[test]
    fn ishigami_against_closed_form() {
        let b = ParameterBounds::new(vec![-PI; 3], vec![PI; 3]).unwrap();
        let r = sobol_indices(ishigami, &b, 1 << 14, 3, true).unwrap();
        let (v, v1, v2, v13) = ishigami_variances(7.0, 0.1);
        assert!((r.first[0] - v1 / v).abs() <= 0.05);
        assert!((r.first[1] - v2 / v).abs() <= 0.05);
        assert!(r.first[2].abs() <= 0.05);
        assert!((r.total[2] - v13 / v).abs() <= 0.05);
        let s2 = r.second.as_ref().unwrap();
        assert!((s2[0][2] - v13 / v).abs() <= 0.05, "{s2:?}");
        assert!(s2[0][1].abs() <= 0.05 && s2[1][2].abs() <= 0.05);
        assert_eq!(r.evals, (1 << 14) * (5 + 3));
    }

    #[test]
    fn product_interaction() {
        // Var = 7/144, V1 = V2 = 3/144, V12 = 1/144.
        let r = sobol_indices(|x| x[0] * x[1], &unit(2), 1 << 15, 4, true).unwrap();
        let s12 = r.second.unwrap()[0][1];
        assert!((s12 - 1.0 / 7.0).abs() <= 0.03, "{s12}");
        assert!((r.first[0] - 3.0 / 7.0).abs() <= 0.03);
    }

    #[test]
    fn error_shrinks_with_more_samples() {
        let err = |n: usize| -> f64 {
            (0..8u64)
                .map(|s| {
                    let r =
                        sobol_indices(|x| x[0] + 2.0 * x[1], &unit(2), n, 100 + s, false).unwrap();
                    (r.first[0] - 0.2).abs().max((r.first[1] - 0.8).abs())
                })
                .sum::<f64>()
                / 8.0
        };
        let (coarse, fine) = (err(1 << 10), err(1 << 12));
        // Quadrupling the sample should roughly halve the error.
        assert!(fine < 0.8 * coarse, "{coarse} -> {fine}");
    }

    #[test]
    fn same_seed_same_result() {
        let f = |x: &[f64]| x[0].exp() * x[1] + x[2];
        let a = sobol_indices(f, &unit(3), 512, 9, true).unwrap();
        let b = sobol_indices(f, &unit(3), 512, 9, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn total_dominates_first_within_tolerance() {
        let b = ParameterBounds::new(vec![-PI; 3], vec![PI; 3]).unwrap();
        for seed in 0..5 {
            let r = sobol_indices(ishigami, &b, 1024, seed, false).unwrap();
            let tau = mc_tolerance(r.n_mc);
            for i in 0..3 {
                assert!(
                    r.first[i] >= -tau && r.first[i] <= r.total[i] + tau && r.total[i] <= 1.0 + tau
                );
            }
        }
    }

    #[test]
    fn non_finite_values_are_reported() {
        let err = sobol_indices(
            |x| if x[0] > 0.9 { f64::NAN } else { x[0] },
            &unit(1),
            256,
            1,
            false,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Evaluation(ref m) if m.contains("row")),
            "{err}"
        );
        assert!(sobol_indices(|x| x[0], &unit(1), 64, 1, false).is_err());
    }

    #[test]
    fn ranking() {
        let mut r = sobol_indices(|x| x[0], &unit(3), 256, 1, false).unwrap();
        r.total = vec![0.0, 0.7, 0.0];
        let k = rank_parameters(&r, 0.05);
        assert_eq!(k.significant.len(), 1);
        assert_eq!(k.significant[0].index, 1);
        r.total = vec![0.1, 0.7, 0.3];
        let all = rank_parameters(&r, 0.0);
        let order: Vec<usize> = all.significant.iter().map(|p| p.index).collect();
        assert_eq!(order, vec![1, 2, 0]);
        assert!(all.negligible.is_empty());
    }

    #[test]
    fn csv_has_metadata() {
        let r = sobol_indices(|x| x[0] + x[1], &unit(2), 256, 5, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sobol.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# n_mc=256\n# seed=5\n# estimator="));
        assert!(text.contains("parameter,S_first,S_total,S2_x1,S2_x2"));
    }
}
