//! Calibration objectives and the optimizers that minimize them:
//! particle swarm, projected quasi-Newton with a multi-start wrapper, and
//! NSGA-II for Pareto fronts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

use crate::doe::{column_names, lhs_sample};
use crate::error::{Error, Result};
use crate::estuary::{ForwardModel, ParameterBounds, ParameterVector, TimeSeries};
use crate::kriging::SurrogateSet;
use crate::metrics::{self, Aggregate, NashVariant};
use crate::parallel::map_ordered;

/// Guard for relative gaps at near-perfect fits, meters.
pub const GAP_EPSILON: f64 = 1e-9;
pub const DEFAULT_GAP_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "station")]
pub enum ObjectiveSpec {
    MeanRmse,
    StationRmse(u32),
    StdRmse,
    MaxRmse,
    AbsBias(u32),
    /// `1 - NASH`, so every objective is minimized.
    NegNash(u32),
}

impl ObjectiveSpec {
    pub fn station(&self) -> Option<u32> {
        match *self {
            ObjectiveSpec::StationRmse(s)
            | ObjectiveSpec::AbsBias(s)
            | ObjectiveSpec::NegNash(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObjectiveSpec::MeanRmse => write!(f, "mean"),
            ObjectiveSpec::StdRmse => write!(f, "std"),
            ObjectiveSpec::MaxRmse => write!(f, "max"),
            ObjectiveSpec::StationRmse(s) => write!(f, "station:{s}"),
            ObjectiveSpec::AbsBias(s) => write!(f, "bias:{s}"),
            ObjectiveSpec::NegNash(s) => write!(f, "nash:{s}"),
        }
    }
}

impl std::str::FromStr for ObjectiveSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown objective {s:?}"));
        let station = |v: &str| v.parse::<u32>().map_err(|_| bad());
        match s.split_once(':') {
            None => match s {
                "mean" => Ok(ObjectiveSpec::MeanRmse),
                "std" => Ok(ObjectiveSpec::StdRmse),
                "max" => Ok(ObjectiveSpec::MaxRmse),
                _ => Err(bad()),
            },
            Some(("station", v)) => Ok(ObjectiveSpec::StationRmse(station(v)?)),
            Some(("bias", v)) => Ok(ObjectiveSpec::AbsBias(station(v)?)),
            Some(("nash", v)) => Ok(ObjectiveSpec::NegNash(station(v)?)),
            _ => Err(bad()),
        }
    }
}

/// A function to minimize over a box.
pub trait Objective: Sync {
    fn eval(&self, x: &[f64]) -> Result<f64>;
}

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for F {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self(x))
    }
}

/// What an objective is evaluated against.
#[derive(Clone, Copy)]
pub enum Backend<'a> {
    /// Per-station kriging models of RMSE and, when needed, of signed bias
    /// and Nash.
    Surrogate {
        rmse: &'a SurrogateSet,
        bias: Option<&'a SurrogateSet>,
        nash: Option<&'a SurrogateSet>,
    },
    /// The forward model itself.
    Forward {
        model: &'a ForwardModel,
        observations: &'a [TimeSeries],
        nash: NashVariant,
    },
}

pub struct BuiltObjective<'a> {
    spec: ObjectiveSpec,
    backend: Backend<'a>,
    station: Option<usize>,
}

pub fn build_objective<'a>(
    spec: ObjectiveSpec,
    backend: Backend<'a>,
) -> Result<BuiltObjective<'a>> {
    let station = match spec.station() {
        None => None,
        Some(id) => {
            let index = match backend {
                Backend::Surrogate { rmse, bias, nash } => {
                    let set = match spec {
                        ObjectiveSpec::AbsBias(_) => bias,
                        ObjectiveSpec::NegNash(_) => nash,
                        _ => Some(rmse),
                    }
                    .ok_or_else(|| Error::Config(format!("no surrogate available for {spec}")))?;
                    set.station_index(id)
                }
                Backend::Forward { model, .. } => model.estuary().station_index(id),
            };
            Some(index.ok_or_else(|| Error::Config(format!("{spec}: unknown station {id}")))?)
        }
    };
    if let Backend::Forward {
        model,
        observations,
        ..
    } = backend
    {
        if observations.len() != model.n_stations() {
            return Err(Error::Config(
                "observations do not cover every station".into(),
            ));
        }
    }
    Ok(BuiltObjective {
        spec,
        backend,
        station,
    })
}

impl BuiltObjective<'_> {
    pub fn spec(&self) -> ObjectiveSpec {
        self.spec
    }

    fn aggregate_kind(&self) -> Option<Aggregate> {
        match self.spec {
            ObjectiveSpec::MeanRmse => Some(Aggregate::Mean),
            ObjectiveSpec::StdRmse => Some(Aggregate::Std),
            ObjectiveSpec::MaxRmse => Some(Aggregate::Max),
            _ => None,
        }
    }
}

impl Objective for BuiltObjective<'_> {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        match self.backend {
            Backend::Surrogate { rmse, bias, nash } => {
                if let Some(kind) = self.aggregate_kind() {
                    return rmse.predict_all(x).aggregate(kind);
                }
                let s = self.station.expect("station objective");
                Ok(match self.spec {
                    ObjectiveSpec::StationRmse(_) => rmse.models[s].predict_mean(x).max(0.0),
                    ObjectiveSpec::AbsBias(_) => bias.expect("checked at build").models[s]
                        .predict_mean(x)
                        .abs(),
                    ObjectiveSpec::NegNash(_) => {
                        1.0 - nash.expect("checked at build").models[s].predict_mean(x)
                    }
                    _ => unreachable!(),
                })
            }
            Backend::Forward {
                model,
                observations,
                nash,
            } => {
                let sim = model.simulate(&ParameterVector::from_slice(x)?)?;
                if let Some(kind) = self.aggregate_kind() {
                    return metrics::station_rmse(&sim, observations)?.aggregate(kind);
                }
                let s = self.station.expect("station objective");
                let (sim, obs) = (&sim[s], &observations[s]);
                metrics::check_aligned(sim, obs)?;
                match self.spec {
                    ObjectiveSpec::StationRmse(_) => metrics::rmse(&sim.values, &obs.values),
                    ObjectiveSpec::AbsBias(_) => Ok(metrics::bias(&sim.values, &obs.values)?.abs()),
                    ObjectiveSpec::NegNash(_) => {
                        Ok(1.0 - metrics::nash(&sim.values, &obs.values, nash)?)
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
}

fn checked_eval(f: &dyn Objective, x: &[f64]) -> Result<f64> {
    let v = f.eval(x)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!("{x:?}")))
    }
}

fn at_iteration(e: Error, stage: &'static str, index: usize) -> Error {
    Error::Iteration {
        stage,
        index,
        source: Box::new(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimRun {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    /// Best value found so far, one entry per iteration.
    pub history: Vec<f64>,
    pub evals: usize,
    pub seed: u64,
}

impl OptimRun {
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "best_f"])?;
        for (k, f) in self.history.iter().enumerate() {
            w.write_record([(k + 1).to_string(), f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub swarm: usize,
    pub iters: usize,
    pub inertia: f64,
    pub c1: f64,
    pub c2: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            swarm: 40,
            iters: 200,
            inertia: 0.729,
            c1: 1.494,
            c2: 1.494,
            seed: 0,
        }
    }
}

/// Mirrors `x` back into `[lo, hi]`, flipping the velocity on a bounce.
fn reflect(x: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if *x < lo {
        *x = lo + (lo - *x);
        *v = -*v;
    } else if *x > hi {
        *x = hi - (*x - hi);
        *v = -*v;
    }
    *x = x.clamp(lo, hi);
}

/// Global-best particle swarm. Iteration 1 evaluates the initial swarm;
/// every later iteration moves and re-evaluates all particles.
pub fn pso_minimize(
    f: &dyn Objective,
    bounds: &ParameterBounds,
    config: &PsoConfig,
) -> Result<OptimRun> {
    if config.swarm < 5 || config.iters < 1 {
        return Err(Error::Config("PSO needs swarm >= 5 and iters >= 1".into()));
    }
    let d = bounds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pos: Vec<Vec<f64>> = (0..config.swarm)
        .map(|_| {
            (0..d)
                .map(|j| bounds.lower()[j] + rng.random::<f64>() * bounds.width(j))
                .collect()
        })
        .collect();
    let mut vel: Vec<Vec<f64>> = (0..config.swarm)
        .map(|_| {
            (0..d)
                .map(|j| 0.1 * bounds.width(j) * (2.0 * rng.random::<f64>() - 1.0))
                .collect()
        })
        .collect();

    let evaluate = |pos: &[Vec<f64>], k: usize| -> Result<Vec<f64>> {
        map_ordered(pos, |_, x| checked_eval(f, x)).map_err(|e| at_iteration(e, "iteration", k))
    };
    let mut val = evaluate(&pos, 1)?;
    let mut pbest = pos.clone();
    let mut pbest_f = val.clone();
    let mut g = (0..config.swarm).fold(0, |b, i| if val[i] < val[b] { i } else { b });
    let (mut gbest, mut gbest_f) = (pos[g].clone(), val[g]);
    let mut history = vec![gbest_f];

    for k in 2..=config.iters {
        for i in 0..config.swarm {
            for j in 0..d {
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let vmax = bounds.width(j);
                let v = config.inertia * vel[i][j]
                    + config.c1 * r1 * (pbest[i][j] - pos[i][j])
                    + config.c2 * r2 * (gbest[j] - pos[i][j]);
                vel[i][j] = v.clamp(-vmax, vmax);
                pos[i][j] += vel[i][j];
                reflect(
                    &mut pos[i][j],
                    &mut vel[i][j],
                    bounds.lower()[j],
                    bounds.upper()[j],
                );
            }
        }
        val = evaluate(&pos, k)?;
        for i in 0..config.swarm {
            if val[i] < pbest_f[i] {
                pbest_f[i] = val[i];
                pbest[i] = pos[i].clone();
            }
        }
        g = (0..config.swarm).fold(0, |b, i| if pbest_f[i] < pbest_f[b] { i } else { b });
        if pbest_f[g] < gbest_f {
            gbest_f = pbest_f[g];
            gbest = pbest[g].clone();
        }
        history.push(gbest_f);
    }
    Ok(OptimRun {
        best_x: gbest,
        best_f: gbest_f,
        history,
        evals: config.swarm * config.iters,
        seed: config.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientConfig {
    pub max_iters: usize,
    /// Stop when the projected gradient (unit-cube coordinates) is below this.
    pub gtol: f64,
    /// Finite-difference step, relative to the unit cube.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            gtol: 1e-8,
            fd_step: 1e-6,
            seed: 0,
        }
    }
}

struct UnitProblem<'a> {
    f: &'a dyn Objective,
    bounds: &'a ParameterBounds,
    evals: usize,
}

impl UnitProblem<'_> {
    fn value(&mut self, u: &[f64]) -> Result<f64> {
        self.evals += 1;
        checked_eval(self.f, &self.bounds.denormalize(u))
    }

    /// Central differences, shifted inward at the faces of the cube.
    fn gradient(&mut self, u: &[f64], h: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; u.len()];
        let mut p = u.to_vec();
        for j in 0..u.len() {
            let hi = (u[j] + h).min(1.0);
            let lo = (u[j] - h).max(0.0);
            p[j] = hi;
            let fh = self.value(&p)?;
            p[j] = lo;
            let fl = self.value(&p)?;
            p[j] = u[j];
            g[j] = (fh - fl) / (hi - lo);
        }
        Ok(g)
    }
}

fn projected_gradient(u: &[f64], g: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(g)
        .map(|(&x, &gj)| {
            if (x <= 0.0 && gj > 0.0) || (x >= 1.0 && gj < 0.0) {
                0.0
            } else {
                gj
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected BFGS on the unit-cube image of `bounds`, with an Armijo
/// backtracking search along the projected path.
pub fn gradient_minimize(
    f: &dyn Objective,
    bounds: &ParameterBounds,
    x0: &[f64],
    config: &GradientConfig,
) -> Result<OptimRun> {
    bounds.validate_point(x0)?;
    let d = bounds.dim();
    let mut prob = UnitProblem {
        f,
        bounds,
        evals: 0,
    };
    let mut u = bounds.normalize(x0);
    for v in &mut u {
        *v = v.clamp(0.0, 1.0);
    }
    let mut fu = prob.value(&u)?;
    let mut g = prob
        .gradient(&u, config.fd_step)
        .map_err(|e| at_iteration(e, "iteration", 0))?;
    let identity = |d: usize| -> Vec<Vec<f64>> {
        (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    };
    let mut h = identity(d);
    let mut history = Vec::new();

    for k in 1..=config.max_iters {
        let pg = projected_gradient(&u, &g);
        if pg.iter().fold(0.0f64, |a, v| a.max(v.abs())) <= config.gtol {
            break;
        }
        let free: Vec<bool> = pg
            .iter()
            .zip(&g)
            .map(|(p, gj)| *p != 0.0 || *gj == 0.0)
            .collect();
        let mut step = None;
        for attempt in 0..2 {
            if attempt == 1 {
                h = identity(d);
            }
            let mut dir: Vec<f64> = (0..d)
                .map(|i| {
                    if !free[i] {
                        return 0.0;
                    }
                    -(0..d)
                        .filter(|&j| free[j])
                        .map(|j| h[i][j] * pg[j])
                        .sum::<f64>()
                })
                .collect();
            if dot(&dir, &pg) >= 0.0 {
                dir = pg.iter().map(|v| -v).collect();
            }
            // Cap the first trial step at half the cube.
            let longest = dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut t = if longest > 0.5 { 0.5 / longest } else { 1.0 };
            for _ in 0..50 {
                let trial: Vec<f64> = u
                    .iter()
                    .zip(&dir)
                    .map(|(x, dj)| (x + t * dj).clamp(0.0, 1.0))
                    .collect();
                let ft = prob
                    .value(&trial)
                    .map_err(|e| at_iteration(e, "iteration", k))?;
                let decrease: f64 = g
                    .iter()
                    .zip(trial.iter().zip(&u))
                    .map(|(gj, (a, b))| gj * (a - b))
                    .sum();
                if ft <= fu + 1e-4 * decrease && ft < fu {
                    step = Some((trial, ft));
                    break;
                }
                t *= 0.5;
            }
            if step.is_some() {
                break;
            }
        }
        let Some((u_new, f_new)) = step else { break };
        let g_new = prob
            .gradient(&u_new, config.fd_step)
            .map_err(|e| at_iteration(e, "iteration", k))?;
        let s: Vec<f64> = u_new.iter().zip(&u).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..d).map(|i| dot(&h[i], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..d {
                for j in 0..d {
                    h[i][j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        u = u_new;
        fu = f_new;
        g = g_new;
        history.push(fu);
    }
    if history.is_empty() {
        history.push(fu);
    }
    Ok(OptimRun {
        best_x: bounds.denormalize(&u),
        best_f: fu,
        history,
        evals: prob.evals,
        seed: config.seed,
    })
}

/// Runs [`gradient_minimize`] from `n_starts` Latin hypercube points plus
/// any `extra_starts`, keeping the best. The history concatenates the
/// per-start histories as a running minimum.
pub fn multistart_gradient(
    f: &dyn Objective,
    bounds: &ParameterBounds,
    n_starts: usize,
    extra_starts: &[Vec<f64>],
    config: &GradientConfig,
) -> Result<OptimRun> {
    let mut starts = extra_starts.to_vec();
    if n_starts > 0 {
        starts.extend(lhs_sample(n_starts, bounds, config.seed)?.points);
    }
    if starts.is_empty() {
        return Err(Error::Config("multi-start needs at least one start".into()));
    }
    let runs = map_ordered(&starts, |_, x0| gradient_minimize(f, bounds, x0, config))?;
    let mut best: Option<&OptimRun> = None;
    let mut history = Vec::new();
    let mut running = f64::INFINITY;
    for r in &runs {
        for v in &r.history {
            running = running.min(*v);
            history.push(running);
        }
        if best.is_none_or(|b| r.best_f < b.best_f) {
            best = Some(r);
        }
    }
    let best = best.expect("nonempty");
    Ok(OptimRun {
        best_x: best.best_x.clone(),
        best_f: best.best_f,
        history,
        evals: runs.iter().map(|r| r.evals).sum(),
        seed: config.seed,
    })
}

/// `a` dominates `b`: no worse everywhere, strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Fast nondominated sorting; fronts hold indices in ascending order.
pub fn nondominated_sort(points: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
    if let Some(first) = points.first() {
        if points.iter().any(|p| p.len() != first.len()) {
            return Err(Error::InvalidInput(
                "objective vectors differ in length".into(),
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "objective vectors must be finite".into(),
            ));
        }
    }
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominating: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if dominates(&points[i], &points[j]) {
                dominating[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(&points[j], &points[i]) {
                dominating[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominating[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    Ok(fronts)
}

/// Normalized neighbor-gap sum per point; extremes of every objective are
/// infinite.
pub fn crowding_distance(front: &[Vec<f64>]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let n_obj = front[0].len();
    #[allow(clippy::needless_range_loop)]
    for m in 0..n_obj {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a][m].total_cmp(&front[b][m]));
        let (lo, hi) = (front[order[0]][m], front[order[n - 1]][m]);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi > lo {
            for k in 1..n - 1 {
                dist[order[k]] += (front[order[k + 1]][m] - front[order[k - 1]][m]) / (hi - lo);
            }
        }
    }
    dist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nsga2Config {
    pub pop: usize,
    pub gens: usize,
    pub crossover_p: f64,
    pub crossover_eta: f64,
    /// Per-variable mutation probability; `None` means `1 / d`.
    pub mutation_p: Option<f64>,
    pub mutation_eta: f64,
    pub seed: u64,
}

impl Default for Nsga2Config {
    fn default() -> Self {
        Self {
            pop: 100,
            gens: 150,
            crossover_p: 0.9,
            crossover_eta: 15.0,
            mutation_p: None,
            mutation_eta: 20.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub x: Vec<f64>,
    pub f: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub objectives: Vec<String>,
    pub points: Vec<ParetoPoint>,
}

impl ParetoFront {
    /// Brute-force check that no point dominates another.
    pub fn is_mutually_nondominated(&self) -> bool {
        self.points.iter().enumerate().all(|(i, a)| {
            self.points
                .iter()
                .enumerate()
                .all(|(j, b)| i == j || !dominates(&a.f, &b.f))
        })
    }

    /// `f1[,f2[,f3]]` followed by the decision variables.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let m = self.objectives.len();
        let d = self.points.first().map_or(0, |p| p.x.len());
        let mut header: Vec<String> = (1..=m).map(|k| format!("f{k}")).collect();
        header.extend(column_names(d.max(1)).into_iter().take(d));
        w.write_record(&header)?;
        for p in &self.points {
            w.write_record(p.f.iter().chain(&p.x).map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn sbx_pair<R: Rng>(a: f64, b: f64, lo: f64, hi: f64, eta: f64, rng: &mut R) -> (f64, f64) {
    if (a - b).abs() <= 1e-14 {
        return (a, b);
    }
    let (y1, y2) = if a < b { (a, b) } else { (b, a) };
    let u: f64 = rng.random();
    let spread = |beta: f64| -> f64 {
        let alpha = 2.0 - beta.powf(-(eta + 1.0));
        if u <= 1.0 / alpha {
            (u * alpha).powf(1.0 / (eta + 1.0))
        } else {
            (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
        }
    };
    let bq1 = spread(1.0 + 2.0 * (y1 - lo) / (y2 - y1));
    let c1 = (0.5 * ((y1 + y2) - bq1 * (y2 - y1))).clamp(lo, hi);
    let bq2 = spread(1.0 + 2.0 * (hi - y2) / (y2 - y1));
    let c2 = (0.5 * ((y1 + y2) + bq2 * (y2 - y1))).clamp(lo, hi);
    if rng.random::<f64>() <= 0.5 {
        (c2, c1)
    } else {
        (c1, c2)
    }
}

fn polynomial_mutation<R: Rng>(y: f64, lo: f64, hi: f64, eta: f64, rng: &mut R) -> f64 {
    let width = hi - lo;
    let (d1, d2) = ((y - lo) / width, (hi - y) / width);
    let r: f64 = rng.random();
    let pow = 1.0 / (eta + 1.0);
    let dq = if r < 0.5 {
        let v = 2.0 * r + (1.0 - 2.0 * r) * (1.0 - d1).powf(eta + 1.0);
        v.powf(pow) - 1.0
    } else {
        let v = 2.0 * (1.0 - r) + 2.0 * (r - 0.5) * (1.0 - d2).powf(eta + 1.0);
        1.0 - v.powf(pow)
    };
    (y + dq * width).clamp(lo, hi)
}

/// Per-individual rank, per-individual crowding, and the fronts themselves.
type Ranking = (Vec<usize>, Vec<f64>, Vec<Vec<usize>>);

fn rank_and_crowd(fs: &[Vec<f64>]) -> Result<Ranking> {
    let fronts = nondominated_sort(fs)?;
    let mut rank = vec![0; fs.len()];
    let mut crowd = vec![0.0; fs.len()];
    for (r, front) in fronts.iter().enumerate() {
        let vals: Vec<Vec<f64>> = front.iter().map(|&i| fs[i].clone()).collect();
        for (&i, c) in front.iter().zip(crowding_distance(&vals)) {
            rank[i] = r;
            crowd[i] = c;
        }
    }
    Ok((rank, crowd, fronts))
}

/// Elitist NSGA-II. Returns the first front of the final population with
/// duplicate objective vectors removed.
pub fn nsga2(
    objectives: &[&dyn Objective],
    names: &[String],
    bounds: &ParameterBounds,
    config: &Nsga2Config,
) -> Result<ParetoFront> {
    if objectives.is_empty() || objectives.len() > 3 {
        return Err(Error::Config(
            "NSGA-II takes one to three objectives".into(),
        ));
    }
    if config.pop < 8 || !config.pop.is_multiple_of(2) {
        return Err(Error::Config(
            "population must be even and at least 8".into(),
        ));
    }
    let d = bounds.dim();
    let pm = config.mutation_p.unwrap_or(1.0 / d as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let evaluate = |xs: &[Vec<f64>], gen: usize| -> Result<Vec<Vec<f64>>> {
        map_ordered(xs, |_, x| {
            objectives.iter().map(|f| checked_eval(*f, x)).collect()
        })
        .map_err(|e| at_iteration(e, "generation", gen))
    };

    let mut xs: Vec<Vec<f64>> = (0..config.pop)
        .map(|_| {
            (0..d)
                .map(|j| bounds.lower()[j] + rng.random::<f64>() * bounds.width(j))
                .collect()
        })
        .collect();
    let mut fs = evaluate(&xs, 0)?;
    let (mut rank, mut crowd, _) = rank_and_crowd(&fs)?;

    for gen in 1..=config.gens {
        let tournament = |rng: &mut ChaCha8Rng| -> usize {
            let a = rng.random_range(0..config.pop);
            let b = rng.random_range(0..config.pop);
            if rank[a] != rank[b] {
                if rank[a] < rank[b] {
                    a
                } else {
                    b
                }
            } else if crowd[a] != crowd[b] {
                if crowd[a] > crowd[b] {
                    a
                } else {
                    b
                }
            } else {
                a.min(b)
            }
        };
        let mut children = Vec::with_capacity(config.pop);
        while children.len() < config.pop {
            let (p1, p2) = (tournament(&mut rng), tournament(&mut rng));
            let (mut c1, mut c2) = (xs[p1].clone(), xs[p2].clone());
            if rng.random::<f64>() <= config.crossover_p {
                for j in 0..d {
                    if rng.random::<f64>() <= 0.5 {
                        let (lo, hi) = (bounds.lower()[j], bounds.upper()[j]);
                        (c1[j], c2[j]) =
                            sbx_pair(c1[j], c2[j], lo, hi, config.crossover_eta, &mut rng);
                    }
                }
            }
            for c in [&mut c1, &mut c2] {
                for (j, v) in c.iter_mut().enumerate() {
                    if rng.random::<f64>() <= pm {
                        let (lo, hi) = (bounds.lower()[j], bounds.upper()[j]);
                        *v = polynomial_mutation(*v, lo, hi, config.mutation_eta, &mut rng);
                    }
                }
            }
            children.push(c1);
            children.push(c2);
        }
        let child_f = evaluate(&children, gen)?;
        xs.extend(children);
        fs.extend(child_f);

        let (_, all_crowd, fronts) = rank_and_crowd(&fs)?;
        let mut keep = Vec::with_capacity(config.pop);
        for front in &fronts {
            if keep.len() + front.len() <= config.pop {
                keep.extend_from_slice(front);
            } else {
                let mut rest = front.clone();
                rest.sort_by(|&a, &b| all_crowd[b].total_cmp(&all_crowd[a]).then(a.cmp(&b)));
                keep.extend_from_slice(&rest[..config.pop - keep.len()]);
            }
            if keep.len() == config.pop {
                break;
            }
        }
        xs = keep.iter().map(|&i| xs[i].clone()).collect();
        fs = keep.iter().map(|&i| fs[i].clone()).collect();
        (rank, crowd, _) = rank_and_crowd(&fs)?;
    }

    let first = nondominated_sort(&fs)?.swap_remove(0);
    let mut points: Vec<ParetoPoint> = Vec::new();
    for i in first {
        if !points.iter().any(|p| p.f == fs[i]) {
            points.push(ParetoPoint {
                x: xs[i].clone(),
                f: fs[i].clone(),
            });
        }
    }
    points.sort_by(|a, b| {
        a.f.iter()
            .zip(&b.f)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(ParetoFront {
        objectives: names.to_vec(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimumCheck {
    pub f_hat: f64,
    pub f_true: f64,
    pub rel_gap: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the surrogate value at `x` with the forward-model value.
pub fn validate_optimum(
    x: &[f64],
    bounds: &ParameterBounds,
    surrogate: &dyn Objective,
    forward: &dyn Objective,
    tolerance: f64,
) -> Result<OptimumCheck> {
    bounds.validate_point(x)?;
    let f_hat = surrogate.eval(x)?;
    let f_true = forward.eval(x)?;
    Ok(gap_check(f_hat, f_true, tolerance))
}

pub fn gap_check(f_hat: f64, f_true: f64, tolerance: f64) -> OptimumCheck {
    let rel_gap = (f_hat - f_true).abs() / f_true.max(GAP_EPSILON);
    OptimumCheck {
        f_hat,
        f_true,
        rel_gap,
        tolerance,
        passed: rel_gap <= tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    fn zdt1(x: &[f64]) -> (f64, f64) {
        let g = 1.0 + 9.0 * x[1..].iter().sum::<f64>() / (x.len() - 1) as f64;
        (x[0], g * (1.0 - (x[0] / g).sqrt()))
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in ["mean", "std", "max", "station:4", "bias:2", "nash:6"] {
            assert_eq!(s.parse::<ObjectiveSpec>().unwrap().to_string(), s);
        }
        assert!("median".parse::<ObjectiveSpec>().is_err());
        assert!("station:x".parse::<ObjectiveSpec>().is_err());
    }

    #[test]
    fn pso_sphere() {
        let b = ParameterBounds::new(vec![-5.0; 5], vec![5.0; 5]).unwrap();
        let r = pso_minimize(
            &sphere,
            &b,
            &PsoConfig {
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.best_f <= 1e-6, "{}", r.best_f);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*r.history.last().unwrap(), r.best_f);
        assert_eq!(r.history.len(), 200);
    }

    #[test]
    fn pso_constant_and_determinism() {
        let b = ParameterBounds::unit(3).unwrap();
        let cfg = PsoConfig {
            swarm: 10,
            iters: 5,
            seed: 1,
            ..Default::default()
        };
        let r = pso_minimize(&|_: &[f64]| 2.5, &b, &cfg).unwrap();
        assert!(r.history.iter().all(|v| *v == 2.5));
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + x[1].sin() + x[2];
        assert_eq!(
            pso_minimize(&f, &b, &cfg).unwrap(),
            pso_minimize(&f, &b, &cfg).unwrap()
        );
        assert!(pso_minimize(&f, &b, &PsoConfig { swarm: 4, ..cfg }).is_err());
    }

    #[test]
    fn pso_reports_iteration_of_failure() {
        let b = ParameterBounds::unit(2).unwrap();
        let f = |x: &[f64]| if x[0] > 0.95 { f64::NAN } else { x[0] };
        let err = pso_minimize(
            &f,
            &b,
            &PsoConfig {
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                Error::Iteration {
                    stage: "iteration",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn gradient_quadratic_interior() {
        let b = ParameterBounds::new(vec![-3.0, -3.0], vec![3.0, 3.0]).unwrap();
        let f = |x: &[f64]| (x[0] - 1.2).powi(2) + 3.0 * (x[1] + 0.7).powi(2);
        let r = gradient_minimize(&f, &b, &[2.5, 2.5], &GradientConfig::default()).unwrap();
        assert!(
            (r.best_x[0] - 1.2).abs() < 1e-6 && (r.best_x[1] + 0.7).abs() < 1e-6,
            "{:?}",
            r.best_x
        );
        assert!(r.history.len() <= 50);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gradient_active_bound() {
        let b = ParameterBounds::new(vec![1.0], vec![2.0]).unwrap();
        let r = gradient_minimize(
            &|x: &[f64]| x[0] * x[0],
            &b,
            &[1.7],
            &GradientConfig::default(),
        )
        .unwrap();
        assert_eq!(r.best_x, vec![1.0]);
    }

    #[test]
    fn gradient_rejects_bad_start() {
        let b = ParameterBounds::unit(1).unwrap();
        let cfg = GradientConfig::default();
        assert!(gradient_minimize(&|x: &[f64]| x[0], &b, &[1.5], &cfg).is_err());
        assert!(gradient_minimize(&|_: &[f64]| f64::INFINITY, &b, &[0.5], &cfg).is_err());
    }

    #[test]
    fn multistart_finds_global_basin() {
        let b = ParameterBounds::new(vec![-4.0], vec![4.0]).unwrap();
        // Two basins; the deeper one is at x = 2.
        let f = |x: &[f64]| -(-(x[0] + 2.0).powi(2)).exp() - 2.0 * (-(x[0] - 2.0).powi(2)).exp();
        let r = multistart_gradient(&f, &b, 6, &[vec![-2.0]], &GradientConfig::default()).unwrap();
        assert!((r.best_x[0] - 2.0).abs() < 1e-4);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    fn brute_fronts(points: &[Vec<f64>]) -> Vec<Vec<usize>> {
        let mut left: Vec<usize> = (0..points.len()).collect();
        let mut fronts = Vec::new();
        while !left.is_empty() {
            let front: Vec<usize> = left
                .iter()
                .copied()
                .filter(|&i| !left.iter().any(|&j| dominates(&points[j], &points[i])))
                .collect();
            left.retain(|i| !front.contains(i));
            fronts.push(front);
        }
        fronts
    }

    #[test]
    fn sorting_small_cases() {
        assert_eq!(nondominated_sort(&[vec![1.0, 2.0]]).unwrap(), vec![vec![0]]);
        assert_eq!(
            nondominated_sort(&[vec![2.0, 2.0], vec![1.0, 1.0]]).unwrap(),
            vec![vec![1], vec![0]]
        );
        assert!(nondominated_sort(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    proptest! {
        #[test]
        fn sorting_matches_brute_force(
            pts in prop::collection::vec(prop::collection::vec(0u8..6, 2), 1..60)
        ) {
            let pts: Vec<Vec<f64>> = pts.into_iter().map(|p| p.into_iter().map(f64::from).collect()).collect();
            prop_assert_eq!(nondominated_sort(&pts).unwrap(), brute_fronts(&pts));
        }

        #[test]
        fn scaling_an_objective_keeps_ranks(
            pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..40),
            scale in 0.01f64..100.0,
        ) {
            let scaled: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0] * scale, p[1], p[2]]).collect();
            prop_assert_eq!(nondominated_sort(&pts).unwrap(), nondominated_sort(&scaled).unwrap());
        }
    }

    #[test]
    fn crowding_examples() {
        let line = vec![vec![0.0, 2.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let c = crowding_distance(&line);
        assert!(c[0].is_infinite() && c[2].is_infinite() && c[1] == 2.0);
        assert!(crowding_distance(&line[..2])
            .iter()
            .all(|v| v.is_infinite()));
        let same = vec![vec![1.0, 1.0]; 4];
        let c = crowding_distance(&same);
        assert_eq!(c.iter().filter(|v| v.is_infinite()).count(), 2);
        assert_eq!(c.iter().filter(|v| **v == 0.0).count(), 2);
    }

    #[test]
    fn nsga2_single_objective_collapses() {
        let b = ParameterBounds::new(vec![-2.0; 2], vec![2.0; 2]).unwrap();
        let f: &dyn Objective = &sphere;
        let cfg = Nsga2Config {
            pop: 20,
            gens: 30,
            seed: 4,
            ..Default::default()
        };
        let front = nsga2(&[f], &["sphere".into()], &b, &cfg).unwrap();
        assert!(!front.points.is_empty());
        let lo = front
            .points
            .iter()
            .map(|p| p.f[0])
            .fold(f64::INFINITY, f64::min);
        assert!(front.points.iter().all(|p| p.f[0] - lo <= 1e-6));
    }

    #[test]
    fn nsga2_zdt1() {
        let b = ParameterBounds::unit(10).unwrap();
        let f1 = |x: &[f64]| zdt1(x).0;
        let f2 = |x: &[f64]| zdt1(x).1;
        let objs: [&dyn Objective; 2] = [&f1, &f2];
        let cfg = Nsga2Config {
            seed: 7,
            ..Default::default()
        };
        let front = nsga2(&objs, &["f1".into(), "f2".into()], &b, &cfg).unwrap();
        assert!(front.is_mutually_nondominated());
        let curve: Vec<(f64, f64)> = (0..=10000)
            .map(|k| {
                let a = k as f64 / 10000.0;
                (a, 1.0 - a.sqrt())
            })
            .collect();
        let mean_dist = front
            .points
            .iter()
            .map(|p| {
                curve
                    .iter()
                    .map(|(a, c)| ((p.f[0] - a).powi(2) + (p.f[1] - c).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / front.points.len() as f64;
        assert!(mean_dist <= 0.05, "{mean_dist}");
        assert!(front.points.len() >= 10);
        assert_eq!(
            front,
            nsga2(&objs, &["f1".into(), "f2".into()], &b, &cfg).unwrap()
        );
    }

    #[test]
    fn nsga2_validates_config() {
        let b = ParameterBounds::unit(2).unwrap();
        let f: &dyn Objective = &sphere;
        assert!(nsga2(
            &[f],
            &[],
            &b,
            &Nsga2Config {
                pop: 9,
                ..Default::default()
            }
        )
        .is_err());
        assert!(nsga2(&[], &[], &b, &Nsga2Config::default()).is_err());
    }

    #[test]
    fn gap_arithmetic() {
        let c = gap_check(0.1259, 0.1265, DEFAULT_GAP_TOLERANCE);
        assert!((c.rel_gap - 0.0006 / 0.1265).abs() < 1e-12);
        assert!(c.passed && c.rel_gap < 0.005);
        assert!(!gap_check(0.2, 0.1, DEFAULT_GAP_TOLERANCE).passed);
        assert!(gap_check(0.0, 0.0, DEFAULT_GAP_TOLERANCE).passed);
    }

    #[test]
    fn history_csv() {
        let run = OptimRun {
            best_x: vec![0.0],
            best_f: 1.0,
            history: vec![2.0, 1.0],
            evals: 2,
            seed: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        run.write_history_csv(&p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "iter,best_f\n1,2\n2,1\n"
        );
    }
}
