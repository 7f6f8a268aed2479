//! Acceptance suite: one PASS/FAIL line per criterion at its stated
//! tolerance and runtime budget. All criteria run (sequentially, so the
//! timings are not distorted by each other) and the test fails if any did.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use tidecal::doe::{self, ErrorTable};
use tidecal::kriging::{self, KrigingConfig, SurrogateSet};
use tidecal::metrics::{self, Aggregate, NashVariant};
use tidecal::optimize::{
    self, build_objective, dominates, nondominated_sort, Backend, GradientConfig, Nsga2Config,
    Objective, ObjectiveSpec, OptimRun, ParetoFront, PsoConfig,
};
use tidecal::sobol::{self, rank_parameters};
use tidecal::workbench::{Algo, CalibrateOptions, Project};
use tidecal::{derive_seed, ForwardModel, ParameterBounds, Scenario, TimeSeries};

const MASTER: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// The default scenario carried from observations to a fitted surrogate
/// set, with the workbench's derived seeds.
struct Pipeline {
    model: ForwardModel,
    obs: Vec<TimeSeries>,
    bounds: ParameterBounds,
    table: ErrorTable,
    set: SurrogateSet,
}

impl Pipeline {
    fn build(scenario: &Scenario) -> Pipeline {
        let model = ForwardModel::new(scenario.estuary(), scenario.grid().unwrap()).unwrap();
        let obs = model
            .synthesize_observations(
                &scenario.truth,
                scenario.noise_sigma,
                derive_seed(MASTER, "synth-obs"),
            )
            .unwrap();
        let bounds = scenario.bounds().unwrap();
        let n = doe::default_design_size(bounds.dim()).unwrap();
        let design = doe::lhs_sample(n, &bounds, derive_seed(MASTER, "design")).unwrap();
        let table = doe::evaluate_design(&design, &model, &obs).unwrap();
        let config = KrigingConfig {
            seed: derive_seed(MASTER, "fit"),
            ..Default::default()
        };
        let set = SurrogateSet::fit(&table, &config).unwrap();
        Pipeline {
            model,
            obs,
            bounds,
            table,
            set,
        }
    }

    fn surrogate(&self, spec: ObjectiveSpec) -> optimize::BuiltObjective<'_> {
        build_objective(
            spec,
            Backend::Surrogate {
                rmse: &self.set,
                bias: None,
                nash: None,
            },
        )
        .unwrap()
    }

    fn forward(&self, spec: ObjectiveSpec) -> optimize::BuiltObjective<'_> {
        let backend = Backend::Forward {
            model: &self.model,
            observations: &self.obs,
            nash: NashVariant::default(),
        };
        build_objective(spec, backend).unwrap()
    }

    /// PSO and 10-start projected BFGS on a surrogate goal.
    fn calibrate(&self, spec: ObjectiveSpec) -> (OptimRun, OptimRun) {
        let f = self.surrogate(spec);
        let pso = PsoConfig {
            seed: derive_seed(MASTER, &format!("calibrate:{spec}:pso")),
            ..Default::default()
        };
        let grad = GradientConfig {
            seed: derive_seed(MASTER, &format!("calibrate:{spec}:grad")),
            ..Default::default()
        };
        (
            optimize::pso_minimize(&f, &self.bounds, &pso).unwrap(),
            optimize::multistart_gradient(&f, &self.bounds, 10, &[], &grad).unwrap(),
        )
    }
}

fn best_of(runs: &(OptimRun, OptimRun)) -> &OptimRun {
    if runs.1.best_f < runs.0.best_f {
        &runs.1
    } else {
        &runs.0
    }
}

fn nonincreasing(h: &[f64]) -> bool {
    h.windows(2).all(|w| w[1] <= w[0])
}

fn strata_exact(points: &[Vec<f64>], bounds: &ParameterBounds) -> bool {
    let n = points.len();
    (0..bounds.dim()).all(|j| {
        let mut seen = vec![false; n];
        points.iter().all(|p| {
            let k = (((p[j] - bounds.lower()[j]) / bounds.width(j)) * n as f64).floor() as usize;
            let k = k.min(n - 1);
            !std::mem::replace(&mut seen[k], true)
        })
    })
}

fn c1_lhs() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ok = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..=200);
        let d = rng.random_range(1..=12);
        let seed: u64 = rng.random();
        let lower: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
        let upper: Vec<f64> = lower
            .iter()
            .map(|l| l + rng.random_range(0.1..20.0))
            .collect();
        let bounds = ParameterBounds::new(lower, upper).unwrap();
        let design = doe::lhs_sample(n, &bounds, seed).unwrap();
        if design.len() == n && strata_exact(&design.points, &bounds) {
            ok += 1;
        }
    }
    let default_n = doe::default_design_size(9).unwrap();
    outcome(
        ok == 50 && default_n == 90,
        format!("{ok}/50 designs exact, default size for d=9 is {default_n}"),
    )
}

fn c2_interpolation(p: &Pipeline) -> Outcome {
    let mut worst_rel = 0.0f64;
    let mut worst_var_ratio = 0.0f64;
    for (k, m) in p.set.models.iter().enumerate() {
        let y = p.table.column(k);
        let ymax = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (x, yi) in p.table.design.points.iter().zip(&y) {
            let pred = m.predict(x);
            worst_rel = worst_rel.max((pred.mean - yi).abs() / ymax);
            worst_var_ratio =
                worst_var_ratio.max(pred.variance / (10.0 * m.nugget() * m.process_variance()));
        }
    }
    outcome(
        worst_rel <= 1e-6 && worst_var_ratio <= 1.0,
        format!("max |error|/max|y| = {worst_rel:.2e}, max variance / (10 nugget sigma2) = {worst_var_ratio:.3}"),
    )
}

fn c3_validation(p: &Pipeline) -> Outcome {
    let test_design = doe::lhs_sample(10, &p.bounds, derive_seed(MASTER, "validate")).unwrap();
    let test = doe::evaluate_design(&test_design, &p.model, &p.obs).unwrap();
    let predicted: Vec<f64> = test
        .design
        .points
        .iter()
        .map(|x| p.set.predict_aggregate(x, Aggregate::Mean))
        .collect();
    let actual: Vec<f64> = test
        .responses
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    let r = kriging::validation_report(&predicted, &actual).unwrap();
    let r2 = r.r2.unwrap_or(f64::NAN);
    outcome(
        r2 >= 0.99 && r.mse <= 1e-4,
        format!("R2 = {r2:.5}, MSE = {:.3e} m2", r.mse),
    )
}

fn c4_sobol_oracle() -> Outcome {
    let (a, b) = (7.0, 0.1);
    let ishigami = |x: &[f64]| x[0].sin() + a * x[1].sin().powi(2) + b * x[2].powi(4) * x[0].sin();
    let v1 = 0.5 * (1.0 + b * PI.powi(4) / 5.0).powi(2);
    let v2 = a * a / 8.0;
    let v13 = 8.0 * b * b * PI.powi(8) / 225.0;
    let v = v1 + v2 + v13;
    let expect_first = [v1 / v, v2 / v, 0.0];
    let expect_t3 = v13 / v;
    let cube = ParameterBounds::new(vec![-PI; 3], vec![PI; 3]).unwrap();
    let r = sobol::sobol_indices(ishigami, &cube, 1 << 14, 11, false).unwrap();
    let first_err = (0..3)
        .map(|i| (r.first[i] - expect_first[i]).abs())
        .fold(0.0, f64::max);
    let t3_err = (r.total[2] - expect_t3).abs();
    let unit = ParameterBounds::unit(2).unwrap();
    let lin = sobol::sobol_indices(|x| x[0] + 2.0 * x[1], &unit, 1 << 14, 12, false).unwrap();
    let lin_err = (lin.first[0] - 0.2).abs().max((lin.first[1] - 0.8).abs());
    outcome(
        first_err <= 0.05 && t3_err <= 0.05 && lin_err <= 0.02,
        format!(
            "Ishigami S = [{:.4}, {:.4}, {:.4}] (max err {first_err:.4}), ST3 = {:.4} (err {t3_err:.4}); linear max err {lin_err:.4}",
            r.first[0], r.first[1], r.first[2], r.total[2]
        ),
    )
}

fn c5_sensitivity(p: &Pipeline) -> Outcome {
    let sur = p.surrogate(ObjectiveSpec::MeanRmse);
    let fwd = p.forward(ObjectiveSpec::MeanRmse);
    let seed = derive_seed(MASTER, "sobol");
    let s = sobol::sobol_indices(|x| sur.eval(x).unwrap(), &p.bounds, 4096, seed, false).unwrap();
    let f = sobol::try_sobol_indices(|x| fwd.eval(x), &p.bounds, 4096, seed, false).unwrap();
    let ranking = rank_parameters(&s, 0.05);
    let sig = |name: &str| ranking.significant.iter().any(|r| r.name == name);
    let max_diff = s
        .first
        .iter()
        .zip(&f.first)
        .chain(s.total.iter().zip(&f.total))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let names: Vec<&str> = ranking
        .significant
        .iter()
        .map(|r| r.name.as_str())
        .collect();
    outcome(
        sig("alpha") && sig("gamma") && !sig("beta") && max_diff <= 0.1,
        format!("significant {names:?}; max |surrogate - forward| index difference {max_diff:.4}"),
    )
}

fn c6_agreement(runs: &(OptimRun, OptimRun)) -> Outcome {
    let (pso, grad) = runs;
    let rel = (pso.best_f - grad.best_f).abs() / pso.best_f.abs().max(grad.best_f.abs());
    let mono = nonincreasing(&pso.history) && nonincreasing(&grad.history);
    outcome(
        rel <= 1e-3 && mono,
        format!(
            "PSO {:.6}, BFGS {:.6}, relative gap {rel:.2e}, histories nonincreasing: {mono}",
            pso.best_f, grad.best_f
        ),
    )
}

fn c7_trust_gate(p: &Pipeline, runs: &(OptimRun, OptimRun)) -> Outcome {
    let x = &best_of(runs).best_x;
    let sur = p.surrogate(ObjectiveSpec::MeanRmse);
    let fwd = p.forward(ObjectiveSpec::MeanRmse);
    let c = optimize::validate_optimum(x, &p.bounds, &sur, &fwd, optimize::DEFAULT_GAP_TOLERANCE)
        .unwrap();
    outcome(
        c.passed,
        format!(
            "surrogate {:.6} m, forward {:.6} m, rel_gap {:.4} (limit 0.01)",
            c.f_hat, c.f_true, c.rel_gap
        ),
    )
}

fn c8_recovery() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (sigma, limit) in [(0.02, 1.1 * 0.02), (0.0, 1e-3)] {
        let mut s = Scenario::default_gironde_analog();
        s.noise_sigma = sigma;
        let p = Pipeline::build(&s);
        let runs = p.calibrate(ObjectiveSpec::MeanRmse);
        let x = &best_of(&runs).best_x;
        let achieved = p.forward(ObjectiveSpec::MeanRmse).eval(x).unwrap();
        pass &= achieved <= limit;
        details.push(format!(
            "sigma {sigma}: forward mean RMSE {achieved:.5} m (limit {limit:.4}), surrogate {:.5} m",
            best_of(&runs).best_f
        ));
    }
    outcome(pass, details.join("; "))
}

fn c9_station_calibration(p: &Pipeline, runs: &(OptimRun, OptimRun)) -> Outcome {
    let x_mean = &best_of(runs).best_x;
    let mut pass = true;
    let mut gains = Vec::new();
    for id in &p.set.station_ids {
        let f = p.surrogate(ObjectiveSpec::StationRmse(*id));
        let cfg = GradientConfig {
            seed: derive_seed(MASTER, &format!("calibrate:station:{id}:grad")),
            ..Default::default()
        };
        let r =
            optimize::multistart_gradient(&f, &p.bounds, 10, std::slice::from_ref(x_mean), &cfg)
                .unwrap();
        let shared = f.eval(x_mean).unwrap();
        pass &= r.best_f <= shared + 1e-9;
        gains.push(format!("{id}: {:.4}<={:.4}", r.best_f, shared));
    }
    outcome(pass, gains.join(", "))
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

fn pairwise_nondominated(front: &ParetoFront) -> bool {
    front.points.iter().enumerate().all(|(i, a)| {
        front.points.iter().enumerate().all(|(j, b)| {
            let weak = a.f.iter().zip(&b.f).all(|(x, y)| x <= y);
            let strict = a.f.iter().zip(&b.f).any(|(x, y)| x < y);
            i == j || !(weak && strict)
        })
    })
}

fn c10_nsga2() -> Outcome {
    let zdt1 = |x: &[f64]| {
        let g = 1.0 + 9.0 * x[1..].iter().sum::<f64>() / 9.0;
        (x[0], g * (1.0 - (x[0] / g).sqrt()))
    };
    let f1 = |x: &[f64]| zdt1(x).0;
    let f2 = |x: &[f64]| zdt1(x).1;
    let objs: [&dyn Objective; 2] = [&f1, &f2];
    let cfg = Nsga2Config {
        pop: 100,
        gens: 150,
        seed: derive_seed(MASTER, "zdt1"),
        ..Default::default()
    };
    let front = optimize::nsga2(
        &objs,
        &["f1".into(), "f2".into()],
        &ParameterBounds::unit(10).unwrap(),
        &cfg,
    )
    .unwrap();
    let mean_dist = front
        .points
        .iter()
        .map(|p| {
            (0..=20000)
                .map(|k| {
                    let a = k as f64 / 20000.0;
                    ((p.f[0] - a).powi(2) + (p.f[1] - (1.0 - a.sqrt())).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / front.points.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut sort_ok = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(2..=3);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| f64::from(rng.random_range(0u8..8)))
                    .collect()
            })
            .collect();
        if nondominated_sort(&pts).unwrap() == brute_fronts(&pts) {
            sort_ok += 1;
        }
    }
    let nd = pairwise_nondominated(&front);
    outcome(
        mean_dist <= 0.05 && nd && sort_ok == 100,
        format!("ZDT1 mean distance {mean_dist:.4} over {} points, nondominated: {nd}, sort oracle {sort_ok}/100", front.points.len()),
    )
}

fn c11_tradeoffs(p: &Pipeline) -> Outcome {
    let pairs = [
        (ObjectiveSpec::StationRmse(4), ObjectiveSpec::StationRmse(3)),
        (ObjectiveSpec::MaxRmse, ObjectiveSpec::MeanRmse),
        (ObjectiveSpec::StdRmse, ObjectiveSpec::MeanRmse),
    ];
    let mut pass = true;
    let mut details = Vec::new();
    for (a, b) in pairs {
        let (fa, fb) = (p.surrogate(a), p.surrogate(b));
        let label = format!("{a},{b}");
        let cfg = Nsga2Config {
            seed: derive_seed(MASTER, &format!("pareto:{label}")),
            ..Default::default()
        };
        let front = optimize::nsga2(
            &[&fa, &fb],
            &[a.to_string(), b.to_string()],
            &p.bounds,
            &cfg,
        )
        .unwrap();
        let grad = GradientConfig {
            seed: derive_seed(MASTER, &format!("single:{label}")),
            ..Default::default()
        };
        let xa = optimize::multistart_gradient(&fa, &p.bounds, 10, &[], &grad)
            .unwrap()
            .best_x;
        let xb = optimize::multistart_gradient(&fb, &p.bounds, 10, &[], &grad)
            .unwrap()
            .best_x;
        let (a_min, b_min) = (fa.eval(&xa).unwrap(), fb.eval(&xb).unwrap());
        let differ = (fa.eval(&xb).unwrap() - a_min)
            .abs()
            .max((fb.eval(&xa).unwrap() - b_min).abs())
            > 1e-3;
        // The 1e-3 gap decides whether the optima are distinct; a point
        // "minimizes" an objective when it is within 1e-6 of its optimum.
        let both = front
            .points
            .iter()
            .any(|q| q.f[0] <= a_min + 1e-6 && q.f[1] <= b_min + 1e-6);
        let span = |k: usize| {
            let v = front.points.iter().map(|q| q.f[k]);
            (
                v.clone().fold(f64::INFINITY, f64::min),
                v.fold(f64::NEG_INFINITY, f64::max),
            )
        };
        let ((a_lo, a_hi), (b_lo, b_hi)) = (span(0), span(1));
        let ok = front.points.len() >= 10 && pairwise_nondominated(&front) && !(differ && both);
        pass &= ok;
        details.push(format!(
            "({label}) {} points spanning [{a_lo:.5}, {a_hi:.5}] x [{b_lo:.5}, {b_hi:.5}], optima {a_min:.5}/{b_min:.5} differ: {differ}, a point minimizes both: {both}",
            front.points.len()
        ));
    }
    outcome(pass, details.join("; "))
}

fn c12_metrics() -> Outcome {
    let (sim, obs) = ([1.0, 2.0, 3.0], [0.0, 2.0, 4.0]);
    let nv = NashVariant::default();
    let checks = [
        (metrics::rmse(&sim, &obs).unwrap(), (2.0f64 / 3.0).sqrt()),
        (metrics::rmse(&[1.5, 2.5], &[1.0, 2.0]).unwrap(), 0.5),
        (metrics::rmse(&obs, &obs).unwrap(), 0.0),
        (metrics::bias(&[3.0, 3.0], &[1.0, 1.0]).unwrap(), 2.0),
        (metrics::bias(&sim, &obs).unwrap(), 0.0),
        (metrics::bias(&obs, &obs).unwrap(), 0.0),
        (metrics::nash(&sim, &obs, nv).unwrap(), 0.0),
        (metrics::nash(&obs, &obs, nv).unwrap(), 1.0),
    ];
    let fixed_err = checks
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let degenerate = metrics::nash(&[2.0, 2.0, 2.0], &obs, nv).is_err();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ordered = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let o: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        if metrics::rmse(&s, &o).unwrap() + 1e-12 >= metrics::bias(&s, &o).unwrap().abs() {
            ordered += 1;
        }
    }
    outcome(
        fixed_err <= 1e-12 && degenerate && ordered == 1000,
        format!("fixed-case max error {fixed_err:.1e}, degenerate Nash rejected: {degenerate}, rmse >= |bias| in {ordered}/1000"),
    )
}

fn full_pipeline(dir: &std::path::Path, workers: usize) {
    let mut p = Project::init(dir, None, Some(MASTER)).unwrap();
    p.set_workers(Some(workers)).unwrap();
    p.synth_obs().unwrap();
    p.design(None).unwrap();
    p.evaluate().unwrap();
    p.fit(Default::default(), Default::default()).unwrap();
    p.validate(10).unwrap();
    p.sobol(4096, false).unwrap();
    p.pca().unwrap();
    p.stats().unwrap();
    p.calibrate(&CalibrateOptions::new(ObjectiveSpec::MeanRmse, Algo::Both))
        .unwrap();
    p.pareto(
        &[ObjectiveSpec::StationRmse(4), ObjectiveSpec::StationRmse(3)],
        &Nsga2Config::default(),
    )
    .unwrap();
    p.check_optimum(optimize::DEFAULT_GAP_TOLERANCE).unwrap();
    p.report().unwrap();
}

fn c13_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_pipeline(a.path(), 1);
    full_pipeline(b.path(), 3);
    let mut compared = 0;
    let mut differing = Vec::new();
    let manifest = Project::open(a.path()).unwrap().manifest().files.clone();
    for rel in manifest
        .keys()
        .filter(|k| k.ends_with(".csv") || k.ends_with(".json"))
    {
        compared += 1;
        if std::fs::read(a.path().join(rel)).unwrap() != std::fs::read(b.path().join(rel)).unwrap()
        {
            differing.push(rel.clone());
        }
    }
    let same_manifest = Project::open(b.path()).unwrap().manifest().files == manifest;
    outcome(
        differing.is_empty() && same_manifest && compared > 20,
        format!("1 vs 3 workers: {compared} artifacts compared, differing: {differing:?}"),
    )
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut record = |id: usize, name: &str, budget: Duration, run: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let o = run();
        let elapsed = t0.elapsed();
        let pass = o.pass && elapsed <= budget;
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "[{verdict}] {id:>2} {name}: {} ({:.1} s, budget {} s)",
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    };
    let secs = Duration::from_secs;

    record(1, "LHS exactness", secs(5), &mut c1_lhs);
    let mut pipeline = None;
    record(2, "kriging interpolation", secs(30), &mut || {
        let p = Pipeline::build(&Scenario::default_gironde_analog());
        let o = c2_interpolation(&p);
        pipeline = Some(p);
        o
    });
    let p = pipeline.expect("pipeline built");
    record(3, "held-out validation", secs(60), &mut || {
        c3_validation(&p)
    });
    record(4, "Sobol oracles", secs(30), &mut c4_sobol_oracle);
    record(5, "sensitivity ranking", secs(300), &mut || {
        c5_sensitivity(&p)
    });
    let mut runs = None;
    record(6, "optimizer agreement", secs(120), &mut || {
        let r = p.calibrate(ObjectiveSpec::MeanRmse);
        let o = c6_agreement(&r);
        runs = Some(r);
        o
    });
    let runs = runs.expect("calibration ran");
    record(7, "metamodel trust gate", secs(30), &mut || {
        c7_trust_gate(&p, &runs)
    });
    record(8, "calibration recovery", secs(300), &mut c8_recovery);
    record(9, "per-station calibration", secs(600), &mut || {
        c9_station_calibration(&p, &runs)
    });
    record(10, "NSGA-II oracles", secs(120), &mut c10_nsga2);
    record(11, "two-objective trade-offs", secs(300), &mut || {
        c11_tradeoffs(&p)
    });
    record(12, "metric oracles", secs(5), &mut c12_metrics);
    record(13, "pipeline determinism", secs(600), &mut c13_determinism);

    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
