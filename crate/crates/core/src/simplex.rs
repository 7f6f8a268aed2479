//! Box-constrained Nelder–Mead used for likelihood maximization.

pub(crate) struct SimplexResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Minimizes `f` starting from `x0`. Trial points are projected onto the
/// box before evaluation and non-finite values count as `+inf`, so the
/// returned value is never worse than `f(x0)`.
pub(crate) fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    step: f64,
    max_evals: usize,
    ftol: f64,
) -> SimplexResult {
    let d = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut start = x0.to_vec();
    project(&mut start, lower, upper);
    let mut simplex = vec![start.clone()];
    for j in 0..d {
        let mut v = start.clone();
        // Step away from the nearer bound so the vertex stays distinct.
        let room_up = upper[j] - v[j];
        let room_down = v[j] - lower[j];
        v[j] += if room_up >= room_down {
            step.min(room_up)
        } else {
            -step.min(room_down)
        };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    while evals < max_evals {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let (best, worst) = (values[0], values[d]);
        if best.is_finite() && (worst - best).abs() <= ftol * (1.0 + best.abs()) {
            break;
        }

        let mut centroid = vec![0.0; d];
        for v in &simplex[..d] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / d as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[d])
                .map(|(c, w)| c + t * (w - c))
                .collect();
            project(&mut p, lower, upper);
            p
        };

        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[d] = xe;
                values[d] = fe;
            } else {
                simplex[d] = xr;
                values[d] = fr;
            }
            continue;
        }
        if fr < values[d - 1] {
            simplex[d] = xr;
            values[d] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[d] {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < values[d].min(fr) {
            simplex[d] = xc;
            values[d] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        for i in 1..=d {
            let p: Vec<f64> = simplex[0]
                .iter()
                .zip(&simplex[i])
                .map(|(b, x)| b + 0.5 * (x - b))
                .collect();
            values[i] = eval(&p, &mut evals);
            simplex[i] = p;
        }
    }

    let best = (0..=d)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    SimplexResult {
        x: simplex[best].clone(),
        f: values[best],
        evals,
    }
}
