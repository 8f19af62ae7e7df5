//! Classical baselines: proximal gradient descent with a non-negativity or
//! isotropic total-variation prior.

use std::fmt::Write as _;
use std::time::Instant;

use crate::acoustic::{AcousticOperator, SensorData};
use crate::error::{Error, Result};
use crate::grids::ScalarField;
use crate::metrics::unbiased_rel_error;

pub const DEFAULT_TV_INNER_ITERS: usize = 20;

/// Logarithmic sweep used to pick the best TV weight on a validation sample.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..7).map(|i| 10f64.powf(-5.0 + 0.5 * i as f64)).collect()
}

pub fn prox_nonneg(v: &ScalarField) -> ScalarField {
    v.map(|x| x.max(0.0))
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

/// Forward differences with a replicated edge, one component per axis,
/// stored axis-major: `out[axis * n + voxel]`.
fn gradient(x: &[f64], dims: &[usize], out: &mut [f64]) {
    let n = x.len();
    let st = strides(dims);
    for (axis, (&d, &s)) in dims.iter().zip(&st).enumerate() {
        let g = &mut out[axis * n..(axis + 1) * n];
        for (i, gi) in g.iter_mut().enumerate() {
            let pos = (i / s) % d;
            *gi = if pos + 1 < d { x[i + s] - x[i] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`gradient`].
fn divergence(p: &[f64], dims: &[usize], out: &mut [f64]) {
    let n = out.len();
    let st = strides(dims);
    out.iter_mut().for_each(|v| *v = 0.0);
    for (axis, (&d, &s)) in dims.iter().zip(&st).enumerate() {
        let q = &p[axis * n..(axis + 1) * n];
        for (i, o) in out.iter_mut().enumerate() {
            let pos = (i / s) % d;
            let here = if pos + 1 < d { q[i] } else { 0.0 };
            let before = if pos > 0 { q[i - s] } else { 0.0 };
            *o += here - before;
        }
    }
}

/// Isotropic total variation `sum |grad x|`.
pub fn total_variation(x: &ScalarField) -> f64 {
    let n = x.len();
    let dims = x.dims();
    let mut g = vec![0.0; n * dims.len()];
    gradient(x.data(), dims, &mut g);
    (0..n)
        .map(|i| {
            (0..dims.len())
                .map(|a| g[a * n + i] * g[a * n + i])
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

/// Dual variable of the TV denoiser, kept between calls for warm starts.
#[derive(Debug, Clone, PartialEq)]
pub struct TvDual {
    p: Vec<f64>,
}

impl TvDual {
    pub fn zeros(field: &ScalarField) -> Self {
        Self {
            p: vec![0.0; field.len() * field.ndim()],
        }
    }
}

/// Approximate `argmin_x TV(x) + ||x - v||^2 / (2 alpha)` by projected
/// gradient on the dual (Chambolle, with Nesterov momentum), starting
/// from zero.
pub fn prox_tv(v: &ScalarField, alpha: f64, inner_iters: usize) -> Result<ScalarField> {
    let mut dual = TvDual::zeros(v);
    prox_tv_warm(v, alpha, inner_iters, &mut dual)
}

/// As [`prox_tv`], continuing from (and updating) `dual`.
pub fn prox_tv_warm(
    v: &ScalarField,
    alpha: f64,
    inner_iters: usize,
    dual: &mut TvDual,
) -> Result<ScalarField> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("TV weight must be >= 0, got {alpha}")));
    }
    if dual.p.len() != v.len() * v.ndim() {
        return Err(Error::shape("TV dual variable does not match the image"));
    }
    if alpha == 0.0 {
        return Ok(v.clone());
    }
    let n = v.len();
    let dims = v.dims().to_vec();
    let ndim = dims.len();
    let tau = 1.0 / (4.0 * ndim as f64);
    let mut div = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut g = vec![0.0; n * ndim];
    // accelerated projected gradient on the dual, restarted momentum
    let p = &mut dual.p;
    let mut r = p.clone();
    let mut prev = p.clone();
    let mut t = 1.0f64;
    for _ in 0..inner_iters {
        divergence(&r, &dims, &mut div);
        for i in 0..n {
            w[i] = div[i] - v.data()[i] / alpha;
        }
        gradient(&w, &dims, &mut g);
        prev.copy_from_slice(p);
        for i in 0..n {
            let mut mag = 0.0;
            for a in 0..ndim {
                let q = r[a * n + i] + tau * g[a * n + i];
                p[a * n + i] = q;
                mag += q * q;
            }
            let mag = mag.sqrt();
            if mag > 1.0 {
                for a in 0..ndim {
                    p[a * n + i] /= mag;
                }
            }
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        for ((ri, &pi), &qi) in r.iter_mut().zip(p.iter()).zip(&prev) {
            *ri = pi + beta * (pi - qi);
        }
        t = t_next;
    }
    divergence(p, &dims, &mut div);
    Ok(v.with_data(
        v.data()
            .iter()
            .zip(&div)
            .map(|(x, d)| x - alpha * d)
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prior {
    NonNegative,
    TotalVariation { inner_iters: usize },
}

impl Prior {
    pub fn name(&self) -> &'static str {
        match self {
            Prior::NonNegative => "nnls",
            Prior::TotalVariation { .. } => "tv",
        }
    }

    /// `lambda * R(x)`; the non-negativity indicator contributes zero on
    /// feasible points.
    fn penalty(&self, lambda: f64, x: &ScalarField) -> f64 {
        match self {
            Prior::NonNegative => 0.0,
            Prior::TotalVariation { .. } => lambda * total_variation(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub lambda: f64,
    pub step: f64,
    pub iterations: usize,
    /// Evaluate the objective after every step; costs one extra forward
    /// application at the end.
    pub record_objective: bool,
}

/// Per-iteration record; entry `k` describes the iterate after step `k + 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverTrace {
    pub objective: Vec<f64>,
    pub err: Vec<f64>,
    pub seconds: Vec<f64>,
}

pub const TRACE_CSV_HEADER: &str = "iteration,objective,err,seconds";

impl SolverTrace {
    pub fn len(&self) -> usize {
        self.seconds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seconds.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRACE_CSV_HEADER}\n");
        for k in 0..self.len() {
            let obj = self.objective.get(k).copied().unwrap_or(f64::NAN);
            let err = self.err.get(k).copied().unwrap_or(f64::NAN);
            let _ = writeln!(out, "{},{:.12e},{:.12e},{:.6}", k + 1, obj, err, self.seconds[k]);
        }
        out
    }
}

/// `x <- prox_{lambda * step}(x - step * A*(Ax - y))` with a constant step.
/// Each step costs one forward and one adjoint application.
pub fn proximal_gradient(
    op: &AcousticOperator,
    y: &SensorData,
    prior: Prior,
    settings: &SolverSettings,
    x_init: &ScalarField,
    x_true: Option<&ScalarField>,
) -> Result<(ScalarField, SolverTrace)> {
    if !(settings.step > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {}", settings.step)));
    }
    if settings.lambda < 0.0 {
        return Err(Error::invalid("regularization weight must be >= 0"));
    }
    let mut x = x_init.clone();
    let mut trace = SolverTrace::default();
    let mut dual = TvDual::zeros(x_init);
    let started = Instant::now();
    for k in 0..settings.iterations {
        let residual = op.forward(&x)?.sub(y);
        if settings.record_objective && k > 0 {
            let fit = 0.5 * residual.norm().powi(2);
            trace.objective.push(fit + prior.penalty(settings.lambda, &x));
        }
        let grad = op.adjoint(&residual)?;
        let v = x.add_scaled(-settings.step, &grad);
        x = match prior {
            Prior::NonNegative => prox_nonneg(&v),
            Prior::TotalVariation { inner_iters } => {
                prox_tv_warm(&v, settings.lambda * settings.step, inner_iters, &mut dual)?
            }
        };
        if let Some(t) = x_true {
            trace.err.push(unbiased_rel_error(&x, t)?.err);
        }
        trace.seconds.push(started.elapsed().as_secs_f64());
    }
    if settings.record_objective && settings.iterations > 0 {
        let fit = op.data_fit(&x, y)?;
        trace.objective.push(fit + prior.penalty(settings.lambda, &x));
    }
    Ok((x, trace))
}

/// Objective `1/2 ||Ax - y||^2 + lambda R(x)` at one point.
pub fn objective(
    op: &AcousticOperator,
    y: &SensorData,
    prior: Prior,
    lambda: f64,
    x: &ScalarField,
) -> Result<f64> {
    Ok(op.data_fit(x, y)? + prior.penalty(lambda, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::{default_dt, default_padding, estimate_lipschitz, AcousticGeometry};
    use crate::grids::SeededRng;
    use crate::phantom::PhantomSpec;

    fn field(dims: &[usize], data: Vec<f64>) -> ScalarField {
        ScalarField::new(dims.to_vec(), vec![1.0; dims.len()], data).unwrap()
    }

    #[test]
    fn prox_nonneg_clamps() {
        let v = field(&[3], vec![-1.0, 0.0, 2.0]);
        let p = prox_nonneg(&v);
        assert_eq!(p.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(prox_nonneg(&p), p);
    }

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let mut rng = SeededRng::new(5);
        let dims = [5, 7];
        let x = rng.gaussian_vec(35);
        let p = rng.gaussian_vec(70);
        let mut g = vec![0.0; 70];
        let mut d = vec![0.0; 35];
        gradient(&x, &dims, &mut g);
        divergence(&p, &dims, &mut d);
        let lhs: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&d).map(|(a, b)| a * b).sum();
        assert!((lhs + rhs).abs() < 1e-12);
    }

    #[test]
    fn prox_tv_trivial_cases() {
        let mut rng = SeededRng::new(1);
        let v = field(&[6, 6], rng.gaussian_vec(36));
        assert_eq!(prox_tv(&v, 0.0, 20).unwrap(), v);
        let c = field(&[6, 6], vec![0.3; 36]);
        let p = prox_tv(&c, 0.7, 20).unwrap();
        assert!(p.data().iter().all(|x| (x - 0.3).abs() < 1e-14));
        assert!(prox_tv(&v, -1.0, 20).is_err());
    }

    #[test]
    fn prox_tv_matches_brute_force_on_step() {
        let v = field(&[8], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let alpha = 0.5;
        let p = prox_tv(&v, alpha, 5000).unwrap();
        // monotone two-level candidates with the jump at the step
        let obj = |a: f64, b: f64| {
            (b - a).abs()
                + (4.0 * a * a + 4.0 * (b - 1.0) * (b - 1.0)) / (2.0 * alpha)
        };
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=1000 {
            for j in 0..=1000 {
                let (a, b) = (i as f64 / 1000.0, j as f64 / 1000.0);
                let o = obj(a, b);
                if o < best.0 {
                    best = (o, a, b);
                }
            }
        }
        for (i, x) in p.data().iter().enumerate() {
            let want = if i < 4 { best.1 } else { best.2 };
            assert!((x - want).abs() <= 1e-3, "{i}: {x} vs {want}");
        }
    }

    #[test]
    fn prox_tv_is_nonexpansive() {
        let mut rng = SeededRng::new(8);
        for _ in 0..20 {
            let a = field(&[12, 12], rng.gaussian_vec(144));
            let b = field(&[12, 12], rng.gaussian_vec(144));
            let alpha = rng.uniform(0.05, 1.0);
            let pa = prox_tv(&a, alpha, 20).unwrap();
            let pb = prox_tv(&b, alpha, 20).unwrap();
            assert!(pa.add_scaled(-1.0, &pb).norm() <= a.add_scaled(-1.0, &b).norm() + 1e-12);
        }
    }

    fn small_problem(seed: u64) -> (AcousticOperator, SensorData, ScalarField, f64) {
        let dims = [32, 32];
        let dx = 1e-4;
        let dt = default_dt(&dims, dx, 1500.0, 48);
        let g = AcousticGeometry::new(&dims, dx, 1500.0, 48, dt, 2, &default_padding(2)).unwrap();
        let op = AcousticOperator::new(g);
        let x = PhantomSpec::tubes(seed).generate(&dims, &[dx, dx]).unwrap();
        let y = op.forward(&x).unwrap();
        let l = estimate_lipschitz(&op, 30, &mut SeededRng::new(seed)).unwrap().value;
        (op, y, x, l)
    }

    #[test]
    fn nnls_objective_strictly_decreases() {
        let (op, y, x_true, l) = small_problem(3);
        let x0 = op.adjoint(&y).unwrap();
        let settings = SolverSettings {
            lambda: 0.0,
            step: 1.0 / l,
            iterations: 20,
            record_objective: true,
        };
        let (x, trace) =
            proximal_gradient(&op, &y, Prior::NonNegative, &settings, &x0, Some(&x_true)).unwrap();
        assert_eq!(trace.objective.len(), 20);
        assert_eq!(trace.err.len(), 20);
        assert!(x.min() >= 0.0);
        let mut last = op.data_fit(&x0, &y).unwrap();
        for &j in &trace.objective {
            assert!(j < last);
            last = j;
        }
    }

    #[test]
    fn zero_iterations_return_the_start() {
        let (op, y, _, l) = small_problem(1);
        let x0 = op.adjoint(&y).unwrap();
        let settings = SolverSettings {
            lambda: 0.0,
            step: 1.0 / l,
            iterations: 0,
            record_objective: true,
        };
        let (x, trace) = proximal_gradient(&op, &y, Prior::NonNegative, &settings, &x0, None).unwrap();
        assert_eq!(x, x0);
        assert!(trace.is_empty());
    }

    #[test]
    fn operator_count_is_two_per_step() {
        let (op, y, _, l) = small_problem(2);
        op.reset_applications();
        let x0 = op.adjoint(&y).unwrap();
        let settings = SolverSettings {
            lambda: 1e-3,
            step: 1.0 / l,
            iterations: 5,
            record_objective: false,
        };
        proximal_gradient(&op, &y, Prior::TotalVariation { inner_iters: 20 }, &settings, &x0, None)
            .unwrap();
        assert_eq!(op.applications(), 11);
    }

    #[test]
    fn heavy_tv_flattens_the_image() {
        let (op, y, _, l) = small_problem(4);
        let x0 = op.adjoint(&y).unwrap();
        let range = x0.max() - x0.min();
        let step = 1.0 / l;
        let settings = SolverSettings {
            lambda: 1e3 * range / step,
            step,
            iterations: 3,
            record_objective: false,
        };
        let (x, _) = proximal_gradient(
            &op,
            &y,
            Prior::TotalVariation { inner_iters: 200 },
            &settings,
            &x0,
            None,
        )
        .unwrap();
        assert!(total_variation(&x) <= 0.01 * total_variation(&x0));
    }

    #[test]
    fn trace_csv_layout() {
        let t = SolverTrace {
            objective: vec![2.0, 1.0],
            err: vec![0.5, 0.4],
            seconds: vec![0.1, 0.2],
        };
        let csv = t.to_csv();
        assert!(csv.starts_with(TRACE_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }
}
