//! Numeric check of the SAM-ON convergence bound.
//!
//! The iteration perturbs only the block `w_N` (by `rho g_N / |g_N|`) and
//! descends on all coordinates with the gradient taken at the perturbed point.
//! [`run_convergence_check`] compares the averaged squared true gradient norm
//! along the trajectory against
//! `2 (f(w0) - f*) / (h T) + 2 L h M + L^2 rho^2 (1 + L h)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Below this `|g_N|` the ascent is skipped.
pub const ASCENT_GUARD: f64 = 1e-12;
/// Number of shifts in the analytic per-sample noise model.
pub const NOISE_SAMPLES: usize = 16;
const LOGISTIC_N: usize = 64;
const LOGISTIC_D: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFn {
    /// `lambda / 2 * |w|^2` in two dimensions.
    Quadratic { lambda: f64 },
    /// Mean logistic loss on a seeded, non-separable 64-sample problem in three dimensions.
    LogisticToy { seed: u64 },
    /// `sum_i sin(w_i) + w_i^2 / 2` in two dimensions.
    SinQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Noise {
    None,
    PerSample { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub test_fn: TestFn,
    pub h: f64,
    pub rho: f64,
    #[serde(rename = "T")]
    pub t: usize,
    pub noise: Noise,
    pub norm_coords: Vec<usize>,
    /// Starting point; the function's default when absent.
    #[serde(default)]
    pub w0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    #[serde(rename = "M_empirical")]
    pub m_empirical: f64,
    pub ratio: f64,
    pub smoothness: f64,
    pub f0: f64,
    pub f_star: f64,
    pub ascent_skipped: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

/// A function with known smoothness, its minimum and per-sample gradients.
#[derive(Debug, Clone)]
pub struct Problem {
    kind: TestFn,
    data: Option<(Vec<[f64; LOGISTIC_D]>, Vec<f64>)>,
    smoothness: f64,
    f_star: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-z))` without overflow.
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_norm(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Solve `a x = b` for small dense systems by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap_or(c);
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

impl Problem {
    pub fn new(kind: TestFn) -> Result<Self> {
        match kind {
            TestFn::Quadratic { lambda } => {
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return invalid("quadratic lambda must be positive");
                }
                Ok(Self {
                    kind,
                    data: None,
                    smoothness: lambda,
                    f_star: 0.0,
                })
            }
            TestFn::SinQuadratic => {
                // cos x + x = 0
                let mut x = -0.7f64;
                for _ in 0..50 {
                    x -= (x.cos() + x) / (1.0 - x.sin());
                }
                let per = x.sin() + 0.5 * x * x;
                Ok(Self {
                    kind,
                    data: None,
                    smoothness: 2.0,
                    f_star: 2.0 * per,
                })
            }
            TestFn::LogisticToy { seed } => {
                let mut rng = Rng::with_stream(seed, 7);
                let mut xs = Vec::with_capacity(LOGISTIC_N);
                let mut ys = Vec::with_capacity(LOGISTIC_N);
                for i in 0..LOGISTIC_N {
                    let x = [rng.normal(), rng.normal(), 1.0];
                    let clean = if x[0] + 0.5 * x[1] > 0.0 { 1.0 } else { -1.0 };
                    // every fourth label flipped keeps the problem non-separable
                    let y = if i % 4 == 0 { -clean } else { clean };
                    xs.push(x);
                    ys.push(y);
                }
                let mut p = Self {
                    kind,
                    data: Some((xs, ys)),
                    smoothness: 0.0,
                    f_star: 0.0,
                };
                p.smoothness = 0.25 * p.gram_max_eig() / LOGISTIC_N as f64;
                p.f_star = p.value(&p.newton_minimum());
                Ok(p)
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            TestFn::LogisticToy { .. } => LOGISTIC_D,
            _ => 2,
        }
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    pub fn default_start(&self) -> Vec<f64> {
        match self.kind {
            TestFn::Quadratic { .. } => vec![1.0, 0.0],
            TestFn::SinQuadratic => vec![2.0, -1.0],
            TestFn::LogisticToy { .. } => vec![2.0, -2.0, 1.0],
        }
    }

    /// Number of samples a stochastic gradient is drawn from.
    pub fn num_samples(&self) -> usize {
        match &self.data {
            Some((xs, _)) => xs.len(),
            None => NOISE_SAMPLES,
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        match self.kind {
            TestFn::Quadratic { lambda } => 0.5 * lambda * sq_norm(w),
            TestFn::SinQuadratic => w.iter().map(|x| x.sin() + 0.5 * x * x).sum(),
            TestFn::LogisticToy { .. } => {
                let (xs, ys) = self.data.as_ref().expect("logistic data");
                xs.iter().zip(ys).map(|(x, y)| softplus_neg(y * dot(x, w))).sum::<f64>() / xs.len() as f64
            }
        }
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        match self.kind {
            TestFn::Quadratic { lambda } => w.iter().map(|x| lambda * x).collect(),
            TestFn::SinQuadratic => w.iter().map(|x| x.cos() + x).collect(),
            TestFn::LogisticToy { .. } => {
                let n = self.num_samples();
                let mut g = vec![0.0; w.len()];
                for i in 0..n {
                    for (a, b) in g.iter_mut().zip(self.logistic_sample_grad(w, i)) {
                        *a += b / n as f64;
                    }
                }
                g
            }
        }
    }

    fn logistic_sample_grad(&self, w: &[f64], i: usize) -> Vec<f64> {
        let (xs, ys) = self.data.as_ref().expect("logistic data");
        let c = -ys[i] * sigmoid(-ys[i] * dot(&xs[i], w));
        xs[i].iter().map(|x| c * x).collect()
    }

    /// Zero-mean shifts used as per-sample noise for the analytic functions.
    fn shifts(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = Rng::with_stream(seed, 11);
        let d = self.dim();
        let mut s: Vec<Vec<f64>> = (0..NOISE_SAMPLES)
            .map(|_| (0..d).map(|_| 0.1 * rng.normal()).collect())
            .collect();
        for k in 0..d {
            let mean = s.iter().map(|v| v[k]).sum::<f64>() / NOISE_SAMPLES as f64;
            for v in &mut s {
                v[k] -= mean;
            }
        }
        s
    }

    fn sample_grad(&self, w: &[f64], sample: usize, shifts: &[Vec<f64>]) -> Vec<f64> {
        if self.data.is_some() {
            return self.logistic_sample_grad(w, sample);
        }
        self.grad(w).iter().zip(&shifts[sample]).map(|(g, s)| g + s).collect()
    }

    fn gram_max_eig(&self) -> f64 {
        let (xs, _) = self.data.as_ref().expect("logistic data");
        let mut gram = [[0.0; LOGISTIC_D]; LOGISTIC_D];
        for x in xs {
            for i in 0..LOGISTIC_D {
                for j in 0..LOGISTIC_D {
                    gram[i][j] += x[i] * x[j];
                }
            }
        }
        let mut v = vec![1.0; LOGISTIC_D];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mv: Vec<f64> = gram.iter().map(|row| dot(row, &v)).collect();
            lambda = sq_norm(&mv).sqrt();
            v = mv.iter().map(|x| x / lambda).collect();
        }
        lambda
    }

    fn newton_minimum(&self) -> Vec<f64> {
        let (xs, ys) = self.data.as_ref().expect("logistic data");
        let n = xs.len() as f64;
        let mut w = vec![0.0; LOGISTIC_D];
        for _ in 0..100 {
            let g = self.grad(&w);
            if sq_norm(&g).sqrt() < 1e-15 {
                break;
            }
            let mut hess = vec![vec![0.0; LOGISTIC_D]; LOGISTIC_D];
            for (x, y) in xs.iter().zip(ys) {
                let s = sigmoid(y * dot(x, &w));
                let c = s * (1.0 - s) / n;
                for i in 0..LOGISTIC_D {
                    for j in 0..LOGISTIC_D {
                        hess[i][j] += c * x[i] * x[j];
                    }
                }
            }
            let step = solve(hess, g);
            for (a, b) in w.iter_mut().zip(step) {
                *a -= b;
            }
        }
        w
    }
}

/// One recorded iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub w: Vec<f64>,
    pub w_half: Vec<f64>,
    pub ascent_fired: bool,
}

/// Parse `all`, `none`, or a comma-separated index list.
pub fn parse_norm_coords(spec: &str, dim: usize) -> Result<Vec<usize>> {
    let coords: Vec<usize> = match spec.trim() {
        "all" => (0..dim).collect(),
        "none" | "" => Vec::new(),
        list => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| crate::Error::InvalidArgument(format!("bad coordinate index {s:?}")))
            })
            .collect::<Result<_>>()?,
    };
    if let Some(&c) = coords.iter().find(|&&c| c >= dim) {
        return invalid(format!("coordinate {c} out of range for dimension {dim}"));
    }
    Ok(coords)
}

/// Run the iteration and compute the bound.
pub fn run_convergence_check(cfg: &ConvergenceConfig) -> Result<BoundReport> {
    Ok(run_convergence_trace(cfg)?.0)
}

/// [`run_convergence_check`] that also returns every iterate.
pub fn run_convergence_trace(cfg: &ConvergenceConfig) -> Result<(BoundReport, Vec<Iterate>)> {
    let problem = Problem::new(cfg.test_fn)?;
    let l = problem.smoothness();
    if !(cfg.h > 0.0 && cfg.h.is_finite()) {
        return invalid("step size h must be positive");
    }
    // relative slack so h = 1/L computed in floating point is accepted
    if cfg.h * l > 1.0 + 1e-12 {
        return invalid(format!("step size h = {} exceeds 1/L = {}", cfg.h, 1.0 / l));
    }
    if !(cfg.rho >= 0.0 && cfg.rho.is_finite()) {
        return invalid("rho must be finite and >= 0");
    }
    if cfg.t < 1 {
        return invalid("T must be at least 1");
    }
    let dim = problem.dim();
    let mut in_block = vec![false; dim];
    for &c in &cfg.norm_coords {
        if c >= dim {
            return invalid(format!("coordinate {c} out of range for dimension {dim}"));
        }
        in_block[c] = true;
    }
    let mut w = match &cfg.w0 {
        Some(w0) if w0.len() != dim => return invalid(format!("w0 must have {dim} entries")),
        Some(w0) => w0.clone(),
        None => problem.default_start(),
    };

    let (mut rng, shifts) = match cfg.noise {
        Noise::None => (None, Vec::new()),
        Noise::PerSample { seed } => (Some(Rng::new(seed)), problem.shifts(seed)),
    };
    let f0 = problem.value(&w);
    let mut grad_sq_sum = 0.0;
    let mut m_emp = 0.0f64;
    let mut skipped = 0;
    let mut trace = Vec::with_capacity(cfg.t);

    for _ in 0..cfg.t {
        let true_grad = problem.grad(&w);
        grad_sq_sum += sq_norm(&true_grad);
        let sample = rng.as_mut().map(|r| r.below(problem.num_samples()));
        let stochastic = |p: &[f64]| match sample {
            Some(s) => problem.sample_grad(p, s, &shifts),
            None => problem.grad(p),
        };
        m_emp = m_emp.max(match rng {
            Some(_) => (0..problem.num_samples())
                .map(|s| sq_norm(&problem.sample_grad(&w, s, &shifts)))
                .fold(0.0, f64::max),
            None => sq_norm(&true_grad),
        });
        let g = stochastic(&w);
        let block_norm = g
            .iter()
            .zip(&in_block)
            .filter(|(_, &b)| b)
            .map(|(x, _)| x * x)
            .sum::<f64>()
            .sqrt();
        let fired = block_norm >= ASCENT_GUARD && !cfg.norm_coords.is_empty();
        if !fired && !cfg.norm_coords.is_empty() {
            skipped += 1;
        }
        let mut w_half = w.clone();
        if fired {
            for i in 0..dim {
                if in_block[i] {
                    w_half[i] = w[i] + cfg.rho * g[i] / block_norm;
                }
            }
        }
        let g_half = stochastic(&w_half);
        let next: Vec<f64> = w.iter().zip(&g_half).map(|(a, b)| a - cfg.h * b).collect();
        trace.push(Iterate {
            w: std::mem::replace(&mut w, next),
            w_half,
            ascent_fired: fired,
        });
    }

    let t = cfg.t as f64;
    let lhs = grad_sq_sum / t;
    let rhs = 2.0 * (f0 - problem.f_star()) / (cfg.h * t)
        + 2.0 * l * cfg.h * m_emp
        + l * l * cfg.rho * cfg.rho * (1.0 + l * cfg.h);
    Ok((
        BoundReport {
            lhs,
            rhs,
            m_empirical: m_emp,
            ratio: lhs / rhs,
            smoothness: l,
            f0,
            f_star: problem.f_star(),
            ascent_skipped: skipped,
            t: cfg.t,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(h: f64, rho: f64, t: usize, coords: Vec<usize>) -> ConvergenceConfig {
        ConvergenceConfig {
            test_fn: TestFn::Quadratic { lambda: 1.0 },
            h,
            rho,
            t,
            noise: Noise::None,
            norm_coords: coords,
            w0: None,
        }
    }

    #[test]
    fn quadratic_example() {
        let r = run_convergence_check(&quadratic(0.5, 0.1, 10, vec![0, 1])).unwrap();
        // w <- w (1 - h - h rho / |w|) from w = 1
        let mut w: f64 = 1.0;
        let mut sum = 0.0;
        for _ in 0..10 {
            sum += w * w;
            w *= 1.0 - 0.5 - 0.05 / w.abs();
        }
        assert!((r.lhs - sum / 10.0).abs() < 1e-12);
        assert!((r.lhs - 0.124).abs() < 1e-3);
        assert_eq!(r.m_empirical, 1.0);
        assert!((r.rhs - 1.215).abs() < 1e-12);
        assert!((r.ratio - 0.102).abs() < 1e-3);
    }

    #[test]
    fn zero_rho_is_gradient_descent() {
        let r = run_convergence_check(&quadratic(0.5, 0.0, 20, vec![0, 1])).unwrap();
        // w_t = 0.5^t, so |grad|^2 = 0.25^t
        let closed = (1.0 - 0.25f64.powi(20)) / (1.0 - 0.25) / 20.0;
        assert!((r.lhs - closed).abs() < 1e-9);
    }

    #[test]
    fn empty_block_never_ascends() {
        let (r, trace) = run_convergence_trace(&quadratic(0.5, 0.3, 5, vec![])).unwrap();
        assert!(trace.iter().all(|it| !it.ascent_fired && it.w == it.w_half));
        assert_eq!(r.ascent_skipped, 0);
    }

    #[test]
    fn step_size_above_inverse_smoothness_rejected() {
        assert!(run_convergence_check(&quadratic(1.5, 0.1, 5, vec![0])).is_err());
    }

    #[test]
    fn ascent_skipped_at_the_minimum() {
        let mut cfg = quadratic(0.5, 0.1, 3, vec![0, 1]);
        cfg.w0 = Some(vec![0.0, 0.0]);
        let r = run_convergence_check(&cfg).unwrap();
        assert_eq!(r.ascent_skipped, 3);
        assert_eq!(r.lhs, 0.0);
    }

    #[test]
    fn sin_quadratic_minimum() {
        let p = Problem::new(TestFn::SinQuadratic).unwrap();
        let x = -0.739_085_133_215_160_6;
        assert!((p.f_star() - 2.0 * (f64::sin(x) + 0.5 * x * x)).abs() < 1e-14);
    }

    #[test]
    fn logistic_minimum_is_stationary() {
        let p = Problem::new(TestFn::LogisticToy { seed: 3 }).unwrap();
        let w = p.newton_minimum();
        assert!(sq_norm(&p.grad(&w)).sqrt() < 1e-10);
        assert!(p.f_star() < p.value(&p.default_start()));
        assert!(p.smoothness() > 0.0);
    }

    #[test]
    fn analytic_noise_has_zero_mean() {
        let p = Problem::new(TestFn::SinQuadratic).unwrap();
        let s = p.shifts(4);
        for k in 0..2 {
            assert!(s.iter().map(|v| v[k]).sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn coordinate_spec_parsing() {
        assert_eq!(parse_norm_coords("all", 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_norm_coords("none", 3).unwrap(), Vec::<usize>::new());
        assert_eq!(parse_norm_coords("0, 2", 3).unwrap(), vec![0, 2]);
        assert!(parse_norm_coords("3", 3).is_err());
        assert!(parse_norm_coords("x", 3).is_err());
    }
}
