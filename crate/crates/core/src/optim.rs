//! Box-constrained limited-memory quasi-Newton minimizer (projected L-BFGS).
//!
//! Each iteration fixes the variables sitting on a bound whose gradient
//! points outward, builds an L-BFGS direction on the remaining free
//! variables, and backtracks along the projected path
//! `x(a) = P(x + a d)` until the Armijo condition holds.

use std::collections::VecDeque;

use crate::error::{domain, Result};

/// Objective with gradient.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> f64;
    fn value_and_gradient(&mut self, x: &[f64]) -> (f64, Vec<f64>);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return domain("bound vectors differ in length");
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return domain("every lower bound must be <= its upper bound");
        }
        Ok(Bounds { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((xi, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(*l, *u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((xi, l), u)| xi >= l && xi <= u)
    }
}

#[derive(Clone, Debug)]
pub struct OptimConfig {
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when `(f_k - f_{k+1}) <= f_tol * max(|f_k|, |f_{k+1}|)`.
    pub f_tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            grad_tol: 1e-8,
            f_tol: 1e-8,
            max_iter: 500,
            memory: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum OptimStatus {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    /// No descent could be found along the projected path.
    LineSearchStalled,
}

impl OptimStatus {
    pub fn converged(self) -> bool {
        matches!(self, OptimStatus::GradientTolerance | OptimStatus::FunctionTolerance)
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: OptimStatus,
    /// Objective value after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

fn projected_gradient(x: &[f64], g: &[f64], b: &Bounds) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(b.lower.iter().zip(&b.upper))
        .map(|((&xi, &gi), (&l, &u))| {
            if (xi <= l && gi > 0.0) || (xi >= u && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Minimize `f` over the box starting from `x0` (projected into the box).
pub fn minimize<O: Objective>(f: &mut O, x0: &[f64], bounds: &Bounds, cfg: &OptimConfig) -> Result<OptimResult> {
    let n = x0.len();
    if bounds.lower.len() != n {
        return domain("bounds and starting point differ in dimension");
    }
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut g) = f.value_and_gradient(&x);
    let mut evaluations = 1;
    let mut history = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut status = OptimStatus::MaxIterations;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        let pg = projected_gradient(&x, &g, bounds);
        if inf_norm(&pg) <= cfg.grad_tol {
            status = OptimStatus::GradientTolerance;
            break;
        }
        let free: Vec<bool> = pg.iter().zip(&g).map(|(p, gi)| *p != 0.0 || *gi == 0.0).collect();

        // two-loop recursion on the free subspace
        let mut q: Vec<f64> = g.iter().zip(&free).map(|(gi, &fr)| if fr { *gi } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * masked_dot(s, &q, &free);
            for i in 0..n {
                if free[i] {
                    q[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let yy = masked_dot(y, y, &free);
            let sy = masked_dot(s, y, &free);
            if yy > 0.0 && sy > 0.0 {
                let gamma = sy / yy;
                q.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * masked_dot(y, &q, &free);
            for i in 0..n {
                if free[i] {
                    q[i] += (a - b) * s[i];
                }
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&d, &g) >= 0.0 || d.iter().any(|v| !v.is_finite()) {
            d = pg.iter().map(|v| -v).collect();
            pairs.clear();
        }

        let mut step = if pairs.is_empty() {
            (1.0 / inf_norm(&d).max(1e-300)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            bounds.project(&mut trial);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &moved);
            if decrease >= 0.0 {
                step *= 0.5;
                continue;
            }
            let ft = f.value(&trial);
            evaluations += 1;
            if ft.is_finite() && ft <= fx + 1e-4 * decrease {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, _)) = accepted else {
            if pairs.is_empty() {
                status = OptimStatus::LineSearchStalled;
                break;
            }
            // retry from steepest descent with a fresh memory
            pairs.clear();
            continue;
        };
        let (f_new, g_new) = f.value_and_gradient(&x_new);
        evaluations += 1;
        iterations += 1;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let f_old = fx;
        x = x_new;
        fx = f_new;
        g = g_new;
        history.push(fx);
        if f_old - fx <= cfg.f_tol * f_old.abs().max(fx.abs()) {
            status = OptimStatus::FunctionTolerance;
            break;
        }
    }
    Ok(OptimResult {
        x,
        value: fx,
        iterations,
        evaluations,
        status,
        history,
    })
}

fn masked_dot(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((x, y), _)| x * y)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn value(&mut self, x: &[f64]) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }
        fn value_and_gradient(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
            let g0 = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            let g1 = 200.0 * (x[1] - x[0] * x[0]);
            (self.value(x), vec![g0, g1])
        }
    }

    struct Quadratic(Vec<f64>);

    impl Objective for Quadratic {
        fn value(&mut self, x: &[f64]) -> f64 {
            x.iter().zip(&self.0).enumerate().map(|(i, (a, c))| (i + 1) as f64 * (a - c).powi(2)).sum()
        }
        fn value_and_gradient(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
            let g = x.iter().zip(&self.0).enumerate().map(|(i, (a, c))| 2.0 * (i + 1) as f64 * (a - c)).collect();
            (self.value(x), g)
        }
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let cfg = OptimConfig { f_tol: 0.0, grad_tol: 1e-9, max_iter: 1000, ..Default::default() };
        let r = minimize(&mut Rosenbrock, &[-1.2, 1.0], &Bounds::unbounded(2), &cfg).unwrap();
        assert_eq!(r.status, OptimStatus::GradientTolerance);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn active_bounds() {
        let b = Bounds::new(vec![-1.0, 0.5, -10.0], vec![1.0, 2.0, 0.0]).unwrap();
        let cfg = OptimConfig { f_tol: 0.0, ..Default::default() };
        let r = minimize(&mut Quadratic(vec![3.0, 0.0, -2.0]), &[0.0, 1.0, -1.0], &b, &cfg).unwrap();
        assert!(r.status.converged());
        assert!((r.x[0] - 1.0).abs() < 1e-12);
        assert!((r.x[1] - 0.5).abs() < 1e-12);
        assert!((r.x[2] + 2.0).abs() < 1e-8);
        assert!(b.contains(&r.x));
    }

    #[test]
    fn bounded_rosenbrock_hits_the_wall() {
        let b = Bounds::new(vec![-2.0, -2.0], vec![0.5, 2.0]).unwrap();
        let cfg = OptimConfig { f_tol: 0.0, grad_tol: 1e-9, max_iter: 1000, ..Default::default() };
        let r = minimize(&mut Rosenbrock, &[-1.2, 1.0], &b, &cfg).unwrap();
        assert!((r.x[0] - 0.5).abs() < 1e-9);
        assert!((r.x[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn bad_bounds() {
        assert!(Bounds::new(vec![1.0], vec![0.0]).is_err());
        assert!(Bounds::new(vec![1.0], vec![0.0, 1.0]).is_err());
    }
}
