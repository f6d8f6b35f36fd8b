//! Limited-memory quasi-Newton minimization with backtracking line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::model::dot;

/// Backtracking (Armijo) line-search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearch {
    /// Step multiplier applied after each rejected trial.
    pub shrink: f64,
    /// Sufficient-decrease constant.
    pub sufficient_decrease: f64,
    pub max_trials: usize,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self { shrink: 0.5, sufficient_decrease: 1e-4, max_trials: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lbfgs {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Stops once the value improves by at most this fraction of `max(1, |f|)`
    /// over the last `history` iterations. Zero disables the test.
    pub value_tolerance: f64,
    pub history: usize,
    pub line_search: LineSearch,
}

impl Lbfgs {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(arg_err("max_iterations must be at least 1"));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(arg_err("gradient tolerance must be positive"));
        }
        if !(self.value_tolerance >= 0.0 && self.value_tolerance.is_finite()) {
            return Err(arg_err("value tolerance must be finite and nonnegative"));
        }
        if self.history == 0 {
            return Err(arg_err("history size must be at least 1"));
        }
        let ls = &self.line_search;
        if !(ls.shrink > 0.0 && ls.shrink < 1.0) || !(ls.sufficient_decrease > 0.0 && ls.sufficient_decrease < 1.0) {
            return Err(arg_err("line search constants must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Gradient norm at or below the tolerance.
    pub converged: bool,
    /// Stopped because the relative decrease over the last `history` steps fell below the value tolerance.
    pub stalled: bool,
}

impl Lbfgs {
    /// Minimizes `f` from `x0`. `f` writes the gradient into its second argument
    /// and returns the value; an `Err` from `f` at a trial point is treated as a
    /// rejected step, and at `x0` it is returned.
    pub fn minimize<F>(&self, mut f: F, x0: Vec<f64>) -> Result<Minimum>
    where
        F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
    {
        self.validate()?;
        let n = x0.len();
        let mut x = x0;
        let mut g = vec![0.0; n];
        let mut fx = f(&x, &mut g)?;
        let mut evaluations = 1;
        let mut gnorm = dot(&g, &g).sqrt();
        let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(self.history);
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut iterations = 0;
        let mut stalled = false;
        let mut recent: VecDeque<f64> = VecDeque::with_capacity(self.history + 1);
        recent.push_back(fx);

        while iterations < self.max_iterations && gnorm > self.gradient_tolerance {
            let mut dir = two_loop(&g, &memory);
            let mut slope = dot(&g, &dir);
            if !(slope < 0.0) {
                memory.clear();
                dir = g.iter().map(|v| -v).collect();
                slope = -gnorm * gnorm;
            }
            // Without curvature information, scale the first step to unit length.
            let mut step = if memory.is_empty() { 1.0 / gnorm.max(1.0) } else { 1.0 };
            // Accept noise-level value changes when the gradient still shrinks.
            let noise = 1e-14 * (1.0 + fx.abs());
            let mut accepted = None;
            for _ in 0..self.line_search.max_trials {
                for ((xn, xi), di) in x_new.iter_mut().zip(&x).zip(&dir) {
                    *xn = xi + step * di;
                }
                evaluations += 1;
                if let Ok(val) = f(&x_new, &mut g_new) {
                    if val.is_finite() {
                        let armijo = val <= fx + self.line_search.sufficient_decrease * step * slope;
                        let flat = val <= fx + noise && dot(&g_new, &g_new).sqrt() < gnorm;
                        if armijo || flat {
                            accepted = Some(val);
                            break;
                        }
                    }
                }
                step *= self.line_search.shrink;
            }
            let Some(val) = accepted else {
                if memory.is_empty() {
                    break;
                }
                memory.clear();
                continue;
            };
            iterations += 1;
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                if memory.len() == self.history {
                    memory.pop_front();
                }
                memory.push_back((s, y, 1.0 / sy));
            }
            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut g, &mut g_new);
            fx = val;
            gnorm = dot(&g, &g).sqrt();
            recent.push_back(fx);
            if recent.len() > self.history {
                let oldest = recent.pop_front().expect("nonempty");
                if oldest - fx <= self.value_tolerance * fx.abs().max(1.0) {
                    stalled = true;
                    break;
                }
            }
        }

        Ok(Minimum {
            x,
            value: fx,
            grad_norm: gnorm,
            iterations,
            evaluations,
            converged: gnorm <= self.gradient_tolerance,
            stalled,
        })
    }
}

/// Two-loop recursion: returns `−H·g` for the implicit inverse-Hessian estimate.
fn two_loop(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solver() -> Lbfgs {
        Lbfgs { max_iterations: 500, gradient_tolerance: 1e-10, value_tolerance: 0.0, history: 8, line_search: LineSearch::default() }
    }

    #[test]
    fn rosenbrock() {
        let m = solver()
            .minimize(
                |x, g| {
                    let (a, b) = (x[0], x[1]);
                    g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                    g[1] = 200.0 * (b - a * a);
                    Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
                },
                vec![-1.2, 1.0],
            )
            .unwrap();
        assert!(m.converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let scales = [1.0, 1e2, 1e4, 1e6];
        let m = solver()
            .minimize(
                |x, g| {
                    let mut v = 0.0;
                    for i in 0..4 {
                        g[i] = scales[i] * (x[i] - 1.0);
                        v += 0.5 * scales[i] * (x[i] - 1.0).powi(2);
                    }
                    Ok(v)
                },
                vec![0.0; 4],
            )
            .unwrap();
        assert!(m.converged, "{m:?}");
        for xi in m.x {
            assert!((xi - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn iteration_cap_is_reported_not_raised() {
        let mut s = solver();
        s.max_iterations = 2;
        let m = s
            .minimize(
                |x, g| {
                    g[0] = 4.0 * x[0].powi(3);
                    Ok(x[0].powi(4))
                },
                vec![3.0],
            )
            .unwrap();
        assert!(!m.converged);
        assert_eq!(m.iterations, 2);
    }

    #[test]
    fn rejects_bad_config() {
        let mut s = solver();
        s.gradient_tolerance = 0.0;
        assert!(s.minimize(|_, _| Ok(0.0), vec![0.0]).is_err());
    }
}
