//! Sequential quadratic programming.
//!
//! Each major iteration solves
//!
//! ```text
//! min ½ dᵀB d + ∇fᵀd + M e + ½ e²
//! s.t. g + J d <= e,  e >= 0,  linear rows and box at x + d
//! ```
//!
//! The elastic `e` keeps the subproblem feasible when the linearisation is
//! not. Steps are accepted on the ℓ1 merit `f + ν Σ max(0, g_i)`, with one
//! second-order correction before backtracking. Linear rows and the box
//! hold at every iterate because both ends of every step satisfy them.

use std::time::Instant;

use super::dense::{dot, Bfgs};
use super::qp::{solve_qp, QpFailure};
use super::{max_violation, Evaluator, NlpProblem, Point, SolveReport, SolverOptions, Termination};
use crate::error::Result;

/// Floor of the elastic weight `M`.
const ELASTIC_WEIGHT: f64 = 1e4;
const ARMIJO: f64 = 1e-4;

struct Step {
    d: Vec<f64>,
    /// Nonlinear multipliers.
    lambda: Vec<f64>,
    /// Multipliers of the one-sided linear pieces.
    mu: Vec<f64>,
}

impl<P: NlpProblem + ?Sized> Evaluator<'_, P> {
    /// QP rows for the linear pieces and the box at `x`, in the variables
    /// `(d, e)` of width `nv`.
    fn polyhedral_rows(&self, x: &[f64], nv: usize, rows: &mut Vec<f64>, rhs: &mut Vec<f64>) {
        let lin = self.p.linear_constraints();
        for piece in &self.pieces {
            let row = &lin[piece.row];
            let start = rows.len();
            rows.resize(start + nv, 0.0);
            for &(j, a) in &row.coefficients {
                rows[start + j] -= piece.sign * a;
            }
            rhs.push(piece.sign * (row.value(x) - piece.rhs));
        }
        for i in 0..self.n {
            if self.lo[i].is_finite() {
                let start = rows.len();
                rows.resize(start + nv, 0.0);
                rows[start + i] = 1.0;
                rhs.push(self.lo[i] - x[i]);
            }
            if self.hi[i].is_finite() {
                let start = rows.len();
                rows.resize(start + nv, 0.0);
                rows[start + i] = -1.0;
                rhs.push(x[i] - self.hi[i]);
            }
        }
    }

    /// Elastic subproblem with nonlinear constants `g0` (`g(x)` for the
    /// plain step, shifted values for a correction).
    fn subproblem(
        &self,
        bfgs: &Bfgs,
        x: &[f64],
        grad: &[f64],
        g0: &[f64],
        jac: &[f64],
        weight: f64,
    ) -> std::result::Result<Step, QpFailure> {
        let n = self.n;
        let nv = n + 1;
        let mut h = vec![0.0; nv * nv];
        for i in 0..n {
            h[i * nv..i * nv + n].copy_from_slice(&bfgs.b[i * n..(i + 1) * n]);
        }
        h[n * nv + n] = 1.0;
        let mut a = grad.to_vec();
        a.push(weight);
        let mut rows = Vec::with_capacity((self.m() + 2 * n + 1) * nv);
        let mut rhs = Vec::with_capacity(self.m() + 2 * n + 1);
        for i in 0..self.m_nl {
            let start = rows.len();
            rows.extend(jac[i * n..(i + 1) * n].iter().map(|v| -v));
            rows.push(1.0);
            debug_assert_eq!(rows.len(), start + nv);
            rhs.push(g0[i]);
        }
        self.polyhedral_rows(x, nv, &mut rows, &mut rhs);
        let start = rows.len();
        rows.resize(start + nv, 0.0);
        rows[start + n] = 1.0;
        rhs.push(0.0);
        let sol = solve_qp(&h, &a, &rows, &rhs)?;
        Ok(Step {
            d: sol.x[..n].to_vec(),
            lambda: sol.multipliers[..self.m_nl].to_vec(),
            mu: sol.multipliers[self.m_nl..self.m_nl + self.pieces.len()].to_vec(),
        })
    }

    /// Moves `x` onto the linear rows and the box (nearest point).
    fn restore_linear(&self, x: &mut [f64]) -> bool {
        let n = self.n;
        let mut c = vec![0.0; self.m()];
        self.linear_values(x, &mut c);
        if max_violation(&c[self.m_nl..]) <= 0.0 {
            return true;
        }
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        self.polyhedral_rows(x, n, &mut rows, &mut rhs);
        match solve_qp(&h, &vec![0.0; n], &rows, &rhs) {
            Ok(sol) => {
                for (xi, di) in x.iter_mut().zip(&sol.x) {
                    *xi += di;
                }
                self.project(x);
                true
            }
            Err(_) => false,
        }
    }

    fn merit(&self, pt: &Point, nu: f64) -> f64 {
        pt.f + nu * pt.c[..self.m_nl].iter().map(|v| v.max(0.0)).sum::<f64>()
    }

    fn stationarity(&self, grad: &[f64], jac: &[f64], lambda: &[f64], mu: &[f64]) -> Vec<f64> {
        let mut w = lambda.to_vec();
        w.extend_from_slice(mu);
        self.combine(grad, jac, &w)
    }
}

pub(super) fn solve<P: NlpProblem + ?Sized>(ev: &Evaluator<P>, x0: Vec<f64>, opts: &SolverOptions) -> Result<SolveReport> {
    let clock = Instant::now();
    let n = ev.n;
    let mut x = x0;
    let linear_ok = ev.restore_linear(&mut x);
    let (mut pt, mut gf, mut jc) = ev.eval_grad(&x)?;
    let initial_scale = gf.iter().fold(1.0f64, |a, g| a.max(g.abs()));
    let mut bfgs = Bfgs::new(n, initial_scale);
    let mut fresh = true;
    let mut nu: f64 = 0.0;
    let mut lambda = vec![0.0; ev.m_nl];
    let mut iterations = 0;
    let mut termination = Termination::IterationLimit;
    let mut kkt = f64::INFINITY;
    if !linear_ok {
        termination = Termination::Stagnation;
    }

    while linear_ok && iterations < opts.max_iterations {
        iterations += 1;
        let weight = ELASTIC_WEIGHT.max(10.0 * lambda.iter().sum::<f64>());
        let step = match ev.subproblem(&bfgs, &pt.x, &gf, &pt.c[..ev.m_nl], &jc, weight) {
            Ok(s) => s,
            Err(_) if !fresh => {
                bfgs = Bfgs::new(n, initial_scale);
                fresh = true;
                continue;
            }
            Err(_) => {
                termination = Termination::Stagnation;
                break;
            }
        };
        let r = ev.stationarity(&gf, &jc, &step.lambda, &step.mu);
        kkt = ev.projected_residual(&pt.x, &r);
        let complementarity = step
            .lambda
            .iter()
            .zip(&pt.c)
            .map(|(l, c)| (l * c).abs())
            .fold(0.0, f64::max);
        let feasible = max_violation(&pt.c) <= opts.feasibility_tol;
        if feasible && kkt <= opts.kkt_tol && complementarity <= opts.kkt_tol.max(opts.feasibility_tol) {
            lambda = step.lambda;
            termination = Termination::Kkt;
            break;
        }

        nu = nu.max(2.0 * step.lambda.iter().fold(0.0f64, |a, &l| a.max(l))).max(1.0);
        let g = &pt.c[..ev.m_nl];
        let violation: f64 = g.iter().map(|v| v.max(0.0)).sum();
        let predicted: f64 = (0..ev.m_nl)
            .map(|i| (g[i] + dot(&jc[i * n..(i + 1) * n], &step.d)).max(0.0))
            .sum();
        let slope = dot(&gf, &step.d) - nu * (violation - predicted);
        let d_norm = step.d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let x_norm = pt.x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if d_norm <= 1e-12 * (1.0 + x_norm) {
            lambda = step.lambda;
            termination = Termination::Stagnation;
            break;
        }
        if !(slope < 0.0) {
            if fresh {
                termination = Termination::Stagnation;
                break;
            }
            bfgs = Bfgs::new(n, initial_scale);
            fresh = true;
            continue;
        }

        let phi0 = ev.merit(&pt, nu);
        let trial_at = |d: &[f64], alpha: f64| -> Result<Point> {
            let mut xt: Vec<f64> = pt.x.iter().zip(d).map(|(x, di)| x + alpha * di).collect();
            ev.project(&mut xt);
            ev.eval(&xt)
        };
        let mut accepted = None;
        let full = trial_at(&step.d, 1.0)?;
        if ev.merit(&full, nu) <= phi0 + ARMIJO * slope {
            accepted = Some(full);
        } else {
            // Second-order correction: re-linearise around the full step.
            let shifted: Vec<f64> = (0..ev.m_nl)
                .map(|i| full.c[i] - dot(&jc[i * n..(i + 1) * n], &step.d))
                .collect();
            if let Ok(corr) = ev.subproblem(&bfgs, &pt.x, &gf, &shifted, &jc, weight) {
                let soc = trial_at(&corr.d, 1.0)?;
                if ev.merit(&soc, nu) <= phi0 + ARMIJO * slope {
                    accepted = Some(soc);
                }
            }
            if accepted.is_none() {
                let mut alpha = 0.5;
                while alpha > 1e-10 {
                    let t = trial_at(&step.d, alpha)?;
                    if ev.merit(&t, nu) <= phi0 + ARMIJO * alpha * slope {
                        accepted = Some(t);
                        break;
                    }
                    alpha *= 0.5;
                }
            }
        }
        let Some(next) = accepted else {
            if fresh {
                lambda = step.lambda;
                termination = Termination::Stagnation;
                break;
            }
            bfgs = Bfgs::new(n, initial_scale);
            fresh = true;
            continue;
        };

        let (new_pt, new_gf, new_jc) = ev.eval_grad(&next.x)?;
        let s: Vec<f64> = new_pt.x.iter().zip(&pt.x).map(|(a, b)| a - b).collect();
        let mut y: Vec<f64> = new_gf.iter().zip(&gf).map(|(a, b)| a - b).collect();
        for (i, &l) in step.lambda.iter().enumerate() {
            if l != 0.0 {
                let (a, b) = (&new_jc[i * n..(i + 1) * n], &jc[i * n..(i + 1) * n]);
                for k in 0..n {
                    y[k] += l * (a[k] - b[k]);
                }
            }
        }
        bfgs.update(&s, &y);
        fresh = false;
        let moved = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let still = moved <= 1e-12 * (1.0 + x_norm) && (new_pt.f - pt.f).abs() <= 1e-14 * pt.f.abs().max(1.0);
        lambda = step.lambda;
        pt = new_pt;
        gf = new_gf;
        jc = new_jc;
        if still {
            termination = Termination::Stagnation;
            break;
        }
    }

    let violation = max_violation(&pt.c);
    Ok(SolveReport {
        objective_value: pt.f,
        max_constraint_violation: violation,
        converged: termination != Termination::IterationLimit && violation <= opts.feasibility_tol,
        termination,
        iterations,
        outer_iterations: iterations,
        kkt_residual: kkt,
        multipliers: lambda,
        start_index: 0,
        wall_time: clock.elapsed().as_secs_f64(),
        solution: pt.x,
    })
}
