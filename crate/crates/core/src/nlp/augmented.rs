//! Augmented-Lagrangian route: PHR multipliers over every inequality
//! (nonlinear and linear), projected quasi-Newton minimisation of the
//! augmented function on the box.

use std::time::Instant;

use super::dense::{cholesky, cholesky_solve, dot, norm, Bfgs};
use super::{max_violation, Evaluator, NlpProblem, Point, SolveReport, SolverOptions, Termination};
use crate::error::Result;

struct Augmented<'a> {
    lambda: &'a [f64],
    rho: f64,
}

impl Augmented<'_> {
    fn value(&self, pt: &Point) -> f64 {
        let pen: f64 = pt
            .c
            .iter()
            .zip(self.lambda)
            .map(|(&c, &l)| {
                let t = (l + self.rho * c).max(0.0);
                (t * t - l * l) / (2.0 * self.rho)
            })
            .sum();
        pt.f + pen
    }

    fn weights(&self, pt: &Point) -> Vec<f64> {
        pt.c.iter()
            .zip(self.lambda)
            .map(|(&c, &l)| (l + self.rho * c).max(0.0))
            .collect()
    }
}

struct InnerResult {
    point: Point,
    grad_f: Vec<f64>,
    jac: Vec<f64>,
    iterations: usize,
}

impl<P: NlpProblem + ?Sized> Evaluator<'_, P> {
    /// `B + ρ Σ ∇c_i ∇c_iᵀ` over pieces whose shifted value is positive.
    fn model_hessian(&self, bfgs: &Bfgs, jac: &[f64], pt: &Point, al: &Augmented) -> Vec<f64> {
        let n = self.n;
        let mut h = bfgs.b.clone();
        for r in 0..self.m_nl {
            if al.lambda[r] + al.rho * pt.c[r] <= 0.0 {
                continue;
            }
            let row = &jac[r * n..(r + 1) * n];
            for i in 0..n {
                let ri = al.rho * row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in 0..n {
                    h[i * n + j] += ri * row[j];
                }
            }
        }
        let rows = self.p.linear_constraints();
        for (k, piece) in self.pieces.iter().enumerate() {
            let r = self.m_nl + k;
            if al.lambda[r] + al.rho * pt.c[r] <= 0.0 {
                continue;
            }
            let coefs = &rows[piece.row].coefficients;
            for &(i, a) in coefs {
                for &(j, b) in coefs {
                    h[i * n + j] += al.rho * a * b;
                }
            }
        }
        h
    }
}

/// Minimises the augmented Lagrangian over the box until the projected
/// gradient drops below `tol`. Projected quasi-Newton: variables held at a
/// bound by the gradient take a scaled gradient step, the rest a Newton
/// step on the model Hessian restricted to them.
fn minimize_inner<P: NlpProblem + ?Sized>(
    ev: &Evaluator<P>,
    start: Point,
    grad_f: Vec<f64>,
    jac: Vec<f64>,
    al: &Augmented,
    bfgs: &mut Bfgs,
    tol: f64,
    opts: &SolverOptions,
) -> Result<InnerResult> {
    let n = ev.n;
    let mut pt = start;
    let mut gf = grad_f;
    let mut jc = jac;
    let mut phi = al.value(&pt);
    let mut grad = ev.combine(&gf, &jc, &al.weights(&pt));
    let mut iterations = 0;
    let mut flat_steps = 0;
    while iterations < opts.max_inner_iterations {
        let resid = ev.projected_residual(&pt.x, &grad);
        if resid <= tol {
            break;
        }
        iterations += 1;
        let eps = resid.min(1e-3);
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = pt.x[i] <= ev.lo[i] + eps && grad[i] > 0.0;
                let at_hi = pt.x[i] >= ev.hi[i] - eps && grad[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let h = ev.model_hessian(bfgs, &jc, &pt, al);
        let mut d: Vec<f64> = (0..n).map(|i| -grad[i] / h[i * n + i].max(1e-12)).collect();
        let nf = free.len();
        if nf > 0 {
            let mut hf = vec![0.0; nf * nf];
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    hf[a * nf + b] = h[i * n + j];
                }
            }
            let mut rhs: Vec<f64> = free.iter().map(|&i| -grad[i]).collect();
            if !cholesky(&mut hf, nf) {
                // Fall back to a diagonal model on the free set.
                for (a, &i) in free.iter().enumerate() {
                    rhs[a] /= h[i * n + i].max(1e-12);
                }
            } else {
                cholesky_solve(&hf, nf, &mut rhs);
            }
            for (a, &i) in free.iter().enumerate() {
                d[i] = rhs[a];
            }
        }

        // Uniform cap of each coordinate's move at a fifth of its box width
        // (or of 1 + |x| when unbounded) guards against a flat model.
        let reach = (0..n)
            .map(|i| {
                let width = ev.hi[i] - ev.lo[i];
                let cap = if width.is_finite() { 0.2 * width } else { 1.0 + pt.x[i].abs() };
                d[i].abs() / cap.max(1e-12)
            })
            .fold(0.0f64, f64::max);
        if reach > 1.0 {
            d.iter_mut().for_each(|v| *v /= reach);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut xt: Vec<f64> = pt.x.iter().zip(&d).map(|(x, di)| x + alpha * di).collect();
            ev.project(&mut xt);
            let step: Vec<f64> = xt.iter().zip(&pt.x).map(|(a, b)| a - b).collect();
            let slope = dot(&grad, &step);
            if step.iter().all(|&s| s == 0.0) {
                break;
            }
            let trial = ev.eval(&xt)?;
            let phi_t = al.value(&trial);
            if slope < 0.0 && phi_t <= phi + 1e-4 * slope {
                accepted = Some((trial, phi_t));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, phi_t)) = accepted else {
            break;
        };
        let (new_pt, new_gf, new_jc) = ev.eval_grad(&trial.x)?;
        let weights = al.weights(&new_pt);
        let new_grad = ev.combine(&new_gf, &new_jc, &weights);
        let s: Vec<f64> = new_pt.x.iter().zip(&pt.x).map(|(a, b)| a - b).collect();
        // Curvature of f + Σ w c with the new weights held fixed; the
        // penalty curvature is added exactly by the model.
        let mut y: Vec<f64> = new_gf.iter().zip(&gf).map(|(a, b)| a - b).collect();
        for r in 0..ev.m_nl {
            if weights[r] != 0.0 {
                let (a, b) = (&new_jc[r * n..(r + 1) * n], &jc[r * n..(r + 1) * n]);
                for i in 0..n {
                    y[i] += weights[r] * (a[i] - b[i]);
                }
            }
        }
        bfgs.update(&s, &y);
        let decrease = phi - phi_t;
        if decrease <= 1e-15 * phi.abs().max(1.0) {
            flat_steps += 1;
        } else {
            flat_steps = 0;
        }
        pt = new_pt;
        gf = new_gf;
        jc = new_jc;
        phi = phi_t;
        grad = new_grad;
        if flat_steps >= 5 {
            break;
        }
    }
    Ok(InnerResult {
        point: pt,
        grad_f: gf,
        jac: jc,
        iterations,
    })
}

pub(super) fn solve<P: NlpProblem + ?Sized>(ev: &Evaluator<P>, x0: Vec<f64>, opts: &SolverOptions) -> Result<SolveReport> {
    let clock = Instant::now();
    let m = ev.m();
    let mut lambda = vec![0.0; m];
    let mut rho = opts.initial_penalty;
    let (mut pt, mut gf, mut jc) = ev.eval_grad(&x0)?;
    let mut prev_v = f64::INFINITY;
    let mut prev_f = pt.f;
    let mut iterations = 0;
    let mut termination = Termination::IterationLimit;
    let mut kkt = f64::INFINITY;
    let mut outer = 0;
    // Inner tolerances shrink from the starting gradient scale so that a
    // badly scaled objective still gets minimised.
    let start_grad = ev.combine(&gf, &jc, &Augmented { lambda: &lambda, rho }.weights(&pt));
    let scale = ev.projected_residual(&pt.x, &start_grad).min(1.0);
    // Until curvature is observed the first step has unit length.
    let mut bfgs = Bfgs::new(ev.n, start_grad.iter().fold(1.0f64, |a, g| a.max(g.abs())));
    while outer < opts.max_outer_iterations {
        outer += 1;
        let tol = opts.kkt_tol.max(scale * 0.1f64.powi(outer as i32));
        let prev_x = pt.x.clone();
        let al = Augmented { lambda: &lambda, rho };
        let inner = minimize_inner(ev, pt, gf, jc, &al, &mut bfgs, tol, opts)?;
        iterations += inner.iterations;
        pt = inner.point;
        gf = inner.grad_f;
        jc = inner.jac;

        let v = pt
            .c
            .iter()
            .zip(&lambda)
            .map(|(&c, &l)| c.max(-l / rho).abs())
            .fold(0.0, f64::max);
        lambda = al.weights(&pt).into_iter().map(|l| l.min(1e12)).collect();
        let lagrangian_grad = ev.combine(&gf, &jc, &lambda);
        kkt = ev.projected_residual(&pt.x, &lagrangian_grad);
        let complementarity = pt
            .c
            .iter()
            .zip(&lambda)
            .map(|(&c, &l)| (l * c).abs())
            .fold(0.0, f64::max);
        let feasible = max_violation(&pt.c) <= opts.feasibility_tol;
        if feasible && kkt <= opts.kkt_tol && complementarity <= opts.kkt_tol.max(opts.feasibility_tol) {
            termination = Termination::Kkt;
            break;
        }
        let step = pt.x.iter().zip(&prev_x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let still = step <= 1e-10 * (1.0 + norm(&pt.x)) && (pt.f - prev_f).abs() <= 1e-12 * pt.f.abs().max(1.0);
        if feasible && still && tol <= opts.kkt_tol {
            termination = Termination::Stagnation;
            break;
        }
        if v > 0.5 * prev_v {
            rho = (rho * 10.0).min(1e12);
        }
        prev_v = v;
        prev_f = pt.f;
    }
    let violation = max_violation(&pt.c);
    Ok(SolveReport {
        objective_value: pt.f,
        max_constraint_violation: violation,
        converged: termination != Termination::IterationLimit && violation <= opts.feasibility_tol,
        termination,
        iterations,
        outer_iterations: outer,
        kkt_residual: kkt,
        multipliers: lambda[..ev.m_nl].to_vec(),
        start_index: 0,
        wall_time: clock.elapsed().as_secs_f64(),
        solution: pt.x,
    })
}
