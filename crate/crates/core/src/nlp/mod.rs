//! Local solver for smooth inequality-constrained programs
//!
//! ```text
//! min f(x)  s.t.  g_i(x) <= 0,  lo_j <= a_j·x <= hi_j,  l <= x <= u
//! ```
//!
//! Two routes share one problem interface and report type:
//!
//! * [`Method::Sqp`] (default): sequential quadratic programming with a
//!   damped-BFGS Hessian, an elastic dense QP subproblem and an ℓ1 merit
//!   line search. Linear rows and the box hold at every iterate.
//! * [`Method::AugmentedLagrangian`]: PHR multipliers over every
//!   inequality, projected quasi-Newton minimisation on the box.

mod augmented;
mod dense;
pub(crate) mod qp;
mod sqp;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse linear row `lower <= Σ c_j x_j <= upper`. Either side may be
/// infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub coefficients: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
}

impl LinearConstraint {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().map(|&(j, c)| c * x[j]).sum()
    }
}

/// A smooth program. Inequality convention: `g_i(x) <= 0` is feasible.
pub trait NlpProblem: Sync {
    fn dimension(&self) -> usize;

    fn inequality_count(&self) -> usize;

    fn lower_bounds(&self) -> &[f64];

    fn upper_bounds(&self) -> &[f64];

    fn linear_constraints(&self) -> &[LinearConstraint] {
        &[]
    }

    /// Returns `f(x)` and writes `g(x)` into `g`.
    fn evaluate(&self, x: &[f64], g: &mut [f64]) -> f64;

    /// Like [`NlpProblem::evaluate`], also writing `∇f` and the row-major
    /// Jacobian of `g` (`inequality_count × dimension`). The default uses
    /// central differences with step `max(1e-6, 1e-7·|x_i|)`, shortened to
    /// stay inside the box.
    fn evaluate_with_gradients(&self, x: &[f64], g: &mut [f64], grad: &mut [f64], jac: &mut [f64]) -> f64 {
        let f = self.evaluate(x, g);
        let (n, m) = (self.dimension(), self.inequality_count());
        let (lo, hi) = (self.lower_bounds(), self.upper_bounds());
        let mut probe = x.to_vec();
        let mut gp = vec![0.0; m];
        let mut gm = vec![0.0; m];
        for i in 0..n {
            let h = (1e-7 * x[i].abs()).max(1e-6);
            let up = (x[i] + h).min(hi[i]);
            let dn = (x[i] - h).max(lo[i]);
            let width = up - dn;
            if width <= 0.0 {
                grad[i] = 0.0;
                for r in 0..m {
                    jac[r * n + i] = 0.0;
                }
                continue;
            }
            probe[i] = up;
            let fp = self.evaluate(&probe, &mut gp);
            probe[i] = dn;
            let fm = self.evaluate(&probe, &mut gm);
            probe[i] = x[i];
            grad[i] = (fp - fm) / width;
            for r in 0..m {
                jac[r * n + i] = (gp[r] - gm[r]) / width;
            }
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sqp,
    AugmentedLagrangian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub method: Method,
    pub feasibility_tol: f64,
    pub kkt_tol: f64,
    /// SQP major iterations.
    pub max_iterations: usize,
    /// Augmented-Lagrangian outer loops.
    pub max_outer_iterations: usize,
    /// Augmented-Lagrangian inner steps per outer loop.
    pub max_inner_iterations: usize,
    /// Starting augmented-Lagrangian penalty.
    pub initial_penalty: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            method: Method::Sqp,
            feasibility_tol: 1e-6,
            kkt_tol: 1e-6,
            max_iterations: 200,
            max_outer_iterations: 50,
            max_inner_iterations: 500,
            initial_penalty: 10.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = self.feasibility_tol > 0.0 && self.kkt_tol > 0.0 && self.initial_penalty > 0.0;
        if !positive || self.max_iterations == 0 || self.max_outer_iterations == 0 || self.max_inner_iterations == 0 {
            return Err(Error::Config(format!("invalid solver options: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Feasible with projected KKT residual below tolerance.
    Kkt,
    /// Feasible, no further progress possible.
    Stagnation,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub objective_value: f64,
    /// Largest violation over nonlinear and linear constraints.
    pub max_constraint_violation: f64,
    pub converged: bool,
    pub termination: Termination,
    /// SQP major iterations, or augmented-Lagrangian inner steps summed
    /// over all outer loops.
    pub iterations: usize,
    /// Augmented-Lagrangian outer loops (equal to `iterations` for SQP).
    pub outer_iterations: usize,
    pub kkt_residual: f64,
    /// Multipliers of the nonlinear inequalities.
    pub multipliers: Vec<f64>,
    /// Position of the winning start in a multi-start call.
    pub start_index: usize,
    /// Seconds; excluded from determinism comparisons.
    pub wall_time: f64,
}

impl SolveReport {
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max_constraint_violation <= tol
    }

    /// Equality ignoring `wall_time`.
    pub fn same_outcome(&self, other: &SolveReport) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other
    }
}

/// Closure-backed problem, mostly for tests and small scripts.
pub struct FnProblem<'a> {
    pub objective: Box<dyn Fn(&[f64]) -> f64 + Sync + 'a>,
    pub constraints: Vec<Box<dyn Fn(&[f64]) -> f64 + Sync + 'a>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub linear: Vec<LinearConstraint>,
}

impl<'a> FnProblem<'a> {
    pub fn new(objective: impl Fn(&[f64]) -> f64 + Sync + 'a, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        FnProblem {
            objective: Box::new(objective),
            constraints: Vec::new(),
            lower,
            upper,
            linear: Vec::new(),
        }
    }

    pub fn with_constraint(mut self, g: impl Fn(&[f64]) -> f64 + Sync + 'a) -> Self {
        self.constraints.push(Box::new(g));
        self
    }

    pub fn with_linear(mut self, row: LinearConstraint) -> Self {
        self.linear.push(row);
        self
    }
}

impl NlpProblem for FnProblem<'_> {
    fn dimension(&self) -> usize {
        self.lower.len()
    }

    fn inequality_count(&self) -> usize {
        self.constraints.len()
    }

    fn lower_bounds(&self) -> &[f64] {
        &self.lower
    }

    fn upper_bounds(&self) -> &[f64] {
        &self.upper
    }

    fn linear_constraints(&self) -> &[LinearConstraint] {
        &self.linear
    }

    fn evaluate(&self, x: &[f64], g: &mut [f64]) -> f64 {
        for (gi, c) in g.iter_mut().zip(&self.constraints) {
            *gi = c(x);
        }
        (self.objective)(x)
    }
}

/// Linear rows split into one-sided `a·x − b <= 0` (sign-adjusted) pieces.
struct LinearPiece {
    row: usize,
    sign: f64,
    rhs: f64,
}

struct Evaluator<'p, P: NlpProblem + ?Sized> {
    p: &'p P,
    n: usize,
    m_nl: usize,
    pieces: Vec<LinearPiece>,
    lo: &'p [f64],
    hi: &'p [f64],
}

struct Point {
    x: Vec<f64>,
    f: f64,
    /// Nonlinear values followed by linear pieces.
    c: Vec<f64>,
}

impl<'p, P: NlpProblem + ?Sized> Evaluator<'p, P> {
    fn new(p: &'p P) -> Result<Self> {
        let n = p.dimension();
        let (lo, hi) = (p.lower_bounds(), p.upper_bounds());
        if lo.len() != n || hi.len() != n {
            return Err(Error::Solver(format!("bounds have length {}/{} for dimension {n}", lo.len(), hi.len())));
        }
        if let Some(i) = (0..n).find(|&i| !(lo[i] <= hi[i])) {
            return Err(Error::Solver(format!("empty box in coordinate {i}: [{}, {}]", lo[i], hi[i])));
        }
        let mut pieces = Vec::new();
        for (row, lc) in p.linear_constraints().iter().enumerate() {
            if let Some(&(j, _)) = lc.coefficients.iter().find(|(j, _)| *j >= n) {
                return Err(Error::Solver(format!("linear row {row} references variable {j}")));
            }
            if lc.lower.is_finite() {
                pieces.push(LinearPiece { row, sign: -1.0, rhs: lc.lower });
            }
            if lc.upper.is_finite() {
                pieces.push(LinearPiece { row, sign: 1.0, rhs: lc.upper });
            }
        }
        Ok(Evaluator {
            p,
            n,
            m_nl: p.inequality_count(),
            pieces,
            lo,
            hi,
        })
    }

    fn m(&self) -> usize {
        self.m_nl + self.pieces.len()
    }

    fn project(&self, x: &mut [f64]) {
        for i in 0..self.n {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    fn linear_values(&self, x: &[f64], c: &mut [f64]) {
        let rows = self.p.linear_constraints();
        for (k, piece) in self.pieces.iter().enumerate() {
            c[self.m_nl + k] = piece.sign * (rows[piece.row].value(x) - piece.rhs);
        }
    }

    fn check_finite(&self, x: &[f64], f: f64, c: &[f64]) -> Result<()> {
        if f.is_finite() && c.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Solver(format!("non-finite objective or constraint at x = {x:?}")))
        }
    }

    fn eval(&self, x: &[f64]) -> Result<Point> {
        let mut c = vec![0.0; self.m()];
        let f = self.p.evaluate(x, &mut c[..self.m_nl]);
        self.linear_values(x, &mut c);
        self.check_finite(x, f, &c)?;
        Ok(Point { x: x.to_vec(), f, c })
    }

    /// Point plus `∇f` and the nonlinear Jacobian.
    fn eval_grad(&self, x: &[f64]) -> Result<(Point, Vec<f64>, Vec<f64>)> {
        let mut c = vec![0.0; self.m()];
        let mut grad = vec![0.0; self.n];
        let mut jac = vec![0.0; self.m_nl * self.n];
        let f = self.p.evaluate_with_gradients(x, &mut c[..self.m_nl], &mut grad, &mut jac);
        self.linear_values(x, &mut c);
        self.check_finite(x, f, &c)?;
        if !grad.iter().chain(&jac).all(|v| v.is_finite()) {
            return Err(Error::Solver(format!("non-finite gradient at x = {x:?}")));
        }
        Ok((Point { x: x.to_vec(), f, c }, grad, jac))
    }

    /// `∇f + Σ w_i ∇c_i`.
    fn combine(&self, grad_f: &[f64], jac: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = grad_f.to_vec();
        for (r, &wr) in w[..self.m_nl].iter().enumerate() {
            if wr != 0.0 {
                let row = &jac[r * self.n..(r + 1) * self.n];
                for (o, j) in out.iter_mut().zip(row) {
                    *o += wr * j;
                }
            }
        }
        let rows = self.p.linear_constraints();
        for (k, piece) in self.pieces.iter().enumerate() {
            let wk = w[self.m_nl + k];
            if wk != 0.0 {
                for &(j, a) in &rows[piece.row].coefficients {
                    out[j] += wk * piece.sign * a;
                }
            }
        }
        out
    }

    /// `‖x − P(x − d)‖∞`.
    fn projected_residual(&self, x: &[f64], d: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| (x[i] - (x[i] - d[i]).clamp(self.lo[i], self.hi[i])).abs())
            .fold(0.0, f64::max)
    }
}

fn max_violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0, |acc, &v| acc.max(v))
}

/// Solves from one start (projected onto the box first).
pub fn solve<P: NlpProblem + ?Sized>(p: &P, start: &[f64], opts: &SolverOptions) -> Result<SolveReport> {
    opts.validate()?;
    let ev = Evaluator::new(p)?;
    if start.len() != ev.n {
        return Err(Error::Solver(format!("start has length {} for dimension {}", start.len(), ev.n)));
    }
    let mut x0 = start.to_vec();
    ev.project(&mut x0);
    match opts.method {
        Method::Sqp => sqp::solve(&ev, x0, opts),
        Method::AugmentedLagrangian => augmented::solve(&ev, x0, opts),
    }
}

/// Solves from every start and keeps the feasible report with the lowest
/// objective (ties to the lowest start index). When none is feasible, the
/// least-violating report is returned. Starts that error are skipped; the
/// call fails only if every start errors.
pub fn multi_start_solve<P: NlpProblem + ?Sized>(
    p: &P,
    starts: &[Vec<f64>],
    opts: &SolverOptions,
) -> Result<SolveReport> {
    if starts.is_empty() {
        return Err(Error::Solver("multi-start needs at least one start".into()));
    }
    let clock = Instant::now();
    let results: Vec<Result<SolveReport>> = starts.par_iter().map(|s| solve(p, s, opts)).collect();
    let mut best: Option<SolveReport> = None;
    let mut first_err = None;
    for (i, r) in results.into_iter().enumerate() {
        let mut report = match r {
            Ok(r) => r,
            Err(e) => {
                first_err.get_or_insert(e);
                continue;
            }
        };
        report.start_index = i;
        let better = match &best {
            None => true,
            Some(b) => {
                let (fr, fb) = (report.is_feasible(opts.feasibility_tol), b.is_feasible(opts.feasibility_tol));
                match (fr, fb) {
                    (true, false) => true,
                    (false, true) => false,
                    (true, true) => report.objective_value < b.objective_value,
                    (false, false) => report.max_constraint_violation < b.max_constraint_violation,
                }
            }
        };
        if better {
            best = Some(report);
        }
    }
    match best {
        Some(mut b) => {
            b.wall_time = clock.elapsed().as_secs_f64();
            Ok(b)
        }
        None => Err(first_err.expect("at least one start ran")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts() -> SolverOptions {
        SolverOptions::default()
    }

    /// Both routes; every example must hold under each.
    fn routes() -> [SolverOptions; 2] {
        [
            SolverOptions::default(),
            SolverOptions {
                method: Method::AugmentedLagrangian,
                ..SolverOptions::default()
            },
        ]
    }

    #[test]
    fn clipped_quadratic() {
        for o in routes() {
            let p = FnProblem::new(|x| (x[0] - 3.0).powi(2), vec![0.0], vec![10.0]).with_constraint(|x| x[0] - 2.0);
            let r = solve(&p, &[0.0], &o).unwrap();
            assert!(r.converged);
            assert!((r.solution[0] - 2.0).abs() < 1e-5);
            assert!(r.max_constraint_violation <= 1e-6);
        }
    }

    #[test]
    fn disc_constrained_linear() {
        for o in routes() {
            let p = FnProblem::new(|x| x[0] + x[1], vec![-5.0; 2], vec![5.0; 2])
                .with_constraint(|x| x[0] * x[0] + x[1] * x[1] - 1.0);
            let r = solve(&p, &[0.5, 0.2], &o).unwrap();
            let h = std::f64::consts::FRAC_1_SQRT_2;
            assert!(r.converged, "{r:?}");
            assert!((r.solution[0] + h).abs() < 1e-5 && (r.solution[1] + h).abs() < 1e-5);
            assert!((r.objective_value + 2f64.sqrt()).abs() < 1e-5);
            assert!((r.multipliers[0] - h).abs() < 1e-4);
        }
    }

    #[test]
    fn infeasible_problem_reported() {
        for o in routes() {
            let p = FnProblem::new(|x| x[0], vec![0.0], vec![1.0]).with_constraint(|x| x[0] + 1.0);
            let r = solve(&p, &[0.5], &o).unwrap();
            assert!(!r.converged);
            assert!((r.max_constraint_violation - 1.0).abs() < 1e-9);
            assert_eq!(r.solution[0], 0.0);
        }
    }

    #[test]
    fn linear_rows_and_bounds() {
        for o in routes() {
            // min (x-4)² + (y-4)² with x + y <= 3, y >= 0.5 (bound), x - y in [-1, 1]
            let p = FnProblem::new(|x| (x[0] - 4.0).powi(2) + (x[1] - 4.0).powi(2), vec![0.0, 0.5], vec![10.0, 10.0])
                .with_linear(LinearConstraint {
                    coefficients: vec![(0, 1.0), (1, 1.0)],
                    lower: f64::NEG_INFINITY,
                    upper: 3.0,
                })
                .with_linear(LinearConstraint {
                    coefficients: vec![(0, 1.0), (1, -1.0)],
                    lower: -1.0,
                    upper: 1.0,
                });
            let r = solve(&p, &[9.0, 9.0], &o).unwrap();
            assert!(r.converged);
            assert!((r.solution[0] - 1.5).abs() < 1e-5 && (r.solution[1] - 1.5).abs() < 1e-5);
        }
    }

    #[test]
    fn start_outside_box_is_projected() {
        for o in routes() {
            let p = FnProblem::new(|x| x[0] * x[0], vec![1.0], vec![2.0]);
            let r = solve(&p, &[-7.0], &o).unwrap();
            assert_eq!(r.solution[0], 1.0);
            assert!(r.converged);
        }
    }

    #[test]
    fn non_finite_probe_fails() {
        let p = FnProblem::new(|x| if x[0] > 0.5 { f64::NAN } else { -x[0] }, vec![0.0], vec![1.0]);
        let err = solve(&p, &[0.0], &opts()).unwrap_err();
        assert!(matches!(err, Error::Solver(ref s) if s.contains("non-finite")));
    }

    fn two_wells() -> FnProblem<'static> {
        // Wells at -2 (value 1) and +2 (value 0).
        FnProblem::new(
            |x| ((x[0] - 2.0).powi(2) * (x[0] + 2.0).powi(2)) / 4.0 + 0.25 * (2.0 - x[0]),
            vec![-4.0],
            vec![4.0],
        )
    }

    #[test]
    fn multi_start_prefers_lower_well() {
        for o in routes() {
            let p = two_wells();
            let left = solve(&p, &[-3.0], &o).unwrap();
            assert!(left.solution[0] < 0.0);
            let r = multi_start_solve(&p, &[vec![-3.0], vec![3.0]], &o).unwrap();
            assert_eq!(r.start_index, 1);
            assert!(r.solution[0] > 1.5);
            let single = multi_start_solve(&p, &[vec![-3.0]], &o).unwrap();
            assert!(single.same_outcome(&left));
        }
    }

    #[test]
    fn multi_start_all_infeasible() {
        for o in routes() {
            let p = FnProblem::new(|x| x[0], vec![0.0], vec![1.0]).with_constraint(|x| 3.0 - x[0] - x[0] * x[0]);
            let r = multi_start_solve(&p, &[vec![0.0], vec![1.0]], &o).unwrap();
            assert!(!r.converged);
            assert!((r.max_constraint_violation - 1.0).abs() < 1e-6);
            assert!((r.solution[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_reports() {
        for o in routes() {
            let p = FnProblem::new(|x| x[0] + x[1], vec![-5.0; 2], vec![5.0; 2])
                .with_constraint(|x| x[0] * x[0] + x[1] * x[1] - 1.0);
            let starts = vec![vec![0.5, 0.2], vec![-1.0, 3.0], vec![2.0, -2.0]];
            let a = multi_start_solve(&p, &starts, &o).unwrap();
            let b = multi_start_solve(&p, &starts, &o).unwrap();
            assert!(a.same_outcome(&b));
        }
    }

    #[test]
    fn rejects_bad_options() {
        let p = two_wells();
        let bad = SolverOptions {
            kkt_tol: 0.0,
            ..SolverOptions::default()
        };
        assert!(matches!(solve(&p, &[0.0], &bad), Err(Error::Config(_))));
        assert!(multi_start_solve(&p, &[], &opts()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// Projection of a point onto a disc, where the answer is known in
        /// closed form.
        #[test]
        fn both_routes_find_the_disc_projection(
            a in -4.0..4.0f64,
            b in -4.0..4.0f64,
            r in 0.3..3.0f64,
            start in (-5.0..5.0f64, -5.0..5.0f64),
        ) {
            let norm = a.hypot(b);
            let want = if norm <= r { [a, b] } else { [r * a / norm, r * b / norm] };
            for o in routes() {
                let p = FnProblem::new(move |x| (x[0] - a).powi(2) + (x[1] - b).powi(2), vec![-5.0; 2], vec![5.0; 2])
                    .with_constraint(move |x| x[0] * x[0] + x[1] * x[1] - r * r);
                let rep = solve(&p, &[start.0, start.1], &o).unwrap();
                prop_assert!(rep.converged, "{:?}", rep);
                prop_assert!(rep.max_constraint_violation <= o.feasibility_tol);
                for k in 0..2 {
                    prop_assert!((rep.solution[k] - want[k]).abs() < 1e-4, "{:?} vs {:?}", rep.solution, want);
                }
            }
        }
    }
}
