//! Dense strictly convex quadratic programs by the Goldfarb–Idnani dual
//! active-set method:
//!
//! ```text
//! min ½ xᵀG x + aᵀx   s.t.   c_iᵀx >= b_i
//! ```
//!
//! The factorisation keeps `J = L⁻ᵀQ` and an upper-triangular `R` with
//! `QR = L⁻¹N_A` for the active normals `N_A`; adding and dropping a
//! constraint are Givens updates.

use super::dense::cholesky;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct QpSolution {
    pub x: Vec<f64>,
    /// One per constraint, zero when inactive.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum QpFailure {
    NotPositiveDefinite,
    Infeasible,
    IterationLimit,
}

/// `g` is `n × n` row-major, `c` is `m × n` row-major (one constraint per
/// row).
pub(crate) fn solve_qp(g: &[f64], a: &[f64], c: &[f64], b: &[f64]) -> Result<QpSolution, QpFailure> {
    let n = a.len();
    let m = b.len();
    debug_assert_eq!(g.len(), n * n);
    debug_assert_eq!(c.len(), m * n);

    let mut l = g.to_vec();
    if !cholesky(&mut l, n) {
        return Err(QpFailure::NotPositiveDefinite);
    }
    // J = L⁻ᵀ, column-major in spirit: j[i * n + k] is row i, column k.
    let mut j = vec![0.0; n * n];
    for col in 0..n {
        // Solve Lᵀ y = e_col.
        let mut y = vec![0.0; n];
        y[col] = 1.0;
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in i + 1..n {
                v -= l[k * n + i] * y[k];
            }
            y[i] = v / l[i * n + i];
        }
        for i in 0..n {
            j[i * n + col] = y[i];
        }
    }
    // Unconstrained minimiser x = −J Jᵀ a.
    let jta: Vec<f64> = (0..n).map(|k| (0..n).map(|i| j[i * n + k] * a[i]).sum()).collect();
    let mut x: Vec<f64> = (0..n).map(|i| -(0..n).map(|k| j[i * n + k] * jta[k]).sum::<f64>()).collect();

    let norms: Vec<f64> = (0..m)
        .map(|i| c[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300))
        .collect();
    let slack = |x: &[f64], i: usize| -> f64 {
        let row = &c[i * n..(i + 1) * n];
        row.iter().zip(x).map(|(r, v)| r * v).sum::<f64>() - b[i]
    };

    let mut r = vec![0.0; n * n];
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let cap = 10 * (n + m) + 100;
    let mut iterations = 0;

    loop {
        let xnorm = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let mut worst = None;
        let mut worst_val = 0.0;
        for i in 0..m {
            if is_active[i] {
                continue;
            }
            let s = slack(&x, i);
            let tol = 1e-11 * (1.0 + b[i].abs() + norms[i] * xnorm);
            if s < -tol {
                let scaled = s / norms[i];
                if scaled < worst_val {
                    worst_val = scaled;
                    worst = Some(i);
                }
            }
        }
        let Some(p) = worst else {
            let mut multipliers = vec![0.0; m];
            for (&i, &ui) in active.iter().zip(&u) {
                multipliers[i] = ui;
            }
            return Ok(QpSolution { x, multipliers, iterations });
        };
        let np = &c[p * n..(p + 1) * n];
        let mut up = 0.0;
        let mut sp = slack(&x, p);
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(QpFailure::IterationLimit);
            }
            let q = active.len();
            let d: Vec<f64> = (0..n).map(|k| (0..n).map(|i| j[i * n + k] * np[i]).sum()).collect();
            let z: Vec<f64> = (0..n).map(|i| (q..n).map(|k| j[i * n + k] * d[k]).sum()).collect();
            let mut rv = vec![0.0; q];
            for i in (0..q).rev() {
                let mut v = d[i];
                for k in i + 1..q {
                    v -= r[i * n + k] * rv[k];
                }
                rv[i] = v / r[i * n + i];
            }
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, (&rk, &uk)) in rv.iter().zip(&u).enumerate() {
                if rk > 0.0 {
                    let ratio = uk / rk;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(k);
                    }
                }
            }
            let zn: f64 = z.iter().zip(np).map(|(a, b)| a * b).sum();
            let znorm = z.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let t2 = if znorm <= 1e-14 * norms[p] || zn <= 0.0 { f64::INFINITY } else { -sp / zn };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpFailure::Infeasible);
            }
            if t2.is_infinite() {
                for (uk, rk) in u.iter_mut().zip(&rv) {
                    *uk -= t * rk;
                }
                up += t;
                let k = drop.expect("finite t1 has an index");
                drop_constraint(&mut r, &mut j, n, k, &mut active, &mut u, &mut is_active);
                continue;
            }
            for (xi, zi) in x.iter_mut().zip(&z) {
                *xi += t * zi;
            }
            for (uk, rk) in u.iter_mut().zip(&rv) {
                *uk -= t * rk;
            }
            up += t;
            if t == t2 {
                add_constraint(&mut r, &mut j, n, q, d);
                active.push(p);
                u.push(up);
                is_active[p] = true;
                break;
            }
            let k = drop.expect("partial step has an index");
            drop_constraint(&mut r, &mut j, n, k, &mut active, &mut u, &mut is_active);
            sp = slack(&x, p);
            if sp >= 0.0 {
                // Became satisfied along the way; p stays inactive.
                break;
            }
        }
    }
}

/// Rotates `d = Jᵀn_p` so that its tail vanishes and appends it to `R`.
fn add_constraint(r: &mut [f64], j: &mut [f64], n: usize, q: usize, mut d: Vec<f64>) {
    for col in (q + 1..n).rev() {
        let (a, b) = (d[col - 1], d[col]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (cs, sn) = (a / h, b / h);
        d[col - 1] = h;
        d[col] = 0.0;
        for i in 0..n {
            let (x, y) = (j[i * n + col - 1], j[i * n + col]);
            j[i * n + col - 1] = cs * x + sn * y;
            j[i * n + col] = -sn * x + cs * y;
        }
    }
    for i in 0..=q {
        r[i * n + q] = d[i];
    }
}

fn drop_constraint(
    r: &mut [f64],
    j: &mut [f64],
    n: usize,
    k: usize,
    active: &mut Vec<usize>,
    u: &mut Vec<f64>,
    is_active: &mut [bool],
) {
    let q = active.len();
    // Shift columns k+1..q of R one to the left.
    for col in k..q - 1 {
        for i in 0..q {
            r[i * n + col] = r[i * n + col + 1];
        }
    }
    for i in 0..q {
        r[i * n + q - 1] = 0.0;
    }
    // Restore triangularity: zero the subdiagonal entries left behind.
    for col in k..q - 1 {
        let (a, b) = (r[col * n + col], r[(col + 1) * n + col]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (cs, sn) = (a / h, b / h);
        for l in col..q - 1 {
            let (x, y) = (r[col * n + l], r[(col + 1) * n + l]);
            r[col * n + l] = cs * x + sn * y;
            r[(col + 1) * n + l] = -sn * x + cs * y;
        }
        r[(col + 1) * n + col] = 0.0;
        for i in 0..n {
            let (x, y) = (j[i * n + col], j[i * n + col + 1]);
            j[i * n + col] = cs * x + sn * y;
            j[i * n + col + 1] = -sn * x + cs * y;
        }
    }
    for i in 0..n {
        r[i * n + q - 1] = 0.0;
    }
    is_active[active[k]] = false;
    active.remove(k);
    u.remove(k);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Gaussian elimination with partial pivoting; `None` when singular.
    fn linear_solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &k| a[i * n + col].abs().total_cmp(&a[k * n + col].abs()))?;
            if a[piv * n + col].abs() < 1e-12 {
                return None;
            }
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
            for i in col + 1..n {
                let f = a[i * n + col] / a[col * n + col];
                for k in col..n {
                    a[i * n + k] -= f * a[col * n + k];
                }
                b[i] -= f * b[col];
            }
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| a[i * n + k] * b[k]).sum();
            b[i] = (b[i] - s) / a[i * n + i];
        }
        Some(b)
    }

    /// Tries every active set and keeps the KKT point.
    fn enumerate(g: &[f64], a: &[f64], c: &[f64], b: &[f64]) -> Option<Vec<f64>> {
        let n = a.len();
        let m = b.len();
        for mask in 0u32..(1 << m) {
            let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if set.len() > n {
                continue;
            }
            let k = n + set.len();
            let mut mat = vec![0.0; k * k];
            let mut rhs = vec![0.0; k];
            for i in 0..n {
                for j in 0..n {
                    mat[i * k + j] = g[i * n + j];
                }
                rhs[i] = -a[i];
            }
            for (s, &row) in set.iter().enumerate() {
                for j in 0..n {
                    mat[j * k + n + s] = -c[row * n + j];
                    mat[(n + s) * k + j] = c[row * n + j];
                }
                rhs[n + s] = b[row];
            }
            let Some(sol) = linear_solve(mat, rhs) else { continue };
            let x = &sol[..n];
            let dual_ok = sol[n..].iter().all(|&u| u >= -1e-9);
            let primal_ok = (0..m).all(|i| dot_row(c, n, i, x) - b[i] >= -1e-9);
            if dual_ok && primal_ok {
                return Some(x.to_vec());
            }
        }
        None
    }

    fn dot_row(c: &[f64], n: usize, i: usize, x: &[f64]) -> f64 {
        c[i * n..(i + 1) * n].iter().zip(x).map(|(r, v)| r * v).sum()
    }

    fn objective(g: &[f64], a: &[f64], x: &[f64]) -> f64 {
        let n = a.len();
        let mut v = 0.0;
        for i in 0..n {
            v += a[i] * x[i];
            for j in 0..n {
                v += 0.5 * x[i] * g[i * n + j] * x[j];
            }
        }
        v
    }

    #[test]
    fn box_constrained_by_hand() {
        // min ½‖x‖² − 2x₀ − 2x₁, x₀ <= 1, x₁ >= 3.
        let g = [1.0, 0.0, 0.0, 1.0];
        let a = [-2.0, -2.0];
        let c = [-1.0, 0.0, 0.0, 1.0];
        let b = [-1.0, 3.0];
        let s = solve_qp(&g, &a, &c, &b).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 3.0).abs() < 1e-12);
        assert!((s.multipliers[0] - 1.0).abs() < 1e-12);
        assert!((s.multipliers[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasibility_and_indefiniteness() {
        let g = [1.0, 0.0, 0.0, 1.0];
        let c = [1.0, 0.0, -1.0, 0.0];
        let b = [1.0, 0.0];
        assert_eq!(solve_qp(&g, &[0.0, 0.0], &c, &b), Err(QpFailure::Infeasible));
        let bad = [1.0, 0.0, 0.0, -1.0];
        assert_eq!(solve_qp(&bad, &[0.0, 0.0], &c, &[0.0, -1.0]), Err(QpFailure::NotPositiveDefinite));
    }

    #[test]
    fn duplicate_rows_are_harmless() {
        let g = [2.0, 0.0, 0.0, 2.0];
        let c = [1.0, 1.0, 1.0, 1.0, 2.0, 2.0];
        let b = [1.0, 1.0, 2.0];
        let s = solve_qp(&g, &[0.0, 0.0], &c, &b).unwrap();
        assert!((s.x[0] - 0.5).abs() < 1e-12 && (s.x[1] - 0.5).abs() < 1e-12);
    }

    fn random_qp() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..5, 1usize..7).prop_flat_map(|(n, m)| {
            (
                Just(n),
                prop::collection::vec(-2.0f64..2.0, n * n),
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(-2.0f64..2.0, m * n),
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(0.0f64..2.0, m),
            )
                .prop_map(|(n, mm, a, c, x0, gap)| {
                    let mut g = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            g[i * n + j] = (0..n).map(|k| mm[k * n + i] * mm[k * n + j]).sum::<f64>();
                        }
                        g[i * n + i] += 0.5;
                    }
                    // Feasible by construction: x0 satisfies every row.
                    let b: Vec<f64> = (0..gap.len()).map(|i| dot_row(&c, n, i, &x0) - gap[i]).collect();
                    (n, g, a, c, b)
                })
        })
    }

    proptest! {
        #[test]
        fn matches_active_set_enumeration((n, g, a, c, b) in random_qp()) {
            let s = solve_qp(&g, &a, &c, &b).unwrap();
            let oracle = enumerate(&g, &a, &c, &b).expect("feasible strictly convex QP has a KKT point");
            let scale = 1.0 + oracle.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for k in 0..n {
                prop_assert!((s.x[k] - oracle[k]).abs() <= 1e-7 * scale, "{:?} vs {:?}", s.x, oracle);
            }
            let fo = objective(&g, &a, &oracle);
            prop_assert!((objective(&g, &a, &s.x) - fo).abs() <= 1e-8 * (1.0 + fo.abs()));
            // Stationarity with the reported multipliers.
            for k in 0..n {
                let grad: f64 = a[k] + (0..n).map(|j| g[k * n + j] * s.x[j]).sum::<f64>();
                let pull: f64 = (0..b.len()).map(|i| s.multipliers[i] * c[i * n + k]).sum();
                prop_assert!((grad - pull).abs() <= 1e-7 * scale);
            }
            prop_assert!(s.multipliers.iter().all(|&u| u >= 0.0));
        }
    }
}
