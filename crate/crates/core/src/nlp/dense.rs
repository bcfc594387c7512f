//! Small dense linear algebra shared by the solver routes.

/// Dense damped-BFGS model of the Lagrangian Hessian.
pub(super) struct Bfgs {
    n: usize,
    pub(super) b: Vec<f64>,
    updated: bool,
}

impl Bfgs {
    pub(super) fn new(n: usize, diagonal: f64) -> Self {
        let mut b = vec![0.0; n * n];
        for i in 0..n {
            b[i * n + i] = diagonal;
        }
        Bfgs { n, b, updated: false }
    }

    /// Powell-damped update keeping the model positive definite.
    pub(super) fn update(&mut self, s: &[f64], y: &[f64]) {
        let n = self.n;
        let ss = dot(s, s);
        if ss == 0.0 {
            return;
        }
        if !self.updated {
            let sy = dot(s, y);
            let yy = dot(y, y);
            if sy <= 0.0 || yy == 0.0 {
                return;
            }
            let gamma = yy / sy;
            self.b.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                self.b[i * n + i] = gamma;
            }
            self.updated = true;
        }
        let bs: Vec<f64> = (0..n).map(|i| dot(&self.b[i * n..(i + 1) * n], s)).collect();
        let sbs = dot(s, &bs);
        if !(sbs > 0.0) {
            return;
        }
        let sy = dot(s, y);
        let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
        let r: Vec<f64> = y.iter().zip(&bs).map(|(yi, bi)| theta * yi + (1.0 - theta) * bi).collect();
        let sr = dot(s, &r);
        if !(sr > 0.0) {
            return;
        }
        for i in 0..n {
            for j in 0..n {
                self.b[i * n + j] += r[i] * r[j] / sr - bs[i] * bs[j] / sbs;
            }
        }
    }
}

/// In-place Cholesky of a dense SPD matrix; returns false if not SPD.
pub(super) fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    true
}

pub(super) fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * n + k] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= l[k * n + i] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
}

pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(super) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
