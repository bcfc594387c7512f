//! Sparse multivariate polynomials with small integer exponents, used to
//! expand the dynamics and the clearance variable symbolically.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Poly<const N: usize> {
    terms: BTreeMap<[u8; N], f64>,
}

impl<const N: usize> Poly<N> {
    pub fn zero() -> Self {
        Poly {
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Poly::zero();
        if c != 0.0 {
            p.terms.insert([0; N], c);
        }
        p
    }

    pub fn var(i: usize) -> Self {
        let mut e = [0u8; N];
        e[i] = 1;
        let mut p = Poly::zero();
        p.terms.insert(e, 1.0);
        p
    }

    pub fn add_term(&mut self, exps: [u8; N], coeff: f64) {
        let slot = self.terms.entry(exps).or_insert(0.0);
        *slot += coeff;
        if *slot == 0.0 {
            self.terms.remove(&exps);
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(*e, *c);
        }
        out
    }

    pub fn scale(&self, k: f64) -> Self {
        let mut out = Poly::zero();
        for (e, c) in &self.terms {
            out.add_term(*e, c * k);
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Poly::zero();
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let mut e = [0u8; N];
                for i in 0..N {
                    e[i] = ea[i] + eb[i];
                }
                out.add_term(e, ca * cb);
            }
        }
        out
    }

    pub fn pow(&self, n: u32) -> Self {
        let mut out = Poly::constant(1.0);
        for _ in 0..n {
            out = out.mul(self);
        }
        out
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u8; N], &f64)> {
        self.terms.iter()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }
}
