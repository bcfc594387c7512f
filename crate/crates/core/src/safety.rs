//! Moment-based safety bound for the pairwise clearance variable
//! `f = ‖p_A − p_B‖² − d_min²`.
//!
//! `E[f]` and `E[f²]` factor across the two (independent) agents, so for a
//! fixed partner `B` both are affine in the moment vector of `A`. The
//! planner relies on that: [`ClearanceFunctional`] freezes `B` once per
//! horizon step and exposes the weights as constraint gradients.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::moments::{MomentBasis, MomentVector, BASIS_LEN};
use crate::poly::Poly;

/// Guard below which `E[f]²` is treated as zero.
pub const MEAN_SQUARED_FLOOR: f64 = 1e-12;

/// First two moments of the clearance variable for one pair at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearanceMoments {
    pub e_f: f64,
    pub e_f2: f64,
    pub pair: (u32, u32),
    pub time_step: i64,
}

impl ClearanceMoments {
    pub fn new(e_f: f64, e_f2: f64) -> Self {
        ClearanceMoments {
            e_f,
            e_f2,
            pair: (0, 0),
            time_step: 0,
        }
    }

    pub fn variance(&self) -> f64 {
        self.e_f2 - self.e_f * self.e_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyEvalResult {
    /// Upper bound on `P(f <= 0)`; `+∞` when undefined.
    pub bound: f64,
    pub condition_mean_nonneg: bool,
    pub condition_moment_ratio: bool,
    pub applicable: bool,
}

impl SafetyEvalResult {
    /// Bound holds and is at most `epsilon`.
    pub fn certifies(&self, epsilon: f64) -> bool {
        self.applicable && self.bound <= epsilon
    }
}

/// One-sided Vysochanskij–Petunin bound `(4/9)·Var[f]/E[f]²`, valid when
/// `E[f] >= 0` and `E[f]² >= (5/8)·E[f²]`.
pub fn vp_bound(c: &ClearanceMoments) -> SafetyEvalResult {
    let mean_sq = c.e_f * c.e_f;
    let condition_mean_nonneg = c.e_f >= 0.0;
    let condition_moment_ratio = mean_sq >= 0.625 * c.e_f2;
    if !(mean_sq >= MEAN_SQUARED_FLOOR) {
        return SafetyEvalResult {
            bound: f64::INFINITY,
            condition_mean_nonneg,
            condition_moment_ratio,
            applicable: false,
        };
    }
    let bound = (4.0 / 9.0 * (c.e_f2 - mean_sq) / mean_sq).max(0.0);
    SafetyEvalResult {
        bound,
        condition_mean_nonneg,
        condition_moment_ratio,
        applicable: condition_mean_nonneg && condition_moment_ratio,
    }
}

/// Term `c · E[A-monomial] · E[B-monomial]`.
#[derive(Debug, Clone, Copy)]
struct CrossTerm {
    coeff: f64,
    a: usize,
    b: usize,
}

struct ClearanceTerms {
    /// `Σ_q (a_q − b_q)²`
    g: Vec<CrossTerm>,
    /// `(Σ_q (a_q − b_q)²)²`
    g2: Vec<CrossTerm>,
}

fn split_terms(p: &Poly<6>) -> Vec<CrossTerm> {
    let basis = MomentBasis::global();
    p.terms()
        .map(|(e, &coeff)| CrossTerm {
            coeff,
            a: basis.index_of([e[0], e[1], e[2], 0, 0]).expect("degree <= 4"),
            b: basis.index_of([e[3], e[4], e[5], 0, 0]).expect("degree <= 4"),
        })
        .collect()
}

fn clearance_terms() -> &'static ClearanceTerms {
    static TERMS: OnceLock<ClearanceTerms> = OnceLock::new();
    TERMS.get_or_init(|| {
        let mut g = Poly::<6>::zero();
        for q in 0..3 {
            let d = Poly::var(q).add(&Poly::var(q + 3).scale(-1.0));
            g = g.add(&d.mul(&d));
        }
        let g2 = g.mul(&g);
        ClearanceTerms {
            g: split_terms(&g),
            g2: split_terms(&g2),
        }
    })
}

fn expect_pair(terms: &[CrossTerm], a: &MomentVector, b: &MomentVector) -> f64 {
    terms
        .iter()
        .map(|t| t.coeff * a.values()[t.a] * b.values()[t.b])
        .sum()
}

/// `E[f]` for independent agents.
pub fn expected_f(a: &MomentVector, b: &MomentVector, d_min: f64) -> f64 {
    expect_pair(&clearance_terms().g, a, b) - d_min * d_min
}

/// `E[f²]` for independent agents, from the degree-≤4 position moments.
pub fn expected_f_squared(a: &MomentVector, b: &MomentVector, d_min: f64) -> f64 {
    let terms = clearance_terms();
    let d2 = d_min * d_min;
    expect_pair(&terms.g2, a, b) - 2.0 * d2 * expect_pair(&terms.g, a, b) + d2 * d2
}

pub fn clearance_moments(a: &MomentVector, b: &MomentVector, d_min: f64) -> ClearanceMoments {
    ClearanceMoments {
        e_f: expected_f(a, b, d_min),
        e_f2: expected_f_squared(a, b, d_min),
        pair: (0, 0),
        time_step: a.time_step(),
    }
}

/// `E[f]` and `E[f²]` as affine functions of agent A's moments with the
/// partner's moments frozen.
#[derive(Debug, Clone)]
pub struct ClearanceFunctional {
    f_weights: Vec<(usize, f64)>,
    f_offset: f64,
    f2_weights: Vec<(usize, f64)>,
    f2_offset: f64,
}

impl ClearanceFunctional {
    pub fn new(partner: &MomentVector, d_min: f64) -> Self {
        let terms = clearance_terms();
        let d2 = d_min * d_min;
        let mut g = vec![0.0; BASIS_LEN];
        let mut g2 = vec![0.0; BASIS_LEN];
        for t in &terms.g {
            g[t.a] += t.coeff * partner.values()[t.b];
        }
        for t in &terms.g2 {
            g2[t.a] += t.coeff * partner.values()[t.b];
        }
        let sparse = |v: &[f64]| -> Vec<(usize, f64)> {
            v.iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(i, &w)| (i, w))
                .collect()
        };
        let f2: Vec<f64> = g2.iter().zip(&g).map(|(h, g)| h - 2.0 * d2 * g).collect();
        ClearanceFunctional {
            f_weights: sparse(&g),
            f_offset: -d2,
            f2_weights: sparse(&f2),
            f2_offset: d2 * d2,
        }
    }

    /// `(E[f], E[f²])` for the given moments of agent A.
    pub fn evaluate(&self, a: &[f64]) -> (f64, f64) {
        let dot = |w: &[(usize, f64)]| w.iter().map(|&(i, c)| c * a[i]).sum::<f64>();
        (dot(&self.f_weights) + self.f_offset, dot(&self.f2_weights) + self.f2_offset)
    }

    /// Nonzero `∂E[f]/∂m_A`.
    pub fn f_weights(&self) -> &[(usize, f64)] {
        &self.f_weights
    }

    /// Nonzero `∂E[f²]/∂m_A`.
    pub fn f2_weights(&self) -> &[(usize, f64)] {
        &self.f2_weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{moments_from_point_state, MomentModel};
    use crate::noise::{Distribution, NoiseSet};
    use crate::state::{Control, TrueState};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point(x: f64, y: f64, z: f64) -> MomentVector {
        moments_from_point_state(x, y, z, 0.0)
    }

    /// Empirical moment vector of a particle cloud.
    fn empirical(points: &[[f64; 3]]) -> MomentVector {
        let basis = MomentBasis::global();
        let n = points.len() as f64;
        let values = basis
            .monomials()
            .iter()
            .map(|m| points.iter().map(|p| m.eval(&[p[0], p[1], p[2], 1.0, 0.0])).sum::<f64>() / n)
            .collect();
        MomentVector::from_values(values, 0).unwrap()
    }

    #[test]
    fn point_masses_twenty_apart() {
        let (a, b) = (point(0.0, 0.0, 0.0), point(20.0, 0.0, 0.0));
        assert_eq!(expected_f(&a, &b, 10.0), 300.0);
        assert_eq!(expected_f_squared(&a, &b, 10.0), 90000.0);
    }

    #[test]
    fn trivial_point_masses() {
        let a = point(1.0, 2.0, 3.0);
        assert_eq!(expected_f(&a, &a, 0.0), 0.0);
        let b = point(1.0 + 6.0, 2.0 + 8.0, 3.0);
        assert!(expected_f(&a, &b, 10.0).abs() < 1e-12);
    }

    #[test]
    fn particle_cross_product_oracle() {
        // With empirical marginals, the factored expectation equals the
        // average over every (i, j) particle pair exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pa: Vec<[f64; 3]> = (0..150)
            .map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..3.0), rng.gen_range(-0.5..0.5)])
            .collect();
        let pb: Vec<[f64; 3]> = (0..170)
            .map(|_| [rng.gen_range(8.0..12.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0)])
            .collect();
        let (ma, mb) = (empirical(&pa), empirical(&pb));
        let d_min = 7.5;
        let (mut s1, mut s2) = (0.0, 0.0);
        for a in &pa {
            for b in &pb {
                let f = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2) - d_min * d_min;
                s1 += f;
                s2 += f * f;
            }
        }
        let n = (pa.len() * pb.len()) as f64;
        let (ef, ef2) = (expected_f(&ma, &mb, d_min), expected_f_squared(&ma, &mb, d_min));
        assert!((ef - s1 / n).abs() <= 1e-9 * ef.abs());
        assert!((ef2 - s2 / n).abs() <= 1e-9 * ef2.abs());
        let lin = ClearanceFunctional::new(&mb, d_min).evaluate(ma.values());
        assert!((lin.0 - ef).abs() <= 1e-9 * ef.abs());
        assert!((lin.1 - ef2).abs() <= 1e-9 * ef2.abs());
    }

    #[test]
    fn partner_at_origin_gives_fourth_marginals() {
        let model = MomentModel::new(&NoiseSet::reference(), 0.1).unwrap();
        let traj = model.rollout(&moments_from_point_state(3.0, -2.0, 1.0, 0.5), &[Control::new(4.0, 1.0, 0.7); 8]);
        let m = &traj[8];
        let g = |e: [u8; 5]| m.get(e);
        let direct = g([4, 0, 0, 0, 0])
            + g([0, 4, 0, 0, 0])
            + g([0, 0, 4, 0, 0])
            + 2.0 * g([2, 2, 0, 0, 0])
            + 2.0 * g([2, 0, 2, 0, 0])
            + 2.0 * g([0, 2, 2, 0, 0]);
        let ef2 = expected_f_squared(m, &point(0.0, 0.0, 0.0), 0.0);
        assert!((ef2 - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn vp_bound_arithmetic() {
        let r = vp_bound(&ClearanceMoments::new(3.0, 10.0));
        assert_eq!(r.bound, 4.0 / 81.0);
        assert!(r.condition_mean_nonneg && r.condition_moment_ratio && r.applicable);

        let r = vp_bound(&ClearanceMoments::new(5.0, 25.0));
        assert_eq!(r.bound, 0.0);
        assert!(r.applicable);

        let r = vp_bound(&ClearanceMoments::new(0.0, 4.0));
        assert_eq!(r.bound, f64::INFINITY);
        assert!(!r.applicable);

        let r = vp_bound(&ClearanceMoments::new(-3.0, 10.0));
        assert!(!r.condition_mean_nonneg && !r.applicable);
        let r = vp_bound(&ClearanceMoments::new(3.0, 15.0));
        assert!(!r.condition_moment_ratio && !r.applicable);
    }

    #[test]
    fn soundness_on_noisy_pairs() {
        // Inflated noise so the bound is informative.
        let noise = NoiseSet::new(
            Distribution::Beta { alpha: 1.0, beta: 3.0 },
            Distribution::Gaussian { mean: 0.0, std: 6.0 },
            Distribution::Uniform { low: -1.0, high: 1.0 },
        )
        .unwrap();
        let model = MomentModel::new(&noise, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let mut checked = 0;
        for case in 0..8u64 {
            let sep = rng.gen_range(12.0..16.0);
            let sa = TrueState::new(0.0, 0.0, 0.0, 0.0);
            let sb = TrueState::new(sep, 0.0, 0.0, std::f64::consts::PI);
            let ua: Vec<Control> = (0..10).map(|_| Control::new(rng.gen_range(0.0..2.0), 0.0, 0.0)).collect();
            let ub = ua.clone();
            let ma = model.rollout(&crate::moments::moments_from_state(&sa), &ua);
            let mb = model.rollout(&crate::moments::moments_from_state(&sb), &ub);
            let r = vp_bound(&clearance_moments(&ma[10], &mb[10], 10.0));
            if !r.applicable {
                continue;
            }
            checked += 1;
            let pa = crate::sim::mc_rollout(&sa, &ua, &noise, 0.1, n, 2 * case).unwrap();
            let pb = crate::sim::mc_rollout(&sb, &ub, &noise, 0.1, n, 2 * case + 1).unwrap();
            let stats = crate::sim::pairwise_distance_stats(&pa, &pb, 10.0).unwrap();
            let p = stats[10].violation_fraction;
            let se = (r.bound.min(1.0) * (1.0 - r.bound.min(1.0)) / n as f64).sqrt();
            assert!(p <= r.bound + 3.0 * se, "case {case}: {p} > {}", r.bound);
        }
        assert!(checked >= 4);
    }

    proptest! {
        #[test]
        fn applicable_bound_is_at_most_four_fifteenths(e_f in 0.0f64..100.0, ratio in 1.0f64..2.0) {
            let r = vp_bound(&ClearanceMoments::new(e_f, e_f * e_f * ratio));
            if r.applicable {
                prop_assert!(r.bound <= 4.0 / 15.0 + 1e-9);
            }
        }

        #[test]
        fn point_masses_are_exact(
            a in prop::array::uniform3(-30.0f64..30.0),
            b in prop::array::uniform3(-30.0f64..30.0),
            d in 0.0f64..15.0,
        ) {
            let f = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2) - d * d;
            let (ma, mb) = (point(a[0], a[1], a[2]), point(b[0], b[1], b[2]));
            let ef = expected_f(&ma, &mb, d);
            let ef2 = expected_f_squared(&ma, &mb, d);
            prop_assert!((ef - f).abs() <= 1e-9 * f.abs().max(1.0));
            prop_assert!((ef2 - f * f).abs() <= 1e-9 * (f * f).max(1.0));
        }

        #[test]
        fn bound_is_scale_covariant(seed in 0u64..1000, c in 0.2f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pa: Vec<[f64; 3]> = (0..20).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let pb: Vec<[f64; 3]> = (0..20).map(|_| [rng.gen_range(11.0..13.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let scale = |v: &[[f64; 3]]| v.iter().map(|p| [c * p[0], c * p[1], c * p[2]]).collect::<Vec<_>>();
            let base = clearance_moments(&empirical(&pa), &empirical(&pb), 10.0);
            let scaled = clearance_moments(&empirical(&scale(&pa)), &empirical(&scale(&pb)), 10.0 * c);
            prop_assert!((scaled.e_f - c * c * base.e_f).abs() <= 1e-9 * scaled.e_f.abs());
            prop_assert!((scaled.e_f2 - c.powi(4) * base.e_f2).abs() <= 1e-9 * scaled.e_f2.abs());
            let (b0, b1) = (vp_bound(&base).bound, vp_bound(&scaled).bound);
            prop_assert!((b0 - b1).abs() <= 1e-9 * b0.abs().max(1.0));
        }
    }
}
