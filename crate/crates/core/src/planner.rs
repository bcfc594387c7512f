//! One agent's receding-horizon program.
//!
//! Decision vector: `T×3` controls `(u^v, u^z, u^ψ)` followed by `T×3`
//! slacks standing in for `|u|`. The objective is the expected squared
//! terminal distance to the destination plus `w·Σ slacks`. For every other
//! agent and every horizon step the program carries three clearance
//! constraints: the VP bound, `E[f] >= 0` and `E[f]² >= (5/8)·E[f²]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{moments_from_state, MomentModel, MomentVector, IDX_X, IDX_XX, IDX_Y, IDX_YY, IDX_Z, IDX_ZZ};
use crate::nlp::{multi_start_solve, LinearConstraint, NlpProblem, SolveReport, SolverOptions};
use crate::safety::{clearance_moments, vp_bound, ClearanceFunctional, SafetyEvalResult};
use crate::sim::derive_seed;
use crate::state::{Control, TrueState};

/// Constraints evaluated per (other agent, horizon step).
pub const CONSTRAINTS_PER_STEP: usize = 3;

/// Slack on the post-solve VP check.
pub const VP_CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    pub v_min: f64,
    pub v_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub psi_min: f64,
    pub psi_max: f64,
}

impl ControlBounds {
    fn lower(&self) -> [f64; 3] {
        [self.v_min, self.z_min, self.psi_min]
    }

    fn upper(&self) -> [f64; 3] {
        [self.v_max, self.z_max, self.psi_max]
    }

    pub fn contains(&self, u: &Control) -> bool {
        let (lo, hi, a) = (self.lower(), self.upper(), u.as_array());
        (0..3).all(|j| lo[j] <= a[j] && a[j] <= hi[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerParams {
    /// Horizon length `T` in steps.
    pub horizon: usize,
    /// Sampling interval in seconds.
    pub delta_s: f64,
    /// Weight `w` of the control-effort term.
    pub smoothness_weight: f64,
    pub d_min: f64,
    pub epsilon: f64,
    pub bounds: ControlBounds,
    /// `Δu^v`: largest change of `u^v` between consecutive steps.
    pub rate_v: f64,
    /// `Δu^z`.
    pub rate_z: f64,
    /// Control applied at the previous global step; anchors the first rate
    /// constraint.
    #[serde(skip)]
    pub previous_control: Control,
}

impl PlannerParams {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        let problems = [
            (self.horizon >= 1, "horizon must be at least 1"),
            (self.delta_s > 0.0, "delta_s must be positive"),
            (self.smoothness_weight >= 0.0, "smoothness weight must be non-negative"),
            (self.d_min > 0.0, "d_min must be positive"),
            (self.epsilon > 0.0 && self.epsilon < 1.0, "epsilon must lie in (0, 1)"),
            (b.v_min <= b.v_max && b.z_min <= b.z_max && b.psi_min <= b.psi_max, "control bounds are not ordered"),
            (self.rate_v > 0.0 && self.rate_z > 0.0, "rate limits must be positive"),
        ];
        for (ok, msg) in problems {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        if [b.v_min, b.v_max, b.z_min, b.z_max, b.psi_min, b.psi_max, self.delta_s, self.d_min]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("planner parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn with_previous_control(mut self, u: Control) -> Self {
        self.previous_control = u;
        self
    }

    /// Box for step `k`; step 0 is narrowed by the rate limits around the
    /// previously applied control.
    fn step_box(&self, k: usize) -> ([f64; 3], [f64; 3]) {
        let (mut lo, mut hi) = (self.bounds.lower(), self.bounds.upper());
        if k == 0 {
            let p = self.previous_control;
            lo[0] = lo[0].max(p.v - self.rate_v);
            hi[0] = hi[0].min(p.v + self.rate_v);
            lo[1] = lo[1].max(p.z - self.rate_z);
            hi[1] = hi[1].min(p.z + self.rate_z);
            for j in 0..2 {
                if lo[j] > hi[j] {
                    // Previous control outside the box: pin to the nearest bound.
                    let v = lo[j].min(self.bounds.upper()[j]);
                    lo[j] = v;
                    hi[j] = v;
                }
            }
        }
        (lo, hi)
    }

    /// Sequentially clamps `controls` into the box and rate limits.
    pub fn repair(&self, controls: &mut [Control]) {
        let mut prev = self.previous_control;
        for (k, u) in controls.iter_mut().enumerate() {
            let (lo, hi) = self.step_box(k);
            let mut a = u.as_array();
            for j in 0..3 {
                a[j] = a[j].clamp(lo[j], hi[j]);
            }
            if k > 0 {
                a[0] = a[0].clamp((prev.v - self.rate_v).max(lo[0]), (prev.v + self.rate_v).min(hi[0]));
                a[1] = a[1].clamp((prev.z - self.rate_z).max(lo[1]), (prev.z + self.rate_z).min(hi[1]));
            }
            *u = Control::from_slice(&a);
            prev = *u;
        }
    }

    /// True when `controls` satisfy every box constraint exactly and every
    /// rate constraint up to rounding of the difference.
    pub fn admits(&self, controls: &[Control]) -> bool {
        let slack = |a: f64, b: f64| 4.0 * f64::EPSILON * (1.0 + a.abs().max(b.abs()));
        let mut prev = self.previous_control;
        controls.iter().all(|u| {
            let ok = self.bounds.contains(u)
                && (u.v - prev.v).abs() <= self.rate_v + slack(u.v, prev.v)
                && (u.z - prev.z).abs() <= self.rate_z + slack(u.z, prev.z);
            prev = *u;
            ok
        })
    }
}

/// Another agent's moments over this agent's horizon: entry `k−1` holds
/// step `planned_at + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPlan {
    pub owner: u32,
    /// Global step at which the source plan was computed.
    pub source_planned_at: i64,
    pub moments: Vec<MomentVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStatus {
    pub fallback: bool,
    /// All clearance constraints certified at the returned controls.
    pub safe: bool,
    #[serde(with = "crate::float_serde")]
    pub objective: f64,
    #[serde(with = "crate::float_serde")]
    pub max_violation: f64,
    pub converged: bool,
    pub iterations: usize,
    pub start_index: usize,
    pub starts: usize,
    /// Largest VP bound over all pairs and steps (`+∞` if uncertified).
    #[serde(with = "crate::float_serde")]
    pub worst_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonPlan {
    pub owner: u32,
    pub planned_at: i64,
    pub controls: Vec<Control>,
    pub slacks: Vec<[f64; 3]>,
    /// Steps `0..=T`; entry 0 is the point mass at the planning state.
    pub moments: Vec<MomentVector>,
    pub status: PlanStatus,
}

impl HorizonPlan {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Payload for broadcast: moments at steps `1..=T`.
    pub fn broadcast_moments(&self) -> &[MomentVector] {
        &self.moments[1..]
    }

    /// Plan assembled from controls that are already known to be admissible.
    pub fn from_controls(
        model: &MomentModel,
        owner: u32,
        planned_at: i64,
        state: &TrueState,
        controls: Vec<Control>,
        status: PlanStatus,
    ) -> HorizonPlan {
        let start = moments_from_state(state).with_time_step(planned_at);
        let moments = model.rollout(&start, &controls);
        let slacks = controls.iter().map(|u| [u.v.abs(), u.z.abs(), u.psi.abs()]).collect();
        HorizonPlan {
            owner,
            planned_at,
            controls,
            slacks,
            moments,
            status,
        }
    }
}

/// Expected squared distance between the moments' position and `c`.
pub fn expected_squared_distance(m: &MomentVector, c: [f64; 3]) -> f64 {
    let v = m.values();
    v[IDX_XX] + v[IDX_YY] + v[IDX_ZZ] - 2.0 * (c[0] * v[IDX_X] + c[1] * v[IDX_Y] + c[2] * v[IDX_Z])
        + c[0] * c[0]
        + c[1] * c[1]
        + c[2] * c[2]
}

/// Objective of a control sequence (unscaled).
pub fn plan_objective(m_terminal: &MomentVector, destination: [f64; 3], controls: &[Control], w: f64) -> f64 {
    let effort: f64 = controls.iter().map(|u| u.v.abs() + u.z.abs() + u.psi.abs()).sum();
    expected_squared_distance(m_terminal, destination) + w * effort
}

/// The assembled program for one agent at one global step.
pub struct PlanningProblem<'a> {
    model: &'a MomentModel,
    start: MomentVector,
    destination: [f64; 3],
    params: PlannerParams,
    /// `clearance[i][k]` against other agent `i` at horizon step `k+1`.
    clearance: Vec<Vec<ClearanceFunctional>>,
    others: Vec<u32>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    linear: Vec<LinearConstraint>,
    objective_scale: f64,
    epsilon_internal: f64,
    /// Required `E[f]`, kept above zero so a noiseless active pair stays
    /// certifiable.
    mean_margin: f64,
    ratio_floor: f64,
}

/// Builds the program. `others` must cover steps `planned_at+1 ..= planned_at+T`.
pub fn assemble_problem<'a>(
    model: &'a MomentModel,
    state: &TrueState,
    planned_at: i64,
    destination: [f64; 3],
    others: &[AlignedPlan],
    params: &PlannerParams,
) -> Result<PlanningProblem<'a>> {
    params.validate()?;
    if (model.delta_s() - params.delta_s).abs() > 1e-15 {
        return Err(Error::Config(format!(
            "moment model built for delta_s = {} but planner uses {}",
            model.delta_s(),
            params.delta_s
        )));
    }
    let t = params.horizon;
    let mut clearance = Vec::with_capacity(others.len());
    for other in others {
        if other.moments.len() != t {
            return Err(Error::Protocol(format!(
                "plan of agent {} covers {} steps, horizon is {t}",
                other.owner,
                other.moments.len()
            )));
        }
        let mut row = Vec::with_capacity(t);
        for (k, m) in other.moments.iter().enumerate() {
            let expected = planned_at + 1 + k as i64;
            if m.time_step() != expected {
                return Err(Error::Protocol(format!(
                    "plan of agent {} is misaligned: entry {k} is step {}, expected {expected}",
                    other.owner,
                    m.time_step()
                )));
            }
            row.push(ClearanceFunctional::new(m, params.d_min));
        }
        clearance.push(row);
    }

    let n = 6 * t;
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for k in 0..t {
        let (lo, hi) = params.step_box(k);
        for j in 0..3 {
            lower[3 * k + j] = lo[j];
            upper[3 * k + j] = hi[j];
            let span = params.bounds.lower()[j].abs().max(params.bounds.upper()[j].abs());
            lower[3 * t + 3 * k + j] = 0.0;
            upper[3 * t + 3 * k + j] = span;
        }
    }
    let mut linear = Vec::with_capacity(6 * t + 4 * t);
    for i in 0..3 * t {
        let s = 3 * t + i;
        for sign in [1.0, -1.0] {
            linear.push(LinearConstraint {
                coefficients: vec![(s, 1.0), (i, -sign)],
                lower: 0.0,
                upper: f64::INFINITY,
            });
        }
    }
    for k in 1..t {
        for (j, rate) in [(0, params.rate_v), (1, params.rate_z)] {
            linear.push(LinearConstraint {
                coefficients: vec![(3 * k + j, 1.0), (3 * (k - 1) + j, -1.0)],
                lower: -rate,
                upper: rate,
            });
        }
    }
    let d2 = params.d_min * params.d_min;
    Ok(PlanningProblem {
        model,
        start: moments_from_state(state).with_time_step(planned_at),
        destination,
        params: *params,
        clearance,
        others: others.iter().map(|o| o.owner).collect(),
        lower,
        upper,
        linear,
        objective_scale: 1.0 / d2.max(1.0),
        epsilon_internal: params.epsilon - (0.01 * params.epsilon).min(1e-6),
        mean_margin: 1e-4 * d2,
        ratio_floor: (0.01 * d2).powi(2),
    })
}

impl PlanningProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.params.horizon
    }

    pub fn other_count(&self) -> usize {
        self.others.len()
    }

    pub fn controls_of(&self, x: &[f64]) -> Vec<Control> {
        x[..3 * self.params.horizon].chunks(3).map(Control::from_slice).collect()
    }

    /// Decision vector for `controls` with tight slacks.
    pub fn decision_vector(&self, controls: &[Control]) -> Vec<f64> {
        let mut x: Vec<f64> = controls.iter().flat_map(|u| u.as_array()).collect();
        let slacks: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        x.extend(slacks);
        x
    }

    fn effort(&self, x: &[f64]) -> f64 {
        x[3 * self.params.horizon..].iter().sum()
    }

    fn objective_from(&self, m_t: &MomentVector, x: &[f64]) -> f64 {
        self.objective_scale
            * (expected_squared_distance(m_t, self.destination) + self.params.smoothness_weight * self.effort(x))
    }

    /// `[vp, mean, ratio]` plus their partial derivatives with respect to
    /// `(E[f], E[f²])`.
    fn clearance_rows(&self, ef: f64, ef2: f64) -> ([f64; 3], [[f64; 2]; 3]) {
        let mean_sq = ef * ef;
        let eps = self.epsilon_internal;
        let d2 = self.params.d_min * self.params.d_min;
        let mean = (self.mean_margin - ef) / d2;
        let d_mean = [-1.0 / d2, 0.0];
        if mean_sq >= self.ratio_floor {
            let r = ef2 / mean_sq;
            let vp = 4.0 / 9.0 * (r - 1.0) - eps;
            let ratio = 0.625 * r - 1.0;
            let dr_def = -2.0 * ef2 / (mean_sq * ef);
            let dr_def2 = 1.0 / mean_sq;
            (
                [vp, mean, ratio],
                [
                    [4.0 / 9.0 * dr_def, 4.0 / 9.0 * dr_def2],
                    d_mean,
                    [0.625 * dr_def, 0.625 * dr_def2],
                ],
            )
        } else {
            let c = self.ratio_floor;
            let vp = (4.0 / 9.0 * (ef2 - mean_sq) - eps * mean_sq) / c;
            let ratio = (0.625 * ef2 - mean_sq) / c;
            (
                [vp, mean, ratio],
                [
                    [-2.0 * ef * (4.0 / 9.0 + eps) / c, 4.0 / 9.0 / c],
                    d_mean,
                    [-2.0 * ef / c, 0.625 / c],
                ],
            )
        }
    }

    /// Clearance certificates of a moment trajectory (`moments[k]` at
    /// horizon step `k`), indexed `[other][k-1]`.
    pub fn certify(&self, moments: &[MomentVector]) -> Vec<Vec<SafetyEvalResult>> {
        self.clearance
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(k, f)| {
                        let (e_f, e_f2) = f.evaluate(moments[k + 1].values());
                        vp_bound(&crate::safety::ClearanceMoments::new(e_f, e_f2))
                    })
                    .collect()
            })
            .collect()
    }
}

impl NlpProblem for PlanningProblem<'_> {
    fn dimension(&self) -> usize {
        6 * self.params.horizon
    }

    fn inequality_count(&self) -> usize {
        CONSTRAINTS_PER_STEP * self.params.horizon * self.clearance.len()
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
        let controls = self.controls_of(x);
        let traj = self.model.rollout(&self.start, &controls);
        let t = self.params.horizon;
        for (i, row) in self.clearance.iter().enumerate() {
            for (k, func) in row.iter().enumerate() {
                let (ef, ef2) = func.evaluate(traj[k + 1].values());
                let (vals, _) = self.clearance_rows(ef, ef2);
                let base = CONSTRAINTS_PER_STEP * (i * t + k);
                g[base..base + CONSTRAINTS_PER_STEP].copy_from_slice(&vals);
            }
        }
        self.objective_from(&traj[t], x)
    }

    fn evaluate_with_gradients(&self, x: &[f64], g: &mut [f64], grad: &mut [f64], jac: &mut [f64]) -> f64 {
        let controls = self.controls_of(x);
        let (traj, sens) = self.model.rollout_with_sensitivity(&self.start, &controls);
        let t = self.params.horizon;
        let n = 6 * t;
        let nu = 3 * t;
        let s_t = &sens[t];
        let c = self.destination;
        grad.iter_mut().for_each(|v| *v = 0.0);
        for (idx, w) in [
            (IDX_XX, 1.0),
            (IDX_YY, 1.0),
            (IDX_ZZ, 1.0),
            (IDX_X, -2.0 * c[0]),
            (IDX_Y, -2.0 * c[1]),
            (IDX_Z, -2.0 * c[2]),
        ] {
            for (gj, sj) in grad[..nu].iter_mut().zip(s_t.row(idx)) {
                *gj += self.objective_scale * w * sj;
            }
        }
        for gj in grad[nu..].iter_mut() {
            *gj = self.objective_scale * self.params.smoothness_weight;
        }

        let mut d_ef = vec![0.0; nu];
        let mut d_ef2 = vec![0.0; nu];
        for (i, row) in self.clearance.iter().enumerate() {
            for (k, func) in row.iter().enumerate() {
                let m = &traj[k + 1];
                let s = &sens[k + 1];
                let (ef, ef2) = func.evaluate(m.values());
                // Only the first 3(k+1) columns of the step-(k+1) tangent are nonzero.
                let active = 3 * (k + 1);
                d_ef[..active].iter_mut().for_each(|v| *v = 0.0);
                d_ef2[..active].iter_mut().for_each(|v| *v = 0.0);
                for &(j, w) in func.f_weights() {
                    for (o, sj) in d_ef[..active].iter_mut().zip(&s.row(j)[..active]) {
                        *o += w * sj;
                    }
                }
                for &(j, w) in func.f2_weights() {
                    for (o, sj) in d_ef2[..active].iter_mut().zip(&s.row(j)[..active]) {
                        *o += w * sj;
                    }
                }
                let (vals, partials) = self.clearance_rows(ef, ef2);
                let base = CONSTRAINTS_PER_STEP * (i * t + k);
                g[base..base + CONSTRAINTS_PER_STEP].copy_from_slice(&vals);
                for r in 0..CONSTRAINTS_PER_STEP {
                    let out = &mut jac[(base + r) * n..(base + r + 1) * n];
                    out.iter_mut().for_each(|v| *v = 0.0);
                    let [a, b] = partials[r];
                    for j in 0..active {
                        out[j] = a * d_ef[j] + b * d_ef2[j];
                    }
                }
            }
        }
        self.objective_from(&traj[t], x)
    }
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// Turn toward the destination as fast as the bounds allow, then fly
/// straight with speed ramped toward what covers the remaining distance in
/// one horizon.
pub fn straight_to_goal(state: &TrueState, destination: [f64; 3], params: &PlannerParams) -> Vec<Control> {
    let t = params.horizon;
    let b = &params.bounds;
    let dx = destination[0] - state.x;
    let dy = destination[1] - state.y;
    let dz = destination[2] - state.z;
    let horizontal = dx.hypot(dy);
    let span = t as f64 * params.delta_s;
    let mut heading_error = if horizontal > 1e-9 {
        wrap_angle(dy.atan2(dx) - state.psi)
    } else {
        0.0
    };
    let v_target = (horizontal / span).clamp(b.v_min, b.v_max);
    let z_target = (dz / span).clamp(b.z_min, b.z_max);
    let mut prev = params.previous_control;
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        let psi = (heading_error / params.delta_s).clamp(b.psi_min, b.psi_max);
        heading_error -= psi * params.delta_s;
        let v = v_target.clamp(prev.v - params.rate_v, prev.v + params.rate_v);
        let z = z_target.clamp(prev.z - params.rate_z, prev.z + params.rate_z);
        prev = Control::new(v, z, psi);
        out.push(prev);
    }
    params.repair(&mut out);
    out
}

/// Previous plan advanced by one step with its last control held.
pub fn shift_controls(controls: &[Control]) -> Vec<Control> {
    let mut out: Vec<Control> = controls.iter().skip(1).copied().collect();
    if let Some(last) = controls.last() {
        out.push(*last);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOptions {
    /// Total number of starts, at least one.
    pub starts: usize,
    pub seed: u64,
    pub solver: SolverOptions,
    /// Extra control sequences tried after the standard menu.
    pub extra_starts: Vec<Vec<Control>>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            starts: 4,
            seed: 0,
            solver: SolverOptions::default(),
            extra_starts: Vec::new(),
        }
    }
}

/// Ordered start menu: shifted previous plan, zero controls,
/// straight-to-goal, then seeded perturbations of the first two.
pub fn start_menu(
    state: &TrueState,
    destination: [f64; 3],
    params: &PlannerParams,
    previous_plan: Option<&HorizonPlan>,
    opts: &PlanOptions,
    owner: u32,
    planned_at: i64,
) -> Vec<Vec<Control>> {
    let t = params.horizon;
    let mut menu: Vec<Vec<Control>> = Vec::new();
    if let Some(prev) = previous_plan {
        if prev.horizon() == t {
            menu.push(shift_controls(&prev.controls));
        }
    }
    menu.push(vec![Control::ZERO; t]);
    let straight = straight_to_goal(state, destination, params);
    menu.push(straight.clone());
    let bases = [menu[0].clone(), straight];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[owner as u64, planned_at as u64]));
    let spread = [
        Normal::new(0.0, params.rate_v.max(1e-3)).expect("positive"),
        Normal::new(0.0, params.rate_z.max(1e-3)).expect("positive"),
        Normal::new(0.0, 0.25 * (params.bounds.psi_max - params.bounds.psi_min).max(1e-3)).expect("positive"),
    ];
    let mut i = 0;
    while menu.len() < opts.starts {
        let base = &bases[i % bases.len()];
        // One perturbation per start, held over the horizon, so the start
        // explores a different manoeuvre rather than jitter.
        let offset = [spread[0].sample(&mut rng), spread[1].sample(&mut rng), spread[2].sample(&mut rng)];
        let cand: Vec<Control> = base
            .iter()
            .map(|u| Control::new(u.v + offset[0], u.z + offset[1], u.psi + offset[2]))
            .collect();
        menu.push(cand);
        i += 1;
    }
    menu.truncate(opts.starts.max(1));
    menu.extend(opts.extra_starts.iter().filter(|s| s.len() == t).cloned());
    for m in menu.iter_mut() {
        params.repair(m);
    }
    menu
}

/// Everything needed to plan one agent at one global step.
#[derive(Debug, Clone)]
pub struct PlanRequest<'a> {
    pub owner: u32,
    pub planned_at: i64,
    pub state: TrueState,
    pub destination: [f64; 3],
    pub others: &'a [AlignedPlan],
    pub previous_plan: Option<&'a HorizonPlan>,
}

/// Solves one agent's program. Never fails on infeasibility: the returned
/// plan is then a [`fallback_plan`] flagged in its status. Protocol and
/// configuration errors are returned.
pub fn plan(model: &MomentModel, req: &PlanRequest, params: &PlannerParams, opts: &PlanOptions) -> Result<HorizonPlan> {
    let problem = assemble_problem(model, &req.state, req.planned_at, req.destination, req.others, params)?;
    let menu = start_menu(
        &req.state,
        req.destination,
        params,
        req.previous_plan,
        opts,
        req.owner,
        req.planned_at,
    );
    let starts: Vec<Vec<f64>> = menu.iter().map(|c| problem.decision_vector(c)).collect();
    let report = multi_start_solve(&problem, &starts, &opts.solver);
    match report {
        Ok(r) if r.is_feasible(opts.solver.feasibility_tol) => {
            let plan = finish(model, &problem, req, params, &r, starts.len());
            if plan.status.safe {
                return Ok(plan);
            }
            Ok(fallback_with_report(model, req, params, Some(&r), starts.len()))
        }
        Ok(r) => Ok(fallback_with_report(model, req, params, Some(&r), starts.len())),
        Err(Error::Solver(_)) => Ok(fallback_with_report(model, req, params, None, starts.len())),
        Err(e) => Err(e),
    }
}

fn worst_bound(cert: &[Vec<SafetyEvalResult>]) -> (bool, f64) {
    let mut worst: f64 = 0.0;
    let mut all_applicable = true;
    for r in cert.iter().flatten() {
        all_applicable &= r.applicable;
        worst = worst.max(if r.applicable { r.bound } else { f64::INFINITY });
    }
    (all_applicable, worst)
}

fn finish(
    model: &MomentModel,
    problem: &PlanningProblem,
    req: &PlanRequest,
    params: &PlannerParams,
    report: &SolveReport,
    starts: usize,
) -> HorizonPlan {
    let mut controls = problem.controls_of(&report.solution);
    params.repair(&mut controls);
    let mut plan = HorizonPlan::from_controls(
        model,
        req.owner,
        req.planned_at,
        &req.state,
        controls,
        PlanStatus {
            fallback: false,
            safe: false,
            objective: 0.0,
            max_violation: report.max_constraint_violation,
            converged: report.converged,
            iterations: report.iterations,
            start_index: report.start_index,
            starts,
            worst_bound: f64::INFINITY,
        },
    );
    let cert = problem.certify(&plan.moments);
    let (applicable, worst) = worst_bound(&cert);
    plan.status.safe = applicable && worst <= params.epsilon + VP_CHECK_TOL;
    plan.status.worst_bound = worst;
    plan.status.objective = plan_objective(
        &plan.moments[params.horizon],
        req.destination,
        &plan.controls,
        params.smoothness_weight,
    );
    plan
}

fn fallback_with_report(
    model: &MomentModel,
    req: &PlanRequest,
    params: &PlannerParams,
    report: Option<&SolveReport>,
    starts: usize,
) -> HorizonPlan {
    let mut plan = fallback_plan(model, req, params);
    plan.status.starts = starts;
    if let Some(r) = report {
        plan.status.max_violation = r.max_constraint_violation;
        plan.status.iterations = r.iterations;
        plan.status.start_index = r.start_index;
    }
    plan
}

/// Shift-and-hold of the previous plan, or a braking profile when there is
/// none, re-propagated from the current state.
pub fn fallback_plan(model: &MomentModel, req: &PlanRequest, params: &PlannerParams) -> HorizonPlan {
    let t = params.horizon;
    let mut controls = match req.previous_plan {
        Some(prev) if prev.horizon() == t => shift_controls(&prev.controls),
        _ => {
            let mut u = params.previous_control;
            (0..t)
                .map(|_| {
                    u = Control::new(
                        (u.v - params.rate_v).max(0.0),
                        if u.z >= 0.0 {
                            (u.z - params.rate_z).max(0.0)
                        } else {
                            (u.z + params.rate_z).min(0.0)
                        },
                        0.0,
                    );
                    u
                })
                .collect()
        }
    };
    params.repair(&mut controls);
    let mut plan = HorizonPlan::from_controls(
        model,
        req.owner,
        req.planned_at,
        &req.state,
        controls,
        PlanStatus {
            fallback: true,
            safe: false,
            objective: 0.0,
            max_violation: f64::INFINITY,
            converged: false,
            iterations: 0,
            start_index: 0,
            starts: 0,
            worst_bound: f64::INFINITY,
        },
    );
    if let Ok(problem) = assemble_problem(model, &req.state, req.planned_at, req.destination, req.others, params) {
        let (applicable, worst) = worst_bound(&problem.certify(&plan.moments));
        plan.status.safe = applicable && worst <= params.epsilon + VP_CHECK_TOL;
        plan.status.worst_bound = worst;
    }
    plan.status.objective = plan_objective(&plan.moments[t], req.destination, &plan.controls, params.smoothness_weight);
    plan
}

/// Per-pair, per-step clearance of a plan against aligned partner moments.
pub fn plan_clearance(plan: &HorizonPlan, others: &[AlignedPlan], d_min: f64) -> Vec<Vec<SafetyEvalResult>> {
    others
        .iter()
        .map(|o| {
            o.moments
                .iter()
                .enumerate()
                .map(|(k, m)| vp_bound(&clearance_moments(&plan.moments[k + 1], m, d_min)))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::noise::NoiseSet;
    use std::f64::consts::PI;

    pub(crate) fn reference_params(epsilon: f64) -> PlannerParams {
        PlannerParams {
            horizon: 10,
            delta_s: 0.1,
            smoothness_weight: 0.1,
            d_min: 10.0,
            epsilon,
            bounds: ControlBounds {
                v_min: 0.0,
                v_max: 10.0,
                z_min: -10.0,
                z_max: 10.0,
                psi_min: -PI,
                psi_max: PI,
            },
            rate_v: 1.0,
            rate_z: 1.0,
            previous_control: Control::ZERO,
        }
    }

    fn hover(model: &MomentModel, owner: u32, s: &TrueState, planned_at: i64, t: usize) -> AlignedPlan {
        let start = moments_from_state(s).with_time_step(planned_at);
        let traj = model.rollout(&start, &vec![Control::ZERO; t]);
        AlignedPlan {
            owner,
            source_planned_at: planned_at,
            moments: traj[1..].to_vec(),
        }
    }

    #[test]
    fn structure_counts() {
        let model = MomentModel::new(&NoiseSet::reference(), 0.1).unwrap();
        let p = reference_params(0.1);
        let s = TrueState::new(0.0, -25.0, 0.0, PI / 2.0);
        let alone = assemble_problem(&model, &s, 0, [0.0, 25.0, 0.0], &[], &p).unwrap();
        assert_eq!(alone.dimension(), 60);
        assert_eq!(alone.inequality_count(), 0);
        let others: Vec<AlignedPlan> = [(2, 0.0, 25.0), (3, -25.0, 0.0), (4, 25.0, 0.0)]
            .iter()
            .map(|&(o, x, y)| hover(&model, o, &TrueState::new(x, y, 0.0, 0.0), 0, 10))
            .collect();
        let full = assemble_problem(&model, &s, 0, [0.0, 25.0, 0.0], &others, &p).unwrap();
        assert_eq!(full.inequality_count(), 90);
        // 2 slack rows per control entry, 2 rate rows per step after the first
        assert_eq!(full.linear_constraints().len(), 60 + 18);
    }

    #[test]
    fn misaligned_partner_is_protocol_error() {
        let model = MomentModel::new(&NoiseSet::reference(), 0.1).unwrap();
        let p = reference_params(0.1);
        let s = TrueState::default();
        let stale = hover(&model, 2, &TrueState::new(30.0, 0.0, 0.0, 0.0), 1, 10);
        let err = assemble_problem(&model, &s, 0, [1.0, 0.0, 0.0], &[stale], &p);
        assert!(matches!(err, Err(Error::Protocol(_))));
        let mut short = hover(&model, 2, &TrueState::new(30.0, 0.0, 0.0, 0.0), 0, 10);
        short.moments.pop();
        let err = assemble_problem(&model, &s, 0, [1.0, 0.0, 0.0], &[short], &p);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        use rand::Rng;
        let model = MomentModel::new(&NoiseSet::reference(), 0.1).unwrap();
        let p = reference_params(0.1).with_previous_control(Control::new(3.0, 0.0, 0.0));
        let s = TrueState::new(0.0, -14.0, 0.0, PI / 2.0);
        let others = vec![
            hover(&model, 2, &TrueState::new(1.0, 2.0, 0.5, 0.0), 0, 10),
            hover(&model, 3, &TrueState::new(-9.0, -1.0, 0.0, 0.0), 0, 10),
        ];
        let problem = assemble_problem(&model, &s, 0, [0.0, 25.0, 0.0], &others, &p).unwrap();
        let n = problem.dimension();
        let m = problem.inequality_count();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let controls: Vec<Control> = (0..10)
                .map(|_| Control::new(rng.gen_range(2.0..4.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let mut x = problem.decision_vector(&controls);
            for v in x[30..].iter_mut() {
                *v += 0.1;
            }
            let (mut g, mut grad, mut jac) = (vec![0.0; m], vec![0.0; n], vec![0.0; m * n]);
            problem.evaluate_with_gradients(&x, &mut g, &mut grad, &mut jac);
            let h = 1e-6;
            let mut gp = vec![0.0; m];
            let mut gm = vec![0.0; m];
            for j in 0..n {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fp = problem.evaluate(&xp, &mut gp);
                let fm = problem.evaluate(&xm, &mut gm);
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - grad[j]).abs() <= 1e-4 * grad[j].abs().max(1e-2), "objective {j}: {fd} vs {}", grad[j]);
                for r in 0..m {
                    let fd = (gp[r] - gm[r]) / (2.0 * h);
                    let an = jac[r * n + j];
                    assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-2), "g{r} x{j}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn zero_noise_straight_ahead_ramps_speed() {
        let model = MomentModel::new(&NoiseSet::noiseless(), 0.1).unwrap();
        let p = reference_params(0.1);
        let req = PlanRequest {
            owner: 1,
            planned_at: 0,
            state: TrueState::new(0.0, 0.0, 0.0, 0.0),
            destination: [200.0, 0.0, 0.0],
            others: &[],
            previous_plan: None,
        };
        let plan = plan(&model, &req, &p, &PlanOptions::default()).unwrap();
        assert!(!plan.status.fallback);
        for (k, u) in plan.controls.iter().enumerate() {
            assert!((u.v - (k + 1) as f64).abs() < 1e-4, "step {k}: {u:?}");
            assert!(u.psi.abs() < 1e-4 && u.z.abs() < 1e-4);
        }
        assert!(p.admits(&plan.controls));
    }

    #[test]
    fn still_at_destination() {
        let model = MomentModel::new(&NoiseSet::noiseless(), 0.1).unwrap();
        let p = reference_params(0.1);
        let req = PlanRequest {
            owner: 1,
            planned_at: 0,
            state: TrueState::new(5.0, 5.0, 1.0, 0.3),
            destination: [5.0, 5.0, 1.0],
            others: &[],
            previous_plan: None,
        };
        let plan = plan(&model, &req, &p, &PlanOptions::default()).unwrap();
        assert!(plan.status.objective < 1e-6);
        for u in &plan.controls {
            assert!(u.v.abs() < 1e-4 && u.z.abs() < 1e-4 && u.psi.abs() < 1e-4);
        }
    }

    #[test]
    fn head_on_pair_deviates() {
        let model = MomentModel::new(&NoiseSet::reference(), 0.1).unwrap();
        let p = reference_params(0.1).with_previous_control(Control::new(8.0, 0.0, 0.0));
        // Partner 25 m ahead flying toward us at 8 m/s.
        let partner_start = TrueState::new(25.0, 0.0, 0.0, PI);
        let start = moments_from_state(&partner_start).with_time_step(0);
        let partner = model.rollout(&start, &[Control::new(8.0, 0.0, 0.0); 10]);
        let others = [AlignedPlan {
            owner: 2,
            source_planned_at: 0,
            moments: partner[1..].to_vec(),
        }];
        let req = PlanRequest {
            owner: 1,
            planned_at: 0,
            state: TrueState::new(0.0, 0.0, 0.0, 0.0),
            destination: [50.0, 0.0, 0.0],
            others: &others,
            previous_plan: None,
        };
        let plan = plan(&model, &req, &p, &PlanOptions { starts: 6, ..PlanOptions::default() }).unwrap();
        assert!(!plan.status.fallback, "{:?}", plan.status);
        assert!(plan.status.safe);
        assert!(p.admits(&plan.controls));
        for (k, m) in plan.broadcast_moments().iter().enumerate() {
            let a = m.mean_position();
            let b = others[0].moments[k].mean_position();
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            assert!(d >= 10.0, "step {k}: {d}");
        }
        for row in plan_clearance(&plan, &others, p.d_min) {
            for r in row {
                assert!(r.applicable && r.bound <= p.epsilon + VP_CHECK_TOL);
            }
        }
        let fresh = model.rollout(&moments_from_state(&req.state), &plan.controls);
        for (a, b) in fresh.iter().zip(&plan.moments) {
            assert!(a.max_abs_diff(b) <= 1e-9);
        }
        for (u, s) in plan.controls.iter().zip(&plan.slacks) {
            assert!((s[0] - u.v.abs()).abs() <= 1e-5 && (s[2] - u.psi.abs()).abs() <= 1e-5);
        }
    }

    #[test]
    fn fallback_shifts_previous_plan() {
        let model = MomentModel::new(&NoiseSet::reference(), 0.1).unwrap();
        let p = reference_params(0.1).with_previous_control(Control::new(4.0, 0.5, 0.1));
        let s = TrueState::new(1.0, 2.0, 3.0, 0.4);
        let prev = HorizonPlan::from_controls(
            &model,
            1,
            0,
            &s,
            vec![Control::new(4.0, 0.5, 0.1); 10],
            fallback_plan(&model, &PlanRequest { owner: 1, planned_at: 0, state: s, destination: [0.0; 3], others: &[], previous_plan: None }, &p).status,
        );
        let req = PlanRequest {
            owner: 1,
            planned_at: 1,
            state: s,
            destination: [0.0; 3],
            others: &[],
            previous_plan: Some(&prev),
        };
        let fb = fallback_plan(&model, &req, &p);
        assert!(fb.status.fallback);
        assert!(fb.controls.iter().all(|u| *u == Control::new(4.0, 0.5, 0.1)));
        let fresh = model.rollout(&moments_from_state(&s).with_time_step(1), &fb.controls);
        assert_eq!(fresh, fb.moments);
    }

    #[test]
    fn fallback_without_previous_brakes() {
        let model = MomentModel::new(&NoiseSet::reference(), 0.1).unwrap();
        let p = reference_params(0.1).with_previous_control(Control::new(3.5, -2.0, 1.0));
        let req = PlanRequest {
            owner: 1,
            planned_at: 0,
            state: TrueState::default(),
            destination: [0.0; 3],
            others: &[],
            previous_plan: None,
        };
        let fb = fallback_plan(&model, &req, &p);
        let v: Vec<f64> = fb.controls.iter().map(|u| u.v).collect();
        assert_eq!(&v[..5], &[2.5, 1.5, 0.5, 0.0, 0.0]);
        assert_eq!(fb.controls[0].z, -1.0);
        assert_eq!(fb.controls[1].z, 0.0);
        assert!(p.admits(&fb.controls));
    }

    #[test]
    fn repair_enforces_rates() {
        let p = reference_params(0.1).with_previous_control(Control::new(2.0, 0.0, 0.0));
        let mut c = vec![Control::new(9.0, -5.0, 7.0), Control::new(0.0, 5.0, -7.0), Control::new(12.0, 0.0, 0.0)];
        p.repair(&mut c);
        assert_eq!(c[0], Control::new(3.0, -1.0, PI));
        assert_eq!(c[1], Control::new(2.0, 0.0, -PI));
        assert_eq!(c[2], Control::new(3.0, 0.0, 0.0));
        assert!(p.admits(&c));
    }

    #[test]
    fn angle_wrapping() {
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * PI / 2.0) - PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(PI) - PI).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn repaired_controls_are_admissible(
            prev in (0.0..10.0f64, -10.0..10.0f64),
            raw in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64, -7.0..7.0f64), 1..12),
        ) {
            let p = reference_params(0.1).with_previous_control(Control::new(prev.0, prev.1, 0.0));
            let mut c: Vec<Control> = raw.iter().map(|&(v, z, psi)| Control::new(v, z, psi)).collect();
            p.repair(&mut c);
            prop_assert!(p.admits(&c));
            let again = {
                let mut d = c.clone();
                p.repair(&mut d);
                d
            };
            prop_assert_eq!(again, c);
        }
    }
}
