//! Exact propagation of state moments through the augmented unicycle
//! dynamics.
//!
//! The state is augmented to `(x, y, z, cosψ, sinψ)`. One step of the
//! dynamics is affine in that state with random coefficients that depend
//! only on the control and the current disturbance, so every moment of
//! total degree `d` at step `k` is an affine combination of moments of
//! degree `<= d` at step `k - 1`. The coefficients are products of control
//! atoms and mixed trigonometric–polynomial noise moments.
//!
//! [`build_expansion`] derives the recursion symbolically once;
//! [`MomentModel`] bakes in the noise tables and evaluates it for concrete
//! controls.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{build_moment_table, NoiseSet, TrigMomentTable};
use crate::poly::Poly;
use crate::sim;
use crate::state::{Control, TrueState};

/// Highest total degree of propagated monomials.
pub const MAX_DEGREE: u32 = 4;
/// Number of basis monomials of degree `0..=4` in five variables.
pub const BASIS_LEN: usize = 126;

pub const STATE_VARIABLES: [&str; 5] = ["x", "y", "z", "c", "s"];

pub const IDX_X: usize = 1;
pub const IDX_Y: usize = 2;
pub const IDX_Z: usize = 3;
pub const IDX_C: usize = 4;
pub const IDX_S: usize = 5;
pub const IDX_XX: usize = 6;
pub const IDX_XC: usize = 9;
pub const IDX_XS: usize = 10;
pub const IDX_YY: usize = 11;
pub const IDX_ZZ: usize = 15;
pub const IDX_CC: usize = 18;
pub const IDX_CS: usize = 19;
pub const IDX_SS: usize = 20;

/// Exponents of a monomial `x^a y^b z^c cos^d ψ sin^e ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MonomialIndex {
    exps: [u8; 5],
}

impl MonomialIndex {
    pub const fn new(exps: [u8; 5]) -> Self {
        MonomialIndex { exps }
    }

    pub fn exponents(&self) -> [u8; 5] {
        self.exps
    }

    pub fn degree(&self) -> u32 {
        self.exps.iter().map(|&e| e as u32).sum()
    }

    /// Evaluates the monomial at `(x, y, z, cosψ, sinψ)`.
    pub fn eval(&self, vars: &[f64; 5]) -> f64 {
        let mut v = 1.0;
        for (x, &e) in vars.iter().zip(&self.exps) {
            v *= x.powi(e as i32);
        }
        v
    }

    /// Human-readable label, e.g. `x^2*c`; the constant monomial is `1`.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self
            .exps
            .iter()
            .zip(STATE_VARIABLES)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, name)| if e == 1 { name.to_string() } else { format!("{name}^{e}") })
            .collect();
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join("*")
        }
    }
}

/// Graded-lexicographic list of all monomials of degree `0..=max_degree`.
///
/// Index 0 is the constant monomial; the degree-1 block is
/// `x, y, z, c, s` and the degree-2 block is
/// `x², xy, xz, xc, xs, y², yz, yc, ys, z², zc, zs, c², cs, s²`.
#[derive(Debug, Clone)]
pub struct MomentBasis {
    monomials: Vec<MonomialIndex>,
    lookup: HashMap<[u8; 5], usize>,
    max_degree: u32,
}

impl MomentBasis {
    pub fn new(max_degree: u32) -> Self {
        let mut monomials = Vec::new();
        for d in 0..=max_degree {
            let mut exps = [0u8; 5];
            push_degree(&mut monomials, &mut exps, 0, d);
        }
        let lookup = monomials.iter().enumerate().map(|(i, m)| (m.exps, i)).collect();
        MomentBasis {
            monomials,
            lookup,
            max_degree,
        }
    }

    /// The shared degree-4 basis.
    pub fn global() -> &'static MomentBasis {
        static BASIS: OnceLock<MomentBasis> = OnceLock::new();
        BASIS.get_or_init(|| MomentBasis::new(MAX_DEGREE))
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn monomial(&self, i: usize) -> MonomialIndex {
        self.monomials[i]
    }

    pub fn monomials(&self) -> &[MonomialIndex] {
        &self.monomials
    }

    pub fn index_of(&self, exps: [u8; 5]) -> Option<usize> {
        self.lookup.get(&exps).copied()
    }

    /// Index range of the degree-`d` block.
    pub fn degree_block(&self, d: u32) -> std::ops::Range<usize> {
        let start = self.monomials.iter().position(|m| m.degree() == d).unwrap_or(self.len());
        let end = self.monomials[start..]
            .iter()
            .position(|m| m.degree() != d)
            .map_or(self.len(), |o| start + o);
        start..end
    }
}

fn push_degree(out: &mut Vec<MonomialIndex>, exps: &mut [u8; 5], var: usize, remaining: u32) {
    if var == 4 {
        exps[4] = remaining as u8;
        out.push(MonomialIndex::new(*exps));
        return;
    }
    for e in (0..=remaining).rev() {
        exps[var] = e as u8;
        push_degree(out, exps, var + 1, remaining - e);
    }
    exps[var] = 0;
}

/// Expectations of every basis monomial at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMomentVector")]
pub struct MomentVector {
    time_step: i64,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMomentVector {
    time_step: i64,
    values: Vec<f64>,
}

impl TryFrom<RawMomentVector> for MomentVector {
    type Error = Error;

    fn try_from(raw: RawMomentVector) -> Result<Self> {
        MomentVector::from_values(raw.values, raw.time_step)
    }
}

impl MomentVector {
    pub fn from_values(values: Vec<f64>, time_step: i64) -> Result<Self> {
        if values.len() != BASIS_LEN {
            return Err(Error::Usage(format!(
                "moment vector needs {BASIS_LEN} entries, got {}",
                values.len()
            )));
        }
        Ok(MomentVector { values, time_step })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn time_step(&self) -> i64 {
        self.time_step
    }

    pub fn with_time_step(mut self, time_step: i64) -> Self {
        self.time_step = time_step;
        self
    }

    pub fn get(&self, exps: [u8; 5]) -> f64 {
        let i = MomentBasis::global()
            .index_of(exps)
            .expect("monomial of degree <= 4");
        self.values[i]
    }

    pub fn mean_position(&self) -> [f64; 3] {
        [self.values[IDX_X], self.values[IDX_Y], self.values[IDX_Z]]
    }

    /// Marginal variances of `x`, `y`, `z`.
    pub fn position_variance(&self) -> [f64; 3] {
        let m = self.mean_position();
        [
            self.values[IDX_XX] - m[0] * m[0],
            self.values[IDX_YY] - m[1] * m[1],
            self.values[IDX_ZZ] - m[2] * m[2],
        ]
    }

    /// `E[cos²ψ] + E[sin²ψ]`, identically one for any valid vector.
    pub fn trig_norm(&self) -> f64 {
        self.values[IDX_CC] + self.values[IDX_SS]
    }

    pub fn max_abs_diff(&self, other: &MomentVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Moments of a deterministic state: every entry is the literal monomial
/// value.
pub fn moments_from_point_state(x: f64, y: f64, z: f64, psi: f64) -> MomentVector {
    let vars = [x, y, z, psi.cos(), psi.sin()];
    let values = MomentBasis::global()
        .monomials()
        .iter()
        .map(|m| m.eval(&vars))
        .collect();
    MomentVector {
        values,
        time_step: 0,
    }
}

pub fn moments_from_state(state: &TrueState) -> MomentVector {
    moments_from_point_state(state.x, state.y, state.z, state.psi)
}

// Variables of the symbolic expansion.
const NV: usize = 13;
const V_X: usize = 0;
const V_Y: usize = 1;
const V_Z: usize = 2;
const V_C: usize = 3;
const V_S: usize = 4;
// control atoms: Δs·u^v, Δs·u^z, cos(Δs·u^ψ), sin(Δs·u^ψ)
const A_V: usize = 5;
const A_Z: usize = 6;
const A_CU: usize = 7;
const A_SU: usize = 8;
// noise atoms: Δs·ω^v, Δs·ω^z, cos(Δs·ω^ψ), sin(Δs·ω^ψ)
const W_V: usize = 9;
const W_Z: usize = 10;
const W_C: usize = 11;
const W_S: usize = 12;

/// Powers of the deterministic control atoms
/// `(Δs·u^v, Δs·u^z, cos(Δs·u^ψ), sin(Δs·u^ψ))` in one term.
pub type ControlPowers = [u8; 4];

/// Noise moments referenced by one term: `(p_v, p_z, q_ψ, r_ψ)`, i.e. the
/// table keys `(p_v,0,0)` on speed, `(p_z,0,0)` on altitude and
/// `(0,q_ψ,r_ψ)` on heading.
pub type NoisePowers = [u8; 4];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionTerm {
    /// Basis index of the source monomial at step `k-1` (0 for the offset).
    pub source: usize,
    pub coeff: f64,
    pub control: ControlPowers,
    pub noise: NoisePowers,
}

/// Symbolic one-step recursion: for each basis monomial, the list of terms
/// whose expectation sums to its value at the next step.
#[derive(Debug, Clone)]
pub struct SymbolicExpansion {
    rows: Vec<Vec<ExpansionTerm>>,
}

impl SymbolicExpansion {
    pub fn rows(&self) -> &[Vec<ExpansionTerm>] {
        &self.rows
    }

    pub fn row(&self, target: usize) -> &[ExpansionTerm] {
        &self.rows[target]
    }

    pub fn term_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Highest noise power on each channel referenced anywhere.
    pub fn max_noise_powers(&self) -> [u32; 3] {
        let mut out = [0u32; 3];
        for t in self.rows.iter().flatten() {
            out[0] = out[0].max(t.noise[0] as u32);
            out[1] = out[1].max(t.noise[1] as u32);
            out[2] = out[2].max((t.noise[2] + t.noise[3]) as u32);
        }
        out
    }
}

/// Expands the augmented dynamics over the degree-`max_degree` basis.
pub fn build_expansion(max_degree: u32) -> Result<SymbolicExpansion> {
    if max_degree != MAX_DEGREE {
        return Err(Error::Config(format!(
            "moment expansion is fixed at degree {MAX_DEGREE}, got {max_degree}"
        )));
    }
    let basis = MomentBasis::global();
    type P = Poly<NV>;
    let v = P::var;
    // x' = x + (Δs u^v + Δs ω^v) cosψ
    let x_next = v(V_X).add(&v(A_V).add(&v(W_V)).mul(&v(V_C)));
    // y' = y + (Δs u^v + Δs ω^v) sinψ
    let y_next = v(V_Y).add(&v(A_V).add(&v(W_V)).mul(&v(V_S)));
    // z' = z + Δs u^z + Δs ω^z
    let z_next = v(V_Z).add(&v(A_Z)).add(&v(W_Z));
    // angle addition with a = Δs(u^ψ + ω^ψ)
    let cos_a = v(A_CU).mul(&v(W_C)).add(&v(A_SU).mul(&v(W_S)).scale(-1.0));
    let sin_a = v(A_SU).mul(&v(W_C)).add(&v(A_CU).mul(&v(W_S)));
    let c_next = v(V_C).mul(&cos_a).add(&v(V_S).mul(&sin_a).scale(-1.0));
    let s_next = v(V_S).mul(&cos_a).add(&v(V_C).mul(&sin_a));
    let updates = [x_next, y_next, z_next, c_next, s_next];
    let powers: Vec<Vec<P>> = updates
        .iter()
        .map(|u| (0..=max_degree).map(|n| u.pow(n)).collect())
        .collect();

    let mut rows = Vec::with_capacity(basis.len());
    for m in basis.monomials() {
        let mut poly = P::constant(1.0);
        for (var, &e) in m.exponents().iter().enumerate() {
            if e > 0 {
                poly = poly.mul(&powers[var][e as usize]);
            }
        }
        let mut terms = Vec::with_capacity(poly.len());
        for (exps, &coeff) in poly.terms() {
            let state = [exps[V_X], exps[V_Y], exps[V_Z], exps[V_C], exps[V_S]];
            let source = basis.index_of(state).ok_or_else(|| {
                Error::numerical("build_expansion", format!("source monomial {state:?} outside basis"))
            })?;
            terms.push(ExpansionTerm {
                source,
                coeff,
                control: [exps[A_V], exps[A_Z], exps[A_CU], exps[A_SU]],
                noise: [exps[W_V], exps[W_Z], exps[W_C], exps[W_S]],
            });
        }
        terms.sort_by(|a, b| {
            (a.source, a.control, a.noise)
                .partial_cmp(&(b.source, b.control, b.noise))
                .expect("integer keys")
        });
        rows.push(terms);
    }
    Ok(SymbolicExpansion { rows })
}

/// Noise tables for the three channels at a common scale `Δs`.
#[derive(Debug, Clone)]
pub struct ChannelTables {
    pub speed: TrigMomentTable,
    pub altitude: TrigMomentTable,
    pub heading: TrigMomentTable,
}

impl ChannelTables {
    pub fn build(noise: &NoiseSet, delta_s: f64) -> Result<Self> {
        Ok(ChannelTables {
            speed: build_moment_table(&noise.speed, delta_s, MAX_DEGREE)?,
            altitude: build_moment_table(&noise.altitude, delta_s, MAX_DEGREE)?,
            heading: build_moment_table(&noise.heading, delta_s, MAX_DEGREE)?,
        })
    }

    fn noise_factor(&self, noise: NoisePowers) -> Result<f64> {
        let missing = |what: &str| {
            Error::Config(format!(
                "noise table lacks entry {what} for powers {noise:?}; raise the table power cap"
            ))
        };
        let v = self
            .speed
            .get(noise[0] as u32, 0, 0)
            .ok_or_else(|| missing("speed"))?;
        let z = self
            .altitude
            .get(noise[1] as u32, 0, 0)
            .ok_or_else(|| missing("altitude"))?;
        let h = self
            .heading
            .get(0, noise[2] as u32, noise[3] as u32)
            .ok_or_else(|| missing("heading"))?;
        Ok(v * z * h)
    }
}

/// Fixed sparsity pattern (CSR) of the moment transition matrix.
#[derive(Debug)]
pub struct SparsePattern {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl SparsePattern {
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> std::ops::Range<usize> {
        self.row_ptr[r]..self.row_ptr[r + 1]
    }

    pub fn col(&self, e: usize) -> usize {
        self.cols[e]
    }
}

/// `m_k = A m_{k-1}` on the basis including the constant monomial, so the
/// offset `b` is the column of the constant monomial.
#[derive(Debug, Clone)]
pub struct StepTransition {
    pattern: Arc<SparsePattern>,
    values: Vec<f64>,
    control: Control,
}

impl StepTransition {
    pub fn control(&self) -> Control {
        self.control
    }

    pub fn pattern(&self) -> &SparsePattern {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Coefficient of source monomial `col` in target row `row`.
    pub fn coefficient(&self, row: usize, col: usize) -> f64 {
        self.pattern
            .row(row)
            .find(|&e| self.pattern.cols[e] == col)
            .map_or(0.0, |e| self.values[e])
    }

    /// Offset entry `b` of `row`.
    pub fn offset(&self, row: usize) -> f64 {
        if row == 0 {
            return 0.0;
        }
        self.coefficient(row, 0)
    }

    pub fn apply(&self, m: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for e in self.pattern.row(r) {
                acc += self.values[e] * m[self.pattern.cols[e]];
            }
            *o = acc;
        }
    }
}

/// `A·m + b`, with the time step advanced by one.
pub fn propagate(m: &MomentVector, t: &StepTransition) -> MomentVector {
    let mut out = vec![0.0; BASIS_LEN];
    t.apply(&m.values, &mut out);
    MomentVector {
        values: out,
        time_step: m.time_step + 1,
    }
}

#[derive(Debug)]
struct CompiledEntry {
    /// (coefficient, control monomial id)
    terms: Vec<(f64, usize)>,
}

/// The symbolic expansion with noise moments resolved for one noise
/// configuration and sampling interval. Immutable and cheap to share.
#[derive(Debug)]
pub struct MomentModel {
    delta_s: f64,
    pattern: Arc<SparsePattern>,
    entries: Vec<CompiledEntry>,
    control_monomials: Vec<ControlPowers>,
}

/// Tangent of a moment trajectory: row-major `BASIS_LEN × (3·T)` matrix of
/// `∂m_k/∂u` with controls flattened as `(u^v_0, u^z_0, u^ψ_0, u^v_1, …)`.
#[derive(Debug, Clone)]
pub struct Sensitivity {
    cols: usize,
    data: Vec<f64>,
}

impl Sensitivity {
    fn zeros(cols: usize) -> Self {
        Sensitivity {
            cols,
            data: vec![0.0; BASIS_LEN * cols],
        }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

impl MomentModel {
    /// Compiles `expansion` against the noise tables. All tables must share
    /// the same scale, which is the sampling interval.
    pub fn compile(expansion: &SymbolicExpansion, tables: &ChannelTables) -> Result<Self> {
        let delta_s = tables.speed.delta();
        if tables.altitude.delta() != delta_s || tables.heading.delta() != delta_s {
            return Err(Error::Config(
                "noise tables were built with different sampling intervals".into(),
            ));
        }
        let mut control_ids: BTreeMap<ControlPowers, usize> = BTreeMap::new();
        let mut row_ptr = vec![0usize];
        let mut cols = Vec::new();
        let mut entries = Vec::new();
        for row in expansion.rows() {
            let mut by_source: BTreeMap<usize, BTreeMap<ControlPowers, f64>> = BTreeMap::new();
            for term in row {
                let factor = term.coeff * tables.noise_factor(term.noise)?;
                if factor == 0.0 {
                    continue;
                }
                *by_source
                    .entry(term.source)
                    .or_default()
                    .entry(term.control)
                    .or_insert(0.0) += factor;
            }
            for (source, controls) in by_source {
                let mut terms = Vec::with_capacity(controls.len());
                for (powers, coef) in controls {
                    if coef == 0.0 {
                        continue;
                    }
                    let next_id = control_ids.len();
                    let id = *control_ids.entry(powers).or_insert(next_id);
                    terms.push((coef, id));
                }
                if terms.is_empty() {
                    continue;
                }
                cols.push(source);
                entries.push(CompiledEntry { terms });
            }
            row_ptr.push(cols.len());
        }
        let mut control_monomials = vec![[0u8; 4]; control_ids.len()];
        for (powers, id) in control_ids {
            control_monomials[id] = powers;
        }
        Ok(MomentModel {
            delta_s,
            pattern: Arc::new(SparsePattern { row_ptr, cols }),
            entries,
            control_monomials,
        })
    }

    /// Builds the expansion and tables for `noise` and compiles them.
    pub fn new(noise: &NoiseSet, delta_s: f64) -> Result<Self> {
        let expansion = shared_expansion();
        let tables = ChannelTables::build(noise, delta_s)?;
        MomentModel::compile(expansion, &tables)
    }

    pub fn delta_s(&self) -> f64 {
        self.delta_s
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    fn atom_powers(&self, u: &Control) -> ([f64; 6], [f64; 6], [f64; 6], [f64; 6]) {
        let ds = self.delta_s;
        let atoms = [ds * u.v, ds * u.z, (ds * u.psi).cos(), (ds * u.psi).sin()];
        let mut pw = [[1.0f64; 6]; 4];
        for (a, table) in atoms.iter().zip(pw.iter_mut()) {
            for n in 1..6 {
                table[n] = table[n - 1] * a;
            }
        }
        (pw[0], pw[1], pw[2], pw[3])
    }

    fn control_values(&self, u: &Control) -> Vec<f64> {
        let (pv, pz, pc, ps) = self.atom_powers(u);
        self.control_monomials
            .iter()
            .map(|c| pv[c[0] as usize] * pz[c[1] as usize] * pc[c[2] as usize] * ps[c[3] as usize])
            .collect()
    }

    /// Control monomial values and their partials w.r.t. `(u^v, u^z, u^ψ)`.
    fn control_values_with_partials(&self, u: &Control) -> (Vec<f64>, Vec<[f64; 3]>) {
        let ds = self.delta_s;
        let (pv, pz, pc, ps) = self.atom_powers(u);
        let mut vals = Vec::with_capacity(self.control_monomials.len());
        let mut partials = Vec::with_capacity(self.control_monomials.len());
        for c in &self.control_monomials {
            let (a, b, cc, d) = (c[0] as usize, c[1] as usize, c[2] as usize, c[3] as usize);
            let trig = pc[cc] * ps[d];
            vals.push(pv[a] * pz[b] * trig);
            let dv = if a > 0 { a as f64 * ds * pv[a - 1] * pz[b] * trig } else { 0.0 };
            let dz = if b > 0 { b as f64 * ds * pv[a] * pz[b - 1] * trig } else { 0.0 };
            let mut dtrig = 0.0;
            if cc > 0 {
                dtrig -= cc as f64 * pc[cc - 1] * ps[d + 1];
            }
            if d > 0 {
                dtrig += d as f64 * pc[cc + 1] * ps[d - 1];
            }
            let dpsi = ds * pv[a] * pz[b] * dtrig;
            partials.push([dv, dz, dpsi]);
        }
        (vals, partials)
    }

    /// Evaluates the recursion at control `u`.
    pub fn transition(&self, u: &Control) -> StepTransition {
        let cv = self.control_values(u);
        let values = self
            .entries
            .iter()
            .map(|e| e.terms.iter().map(|&(coef, id)| coef * cv[id]).sum())
            .collect();
        StepTransition {
            pattern: Arc::clone(&self.pattern),
            values,
            control: *u,
        }
    }

    /// Transition at `u` together with `∂A/∂u^v`, `∂A/∂u^z`, `∂A/∂u^ψ`
    /// (same sparsity pattern).
    pub fn transition_with_partials(&self, u: &Control) -> (StepTransition, [Vec<f64>; 3]) {
        let (cv, cp) = self.control_values_with_partials(u);
        let n = self.entries.len();
        let mut values = Vec::with_capacity(n);
        let mut d = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for (i, e) in self.entries.iter().enumerate() {
            let mut acc = 0.0;
            let mut acc_d = [0.0; 3];
            for &(coef, id) in &e.terms {
                acc += coef * cv[id];
                for k in 0..3 {
                    acc_d[k] += coef * cp[id][k];
                }
            }
            values.push(acc);
            for k in 0..3 {
                d[k][i] = acc_d[k];
            }
        }
        (
            StepTransition {
                pattern: Arc::clone(&self.pattern),
                values,
                control: *u,
            },
            d,
        )
    }

    /// Moments at steps `0..=controls.len()`, starting from `start`.
    pub fn rollout(&self, start: &MomentVector, controls: &[Control]) -> Vec<MomentVector> {
        let mut out = Vec::with_capacity(controls.len() + 1);
        out.push(start.clone());
        for u in controls {
            let t = self.transition(u);
            let next = propagate(out.last().expect("non-empty"), &t);
            out.push(next);
        }
        out
    }

    /// Like [`rollout`](Self::rollout), also returning `∂m_k/∂u` for every
    /// step `k`.
    pub fn rollout_with_sensitivity(
        &self,
        start: &MomentVector,
        controls: &[Control],
    ) -> (Vec<MomentVector>, Vec<Sensitivity>) {
        let horizon = controls.len();
        let cols = 3 * horizon;
        let mut moments = Vec::with_capacity(horizon + 1);
        let mut sens = Vec::with_capacity(horizon + 1);
        moments.push(start.clone());
        sens.push(Sensitivity::zeros(cols));
        for (k, u) in controls.iter().enumerate() {
            let (t, partials) = self.transition_with_partials(u);
            let prev_m = &moments[k];
            let prev_s = &sens[k];
            let mut next_m = vec![0.0; BASIS_LEN];
            let mut next_s = Sensitivity::zeros(cols);
            let active = 3 * k;
            for r in 0..BASIS_LEN {
                let out_row = &mut next_s.data[r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                let mut acc_d = [0.0; 3];
                for e in self.pattern.row(r) {
                    let c = self.pattern.cols[e];
                    let a = t.values[e];
                    let mc = prev_m.values[c];
                    acc += a * mc;
                    for j in 0..3 {
                        acc_d[j] += partials[j][e] * mc;
                    }
                    if active > 0 {
                        let src = &prev_s.data[c * cols..c * cols + active];
                        for (o, s) in out_row[..active].iter_mut().zip(src) {
                            *o += a * s;
                        }
                    }
                }
                next_m[r] = acc;
                out_row[active..active + 3].copy_from_slice(&acc_d);
            }
            moments.push(MomentVector {
                values: next_m,
                time_step: prev_m.time_step + 1,
            });
            sens.push(next_s);
        }
        (moments, sens)
    }
}

/// The degree-4 expansion, built once per process.
pub fn shared_expansion() -> &'static SymbolicExpansion {
    static EXPANSION: OnceLock<SymbolicExpansion> = OnceLock::new();
    EXPANSION.get_or_init(|| build_expansion(MAX_DEGREE).expect("degree-4 expansion"))
}

/// Evaluates the symbolic recursion at `u` with noise moments read from
/// `tables`.
pub fn build_transition(u: &Control, tables: &ChannelTables, expansion: &SymbolicExpansion) -> Result<StepTransition> {
    Ok(MomentModel::compile(expansion, tables)?.transition(u))
}

/// Monte Carlo estimate of the moment vector after `controls` from a
/// deterministic start, with per-entry standard errors.
///
/// Sample `i` is [`crate::sim::rollout_particle`] with index `i`, so the
/// estimate does not depend on how work is split across threads.
pub fn mc_moment_oracle(
    start: &TrueState,
    controls: &[Control],
    noise: &NoiseSet,
    delta_s: f64,
    n_samples: usize,
    seed: u64,
) -> Result<(MomentVector, Vec<f64>)> {
    if n_samples < 2 {
        return Err(Error::Usage("Monte Carlo oracle needs at least two samples".into()));
    }
    let basis = MomentBasis::global();
    let final_monomials = |i: usize| -> [f64; BASIS_LEN] {
        let end = sim::rollout_particle(start, controls, noise, delta_s, seed, i as u64);
        let vars = [end.x, end.y, end.z, end.psi.cos(), end.psi.sin()];
        let mut out = [0.0; BASIS_LEN];
        for (o, m) in out.iter_mut().zip(basis.monomials()) {
            *o = m.eval(&vars);
        }
        out
    };
    let shift = final_monomials(0);
    const CHUNK: usize = 8192;
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..n_samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s1 = vec![0.0; BASIS_LEN];
            let mut s2 = vec![0.0; BASIS_LEN];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_samples) {
                let v = final_monomials(i);
                for j in 0..BASIS_LEN {
                    let d = v[j] - shift[j];
                    s1[j] += d;
                    s2[j] += d * d;
                }
            }
            (s1, s2)
        })
        .collect();
    let mut s1 = vec![0.0; BASIS_LEN];
    let mut s2 = vec![0.0; BASIS_LEN];
    for (a, b) in &chunks {
        for j in 0..BASIS_LEN {
            s1[j] += a[j];
            s2[j] += b[j];
        }
    }
    let n = n_samples as f64;
    let mut mean = vec![0.0; BASIS_LEN];
    let mut se = vec![0.0; BASIS_LEN];
    for j in 0..BASIS_LEN {
        let m = s1[j] / n;
        mean[j] = shift[j] + m;
        let var = ((s2[j] - n * m * m) / (n - 1.0)).max(0.0);
        se[j] = (var / n).sqrt();
    }
    Ok((
        MomentVector {
            values: mean,
            time_step: controls.len() as i64,
        },
        se,
    ))
}
