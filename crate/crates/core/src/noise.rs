//! Disturbance models and expectations of mixed trigonometric–polynomial
//! functions of a scalar disturbance.
//!
//! For a disturbance `θ` with characteristic function `Φ(t)`, the quantity
//! `E[(δθ)^p cos^q(δθ) sin^r(δθ)]` is obtained by writing cosine and sine as
//! complex exponentials, which turns the expectation into a finite double
//! binomial sum of `p`-th derivatives of `Φ(δt)` at the integer points
//! `t = 2(g + h) - q - r`. Everything the moment recursion needs from the
//! noise is read from a [`TrigMomentTable`] built once per channel.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Beta as BetaDist, Distribution as _, Normal, Uniform as UniformDist};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

/// Highest characteristic-function derivative order supported.
pub const MAX_DERIVATIVE_ORDER: u32 = 8;
/// Truncation tolerance of the Kummer series used for Beta disturbances.
pub const SERIES_TOLERANCE: f64 = 1e-12;
/// Iteration cap of the Kummer series.
pub const SERIES_MAX_TERMS: usize = 500;
/// Largest imaginary residue tolerated when extracting a real moment.
pub const IMAG_RESIDUE_TOLERANCE: f64 = 1e-9;

/// Control channel a disturbance acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    /// Horizontal speed, m/s.
    #[serde(rename = "speed_v")]
    Speed,
    /// Vertical speed, m/s.
    #[serde(rename = "altitude_z")]
    Altitude,
    /// Heading rate, rad/s.
    #[serde(rename = "heading_psi")]
    Heading,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Speed, Channel::Altitude, Channel::Heading];

    pub fn label(self) -> &'static str {
        match self {
            Channel::Speed => "speed_v",
            Channel::Altitude => "altitude_z",
            Channel::Heading => "heading_psi",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Channel::Speed => 0,
            Channel::Altitude => 1,
            Channel::Heading => 2,
        }
    }
}

/// Scalar disturbance law.
///
/// `PointMass` is the zero-variance law; it exists so that noise-free runs
/// go through exactly the same code paths as noisy ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    /// Beta law on the unit interval `[0, 1]`.
    Beta { alpha: f64, beta: f64 },
    Uniform { low: f64, high: f64 },
    /// `std` is the standard deviation, not the variance.
    Gaussian { mean: f64, std: f64 },
    PointMass { value: f64 },
}

impl Distribution {
    fn validate(&self) -> std::result::Result<(), String> {
        let finite = |v: f64, name: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be finite"))
            }
        };
        match *self {
            Distribution::Beta { alpha, beta } => {
                finite(alpha, "alpha")?;
                finite(beta, "beta")?;
                if alpha <= 0.0 || beta <= 0.0 {
                    return Err(format!("beta parameters must be positive, got ({alpha}, {beta})"));
                }
            }
            Distribution::Uniform { low, high } => {
                finite(low, "low")?;
                finite(high, "high")?;
                if low >= high {
                    return Err(format!("uniform requires low < high, got [{low}, {high}]"));
                }
            }
            Distribution::Gaussian { mean, std } => {
                finite(mean, "mean")?;
                finite(std, "std")?;
                if std <= 0.0 {
                    return Err(format!("gaussian std must be positive, got {std}"));
                }
            }
            Distribution::PointMass { value } => finite(value, "value")?,
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Beta { alpha, beta } => alpha / (alpha + beta),
            Distribution::Uniform { low, high } => 0.5 * (low + high),
            Distribution::Gaussian { mean, .. } => mean,
            Distribution::PointMass { value } => value,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Distribution::Beta { alpha, beta } => {
                let s = alpha + beta;
                alpha * beta / (s * s * (s + 1.0))
            }
            Distribution::Uniform { low, high } => (high - low).powi(2) / 12.0,
            Distribution::Gaussian { std, .. } => std * std,
            Distribution::PointMass { .. } => 0.0,
        }
    }

    /// True for laws symmetric about zero.
    pub fn is_centered_symmetric(&self) -> bool {
        match *self {
            Distribution::Uniform { low, high } => low == -high,
            Distribution::Gaussian { mean, .. } => mean == 0.0,
            Distribution::PointMass { value } => value == 0.0,
            Distribution::Beta { .. } => false,
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Distribution::Beta { alpha, beta } => write!(f, "Beta({alpha}, {beta})"),
            Distribution::Uniform { low, high } => write!(f, "Uniform({low}, {high})"),
            Distribution::Gaussian { mean, std } => write!(f, "Gaussian(mean={mean}, std={std})"),
            Distribution::PointMass { value } => write!(f, "PointMass({value})"),
        }
    }
}

/// A validated disturbance law attached to a control channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNoiseSpec", into = "RawNoiseSpec")]
pub struct NoiseSpec {
    channel: Channel,
    distribution: Distribution,
}

#[derive(Serialize, Deserialize)]
struct RawNoiseSpec {
    channel: Channel,
    distribution: Distribution,
}

impl TryFrom<RawNoiseSpec> for NoiseSpec {
    type Error = Error;
    fn try_from(raw: RawNoiseSpec) -> Result<Self> {
        NoiseSpec::new(raw.channel, raw.distribution)
    }
}

impl From<NoiseSpec> for RawNoiseSpec {
    fn from(spec: NoiseSpec) -> Self {
        RawNoiseSpec {
            channel: spec.channel,
            distribution: spec.distribution,
        }
    }
}

impl NoiseSpec {
    pub fn new(channel: Channel, distribution: Distribution) -> Result<Self> {
        distribution
            .validate()
            .map_err(|e| Error::InvalidNoise(format!("{}: {e}", channel.label())))?;
        Ok(NoiseSpec {
            channel,
            distribution,
        })
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn distribution(&self) -> &Distribution {
        &self.distribution
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.distribution {
            Distribution::Beta { alpha, beta } => BetaDist::new(alpha, beta)
                .expect("validated beta parameters")
                .sample(rng),
            Distribution::Uniform { low, high } => UniformDist::new_inclusive(low, high).sample(rng),
            Distribution::Gaussian { mean, std } => Normal::new(mean, std)
                .expect("validated gaussian parameters")
                .sample(rng),
            Distribution::PointMass { value } => value,
        }
    }
}

/// The three mutually independent channel disturbances of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSet {
    pub speed: NoiseSpec,
    pub altitude: NoiseSpec,
    pub heading: NoiseSpec,
}

impl NoiseSet {
    pub fn new(speed: Distribution, altitude: Distribution, heading: Distribution) -> Result<Self> {
        Ok(NoiseSet {
            speed: NoiseSpec::new(Channel::Speed, speed)?,
            altitude: NoiseSpec::new(Channel::Altitude, altitude)?,
            heading: NoiseSpec::new(Channel::Heading, heading)?,
        })
    }

    /// Beta(1, 3) on speed, N(0, 0.3²) on altitude rate, U[-0.1, 0.1] on
    /// heading rate.
    pub fn reference() -> Self {
        NoiseSet::new(
            Distribution::Beta {
                alpha: 1.0,
                beta: 3.0,
            },
            Distribution::Gaussian {
                mean: 0.0,
                std: 0.3,
            },
            Distribution::Uniform {
                low: -0.1,
                high: 0.1,
            },
        )
        .expect("constant parameters are valid")
    }

    /// Point masses at zero on every channel.
    pub fn noiseless() -> Self {
        let zero = Distribution::PointMass { value: 0.0 };
        NoiseSet::new(zero, zero, zero).expect("constant parameters are valid")
    }

    pub fn get(&self, channel: Channel) -> &NoiseSpec {
        match channel {
            Channel::Speed => &self.speed,
            Channel::Altitude => &self.altitude,
            Channel::Heading => &self.heading,
        }
    }
}

/// Selects `E[(δθ)^p cos^q(δθ) sin^r(δθ)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedTrigMomentKey {
    pub p: u32,
    pub q: u32,
    pub r: u32,
    pub delta: f64,
}

impl MixedTrigMomentKey {
    pub fn new(p: u32, q: u32, r: u32, delta: f64) -> Self {
        MixedTrigMomentKey { p, q, r, delta }
    }

    pub fn total_power(&self) -> u32 {
        self.p + self.q + self.r
    }
}

fn i_pow(n: u32) -> Complex64 {
    match n % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// `order`-th derivative of the characteristic function of `spec` at `t`.
pub fn char_fn_derivative(spec: &NoiseSpec, order: u32, t: f64) -> Result<Complex64> {
    if order > MAX_DERIVATIVE_ORDER {
        return Err(Error::Config(format!(
            "characteristic function derivative order {order} exceeds {MAX_DERIVATIVE_ORDER}"
        )));
    }
    if !t.is_finite() {
        return Err(Error::numerical(
            format!("char_fn_derivative({})", spec.distribution),
            format!("non-finite argument t={t}"),
        ));
    }
    let value = match spec.distribution {
        Distribution::Gaussian { mean, std } => gaussian_derivative(mean, std, order, t),
        Distribution::Uniform { low, high } => uniform_derivative(low, high, order, t),
        Distribution::Beta { alpha, beta } => beta_derivative(alpha, beta, order, t)
            .ok_or_else(|| {
                Error::numerical(
                    format!("char_fn_derivative({})", spec.distribution),
                    format!("Kummer series did not converge at t={t} within {SERIES_MAX_TERMS} terms"),
                )
            })?,
        Distribution::PointMass { value } => {
            i_pow(order) * value.powi(order as i32) * Complex64::new(0.0, t * value).exp()
        }
    };
    if !value.re.is_finite() || !value.im.is_finite() {
        return Err(Error::numerical(
            format!("char_fn_derivative({})", spec.distribution),
            format!("non-finite value at t={t}"),
        ));
    }
    Ok(value)
}

/// `Φ(t) = exp(iμt − σ²t²/2)`; `Φ^{(n)} = P_n Φ` with
/// `P_{n+1} = P_n' + (iμ − σ²t) P_n`.
fn gaussian_derivative(mean: f64, std: f64, order: u32, t: f64) -> Complex64 {
    let var = std * std;
    let mut poly: Vec<Complex64> = vec![Complex64::new(1.0, 0.0)];
    for _ in 0..order {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (k, c) in poly.iter().enumerate().skip(1) {
            next[k - 1] += c * k as f64;
        }
        for (k, c) in poly.iter().enumerate() {
            next[k] += c * Complex64::new(0.0, mean);
            next[k + 1] += c * (-var);
        }
        poly = next;
    }
    let mut p_at_t = Complex64::new(0.0, 0.0);
    for c in poly.iter().rev() {
        p_at_t = p_at_t * t + c;
    }
    let phi = Complex64::new(-0.5 * var * t * t, mean * t).exp();
    p_at_t * phi
}

/// `Φ^{(n)}(t) = i^n/(b−a) ∫_a^b ω^n e^{itω} dω`.
fn uniform_derivative(low: f64, high: f64, order: u32, t: f64) -> Complex64 {
    let scale = low.abs().max(high.abs());
    let integral = if (t * scale).abs() <= 4.0 {
        // Power series of the exponential; entire in t and stable for small |t|.
        let it = Complex64::new(0.0, t);
        let n = order as i32;
        let mut sum = Complex64::new(0.0, 0.0);
        let mut coef = Complex64::new(1.0, 0.0);
        // |t|^k M^{n+k+1} / k!, an upper bound on the k-th term
        let mut bound = scale.powi(n + 1);
        for k in 0..200 {
            let m = n + k + 1;
            let span = high.powi(m) - low.powi(m);
            sum += coef * (span / m as f64);
            if bound <= 1e-17 * sum.norm() || bound == 0.0 {
                break;
            }
            coef = coef * it / (k + 1) as f64;
            bound *= (t * scale).abs() / (k + 1) as f64;
        }
        sum
    } else {
        // Antiderivative of ω^n e^{itω} obtained by repeated integration by parts.
        let it = Complex64::new(0.0, t);
        let antiderivative = |w: f64| {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut falling = 1.0;
            let mut it_pow = it;
            for k in 0..=order {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * falling * w.powi((order - k) as i32) / it_pow;
                falling *= (order - k) as f64;
                it_pow *= it;
            }
            acc * Complex64::new(0.0, t * w).exp()
        };
        antiderivative(high) - antiderivative(low)
    };
    i_pow(order) * integral / (high - low)
}

/// `Φ^{(n)}(t) = i^n Σ_k (it)^k/k! μ_{n+k}` with Beta raw moments
/// `μ_m = Π_{j<m} (α+j)/(α+β+j)`, i.e. the derivative of Kummer's `₁F₁`.
fn beta_derivative(alpha: f64, beta: f64, order: u32, t: f64) -> Option<Complex64> {
    let ab = alpha + beta;
    let mut mu_n = 1.0;
    for j in 0..order {
        mu_n *= (alpha + j as f64) / (ab + j as f64);
    }
    let mut sum = Complex64::new(0.0, 0.0);
    // coef = t^k / k! * μ_{n+k}
    let mut coef = mu_n;
    for k in 0..SERIES_MAX_TERMS {
        sum += i_pow(order + k as u32) * coef;
        let m = (order as usize + k) as f64;
        let ratio = t / (k + 1) as f64 * (alpha + m) / (ab + m);
        if ratio.abs() < 1.0 && coef.abs() <= SERIES_TOLERANCE * sum.norm().max(f64::MIN_POSITIVE) {
            return Some(sum);
        }
        coef *= ratio;
        if coef == 0.0 {
            return Some(sum);
        }
    }
    None
}

/// `E[(δθ)^p cos^q(δθ) sin^r(δθ)]`.
pub fn mixed_trig_moment(spec: &NoiseSpec, key: &MixedTrigMomentKey) -> Result<f64> {
    let MixedTrigMomentKey { p, q, r, delta } = *key;
    if p > MAX_DERIVATIVE_ORDER {
        return Err(Error::Config(format!(
            "polynomial power {p} exceeds supported cap {MAX_DERIVATIVE_ORDER}"
        )));
    }
    let delta_p = delta.powi(p as i32);
    let mut acc = Complex64::new(0.0, 0.0);
    for g in 0..=q {
        for h in 0..=r {
            let weight = binomial(q, g) * binomial(r, h) * if (r - h) % 2 == 0 { 1.0 } else { -1.0 };
            let t = (2 * (g + h)) as f64 - (q + r) as f64;
            acc += weight * delta_p * char_fn_derivative(spec, p, delta * t)?;
        }
    }
    let value = acc / (i_pow(p + r) * 2f64.powi((q + r) as i32));
    if value.im.abs() > IMAG_RESIDUE_TOLERANCE * value.re.abs().max(1.0) {
        return Err(Error::numerical(
            format!("mixed_trig_moment({}, p={p}, q={q}, r={r}, delta={delta})", spec.distribution),
            format!("imaginary residue {:.3e}", value.im),
        ));
    }
    Ok(value.re)
}

pub(crate) fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// Independent check of [`mixed_trig_moment`]: integrates the integrand
/// against the density with composite Gauss–Legendre (four panels of
/// `nodes / 4` points). Gaussian support is truncated at ±10σ.
pub fn quadrature_moment_oracle(spec: &NoiseSpec, key: &MixedTrigMomentKey, nodes: usize) -> Result<f64> {
    if nodes < 64 {
        return Err(Error::Usage(format!("quadrature needs at least 64 nodes, got {nodes}")));
    }
    let MixedTrigMomentKey { p, q, r, delta } = *key;
    let integrand = |theta: f64| {
        let a = delta * theta;
        a.powi(p as i32) * a.cos().powi(q as i32) * a.sin().powi(r as i32)
    };
    let per_panel = nodes / 4;
    let value = match spec.distribution {
        Distribution::Beta { alpha, beta } => {
            let log_norm = ln_beta(alpha, beta);
            quadrature::integrate(
                |x| {
                    if x <= 0.0 || x >= 1.0 {
                        return 0.0;
                    }
                    let density = ((alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - log_norm).exp();
                    density * integrand(x)
                },
                0.0,
                1.0,
                4,
                per_panel,
            )
        }
        Distribution::Uniform { low, high } => {
            quadrature::integrate(integrand, low, high, 4, per_panel) / (high - low)
        }
        Distribution::Gaussian { mean, std } => {
            let norm = 1.0 / (std * (2.0 * std::f64::consts::PI).sqrt());
            quadrature::integrate(
                |x| {
                    let z = (x - mean) / std;
                    norm * (-0.5 * z * z).exp() * integrand(x)
                },
                mean - 10.0 * std,
                mean + 10.0 * std,
                4,
                per_panel,
            )
        }
        Distribution::PointMass { value } => integrand(value),
    };
    if !value.is_finite() {
        return Err(Error::numerical("quadrature_moment_oracle", "non-finite result"));
    }
    Ok(value)
}

/// `ln B(a, b)` via the Lanczos log-gamma.
fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Precomputed mixed moments of one channel at a fixed scale `δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigMomentTable {
    spec: NoiseSpec,
    delta: f64,
    max_total_power: u32,
    entries: BTreeMap<(u32, u32, u32), f64>,
}

impl TrigMomentTable {
    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn max_total_power(&self) -> u32 {
        self.max_total_power
    }

    pub fn get(&self, p: u32, q: u32, r: u32) -> Option<f64> {
        self.entries.get(&(p, q, r)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MixedTrigMomentKey, f64)> + '_ {
        self.entries
            .iter()
            .map(|(&(p, q, r), &v)| (MixedTrigMomentKey::new(p, q, r, self.delta), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Returns a copy with one entry overwritten. Used to build negative
    /// controls for the moment oracle harness.
    pub fn with_corrupted_entry(&self, p: u32, q: u32, r: u32, value: f64) -> Self {
        let mut out = self.clone();
        out.entries.insert((p, q, r), value);
        out
    }

    #[cfg(test)]
    pub(crate) fn without_entry(&self, p: u32, q: u32, r: u32) -> Self {
        let mut out = self.clone();
        out.entries.remove(&(p, q, r));
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["channel", "p", "q", "r", "delta", "value"])?;
        for (key, value) in self.iter() {
            w.write_record([
                self.spec.channel().label().to_string(),
                key.p.to_string(),
                key.q.to_string(),
                key.r.to_string(),
                key.delta.to_string(),
                value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tabulates every entry with `p + q + r <= max_total_power`.
pub fn build_moment_table(spec: &NoiseSpec, delta: f64, max_total_power: u32) -> Result<TrigMomentTable> {
    if max_total_power < 4 {
        return Err(Error::Config(format!(
            "moment table needs max_total_power >= 4, got {max_total_power}"
        )));
    }
    if max_total_power > MAX_DERIVATIVE_ORDER {
        return Err(Error::Config(format!(
            "moment table power cap {max_total_power} exceeds {MAX_DERIVATIVE_ORDER}"
        )));
    }
    if !delta.is_finite() {
        return Err(Error::Config(format!("moment table scale must be finite, got {delta}")));
    }
    let mut entries = BTreeMap::new();
    for p in 0..=max_total_power {
        for q in 0..=(max_total_power - p) {
            for r in 0..=(max_total_power - p - q) {
                let value = if p + q + r == 0 {
                    1.0
                } else {
                    mixed_trig_moment(spec, &MixedTrigMomentKey::new(p, q, r, delta))?
                };
                if !value.is_finite() {
                    return Err(Error::numerical(
                        "build_moment_table",
                        format!("entry ({p},{q},{r}) is not finite"),
                    ));
                }
                entries.insert((p, q, r), value);
            }
        }
    }
    Ok(TrigMomentTable {
        spec: *spec,
        delta,
        max_total_power,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn beta13() -> NoiseSpec {
        NoiseSpec::new(Channel::Speed, Distribution::Beta { alpha: 1.0, beta: 3.0 }).unwrap()
    }
    fn uniform01() -> NoiseSpec {
        NoiseSpec::new(Channel::Heading, Distribution::Uniform { low: -0.1, high: 0.1 }).unwrap()
    }
    fn gauss03() -> NoiseSpec {
        NoiseSpec::new(Channel::Altitude, Distribution::Gaussian { mean: 0.0, std: 0.3 }).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSpec::new(Channel::Speed, Distribution::Beta { alpha: 0.0, beta: 1.0 }).is_err());
        assert!(NoiseSpec::new(Channel::Speed, Distribution::Uniform { low: 1.0, high: 1.0 }).is_err());
        assert!(NoiseSpec::new(Channel::Speed, Distribution::Gaussian { mean: 0.0, std: -1.0 }).is_err());
        assert!(NoiseSpec::new(Channel::Speed, Distribution::PointMass { value: f64::NAN }).is_err());
    }

    #[test]
    fn char_fn_is_one_at_origin() {
        for spec in [beta13(), uniform01(), gauss03()] {
            let v = char_fn_derivative(&spec, 0, 0.0).unwrap();
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn gaussian_char_fn_closed_form() {
        let s = gauss03();
        for t in [-3.0, -0.4, 0.7, 5.0] {
            let v = char_fn_derivative(&s, 0, t).unwrap();
            assert!((v.re - (-0.5 * 0.09 * t * t).exp()).abs() < 1e-15);
            assert!(v.im.abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_char_fn_closed_form_both_branches() {
        let spec = NoiseSpec::new(Channel::Heading, Distribution::Uniform { low: -2.0, high: 2.0 }).unwrap();
        // 0.5 uses the power series, 7.0 the integration-by-parts branch.
        for t in [0.5, 7.0, -3.1] {
            let v = char_fn_derivative(&spec, 0, t).unwrap();
            let exact = (2.0 * t).sin() / (2.0 * t);
            assert!((v.re - exact).abs() < 1e-13, "t={t}");
            assert!(v.im.abs() < 1e-13);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let specs = [
            beta13(),
            uniform01(),
            gauss03(),
            NoiseSpec::new(Channel::Heading, Distribution::Uniform { low: -1.5, high: 2.5 }).unwrap(),
        ];
        let h = 1e-4;
        for spec in specs {
            for order in 0..6 {
                for t in [-2.3, 0.0, 0.8, 4.1] {
                    let fd = (char_fn_derivative(&spec, order, t + h).unwrap()
                        - char_fn_derivative(&spec, order, t - h).unwrap())
                        / (2.0 * h);
                    let d = char_fn_derivative(&spec, order + 1, t).unwrap();
                    assert!((fd - d).norm() < 1e-6 * d.norm().max(1.0), "{spec:?} n={order} t={t}");
                }
            }
        }
    }

    #[test]
    fn spec_examples() {
        let u = mixed_trig_moment(&uniform01(), &MixedTrigMomentKey::new(0, 0, 1, 0.1)).unwrap();
        assert!(u.abs() < 1e-15);
        let m1 = mixed_trig_moment(&beta13(), &MixedTrigMomentKey::new(1, 0, 0, 1.0)).unwrap();
        assert!((m1 - 0.25).abs() < 1e-12);
        let m2 = mixed_trig_moment(&beta13(), &MixedTrigMomentKey::new(2, 0, 0, 1.0)).unwrap();
        assert!((m2 - 0.1).abs() < 1e-12);
        let c = mixed_trig_moment(&gauss03(), &MixedTrigMomentKey::new(0, 1, 0, 0.1)).unwrap();
        assert!((c - (-0.5 * (0.1f64 * 0.3).powi(2)).exp()).abs() < 1e-15);
    }

    #[test]
    fn oracle_agrees_on_all_low_order_keys() {
        for spec in [beta13(), uniform01(), gauss03()] {
            for delta in [0.1, 1.0, 2.5] {
                for p in 0..=4 {
                    for q in 0..=(4 - p) {
                        for r in 0..=(4 - p - q) {
                            let key = MixedTrigMomentKey::new(p, q, r, delta);
                            let a = mixed_trig_moment(&spec, &key).unwrap();
                            let b = quadrature_moment_oracle(&spec, &key, 256).unwrap();
                            assert!((a - b).abs() <= 1e-8, "{spec:?} {key:?}: {a} vs {b}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_basic_values() {
        let one = quadrature_moment_oracle(&uniform01(), &MixedTrigMomentKey::new(0, 0, 0, 0.1), 64).unwrap();
        assert!((one - 1.0).abs() < 1e-14);
        let mean = quadrature_moment_oracle(&beta13(), &MixedTrigMomentKey::new(1, 0, 0, 1.0), 64).unwrap();
        assert!((mean - 0.25).abs() < 1e-12);
        assert!(quadrature_moment_oracle(&beta13(), &MixedTrigMomentKey::new(1, 0, 0, 1.0), 32).is_err());
    }

    #[test]
    fn table_contents() {
        let t = build_moment_table(&uniform01(), 0.1, 4).unwrap();
        assert_eq!(t.get(0, 0, 0), Some(1.0));
        let x: f64 = 0.1 * 0.1;
        assert!((t.get(0, 1, 0).unwrap() - x.sin() / x).abs() < 1e-15);
        let g = build_moment_table(&gauss03(), 0.1, 4).unwrap();
        assert!(g.get(3, 0, 0).unwrap().abs() < 1e-15);
        assert!(build_moment_table(&gauss03(), 0.1, 3).is_err());
        assert_eq!(t.len(), 35);
    }

    #[test]
    fn series_cap_reports_numerical_failure() {
        let err = char_fn_derivative(&beta13(), 2, 1e4).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }));
        assert!(err.to_string().contains("t=10000"));
    }

    #[test]
    fn point_mass_moments_are_literal() {
        let spec = NoiseSpec::new(Channel::Heading, Distribution::PointMass { value: 0.3 }).unwrap();
        let key = MixedTrigMomentKey::new(2, 1, 1, 0.5);
        let a = 0.15f64;
        let expected = a * a * a.cos() * a.sin();
        assert!((mixed_trig_moment(&spec, &key).unwrap() - expected).abs() < 1e-14);
    }

    fn law() -> impl Strategy<Value = Distribution> {
        prop_oneof![
            (0.5..6.0f64, 0.5..6.0f64).prop_map(|(alpha, beta)| Distribution::Beta { alpha, beta }),
            (-1.0..1.0f64, 0.01..2.0f64).prop_map(|(low, w)| Distribution::Uniform { low, high: low + w }),
            (-1.0..1.0f64, 0.0..1.0f64).prop_map(|(mean, std)| Distribution::Gaussian { mean, std }),
            (-1.0..1.0f64).prop_map(|value| Distribution::PointMass { value }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn tables_are_finite_normalised_and_consistent(
            dist in law(),
            channel in prop_oneof![Just(Channel::Speed), Just(Channel::Altitude), Just(Channel::Heading)],
            delta in 0.01..0.5f64,
        ) {
            let spec = NoiseSpec::new(channel, dist).unwrap();
            let t = build_moment_table(&spec, delta, 4).unwrap();
            prop_assert_eq!(t.get(0, 0, 0), Some(1.0));
            for p in 0..=4u32 {
                for q in 0..=4 - p {
                    for r in 0..=4 - p - q {
                        prop_assert!(t.get(p, q, r).unwrap().is_finite());
                    }
                }
            }
            let trig = t.get(0, 2, 0).unwrap() + t.get(0, 0, 2).unwrap();
            prop_assert!((trig - 1.0).abs() < 1e-12, "cos^2 + sin^2 = {}", trig);
            let (m1, m2) = (t.get(1, 0, 0).unwrap(), t.get(2, 0, 0).unwrap());
            prop_assert!(m2 >= m1 * m1 - 1e-12 * (1.0 + m2.abs()));
            prop_assert!(t.get(4, 0, 0).unwrap() >= -1e-15);
        }
    }
}
