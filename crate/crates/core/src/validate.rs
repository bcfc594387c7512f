//! Post-hoc checks of finished runs: particle validation of the logged
//! plans, run summaries and the moment-propagation oracle harness.

use std::io::Write;

use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::coordinator::RunLog;
use crate::error::{Error, Result};
use crate::moments::{moments_from_state, shared_expansion, mc_moment_oracle, ChannelTables, MomentBasis, MomentModel};
use crate::noise::Channel;
use crate::planner::straight_to_goal;
use crate::sim::{derive_seed, mc_rollout, pairwise_distance_stats, DistanceStats};
use crate::state::Control;

/// Seed-path tag of validation particles.
const TAG_VALIDATION: u64 = 3;

/// An agent counts as arrived once its true state is this close to the
/// destination.
pub const ARRIVAL_RADIUS: f64 = 1.0;

/// Particle statistics of one pair at one horizon step of the plans made
/// at one global step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairHorizonStats {
    pub step: usize,
    pub a: u32,
    pub b: u32,
    /// Offset into the horizon, `1..=T`.
    pub horizon_step: usize,
    pub stats: DistanceStats,
    /// Violation fraction within `ε`.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub epsilon: f64,
    pub d_min: f64,
    pub particles: usize,
    pub seed: u64,
    pub rows: Vec<PairHorizonStats>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Largest violation fraction; ties go to the smallest distance.
    pub fn worst_violation(&self) -> Option<&PairHorizonStats> {
        self.rows
            .iter()
            .max_by(|x, y| {
                x.stats
                    .violation_fraction
                    .total_cmp(&y.stats.violation_fraction)
                    .then(y.stats.min.total_cmp(&x.stats.min))
            })
    }

    pub fn min_distance(&self) -> f64 {
        self.rows.iter().map(|r| r.stats.min).fold(f64::INFINITY, f64::min)
    }

    pub fn violation_count(&self) -> usize {
        self.rows.iter().filter(|r| r.stats.violation_fraction > 0.0).count()
    }

    /// Columns: step, pair, horizon_step, min, q01, q25, q50, q75, q99,
    /// violation_fraction, pass.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step",
            "pair",
            "horizon_step",
            "min",
            "q01",
            "q25",
            "q50",
            "q75",
            "q99",
            "violation_fraction",
            "pass",
        ])?;
        for r in &self.rows {
            let s = &r.stats;
            w.write_record([
                r.step.to_string(),
                format!("{}-{}", r.a, r.b),
                r.horizon_step.to_string(),
                s.min.to_string(),
                s.q01.to_string(),
                s.q25.to_string(),
                s.q50.to_string(),
                s.q75.to_string(),
                s.q99.to_string(),
                s.violation_fraction.to_string(),
                r.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replays every plan of a completed run under `particles` fresh noise
/// realisations and compares pairwise particle distances with `d_min`.
///
/// Plans made at the same global step are paired, which is exactly the
/// pairing the later planner of each pair was constrained against.
pub fn mc_validate(log: &RunLog, particles: usize, seed: u64) -> Result<ValidationReport> {
    if !log.completed() {
        return Err(Error::Usage("run log is not complete".into()));
    }
    if log.steps.is_empty() {
        return Err(Error::Usage("run log has no steps".into()));
    }
    let noise = log.config.noise_set()?;
    let params = &log.config.planner;
    let mut rows = Vec::new();
    for rec in &log.steps {
        let sets = rec
            .plans
            .iter()
            .map(|p| {
                let s = derive_seed(seed, &[TAG_VALIDATION, rec.step as u64, p.owner as u64]);
                mc_rollout(&p.state, &p.message.controls, &noise, params.delta_s, particles, s)
            })
            .collect::<Result<Vec<_>>>()?;
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                let stats = pairwise_distance_stats(&sets[i], &sets[j], params.d_min)?;
                for s in stats.into_iter().skip(1) {
                    rows.push(PairHorizonStats {
                        step: rec.step,
                        a: rec.plans[i].owner,
                        b: rec.plans[j].owner,
                        horizon_step: s.step,
                        stats: s,
                        pass: s.violation_fraction <= params.epsilon,
                    });
                }
            }
        }
    }
    Ok(ValidationReport {
        epsilon: params.epsilon,
        d_min: params.d_min,
        particles,
        seed,
        rows,
    })
}

/// One bin of a clearance histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Histogram of the clearance `f = d² − d_min²` of one validated pair at
/// one horizon step, from the same particles as [`mc_validate`]. For
/// inspecting the unimodality the bound relies on.
pub fn clearance_histogram(log: &RunLog, row: &PairHorizonStats, particles: usize, seed: u64, bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Usage("histogram needs at least one bin".into()));
    }
    let rec = log
        .steps
        .iter()
        .find(|s| s.step == row.step)
        .ok_or_else(|| Error::Usage(format!("step {} not in log", row.step)))?;
    let noise = log.config.noise_set()?;
    let params = &log.config.planner;
    let mut sets = Vec::with_capacity(2);
    for owner in [row.a, row.b] {
        let p = rec
            .plans
            .iter()
            .find(|p| p.owner == owner)
            .ok_or_else(|| Error::Usage(format!("agent {owner} not in step {}", row.step)))?;
        let s = derive_seed(seed, &[TAG_VALIDATION, rec.step as u64, owner as u64]);
        sets.push(mc_rollout(&p.state, &p.message.controls, &noise, params.delta_s, particles, s)?);
    }
    let k = row.horizon_step;
    if k >= sets[0].step_count() {
        return Err(Error::Usage(format!("horizon step {k} out of range")));
    }
    let d2 = params.d_min * params.d_min;
    let f: Vec<f64> = sets[0].positions[k]
        .iter()
        .zip(&sets[1].positions[k])
        .map(|(p, q)| (0..3).map(|j| (p[j] - q[j]).powi(2)).sum::<f64>() - d2)
        .collect();
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for v in &f {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            low: lo + i as f64 * width,
            high: lo + (i + 1) as f64 * width,
            count,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentSummary {
    pub id: u32,
    /// Distance to the destination after the last step.
    pub arrival_error: f64,
    /// Time of the first step ending within [`ARRIVAL_RADIUS`].
    pub arrival_time: Option<f64>,
    pub fallbacks: usize,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub a: u32,
    pub b: u32,
    /// Smallest distance between one-step-ahead expected positions.
    pub min_mean_distance: f64,
    /// Smallest distance between realised states.
    pub min_true_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub completed: bool,
    pub agents: Vec<AgentSummary>,
    pub pairs: Vec<PairSummary>,
    pub fallbacks: usize,
    pub unsafe_plans: usize,
}

impl RunSummary {
    pub fn from_log(log: &RunLog) -> Result<Self> {
        if log.steps.is_empty() {
            return Err(Error::Usage("run log has no steps".into()));
        }
        let ids = log.agent_ids();
        let dt = log.config.planner.delta_s;
        let history = log.state_history();
        let last = history.last().expect("history holds the initial states");
        let agents = log
            .config
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let arrival_time = history
                    .iter()
                    .position(|states| states[i].distance_to(a.destination) <= ARRIVAL_RADIUS)
                    .map(|k| k as f64 * dt);
                let records: Vec<_> = log.steps.iter().map(|s| &s.plans[i]).collect();
                let fallbacks = records.iter().filter(|r| r.status.fallback).count();
                let mean_iterations =
                    records.iter().map(|r| r.status.iterations as f64).sum::<f64>() / records.len() as f64;
                AgentSummary {
                    id: a.id,
                    arrival_error: last[i].distance_to(a.destination),
                    arrival_time,
                    fallbacks,
                    mean_iterations,
                }
            })
            .collect::<Vec<_>>();
        let mut pairs = Vec::new();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                let pick = |list: &[crate::coordinator::PairDistance]| {
                    list.iter()
                        .filter(|p| (p.a, p.b) == (ids[i], ids[j]) || (p.a, p.b) == (ids[j], ids[i]))
                        .map(|p| p.distance)
                        .fold(f64::INFINITY, f64::min)
                };
                let min_mean_distance = log.steps.iter().map(|s| pick(&s.mean_distances)).fold(f64::INFINITY, f64::min);
                let min_true_distance = log.steps.iter().map(|s| pick(&s.true_distances)).fold(f64::INFINITY, f64::min);
                pairs.push(PairSummary {
                    a: ids[i],
                    b: ids[j],
                    min_mean_distance,
                    min_true_distance,
                });
            }
        }
        let plans = log.steps.iter().flat_map(|s| &s.plans);
        let unsafe_plans = plans.filter(|p| !p.status.safe).count();
        Ok(RunSummary {
            steps: log.steps.len(),
            completed: log.completed(),
            fallbacks: agents.iter().map(|a| a.fallbacks).sum(),
            agents,
            pairs,
            unsafe_plans,
        })
    }

    pub fn min_mean_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.min_mean_distance).fold(f64::INFINITY, f64::min)
    }

    /// Latest minus earliest arrival time; `None` if anyone never arrived.
    pub fn arrival_spread(&self) -> Option<f64> {
        let times: Option<Vec<f64>> = self.agents.iter().map(|a| a.arrival_time).collect();
        let times = times?;
        let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(hi - lo)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:>5} {:>14} {:>13} {:>10} {:>10}\n", "uav", "arrival_err_m", "arrival_t_s", "fallbacks", "mean_iter"));
        for a in &self.agents {
            let t = a.arrival_time.map_or("-".to_string(), |t| format!("{t:.1}"));
            s.push_str(&format!(
                "{:>5} {:>14.3} {:>13} {:>10} {:>10.1}\n",
                a.id, a.arrival_error, t, a.fallbacks, a.mean_iterations
            ));
        }
        s.push('\n');
        s.push_str(&format!("{:>7} {:>16} {:>16}\n", "pair", "min_mean_dist_m", "min_true_dist_m"));
        for p in &self.pairs {
            s.push_str(&format!(
                "{:>7} {:>16.3} {:>16.3}\n",
                format!("{}-{}", p.a, p.b),
                p.min_mean_distance,
                p.min_true_distance
            ));
        }
        s
    }

    /// Columns: kind, id, arrival_error, arrival_time, fallbacks,
    /// mean_iterations, min_mean_distance, min_true_distance. Agent rows
    /// leave the pair columns empty and vice versa.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "kind",
            "id",
            "arrival_error",
            "arrival_time",
            "fallbacks",
            "mean_iterations",
            "min_mean_distance",
            "min_true_distance",
        ])?;
        for a in &self.agents {
            w.write_record([
                "agent".to_string(),
                a.id.to_string(),
                a.arrival_error.to_string(),
                a.arrival_time.map_or(String::new(), |t| t.to_string()),
                a.fallbacks.to_string(),
                a.mean_iterations.to_string(),
                String::new(),
                String::new(),
            ])?;
        }
        for p in &self.pairs {
            w.write_record([
                "pair".to_string(),
                format!("{}-{}", p.a, p.b),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                p.min_mean_distance.to_string(),
                p.min_true_distance.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replaces one noise-table entry before compiling the model; a negative
/// control for the moment check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableCorruption {
    pub channel: Channel,
    pub key: (u32, u32, u32),
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentDeviation {
    pub agent: u32,
    /// Largest `|propagated − sampled| / SE` over the basis.
    pub max_normalized: f64,
    pub worst_entry: String,
    pub pass: bool,
}

/// Entries whose standard error vanishes are compared against this floor,
/// relative to the magnitude of the value.
const SE_FLOOR: f64 = 1e-9;

/// Propagates every agent's straight-to-goal controls over `steps` and
/// compares the final moments with `samples` Monte Carlo rollouts.
pub fn moments_check(
    config: &ScenarioConfig,
    steps: usize,
    samples: usize,
    seed: u64,
    corruption: Option<TableCorruption>,
) -> Result<Vec<MomentDeviation>> {
    if steps == 0 {
        return Err(Error::Usage("moments check needs at least one step".into()));
    }
    let noise = config.noise_set()?;
    let ds = config.planner.delta_s;
    let mut tables = ChannelTables::build(&noise, ds)?;
    if let Some(c) = corruption {
        let (p, q, r) = c.key;
        let t = match c.channel {
            Channel::Speed => &mut tables.speed,
            Channel::Altitude => &mut tables.altitude,
            Channel::Heading => &mut tables.heading,
        };
        *t = t.with_corrupted_entry(p, q, r, c.value);
    }
    let model = MomentModel::compile(shared_expansion(), &tables)?;
    let basis = MomentBasis::global();
    let mut params = config.planner;
    params.horizon = steps;
    params.previous_control = Control::ZERO;
    config
        .agents
        .iter()
        .map(|a| {
            let start = a.initial_state();
            let controls = straight_to_goal(&start, a.destination, &params);
            let propagated = model.rollout(&moments_from_state(&start), &controls);
            let last = propagated.last().expect("rollout includes the start");
            let s = derive_seed(seed, &[TAG_VALIDATION, a.id as u64]);
            let (estimate, se) = mc_moment_oracle(&start, &controls, &noise, ds, samples, s)?;
            let mut worst = (0.0, 0);
            for (j, ((p, m), e)) in last.values().iter().zip(estimate.values()).zip(&se).enumerate() {
                let z = (p - m).abs() / e.max(SE_FLOOR * (1.0 + p.abs()));
                if !(z <= worst.0) {
                    worst = (z, j);
                }
            }
            Ok(MomentDeviation {
                agent: a.id,
                max_normalized: worst.0,
                worst_entry: basis.monomial(worst.1).label(),
                pass: worst.0 <= 4.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NoiseConfig;
    use crate::coordinator::run_receding_horizon;

    fn small_config() -> ScenarioConfig {
        let mut c = ScenarioConfig::bundled("crossing_eps01").unwrap();
        c.agents.truncate(2);
        c.run.steps = 3;
        c.solver.starts = 2;
        c
    }

    #[test]
    fn validation_rows_cover_every_pair_and_horizon_step() {
        let c = small_config();
        let log = run_receding_horizon(&c, 5).unwrap();
        let v = mc_validate(&log, 50, 9).unwrap();
        assert_eq!(v.rows.len(), 3 * c.planner.horizon);
        assert!(v.rows.iter().all(|r| r.horizon_step >= 1 && r.horizon_step <= c.planner.horizon));
        let again = mc_validate(&log, 50, 9).unwrap();
        assert_eq!(v, again);
        let mut text = Vec::new();
        v.write_csv(&mut text).unwrap();
        assert_eq!(String::from_utf8(text).unwrap().lines().count(), v.rows.len() + 1);
        let h = clearance_histogram(&log, &v.rows[4], 50, 9, 7).unwrap();
        assert_eq!(h.len(), 7);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 50);
        // Same particles as the validation row.
        let d2 = c.planner.d_min * c.planner.d_min;
        assert!((h[0].low - (v.rows[4].stats.min.powi(2) - d2)).abs() < 1e-9);
    }

    #[test]
    fn noiseless_run_has_no_violations() {
        let mut c = small_config();
        c.noise = c.noise.collapsed();
        let log = run_receding_horizon(&c, 1).unwrap();
        let v = mc_validate(&log, 20, 2).unwrap();
        assert_eq!(v.violation_count(), 0);
        // Collapsed noise makes every particle the deterministic rollout.
        assert!(v.rows.iter().all(|r| r.stats.q01 == r.stats.q99));
    }

    #[test]
    fn summary_of_single_agent_run() {
        let mut c = small_config();
        c.agents.truncate(1);
        let log = run_receding_horizon(&c, 3).unwrap();
        let s = RunSummary::from_log(&log).unwrap();
        assert_eq!(s.agents.len(), 1);
        assert!(s.pairs.is_empty());
        assert_eq!(s.min_mean_distance(), f64::INFINITY);
        assert!(s.render_table().contains("arrival_err_m"));
        let start = c.agents[0].start;
        let d = ((start[0] - 0.0f64).powi(2) + (start[1] - 25.0f64).powi(2)).sqrt();
        assert!(s.agents[0].arrival_error < d);
    }

    #[test]
    fn moments_check_passes_and_catches_corruption() {
        let mut c = small_config();
        let ok = moments_check(&c, 5, 20_000, 4, None).unwrap();
        assert!(ok.iter().all(|d| d.pass), "{ok:?}");
        let bad = moments_check(
            &c,
            5,
            20_000,
            4,
            Some(TableCorruption {
                channel: Channel::Speed,
                key: (1, 0, 0),
                value: 0.05,
            }),
        )
        .unwrap();
        assert!(bad.iter().any(|d| !d.pass));
        c.noise = NoiseConfig::collapsed(&c.noise);
        let exact = moments_check(&c, 5, 10, 4, None).unwrap();
        assert!(exact.iter().all(|d| d.max_normalized < 1e-2), "{exact:?}");
    }

    #[test]
    fn incomplete_log_rejected() {
        let c = small_config();
        let mut log = run_receding_horizon(&c, 5).unwrap();
        log.steps.clear();
        assert!(mc_validate(&log, 10, 0).is_err());
        assert!(RunSummary::from_log(&log).is_err());
    }
}
