//! Sequential-broadcast receding-horizon loop.
//!
//! At every global step agents plan in ascending id order. Agent `μ` sees
//! the plans already broadcast at this step by lower ids and the previous
//! step's plans of higher ids, shifted by one step with the last moment
//! held. After everyone has planned, each agent applies its first control
//! under one fresh disturbance draw per channel.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::moments::{moments_from_state, MomentModel, MomentVector};
use crate::planner::{self, AlignedPlan, HorizonPlan, PlanOptions, PlanRequest, PlanStatus};
use crate::sim::{derive_seed, sample_noise, step_truth, NoiseStreams};
use crate::state::{Control, NoiseSample, TrueState};

/// Seed-path tags.
const TAG_NOISE: u64 = 1;
const TAG_PLANNER: u64 = 2;

/// Broadcast payload: moments at steps `planned_at+1 ..= planned_at+T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMessage {
    pub sender: u32,
    pub planned_at: i64,
    pub moments: Vec<MomentVector>,
    pub controls: Vec<Control>,
}

impl PlanMessage {
    pub fn from_plan(plan: &HorizonPlan) -> Self {
        PlanMessage {
            sender: plan.owner,
            planned_at: plan.planned_at,
            moments: plan.broadcast_moments().to_vec(),
            controls: plan.controls.clone(),
        }
    }
}

/// Which broadcast a planner consumed for one partner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumedPlan {
    pub owner: u32,
    pub planned_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub owner: u32,
    /// Exact state the plan started from.
    pub state: TrueState,
    pub previous_control: Control,
    pub start_moments: MomentVector,
    pub consumed: Vec<ConsumedPlan>,
    pub status: PlanStatus,
    pub message: PlanMessage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: u32,
    pub b: u32,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// In planning order.
    pub plans: Vec<PlanRecord>,
    pub applied: Vec<Control>,
    pub noise: Vec<NoiseSample>,
    pub states_after: Vec<TrueState>,
    /// Distances between the one-step-ahead expected positions of the
    /// plans made at this step.
    pub mean_distances: Vec<PairDistance>,
    /// Distances between the realised states after the step.
    pub true_distances: Vec<PairDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Aborted { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub initial_states: Vec<TrueState>,
    pub bootstrap: Vec<PlanMessage>,
    pub steps: Vec<StepRecord>,
    pub outcome: RunOutcome,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Header {
        config: ScenarioConfig,
        seed: u64,
        initial_states: Vec<TrueState>,
    },
    Bootstrap {
        message: PlanMessage,
    },
    Step(StepRecord),
    Outcome(RunOutcome),
}

impl RunLog {
    pub fn agent_ids(&self) -> Vec<u32> {
        self.config.agents.iter().map(|a| a.id).collect()
    }

    pub fn completed(&self) -> bool {
        self.outcome == RunOutcome::Completed
    }

    /// True states at steps `0..=K` per agent (`[k][agent]`).
    pub fn state_history(&self) -> Vec<Vec<TrueState>> {
        let mut out = vec![self.initial_states.clone()];
        out.extend(self.steps.iter().map(|s| s.states_after.clone()));
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let mut line = |l: &LogLine| -> Result<()> {
            serde_json::to_writer(&mut out, l)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        line(&LogLine::Header {
            config: self.config.clone(),
            seed: self.seed,
            initial_states: self.initial_states.clone(),
        })?;
        for m in &self.bootstrap {
            line(&LogLine::Bootstrap { message: m.clone() })?;
        }
        for s in &self.steps {
            line(&LogLine::Step(s.clone()))?;
        }
        line(&LogLine::Outcome(self.outcome.clone()))?;
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<RunLog> {
        let mut header = None;
        let mut bootstrap = Vec::new();
        let mut steps = Vec::new();
        let mut outcome = None;
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line)
                .map_err(|e| Error::Protocol(format!("run log line {}: {e}", n + 1)))?;
            match parsed {
                LogLine::Header {
                    config,
                    seed,
                    initial_states,
                } => header = Some((config, seed, initial_states)),
                LogLine::Bootstrap { message } => bootstrap.push(message),
                LogLine::Step(s) => steps.push(s),
                LogLine::Outcome(o) => outcome = Some(o),
            }
        }
        let (config, seed, initial_states) = header.ok_or_else(|| Error::Protocol("run log has no header".into()))?;
        let outcome = outcome.ok_or_else(|| Error::Protocol("run log has no outcome record".into()))?;
        Ok(RunLog {
            config,
            seed,
            initial_states,
            bootstrap,
            steps,
            outcome,
        })
    }

    pub fn load(path: &Path) -> Result<RunLog> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }

    /// Rows `step, uav, x, y, z, psi, u_v, u_z, u_psi`; the final row of
    /// each agent has empty control fields.
    pub fn write_trajectories_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "uav", "x", "y", "z", "psi", "u_v", "u_z", "u_psi"])?;
        let ids = self.agent_ids();
        let history = self.state_history();
        for (k, states) in history.iter().enumerate() {
            for (a, s) in states.iter().enumerate() {
                let mut row = vec![
                    k.to_string(),
                    ids[a].to_string(),
                    s.x.to_string(),
                    s.y.to_string(),
                    s.z.to_string(),
                    s.psi.to_string(),
                ];
                match self.steps.get(k) {
                    Some(step) => {
                        let u = step.applied[a];
                        row.extend([u.v.to_string(), u.z.to_string(), u.psi.to_string()]);
                    }
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Zero-control plan with moments propagated from the start state, dated
/// one step before the run begins.
pub fn bootstrap_plans(config: &ScenarioConfig, model: &MomentModel) -> Vec<HorizonPlan> {
    let t = config.planner.horizon;
    config
        .agents
        .iter()
        .map(|a| {
            let state = a.initial_state();
            let start = moments_from_state(&state).with_time_step(-1);
            let controls = vec![Control::ZERO; t];
            let moments = model.rollout(&start, &controls);
            HorizonPlan {
                owner: a.id,
                planned_at: -1,
                slacks: vec![[0.0; 3]; t],
                controls,
                moments,
                status: PlanStatus {
                    fallback: false,
                    safe: true,
                    objective: 0.0,
                    max_violation: 0.0,
                    converged: true,
                    iterations: 0,
                    start_index: 0,
                    starts: 0,
                    worst_bound: 0.0,
                },
            }
        })
        .collect()
}

/// Re-dates a broadcast to cover `planned_at+1 ..= planned_at+T`: entries
/// already in the past are dropped and the last one is held.
pub fn align_plan(message: &PlanMessage, planned_at: i64, horizon: usize) -> Result<AlignedPlan> {
    let offset = planned_at - message.planned_at;
    if offset < 0 {
        return Err(Error::Protocol(format!(
            "plan of agent {} dated {} is newer than planning step {planned_at}",
            message.sender, message.planned_at
        )));
    }
    let last = message
        .moments
        .last()
        .ok_or_else(|| Error::Protocol(format!("plan of agent {} is empty", message.sender)))?;
    let moments = (0..horizon)
        .map(|k| {
            let src = message.moments.get(offset as usize + k).unwrap_or(last);
            src.clone().with_time_step(planned_at + 1 + k as i64)
        })
        .collect();
    Ok(AlignedPlan {
        owner: message.sender,
        source_planned_at: message.planned_at,
        moments,
    })
}

fn pair_distances(ids: &[u32], points: &[[f64; 3]]) -> Vec<PairDistance> {
    let mut out = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let (p, q) = (points[i], points[j]);
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            out.push(PairDistance {
                a: ids[i],
                b: ids[j],
                distance: d,
            });
        }
    }
    out
}

/// Runs the scenario for `config.run.steps` global steps. Configuration
/// problems are errors; protocol failures end the run early with an
/// aborted outcome in the returned log.
pub fn run_receding_horizon(config: &ScenarioConfig, seed: u64) -> Result<RunLog> {
    run_with_observer(config, seed, |_| {})
}

/// As [`run_receding_horizon`], calling `observer` after every step.
pub fn run_with_observer(config: &ScenarioConfig, seed: u64, mut observer: impl FnMut(&StepRecord)) -> Result<RunLog> {
    config.validate()?;
    let noise = config.noise_set()?;
    let model = MomentModel::new(&noise, config.planner.delta_s)?;
    let t = config.planner.horizon;
    let ids: Vec<u32> = config.agents.iter().map(|a| a.id).collect();
    let mut states: Vec<TrueState> = config.agents.iter().map(|a| a.initial_state()).collect();
    let mut current = bootstrap_plans(config, &model);
    let mut applied = vec![Control::ZERO; ids.len()];
    let mut streams: Vec<NoiseStreams> = ids
        .iter()
        .map(|&id| NoiseStreams::new(seed, &[TAG_NOISE, id as u64]))
        .collect();
    let opts = PlanOptions {
        starts: config.solver.starts,
        seed: derive_seed(seed, &[TAG_PLANNER]),
        solver: config.solver.options,
        extra_starts: Vec::new(),
    };
    let mut log = RunLog {
        config: config.clone(),
        seed,
        initial_states: states.clone(),
        bootstrap: current.iter().map(PlanMessage::from_plan).collect(),
        steps: Vec::with_capacity(config.run.steps),
        outcome: RunOutcome::Completed,
    };

    for k in 0..config.run.steps {
        let planned_at = k as i64;
        let mut records = Vec::with_capacity(ids.len());
        for (mu, agent) in config.agents.iter().enumerate() {
            let mut others = Vec::with_capacity(ids.len() - 1);
            for (i, plan) in current.iter().enumerate() {
                if i == mu {
                    continue;
                }
                let expected = if i < mu { planned_at } else { planned_at - 1 };
                if plan.planned_at != expected {
                    log.outcome = RunOutcome::Aborted {
                        step: k,
                        reason: format!(
                            "agent {} holds a plan of agent {} dated {}, expected {expected}",
                            agent.id, plan.owner, plan.planned_at
                        ),
                    };
                    return Ok(log);
                }
                match align_plan(&PlanMessage::from_plan(plan), planned_at, t) {
                    Ok(a) => others.push(a),
                    Err(e) => {
                        log.outcome = RunOutcome::Aborted {
                            step: k,
                            reason: e.to_string(),
                        };
                        return Ok(log);
                    }
                }
            }
            let params = config.planner.with_previous_control(applied[mu]);
            let req = PlanRequest {
                owner: agent.id,
                planned_at,
                state: states[mu],
                destination: agent.destination,
                others: &others,
                previous_plan: Some(&current[mu]),
            };
            let plan = match planner::plan(&model, &req, &params, &opts) {
                Ok(p) => p,
                Err(Error::Protocol(reason)) => {
                    log.outcome = RunOutcome::Aborted { step: k, reason };
                    return Ok(log);
                }
                Err(e) => return Err(e),
            };
            records.push(PlanRecord {
                owner: agent.id,
                state: states[mu],
                previous_control: applied[mu],
                start_moments: plan.moments[0].clone(),
                consumed: others
                    .iter()
                    .map(|o| ConsumedPlan {
                        owner: o.owner,
                        planned_at: o.source_planned_at,
                    })
                    .collect(),
                status: plan.status.clone(),
                message: PlanMessage::from_plan(&plan),
            });
            current[mu] = plan;
        }

        let expected_next: Vec<[f64; 3]> = current.iter().map(|p| p.moments[1].mean_position()).collect();
        let mut noise_draws = Vec::with_capacity(ids.len());
        for mu in 0..ids.len() {
            let u = current[mu].controls[0];
            let w = sample_noise(&noise, &mut streams[mu]);
            states[mu] = step_truth(&states[mu], &u, &w, config.planner.delta_s);
            applied[mu] = u;
            noise_draws.push(w);
        }
        let positions: Vec<[f64; 3]> = states.iter().map(|s| s.position()).collect();
        let record = StepRecord {
            step: k,
            plans: records,
            applied: applied.clone(),
            noise: noise_draws,
            states_after: states.clone(),
            mean_distances: pair_distances(&ids, &expected_next),
            true_distances: pair_distances(&ids, &positions),
        };
        observer(&record);
        log.steps.push(record);
    }
    Ok(log)
}

/// Checks that agent `μ` at step `k` consumed the step-`k` plans of lower
/// ids and the step-`k−1` plans of higher ids.
pub fn verify_causality(log: &RunLog) -> Result<()> {
    let ids = log.agent_ids();
    for step in &log.steps {
        let k = step.step as i64;
        for (mu, rec) in step.plans.iter().enumerate() {
            let expected: Vec<ConsumedPlan> = ids
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != mu)
                .map(|(i, &owner)| ConsumedPlan {
                    owner,
                    planned_at: if i < mu { k } else { k - 1 },
                })
                .collect();
            if rec.consumed != expected {
                return Err(Error::Protocol(format!(
                    "step {k}, agent {}: consumed {:?}, expected {expected:?}",
                    rec.owner, rec.consumed
                )));
            }
            if rec.message.planned_at != k || rec.message.sender != rec.owner {
                return Err(Error::Protocol(format!("step {k}: message header mismatch for agent {}", rec.owner)));
            }
        }
    }
    Ok(())
}

/// Largest deviation between broadcast moments and a fresh propagation of
/// the logged controls from the logged state, and between the logged start
/// moments and the point mass of the logged state.
pub fn verify_broadcasts(log: &RunLog, model: &MomentModel) -> (f64, f64) {
    let mut broadcast: f64 = 0.0;
    let mut feedback: f64 = 0.0;
    for step in &log.steps {
        for rec in &step.plans {
            let start = moments_from_state(&rec.state).with_time_step(step.step as i64);
            feedback = feedback.max(start.max_abs_diff(&rec.start_moments));
            let fresh = model.rollout(&start, &rec.message.controls);
            for (a, b) in fresh[1..].iter().zip(&rec.message.moments) {
                broadcast = broadcast.max(a.max_abs_diff(b));
                if a.time_step() != b.time_step() {
                    broadcast = f64::INFINITY;
                }
            }
        }
    }
    (broadcast, feedback)
}

/// A logged planning request rebuilt for offline re-solving.
#[derive(Debug, Clone)]
pub struct ReplayInstance {
    pub owner: u32,
    pub planned_at: i64,
    pub state: TrueState,
    pub destination: [f64; 3],
    pub others: Vec<AlignedPlan>,
    pub previous_plan: HorizonPlan,
    pub previous_control: Control,
}

impl ReplayInstance {
    pub fn request(&self) -> PlanRequest<'_> {
        PlanRequest {
            owner: self.owner,
            planned_at: self.planned_at,
            state: self.state,
            destination: self.destination,
            others: &self.others,
            previous_plan: Some(&self.previous_plan),
        }
    }
}

/// Rebuilds what agent number `agent` (planning position) saw at `step`.
pub fn replay_instance(log: &RunLog, model: &MomentModel, step: usize, agent: usize) -> Result<ReplayInstance> {
    let t = log.config.planner.horizon;
    let record = log
        .steps
        .get(step)
        .ok_or_else(|| Error::Protocol(format!("run log has no step {step}")))?;
    let rec = record
        .plans
        .get(agent)
        .ok_or_else(|| Error::Protocol(format!("step {step} has no agent number {agent}")))?;
    let previous_message = |i: usize| -> &PlanMessage {
        if step == 0 {
            &log.bootstrap[i]
        } else {
            &log.steps[step - 1].plans[i].message
        }
    };
    let planned_at = step as i64;
    let mut others = Vec::new();
    for i in 0..record.plans.len() {
        if i == agent {
            continue;
        }
        let msg = if i < agent { &record.plans[i].message } else { previous_message(i) };
        others.push(align_plan(msg, planned_at, t)?);
    }
    let previous_plan = if step == 0 {
        let boot = bootstrap_plans(&log.config, model);
        boot[agent].clone()
    } else {
        let prev = &log.steps[step - 1].plans[agent];
        HorizonPlan::from_controls(
            model,
            prev.owner,
            planned_at - 1,
            &prev.state,
            prev.message.controls.clone(),
            prev.status.clone(),
        )
    };
    Ok(ReplayInstance {
        owner: rec.owner,
        planned_at,
        state: rec.state,
        destination: log.config.agents[agent].destination,
        others,
        previous_plan,
        previous_control: rec.previous_control,
    })
}
