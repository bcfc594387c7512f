//! Scenario files (TOML). All quantities are SI: metres, seconds, radians.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nlp::SolverOptions;
use crate::noise::{Distribution, NoiseSet};
use crate::planner::PlannerParams;
use crate::state::TrueState;

pub const BUNDLED_EPS01: &str = include_str!("../configs/crossing_eps01.toml");
pub const BUNDLED_EPS001: &str = include_str!("../configs/crossing_eps001.toml");

/// Names accepted by [`ScenarioConfig::bundled`].
pub const BUNDLED_NAMES: [&str; 2] = ["crossing_eps01", "crossing_eps001"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadingPolicy {
    FaceDestination,
    Fixed { psi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: u32,
    pub start: [f64; 3],
    pub destination: [f64; 3],
    #[serde(default = "face_destination")]
    pub heading: HeadingPolicy,
}

fn face_destination() -> HeadingPolicy {
    HeadingPolicy::FaceDestination
}

impl AgentConfig {
    pub fn initial_heading(&self) -> f64 {
        match self.heading {
            HeadingPolicy::Fixed { psi } => psi,
            HeadingPolicy::FaceDestination => {
                let dx = self.destination[0] - self.start[0];
                let dy = self.destination[1] - self.start[1];
                if dx == 0.0 && dy == 0.0 {
                    0.0
                } else {
                    dy.atan2(dx)
                }
            }
        }
    }

    pub fn initial_state(&self) -> TrueState {
        TrueState::new(self.start[0], self.start[1], self.start[2], self.initial_heading())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub speed: Distribution,
    pub altitude: Distribution,
    pub heading: Distribution,
}

impl NoiseConfig {
    pub fn to_noise_set(&self) -> Result<NoiseSet> {
        NoiseSet::new(self.speed, self.altitude, self.heading)
    }

    /// Same channels with every law collapsed onto its mean.
    pub fn collapsed(&self) -> NoiseConfig {
        let point = |d: &Distribution| Distribution::PointMass { value: d.mean() };
        NoiseConfig {
            speed: point(&self.speed),
            altitude: point(&self.altitude),
            heading: point(&self.heading),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global steps `K`.
    pub steps: usize,
    pub seed: u64,
    /// Particle count for Monte Carlo validation.
    pub mc_particles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Multi-start count per plan.
    pub starts: usize,
    #[serde(flatten)]
    pub options: SolverOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub run: RunConfig,
    pub planner: PlannerParams,
    pub solver: SolverConfig,
    pub noise: NoiseConfig,
    pub agents: Vec<AgentConfig>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn bundled(name: &str) -> Result<Self> {
        match name {
            "crossing_eps01" => Self::from_toml_str(BUNDLED_EPS01),
            "crossing_eps001" => Self::from_toml_str(BUNDLED_EPS001),
            other => Err(Error::Config(format!(
                "unknown bundled scenario '{other}' (available: {})",
                BUNDLED_NAMES.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        self.solver.options.validate()?;
        self.noise.to_noise_set()?;
        if self.solver.starts == 0 {
            return Err(Error::Config("solver.starts must be at least 1".into()));
        }
        if self.run.steps == 0 {
            return Err(Error::Config("run.steps must be at least 1".into()));
        }
        if self.run.mc_particles == 0 {
            return Err(Error::Config("run.mc_particles must be at least 1".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::Config("scenario has no agents".into()));
        }
        for pair in self.agents.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::Config(format!("duplicate agent id {}", pair[0].id)));
            }
            if pair[0].id > pair[1].id {
                return Err(Error::Config(format!(
                    "agent ids must be ascending: {} before {}",
                    pair[0].id, pair[1].id
                )));
            }
        }
        for a in &self.agents {
            let finite = a.start.iter().chain(&a.destination).all(|v| v.is_finite());
            let heading_ok = match a.heading {
                HeadingPolicy::Fixed { psi } => psi.is_finite(),
                HeadingPolicy::FaceDestination => true,
            };
            if !finite || !heading_ok {
                return Err(Error::Config(format!("agent {} has non-finite geometry", a.id)));
            }
        }
        Ok(())
    }

    pub fn noise_set(&self) -> Result<NoiseSet> {
        self.noise.to_noise_set()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::Distribution;
    use std::f64::consts::PI;

    #[test]
    fn bundled_configs_encode_the_reference_scenario() {
        for (name, eps) in [("crossing_eps01", 0.1), ("crossing_eps001", 0.01)] {
            let c = ScenarioConfig::bundled(name).unwrap();
            assert_eq!(c.name, name);
            let p = &c.planner;
            assert_eq!(p.epsilon, eps);
            assert_eq!((p.horizon, p.delta_s, p.smoothness_weight, p.d_min), (10, 0.1, 0.1, 10.0));
            assert_eq!((p.rate_v, p.rate_z), (1.0, 1.0));
            let b = &p.bounds;
            assert_eq!((b.v_min, b.v_max, b.z_min, b.z_max), (0.0, 10.0, -10.0, 10.0));
            assert_eq!((b.psi_min, b.psi_max), (-PI, PI));
            assert_eq!(c.run.steps, 80);
            assert_eq!(c.run.mc_particles, 1000);
            assert_eq!(c.noise.speed, Distribution::Beta { alpha: 1.0, beta: 3.0 });
            assert_eq!(c.noise.altitude, Distribution::Gaussian { mean: 0.0, std: 0.3 });
            assert_eq!(c.noise.heading, Distribution::Uniform { low: -0.1, high: 0.1 });
            let ids: Vec<u32> = c.agents.iter().map(|a| a.id).collect();
            assert_eq!(ids, [1, 2, 3, 4]);
            let starts: Vec<[f64; 3]> = c.agents.iter().map(|a| a.start).collect();
            assert_eq!(starts, [[0.0, -25.0, 0.0], [0.0, 25.0, 0.0], [-25.0, 0.0, 0.0], [25.0, 0.0, 0.0]]);
            let dests: Vec<[f64; 3]> = c.agents.iter().map(|a| a.destination).collect();
            assert_eq!(dests, [[0.0, 25.0, 0.0], [0.0, -25.0, 0.0], [25.0, 0.0, 0.0], [-25.0, 0.0, 0.0]]);
            assert!(c.agents.iter().all(|a| a.heading == HeadingPolicy::FaceDestination));
        }
    }

    #[test]
    fn round_trip_is_identity() {
        for name in BUNDLED_NAMES {
            let c = ScenarioConfig::bundled(name).unwrap();
            let text = c.to_toml_string().unwrap();
            assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), c);
        }
        let mut c = ScenarioConfig::bundled("crossing_eps01").unwrap();
        c.agents[2].heading = HeadingPolicy::Fixed { psi: 0.25 };
        let text = c.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn rejects_duplicates_and_disorder() {
        let mut c = ScenarioConfig::bundled("crossing_eps01").unwrap();
        c.agents[1].id = 1;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("duplicate")));
        let mut c = ScenarioConfig::bundled("crossing_eps01").unwrap();
        c.agents.swap(0, 1);
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::bundled("crossing_eps01").unwrap();
        c.planner.epsilon = 1.5;
        assert!(c.validate().is_err());
        assert!(ScenarioConfig::bundled("nope").is_err());
        assert!(ScenarioConfig::from_toml_str("name = 3").is_err());
    }

    #[test]
    fn face_destination_heading() {
        let c = ScenarioConfig::bundled("crossing_eps01").unwrap();
        let h: Vec<f64> = c.agents.iter().map(|a| a.initial_heading()).collect();
        assert_eq!(h, [PI / 2.0, -PI / 2.0, 0.0, PI]);
    }
}
