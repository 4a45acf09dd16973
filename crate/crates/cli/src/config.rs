//! TOML run configuration.

use std::path::Path;

use lpvsync::archive::sha256_hex;
use lpvsync::chaos::ChaosScenario;
use lpvsync::linalg::{Mat, Vector};
use lpvsync::lmi::{BarrierSolver, DesignParams, GammaSearch, LmiSolver, SubgradientSolver};
use lpvsync::model::{NetworkModel, ParamSignal};
use lpvsync::scheduling::{GridPolicy, OverlapPolicy, SynthesisMode};
use lpvsync::simulation::{DisturbanceSpec, SimConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub synthesis: SynthesisSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Either a bundled scenario or an inline model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    /// Design value of the scenario parameter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<NetworkModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaConfig {
    Minimize {
        #[serde(default = "default_tol")]
        tol: f64,
    },
    Fixed {
        value: f64,
    },
}

fn default_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    #[default]
    Barrier,
    Subgradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
    /// Mismatch radius; computed from the model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Place points greedily for this radius instead of a fixed count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_alpha: Option<f64>,
    #[serde(default = "default_overlap")]
    pub overlap: OverlapPolicy,
    pub delta: Vec<f64>,
    pub q_scale: f64,
    pub gamma: GammaConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default)]
    pub solver: SolverChoice,
    /// Declared bound on `|rho'|` used for the rate verdict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_rate: Option<f64>,
}

fn default_overlap() -> OverlapPolicy {
    OverlapPolicy::Collapsed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceConfig {
    Zero,
    Noise { amplitude: f64, seed: u64 },
    Explicit { spec: DisturbanceSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// Scenario parameter of the simulated agents (scenario networks only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<ParamSignal>,
    #[serde(default = "default_disturbance")]
    pub disturbance: DisturbanceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents_x0: Option<Vec<Vec<f64>>>,
    /// Strong-mode metrics use `Q` scaled by `1 - eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_disturbance() -> DisturbanceConfig {
    DisturbanceConfig::Zero
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default = "yes")]
    pub csv: bool,
    #[serde(default = "yes")]
    pub plot_script: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            csv: true,
            plot_script: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn check(&self) -> Result<(), ConfigError> {
        let n = &self.network;
        match (&n.scenario, &n.model) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "network: give either `scenario` or `model`, not both",
                ))
            }
            (None, None) => {
                return Err(invalid("network: one of `scenario` or `model` is required"))
            }
            (Some(s), None) if s != "chaos" => {
                return Err(invalid(format!("network.scenario: unknown scenario `{s}`")))
            }
            _ => {}
        }
        let s = &self.synthesis;
        if s.grid_points.is_some() == s.target_alpha.is_some() {
            return Err(invalid(
                "synthesis: give exactly one of `grid_points` or `target_alpha`",
            ));
        }
        if s.delta.is_empty() || s.delta.iter().any(|d| !(*d > 0.0)) {
            return Err(invalid("synthesis.delta: positive values required"));
        }
        if !(s.q_scale > 0.0) {
            return Err(invalid("synthesis.q_scale: must be positive"));
        }
        if let Some(sim) = &self.simulation {
            if !(sim.dt > 0.0) || !(sim.horizon >= sim.dt) {
                return Err(invalid("simulation: need dt > 0 and horizon >= dt"));
            }
            if n.model.is_some() && sim.rho.is_none() {
                return Err(invalid("simulation.rho: required for inline models"));
            }
        }
        Ok(())
    }

    fn scenario(&self) -> Option<ChaosScenario> {
        self.network
            .scenario
            .as_ref()
            .map(|_| ChaosScenario::bundled())
    }

    /// Network used for synthesis.
    pub fn design_network(&self) -> Result<NetworkModel, ConfigError> {
        match (&self.network.model, self.scenario()) {
            (Some(m), _) => Ok(m.clone()),
            (None, Some(sc)) => sc
                .network(self.network.theta.unwrap_or(0.5))
                .map_err(|e| invalid(e.to_string())),
            (None, None) => unreachable!("checked on load"),
        }
    }

    /// Network whose dynamics are simulated. Differs from the design network
    /// only for scenarios simulated at another parameter value.
    pub fn simulation_network(&self) -> Result<NetworkModel, ConfigError> {
        match (
            self.scenario(),
            self.simulation.as_ref().and_then(|s| s.theta),
        ) {
            (Some(sc), Some(theta)) => sc.network(theta).map_err(|e| invalid(e.to_string())),
            _ => self.design_network(),
        }
    }

    pub fn design_params(&self, net: &NetworkModel) -> Result<DesignParams, ConfigError> {
        let agents = net.agent_count();
        let s = &self.synthesis;
        let delta = match s.delta.len() {
            1 => vec![s.delta[0]; agents],
            k if k == agents => s.delta.clone(),
            k => {
                return Err(invalid(format!(
                    "synthesis.delta: expected 1 or {agents} values, got {k}"
                )))
            }
        };
        let n = net.state_dim();
        Ok(DesignParams {
            delta,
            q: vec![Mat::identity(n, n) * s.q_scale; agents],
            alpha: s.alpha.unwrap_or(0.0),
        })
    }

    pub fn grid_policy(&self) -> GridPolicy {
        match (self.synthesis.grid_points, self.synthesis.target_alpha) {
            (Some(points), _) => GridPolicy::Count {
                points,
                alpha: self.synthesis.alpha,
            },
            (None, Some(alpha)) => GridPolicy::TargetAlpha { alpha },
            (None, None) => unreachable!("checked on load"),
        }
    }

    pub fn synthesis_mode(&self) -> SynthesisMode {
        match self.synthesis.gamma {
            GammaConfig::Minimize { tol } => SynthesisMode::Minimize {
                search: GammaSearch {
                    tol,
                    margin: self.synthesis.margin,
                    ..GammaSearch::default()
                },
            },
            GammaConfig::Fixed { value } => SynthesisMode::Fixed { gamma_sq: value },
        }
    }

    pub fn solver(&self) -> Box<dyn LmiSolver> {
        match self.synthesis.solver {
            SolverChoice::Barrier => Box::new(BarrierSolver::default()),
            SolverChoice::Subgradient => Box::new(SubgradientSolver::default()),
        }
    }

    /// Resolved simulation setup; `seed` overrides the disturbance seed.
    pub fn sim_config(&self, seed: Option<u64>) -> Result<SimConfig, ConfigError> {
        let sim = self
            .simulation
            .as_ref()
            .ok_or_else(|| invalid("missing [simulation] section"))?;
        let net = self.simulation_network()?;
        let n = net.state_dim();
        let scenario = self.scenario();
        let rho = match (&sim.rho, &scenario) {
            (Some(r), _) => r.clone(),
            (None, Some(sc)) => sc
                .rho_signal(sim.theta.unwrap_or(0.5))
                .map_err(|e| invalid(e.to_string()))?,
            (None, None) => unreachable!("checked on load"),
        };
        let x0 = match (&sim.x0, &scenario) {
            (Some(v), _) => Vector::from_column_slice(v),
            (None, Some(sc)) => sc.initial_reference(),
            (None, None) => Vector::zeros(n),
        };
        let agents_x0 = match &sim.agents_x0 {
            Some(v) => v.iter().map(|x| Vector::from_column_slice(x)).collect(),
            None => vec![Vector::zeros(n); net.agent_count()],
        };
        let disturbances = match &sim.disturbance {
            DisturbanceConfig::Zero => DisturbanceSpec::zero(&net),
            DisturbanceConfig::Noise { amplitude, seed: s } => {
                DisturbanceSpec::noise(&net, seed.unwrap_or(*s), *amplitude)
            }
            DisturbanceConfig::Explicit { spec } => spec.clone(),
        };
        Ok(SimConfig {
            dt: sim.dt,
            horizon: sim.horizon,
            x0,
            agents_x0,
            rho,
            disturbances,
        })
    }
}
