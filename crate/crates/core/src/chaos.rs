//! Master-slave synchronization of the unified chaotic oscillator.
//!
//! The master is the three-state unified system; its third state drives the
//! scheduling parameter of five slave agents on a directed ring. The slave
//! model splits the first two equations into an LPV part `A(rho) x` and a
//! Lipschitz part `B1 phi(x)` whose size does not depend on `theta`, so one
//! protocol serves every `theta` in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::DiGraph;
use crate::linalg::{from_rows, Mat, Vector};
use crate::lmi::{minimize_gamma_sq, DesignParams, GammaSearch, LmiSolver};
use log::debug;
use rayon::prelude::*;

use crate::model::{
    AgentModel, Driver, Interval, Link, NetworkModel, Nonlinearity, ParamDependence, ParamSignal,
    ReferencePlant, RhoSource,
};
use crate::scheduling::{
    build_grid, synthesize_schedule, GainSchedule, GridPolicy, OverlapPolicy, RateCheck,
    ScheduleError, SynthesisMode,
};
use crate::simulation::{
    simulate, sync_error_series, DisturbanceSpec, SimConfig, SimError, SimulationTrace,
};

const BUNDLED: &str = include_str!("../data/chaos_scenario.json");

#[derive(Debug, Error)]
pub enum ChaosError {
    #[error("theta must lie in [0, 1], got {0}")]
    ThetaOutOfRange(f64),
    #[error("trajectory bound undefined: {0}")]
    Domain(String),
    #[error("no admissible measurement draw from seed {seed} in {attempts} attempts")]
    NoDraw { seed: u64, attempts: u32 },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("scenario file: {0}")]
    Scenario(#[from] serde_json::Error),
}

/// Coefficients of the unified system for one `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnifiedChaoticParams {
    pub theta: f64,
}

impl UnifiedChaoticParams {
    pub fn new(theta: f64) -> Result<Self, ChaosError> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(ChaosError::ThetaOutOfRange(theta));
        }
        Ok(Self { theta })
    }

    pub fn gain(&self) -> f64 {
        25.0 * self.theta + 10.0
    }

    pub fn r(&self) -> f64 {
        28.0 - 35.0 * self.theta
    }

    pub fn second_damping(&self) -> f64 {
        29.0 * self.theta - 1.0
    }

    pub fn b(&self) -> f64 {
        (8.0 + self.theta) / 3.0
    }
}

/// Right-hand side of the unified chaotic system at `(x1, x2, rho)`.
pub fn unified_chaotic_rhs(state: [f64; 3], p: &UnifiedChaoticParams) -> [f64; 3] {
    let [x1, x2, rho] = state;
    [
        p.gain() * (x2 - x1),
        p.r() * x1 - x1 * rho + p.second_damping() * x2,
        -p.b() * rho + x1 * x2,
    ]
}

/// Interval implied by the Lorenz trajectory bound
/// `|rho - r| <= b / (2 sqrt(b - 1)) r`, clipped at zero.
pub fn gamma_interval(theta: f64) -> Result<Interval, ChaosError> {
    let p = UnifiedChaoticParams::new(theta)?;
    let (b, r) = (p.b(), p.r());
    if r <= 0.0 {
        return Err(ChaosError::Domain(format!("r = {r} is not positive")));
    }
    if b <= 1.0 {
        return Err(ChaosError::Domain(format!("b = {b} does not exceed 1")));
    }
    let half = b / (2.0 * (b - 1.0).sqrt()) * r;
    Ok(Interval::new((r - half).max(0.0), r + half))
}

/// Seeded measurement matrices: one unit-norm `C_2i` row and one unit-norm
/// `H_{i,i-1}` row per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementDraw {
    pub seed: u64,
    pub attempt: u32,
    pub c2: Vec<[f64; 2]>,
    pub h: Vec<[f64; 2]>,
}

fn unit_row(rng: &mut ChaCha8Rng) -> [f64; 2] {
    loop {
        let v: [f64; 2] = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if norm > 1e-3 {
            return [v[0] / norm, v[1] / norm];
        }
    }
}

/// Draw number `attempt` (0-based) from the stream seeded by `seed`; each
/// retry continues the same stream.
pub fn measurement_draw(seed: u64, attempt: u32, agents: usize) -> MeasurementDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = MeasurementDraw {
        seed,
        attempt,
        c2: Vec::new(),
        h: Vec::new(),
    };
    for _ in 0..=attempt {
        draw.c2.clear();
        draw.h.clear();
        for _ in 0..agents {
            draw.c2.push(unit_row(&mut rng));
            draw.h.push(unit_row(&mut rng));
        }
    }
    draw
}

/// Constants of the bundled scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosScenario {
    pub version: u32,
    pub a0: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub b1: Vec<Vec<f64>>,
    pub b20: Vec<f64>,
    pub r_scale: f64,
    pub agents: usize,
    pub d2: f64,
    pub g: f64,
    pub gamma_interval: [f64; 2],
    pub grid_points: usize,
    pub decay: f64,
    pub alpha_sq: f64,
    pub q_scale: f64,
    pub reported_gamma_sq: f64,
    pub initial_state: [f64; 3],
    pub horizon: f64,
    pub reported_rate: f64,
    pub draw: MeasurementDraw,
}

impl ChaosScenario {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED).expect("bundled scenario parses")
    }

    pub fn from_json(text: &str) -> Result<Self, ChaosError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.gamma_interval[0], self.gamma_interval[1])
    }

    pub fn design_params(&self) -> DesignParams {
        DesignParams::uniform(
            self.agents,
            2,
            self.decay,
            self.q_scale,
            self.alpha_sq.sqrt(),
        )
    }

    fn plant(&self, theta: f64) -> ReferencePlant {
        ReferencePlant {
            a: ParamDependence::Affine {
                a0: from_rows(&self.a0),
                delta: from_rows(&self.delta),
            },
            b1: from_rows(&self.b1),
            b20: Mat::from_column_slice(self.b20.len(), 1, &self.b20),
            phi: Nonlinearity::UnifiedChaotic { theta },
            r: Mat::identity(2, 2) * self.r_scale,
        }
    }

    /// Slave network with the master nonlinearity set to `theta`. The
    /// protocol data (everything except `phi`) does not depend on `theta`.
    pub fn network_with(
        &self,
        draw: &MeasurementDraw,
        theta: f64,
    ) -> Result<NetworkModel, ChaosError> {
        UnifiedChaoticParams::new(theta)?;
        let n = self.agents;
        let b2 = Mat::from_column_slice(self.b20.len(), 1, &self.b20);
        let agents = (0..n)
            .map(|i| AgentModel {
                b2: b2.clone(),
                c2: Mat::from_row_slice(1, 2, &draw.c2[i]),
                d2: Mat::from_element(1, 1, self.d2),
                links: vec![Link {
                    from: (i + n - 1) % n,
                    h: Mat::from_row_slice(1, 2, &draw.h[i]),
                    g: Mat::from_element(1, 1, self.g),
                }],
            })
            .collect();
        Ok(NetworkModel {
            graph: DiGraph::ring(n).expect("ring is valid"),
            plant: self.plant(theta),
            agents,
            gamma_interval: self.interval(),
        })
    }

    pub fn network(&self, theta: f64) -> Result<NetworkModel, ChaosError> {
        self.network_with(&self.draw, theta)
    }

    /// Scheduling signal driven by the master's third state.
    pub fn rho_signal(&self, theta: f64) -> Result<ParamSignal, ChaosError> {
        let p = UnifiedChaoticParams::new(theta)?;
        Ok(ParamSignal {
            source: RhoSource::Driven {
                driver: Driver::LorenzZ { b: p.b() },
                initial: self.initial_state[2],
            },
            rate_max: None,
        })
    }

    /// Evenly spaced design grid over the pinned interval.
    pub fn grid(&self) -> Vec<f64> {
        let iv = self.interval();
        let m = self.grid_points.max(2);
        (0..m)
            .map(|k| iv.lo + iv.width() * k as f64 / (m - 1) as f64)
            .collect()
    }

    /// First draw from `seed`'s stream whose minimized `gamma^2` exists at
    /// every grid point and whose maximum lies in `band`. Points are solved
    /// in order and an attempt stops at its first failure.
    pub fn search_draw(
        &self,
        seed: u64,
        max_attempts: u32,
        band: (f64, f64),
        solver: &dyn LmiSolver,
    ) -> Result<(MeasurementDraw, f64), ChaosError> {
        let params = self.design_params();
        let grid = self.grid();
        'attempts: for attempt in 0..max_attempts {
            let draw = measurement_draw(seed, attempt, self.agents);
            let net = self.network_with(&draw, 0.5)?;
            let mut worst: f64 = 0.0;
            for &rho in &grid {
                match minimize_gamma_sq(&net, rho, &params, &GammaSearch::default(), solver) {
                    Ok((g, _)) => worst = worst.max(g),
                    Err(_) => {
                        debug!("draw {attempt}: infeasible at rho = {rho}");
                        continue 'attempts;
                    }
                }
            }
            debug!("draw {attempt}: max gamma^2 {worst}");
            if worst >= band.0 && worst <= band.1 {
                return Ok((draw, worst));
            }
        }
        Err(ChaosError::NoDraw {
            seed,
            attempts: max_attempts,
        })
    }

    pub fn initial_reference(&self) -> Vector {
        Vector::from_column_slice(&self.initial_state[..2])
    }
}

/// Slave network of the bundled scenario.
pub fn build_slave_network(theta: f64) -> Result<NetworkModel, ChaosError> {
    ChaosScenario::bundled().network(theta)
}

/// One simulated slave network of [`run_chaos_example`].
#[derive(Debug, Clone)]
pub struct ChaosRun {
    pub theta: f64,
    pub trace: SimulationTrace,
    pub final_errors: Vec<f64>,
    pub peak_errors: Vec<f64>,
    pub rho_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct ChaosExample {
    pub scenario: ChaosScenario,
    pub schedule: GainSchedule,
    /// Verdict against the largest `|rho'|` observed over all runs.
    pub rate: RateCheck,
    pub runs: Vec<ChaosRun>,
}

impl ChaosScenario {
    /// Synthesizes the 11-point schedule at the design value.
    pub fn synthesize(&self) -> Result<GainSchedule, ChaosError> {
        let net = self.network(0.5)?;
        let grid = build_grid(
            &net,
            GridPolicy::Count {
                points: self.grid_points,
                alpha: Some(self.alpha_sq.sqrt()),
            },
            OverlapPolicy::Collapsed,
            self.design_params(),
        )?;
        let mode = SynthesisMode::Minimize {
            search: GammaSearch::default(),
        };
        Ok(synthesize_schedule(
            &net,
            &grid,
            mode,
            &crate::lmi::BarrierSolver::default(),
        )?)
    }

    /// Simulates the master and the slaves at `theta`, slaves starting at
    /// the origin, no disturbances.
    pub fn simulate_slaves(
        &self,
        schedule: &GainSchedule,
        theta: f64,
        dt: f64,
        horizon: f64,
    ) -> Result<ChaosRun, ChaosError> {
        let net = self.network(theta)?;
        let cfg = SimConfig {
            dt,
            horizon,
            x0: self.initial_reference(),
            agents_x0: vec![Vector::zeros(2); self.agents],
            rho: self.rho_signal(theta)?,
            disturbances: DisturbanceSpec::zero(&net),
        };
        let trace = simulate(&net, schedule, &cfg)?;
        let errors = sync_error_series(&trace);
        let lo = trace.rho.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = trace.rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(ChaosRun {
            theta,
            final_errors: errors
                .per_agent
                .iter()
                .map(|e| *e.last().unwrap_or(&0.0))
                .collect(),
            peak_errors: errors
                .per_agent
                .iter()
                .map(|e| e.iter().copied().fold(0.0, f64::max))
                .collect(),
            rho_range: (lo, hi),
            trace,
        })
    }
}

/// Full pipeline: optional redraw of the measurement matrices from `seed`,
/// schedule synthesis, and one simulation per entry of `thetas` (in
/// parallel).
pub fn run_chaos_example(
    thetas: &[f64],
    seed: Option<u64>,
    dt: f64,
    horizon: f64,
) -> Result<ChaosExample, ChaosError> {
    let mut scenario = ChaosScenario::bundled();
    if let Some(seed) = seed.filter(|s| *s != scenario.draw.seed) {
        scenario.draw = scenario
            .search_draw(
                seed,
                200,
                (0.2, 20.0),
                &crate::lmi::BarrierSolver::default(),
            )?
            .0;
    }
    let schedule = scenario.synthesize()?;
    let runs = thetas
        .par_iter()
        .map(|&theta| scenario.simulate_slaves(&schedule, theta, dt, horizon))
        .collect::<Result<Vec<_>, _>>()?;
    let observed = runs
        .iter()
        .map(|r| r.trace.max_rho_rate)
        .fold(0.0, f64::max);
    let rate = schedule.check_rate_condition(&schedule.grid.params.q, observed, 0.5);
    Ok(ChaosExample {
        scenario,
        schedule,
        rate,
        runs,
    })
}
