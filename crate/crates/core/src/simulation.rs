//! Closed-loop simulation of the reference plant and the agent network,
//! plus the disagreement, H-infinity and dissipation metrics computed on
//! the resulting trace.

use std::io::{self, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::DiGraph;
use crate::linalg::{Mat, Vector};
use crate::lmi::AgentGains;
use crate::model::{ModelError, NetworkModel, ParamSignal, RhoSource};
use crate::scheduling::{GainSchedule, ScheduleError};

/// Knot spacing of generated noise, independent of the integration step.
pub const NOISE_KNOT: f64 = 0.01;
/// State norm treated as divergence.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("rho = {rho} left the scheduling interval at t = {t}")]
    OutOfRange { t: f64, rho: f64 },
    #[error("state diverged at t = {t}")]
    Divergence { t: f64 },
    #[error("observed |rho'| = {observed} exceeds the declared bound {declared} at t = {t}")]
    RateViolation {
        t: f64,
        observed: f64,
        declared: f64,
    },
    #[error("invalid simulation setup: {0}")]
    Invalid(String),
    #[error("zero denominator: no initial mismatch and no disturbance energy")]
    ZeroDenominator,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that supplies protocol gains as a function of `rho`.
pub trait GainSource: Sync {
    fn gains(&self, rho: f64) -> Result<Arc<Vec<AgentGains>>, SimError>;
}

impl GainSource for GainSchedule {
    fn gains(&self, rho: f64) -> Result<Arc<Vec<AgentGains>>, SimError> {
        Ok(self.gains_at(rho)?)
    }
}

/// Generator of one disturbance channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Channel {
    Zero,
    /// First-order low-pass filtered Gaussian noise with stationary standard
    /// deviation `amplitude`, multiplied by `exp(-decay t)`.
    DecayingNoise {
        seed: u64,
        amplitude: f64,
        decay: f64,
        pole: f64,
    },
    /// Piecewise-linear `(t, value)` samples, zero outside the table.
    Table {
        points: Vec<(f64, Vec<f64>)>,
    },
}

impl Channel {
    pub fn noise(seed: u64, amplitude: f64) -> Self {
        Channel::DecayingNoise {
            seed,
            amplitude,
            decay: 0.05,
            pole: 10.0,
        }
    }
}

/// Disturbances for `w_0`, every `w_i`, and every link `w_ij` (in link order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub w0: Channel,
    pub agents: Vec<Channel>,
    pub links: Vec<Vec<Channel>>,
}

impl DisturbanceSpec {
    pub fn zero(net: &NetworkModel) -> Self {
        Self {
            w0: Channel::Zero,
            agents: vec![Channel::Zero; net.agent_count()],
            links: net
                .agents
                .iter()
                .map(|a| vec![Channel::Zero; a.links.len()])
                .collect(),
        }
    }

    /// Default noise on every channel; channel `c` is seeded with
    /// `seed * 1000 + c` so streams are independent and reproducible.
    pub fn noise(net: &NetworkModel, seed: u64, amplitude: f64) -> Self {
        let mut c = 0u64;
        let mut next = || {
            c += 1;
            Channel::noise(seed.wrapping_mul(1000).wrapping_add(c - 1), amplitude)
        };
        Self {
            w0: next(),
            agents: (0..net.agent_count()).map(|_| next()).collect(),
            links: net
                .agents
                .iter()
                .map(|a| a.links.iter().map(|_| next()).collect())
                .collect(),
        }
    }
}

/// Precomputed channel realization.
#[derive(Debug, Clone)]
enum Signal {
    Zero(usize),
    Knots { values: Vec<Vector>, decay: f64 },
    Table(Vec<(f64, Vector)>),
}

impl Signal {
    fn realize(ch: &Channel, dim: usize, horizon: f64) -> Result<Self, SimError> {
        Ok(match ch {
            Channel::Zero => Signal::Zero(dim),
            Channel::DecayingNoise {
                seed,
                amplitude,
                decay,
                pole,
            } => {
                if !(*decay > 0.0) || !(*pole > 0.0) {
                    return Err(SimError::Invalid(
                        "noise decay and pole must be positive".into(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let knots = (horizon / NOISE_KNOT).ceil() as usize + 2;
                let a = (-pole * NOISE_KNOT).exp();
                let kick = (1.0 - a * a).sqrt();
                let mut y = Vector::from_fn(dim, |_, _| {
                    amplitude * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    }
                });
                let mut values = Vec::with_capacity(knots);
                for _ in 0..knots {
                    values.push(y.clone());
                    let xi = Vector::from_fn(dim, |_, _| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    });
                    y = &y * a + xi * (kick * amplitude);
                }
                Signal::Knots {
                    values,
                    decay: *decay,
                }
            }
            Channel::Table { points } => {
                if points.iter().any(|p| p.1.len() != dim) {
                    return Err(SimError::Invalid(format!(
                        "table rows must have {dim} entries"
                    )));
                }
                if points.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err(SimError::Invalid("table times must increase".into()));
                }
                Signal::Table(
                    points
                        .iter()
                        .map(|(t, v)| (*t, Vector::from_column_slice(v)))
                        .collect(),
                )
            }
        })
    }

    fn at(&self, t: f64) -> Vector {
        match self {
            Signal::Zero(d) => Vector::zeros(*d),
            Signal::Knots { values, decay } => {
                let s = (t / NOISE_KNOT).max(0.0);
                let k = (s.floor() as usize).min(values.len() - 2);
                let f = (s - k as f64).min(1.0);
                (&values[k] * (1.0 - f) + &values[k + 1] * f) * (-decay * t).exp()
            }
            Signal::Table(points) => {
                let d = points.first().map_or(0, |p| p.1.len());
                match points.first().zip(points.last()) {
                    Some((first, last)) if t >= first.0 && t <= last.0 => {
                        let k = points
                            .partition_point(|p| p.0 <= t)
                            .clamp(1, points.len().max(2) - 1);
                        if points.len() == 1 {
                            return first.1.clone();
                        }
                        let (p0, p1) = (&points[k - 1], &points[k]);
                        let f = (t - p0.0) / (p1.0 - p0.0);
                        &p0.1 * (1.0 - f) + &p1.1 * f
                    }
                    _ => Vector::zeros(d),
                }
            }
        }
    }
}

/// All channels stacked as `[w0, w_1, .., w_N, w_{1 j}, ..]`.
struct Disturbances {
    w0: Signal,
    agents: Vec<Signal>,
    links: Vec<Vec<Signal>>,
}

impl Disturbances {
    fn new(net: &NetworkModel, spec: &DisturbanceSpec, horizon: f64) -> Result<Self, SimError> {
        if spec.agents.len() != net.agent_count()
            || spec.links.len() != net.agent_count()
            || spec
                .links
                .iter()
                .zip(&net.agents)
                .any(|(l, a)| l.len() != a.links.len())
        {
            return Err(SimError::Invalid(
                "disturbance spec does not match the network".into(),
            ));
        }
        Ok(Self {
            w0: Signal::realize(&spec.w0, net.plant.disturbance_dim(), horizon)?,
            agents: spec
                .agents
                .iter()
                .zip(&net.agents)
                .map(|(c, a)| Signal::realize(c, a.disturbance_dim(), horizon))
                .collect::<Result<_, _>>()?,
            links: spec
                .links
                .iter()
                .zip(&net.agents)
                .map(|(cs, a)| {
                    cs.iter()
                        .zip(&a.links)
                        .map(|(c, l)| Signal::realize(c, l.g.ncols(), horizon))
                        .collect()
                })
                .collect::<Result<_, _>>()?,
        })
    }

    fn at(&self, t: f64) -> DisturbanceSample {
        DisturbanceSample {
            w0: self.w0.at(t),
            agents: self.agents.iter().map(|s| s.at(t)).collect(),
            links: self
                .links
                .iter()
                .map(|ls| ls.iter().map(|s| s.at(t)).collect())
                .collect(),
        }
    }
}

/// Disturbance values at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSample {
    pub w0: Vector,
    pub agents: Vec<Vector>,
    pub links: Vec<Vec<Vector>>,
}

impl DisturbanceSample {
    /// `||w0||^2`, `||w_i||^2 + sum_j ||w_ij||^2` per agent.
    pub fn energies(&self) -> (f64, Vec<f64>) {
        (
            self.w0.norm_squared(),
            self.agents
                .iter()
                .zip(&self.links)
                .map(|(w, ls)| w.norm_squared() + ls.iter().map(|v| v.norm_squared()).sum::<f64>())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub x0: Vector,
    pub agents_x0: Vec<Vector>,
    pub rho: ParamSignal,
    pub disturbances: DisturbanceSpec,
}

/// Sampled closed-loop trajectory on the grid `t_k = k dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub dt: f64,
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
    /// `agents[k][i]`: state of agent `i` at sample `k`.
    pub agents: Vec<Vec<Vector>>,
    pub rho: Vec<f64>,
    /// Protocol inputs at the samples.
    pub u: Vec<Vec<Vector>>,
    pub disturbances: Vec<DisturbanceSample>,
    /// Largest `|rho(t_{k+1}) - rho(t_k)| / dt` observed.
    pub max_rho_rate: f64,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn agent_count(&self) -> usize {
        self.agents.first().map_or(0, Vec::len)
    }

    /// Synchronization errors `e_i = x - x_i` at sample `k`.
    pub fn errors(&self, k: usize) -> Vec<Vector> {
        self.agents[k].iter().map(|xi| &self.x[k] - xi).collect()
    }

    /// Writes a CSV with `t`, reference and agent states, `rho`, inputs,
    /// the disagreement and per-agent error norms.
    pub fn write_csv<W: Write>(&self, graph: &DiGraph, mut out: W) -> io::Result<()> {
        let n = self.x.first().map_or(0, |v| v.len());
        let agents = self.agent_count();
        let m = self
            .u
            .first()
            .and_then(|u| u.first())
            .map_or(0, |v| v.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|c| format!("x{c}")));
        for i in 1..=agents {
            header.extend((1..=n).map(|c| format!("x{i}_{c}")));
        }
        header.push("rho".into());
        for i in 1..=agents {
            header.extend((1..=m).map(|c| format!("u{i}_{c}")));
        }
        header.push("psi".into());
        header.extend((1..=agents).map(|i| format!("err{i}")));
        writeln!(out, "{}", header.join(","))?;
        let psi = disagreement_series(self, graph);
        let mut row = String::new();
        for k in 0..self.len() {
            use std::fmt::Write as _;
            row.clear();
            let _ = write!(row, "{}", self.t[k]);
            for v in self.x[k].iter() {
                let _ = write!(row, ",{v}");
            }
            for xi in &self.agents[k] {
                for v in xi.iter() {
                    let _ = write!(row, ",{v}");
                }
            }
            let _ = write!(row, ",{}", self.rho[k]);
            for ui in &self.u[k] {
                for v in ui.iter() {
                    let _ = write!(row, ",{v}");
                }
            }
            let _ = write!(row, ",{}", psi[k]);
            for e in self.errors(k) {
                let _ = write!(row, ",{}", e.norm());
            }
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

struct Plant<'a> {
    net: &'a NetworkModel,
    gains: &'a dyn GainSource,
    rho: &'a ParamSignal,
    dist: Disturbances,
    n: usize,
    driven: bool,
}

impl Plant<'_> {
    fn rho_of(&self, t: f64, state: &Vector) -> f64 {
        if self.driven {
            state[state.len() - 1]
        } else {
            self.rho.value_at(t).expect("time-based source")
        }
    }

    fn inputs(
        &self,
        t: f64,
        state: &Vector,
        rho: f64,
        w: &DisturbanceSample,
    ) -> Result<Vec<Vector>, SimError> {
        let n = self.n;
        let gains = self.gains.gains(rho)?;
        let x = state.rows(0, n);
        let mut u = Vec::with_capacity(self.net.agent_count());
        for (i, agent) in self.net.agents.iter().enumerate() {
            let xi = state.rows(n * (i + 1), n);
            let g = gains
                .get(i)
                .ok_or_else(|| SimError::Invalid("gain source has too few agents".into()))?;
            let y = &agent.c2 * x + &agent.d2 * &w.agents[i];
            let mut ui = &g.l * (y - &agent.c2 * xi);
            for (j, k) in &g.k {
                let (slot, link) = agent
                    .links
                    .iter()
                    .enumerate()
                    .find(|(_, l)| l.from == *j)
                    .ok_or_else(|| {
                        SimError::Invalid(format!("agent {} has no link from {}", i + 1, j + 1))
                    })?;
                let xj = state.rows(n * (j + 1), n);
                let v = &link.h * xj + &link.g * &w.links[i][slot];
                ui += k * (v - &link.h * xi);
            }
            u.push(ui);
        }
        let _ = t;
        Ok(u)
    }

    fn deriv(&self, t: f64, state: &Vector) -> Result<Vector, SimError> {
        let n = self.n;
        let rho = self.rho_of(t, state);
        if !self.net.gamma_interval.contains(rho) {
            return Err(SimError::OutOfRange { t, rho });
        }
        let rho = rho.clamp(self.net.gamma_interval.lo, self.net.gamma_interval.hi);
        let a = self.net.plant.eval_a(rho)?;
        let w = self.dist.at(t);
        let u = self.inputs(t, state, rho, &w)?;
        let mut d = Vector::zeros(state.len());
        let x = state.rows(0, n).into_owned();
        let fx =
            &a * &x + &self.net.plant.b1 * self.net.plant.phi(&x) + &self.net.plant.b20 * &w.w0;
        d.rows_mut(0, n).copy_from(&fx);
        for (i, agent) in self.net.agents.iter().enumerate() {
            let xi = state.rows(n * (i + 1), n).into_owned();
            let fi = &a * &xi
                + &self.net.plant.b1 * self.net.plant.phi(&xi)
                + &u[i]
                + &agent.b2 * &w.agents[i];
            d.rows_mut(n * (i + 1), n).copy_from(&fi);
        }
        if let RhoSource::Driven { driver, .. } = &self.rho.source {
            let last = d.len() - 1;
            d[last] = driver.rate(state[last], &x);
        }
        Ok(d)
    }
}

fn check_setup(net: &NetworkModel, cfg: &SimConfig) -> Result<(), SimError> {
    let n = net.state_dim();
    if !(cfg.dt > 0.0) || !(cfg.horizon >= cfg.dt) {
        return Err(SimError::Invalid(format!(
            "need dt > 0 and horizon >= dt, got dt = {}, T = {}",
            cfg.dt, cfg.horizon
        )));
    }
    if cfg.x0.len() != n
        || cfg.agents_x0.len() != net.agent_count()
        || cfg.agents_x0.iter().any(|v| v.len() != n)
    {
        return Err(SimError::Invalid(
            "initial states do not match the network".into(),
        ));
    }
    Ok(())
}

/// Integrates the network with classical fixed-step RK4.
///
/// A driven `rho` is carried as the last state component; time-based
/// sources are evaluated at each stage time. Gains are fetched at the
/// stage's `rho`.
pub fn simulate(
    net: &NetworkModel,
    gains: &dyn GainSource,
    cfg: &SimConfig,
) -> Result<SimulationTrace, SimError> {
    net.ensure_valid()?;
    check_setup(net, cfg)?;
    let n = net.state_dim();
    let agents = net.agent_count();
    let driven = cfg.rho.is_driven();
    let plant = Plant {
        net,
        gains,
        rho: &cfg.rho,
        dist: Disturbances::new(net, &cfg.disturbances, cfg.horizon)?,
        n,
        driven,
    };

    let dim = n * (agents + 1) + usize::from(driven);
    let mut state = Vector::zeros(dim);
    state.rows_mut(0, n).copy_from(&cfg.x0);
    for (i, x) in cfg.agents_x0.iter().enumerate() {
        state.rows_mut(n * (i + 1), n).copy_from(x);
    }
    if let RhoSource::Driven { initial, .. } = cfg.rho.source {
        state[dim - 1] = initial;
    }

    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let mut trace = SimulationTrace {
        dt: cfg.dt,
        t: Vec::with_capacity(steps + 1),
        x: Vec::with_capacity(steps + 1),
        agents: Vec::with_capacity(steps + 1),
        rho: Vec::with_capacity(steps + 1),
        u: Vec::with_capacity(steps + 1),
        disturbances: Vec::with_capacity(steps + 1),
        max_rho_rate: 0.0,
    };
    let record = |trace: &mut SimulationTrace, t: f64, state: &Vector| -> Result<(), SimError> {
        let rho = plant.rho_of(t, state);
        if !net.gamma_interval.contains(rho) {
            return Err(SimError::OutOfRange { t, rho });
        }
        let w = plant.dist.at(t);
        let u = plant.inputs(
            t,
            state,
            rho.clamp(net.gamma_interval.lo, net.gamma_interval.hi),
            &w,
        )?;
        if let Some(&prev) = trace.rho.last() {
            let rate = (rho - prev).abs() / cfg.dt;
            trace.max_rho_rate = trace.max_rho_rate.max(rate);
            if let Some(declared) = cfg.rho.rate_max {
                if rate > declared * (1.0 + 1e-6) {
                    return Err(SimError::RateViolation {
                        t,
                        observed: rate,
                        declared,
                    });
                }
            }
        }
        trace.t.push(t);
        trace.x.push(state.rows(0, n).into_owned());
        trace.agents.push(
            (0..agents)
                .map(|i| state.rows(n * (i + 1), n).into_owned())
                .collect(),
        );
        trace.rho.push(rho);
        trace.u.push(u);
        trace.disturbances.push(w);
        Ok(())
    };

    record(&mut trace, 0.0, &state)?;
    let h = cfg.dt;
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = plant.deriv(t, &state)?;
        let k2 = plant.deriv(t + 0.5 * h, &(&state + &k1 * (0.5 * h)))?;
        let k3 = plant.deriv(t + 0.5 * h, &(&state + &k2 * (0.5 * h)))?;
        let k4 = plant.deriv(t + h, &(&state + &k3 * h))?;
        state += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let t_next = (k + 1) as f64 * h;
        if !state.iter().all(|v| v.is_finite()) || state.norm() > DIVERGENCE_NORM {
            return Err(SimError::Divergence { t: t_next });
        }
        record(&mut trace, t_next, &state)?;
    }
    Ok(trace)
}

/// Protocol inputs recomputed from the stored states, disturbances and the
/// gain source; used to replay a trace.
pub fn replay_inputs(
    net: &NetworkModel,
    gains: &dyn GainSource,
    trace: &SimulationTrace,
) -> Result<Vec<Vec<Vector>>, SimError> {
    let n = net.state_dim();
    let mut out = Vec::with_capacity(trace.len());
    for k in 0..trace.len() {
        let g = gains.gains(trace.rho[k])?;
        let w = &trace.disturbances[k];
        let x = &trace.x[k];
        let mut uk = Vec::with_capacity(net.agent_count());
        for (i, agent) in net.agents.iter().enumerate() {
            let xi = &trace.agents[k][i];
            let y = &agent.c2 * x + &agent.d2 * &w.agents[i];
            let mut ui = &g[i].l * (y - &agent.c2 * xi);
            for (j, kij) in &g[i].k {
                let slot = agent
                    .links
                    .iter()
                    .position(|l| l.from == *j)
                    .expect("link exists");
                let link = &agent.links[slot];
                let v = &link.h * &trace.agents[k][*j] + &link.g * &w.links[i][slot];
                ui += kij * (v - &link.h * xi);
            }
            debug_assert_eq!(ui.len(), n.min(ui.len()));
            uk.push(ui);
        }
        out.push(uk);
    }
    Ok(out)
}

/// Disagreement `(1/N) sum_i sum_{j in V_i} ||e_j - e_i||^2` per sample.
pub fn disagreement_series(trace: &SimulationTrace, graph: &DiGraph) -> Vec<f64> {
    (0..trace.len())
        .map(|k| disagreement(&trace.errors(k), graph))
        .collect()
}

pub fn disagreement(e: &[Vector], graph: &DiGraph) -> f64 {
    let n = graph.node_count() as f64;
    (0..graph.node_count())
        .map(|i| {
            graph
                .neighbors(i)
                .iter()
                .map(|&j| (&e[j] - &e[i]).norm_squared())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

fn trapezoid(dt: f64, f: &[f64]) -> f64 {
    if f.len() < 2 {
        return 0.0;
    }
    dt * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[f.len() - 1]))
}

/// Integral of `||w0||^2` and `(1/N) sum_i (||w_i||^2 + sum_j ||w_ij||^2)`.
pub fn disturbance_energy(trace: &SimulationTrace) -> f64 {
    let n = trace.agent_count().max(1) as f64;
    let series: Vec<f64> = trace
        .disturbances
        .iter()
        .map(|d| {
            let (w0, per_agent) = d.energies();
            w0 + per_agent.iter().sum::<f64>() / n
        })
        .collect();
    trapezoid(trace.dt, &series)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HinfMode {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HinfRatio {
    pub numerator: f64,
    pub initial_mismatch: f64,
    pub disturbance_energy: f64,
    pub ratio: f64,
}

/// Empirical disagreement gain of a trace with storage weights `p_blocks`
/// (normally `X_i(rho(0)) / N`). Strong mode adds `(1/N) e'Qe`.
pub fn hinf_ratio_with(
    trace: &SimulationTrace,
    graph: &DiGraph,
    p_blocks: &[Mat],
    q: Option<&[Mat]>,
    mode: HinfMode,
) -> Result<HinfRatio, SimError> {
    let n = trace.agent_count() as f64;
    let psi = disagreement_series(trace, graph);
    let running: Vec<f64> = match (mode, q) {
        (HinfMode::Weak, _) => psi,
        (HinfMode::Strong, Some(q)) => (0..trace.len())
            .map(|k| {
                let e = trace.errors(k);
                psi[k]
                    + e.iter()
                        .zip(q)
                        .map(|(ei, qi)| (ei.transpose() * qi * ei)[(0, 0)])
                        .sum::<f64>()
                        / n
            })
            .collect(),
        (HinfMode::Strong, None) => return Err(SimError::Invalid("strong mode needs Q".into())),
    };
    let numerator = trapezoid(trace.dt, &running);
    let e0 = trace.errors(0);
    let initial_mismatch: f64 = e0
        .iter()
        .zip(p_blocks)
        .map(|(e, p)| (e.transpose() * p * e)[(0, 0)])
        .sum();
    let energy = disturbance_energy(trace);
    let denom = initial_mismatch + energy;
    if denom <= 0.0 {
        return Err(SimError::ZeroDenominator);
    }
    Ok(HinfRatio {
        numerator,
        initial_mismatch,
        disturbance_energy: energy,
        ratio: numerator / denom,
    })
}

/// [`hinf_ratio_with`] using `P` from the schedule at `rho(0)`.
pub fn hinf_ratio(
    trace: &SimulationTrace,
    schedule: &GainSchedule,
    q: Option<&[Mat]>,
    mode: HinfMode,
) -> Result<HinfRatio, SimError> {
    let p = schedule.p_blocks(trace.rho[0])?;
    hinf_ratio_with(trace, &schedule.network.graph, &p, q, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub checked: usize,
    pub excluded: usize,
    pub fraction_satisfied: f64,
    /// Largest `lhs - rhs` over checked pairs (negative when all hold).
    pub worst_violation: f64,
    pub worst_time: f64,
    pub worst_agent: usize,
}

/// Checks the per-agent dissipation inequality along a trace:
///
/// `dV_i/dt <= -e_i'Q_i e_i - (p_i+q_i)||e_i||^2 + 2 e_i' sum_j e_j
///  - 2 delta_i V_i + sum_j 2 delta_j/(q_j+1) V_j
///  + gamma^2 (||w_0||^2 + ||w_i||^2 + sum_j ||w_ij||^2)`
///
/// with `V_i = e_i' X_i(rho) e_i` differentiated by central differences.
/// The `Q` term is included only when `q` is given. Samples where `rho` is
/// within `2 dt max|rho'|` of a corner are skipped, as are the two ends.
pub fn dissipation_check(
    trace: &SimulationTrace,
    schedule: &GainSchedule,
    delta: &[f64],
    q: Option<&[Mat]>,
    gamma_sq: f64,
) -> Result<DissipationReport, SimError> {
    let graph = &schedule.network.graph;
    let agents = trace.agent_count();
    let len = trace.len();
    let mut report = DissipationReport {
        checked: 0,
        excluded: 0,
        fraction_satisfied: 1.0,
        worst_violation: f64::NEG_INFINITY,
        worst_time: 0.0,
        worst_agent: 0,
    };
    if len < 3 {
        return Ok(report);
    }
    let v: Vec<Vec<f64>> = (0..len)
        .map(|k| {
            let e = trace.errors(k);
            (0..agents)
                .map(|i| Ok((e[i].transpose() * schedule.x_at(i, trace.rho[k])? * &e[i])[(0, 0)]))
                .collect::<Result<Vec<_>, SimError>>()
        })
        .collect::<Result<_, _>>()?;
    let corners = schedule.grid.corners();
    let window = 2.0 * trace.dt * trace.max_rho_rate;
    let mut satisfied = 0usize;
    for k in 1..len - 1 {
        if corners.iter().any(|c| (trace.rho[k] - c).abs() < window) {
            report.excluded += agents;
            continue;
        }
        let e = trace.errors(k);
        let (w0, w_agent) = trace.disturbances[k].energies();
        for i in 0..agents {
            let dv = (v[k + 1][i] - v[k - 1][i]) / (2.0 * trace.dt);
            let nbrs = graph.neighbors(i);
            let pq = (graph.in_degree(i) + graph.out_degree(i)) as f64;
            let sum_e: Vector = nbrs
                .iter()
                .fold(Vector::zeros(e[i].len()), |acc, &j| acc + &e[j]);
            let mut terms = vec![
                -pq * e[i].norm_squared(),
                2.0 * e[i].dot(&sum_e),
                -2.0 * delta[i] * v[k][i],
                gamma_sq * (w0 + w_agent[i]),
            ];
            terms.extend(
                nbrs.iter()
                    .map(|&j| 2.0 * delta[j] / (graph.out_degree(j) as f64 + 1.0) * v[k][j]),
            );
            if let Some(q) = q {
                terms.push(-(e[i].transpose() * &q[i] * &e[i])[(0, 0)]);
            }
            let rhs: f64 = terms.iter().sum();
            let scale = terms.iter().map(|t| t.abs()).fold(dv.abs(), f64::max);
            let excess = dv - rhs;
            report.checked += 1;
            if excess <= 1e-6 * scale {
                satisfied += 1;
            }
            if excess > report.worst_violation {
                report.worst_violation = excess;
                report.worst_time = trace.t[k];
                report.worst_agent = i + 1;
            }
        }
    }
    report.fraction_satisfied = if report.checked == 0 {
        1.0
    } else {
        satisfied as f64 / report.checked as f64
    };
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncErrors {
    /// `per_agent[i][k] = ||x(t_k) - x_i(t_k)||`.
    pub per_agent: Vec<Vec<f64>>,
    /// `sum_i ||x - x_i||^2` per sample.
    pub total_sq: Vec<f64>,
}

pub fn sync_error_series(trace: &SimulationTrace) -> SyncErrors {
    let agents = trace.agent_count();
    let mut per_agent = vec![Vec::with_capacity(trace.len()); agents];
    let mut total_sq = Vec::with_capacity(trace.len());
    for k in 0..trace.len() {
        let mut total = 0.0;
        for (i, e) in trace.errors(k).iter().enumerate() {
            let norm = e.norm();
            per_agent[i].push(norm);
            total += norm * norm;
        }
        total_sq.push(total);
    }
    SyncErrors {
        per_agent,
        total_sq,
    }
}

/// Least-squares slope `omega` of `ln s(t) ~ c - omega t` over samples with
/// `t` in `[t0, t1]` and positive values.
pub fn fit_decay_rate(t: &[f64], s: &[f64], t0: f64, t1: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(s)
        .filter(|(tk, sk)| **tk >= t0 && **tk <= t1 && **sk > 0.0)
        .map(|(tk, sk)| (*tk, sk.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let (mt, ml) = (
        pts.iter().map(|p| p.0).sum::<f64>() / m,
        pts.iter().map(|p| p.1).sum::<f64>() / m,
    );
    let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    (var > 0.0).then(|| -cov / var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::lmi::{BarrierSolver, DesignParams, GammaSearch};
    use crate::model::Nonlinearity;
    use crate::scheduling::{
        build_grid, synthesize_schedule, GridPolicy, OverlapPolicy, SynthesisMode,
    };
    use std::sync::OnceLock;

    fn schedule() -> &'static GainSchedule {
        static S: OnceLock<GainSchedule> = OnceLock::new();
        S.get_or_init(|| {
            let net = fixtures::synthetic_ring(3);
            let params = DesignParams::uniform(3, 2, 0.1, 1.0, 0.0);
            let grid = build_grid(
                &net,
                GridPolicy::Count {
                    points: 3,
                    alpha: None,
                },
                OverlapPolicy::Collapsed,
                params,
            )
            .unwrap();
            synthesize_schedule(
                &net,
                &grid,
                SynthesisMode::Minimize {
                    search: GammaSearch::default(),
                },
                &BarrierSolver::default(),
            )
            .unwrap()
        })
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn config(
        net: &NetworkModel,
        rho: ParamSignal,
        dist: DisturbanceSpec,
        horizon: f64,
    ) -> SimConfig {
        SimConfig {
            dt: 1e-3,
            horizon,
            x0: v(&[1.0, -0.5]),
            agents_x0: (0..net.agent_count())
                .map(|i| v(&[0.2 * i as f64, -0.3]))
                .collect(),
            rho,
            disturbances: dist,
        }
    }

    fn wavy() -> ParamSignal {
        ParamSignal {
            source: RhoSource::Sinusoid {
                offset: 0.5,
                amplitude: 0.4,
                omega: 0.5,
            },
            rate_max: Some(0.2),
        }
    }

    struct Fixed(Arc<Vec<AgentGains>>);

    impl GainSource for Fixed {
        fn gains(&self, _rho: f64) -> Result<Arc<Vec<AgentGains>>, SimError> {
            Ok(Arc::clone(&self.0))
        }
    }

    /// Schedule gains with the observer gain negated.
    struct FlippedL<'a>(&'a GainSchedule);

    impl GainSource for FlippedL<'_> {
        fn gains(&self, rho: f64) -> Result<Arc<Vec<AgentGains>>, SimError> {
            let mut g = (*self.0.gains_at(rho)?).clone();
            for a in &mut g {
                a.l = -&a.l;
            }
            Ok(Arc::new(g))
        }
    }

    #[test]
    fn identical_start_stays_synchronized() {
        let s = schedule();
        let mut cfg = config(&s.network, wavy(), DisturbanceSpec::zero(&s.network), 5.0);
        cfg.agents_x0 = vec![cfg.x0.clone(); 3];
        let trace = simulate(&s.network, s, &cfg).unwrap();
        let worst = sync_error_series(&trace)
            .total_sq
            .iter()
            .copied()
            .fold(0.0, f64::max);
        assert!(worst.sqrt() < 1e-9);
        assert_eq!(
            hinf_ratio(&trace, s, None, HinfMode::Weak),
            Err(SimError::ZeroDenominator)
        );
    }

    #[test]
    fn zero_error_with_disturbance_has_zero_ratio() {
        let s = schedule();
        let mut cfg = config(&s.network, wavy(), DisturbanceSpec::zero(&s.network), 1.0);
        cfg.agents_x0 = vec![cfg.x0.clone(); 3];
        let mut trace = simulate(&s.network, s, &cfg).unwrap();
        for d in &mut trace.disturbances {
            d.w0 = v(&[1.0]);
        }
        let r = hinf_ratio(&trace, s, None, HinfMode::Weak).unwrap();
        assert!((r.disturbance_energy - 1.0).abs() < 1e-9);
        assert_eq!(r.ratio, 0.0);
    }

    #[test]
    fn disagreement_of_a_pair() {
        let g = DiGraph::ring(2).unwrap();
        let e = vec![v(&[1.0, 2.0]), v(&[4.0, -2.0])];
        assert!((disagreement(&e, &g) - 25.0).abs() < 1e-12);
        let ring = DiGraph::ring(4).unwrap();
        assert_eq!(disagreement(&vec![v(&[0.3, 0.7]); 4], &ring), 0.0);
    }

    #[test]
    fn replay_reproduces_inputs() {
        let s = schedule();
        let cfg = config(
            &s.network,
            wavy(),
            DisturbanceSpec::noise(&s.network, 3, 0.5),
            2.0,
        );
        let trace = simulate(&s.network, s, &cfg).unwrap();
        let replay = replay_inputs(&s.network, s, &trace).unwrap();
        for (a, b) in trace.u.iter().zip(&replay) {
            for (ua, ub) in a.iter().zip(b) {
                assert!((ua - ub).amax() <= 1e-12 * (1.0 + ua.amax()));
            }
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let s = schedule();
        let cfg = config(
            &s.network,
            wavy(),
            DisturbanceSpec::noise(&s.network, 9, 1.0),
            1.0,
        );
        let csv = |t: &SimulationTrace| {
            let mut buf = Vec::new();
            t.write_csv(&s.network.graph, &mut buf).unwrap();
            buf
        };
        let a = simulate(&s.network, s, &cfg).unwrap();
        let b = simulate(&s.network, s, &cfg).unwrap();
        assert_eq!(csv(&a), csv(&b));
        let header = String::from_utf8(csv(&a)).unwrap();
        assert!(header.starts_with("t,x1,x2,x1_1,x1_2,"));
    }

    #[test]
    fn noise_seeds_are_distinct_per_channel() {
        let net = fixtures::synthetic_ring(3);
        let d = DisturbanceSpec::noise(&net, 4, 1.0);
        assert_eq!(d.w0, Channel::noise(4000, 1.0));
        assert_eq!(d.agents[2], Channel::noise(4003, 1.0));
        assert_eq!(d.links[0][0], Channel::noise(4004, 1.0));
    }

    #[test]
    fn rk4_is_fourth_order() {
        let s = schedule();
        let run = |dt: f64| {
            let mut cfg = config(
                &s.network,
                ParamSignal::constant(0.3),
                DisturbanceSpec::zero(&s.network),
                1.0,
            );
            cfg.dt = dt;
            let t = simulate(&s.network, s, &cfg).unwrap();
            let mut all = t.x.last().unwrap().as_slice().to_vec();
            for a in t.agents.last().unwrap() {
                all.extend_from_slice(a.as_slice());
            }
            Vector::from_vec(all)
        };
        let reference = run(0.05 / 32.0);
        let errs: Vec<f64> = [0.05, 0.025, 0.0125]
            .iter()
            .map(|&h| (run(h) - &reference).norm())
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 4.0).abs() < 0.3, "order {order}, errors {errs:?}");
        }
    }

    #[test]
    fn disturbance_energy_converges_in_dt() {
        let s = schedule();
        let energy = |dt: f64| {
            let mut cfg = config(
                &s.network,
                wavy(),
                DisturbanceSpec::noise(&s.network, 2, 1.0),
                3.0,
            );
            cfg.dt = dt;
            disturbance_energy(&simulate(&s.network, s, &cfg).unwrap())
        };
        let (a, b) = (energy(1e-3), energy(5e-4));
        assert!((a - b).abs() < 0.01 * b, "{a} vs {b}");
    }

    #[test]
    fn strong_ratio_dominates_weak() {
        let s = schedule();
        let cfg = config(
            &s.network,
            wavy(),
            DisturbanceSpec::noise(&s.network, 1, 1.0),
            10.0,
        );
        let trace = simulate(&s.network, s, &cfg).unwrap();
        let q = &s.grid.params.q;
        let weak = hinf_ratio(&trace, s, None, HinfMode::Weak).unwrap();
        let strong = hinf_ratio(&trace, s, Some(q), HinfMode::Strong).unwrap();
        assert!(strong.ratio >= weak.ratio);
        assert_eq!(strong.initial_mismatch, weak.initial_mismatch);
        assert!(weak.ratio < s.gamma_sq);
        assert!(matches!(
            hinf_ratio(&trace, s, None, HinfMode::Strong),
            Err(SimError::Invalid(_))
        ));
    }

    #[test]
    fn dissipation_holds_and_breaks_with_flipped_gain() {
        let s = schedule();
        let cfg = config(
            &s.network,
            wavy(),
            DisturbanceSpec::noise(&s.network, 5, 1.0),
            5.0,
        );
        let delta = &s.grid.params.delta;
        let good = simulate(&s.network, s, &cfg).unwrap();
        let report = dissipation_check(&good, s, delta, None, s.gamma_sq).unwrap();
        assert!(report.checked > 0);
        assert_eq!(report.fraction_satisfied, 1.0, "{report:?}");

        let mut quiet = cfg.clone();
        quiet.horizon = 1.0;
        quiet.disturbances = DisturbanceSpec::zero(&s.network);
        let bad = simulate(&s.network, &FlippedL(s), &quiet).unwrap();
        let report = dissipation_check(&bad, s, delta, None, s.gamma_sq).unwrap();
        assert!(report.fraction_satisfied < 1.0, "{report:?}");
        assert!(report.worst_violation > 0.0);
    }

    #[test]
    fn decay_fit_recovers_exponent() {
        let t: Vec<f64> = (0..200).map(|k| k as f64 * 0.05).collect();
        let s: Vec<f64> = t
            .iter()
            .map(|tk| (v(&[3.0, -4.0]) * (-tk).exp()).norm_squared())
            .collect();
        let w = fit_decay_rate(&t, &s, 1.0, 9.0).unwrap();
        assert!((w - 2.0).abs() < 1e-9);
        assert_eq!(fit_decay_rate(&t, &s, 20.0, 30.0), None);
    }

    #[test]
    fn lone_agent_decays_at_observer_rate() {
        let mut net = fixtures::lone_agent();
        net.plant.phi = Nonlinearity::Zero;
        net.plant.r = Mat::zeros(2, 2);
        let l = Mat::from_column_slice(2, 1, &[2.0, 0.5]);
        let gains = Fixed(Arc::new(vec![AgentGains {
            l: l.clone(),
            k: vec![],
        }]));
        let cfg = config(
            &net,
            ParamSignal::constant(0.5),
            DisturbanceSpec::zero(&net),
            15.0,
        );
        let trace = simulate(&net, &gains, &cfg).unwrap();
        let closed = net.eval_a(0.5).unwrap() - &l * &net.agents[0].c2;
        let slowest = closed
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(slowest < 0.0);
        let errs = sync_error_series(&trace);
        let w = fit_decay_rate(&trace.t, &errs.total_sq, 5.0, 15.0).unwrap();
        assert!(
            (w + 2.0 * slowest).abs() < 0.05 * w,
            "{w} vs {}",
            -2.0 * slowest
        );
    }

    #[test]
    fn leaving_the_interval_is_an_error() {
        let s = schedule();
        let rho = ParamSignal {
            source: RhoSource::Table {
                points: vec![(0.0, 0.9), (1.0, 1.1)],
            },
            rate_max: None,
        };
        let cfg = config(&s.network, rho, DisturbanceSpec::zero(&s.network), 1.0);
        assert!(matches!(
            simulate(&s.network, s, &cfg),
            Err(SimError::OutOfRange { .. })
        ));
    }

    #[test]
    fn undeclared_rate_is_an_error() {
        let s = schedule();
        let mut rho = wavy();
        rho.rate_max = Some(0.1);
        let cfg = config(&s.network, rho, DisturbanceSpec::zero(&s.network), 2.0);
        assert!(matches!(
            simulate(&s.network, s, &cfg),
            Err(SimError::RateViolation { .. })
        ));
    }

    #[test]
    fn bad_setup_and_divergence() {
        let s = schedule();
        let mut cfg = config(&s.network, wavy(), DisturbanceSpec::zero(&s.network), 1.0);
        cfg.dt = 0.0;
        assert!(matches!(
            simulate(&s.network, s, &cfg),
            Err(SimError::Invalid(_))
        ));
        let mut cfg = config(&s.network, wavy(), DisturbanceSpec::zero(&s.network), 1.0);
        cfg.agents_x0.pop();
        assert!(matches!(
            simulate(&s.network, s, &cfg),
            Err(SimError::Invalid(_))
        ));

        let mut g = (*s.gains_at(0.5).unwrap()).clone();
        for a in &mut g {
            a.l *= -1e4;
        }
        let cfg = config(
            &s.network,
            ParamSignal::constant(0.5),
            DisturbanceSpec::zero(&s.network),
            1.0,
        );
        assert!(matches!(
            simulate(&s.network, &Fixed(Arc::new(g)), &cfg),
            Err(SimError::Divergence { .. })
        ));
    }
}
