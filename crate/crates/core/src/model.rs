//! Reference plant, agents, measurement channels and the scheduling signal.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DiGraph, GraphError};
use crate::linalg::{self, rows_serde, Mat, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("rho = {rho} lies outside [{lo}, {hi}]")]
    OutOfRange { rho: f64, lo: f64, hi: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid tabulation: {0}")]
    BadTable(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("network violates standing assumptions: {0}")]
    Invalid(ValidationReport),
}

/// Closed scheduling interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(rho: f64) -> Self {
        Self { lo: rho, hi: rho }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Membership with a relative slack of `1e-12` to absorb rounding at the
    /// endpoints.
    pub fn contains(&self, rho: f64) -> bool {
        let slack = 1e-12 * (1.0 + self.lo.abs().max(self.hi.abs()));
        rho >= self.lo - slack && rho <= self.hi + slack
    }

    pub fn check(&self, rho: f64) -> Result<(), ModelError> {
        if self.contains(rho) {
            Ok(())
        } else {
            Err(ModelError::OutOfRange {
                rho,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }

    pub fn is_subset_of(&self, other: &Interval) -> bool {
        other.contains(self.lo) && other.contains(self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabSample {
    pub rho: f64,
    #[serde(with = "rows_serde")]
    pub a: Mat,
}

/// How the state matrix depends on the scheduling parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamDependence {
    /// `A(rho) = a0 + rho * delta`.
    Affine {
        #[serde(with = "rows_serde")]
        a0: Mat,
        #[serde(with = "rows_serde")]
        delta: Mat,
    },
    /// Linear interpolation between samples with strictly increasing `rho`.
    Tabulated { samples: Vec<TabSample> },
}

impl ParamDependence {
    pub fn dim(&self) -> usize {
        match self {
            ParamDependence::Affine { a0, .. } => a0.nrows(),
            ParamDependence::Tabulated { samples } => samples.first().map_or(0, |s| s.a.nrows()),
        }
    }

    /// Evaluates `A(rho)`. Tabulated data is only defined between its first
    /// and last sample.
    pub fn eval(&self, rho: f64) -> Result<Mat, ModelError> {
        match self {
            ParamDependence::Affine { a0, delta } => Ok(a0 + delta * rho),
            ParamDependence::Tabulated { samples } => {
                let first = samples
                    .first()
                    .ok_or_else(|| ModelError::BadTable("no samples".into()))?;
                let last = samples.last().expect("non-empty");
                Interval::new(first.rho, last.rho).check(rho)?;
                let rho = rho.clamp(first.rho, last.rho);
                let k = samples.partition_point(|s| s.rho <= rho);
                if k == 0 {
                    return Ok(first.a.clone());
                }
                if k >= samples.len() {
                    return Ok(last.a.clone());
                }
                let (s0, s1) = (&samples[k - 1], &samples[k]);
                let w = (rho - s0.rho) / (s1.rho - s0.rho);
                Ok(&s0.a * (1.0 - w) + &s1.a * w)
            }
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        match self {
            ParamDependence::Affine { a0, delta } => {
                if !a0.is_square() || a0.shape() != delta.shape() {
                    return Err(ModelError::DimensionMismatch(
                        "A0 and Delta must be equal square matrices".into(),
                    ));
                }
            }
            ParamDependence::Tabulated { samples } => {
                if samples.is_empty() {
                    return Err(ModelError::BadTable("no samples".into()));
                }
                let n = samples[0].a.nrows();
                for w in samples.windows(2) {
                    if w[1].rho <= w[0].rho {
                        return Err(ModelError::BadTable(
                            "sample abscissae must increase strictly".into(),
                        ));
                    }
                }
                if samples.iter().any(|s| s.a.shape() != (n, n)) {
                    return Err(ModelError::DimensionMismatch(
                        "tabulated samples must be n x n".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Abscissae of tabulation knots; empty for affine dependence.
    pub fn knots(&self) -> Vec<f64> {
        match self {
            ParamDependence::Affine { .. } => Vec::new(),
            ParamDependence::Tabulated { samples } => samples.iter().map(|s| s.rho).collect(),
        }
    }
}

/// Registered Lipschitz nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Nonlinearity {
    Zero,
    /// `phi(x) = (theta - 1/2) x` on a two-dimensional state.
    UnifiedChaotic {
        theta: f64,
    },
    /// `phi(x) = gain * sin(x)` componentwise.
    Sine {
        gain: f64,
    },
}

impl Nonlinearity {
    pub fn eval(&self, x: &Vector, out_dim: usize) -> Vector {
        match *self {
            Nonlinearity::Zero => Vector::zeros(out_dim),
            Nonlinearity::UnifiedChaotic { theta } => x * (theta - 0.5),
            Nonlinearity::Sine { gain } => x.map(|v| gain * v.sin()),
        }
    }

    /// Whether the nonlinearity maps `R^n` to `R^l`.
    pub fn supports(&self, n: usize, l: usize) -> bool {
        match self {
            Nonlinearity::Zero => true,
            Nonlinearity::UnifiedChaotic { .. } => n == 2 && l == 2,
            Nonlinearity::Sine { .. } => n == l,
        }
    }

    /// Tightest diagonal Lipschitz matrix for this entry.
    pub fn lipschitz_matrix(&self, n: usize) -> Mat {
        match *self {
            Nonlinearity::Zero => Mat::zeros(n, n),
            Nonlinearity::UnifiedChaotic { theta } => Mat::identity(n, n) * (theta - 0.5).powi(2),
            Nonlinearity::Sine { gain } => Mat::identity(n, n) * gain * gain,
        }
    }
}

/// Leader dynamics `x' = A(rho) x + B1 phi(x) + B20 w0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePlant {
    pub a: ParamDependence,
    #[serde(with = "rows_serde")]
    pub b1: Mat,
    #[serde(with = "rows_serde")]
    pub b20: Mat,
    pub phi: Nonlinearity,
    /// Lipschitz bound `||phi(x1) - phi(x2)||^2 <= (x1 - x2)' R (x1 - x2)`.
    #[serde(with = "rows_serde")]
    pub r: Mat,
}

impl ReferencePlant {
    pub fn state_dim(&self) -> usize {
        self.a.dim()
    }

    pub fn phi_dim(&self) -> usize {
        self.b1.ncols()
    }

    pub fn disturbance_dim(&self) -> usize {
        self.b20.ncols()
    }

    pub fn eval_a(&self, rho: f64) -> Result<Mat, ModelError> {
        self.a.eval(rho)
    }

    pub fn phi(&self, x: &Vector) -> Vector {
        self.phi.eval(x, self.phi_dim())
    }

    /// Randomized spot check of the Lipschitz bound. Returns the worst ratio
    /// `||dphi||^2 / (dx' R dx)` found (values above 1 violate the bound).
    pub fn lipschitz_spot_check(&self, samples: usize, seed: u64) -> f64 {
        let n = self.state_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let x1 = Vector::from_fn(n, |_, _| rng.gen_range(-10.0..10.0));
            let x2 = &x1 + Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let dphi = self.phi(&x1) - self.phi(&x2);
            let dx = &x1 - &x2;
            let bound = (dx.transpose() * &self.r * &dx)[(0, 0)];
            let lhs = dphi.norm_squared();
            if lhs > 0.0 {
                worst = worst.max(if bound > 0.0 {
                    lhs / bound
                } else {
                    f64::INFINITY
                });
            }
        }
        worst
    }
}

/// Channel from neighbour `from` into an agent: `v = H x_from + G w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// 0-based source agent; 1-based when serialized.
    #[serde(with = "one_based")]
    pub from: usize,
    #[serde(with = "rows_serde")]
    pub h: Mat,
    #[serde(with = "rows_serde")]
    pub g: Mat,
}

mod one_based {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &usize, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(*v as u64 + 1)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
        match usize::deserialize(d)? {
            0 => Err(D::Error::custom("agent labels start at 1")),
            v => Ok(v - 1),
        }
    }
}

impl Link {
    /// `F = G G'`.
    pub fn f(&self) -> Mat {
        &self.g * self.g.transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    #[serde(with = "rows_serde")]
    pub b2: Mat,
    #[serde(with = "rows_serde")]
    pub c2: Mat,
    #[serde(with = "rows_serde")]
    pub d2: Mat,
    pub links: Vec<Link>,
}

impl AgentModel {
    /// `E2 = D2 D2'`.
    pub fn e2(&self) -> Mat {
        &self.d2 * self.d2.transpose()
    }

    pub fn link(&self, from: usize) -> Option<&Link> {
        self.links.iter().find(|l| l.from == from)
    }

    pub fn disturbance_dim(&self) -> usize {
        self.b2.ncols()
    }
}

/// Reference plant, agents and topology over the scheduling interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub graph: DiGraph,
    pub plant: ReferencePlant,
    pub agents: Vec<AgentModel>,
    pub gamma_interval: Interval,
}

/// One violated standing assumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }

    fn push(&mut self, message: impl Into<String>) {
        self.violations.push(Violation {
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msgs: Vec<_> = self.violations.iter().map(|v| v.message.as_str()).collect();
        write!(f, "{}", msgs.join("; "))
    }
}

impl NetworkModel {
    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    /// `A(rho)` with `rho` checked against the scheduling interval.
    pub fn eval_a(&self, rho: f64) -> Result<Mat, ModelError> {
        self.gamma_interval.check(rho)?;
        self.plant.eval_a(rho)
    }

    /// Lists every violated assumption; an empty report means the network is
    /// usable for synthesis.
    pub fn validate(&self) -> ValidationReport {
        let mut rep = ValidationReport::default();
        let n = self.state_dim();
        if let Err(e) = self.plant.a.check() {
            rep.push(format!("plant A: {e}"));
        }
        if self.gamma_interval.lo > self.gamma_interval.hi
            || !self.gamma_interval.lo.is_finite()
            || !self.gamma_interval.hi.is_finite()
        {
            rep.push("scheduling interval must be finite with lo <= hi");
        }
        if let ParamDependence::Tabulated { samples } = &self.plant.a {
            if let (Some(f), Some(l)) = (samples.first(), samples.last()) {
                if !self
                    .gamma_interval
                    .is_subset_of(&Interval::new(f.rho, l.rho))
                {
                    rep.push("tabulated A does not cover the scheduling interval");
                }
            }
        }
        if self.plant.b1.nrows() != n {
            rep.push("dimension: B1 must have n rows");
        }
        if self.plant.b20.nrows() != n {
            rep.push("dimension: B20 must have n rows");
        }
        if self.plant.r.shape() != (n, n) {
            rep.push("dimension: R must be n x n");
        } else {
            if !linalg::is_symmetric(&self.plant.r, 1e-12) {
                rep.push("R not symmetric");
            }
            if linalg::min_eigenvalue(&self.plant.r) < -1e-12 * (1.0 + self.plant.r.norm()) {
                rep.push("R not PSD");
            }
        }
        if !self.plant.phi.supports(n, self.plant.phi_dim()) {
            rep.push("dimension: nonlinearity does not map R^n to the columns of B1");
        } else if self.plant.r.shape() == (n, n)
            && self.plant.lipschitz_spot_check(200, 7) > 1.0 + 1e-9
        {
            rep.push("phi violates the Lipschitz bound R");
        }
        if self.agents.len() != self.graph.node_count() {
            rep.push(format!(
                "dimension: {} agents but graph has {} nodes",
                self.agents.len(),
                self.graph.node_count()
            ));
            return rep;
        }
        if !self.graph.is_weakly_connected() {
            rep.push("graph not weakly connected");
        }
        for (i, ag) in self.agents.iter().enumerate() {
            let label = i + 1;
            if ag.b2.nrows() != n {
                rep.push(format!("dimension: agent {label} B2 must have n rows"));
            }
            if ag.c2.ncols() != n {
                rep.push(format!("dimension: agent {label} C2 must have n columns"));
            }
            if ag.d2.nrows() != ag.c2.nrows() || ag.d2.ncols() != ag.b2.ncols() {
                rep.push(format!("dimension: agent {label} D2 must be m_i x r_i"));
            } else if !linalg::is_positive_definite(&ag.e2()) {
                rep.push(format!(
                    "agent {label}: E2i singular (D2 D2' not positive definite)"
                ));
            }
            let mut froms: Vec<_> = ag.links.iter().map(|l| l.from).collect();
            froms.sort_unstable();
            if froms != self.graph.neighbors(i) {
                rep.push(format!(
                    "agent {label}: links do not match the in-neighbourhood"
                ));
            }
            for link in &ag.links {
                if link.h.ncols() != n || link.g.nrows() != link.h.nrows() {
                    rep.push(format!(
                        "dimension: agent {label} link from {} has bad H/G shape",
                        link.from + 1
                    ));
                } else if !linalg::is_positive_definite(&link.f()) {
                    rep.push(format!(
                        "agent {label}: F_ij singular on link from {}",
                        link.from + 1
                    ));
                }
            }
        }
        rep
    }

    pub fn ensure_valid(&self) -> Result<(), ModelError> {
        let rep = self.validate();
        if rep.is_valid() {
            Ok(())
        } else {
            Err(ModelError::Invalid(rep))
        }
    }

    /// Deterministic content hash of the serialized model.
    pub fn content_hash(&self) -> String {
        crate::archive::sha256_hex(&serde_json::to_vec(self).expect("model serializes"))
    }
}

/// Result of [`mismatch_radius`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchRadius {
    pub alpha: f64,
    /// False when the value came from sampling rather than a closed form.
    pub exact: bool,
}

/// Smallest `alpha` with `(A(rho) - A(c))'(A(rho) - A(c)) <= alpha^2 I` for
/// every `rho` in `interval`.
///
/// For affine dependence this is `max(|a - c|, |b - c|) * sigma(Delta)`. For
/// tabulated dependence `||A(rho) - A(c)||` is convex on each linear piece,
/// so its maximum sits at an endpoint or a knot; those are evaluated together
/// with a uniform grid of `samples` points.
pub fn mismatch_radius(
    plant: &ReferencePlant,
    center: f64,
    interval: Interval,
    samples: usize,
) -> Result<MismatchRadius, ModelError> {
    match &plant.a {
        ParamDependence::Affine { delta, .. } => {
            let reach = (interval.lo - center)
                .abs()
                .max((interval.hi - center).abs());
            Ok(MismatchRadius {
                alpha: reach * linalg::spectral_norm(delta),
                exact: true,
            })
        }
        ParamDependence::Tabulated { .. } => {
            let a_c = plant.a.eval(center)?;
            let mut probes = vec![interval.lo, interval.hi];
            probes.extend(
                plant
                    .a
                    .knots()
                    .into_iter()
                    .filter(|k| *k > interval.lo && *k < interval.hi),
            );
            if samples > 1 && interval.width() > 0.0 {
                probes.extend(
                    (0..samples)
                        .map(|s| interval.lo + interval.width() * s as f64 / (samples - 1) as f64),
                );
            }
            let mut alpha: f64 = 0.0;
            for rho in probes {
                alpha = alpha.max(linalg::spectral_norm(&(plant.a.eval(rho)? - &a_c)));
            }
            Ok(MismatchRadius { alpha, exact: true })
        }
    }
}

/// How the scheduling parameter evolves in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoSource {
    Constant {
        value: f64,
    },
    /// Piecewise-linear `(t, rho)` table, held constant past its ends.
    Table {
        points: Vec<(f64, f64)>,
    },
    /// `rho = offset + amplitude * sin(omega t)`.
    Sinusoid {
        offset: f64,
        amplitude: f64,
        omega: f64,
    },
    /// `rho` is an extra state driven by the reference plant state.
    Driven {
        driver: Driver,
        initial: f64,
    },
}

/// Coupled scalar dynamics for a master-driven scheduling parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Driver {
    /// `rho' = -b rho + x1 x2`, the third equation of a Lorenz-family
    /// oscillator.
    LorenzZ { b: f64 },
}

impl Driver {
    pub fn rate(&self, rho: f64, x: &Vector) -> f64 {
        match *self {
            Driver::LorenzZ { b } => -b * rho + x[0] * x[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSignal {
    pub source: RhoSource,
    /// Declared bound on `|rho'|`. Checked step by step during simulation.
    #[serde(default)]
    pub rate_max: Option<f64>,
}

impl ParamSignal {
    pub fn constant(value: f64) -> Self {
        Self {
            source: RhoSource::Constant { value },
            rate_max: Some(0.0),
        }
    }

    pub fn is_driven(&self) -> bool {
        matches!(self.source, RhoSource::Driven { .. })
    }

    /// Value at time `t` for time-based sources; `None` for driven sources,
    /// whose value lives in the integrator state.
    pub fn value_at(&self, t: f64) -> Option<f64> {
        match &self.source {
            RhoSource::Constant { value } => Some(*value),
            RhoSource::Table { points } => {
                let first = points.first()?;
                let last = points.last()?;
                if t <= first.0 {
                    return Some(first.1);
                }
                if t >= last.0 {
                    return Some(last.1);
                }
                let k = points.partition_point(|p| p.0 <= t);
                let (p0, p1) = (points[k - 1], points[k]);
                Some(p0.1 + (p1.1 - p0.1) * (t - p0.0) / (p1.0 - p0.0))
            }
            RhoSource::Sinusoid {
                offset,
                amplitude,
                omega,
            } => Some(offset + amplitude * (omega * t).sin()),
            RhoSource::Driven { .. } => None,
        }
    }

    /// Exact supremum of `|rho'|` for time-based sources.
    pub fn intrinsic_rate(&self) -> Option<f64> {
        match &self.source {
            RhoSource::Constant { .. } => Some(0.0),
            RhoSource::Table { points } => Some(
                points
                    .windows(2)
                    .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
                    .fold(0.0, f64::max),
            ),
            RhoSource::Sinusoid {
                amplitude, omega, ..
            } => Some((amplitude * omega).abs()),
            RhoSource::Driven { .. } => None,
        }
    }
}
