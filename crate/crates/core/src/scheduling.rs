//! Scheduling grid, per-point synthesis and the piecewise-affine gain
//! schedule.
//!
//! Between neighbouring grid points `rho^k < rho^{k+1}` the certificate is
//! held at `X_k` up to the blend start `a_k`, blended affinely up to the
//! blend end `b_k`, and held at `X_{k+1}` afterwards. The default collapses
//! the hold zones (`a_k = rho^k`, `b_k = rho^{k+1}`).

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Mat};
use crate::lmi::{
    assemble_lmi, check_reduced_lmi, compute_gains, gains_from_x, minimize_gamma_sq,
    solve_feasibility, AgentGains, DesignParams, FeasibleCertificate, GammaSearch, GammaSq,
    LmiError, LmiSolver,
};
use crate::model::{mismatch_radius, Interval, ModelError, NetworkModel, ParamDependence};

/// Points beyond which greedy placement gives up.
pub const MAX_GRID_POINTS: usize = 10_000;
const RHO_QUANTUM: f64 = 1e-9;
const CACHE_LIMIT: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error("covering failure: {0}")]
    CoveringFailure(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("synthesis failed at grid point {index} (rho = {rho}): {source}")]
    PointFailed {
        index: usize,
        rho: f64,
        source: LmiError,
    },
}

/// Where the hold zones sit inside each segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OverlapPolicy {
    /// Blend across the whole segment.
    Collapsed,
    /// Hold each certificate for `fraction` of the segment width next to its
    /// grid point; `fraction` in `[0, 0.5)`.
    Plateau { fraction: f64 },
}

/// How grid points are placed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridPolicy {
    /// `points` evenly spaced points on the interval. With `alpha` given the
    /// covering is checked against it, otherwise each point gets the
    /// smallest radius that covers its adjacent segments.
    Count { points: usize, alpha: Option<f64> },
    /// Fewest points such that every segment stays within `alpha` of both
    /// of its endpoints.
    TargetAlpha { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDesign {
    pub interval: Interval,
    pub points: Vec<f64>,
    /// Mismatch radius used for the LMIs at each point.
    pub alpha: Vec<f64>,
    /// Blend start of segment `k` (lower overlap end).
    pub blend_lo: Vec<f64>,
    /// Blend end of segment `k` (upper overlap end).
    pub blend_hi: Vec<f64>,
    /// `delta_i`, `Q_i`; the `alpha` field is superseded per point.
    pub params: DesignParams,
}

fn radius(net: &NetworkModel, center: f64, lo: f64, hi: f64) -> Result<f64, ModelError> {
    Ok(mismatch_radius(&net.plant, center, Interval::new(lo, hi), 1000)?.alpha)
}

/// Smallest per-point radii covering the adjacent segments.
fn covering_radii(net: &NetworkModel, points: &[f64]) -> Result<Vec<f64>, ModelError> {
    let m = points.len();
    (0..m)
        .map(|k| {
            let lo = if k > 0 { points[k - 1] } else { points[k] };
            let hi = if k + 1 < m { points[k + 1] } else { points[k] };
            radius(net, points[k], lo, hi)
        })
        .collect()
}

fn uniform(iv: Interval, m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.5 * (iv.lo + iv.hi)];
    }
    let mut pts: Vec<f64> = (0..m)
        .map(|k| iv.lo + iv.width() * k as f64 / (m - 1) as f64)
        .collect();
    pts[m - 1] = iv.hi;
    pts
}

/// Furthest `rho` in `(start, hi]` such that the segment `[start, rho]`
/// lies within `alpha` of both ends.
fn greedy_step(net: &NetworkModel, start: f64, hi: f64, alpha: f64) -> Result<f64, ModelError> {
    let ok = |rho: f64| -> Result<bool, ModelError> {
        Ok(radius(net, start, start, rho)? <= alpha && radius(net, rho, start, rho)? <= alpha)
    };
    if ok(hi)? {
        return Ok(hi);
    }
    let (mut good, mut bad) = (start, hi);
    for _ in 0..100 {
        let mid = 0.5 * (good + bad);
        if ok(mid)? {
            good = mid;
        } else {
            bad = mid;
        }
        if bad - good <= 1e-12 * (1.0 + bad.abs()) {
            break;
        }
    }
    Ok(good)
}

impl GridDesign {
    /// Builds and validates a design from explicit points and radii.
    pub fn new(
        interval: Interval,
        points: Vec<f64>,
        alpha: Vec<f64>,
        overlap: OverlapPolicy,
        params: DesignParams,
    ) -> Result<Self, ScheduleError> {
        if points.is_empty() || points.len() != alpha.len() {
            return Err(ScheduleError::InvalidGrid(
                "need one radius per grid point".into(),
            ));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ScheduleError::InvalidGrid(
                "grid points must be strictly increasing".into(),
            ));
        }
        if alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(ScheduleError::InvalidGrid(
                "radii must be nonnegative".into(),
            ));
        }
        let fraction = match overlap {
            OverlapPolicy::Collapsed => 0.0,
            OverlapPolicy::Plateau { fraction } if (0.0..0.5).contains(&fraction) => fraction,
            OverlapPolicy::Plateau { fraction } => {
                return Err(ScheduleError::InvalidGrid(format!(
                    "plateau fraction {fraction} outside [0, 0.5)"
                )))
            }
        };
        let (blend_lo, blend_hi) = points
            .windows(2)
            .map(|w| {
                let pad = fraction * (w[1] - w[0]);
                (w[0] + pad, w[1] - pad)
            })
            .unzip();
        Ok(Self {
            interval,
            points,
            alpha,
            blend_lo,
            blend_hi,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Interior blend endpoints, where the interpolant has kinks.
    pub fn corners(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self
            .blend_lo
            .iter()
            .chain(&self.blend_hi)
            .copied()
            .filter(|r| *r > self.interval.lo && *r < self.interval.hi)
            .collect();
        c.sort_by(f64::total_cmp);
        c.dedup();
        c
    }

    /// Checks that the grid spans the interval and that every point's radius
    /// covers the segments it takes part in. Returns one line per problem.
    pub fn covering_problems(&self, net: &NetworkModel) -> Result<Vec<String>, ModelError> {
        let mut out = Vec::new();
        let m = self.len();
        let iv = self.interval;
        if m == 1 {
            let need = radius(net, self.points[0], iv.lo, iv.hi)?;
            if need > self.alpha[0] * (1.0 + 1e-12) {
                out.push(format!(
                    "single point {} needs radius {need}, has {}",
                    self.points[0], self.alpha[0]
                ));
            }
            return Ok(out);
        }
        if self.points[0] > iv.lo || self.points[m - 1] < iv.hi {
            out.push(format!(
                "grid [{}, {}] does not span [{}, {}]",
                self.points[0],
                self.points[m - 1],
                iv.lo,
                iv.hi
            ));
        }
        let need = covering_radii(net, &self.points)?;
        for k in 0..m {
            if need[k] > self.alpha[k] * (1.0 + 1e-12) {
                out.push(format!(
                    "point {} (rho = {}) needs radius {}, has {}",
                    k + 1,
                    self.points[k],
                    need[k],
                    self.alpha[k]
                ));
            }
        }
        Ok(out)
    }

    pub fn ensure_covering(&self, net: &NetworkModel) -> Result<(), ScheduleError> {
        let problems = self.covering_problems(net)?;
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScheduleError::CoveringFailure(problems.join("; ")))
        }
    }
}

/// Places grid points over `net.gamma_interval` according to `policy`.
pub fn build_grid(
    net: &NetworkModel,
    policy: GridPolicy,
    overlap: OverlapPolicy,
    params: DesignParams,
) -> Result<GridDesign, ScheduleError> {
    let iv = net.gamma_interval;
    let points = match policy {
        GridPolicy::Count { points, .. } if points == 0 => {
            return Err(ScheduleError::InvalidGrid(
                "grid needs at least one point".into(),
            ))
        }
        GridPolicy::Count { points, .. } if iv.width() == 0.0 => vec![iv.lo; points.min(1)],
        GridPolicy::Count { points, .. } => uniform(iv, points),
        GridPolicy::TargetAlpha { alpha } => {
            if !(alpha >= 0.0) {
                return Err(ScheduleError::InvalidGrid(format!(
                    "target radius {alpha} is negative"
                )));
            }
            if radius(net, 0.5 * (iv.lo + iv.hi), iv.lo, iv.hi)? <= alpha {
                vec![0.5 * (iv.lo + iv.hi)]
            } else {
                match &net.plant.a {
                    ParamDependence::Affine { delta, .. } => {
                        let sigma = linalg::spectral_norm(delta);
                        // strict spacing < alpha / sigma
                        let m = (iv.width() * sigma / alpha).floor() as usize + 2;
                        if m > MAX_GRID_POINTS {
                            return Err(ScheduleError::CoveringFailure(format!(
                                "{m} points needed for radius {alpha}"
                            )));
                        }
                        uniform(iv, m)
                    }
                    ParamDependence::Tabulated { .. } => {
                        let mut pts = vec![iv.lo];
                        while *pts.last().unwrap() < iv.hi {
                            let start = *pts.last().unwrap();
                            let next = greedy_step(net, start, iv.hi, alpha)?;
                            if next <= start || pts.len() >= MAX_GRID_POINTS {
                                return Err(ScheduleError::CoveringFailure(format!(
                                    "greedy placement stalled at rho = {start} after {} points",
                                    pts.len()
                                )));
                            }
                            pts.push(next);
                        }
                        pts
                    }
                }
            }
        }
    };
    let alpha = match policy {
        GridPolicy::Count { alpha: Some(a), .. } | GridPolicy::TargetAlpha { alpha: a } => {
            vec![a; points.len()]
        }
        GridPolicy::Count { alpha: None, .. } => {
            if points.len() == 1 {
                vec![radius(net, points[0], iv.lo, iv.hi)?]
            } else {
                covering_radii(net, &points)?
            }
        }
    };
    let grid = GridDesign::new(iv, points, alpha, overlap, params)?;
    grid.ensure_covering(net)?;
    Ok(grid)
}

/// How `gamma^2` is chosen at each grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthesisMode {
    Fixed { gamma_sq: f64 },
    Minimize { search: GammaSearch },
}

#[derive(Default)]
struct GainCache {
    map: RwLock<HashMap<i64, Arc<Vec<AgentGains>>>>,
}

impl std::fmt::Debug for GainCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("GainCache")
    }
}

impl Clone for GainCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

/// Certificates at every grid point plus the interpolation rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainSchedule {
    pub network: NetworkModel,
    pub grid: GridDesign,
    pub certificates: Vec<FeasibleCertificate>,
    /// Per-point `gamma_k^2` before re-certification.
    pub point_gamma_sq: Vec<f64>,
    /// Common `gamma^2 = max_k gamma_k^2`.
    pub gamma_sq: f64,
    #[serde(skip)]
    cache: GainCache,
}

impl PartialEq for GainSchedule {
    fn eq(&self, other: &Self) -> bool {
        self.network == other.network
            && self.grid == other.grid
            && self.certificates == other.certificates
            && self.point_gamma_sq == other.point_gamma_sq
            && self.gamma_sq == other.gamma_sq
    }
}

/// Where `rho` sits in the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blend {
    pub segment: usize,
    /// Weight of the left certificate.
    pub lambda: f64,
}

fn point_margin(
    net: &NetworkModel,
    rho: f64,
    params: &DesignParams,
    search: Option<&GammaSearch>,
) -> Result<f64, LmiError> {
    match search.and_then(|s| s.margin) {
        Some(m) => Ok(m),
        None => Ok(assemble_lmi(net, rho, GammaSq::Fixed(1.0), params)?.default_margin()),
    }
}

/// Solves (or minimizes) at every grid point in parallel and brings all
/// certificates to the common `gamma^2 = max_k gamma_k^2`.
///
/// A certificate is kept when it still satisfies the LMIs at the common
/// value; otherwise that point is re-solved at the common value.
pub fn synthesize_schedule(
    net: &NetworkModel,
    grid: &GridDesign,
    mode: SynthesisMode,
    solver: &dyn LmiSolver,
) -> Result<GainSchedule, ScheduleError> {
    net.ensure_valid()?;
    if !net.graph.is_weakly_connected() {
        return Err(ScheduleError::Model(ModelError::Invalid(net.validate())));
    }
    grid.ensure_covering(net)?;
    let solved: Vec<(f64, FeasibleCertificate)> = grid
        .points
        .par_iter()
        .zip(&grid.alpha)
        .enumerate()
        .map(|(k, (&rho, &alpha))| {
            let params = grid.params.with_alpha(alpha);
            let fail = |source| ScheduleError::PointFailed {
                index: k + 1,
                rho,
                source,
            };
            let out = match mode {
                SynthesisMode::Minimize { search } => {
                    minimize_gamma_sq(net, rho, &params, &search, solver)
                }
                SynthesisMode::Fixed { gamma_sq } => {
                    let margin = point_margin(net, rho, &params, None).map_err(fail)?;
                    let lmi =
                        assemble_lmi(net, rho, GammaSq::Fixed(gamma_sq), &params).map_err(fail)?;
                    solve_feasibility(&lmi, margin, solver).map(|c| (gamma_sq, c))
                }
            };
            let out = out.map_err(fail)?;
            info!(
                "grid point {} rho = {rho:.6}: gamma^2 = {:.6}",
                k + 1,
                out.0
            );
            Ok(out)
        })
        .collect::<Result<_, ScheduleError>>()?;
    let point_gamma_sq: Vec<f64> = solved.iter().map(|s| s.0).collect();
    let gamma_sq = point_gamma_sq
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);

    let certificates = solved
        .into_par_iter()
        .enumerate()
        .map(|(k, (g, mut cert))| {
            let rho = grid.points[k];
            let params = grid.params.with_alpha(grid.alpha[k]);
            let fail = |source| ScheduleError::PointFailed {
                index: k + 1,
                rho,
                source,
            };
            if g == gamma_sq {
                return Ok(cert);
            }
            let eig = cert.reevaluate(net, &params, gamma_sq).map_err(fail)?;
            if eig < 0.0 {
                cert.gamma_sq = gamma_sq;
                cert.margin = -eig;
                return Ok(cert);
            }
            info!(
                "grid point {}: certificate lost feasibility at common gamma^2, re-solving",
                k + 1
            );
            let search = match mode {
                SynthesisMode::Minimize { search } => Some(search),
                SynthesisMode::Fixed { .. } => None,
            };
            let margin = point_margin(net, rho, &params, search.as_ref()).map_err(fail)?;
            let lmi = assemble_lmi(net, rho, GammaSq::Fixed(gamma_sq), &params).map_err(fail)?;
            solve_feasibility(&lmi, margin, solver).map_err(fail)
        })
        .collect::<Result<Vec<_>, ScheduleError>>()?;

    Ok(GainSchedule {
        network: net.clone(),
        grid: grid.clone(),
        certificates,
        point_gamma_sq,
        gamma_sq,
        cache: GainCache::default(),
    })
}

/// Rate-condition verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub bound: f64,
    pub rho_dot_max: f64,
    pub eta: f64,
    pub weak_ok: bool,
    pub strong_ok: bool,
    /// `1 - eta` when the strong condition holds, else 1.
    pub effective_q_scale: f64,
}

/// Worst reduced-LMI eigenvalue over the probes of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentCheck {
    pub segment: usize,
    pub probes: usize,
    pub failures: usize,
    pub worst_max_eig: f64,
    pub worst_rho: f64,
}

/// Result of a finite-difference sweep over the gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuitySweep {
    pub samples: usize,
    /// Largest ratio of observed jump to the analytic Lipschitz allowance.
    pub worst_ratio: f64,
    pub worst_rho: f64,
    pub largest_jump: f64,
}

impl GainSchedule {
    /// Reassembles a schedule (for instance from an archive) and checks the
    /// shapes agree.
    pub fn from_parts(
        network: NetworkModel,
        grid: GridDesign,
        certificates: Vec<FeasibleCertificate>,
        point_gamma_sq: Vec<f64>,
        gamma_sq: f64,
    ) -> Result<Self, ScheduleError> {
        let s = Self {
            network,
            grid,
            certificates,
            point_gamma_sq,
            gamma_sq,
            cache: GainCache::default(),
        };
        s.check_shapes()?;
        Ok(s)
    }

    pub fn check_shapes(&self) -> Result<(), ScheduleError> {
        let m = self.grid.len();
        let (agents, n) = (self.network.agent_count(), self.network.state_dim());
        if self.certificates.len() != m || self.point_gamma_sq.len() != m {
            return Err(ScheduleError::InvalidGrid(
                "one certificate per grid point required".into(),
            ));
        }
        for c in &self.certificates {
            if c.x.len() != agents
                || c.tau.len() != agents
                || c.x.iter().any(|x| x.shape() != (n, n))
            {
                return Err(ScheduleError::InvalidGrid(
                    "certificate shape does not match the network".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn agent_count(&self) -> usize {
        self.network.agent_count()
    }

    /// Segment and left weight for `rho`.
    pub fn blend(&self, rho: f64) -> Result<Blend, ScheduleError> {
        self.network.gamma_interval.check(rho)?;
        let pts = &self.grid.points;
        if pts.len() == 1 {
            return Ok(Blend {
                segment: 0,
                lambda: 1.0,
            });
        }
        let k = pts.partition_point(|p| *p <= rho).clamp(1, pts.len() - 1) - 1;
        let (a, b) = (self.grid.blend_lo[k], self.grid.blend_hi[k]);
        let lambda = if rho <= a {
            1.0
        } else if rho >= b {
            0.0
        } else {
            (b - rho) / (b - a)
        };
        Ok(Blend { segment: k, lambda })
    }

    fn mix<T>(
        &self,
        rho: f64,
        pick: impl Fn(&FeasibleCertificate) -> T,
        combine: impl Fn(f64, T, T) -> T,
    ) -> Result<T, ScheduleError>
    where
        T: Clone,
    {
        let Blend { segment, lambda } = self.blend(rho)?;
        let left = pick(&self.certificates[segment]);
        if self.grid.len() == 1 || lambda == 1.0 {
            return Ok(left);
        }
        let right = pick(&self.certificates[segment + 1]);
        if lambda == 0.0 {
            return Ok(right);
        }
        Ok(combine(lambda, left, right))
    }

    /// Interpolated certificate `X_i(rho)`.
    pub fn x_at(&self, agent: usize, rho: f64) -> Result<Mat, ScheduleError> {
        self.mix(rho, |c| c.x[agent].clone(), |l, a, b| a * l + b * (1.0 - l))
    }

    /// Interpolated `tau_i(rho)`; `None` when the nonlinearity channel is absent.
    pub fn tau_at(&self, agent: usize, rho: f64) -> Result<Option<f64>, ScheduleError> {
        self.mix(
            rho,
            |c| c.tau[agent],
            |l, a, b| a.zip(b).map(|(a, b)| l * a + (1.0 - l) * b),
        )
    }

    /// Gains of every agent at `rho`, evaluated at `rho` rounded to 1e-9.
    pub fn gains_at(&self, rho: f64) -> Result<Arc<Vec<AgentGains>>, ScheduleError> {
        let key = (rho / RHO_QUANTUM).round() as i64;
        if let Some(g) = self.cache.map.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(g));
        }
        let q = key as f64 * RHO_QUANTUM;
        let q = q.clamp(
            self.network.gamma_interval.lo,
            self.network.gamma_interval.hi,
        );
        let gains = Arc::new(self.gains_uncached(q)?);
        let mut map = self.cache.map.write().expect("cache lock");
        if map.len() >= CACHE_LIMIT {
            map.clear();
        }
        map.insert(key, Arc::clone(&gains));
        Ok(gains)
    }

    /// Gains at exactly `rho`, bypassing the cache.
    pub fn gains_uncached(&self, rho: f64) -> Result<Vec<AgentGains>, ScheduleError> {
        (0..self.agent_count())
            .map(|i| {
                let x = self.x_at(i, rho)?;
                Ok(gains_from_x(
                    i,
                    &self.network.agents[i],
                    self.network.graph.neighbors(i),
                    &x,
                    self.gamma_sq,
                )?)
            })
            .collect()
    }

    /// Gains at grid point `k` straight from its certificate.
    pub fn grid_gains(&self, k: usize) -> Result<Vec<AgentGains>, ScheduleError> {
        Ok(compute_gains(
            &self.certificates[k],
            &self.network,
            self.gamma_sq,
        )?)
    }

    /// Largest `|rho'|` the interpolated schedule tolerates:
    /// `min_i lambda_min(Q_i) / max_k ||X_{i,k+1} - X_{i,k}|| / (b_k - a_k)`.
    pub fn rate_bound(&self, q: &[Mat]) -> f64 {
        (0..self.agent_count())
            .map(|i| {
                let slope = (0..self.grid.len().saturating_sub(1))
                    .map(|k| {
                        let width = self.grid.blend_hi[k] - self.grid.blend_lo[k];
                        let diff = linalg::spectral_norm(
                            &(&self.certificates[k + 1].x[i] - &self.certificates[k].x[i]),
                        );
                        if diff == 0.0 {
                            0.0
                        } else {
                            diff / width
                        }
                    })
                    .fold(0.0, f64::max);
                if slope == 0.0 {
                    f64::INFINITY
                } else {
                    linalg::min_eigenvalue(&q[i]) / slope
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn check_rate_condition(&self, q: &[Mat], rho_dot_max: f64, eta: f64) -> RateCheck {
        let bound = self.rate_bound(q);
        let weak_ok = rho_dot_max <= bound;
        let strong_ok = rho_dot_max <= eta * bound;
        RateCheck {
            bound,
            rho_dot_max,
            eta,
            weak_ok,
            strong_ok,
            effective_q_scale: if strong_ok { 1.0 - eta } else { 1.0 },
        }
    }

    /// Storage weights `P = diag(X_i(rho0) / N)`. A `rho0` on a corner is
    /// nudged to the right (or left at the upper end) with a warning.
    pub fn p_blocks(&self, rho0: f64) -> Result<Vec<Mat>, ScheduleError> {
        let iv = self.network.gamma_interval;
        let mut rho = rho0;
        let tol = 1e-12 * (1.0 + rho0.abs());
        if self.grid.corners().iter().any(|c| (c - rho0).abs() <= tol) {
            let nudge = 1e-9 * (1.0 + rho0.abs());
            rho = if rho0 + nudge <= iv.hi {
                rho0 + nudge
            } else {
                rho0 - nudge
            };
            warn!("initial rho {rho0} is a schedule corner; P evaluated at {rho}");
        }
        let n = self.agent_count() as f64;
        (0..self.agent_count())
            .map(|i| Ok(self.x_at(i, rho)? / n))
            .collect()
    }

    /// Reduced-LMI check of the interpolated `(X_i, tau_i)` at `probes`
    /// evenly spaced points per segment (a single check at the point for a
    /// one-point grid).
    pub fn verify_interpolation(&self, probes: usize) -> Result<Vec<SegmentCheck>, ScheduleError> {
        let segments = self.grid.len().saturating_sub(1).max(1);
        (0..segments)
            .into_par_iter()
            .map(|k| {
                let rhos: Vec<f64> = if self.grid.len() == 1 {
                    vec![self.grid.points[0]]
                } else {
                    let (a, b) = (self.grid.points[k], self.grid.points[k + 1]);
                    let p = probes.max(2);
                    (0..p)
                        .map(|s| a + (b - a) * s as f64 / (p - 1) as f64)
                        .collect()
                };
                let mut check = SegmentCheck {
                    segment: k,
                    probes: rhos.len(),
                    failures: 0,
                    worst_max_eig: f64::NEG_INFINITY,
                    worst_rho: rhos[0],
                };
                for rho in rhos {
                    let rho = rho.clamp(
                        self.network.gamma_interval.lo,
                        self.network.gamma_interval.hi,
                    );
                    let x: Vec<Mat> = (0..self.agent_count())
                        .map(|i| self.x_at(i, rho))
                        .collect::<Result<_, _>>()?;
                    let tau: Vec<Option<f64>> = (0..self.agent_count())
                        .map(|i| self.tau_at(i, rho))
                        .collect::<Result<_, _>>()?;
                    let r = check_reduced_lmi(
                        &x,
                        &tau,
                        &self.network,
                        rho,
                        self.gamma_sq,
                        &self.grid.params,
                    )?;
                    if !r.satisfied {
                        check.failures += 1;
                    }
                    if r.max_eig > check.worst_max_eig {
                        check.worst_max_eig = r.max_eig;
                        check.worst_rho = rho;
                    }
                }
                Ok(check)
            })
            .collect()
    }

    /// Lipschitz allowance of the gains on segment `k`:
    /// `gamma^2 ||dX/drho|| / lambda_min^2 * ||M||` with `M` the output
    /// weight (`C' E^-1` or `H' F^-1`), maximized over agents and channels.
    fn segment_gain_lipschitz(&self, k: usize) -> Result<f64, ScheduleError> {
        if self.grid.len() == 1 {
            return Ok(0.0);
        }
        let width = self.grid.blend_hi[k] - self.grid.blend_lo[k];
        let mut worst: f64 = 0.0;
        for (i, agent) in self.network.agents.iter().enumerate() {
            let (x0, x1) = (&self.certificates[k].x[i], &self.certificates[k + 1].x[i]);
            let slope = linalg::spectral_norm(&(x1 - x0)) / width;
            if slope == 0.0 {
                continue;
            }
            let lam = linalg::min_eigenvalue(x0).min(linalg::min_eigenvalue(x1));
            let e_inv = linalg::spd_inverse(&agent.e2(), 1e14)
                .ok_or(LmiError::SingularX { agent: i + 1 })?;
            let mut weight = linalg::spectral_norm(&(agent.c2.transpose() * e_inv));
            for link in &agent.links {
                let f_inv = linalg::spd_inverse(&link.f(), 1e14)
                    .ok_or(LmiError::SingularX { agent: i + 1 })?;
                weight = weight.max(linalg::spectral_norm(&(link.h.transpose() * f_inv)));
            }
            worst = worst.max(self.gamma_sq * slope / (lam * lam) * weight);
        }
        Ok(worst)
    }

    /// Evaluates all gains on `samples` evenly spaced points plus every
    /// corner (and points 1e-9 on either side of it) and compares each
    /// consecutive jump with the analytic Lipschitz allowance of the
    /// segments it spans.
    pub fn continuity_sweep(&self, samples: usize) -> Result<ContinuitySweep, ScheduleError> {
        let iv = self.network.gamma_interval;
        let mut rhos: Vec<f64> = (0..samples.max(2))
            .map(|s| iv.lo + iv.width() * s as f64 / (samples.max(2) - 1) as f64)
            .collect();
        for c in self
            .grid
            .corners()
            .into_iter()
            .chain(self.grid.points.iter().copied())
        {
            for r in [c - 1e-9, c, c + 1e-9] {
                if iv.contains(r) {
                    rhos.push(r.clamp(iv.lo, iv.hi));
                }
            }
        }
        rhos.sort_by(f64::total_cmp);
        rhos.dedup();
        let lips: Vec<f64> = (0..self.grid.len().saturating_sub(1).max(1))
            .map(|k| self.segment_gain_lipschitz(k))
            .collect::<Result<_, _>>()?;
        let gains: Vec<Vec<AgentGains>> = rhos
            .par_iter()
            .map(|r| self.gains_uncached(*r))
            .collect::<Result<_, _>>()?;
        let mut sweep = ContinuitySweep {
            samples: rhos.len(),
            worst_ratio: 0.0,
            worst_rho: rhos[0],
            largest_jump: 0.0,
        };
        for w in 0..rhos.len() - 1 {
            let (r0, r1) = (rhos[w], rhos[w + 1]);
            let s0 = self.blend(r0)?.segment;
            let s1 = self.blend(r1)?.segment;
            let lip = lips[s0.min(s1)..=s0.max(s1)]
                .iter()
                .copied()
                .fold(0.0, f64::max);
            let allowance = lip * (r1 - r0) * (1.0 + 1e-6) + 1e-12;
            let mut jump: f64 = 0.0;
            for (g0, g1) in gains[w].iter().zip(&gains[w + 1]) {
                jump = jump.max(linalg::spectral_norm(&(&g1.l - &g0.l)));
                for ((_, k0), (_, k1)) in g0.k.iter().zip(&g1.k) {
                    jump = jump.max(linalg::spectral_norm(&(k1 - k0)));
                }
            }
            sweep.largest_jump = sweep.largest_jump.max(jump);
            let ratio = jump / allowance;
            if ratio > sweep.worst_ratio {
                sweep.worst_ratio = ratio;
                sweep.worst_rho = r0;
            }
        }
        Ok(sweep)
    }
}
