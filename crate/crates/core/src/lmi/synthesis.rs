use serde::{Deserialize, Serialize};

use super::{
    assemble_lmi, assemble_reduced_lmi, AffineLmi, Assignment, DesignParams, GammaSq, LmiError,
    LmiSolver, SolveOptions, SolveOutcome,
};
use crate::linalg::{self, rows_serde, Mat};
use crate::model::{AgentModel, NetworkModel};

/// Condition-number ceiling for certificate matrices.
pub const MAX_CONDITION: f64 = 1e12;

/// Strictly feasible solution of the coupled LMIs at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleCertificate {
    pub rho: f64,
    pub gamma_sq: f64,
    pub alpha: f64,
    #[serde(with = "rows_serde::vec")]
    pub x: Vec<Mat>,
    /// `None` when the nonlinearity channel was dropped (`R = 0`).
    pub tau: Vec<Option<f64>>,
    /// `None` when the mismatch row was dropped (`alpha = 0`).
    pub theta: Vec<Option<f64>>,
    /// Negative of the largest eigenvalue over all agent blocks.
    pub margin: f64,
}

impl FeasibleCertificate {
    fn from_vars(lmi: &AffineLmi, vars: &[f64]) -> Result<Self, LmiError> {
        let a = lmi.layout.unpack(vars);
        let gamma_sq = match lmi.gamma_sq {
            GammaSq::Fixed(g) => g,
            GammaSq::Variable => a.gamma_sq.expect("gamma slot"),
        };
        for (i, x) in a.x.iter().enumerate() {
            if !linalg::is_positive_definite(x) {
                return Err(LmiError::SingularX { agent: i + 1 });
            }
        }
        let margin = -lmi.max_eig(vars);
        if !(margin > 0.0) {
            return Err(LmiError::NumericalBreakdown(format!(
                "certificate margin {margin} is not positive"
            )));
        }
        Ok(Self {
            rho: lmi.rho,
            gamma_sq,
            alpha: lmi.alpha,
            tau: lmi
                .layout
                .agents
                .iter()
                .zip(&a.tau)
                .map(|(s, t)| s.tau.map(|_| *t))
                .collect(),
            theta: lmi
                .layout
                .agents
                .iter()
                .zip(&a.theta)
                .map(|(s, t)| s.theta.map(|_| *t))
                .collect(),
            x: a.x,
            margin,
        })
    }

    pub fn assignment(&self) -> Assignment {
        Assignment {
            x: self.x.clone(),
            tau: self.tau.iter().map(|t| t.unwrap_or(0.0)).collect(),
            theta: self.theta.iter().map(|t| t.unwrap_or(0.0)).collect(),
            gamma_sq: Some(self.gamma_sq),
        }
    }

    /// Largest eigenvalue of the full LMI at this certificate's `rho`, with
    /// the stored variables and `gamma^2` replaced by `gamma_sq`.
    pub fn reevaluate(
        &self,
        net: &NetworkModel,
        params: &DesignParams,
        gamma_sq: f64,
    ) -> Result<f64, LmiError> {
        let lmi = assemble_lmi(
            net,
            self.rho,
            GammaSq::Fixed(gamma_sq),
            &params.with_alpha(self.alpha),
        )?;
        let mut a = self.assignment();
        a.gamma_sq = None;
        Ok(lmi.max_eig(&lmi.layout.pack(&a)))
    }
}

/// Solves `lmi` and wraps the result as a certificate.
pub fn solve_feasibility(
    lmi: &AffineLmi,
    margin: f64,
    solver: &dyn LmiSolver,
) -> Result<FeasibleCertificate, LmiError> {
    if !(margin > 0.0) {
        return Err(LmiError::InvalidParameter(format!(
            "margin must be positive, got {margin}"
        )));
    }
    match solver.solve(lmi, &SolveOptions::with_margin(margin))? {
        SolveOutcome::Feasible { vars, .. } => FeasibleCertificate::from_vars(lmi, &vars),
        SolveOutcome::Infeasible {
            best_max_eig,
            lower_bound,
            ..
        } => Err(LmiError::Infeasible {
            rho: lmi.rho,
            best_max_eig,
            lower_bound,
        }),
    }
}

/// Bisection settings for `gamma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSearch {
    /// Relative width of the final bracket.
    pub tol: f64,
    pub floor: f64,
    pub ceiling: f64,
    /// Strictness margin; defaults to the LMI's own scale at `gamma^2 = 1`.
    pub margin: Option<f64>,
}

impl Default for GammaSearch {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            floor: 1e-9,
            ceiling: 1e9,
            margin: None,
        }
    }
}

/// Smallest feasible `gamma^2` at `rho`, within relative tolerance.
///
/// The bracket starts at 1 and is halved while feasible. When 1 is
/// infeasible, a solve with `gamma^2` as a free variable supplies a feasible
/// upper end. Feasible values form an interval (the LMIs are jointly affine),
/// so bisection below a feasible point is sound.
/// The margin is fixed once per call so every probe answers the same
/// question.
pub fn minimize_gamma_sq(
    net: &NetworkModel,
    rho: f64,
    params: &DesignParams,
    search: &GammaSearch,
    solver: &dyn LmiSolver,
) -> Result<(f64, FeasibleCertificate), LmiError> {
    let margin = match search.margin {
        Some(m) => m,
        None => assemble_lmi(net, rho, GammaSq::Fixed(1.0), params)?.default_margin(),
    };
    let probe = |g: f64| -> Result<Option<FeasibleCertificate>, LmiError> {
        let lmi = assemble_lmi(net, rho, GammaSq::Fixed(g), params)?;
        match solve_feasibility(&lmi, margin, solver) {
            Ok(cert) => Ok(Some(cert)),
            Err(LmiError::Infeasible { .. }) | Err(LmiError::MaxIterations { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let (mut lo, mut hi, mut cert);
    match probe(1.0)? {
        Some(c) => {
            hi = 1.0;
            cert = c;
            lo = 0.5;
            loop {
                if lo < search.floor {
                    return Ok((hi, cert));
                }
                match probe(lo)? {
                    Some(c) => {
                        hi = lo;
                        cert = c;
                        lo *= 0.5;
                    }
                    None => break,
                }
            }
        }
        None => {
            // The feasible gamma^2 form an interval that need not be
            // unbounded above, so doubling can overshoot it. A joint solve
            // with gamma^2 free lands inside it instead.
            let lmi = assemble_lmi(net, rho, GammaSq::Variable, params)?;
            cert = match solve_feasibility(&lmi, margin, solver) {
                Ok(c) => c,
                Err(LmiError::Infeasible { .. }) | Err(LmiError::MaxIterations { .. }) => {
                    return Err(LmiError::NoUpperBound(search.ceiling))
                }
                Err(e) => return Err(e),
            };
            if cert.gamma_sq > search.ceiling {
                return Err(LmiError::NoUpperBound(search.ceiling));
            }
            hi = cert.gamma_sq;
            lo = if hi > 1.0 { 1.0 } else { 0.0 };
            // re-certify at the fixed value so later probes compare like with like
            if let Some(c) = probe(hi)? {
                cert = c;
            }
        }
    }
    while (hi - lo) > search.tol * hi {
        let mid = 0.5 * (lo + hi);
        match probe(mid)? {
            Some(c) => {
                hi = mid;
                cert = c;
            }
            None => lo = mid,
        }
    }
    Ok((hi, cert))
}

/// Protocol gains of one agent: `L_i` and one `K_ij` per in-neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGains {
    pub l: Mat,
    /// `(j, K_ij)` in in-neighbourhood order.
    pub k: Vec<(usize, Mat)>,
}

/// `K_ij = g X^-1 H_ij' F_ij^-1`, `L_i = (g X^-1 C_2i' - B_2i D_2i') E_2i^-1`.
pub fn gains_from_x(
    agent_index: usize,
    agent: &AgentModel,
    neighbors: &[usize],
    x: &Mat,
    gamma_sq: f64,
) -> Result<AgentGains, LmiError> {
    let x_inv = linalg::spd_inverse(x, MAX_CONDITION).ok_or(LmiError::SingularX {
        agent: agent_index + 1,
    })?;
    let e2_inv = linalg::spd_inverse(&agent.e2(), 1e14).ok_or_else(|| {
        LmiError::NumericalBreakdown(format!("E2 of agent {} not invertible", agent_index + 1))
    })?;
    let l = (&x_inv * agent.c2.transpose() * gamma_sq - &agent.b2 * agent.d2.transpose()) * e2_inv;
    let mut k = Vec::with_capacity(neighbors.len());
    for &j in neighbors {
        let link = agent.link(j).ok_or_else(|| {
            LmiError::DimensionMismatch(format!(
                "agent {} lacks a link from {}",
                agent_index + 1,
                j + 1
            ))
        })?;
        let f_inv = linalg::spd_inverse(&link.f(), 1e14).ok_or_else(|| {
            LmiError::NumericalBreakdown(format!(
                "F of link {}->{} not invertible",
                j + 1,
                agent_index + 1
            ))
        })?;
        k.push((j, &x_inv * link.h.transpose() * f_inv * gamma_sq));
    }
    Ok(AgentGains { l, k })
}

pub fn compute_gains(
    cert: &FeasibleCertificate,
    net: &NetworkModel,
    gamma_sq: f64,
) -> Result<Vec<AgentGains>, LmiError> {
    net.agents
        .iter()
        .enumerate()
        .map(|(i, ag)| gains_from_x(i, ag, net.graph.neighbors(i), &cert.x[i], gamma_sq))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedCheck {
    pub satisfied: bool,
    pub max_eig: f64,
    /// 1-based agent with the largest eigenvalue.
    pub worst_agent: usize,
}

/// Evaluates the reduced coupled LMIs (no mismatch row) at `rho` for the
/// given `X_i`, `tau_i`.
pub fn check_reduced_lmi(
    x: &[Mat],
    tau: &[Option<f64>],
    net: &NetworkModel,
    rho: f64,
    gamma_sq: f64,
    params: &DesignParams,
) -> Result<ReducedCheck, LmiError> {
    let lmi = assemble_reduced_lmi(net, rho, GammaSq::Fixed(gamma_sq), params)?;
    if x.len() != lmi.layout.agents.len() || tau.len() != x.len() {
        return Err(LmiError::DimensionMismatch(
            "one X_i and tau_i per agent required".into(),
        ));
    }
    let a = Assignment {
        x: x.to_vec(),
        tau: tau.iter().map(|t| t.unwrap_or(0.0)).collect(),
        theta: vec![0.0; x.len()],
        gamma_sq: None,
    };
    if lmi
        .layout
        .agents
        .iter()
        .zip(tau)
        .any(|(s, t)| s.tau.is_some() && t.is_none())
    {
        return Err(LmiError::DimensionMismatch(
            "tau_i required when R is nonzero".into(),
        ));
    }
    let vars = lmi.layout.pack(&a);
    let (worst_agent, max_eig) = lmi
        .blocks
        .iter()
        .map(|b| linalg::max_eigenvalue(&b.eval(&vars)))
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, v)| (i + 1, v))
        .unwrap_or((0, f64::NEG_INFINITY));
    Ok(ReducedCheck {
        satisfied: max_eig < 0.0,
        max_eig,
        worst_agent,
    })
}
