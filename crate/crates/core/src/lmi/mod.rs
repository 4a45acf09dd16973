//! Coupled synchronization LMIs: assembly, feasibility, gamma^2
//! minimization and gain extraction.
//!
//! Every agent contributes one symmetric block that is affine in the stacked
//! decision vector (all `X_i`, `tau_i`, `theta_i`, optionally `gamma^2`).
//! Coupling between neighbours enters through `Z_i`, which carries the
//! neighbours' `X_j`; the solvers simply see one block-diagonal affine LMI.

mod assembly;
mod solver;
mod synthesis;

pub use assembly::{
    assemble_lmi, assemble_reduced_lmi, AffineBlock, AffineLmi, BlockLayout, LmiVariant,
};
pub use solver::{BarrierSolver, LmiSolver, SolveOptions, SolveOutcome, SubgradientSolver};
pub use synthesis::{
    check_reduced_lmi, compute_gains, gains_from_x, minimize_gamma_sq, solve_feasibility,
    AgentGains, FeasibleCertificate, GammaSearch, ReducedCheck,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{rows_serde, Mat};
use crate::model::ModelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid synthesis parameter: {0}")]
    InvalidParameter(String),
    #[error("LMIs infeasible at rho = {rho}: best max eigenvalue {best_max_eig:.6e} (lower bound {lower_bound:.6e})")]
    Infeasible {
        rho: f64,
        best_max_eig: f64,
        lower_bound: f64,
    },
    #[error(
        "solver hit its iteration cap ({iterations}) with best max eigenvalue {best_max_eig:.6e}"
    )]
    MaxIterations {
        iterations: usize,
        best_max_eig: f64,
    },
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    #[error("no feasible gamma^2 found up to {0:e}")]
    NoUpperBound(f64),
    #[error("certificate X of agent {agent} is singular or ill-conditioned")]
    SingularX { agent: usize },
}

/// Whether `gamma^2` is fixed data or a decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GammaSq {
    Fixed(f64),
    Variable,
}

/// Per-agent design data: decay rates `delta_i`, weights `Q_i`, and the
/// parameter-mismatch radius `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub delta: Vec<f64>,
    #[serde(with = "rows_serde::vec")]
    pub q: Vec<Mat>,
    pub alpha: f64,
}

impl DesignParams {
    /// Uniform `delta`, `Q = q_scale * I` for every agent.
    pub fn uniform(agents: usize, n: usize, delta: f64, q_scale: f64, alpha: f64) -> Self {
        Self {
            delta: vec![delta; agents],
            q: vec![DMatrix::identity(n, n) * q_scale; agents],
            alpha,
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }
}

/// Position of each decision variable in the flat vector. Only the upper
/// triangle of every `X_i` is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLayout {
    pub n: usize,
    pub agents: Vec<AgentSlots>,
    pub gamma_sq: Option<usize>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSlots {
    pub x_offset: usize,
    pub tau: Option<usize>,
    pub theta: Option<usize>,
}

/// Decision variables in structured form.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub x: Vec<Mat>,
    pub tau: Vec<f64>,
    pub theta: Vec<f64>,
    pub gamma_sq: Option<f64>,
}

impl DecisionLayout {
    pub fn new(
        n: usize,
        agents: usize,
        with_tau: bool,
        with_theta: bool,
        gamma_variable: bool,
    ) -> Self {
        let tri = n * (n + 1) / 2;
        let mut next = 0;
        let mut slots = Vec::with_capacity(agents);
        for _ in 0..agents {
            let x_offset = next;
            next += tri;
            let tau = with_tau.then(|| {
                next += 1;
                next - 1
            });
            let theta = with_theta.then(|| {
                next += 1;
                next - 1
            });
            slots.push(AgentSlots {
                x_offset,
                tau,
                theta,
            });
        }
        let gamma_sq = gamma_variable.then(|| {
            next += 1;
            next - 1
        });
        Self {
            n,
            agents: slots,
            gamma_sq,
            len: next,
        }
    }

    /// Flat index of entry `(r, c)` of `X_agent`; symmetric in `(r, c)`.
    pub fn x_index(&self, agent: usize, r: usize, c: usize) -> usize {
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        // rows 0..r of the upper triangle hold n + (n-1) + ... entries
        let before = r * self.n - r * r.saturating_sub(1) / 2;
        self.agents[agent].x_offset + before + (c - r)
    }

    /// All `(flat index, r, c)` for the upper triangle of `X_agent`.
    pub fn x_slots(&self, agent: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.n * (self.n + 1) / 2);
        let mut k = self.agents[agent].x_offset;
        for r in 0..self.n {
            for c in r..self.n {
                out.push((k, r, c));
                k += 1;
            }
        }
        out
    }

    pub fn unpack(&self, vars: &[f64]) -> Assignment {
        let x = (0..self.agents.len())
            .map(|i| {
                let mut m = Mat::zeros(self.n, self.n);
                for (k, r, c) in self.x_slots(i) {
                    m[(r, c)] = vars[k];
                    m[(c, r)] = vars[k];
                }
                m
            })
            .collect();
        let tau = self
            .agents
            .iter()
            .map(|a| a.tau.map_or(0.0, |k| vars[k]))
            .collect();
        let theta = self
            .agents
            .iter()
            .map(|a| a.theta.map_or(0.0, |k| vars[k]))
            .collect();
        Assignment {
            x,
            tau,
            theta,
            gamma_sq: self.gamma_sq.map(|k| vars[k]),
        }
    }

    pub fn pack(&self, a: &Assignment) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        for (i, slots) in self.agents.iter().enumerate() {
            for (k, r, c) in self.x_slots(i) {
                v[k] = 0.5 * (a.x[i][(r, c)] + a.x[i][(c, r)]);
            }
            if let Some(k) = slots.tau {
                v[k] = a.tau[i];
            }
            if let Some(k) = slots.theta {
                v[k] = a.theta[i];
            }
        }
        if let (Some(k), Some(g)) = (self.gamma_sq, a.gamma_sq) {
            v[k] = g;
        }
        v
    }

    /// Solver starting point: `X_i = I`, `tau_i = theta_i = 1`, `gamma^2 = 1`.
    pub fn initial_point(&self) -> Vec<f64> {
        let a = Assignment {
            x: vec![Mat::identity(self.n, self.n); self.agents.len()],
            tau: vec![1.0; self.agents.len()],
            theta: vec![1.0; self.agents.len()],
            gamma_sq: Some(1.0),
        };
        self.pack(&a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_indices_are_a_bijection() {
        for n in 1..5 {
            let layout = DecisionLayout::new(n, 3, true, false, true);
            let mut seen = vec![false; layout.len];
            for i in 0..3 {
                for (k, r, c) in layout.x_slots(i) {
                    assert_eq!(layout.x_index(i, r, c), k);
                    assert_eq!(layout.x_index(i, c, r), k);
                    assert!(!seen[k]);
                    seen[k] = true;
                }
                let t = layout.agents[i].tau.unwrap();
                assert!(!seen[t]);
                seen[t] = true;
                assert!(layout.agents[i].theta.is_none());
            }
            let g = layout.gamma_sq.unwrap();
            assert!(!seen[g]);
            seen[g] = true;
            assert!(seen.iter().all(|s| *s));
        }
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let layout = DecisionLayout::new(3, 2, true, true, false);
        let v: Vec<f64> = (0..layout.len).map(|k| k as f64 * 0.37 - 1.0).collect();
        assert_eq!(layout.pack(&layout.unpack(&v)), v);
        let a = layout.unpack(&layout.initial_point());
        assert_eq!(a.x[1], Mat::identity(3, 3));
        assert_eq!(a.tau, vec![1.0, 1.0]);
    }
}
