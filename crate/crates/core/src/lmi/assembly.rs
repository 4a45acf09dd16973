use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DecisionLayout, DesignParams, GammaSq, LmiError};
use crate::linalg::{self, Mat};
use crate::model::NetworkModel;

/// Lower bound used for `X_i >= eps I`, `tau_i >= eps`, `theta_i >= eps`.
pub const SIDE_EPSILON: f64 = 1e-6;

/// `constant + sum_k vars[k] * terms[k]`, symmetric for every assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBlock {
    pub label: String,
    pub dim: usize,
    pub constant: Mat,
    pub terms: Vec<(usize, Mat)>,
}

impl AffineBlock {
    pub fn eval(&self, vars: &[f64]) -> Mat {
        let mut m = self.constant.clone();
        for (k, coeff) in &self.terms {
            m += coeff * vars[*k];
        }
        m
    }

    /// Adds `<W, terms[k]>` into `out[k]`: the adjoint of the linear part.
    pub fn adjoint_into(&self, w: &Mat, out: &mut [f64]) {
        for (k, coeff) in &self.terms {
            out[*k] += w.dot(coeff);
        }
    }
}

/// Row/column partition of one agent block, in order: state, `w0`, `w_i`,
/// nonlinearity channel, one `n`-wide slot per neighbour, `theta` row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub state: usize,
    pub w0: usize,
    pub wi: usize,
    pub phi: usize,
    pub neighbors: usize,
    pub theta: usize,
}

impl BlockLayout {
    pub fn dim(&self) -> usize {
        self.state + self.w0 + self.wi + self.phi + self.neighbors + self.theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LmiVariant {
    /// Includes the `theta_i` mismatch row.
    Full,
    /// The mismatch row and the `theta_i alpha^2 I` term removed.
    Reduced,
}

/// The stacked coupled LMIs at one value of the scheduling parameter.
#[derive(Debug, Clone)]
pub struct AffineLmi {
    pub layout: DecisionLayout,
    pub blocks: Vec<AffineBlock>,
    pub partitions: Vec<BlockLayout>,
    /// Side constraints written as `eps I - X_i <= 0`, `eps - tau_i <= 0`, ...
    pub side: Vec<AffineBlock>,
    pub rho: f64,
    pub gamma_sq: GammaSq,
    pub alpha: f64,
    pub variant: LmiVariant,
}

impl AffineLmi {
    pub fn eval_blocks(&self, vars: &[f64]) -> Vec<Mat> {
        self.blocks.iter().map(|b| b.eval(vars)).collect()
    }

    /// Largest eigenvalue over the agent blocks (side constraints excluded).
    pub fn max_eig(&self, vars: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| linalg::max_eigenvalue(&b.eval(vars)))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest eigenvalue over agent blocks and side constraints.
    pub fn max_eig_all(&self, vars: &[f64]) -> f64 {
        self.all_blocks()
            .map(|b| linalg::max_eigenvalue(&b.eval(vars)))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_blocks(&self) -> impl Iterator<Item = &AffineBlock> {
        self.blocks.iter().chain(self.side.iter())
    }

    /// Largest spectral norm of a block's constant part.
    pub fn constant_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| linalg::spectral_norm(&b.constant))
            .fold(0.0, f64::max)
    }

    /// Strictness margin `1e-6 * (1 + ||constant part||)`.
    pub fn default_margin(&self) -> f64 {
        1e-6 * (1.0 + self.constant_norm())
    }
}

struct Builder {
    constant: Mat,
    terms: BTreeMap<usize, Mat>,
}

impl Builder {
    fn new(dim: usize) -> Self {
        Self {
            constant: Mat::zeros(dim, dim),
            terms: BTreeMap::new(),
        }
    }

    /// Writes `piece` at `(r0, c0)` and its transpose at `(c0, r0)`. Pieces
    /// on the diagonal must already be symmetric.
    fn place(target: &mut Mat, r0: usize, c0: usize, piece: &Mat) {
        let (pr, pc) = piece.shape();
        let mut view = target.view_mut((r0, c0), (pr, pc));
        view += piece;
        if r0 != c0 {
            let mut view = target.view_mut((c0, r0), (pc, pr));
            view += piece.transpose();
        }
    }

    fn constant(&mut self, r0: usize, c0: usize, piece: &Mat) {
        Self::place(&mut self.constant, r0, c0, piece);
    }

    fn var(&mut self, k: usize, r0: usize, c0: usize, piece: &Mat) {
        let dim = self.constant.nrows();
        let entry = self.terms.entry(k).or_insert_with(|| Mat::zeros(dim, dim));
        Self::place(entry, r0, c0, piece);
    }

    /// Adds a term linear in the symmetric matrix `X_agent`, given as the map
    /// `f(E)` evaluated on each symmetric basis element.
    fn x_linear(
        &mut self,
        layout: &DecisionLayout,
        agent: usize,
        r0: usize,
        c0: usize,
        f: impl Fn(&Mat) -> Mat,
    ) {
        let n = layout.n;
        for (k, r, c) in layout.x_slots(agent) {
            let mut e = Mat::zeros(n, n);
            e[(r, c)] = 1.0;
            e[(c, r)] = 1.0;
            self.var(k, r0, c0, &f(&e));
        }
    }

    fn gamma(
        &mut self,
        gamma: GammaSq,
        layout: &DecisionLayout,
        r0: usize,
        c0: usize,
        piece: &Mat,
    ) {
        match gamma {
            GammaSq::Fixed(g) => self.constant(r0, c0, &(piece * g)),
            GammaSq::Variable => self.var(layout.gamma_sq.expect("gamma slot"), r0, c0, piece),
        }
    }

    fn finish(self, label: String) -> AffineBlock {
        let dim = self.constant.nrows();
        AffineBlock {
            label,
            dim,
            constant: self.constant,
            terms: self
                .terms
                .into_iter()
                .filter(|(_, m)| m.iter().any(|v| *v != 0.0))
                .collect(),
        }
    }
}

fn check_params(net: &NetworkModel, params: &DesignParams, gamma: GammaSq) -> Result<(), LmiError> {
    let big_n = net.agent_count();
    let n = net.state_dim();
    if params.delta.len() != big_n || params.q.len() != big_n {
        return Err(LmiError::DimensionMismatch(format!(
            "expected {big_n} delta_i and Q_i, got {} and {}",
            params.delta.len(),
            params.q.len()
        )));
    }
    if let Some(d) = params.delta.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(LmiError::InvalidParameter(format!(
            "delta_i must be positive, got {d}"
        )));
    }
    for (i, q) in params.q.iter().enumerate() {
        if q.shape() != (n, n) {
            return Err(LmiError::DimensionMismatch(format!(
                "Q_{} must be {n} x {n}",
                i + 1
            )));
        }
        if !linalg::is_symmetric(q, 1e-12) || !linalg::is_positive_definite(q) {
            return Err(LmiError::InvalidParameter(format!(
                "Q_{} must be symmetric positive definite",
                i + 1
            )));
        }
    }
    if !(params.alpha >= 0.0) || !params.alpha.is_finite() {
        return Err(LmiError::InvalidParameter(format!(
            "alpha must be nonnegative, got {}",
            params.alpha
        )));
    }
    if let GammaSq::Fixed(g) = gamma {
        if !(g > 0.0) || !g.is_finite() {
            return Err(LmiError::InvalidParameter(format!(
                "gamma^2 must be positive, got {g}"
            )));
        }
    }
    Ok(())
}

/// Assembles the coupled LMIs at `rho`.
///
/// `tau_i` and the nonlinearity channel are dropped when `R = 0`, and
/// `theta_i` with its row is dropped when `alpha = 0`: in both cases the
/// removed terms vanish as the variable grows without bound, so the
/// reduced problem is the exact limit.
pub fn assemble_lmi(
    net: &NetworkModel,
    rho: f64,
    gamma: GammaSq,
    params: &DesignParams,
) -> Result<AffineLmi, LmiError> {
    assemble(net, rho, gamma, params, LmiVariant::Full)
}

/// The coupled LMIs without the mismatch row, used to certify interpolated
/// certificates.
pub fn assemble_reduced_lmi(
    net: &NetworkModel,
    rho: f64,
    gamma: GammaSq,
    params: &DesignParams,
) -> Result<AffineLmi, LmiError> {
    assemble(net, rho, gamma, params, LmiVariant::Reduced)
}

fn assemble(
    net: &NetworkModel,
    rho: f64,
    gamma: GammaSq,
    params: &DesignParams,
    variant: LmiVariant,
) -> Result<AffineLmi, LmiError> {
    net.ensure_valid()?;
    check_params(net, params, gamma)?;
    let a = net.eval_a(rho)?;
    let n = net.state_dim();
    let big_n = net.agent_count();
    let plant = &net.plant;
    let with_tau = plant.r.iter().any(|v| *v != 0.0);
    let with_theta = variant == LmiVariant::Full && params.alpha > 0.0;
    let layout = DecisionLayout::new(n, big_n, with_tau, with_theta, gamma == GammaSq::Variable);
    let eye = Mat::identity(n, n);

    let mut blocks = Vec::with_capacity(big_n);
    let mut partitions = Vec::with_capacity(big_n);
    for (i, agent) in net.agents.iter().enumerate() {
        let neighbors = net.graph.neighbors(i);
        let part = BlockLayout {
            state: n,
            w0: plant.disturbance_dim(),
            wi: agent.disturbance_dim(),
            phi: if with_tau { plant.phi_dim() } else { 0 },
            neighbors: neighbors.len() * n,
            theta: if with_theta { n } else { 0 },
        };
        let (o_w0, o_wi) = (n, n + part.w0);
        let o_phi = o_wi + part.wi;
        let o_nb = o_phi + part.phi;
        let o_th = o_nb + part.neighbors;
        let mut b = Builder::new(part.dim());

        let e2_inv = linalg::spd_inverse(&agent.e2(), 1e14).ok_or_else(|| {
            LmiError::NumericalBreakdown(format!("E2 of agent {} not invertible", i + 1))
        })?;
        let a_bar =
            &a + &eye * params.delta[i] + &agent.b2 * agent.d2.transpose() * &e2_inv * &agent.c2;
        let w_c = agent.c2.transpose() * &e2_inv * &agent.c2;
        let mut w_links = Vec::with_capacity(neighbors.len());
        for &j in neighbors {
            let link = agent.link(j).ok_or_else(|| {
                LmiError::DimensionMismatch(format!("agent {} lacks a link from {}", i + 1, j + 1))
            })?;
            let f_inv = linalg::spd_inverse(&link.f(), 1e14).ok_or_else(|| {
                LmiError::NumericalBreakdown(format!(
                    "F of link {}->{} not invertible",
                    j + 1,
                    i + 1
                ))
            })?;
            w_links.push(link.h.transpose() * f_inv * &link.h);
        }

        // state-state block
        b.x_linear(&layout, i, 0, 0, |e| e * &a_bar + a_bar.transpose() * e);
        let degree = (net.graph.in_degree(i) + net.graph.out_degree(i)) as f64;
        b.constant(0, 0, &(&eye * degree + &params.q[i]));
        let w_sum = w_links.iter().fold(w_c.clone(), |acc, w| acc + w);
        b.gamma(gamma, &layout, 0, 0, &(-w_sum));
        if let Some(k) = layout.agents[i].tau {
            b.var(k, 0, 0, &plant.r);
        }
        if let Some(k) = layout.agents[i].theta {
            b.var(k, 0, 0, &(&eye * params.alpha.powi(2)));
        }

        // T_i against -Upsilon_i
        let b20 = &plant.b20;
        b.x_linear(&layout, i, 0, o_w0, |e| e * b20);
        let wi_dim = agent.disturbance_dim();
        let proj = Mat::identity(wi_dim, wi_dim) - agent.d2.transpose() * &e2_inv * &agent.d2;
        let b2_proj = &agent.b2 * proj;
        b.x_linear(&layout, i, 0, o_wi, |e| e * &b2_proj);
        b.gamma(
            gamma,
            &layout,
            o_w0,
            o_w0,
            &(-Mat::identity(part.w0, part.w0)),
        );
        b.gamma(
            gamma,
            &layout,
            o_wi,
            o_wi,
            &(-Mat::identity(part.wi, part.wi)),
        );
        if let Some(k) = layout.agents[i].tau {
            let b1 = &plant.b1;
            b.x_linear(&layout, i, 0, o_phi, |e| e * b1);
            b.var(k, o_phi, o_phi, &(-Mat::identity(part.phi, part.phi)));
        }
        for (slot, (&j, w)) in neighbors.iter().zip(&w_links).enumerate() {
            let o = o_nb + slot * n;
            b.constant(0, o, &(-&eye));
            b.gamma(gamma, &layout, 0, o, w);
            let z = 2.0 * params.delta[j] / (net.graph.out_degree(j) as f64 + 1.0);
            b.x_linear(&layout, j, o, o, |e| -(e * z));
        }

        // mismatch row [X_i, 0, -theta_i I]
        if let Some(k) = layout.agents[i].theta {
            b.x_linear(&layout, i, 0, o_th, |e| e.clone());
            b.var(k, o_th, o_th, &(-&eye));
        }

        blocks.push(b.finish(format!("agent {}", i + 1)));
        partitions.push(part);
    }

    let mut side = Vec::new();
    for i in 0..big_n {
        let mut b = Builder::new(n);
        b.constant(0, 0, &(&eye * SIDE_EPSILON));
        b.x_linear(&layout, i, 0, 0, |e| -e);
        side.push(b.finish(format!("X_{} > 0", i + 1)));
        for (slot, name) in [
            (layout.agents[i].tau, "tau"),
            (layout.agents[i].theta, "theta"),
        ] {
            if let Some(k) = slot {
                let mut b = Builder::new(1);
                b.constant(0, 0, &Mat::from_element(1, 1, SIDE_EPSILON));
                b.var(k, 0, 0, &Mat::from_element(1, 1, -1.0));
                side.push(b.finish(format!("{name}_{} > 0", i + 1)));
            }
        }
    }
    if let Some(k) = layout.gamma_sq {
        let mut b = Builder::new(1);
        b.constant(0, 0, &Mat::from_element(1, 1, SIDE_EPSILON));
        b.var(k, 0, 0, &Mat::from_element(1, 1, -1.0));
        side.push(b.finish("gamma^2 > 0".into()));
    }

    Ok(AffineLmi {
        layout,
        blocks,
        partitions,
        side,
        rho,
        gamma_sq: gamma,
        alpha: params.alpha,
        variant,
    })
}
