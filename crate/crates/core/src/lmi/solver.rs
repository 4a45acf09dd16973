use nalgebra::{Cholesky, Dyn, SymmetricEigen};

use super::{AffineBlock, AffineLmi, LmiError};
use crate::linalg::{self, Mat, Vector};

/// Feasibility request: find variables with every block (side constraints
/// included) `<= -margin I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub margin: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl SolveOptions {
    pub fn with_margin(margin: f64) -> Self {
        Self {
            margin,
            max_iterations: 50_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveOutcome {
    Feasible {
        vars: Vec<f64>,
        max_eig: f64,
        iterations: usize,
    },
    /// `lower_bound` is a certified lower bound on the optimal max eigenvalue
    /// that already exceeds `-margin`.
    Infeasible {
        best_vars: Vec<f64>,
        best_max_eig: f64,
        lower_bound: f64,
        iterations: usize,
    },
}

/// Backend seam: anything that can minimize the largest eigenvalue of an
/// affine block-diagonal matrix far enough to decide strict feasibility.
pub trait LmiSolver: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve(&self, lmi: &AffineLmi, opts: &SolveOptions) -> Result<SolveOutcome, LmiError>;
}

fn check_finite(v: &[f64]) -> Result<(), LmiError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LmiError::NumericalBreakdown(
            "non-finite decision variable".into(),
        ))
    }
}

/// Primal log-barrier path following on `min t s.t. F(v) <= t I`.
///
/// Each centering step minimizes `s t - sum_b log det(t I - F_b(v))` with
/// damped Newton iterations; `s` grows geometrically. After centering, the
/// duality-gap bound `t - D / s` (with `D` the total block dimension) is a
/// lower bound on the optimum, which lets the solver declare infeasibility
/// instead of merely running out of iterations.
#[derive(Debug, Clone)]
pub struct BarrierSolver {
    pub growth: f64,
    pub max_barrier_weight: f64,
}

impl Default for BarrierSolver {
    fn default() -> Self {
        Self {
            growth: 8.0,
            max_barrier_weight: 1e14,
        }
    }
}

struct BarrierEval {
    value: f64,
    grad: Vec<f64>,
    hess: Mat,
}

impl BarrierSolver {
    /// Barrier value; `None` outside the domain.
    fn value(blocks: &[&AffineBlock], vars: &[f64], t: f64, s: f64) -> Option<f64> {
        let mut logdet = 0.0;
        for b in blocks {
            let slack = Mat::identity(b.dim, b.dim) * t - b.eval(vars);
            let chol = Cholesky::new(slack)?;
            logdet += 2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|d| d.ln())
                    .sum::<f64>();
        }
        Some(s * t - logdet)
    }

    fn derivatives(blocks: &[&AffineBlock], vars: &[f64], t: f64, s: f64) -> Option<BarrierEval> {
        let m = vars.len();
        let mut grad = vec![0.0; m + 1];
        let mut hess = Mat::zeros(m + 1, m + 1);
        let mut logdet = 0.0;
        grad[m] = s;
        for b in blocks {
            let slack = Mat::identity(b.dim, b.dim) * t - b.eval(vars);
            let chol = Cholesky::new(slack)?;
            logdet += 2.0
                * chol
                    .l_dirty()
                    .diagonal()
                    .iter()
                    .map(|d| d.ln())
                    .sum::<f64>();
            let inv = chol.inverse();
            // A_k = S^-1 dS/dz_k with dS/dv_k = -F_k and dS/dt = I
            let mut idx = Vec::with_capacity(b.terms.len() + 1);
            let mut prods = Vec::with_capacity(b.terms.len() + 1);
            for (k, coeff) in &b.terms {
                idx.push(*k);
                prods.push(-(&inv * coeff));
            }
            idx.push(m);
            prods.push(inv);
            for (a, pa) in prods.iter().enumerate() {
                grad[idx[a]] -= pa.trace();
                for (c, pc) in prods.iter().enumerate().skip(a) {
                    let h = pa.dot(&pc.transpose());
                    hess[(idx[a], idx[c])] += h;
                    if a != c {
                        hess[(idx[c], idx[a])] += h;
                    }
                }
            }
        }
        Some(BarrierEval {
            value: s * t - logdet,
            grad,
            hess,
        })
    }

    fn newton_direction(hess: &Mat, grad: &[f64]) -> Option<Vector> {
        let g = Vector::from_column_slice(grad);
        let scale = hess.diagonal().amax().max(1e-300);
        let mut reg = 1e-13 * scale;
        for _ in 0..12 {
            let mut h = hess.clone();
            for k in 0..h.nrows() {
                h[(k, k)] += reg;
            }
            if let Some(chol) = Cholesky::<f64, Dyn>::new(h) {
                let d = chol.solve(&(-&g));
                if d.iter().all(|x| x.is_finite()) {
                    return Some(d);
                }
            }
            reg *= 100.0;
        }
        None
    }
}

impl LmiSolver for BarrierSolver {
    fn name(&self) -> &'static str {
        "barrier"
    }

    fn solve(&self, lmi: &AffineLmi, opts: &SolveOptions) -> Result<SolveOutcome, LmiError> {
        let blocks: Vec<&AffineBlock> = lmi.all_blocks().collect();
        let total_dim: usize = blocks.iter().map(|b| b.dim).sum();
        let mut vars = lmi.layout.initial_point();
        let m = vars.len();
        let mut best_vars = vars.clone();
        let mut best = lmi.max_eig_all(&vars);
        let mut iterations = 0;
        if best < -opts.margin {
            return Ok(SolveOutcome::Feasible {
                vars,
                max_eig: best,
                iterations,
            });
        }
        let mut t = best + 1.0 + 0.1 * best.abs();
        let mut s = total_dim as f64 / (1.0 + t.abs());
        let mut lower_bound = f64::NEG_INFINITY;

        while s <= self.max_barrier_weight {
            // centering
            for _ in 0..200 {
                iterations += 1;
                if iterations > opts.max_iterations {
                    return Err(LmiError::MaxIterations {
                        iterations: opts.max_iterations,
                        best_max_eig: best,
                    });
                }
                let ev = Self::derivatives(&blocks, &vars, t, s).ok_or_else(|| {
                    LmiError::NumericalBreakdown("iterate left the barrier domain".into())
                })?;
                let dir = Self::newton_direction(&ev.hess, &ev.grad)
                    .ok_or_else(|| LmiError::NumericalBreakdown("singular Newton system".into()))?;
                let slope: f64 = dir.iter().zip(&ev.grad).map(|(d, g)| d * g).sum();
                let decrement_sq = -slope;
                if decrement_sq < 1e-10 {
                    break;
                }
                let mut step = 1.0;
                let mut accepted = false;
                while step > 1e-16 {
                    let trial: Vec<f64> = (0..m).map(|k| vars[k] + step * dir[k]).collect();
                    let trial_t = t + step * dir[m];
                    if let Some(val) = Self::value(&blocks, &trial, trial_t, s) {
                        if val <= ev.value + 0.25 * step * slope {
                            vars = trial;
                            t = trial_t;
                            accepted = true;
                            break;
                        }
                    }
                    step *= 0.5;
                }
                check_finite(&vars)?;
                let current = lmi.max_eig_all(&vars);
                if current < best {
                    best = current;
                    best_vars.clone_from(&vars);
                }
                if best < -opts.margin {
                    return Ok(SolveOutcome::Feasible {
                        vars: best_vars,
                        max_eig: best,
                        iterations,
                    });
                }
                if !accepted {
                    break;
                }
            }
            lower_bound = lower_bound.max(t - total_dim as f64 / s);
            if lower_bound >= -opts.margin {
                return Ok(SolveOutcome::Infeasible {
                    best_vars,
                    best_max_eig: best,
                    lower_bound,
                    iterations,
                });
            }
            s *= self.growth;
        }
        Ok(SolveOutcome::Infeasible {
            best_vars,
            best_max_eig: best,
            lower_bound,
            iterations,
        })
    }
}

/// Projected subgradient descent on the largest eigenvalue with Polyak
/// steps against a moving target.
///
/// The subgradient is `u u'` for the top eigenvector `u` of the worst block,
/// pulled back through the adjoint of the affine map. After each step every
/// `X_i` is projected onto `{X >= eps I}` and scalar variables onto
/// `[eps, inf)`.
#[derive(Debug, Clone)]
pub struct SubgradientSolver {
    pub stall_window: usize,
}

impl Default for SubgradientSolver {
    fn default() -> Self {
        Self { stall_window: 100 }
    }
}

impl SubgradientSolver {
    fn project(lmi: &AffineLmi, vars: &mut [f64]) {
        let eps = super::assembly::SIDE_EPSILON;
        let layout = &lmi.layout;
        let mut assignment = layout.unpack(vars);
        for x in assignment.x.iter_mut() {
            let eig = SymmetricEigen::new(linalg::symmetrize(x));
            if eig.eigenvalues.iter().any(|v| *v < eps) {
                let clipped = eig.eigenvalues.map(|v| v.max(eps));
                *x =
                    &eig.eigenvectors * Mat::from_diagonal(&clipped) * eig.eigenvectors.transpose();
            }
        }
        assignment.tau.iter_mut().for_each(|v| *v = v.max(eps));
        assignment.theta.iter_mut().for_each(|v| *v = v.max(eps));
        if let Some(g) = assignment.gamma_sq.as_mut() {
            *g = g.max(eps);
        }
        vars.copy_from_slice(&layout.pack(&assignment));
    }

    fn value_and_subgradient(lmi: &AffineLmi, vars: &[f64]) -> (f64, Vec<f64>) {
        let mut worst = f64::NEG_INFINITY;
        let mut grad = vec![0.0; vars.len()];
        let mut arg: Option<(&AffineBlock, Vector)> = None;
        for b in lmi.all_blocks() {
            let (val, u) = linalg::top_eigenpair(&b.eval(vars));
            if val > worst {
                worst = val;
                arg = Some((b, u));
            }
        }
        if let Some((b, u)) = arg {
            b.adjoint_into(&(&u * u.transpose()), &mut grad);
        }
        (worst, grad)
    }
}

impl LmiSolver for SubgradientSolver {
    fn name(&self) -> &'static str {
        "subgradient"
    }

    fn solve(&self, lmi: &AffineLmi, opts: &SolveOptions) -> Result<SolveOutcome, LmiError> {
        let mut vars = lmi.layout.initial_point();
        Self::project(lmi, &mut vars);
        let (mut best, _) = Self::value_and_subgradient(lmi, &vars);
        let mut best_vars = vars.clone();
        let mut gap = 0.5 * (1.0 + best.abs());
        let mut since_improvement = 0;
        for it in 0..opts.max_iterations {
            let (f, g) = Self::value_and_subgradient(lmi, &vars);
            check_finite(&g)?;
            if f < best {
                best = f;
                best_vars.clone_from(&vars);
                since_improvement = 0;
            } else {
                since_improvement += 1;
            }
            if best < -opts.margin {
                return Ok(SolveOutcome::Feasible {
                    vars: best_vars,
                    max_eig: best,
                    iterations: it,
                });
            }
            if since_improvement >= self.stall_window {
                gap *= 0.5;
                since_improvement = 0;
                vars.clone_from(&best_vars);
            }
            let norm_sq: f64 = g.iter().map(|v| v * v).sum();
            if norm_sq == 0.0 {
                // constant problem: nothing left to improve
                return Ok(SolveOutcome::Infeasible {
                    best_vars,
                    best_max_eig: best,
                    lower_bound: best,
                    iterations: it,
                });
            }
            let target = best.min(-opts.margin) - gap;
            let step = (f - target) / norm_sq;
            for (v, gk) in vars.iter_mut().zip(&g) {
                *v -= step * gk;
            }
            Self::project(lmi, &mut vars);
            check_finite(&vars)?;
        }
        Err(LmiError::MaxIterations {
            iterations: opts.max_iterations,
            best_max_eig: best,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::{DecisionLayout, GammaSq, LmiVariant};

    /// Scalar LMIs `c_k + s_k x <= 0` in one variable.
    fn scalar_lmi(rows: &[(f64, f64)]) -> AffineLmi {
        let layout = DecisionLayout::new(1, 1, false, false, false);
        let blocks = rows
            .iter()
            .map(|&(c, s)| AffineBlock {
                label: format!("{c} + {s} x"),
                dim: 1,
                constant: Mat::from_element(1, 1, c),
                terms: vec![(0, Mat::from_element(1, 1, s))],
            })
            .collect();
        AffineLmi {
            layout,
            blocks,
            partitions: vec![],
            side: vec![],
            rho: 0.0,
            gamma_sq: GammaSq::Fixed(1.0),
            alpha: 0.0,
            variant: LmiVariant::Full,
        }
    }

    fn solvers() -> Vec<Box<dyn LmiSolver>> {
        vec![
            Box::new(BarrierSolver::default()),
            Box::new(SubgradientSolver::default()),
        ]
    }

    #[test]
    fn scalar_feasible() {
        let lmi = scalar_lmi(&[(-2.0, 1.0)]);
        for s in solvers() {
            match s.solve(&lmi, &SolveOptions::with_margin(1e-6)).unwrap() {
                SolveOutcome::Feasible { vars, max_eig, .. } => {
                    assert!(vars[0] < 2.0, "{}", s.name());
                    assert!(max_eig <= -1e-6);
                }
                other => panic!("{}: {other:?}", s.name()),
            }
        }
    }

    #[test]
    fn interval_feasible() {
        // x < 2 and x > 1
        let lmi = scalar_lmi(&[(-2.0, 1.0), (1.0, -1.0)]);
        let out = BarrierSolver::default()
            .solve(&lmi, &SolveOptions::with_margin(1e-3))
            .unwrap();
        let SolveOutcome::Feasible { vars, .. } = out else {
            panic!("{out:?}")
        };
        assert!(vars[0] > 1.0 && vars[0] < 2.0);
    }

    #[test]
    fn constant_positive_is_infeasible() {
        let layout = DecisionLayout::new(1, 1, false, false, false);
        let lmi = AffineLmi {
            blocks: vec![AffineBlock {
                label: "const".into(),
                dim: 2,
                constant: Mat::from_diagonal(&Vector::from_vec(vec![-1.0, 0.5])),
                terms: vec![],
            }],
            ..scalar_lmi(&[])
        };
        assert_eq!(lmi.layout, layout);
        match BarrierSolver::default()
            .solve(&lmi, &SolveOptions::with_margin(1e-6))
            .unwrap()
        {
            SolveOutcome::Infeasible {
                best_max_eig,
                lower_bound,
                ..
            } => {
                assert!((best_max_eig - 0.5).abs() < 1e-9);
                assert!(lower_bound > -1e-6);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_interval_is_infeasible_with_certified_bound() {
        // x < 2 and x > 3: optimum max eigenvalue is 0.5 at x = 2.5
        let lmi = scalar_lmi(&[(-2.0, 1.0), (3.0, -1.0)]);
        match BarrierSolver::default()
            .solve(&lmi, &SolveOptions::with_margin(1e-6))
            .unwrap()
        {
            SolveOutcome::Infeasible {
                best_vars,
                best_max_eig,
                lower_bound,
                ..
            } => {
                assert!(lower_bound <= 0.5 + 1e-9);
                assert!(lower_bound > 0.0);
                assert!((best_max_eig - 0.5).abs() < 1e-3);
                assert!((best_vars[0] - 2.5).abs() < 1e-2);
            }
            other => panic!("{other:?}"),
        }
    }
}
