//! Small ready-made networks for tests and demos.

use crate::graph::DiGraph;
use crate::linalg::{from_rows, Mat};
use crate::model::{
    AgentModel, Interval, Link, NetworkModel, Nonlinearity, ParamDependence, ReferencePlant,
};

fn m(rows: &[&[f64]]) -> Mat {
    from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
}

/// Two-state oscillator with a sine nonlinearity, `rho` in `[0, 1]`.
pub fn damped_plant() -> ReferencePlant {
    ReferencePlant {
        a: ParamDependence::Affine {
            a0: m(&[&[-1.0, 1.0], &[-1.0, -0.5]]),
            delta: m(&[&[0.0, 0.0], &[0.5, 0.0]]),
        },
        b1: Mat::identity(2, 2),
        b20: m(&[&[0.1], &[0.1]]),
        phi: Nonlinearity::Sine { gain: 0.3 },
        r: Mat::identity(2, 2) * 0.09,
    }
}

/// Directed ring of `n` identical agents; agent `i` hears agent `i - 1`.
pub fn synthetic_ring(n: usize) -> NetworkModel {
    NetworkModel {
        graph: DiGraph::ring(n).expect("ring"),
        plant: damped_plant(),
        agents: (0..n)
            .map(|i| AgentModel {
                b2: m(&[&[0.1], &[0.0]]),
                c2: m(&[&[1.0, 0.0]]),
                d2: m(&[&[0.05]]),
                links: vec![Link {
                    from: (i + n - 1) % n,
                    h: m(&[&[0.0, 1.0]]),
                    g: m(&[&[0.5]]),
                }],
            })
            .collect(),
        gamma_interval: Interval::new(0.0, 1.0),
    }
}

/// One agent with no neighbours.
pub fn lone_agent() -> NetworkModel {
    NetworkModel {
        graph: DiGraph::new(1, &[]).expect("single node"),
        plant: damped_plant(),
        agents: vec![AgentModel {
            b2: m(&[&[0.1], &[0.0]]),
            c2: m(&[&[1.0, 0.0]]),
            d2: m(&[&[0.05]]),
            links: vec![],
        }],
        gamma_interval: Interval::new(0.0, 1.0),
    }
}
