//! Brute-force reference computations.
//!
//! Everything here is deliberately naive and shares no code with the
//! production crate: classical cyclic Jacobi for symmetric spectra, central
//! differences for derivatives, and composite trapezoid/Simpson quadrature.
//! Production code never links against this crate; it is a dev-dependency
//! only.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("matrix is not square: row {row} has {len} entries, expected {expected}")]
    NonSquare {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

/// One production-vs-oracle comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub quantity: String,
    pub production: f64,
    pub oracle: f64,
    pub deviation: f64,
}

impl OracleReport {
    pub fn new(quantity: impl Into<String>, production: f64, oracle: f64) -> Self {
        Self {
            quantity: quantity.into(),
            production,
            oracle,
            deviation: deviation(production, oracle),
        }
    }

    pub fn within(&self, tol: f64) -> bool {
        self.deviation <= tol
    }
}

/// `|a - b| / max(1, |b|)`.
pub fn deviation(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// ascending. The input is symmetrized as `(A + A')/2` first.
pub fn jacobi_eigs(rows: &[Vec<f64>]) -> Result<Vec<f64>, OracleError> {
    let n = rows.len();
    for (row, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(OracleError::NonSquare {
                row,
                len: r.len(),
                expected: n,
            });
        }
    }
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = 0.5 * (rows[i][j] + rows[j][i]);
        }
    }
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off < 1e-12 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                // Rotation angle that annihilates a[p][q].
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(eig)
}

/// Central-difference derivative of a uniformly sampled series. Endpoints use
/// one-sided second-order stencils.
pub fn fd_derivative(series: &[f64], dt: f64) -> Result<Vec<f64>, OracleError> {
    let n = series.len();
    if n < 3 {
        return Err(OracleError::TooFewSamples { needed: 3, got: n });
    }
    let mut out = vec![0.0; n];
    out[0] = (-3.0 * series[0] + 4.0 * series[1] - series[2]) / (2.0 * dt);
    for k in 1..n - 1 {
        out[k] = (series[k + 1] - series[k - 1]) / (2.0 * dt);
    }
    out[n - 1] = (3.0 * series[n - 1] - 4.0 * series[n - 2] + series[n - 3]) / (2.0 * dt);
    Ok(out)
}

/// Composite trapezoid rule on a uniform grid.
pub fn trapezoid(samples: &[f64], dt: f64) -> f64 {
    match samples.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = samples[1..n - 1].iter().sum();
            dt * (inner + 0.5 * (samples[0] + samples[n - 1]))
        }
    }
}

/// Composite Simpson rule; falls back to the trapezoid rule on the last
/// interval when the interval count is odd.
pub fn simpson(samples: &[f64], dt: f64) -> f64 {
    let n = samples.len();
    if n < 3 {
        return trapezoid(samples, dt);
    }
    let intervals = n - 1;
    let even = intervals - intervals % 2;
    let mut acc = samples[0] + samples[even];
    for (k, v) in samples.iter().enumerate().take(even).skip(1) {
        acc += if k % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    let mut total = acc * dt / 3.0;
    if even < intervals {
        total += 0.5 * dt * (samples[even] + samples[even + 1]);
    }
    total
}
