//! Acceptance checks. Runs without the libtest harness so every verdict
//! line is printed; exits nonzero if any check fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use lpvsync::chaos::{run_chaos_example, ChaosExample};
use lpvsync::fixtures;
use lpvsync::linalg::{self, Mat, Vector};
use lpvsync::lmi::{
    assemble_lmi, solve_feasibility, AgentGains, BarrierSolver, DesignParams, GammaSearch, GammaSq,
    LmiError,
};
use lpvsync::model::{NetworkModel, Nonlinearity, ParamSignal, RhoSource};
use lpvsync::scheduling::{
    build_grid, synthesize_schedule, GainSchedule, GridPolicy, OverlapPolicy, SynthesisMode,
};
use lpvsync::simulation::{
    dissipation_check, hinf_ratio, simulate, sync_error_series, DisturbanceSpec, GainSource,
    HinfMode, HinfRatio, SimConfig, SimError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn synthetic_schedule(points: usize) -> GainSchedule {
    let net = fixtures::synthetic_ring(3);
    let grid = build_grid(
        &net,
        GridPolicy::Count {
            points,
            alpha: None,
        },
        OverlapPolicy::Collapsed,
        DesignParams::uniform(3, 2, 0.1, 1.0, 0.0),
    )
    .expect("grid");
    synthesize_schedule(
        &net,
        &grid,
        SynthesisMode::Minimize {
            search: GammaSearch::default(),
        },
        &BarrierSolver::default(),
    )
    .expect("synthetic schedule")
}

fn random_state(rng: &mut ChaCha8Rng, scale: f64) -> Vector {
    Vector::from_fn(2, |_, _| rng.gen_range(-scale..scale))
}

fn csv_bytes(net: &NetworkModel, s: &GainSchedule, cfg: &SimConfig) -> Vec<u8> {
    let trace = simulate(net, s, cfg).expect("simulate");
    let mut out = Vec::new();
    trace.write_csv(&net.graph, &mut out).expect("csv");
    out
}

fn criterion_1(ex: &ChaosExample) -> Verdict {
    let s = &ex.schedule;
    let solver = BarrierSolver::default();
    let mut problems = Vec::new();
    for (k, (&rho, &g)) in s.grid.points.iter().zip(&s.point_gamma_sq).enumerate() {
        if !g.is_finite() || g <= 0.0 {
            problems.push(format!("point {} gamma^2 {g}", k + 1));
            continue;
        }
        let params = s.grid.params.with_alpha(s.grid.alpha[k]);
        let margin = assemble_lmi(&s.network, rho, GammaSq::Fixed(1.0), &params)
            .expect("assemble")
            .default_margin();
        let probe = |f: f64| {
            let lmi =
                assemble_lmi(&s.network, rho, GammaSq::Fixed(f * g), &params).expect("assemble");
            solve_feasibility(&lmi, margin, &solver)
        };
        if probe(1.1).is_err() {
            problems.push(format!("point {} infeasible at 1.1x", k + 1));
        }
        match probe(0.9) {
            Err(LmiError::Infeasible { .. }) => {}
            other => problems.push(format!("point {} at 0.9x: {:?}", k + 1, other.is_ok())),
        }
    }
    let in_band = (0.2..=20.0).contains(&s.gamma_sq);
    Verdict {
        id: 1,
        name: "chaos synthesis",
        pass: in_band && problems.is_empty(),
        detail: format!(
            "max gamma^2 = {:.6} (band [0.2, 20]); per point {:?}; probe problems: {:?}",
            s.gamma_sq,
            s.point_gamma_sq
                .iter()
                .map(|g| (g * 1e4).round() / 1e4)
                .collect::<Vec<_>>(),
            problems
        ),
    }
}

fn criterion_2(ex: &ChaosExample) -> Verdict {
    let mut pass = ex.runs.len() == 2;
    let mut parts = Vec::new();
    for r in &ex.runs {
        let worst_final = r.final_errors.iter().copied().fold(0.0, f64::max);
        let ok = r
            .final_errors
            .iter()
            .zip(&r.peak_errors)
            .all(|(f, p)| *f < 1e-2 && *f < 0.01 * p);
        pass &= ok;
        parts.push(format!(
            "theta {}: max final error {:.3e}, peaks {:?}",
            r.theta,
            worst_final,
            r.peak_errors
                .iter()
                .map(|p| (p * 1e3).round() / 1e3)
                .collect::<Vec<_>>()
        ));
    }
    Verdict {
        id: 2,
        name: "chaos synchronization",
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_3(ex: &ChaosExample) -> Verdict {
    let rate = ex.rate;
    Verdict {
        id: 3,
        name: "rate bound conservatism",
        pass: rate.bound < rate.rho_dot_max && !rate.weak_ok,
        detail: format!(
            "bound {:.4} vs measured sup|rho'| {:.1} (reported {}), weak_ok = {}",
            rate.bound, rate.rho_dot_max, ex.scenario.reported_rate, rate.weak_ok
        ),
    }
}

fn criterion_4(ex: &ChaosExample) -> Verdict {
    match ex.schedule.verify_interpolation(101) {
        Ok(segs) => {
            let failures: usize = segs.iter().map(|s| s.failures).sum();
            let worst = segs
                .iter()
                .map(|s| s.worst_max_eig)
                .fold(f64::NEG_INFINITY, f64::max);
            Verdict {
                id: 4,
                name: "interpolant certification",
                pass: failures == 0 && worst < 0.0,
                detail: format!(
                    "{} segments x 101 probes, {failures} failures, worst max eigenvalue {worst:.4e}",
                    segs.len()
                ),
            }
        }
        Err(e) => Verdict {
            id: 4,
            name: "interpolant certification",
            pass: false,
            detail: e.to_string(),
        },
    }
}

fn criterion_5() -> Verdict {
    let s = synthetic_schedule(3);
    let net = &s.network;
    let q = &s.grid.params.q;
    let eta = 0.5;
    let bound = s.rate_bound(q);
    let rate = (eta * bound).min(0.2);
    let check = s.check_rate_condition(q, rate, eta);
    let q_strong: Vec<Mat> = q.iter().map(|m| m * (1.0 - eta)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_weak, mut worst_strong) = (0.0f64, 0.0f64);
    let (mut literal_misses, mut proof_misses) = (0usize, 0usize);
    let mut errors = Vec::new();
    for draw in 0..100u64 {
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amplitude = 0.4;
        let omega = rate / amplitude;
        let cfg = SimConfig {
            dt: 1e-3,
            horizon: 20.0,
            x0: random_state(&mut rng, 1.0),
            agents_x0: (0..3).map(|_| random_state(&mut rng, 1.0)).collect(),
            rho: ParamSignal {
                source: RhoSource::Table {
                    points: (0..=200)
                        .map(|k| {
                            let t = k as f64 * 0.1;
                            (t, 0.5 + amplitude * (omega * t + phase).sin())
                        })
                        .collect(),
                },
                rate_max: Some(rate),
            },
            disturbances: DisturbanceSpec::noise(net, draw, rng.gen_range(0.1..2.0)),
        };
        let outcome = simulate(net, &s, &cfg).and_then(|trace| {
            let weak = hinf_ratio(&trace, &s, None, HinfMode::Weak)?;
            let strong = hinf_ratio(&trace, &s, Some(&q_strong), HinfMode::Strong)?;
            Ok((weak, strong))
        });
        match outcome {
            Ok((w, st)) => {
                worst_weak = worst_weak.max(w.ratio);
                worst_strong = worst_strong.max(st.ratio);
                if w.ratio > s.gamma_sq || st.ratio > s.gamma_sq {
                    literal_misses += 1;
                }
                // what the storage-function argument guarantees:
                // integral <= |e0|_P^2 + gamma^2 W
                let proven = |r: &HinfRatio| {
                    r.numerator
                        <= (r.initial_mismatch + s.gamma_sq * r.disturbance_energy) * (1.0 + 1e-9)
                };
                if !proven(&w) || !proven(&st) {
                    proof_misses += 1;
                }
            }
            Err(e) => errors.push(format!("draw {draw}: {e}")),
        }
    }
    Verdict {
        id: 5,
        name: "H-infinity ratio Monte Carlo",
        pass: check.weak_ok
            && check.strong_ok
            && errors.is_empty()
            && literal_misses == 0,
        detail: format!(
            "gamma^2 = {:.5}, |rho'| <= {rate:.4} (bound {bound:.4}), 100 draws: max weak {worst_weak:.5}, max strong {worst_strong:.5}, \
             draws above gamma^2: {literal_misses}; draws violating integral <= |e0|_P^2 + gamma^2 W: {proof_misses}; errors {errors:?}",
            s.gamma_sq
        ),
    }
}

fn criterion_6() -> Verdict {
    let s = synthetic_schedule(1);
    let net = &s.network;
    let delta = &s.grid.params.delta;
    let q = &s.grid.params.q;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_fraction = 1.0f64;
    let mut checked = 0;
    let mut errors = Vec::new();
    for draw in 0..10u64 {
        let rho = rng.gen_range(0.0..=1.0);
        let cfg = SimConfig {
            dt: 1e-3,
            horizon: 10.0,
            x0: random_state(&mut rng, 1.0),
            agents_x0: (0..3).map(|_| random_state(&mut rng, 1.0)).collect(),
            rho: ParamSignal::constant(rho),
            disturbances: DisturbanceSpec::noise(net, 100 + draw, 1.0),
        };
        let r = simulate(net, &s, &cfg)
            .map_err(|e| e.to_string())
            .and_then(|t| {
                let plain = dissipation_check(&t, &s, delta, None, s.gamma_sq);
                let with_q = dissipation_check(&t, &s, delta, Some(q), s.gamma_sq);
                match (plain, with_q) {
                    (Ok(a), Ok(b)) => Ok((a, b)),
                    (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
                }
            });
        match r {
            Ok((a, b)) => {
                worst_fraction = worst_fraction
                    .min(a.fraction_satisfied)
                    .min(b.fraction_satisfied);
                checked += a.checked + b.checked;
            }
            Err(e) => errors.push(e),
        }
    }
    Verdict {
        id: 6,
        name: "dissipation inequality",
        pass: errors.is_empty() && worst_fraction == 1.0 && checked > 0,
        detail: format!(
            "M = 1, 10 constant-rho runs, {checked} agent-samples checked, min fraction satisfied {worst_fraction}; errors {errors:?}"
        ),
    }
}

struct FixedGains(Arc<Vec<AgentGains>>);

impl GainSource for FixedGains {
    fn gains(&self, _rho: f64) -> Result<Arc<Vec<AgentGains>>, SimError> {
        Ok(Arc::clone(&self.0))
    }
}

/// Observed order of RK4 on a linear lone-agent network against the
/// matrix exponential.
fn rk4_order() -> Vec<f64> {
    let mut net = fixtures::lone_agent();
    net.plant.phi = Nonlinearity::Zero;
    net.plant.r = Mat::zeros(2, 2);
    let l = Mat::from_column_slice(2, 1, &[2.0, 0.5]);
    let a = net.eval_a(0.5).expect("A");
    let c = net.agents[0].c2.clone();
    let mut full = Mat::zeros(4, 4);
    full.view_mut((0, 0), (2, 2)).copy_from(&a);
    full.view_mut((2, 0), (2, 2)).copy_from(&(&l * &c));
    full.view_mut((2, 2), (2, 2)).copy_from(&(&a - &l * &c));
    let x0 = Vector::from_vec(vec![1.0, -0.5]);
    let xi0 = Vector::from_vec(vec![-0.3, 0.8]);
    let z0 = Vector::from_vec(vec![1.0, -0.5, -0.3, 0.8]);
    let horizon = 2.0;
    let exact = (&full * horizon).exp() * z0;
    let gains = FixedGains(Arc::new(vec![AgentGains { l, k: vec![] }]));
    let errs: Vec<f64> = [0.1, 0.05, 0.025, 0.0125]
        .iter()
        .map(|&dt| {
            let cfg = SimConfig {
                dt,
                horizon,
                x0: x0.clone(),
                agents_x0: vec![xi0.clone()],
                rho: ParamSignal::constant(0.5),
                disturbances: DisturbanceSpec::zero(&net),
            };
            let t = simulate(&net, &gains, &cfg).expect("simulate");
            let mut z = t.x.last().unwrap().as_slice().to_vec();
            z.extend_from_slice(t.agents.last().unwrap()[0].as_slice());
            (Vector::from_vec(z) - &exact).norm()
        })
        .collect();
    errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

fn eigen_deviation() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let n = 1 + k % 16;
        let mut m = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        m = (&m + m.transpose()) * 0.5;
        let mine = linalg::sym_eigenvalues(&m);
        let mut theirs = lpvsync_oracle::jacobi_eigs(&linalg::to_rows(&m)).expect("jacobi");
        theirs.sort_by(f64::total_cmp);
        for (a, b) in mine.iter().zip(&theirs) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Largest midpoint-identity deviation, relative to the block norm.
fn affinity_deviation(ex: &ChaosExample) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut worst = 0.0f64;
    let params = ex
        .schedule
        .grid
        .params
        .with_alpha(ex.schedule.grid.alpha[3]);
    let lmi = assemble_lmi(&ex.schedule.network, 17.0, GammaSq::Variable, &params).expect("lmi");
    for _ in 0..20 {
        let u: Vec<f64> = (0..lmi.layout.len)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let v: Vec<f64> = (0..lmi.layout.len)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let mid: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 0.5 * (a + b)).collect();
        let (fu, fv, fm) = (
            lmi.eval_blocks(&u),
            lmi.eval_blocks(&v),
            lmi.eval_blocks(&mid),
        );
        for k in 0..fu.len() {
            let avg = (&fu[k] + &fv[k]) * 0.5;
            let scale = 1.0 + fu[k].amax().max(fv[k].amax());
            worst = worst.max((&fm[k] - avg).amax() / scale);
        }
    }
    worst
}

fn criterion_7(ex: &ChaosExample) -> Verdict {
    let orders = rk4_order();
    let eig = eigen_deviation();
    let affine = affinity_deviation(ex);
    Verdict {
        id: 7,
        name: "numerical infrastructure",
        pass: orders.iter().all(|o| (o - 4.0).abs() <= 0.3) && eig <= 1e-9 && affine <= 1e-12,
        detail: format!(
            "RK4 orders {:?}; eigenvalue deviation {eig:.2e} over 100 matrices; affinity deviation {affine:.2e} (relative to block size)",
            orders
                .iter()
                .map(|o| (o * 1e3).round() / 1e3)
                .collect::<Vec<_>>()
        ),
    }
}

fn criterion_8(ex: &ChaosExample) -> Verdict {
    match ex.schedule.continuity_sweep(10_000) {
        Ok(sweep) => Verdict {
            id: 8,
            name: "gain continuity",
            pass: sweep.worst_ratio <= 1.0,
            detail: format!(
                "{} samples incl. corners, worst jump/allowance {:.4} at rho {:.4}, largest jump {:.3e}",
                sweep.samples, sweep.worst_ratio, sweep.worst_rho, sweep.largest_jump
            ),
        },
        Err(e) => Verdict {
            id: 8,
            name: "gain continuity",
            pass: false,
            detail: e.to_string(),
        },
    }
}

fn criterion_9(ex: &ChaosExample) -> Verdict {
    let s = synthetic_schedule(3);
    let net = &s.network;
    let start = Vector::from_vec(vec![0.7, -0.4]);
    let cfg = SimConfig {
        dt: 1e-3,
        horizon: 10.0,
        x0: start.clone(),
        agents_x0: vec![start; 3],
        rho: ParamSignal {
            source: RhoSource::Sinusoid {
                offset: 0.5,
                amplitude: 0.4,
                omega: 0.5,
            },
            rate_max: Some(0.2),
        },
        disturbances: DisturbanceSpec::zero(net),
    };
    let synthetic_worst = simulate(net, &s, &cfg)
        .map(|t| {
            sync_error_series(&t)
                .total_sq
                .into_iter()
                .fold(0.0, f64::max)
        })
        .unwrap_or(f64::INFINITY);

    let chaos_net = ex.scenario.network(0.0).expect("network");
    let x0 = ex.scenario.initial_reference();
    let chaos_cfg = SimConfig {
        dt: 1e-3,
        horizon: 5.0,
        x0: x0.clone(),
        agents_x0: vec![x0; ex.scenario.agents],
        rho: ex.scenario.rho_signal(0.0).expect("rho"),
        disturbances: DisturbanceSpec::zero(&chaos_net),
    };
    let chaos_worst = simulate(&chaos_net, &ex.schedule, &chaos_cfg)
        .map(|t| {
            sync_error_series(&t)
                .total_sq
                .into_iter()
                .fold(0.0, f64::max)
        })
        .unwrap_or(f64::INFINITY);

    let mut noisy = cfg.clone();
    noisy.agents_x0[1] = Vector::from_vec(vec![0.0, 0.0]);
    noisy.disturbances = DisturbanceSpec::noise(net, 11, 1.0);
    let identical = csv_bytes(net, &s, &noisy) == csv_bytes(net, &s, &noisy);
    Verdict {
        id: 9,
        name: "trivial invariants",
        pass: synthetic_worst < 1e-9 && chaos_worst < 1e-9 && identical,
        detail: format!(
            "identical start max sum|e|^2: synthetic {synthetic_worst:.1e}, chaos {chaos_worst:.1e}; repeated seeded CSVs identical: {identical}"
        ),
    }
}

fn main() -> ExitCode {
    let clock = Instant::now();
    let ex = match run_chaos_example(&[0.0, 1.0], None, 1e-3, 100.0) {
        Ok(ex) => ex,
        Err(e) => {
            println!("FAIL chaos pipeline: {e}");
            return ExitCode::FAILURE;
        }
    };
    let verdicts = vec![
        criterion_1(&ex),
        criterion_2(&ex),
        criterion_3(&ex),
        criterion_4(&ex),
        criterion_5(),
        criterion_6(),
        criterion_7(&ex),
        criterion_8(&ex),
        criterion_9(&ex),
    ];
    println!();
    for v in &verdicts {
        println!(
            "criterion {} [{}] {}: {}",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail
        );
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!(
        "{passed}/{} criteria passed in {:.1} s",
        verdicts.len(),
        clock.elapsed().as_secs_f64()
    );
    if passed == verdicts.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
