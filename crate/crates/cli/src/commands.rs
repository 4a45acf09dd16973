use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lpvsync::archive::{ArchiveError, ScheduleArchive};
use lpvsync::chaos::{run_chaos_example, ChaosError, ChaosScenario};
use lpvsync::linalg::Mat;
use lpvsync::lmi::LmiError;
use lpvsync::model::NetworkModel;
use lpvsync::scheduling::{
    build_grid, synthesize_schedule, ContinuitySweep, GainSchedule, RateCheck, ScheduleError,
    SegmentCheck,
};
use lpvsync::simulation::{
    dissipation_check, hinf_ratio, simulate, sync_error_series, HinfMode, SimError, SimulationTrace,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, RunConfig};

pub const OUT_ROOT_ENV: &str = "LPVSYNC_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Infeasible(_) | CliError::VerificationFailed(_) => 2,
            CliError::Archive(ArchiveError::IncompatibleArchive { .. }) => 2,
            CliError::Archive(_) | CliError::Other(_) => 1,
        }
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::PointFailed { .. }
            | ScheduleError::Lmi(LmiError::Infeasible { .. })
            | ScheduleError::Lmi(LmiError::NoUpperBound(_)) => CliError::Infeasible(e.to_string()),
            ScheduleError::CoveringFailure(_)
            | ScheduleError::InvalidGrid(_)
            | ScheduleError::Model(_) => CliError::Config(ConfigError::Invalid(e.to_string())),
            e => CliError::Other(e.into()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Other(e.into())
    }
}

fn io<T>(r: std::io::Result<T>, what: &Path) -> Result<T, CliError> {
    r.map_err(|e| CliError::Other(anyhow::anyhow!("{}: {e}", what.display())))
}

/// `--out`, then the config's output dir, then `$LPVSYNC_OUT/<command>`,
/// then `lpvsync-runs/<command>`.
pub fn resolve_out(flag: Option<&Path>, cfg: Option<&RunConfig>, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(dir) = cfg.and_then(|c| c.output.dir.as_ref()) {
        return PathBuf::from(dir);
    }
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("lpvsync-runs"));
    root.join(command)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let path = dir.join(name);
    io(
        fs::write(
            &path,
            serde_json::to_string_pretty(value).expect("serializable") + "\n",
        ),
        &path,
    )
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: Option<&RunConfig>,
    extra: serde_json::Value,
) -> Result<(), CliError> {
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_hash": cfg.map(RunConfig::hash),
        "config": cfg,
        "results": extra,
    });
    write_json(dir, "manifest.json", &manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisReport {
    pub gamma_sq: f64,
    pub grid: Vec<GridRow>,
    pub rate_bound: f64,
    pub rate: Option<RateCheck>,
    pub covering_problems: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub index: usize,
    pub rho: f64,
    pub alpha: f64,
    pub gamma_sq: f64,
    pub margin: f64,
}

fn synthesis_report(s: &GainSchedule, rho_rate: Option<f64>) -> Result<SynthesisReport, CliError> {
    let q = &s.grid.params.q;
    Ok(SynthesisReport {
        gamma_sq: s.gamma_sq,
        grid: s
            .certificates
            .iter()
            .enumerate()
            .map(|(k, c)| GridRow {
                index: k + 1,
                rho: c.rho,
                alpha: s.grid.alpha[k],
                gamma_sq: s.point_gamma_sq[k],
                margin: c.margin,
            })
            .collect(),
        rate_bound: s.rate_bound(q),
        rate: rho_rate.map(|r| s.check_rate_condition(q, r, 0.5)),
        covering_problems: s
            .grid
            .covering_problems(&s.network)
            .map_err(|e| CliError::Other(e.into()))?,
    })
}

fn print_synthesis(report: &SynthesisReport) {
    println!("{:>4} {:>12} {:>10} {:>14}", "k", "rho", "alpha", "gamma^2");
    for r in &report.grid {
        println!(
            "{:>4} {:>12.6} {:>10.4} {:>14.6}",
            r.index, r.rho, r.alpha, r.gamma_sq
        );
    }
    println!("gamma^2 = {}", report.gamma_sq);
    println!("rate bound = {}", report.rate_bound);
    if let Some(r) = &report.rate {
        println!(
            "declared |rho'| <= {}: weak {}, strong {}",
            r.rho_dot_max,
            verdict(r.weak_ok),
            verdict(r.strong_ok)
        );
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "fails"
    }
}

pub fn synthesize_from(cfg: &RunConfig) -> Result<GainSchedule, CliError> {
    let net = cfg.design_network()?;
    let params = cfg.design_params(&net)?;
    let grid = build_grid(&net, cfg.grid_policy(), cfg.synthesis.overlap, params)?;
    let solver = cfg.solver();
    Ok(synthesize_schedule(
        &net,
        &grid,
        cfg.synthesis_mode(),
        solver.as_ref(),
    )?)
}

pub fn cmd_synthesize(cfg: &RunConfig, out: &Path) -> Result<SynthesisReport, CliError> {
    let schedule = synthesize_from(cfg)?;
    io(fs::create_dir_all(out), out)?;
    let archive = ScheduleArchive::from_schedule(&schedule);
    archive.save(&out.join("schedule.json"))?;
    let report = synthesis_report(&schedule, cfg.synthesis.rho_rate)?;
    write_json(out, "report.json", &report)?;
    write_manifest(
        out,
        "synthesize",
        Some(cfg),
        json!({ "network_hash": archive.network_hash, "gamma_sq": schedule.gamma_sq }),
    )?;
    print_synthesis(&report);
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SimMetrics {
    pub gamma_sq: f64,
    pub hinf_weak: Option<f64>,
    pub hinf_strong: Option<f64>,
    pub final_errors: Vec<f64>,
    pub peak_errors: Vec<f64>,
    pub max_rho_rate: f64,
    pub rate: RateCheck,
    pub dissipation_fraction: f64,
    pub dissipation_worst: f64,
}

pub fn trace_metrics(
    schedule: &GainSchedule,
    trace: &SimulationTrace,
    eta: Option<f64>,
) -> Result<SimMetrics, CliError> {
    let params = &schedule.grid.params;
    let errors = sync_error_series(trace);
    let ratio = |q: Option<&[Mat]>, mode| match hinf_ratio(trace, schedule, q, mode) {
        Ok(r) => Ok(Some(r.ratio)),
        Err(SimError::ZeroDenominator) => Ok(None),
        Err(e) => Err(e),
    };
    let hinf_weak = ratio(None, HinfMode::Weak)?;
    let hinf_strong = match eta {
        Some(eta) => {
            let q: Vec<Mat> = params.q.iter().map(|q| q * (1.0 - eta)).collect();
            ratio(Some(&q), HinfMode::Strong)?
        }
        None => None,
    };
    let diss = dissipation_check(trace, schedule, &params.delta, None, schedule.gamma_sq)?;
    Ok(SimMetrics {
        gamma_sq: schedule.gamma_sq,
        hinf_weak,
        hinf_strong,
        final_errors: errors
            .per_agent
            .iter()
            .map(|e| *e.last().unwrap_or(&0.0))
            .collect(),
        peak_errors: errors
            .per_agent
            .iter()
            .map(|e| e.iter().copied().fold(0.0, f64::max))
            .collect(),
        max_rho_rate: trace.max_rho_rate,
        rate: schedule.check_rate_condition(&params.q, trace.max_rho_rate, eta.unwrap_or(0.5)),
        dissipation_fraction: diss.fraction_satisfied,
        dissipation_worst: diss.worst_violation,
    })
}

/// Python script that draws `||x - x_i||` against time from `csv_name`.
pub fn plot_script(csv_name: &str, title: &str) -> String {
    format!(
        r#"# Usage: python3 plot_errors.py  (needs matplotlib)
import csv
import matplotlib.pyplot as plt

with open("{csv_name}") as f:
    rows = list(csv.DictReader(f))
t = [float(r["t"]) for r in rows]
cols = [c for c in rows[0] if c.startswith("err")]
for c in cols:
    plt.plot(t, [float(r[c]) for r in rows], label="agent " + c[3:])
plt.xlabel("t")
plt.ylabel("||x - x_i||")
plt.title("{title}")
plt.legend()
plt.savefig("{csv_name}".replace(".csv", ".png"), dpi=150)
plt.show()
"#
    )
}

fn write_trace(
    out: &Path,
    name: &str,
    net: &NetworkModel,
    trace: &SimulationTrace,
    title: &str,
    plot: bool,
) -> Result<(), CliError> {
    let path = out.join(name);
    let file = io(fs::File::create(&path), &path)?;
    io(trace.write_csv(&net.graph, BufWriter::new(file)), &path)?;
    if plot {
        let script = out.join(name.replace(".csv", ".py").replace("trace", "plot"));
        io(fs::write(&script, plot_script(name, title)), &script)?;
    }
    Ok(())
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    archive_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<SimMetrics, CliError> {
    let archive = ScheduleArchive::load(archive_path)?;
    archive.ensure_compatible(&cfg.design_network()?)?;
    let schedule = archive.into_schedule()?;
    let sim_net = cfg.simulation_network()?;
    let sim = cfg.sim_config(seed)?;
    let trace = simulate(&sim_net, &schedule, &sim)?;
    let eta = cfg.simulation.as_ref().and_then(|s| s.eta);
    let metrics = trace_metrics(&schedule, &trace, eta)?;
    io(fs::create_dir_all(out), out)?;
    if cfg.output.csv {
        write_trace(
            out,
            "trace.csv",
            &sim_net,
            &trace,
            "synchronization errors",
            cfg.output.plot_script,
        )?;
    }
    write_json(out, "metrics.json", &metrics)?;
    write_manifest(
        out,
        "simulate",
        Some(cfg),
        json!({ "seed": seed, "network_hash": schedule.network.content_hash(), "metrics": metrics }),
    )?;
    println!("final errors {:?}", metrics.final_errors);
    if let Some(r) = metrics.hinf_weak {
        println!(
            "H-infinity ratio (weak) {r} vs gamma^2 {}",
            metrics.gamma_sq
        );
    }
    println!(
        "sup |rho'| {} vs bound {}: {}",
        metrics.max_rho_rate,
        metrics.rate.bound,
        verdict(metrics.rate.weak_ok)
    );
    Ok(metrics)
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub certificates_ok: bool,
    pub certificate_max_eig: Vec<f64>,
    pub interpolation_ok: bool,
    pub segments: Vec<SegmentCheck>,
    pub continuity_ok: bool,
    /// `None` when gains could not be formed (for instance a singular `X`).
    pub continuity: Option<ContinuitySweep>,
    pub continuity_error: Option<String>,
    pub rate_bound: f64,
    pub rate: Option<RateCheck>,
    pub passed: bool,
}

pub fn verify_schedule(
    schedule: &GainSchedule,
    rho_rate: Option<f64>,
) -> Result<VerifyReport, CliError> {
    let certificate_max_eig = schedule
        .certificates
        .iter()
        .map(|c| c.reevaluate(&schedule.network, &schedule.grid.params, schedule.gamma_sq))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Other(e.into()))?;
    let segments = schedule.verify_interpolation(101)?;
    let (continuity, continuity_error) = match schedule.continuity_sweep(10_000) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let certificates_ok = certificate_max_eig.iter().all(|e| *e < 0.0);
    let interpolation_ok = segments.iter().all(|s| s.failures == 0);
    let continuity_ok = continuity.is_some_and(|c| c.worst_ratio <= 1.0);
    let q = &schedule.grid.params.q;
    Ok(VerifyReport {
        certificates_ok,
        certificate_max_eig,
        interpolation_ok,
        segments,
        continuity_ok,
        continuity,
        continuity_error,
        rate_bound: schedule.rate_bound(q),
        rate: rho_rate.map(|r| schedule.check_rate_condition(q, r, 0.5)),
        passed: certificates_ok && interpolation_ok && continuity_ok,
    })
}

/// Certificate, interpolation and continuity checks decide the exit code;
/// the rate verdict is reported only.
pub fn cmd_verify(
    archive_path: &Path,
    out: Option<&Path>,
    rho_rate: Option<f64>,
) -> Result<VerifyReport, CliError> {
    let schedule = ScheduleArchive::load(archive_path)?.into_schedule()?;
    let report = verify_schedule(&schedule, rho_rate)?;
    if let Some(out) = out {
        io(fs::create_dir_all(out), out)?;
        write_json(out, "verify.json", &report)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("serializable")
    );
    if !report.passed {
        let bad: Vec<String> = report
            .segments
            .iter()
            .filter(|s| s.failures > 0)
            .map(|s| format!("segment {} (worst rho {})", s.segment + 1, s.worst_rho))
            .collect();
        return Err(CliError::VerificationFailed(if bad.is_empty() {
            "certificate or continuity check failed".into()
        } else {
            format!("reduced LMI violated in {}", bad.join(", "))
        }));
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ChaosOptions {
    pub thetas: Vec<f64>,
    pub seed: Option<u64>,
    pub horizon: Option<f64>,
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChaosRun {
    pub theta: f64,
    pub final_errors: Vec<f64>,
    pub peak_errors: Vec<f64>,
    pub max_rho_rate: f64,
    pub rho_range: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct ChaosReport {
    pub draw_seed: u64,
    pub draw_attempt: u32,
    pub reported_gamma_sq: f64,
    pub synthesis: SynthesisReport,
    pub observed_rate: RateCheck,
    pub runs: Vec<ChaosRun>,
}

pub fn cmd_example_chaos(opts: &ChaosOptions, out: &Path) -> Result<ChaosReport, CliError> {
    let horizon = opts.horizon.unwrap_or(ChaosScenario::bundled().horizon);
    let example =
        run_chaos_example(&opts.thetas, opts.seed, opts.dt, horizon).map_err(|e| match e {
            ChaosError::NoDraw { .. } => CliError::Infeasible(e.to_string()),
            ChaosError::ThetaOutOfRange(_) => CliError::Config(ConfigError::Invalid(e.to_string())),
            ChaosError::Schedule(e) => e.into(),
            e => CliError::Other(e.into()),
        })?;
    let sc = &example.scenario;
    let synthesis = synthesis_report(&example.schedule, Some(sc.reported_rate))?;
    print_synthesis(&synthesis);
    io(fs::create_dir_all(out), out)?;
    ScheduleArchive::from_schedule(&example.schedule).save(&out.join("schedule.json"))?;
    let mut runs = Vec::new();
    for run in &example.runs {
        let name = format!("trace_theta{}.csv", run.theta);
        let net = sc
            .network(run.theta)
            .map_err(|e| CliError::Other(e.into()))?;
        write_trace(
            out,
            &name,
            &net,
            &run.trace,
            &format!("theta = {}", run.theta),
            true,
        )?;
        println!(
            "theta {}: final errors {:?}, sup |rho'| {:.1}, rho in [{:.2}, {:.2}]",
            run.theta, run.final_errors, run.trace.max_rho_rate, run.rho_range.0, run.rho_range.1
        );
        runs.push(ChaosRun {
            theta: run.theta,
            final_errors: run.final_errors.clone(),
            peak_errors: run.peak_errors.clone(),
            max_rho_rate: run.trace.max_rho_rate,
            rho_range: run.rho_range,
        });
    }
    println!(
        "observed sup |rho'| {:.1} vs rate bound {}: {}",
        example.rate.rho_dot_max,
        example.rate.bound,
        verdict(example.rate.weak_ok)
    );
    let report = ChaosReport {
        draw_seed: sc.draw.seed,
        draw_attempt: sc.draw.attempt,
        reported_gamma_sq: sc.reported_gamma_sq,
        synthesis,
        observed_rate: example.rate,
        runs,
    };
    write_json(out, "report.json", &report)?;
    write_manifest(
        out,
        "example-chaos",
        None,
        json!({ "thetas": opts.thetas, "seed": sc.draw.seed, "attempt": sc.draw.attempt, "dt": opts.dt, "horizon": horizon, "gamma_sq": example.schedule.gamma_sq }),
    )?;
    Ok(report)
}
