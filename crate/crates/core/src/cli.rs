//! Subcommands behind the `nsstab` binary. Each reads one [`RunConfig`],
//! writes its artifacts under `<output>/<name>/` and returns a summary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use serde_json::json;

use crate::artifacts::{
    read_trajectory_csv, trajectory_rows, write_trajectory_csv, ConstantsRecord, Provenance, Report,
};
use crate::cache::{load_or_solve, CacheOutcome};
use crate::config::{FeedbackKind, RunConfig};
use crate::constants::{build_schedule, estimate_c0, ConstantMode, ConstantPack};
use crate::dynamics::{build_trilinear_tensor, simulate, GalerkinModel, NoControl};
use crate::error::{Error, Result};
use crate::experiments::{
    fit_cost_curve, linear_fit, random_state, run_from_offset, run_null_control, run_rapid_stab,
    run_small_time, NullControlConfig, NullControlStatus, RapidStabConfig, SmallTimeConfig,
};
use crate::grid::Region;
use crate::spectral::{assemble_gram, default_lambda_grid, fit_c1, StokesBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Eigen,
    FitC1,
    Constants,
    Simulate,
    NullControl,
    Stabilize,
    CostCurve,
    Report,
}

impl Subcommand {
    pub const ALL: [Subcommand; 8] = [
        Self::Eigen,
        Self::FitC1,
        Self::Constants,
        Self::Simulate,
        Self::NullControl,
        Self::Stabilize,
        Self::CostCurve,
        Self::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Eigen => "eigen",
            Self::FitC1 => "fit-c1",
            Self::Constants => "constants",
            Self::Simulate => "simulate",
            Self::NullControl => "nullcontrol",
            Self::Stabilize => "stabilize",
            Self::CostCurve => "cost-curve",
            Self::Report => "report",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcommand {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::arg("subcommand", format!("unknown subcommand {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

/// Basis, model and constants shared by the compute subcommands.
pub struct Prepared {
    pub basis: StokesBasis,
    pub cache: CacheOutcome,
    pub model: GalerkinModel,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (basis, cache) = load_or_solve(&cfg.cache_path(), &cfg.domain(), cfg.m)?;
    let tensor = build_trilinear_tensor(&basis);
    let gram = assemble_gram(&basis, Region::Control)?;
    let model = GalerkinModel::new(basis.tau.clone(), tensor, gram)?;
    Ok(Prepared { basis, cache, model })
}

/// Fitted pack in certified mode, configured pack in practical mode.
pub fn resolve_constants(cfg: &RunConfig, prep: &Prepared) -> Result<ConstantsRecord> {
    let estimate = || estimate_c0(&prep.model.tensor, &prep.model.tau, cfg.c0_estimate.samples, cfg.c0_estimate.seed);
    match (cfg.mode, &cfg.practical) {
        (ConstantMode::Practical, Some(p)) => {
            let (c0, c0_estimate, c0_src) = match p.c0 {
                Some(c0) => (c0, None, "configured"),
                None => {
                    let e = estimate()?;
                    (e.c0, Some(e), "sampled lower bound")
                }
            };
            Ok(ConstantsRecord {
                pack: ConstantPack::practical(p.c1, p.c2, p.q, c0)?,
                provenance: Provenance {
                    c1: "configured (practical)".into(),
                    c0: c0_src.into(),
                    c2_q_c3: "configured C2 and Q, C3 = Q²/32".into(),
                    c0_estimate,
                },
            })
        }
        (ConstantMode::Practical, None) => Err(Error::Config {
            key: "practical".into(),
            reason: "required when mode = \"practical\"".into(),
        }),
        (ConstantMode::CertifiedFromFit, _) => {
            let fit = fit_c1(&prep.basis, &prep.model.gram, &default_lambda_grid(&prep.basis))?;
            let e = estimate()?;
            Ok(ConstantsRecord {
                pack: ConstantPack::certified(fit.c1, e.c0, &prep.model.tau)?,
                provenance: Provenance {
                    c1: "fitted spectral constant".into(),
                    c0: "sampled lower bound".into(),
                    c2_q_c3: "derived from the inequality chain".into(),
                    c0_estimate: Some(e),
                },
            })
        }
    }
}

fn out_dir(cfg: &RunConfig, cmd: Subcommand) -> Result<PathBuf> {
    let d = cfg.output.join(cmd.name());
    fs::create_dir_all(&d)?;
    Ok(d)
}

fn write_csv_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(header).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:.16e}")))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn finish(mut report: Report, dir: &Path, mut artifacts: Vec<PathBuf>, summary: String) -> Result<Outcome> {
    for a in &artifacts {
        let role = a.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Report::cite(&mut report.outputs, &role, a)?;
    }
    let path = dir.join("report.json");
    report.write(&path)?;
    artifacts.push(path);
    Ok(Outcome { summary, artifacts })
}

fn cite_cache(report: &mut Report, cfg: &RunConfig) -> Result<()> {
    Report::cite(&mut report.inputs, "basis cache", &cfg.cache_path())
}

pub fn run_subcommand(cmd: Subcommand, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    match cmd {
        Subcommand::Eigen => eigen(cfg),
        Subcommand::FitC1 => fit_c1_cmd(cfg),
        Subcommand::Constants => constants_cmd(cfg),
        Subcommand::Simulate => simulate_cmd(cfg),
        Subcommand::NullControl => nullcontrol_cmd(cfg),
        Subcommand::Stabilize => stabilize_cmd(cfg),
        Subcommand::CostCurve => cost_curve_cmd(cfg),
        Subcommand::Report => report_cmd(cfg),
    }
}

fn eigen(cfg: &RunConfig) -> Result<Outcome> {
    let (basis, outcome) = load_or_solve(&cfg.cache_path(), &cfg.domain(), cfg.m)?;
    let dir = out_dir(cfg, Subcommand::Eigen)?;
    let table = dir.join("eigenvalues.csv");
    let rows: Vec<Vec<f64>> = basis.tau.iter().enumerate().map(|(k, t)| vec![(k + 1) as f64, *t]).collect();
    write_csv_table(&table, &["k", "tau"], &rows)?;
    let mut report = Report::new("eigen", cfg)?;
    report.results = json!({ "cache": format!("{outcome:?}"), "tau": basis.tau });
    let summary = format!(
        "cache {:?}: {} modes, tau_1 = {:.6}, tau_M = {:.6}",
        outcome,
        basis.len(),
        basis.tau[0],
        basis.tau_max()
    );
    let artifacts = vec![cfg.cache_path(), table];
    finish(report, &dir, artifacts, summary)
}

fn fit_c1_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let prep = prepare(cfg)?;
    let fit = fit_c1(&prep.basis, &prep.model.gram, &default_lambda_grid(&prep.basis))?;
    let dir = out_dir(cfg, Subcommand::FitC1)?;
    let table = dir.join("c1_table.csv");
    let rows: Vec<Vec<f64>> = fit
        .rows
        .iter()
        .map(|r| vec![r.lambda, r.n_modes as f64, r.lambda_min, r.c1])
        .collect();
    write_csv_table(&table, &["lambda", "n_modes", "lambda_min", "c1"], &rows)?;
    let mut report = Report::new("fit-c1", cfg)?;
    cite_cache(&mut report, cfg)?;
    report.results = serde_json::to_value(&fit)?;
    finish(report, &dir, vec![table], format!("C1 = {:.6} over {} levels", fit.c1, fit.rows.len()))
}

fn constants_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let prep = prepare(cfg)?;
    let rec = resolve_constants(cfg, &prep)?;
    let dir = out_dir(cfg, Subcommand::Constants)?;
    let mut report = Report::new("constants", cfg)?;
    cite_cache(&mut report, cfg)?;
    let summary = serde_json::to_string_pretty(&rec)?;
    report.results = serde_json::to_value(&rec.pack)?;
    report.constants = Some(rec);
    finish(report, &dir, vec![], summary)
}

fn write_traj(dir: &Path, traj: &crate::dynamics::Trajectory) -> Result<PathBuf> {
    let path = dir.join("trajectory.csv");
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &trajectory_rows(traj))?;
    crate::cache::write_atomic(&path, &buf)?;
    Ok(path)
}

fn simulate_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let prep = prepare(cfg)?;
    let rec = resolve_constants(cfg, &prep)?;
    let s = &cfg.simulate;
    let dir = out_dir(cfg, Subcommand::Simulate)?;
    let mut report = Report::new("simulate", cfg)?;
    cite_cache(&mut report, cfg)?;
    let lambda = s.lambda.unwrap_or(prep.model.tau[s.lambda_index - 1]);
    let (traj, summary) = match s.feedback {
        FeedbackKind::None => {
            let x0 = random_state(prep.model.dim(), s.y0_scale, cfg.seed);
            let traj = simulate(&prep.model, &mut NoControl, &x0, 0.0, s.t_end, cfg.dt, s.sample_stride)?;
            let energy_gap = 0.5 * traj.norm_h().last().map_or(0.0, |n| n * n) + traj.dissipation
                - 0.5 * s.y0_scale * s.y0_scale;
            report.results = json!({ "feedback": "none", "y0_norm": s.y0_scale, "energy_balance_residual": energy_gap });
            let summary = format!("free decay, energy balance residual {energy_gap:.3e}");
            (traj, summary)
        }
        kind => {
            let rs = run_rapid_stab(
                &prep.model,
                &rec.pack,
                &RapidStabConfig {
                    lambda,
                    y0_scale: s.y0_scale,
                    cutoff: kind == FeedbackKind::LinearCutoff,
                    horizon: s.t_end,
                    dt: cfg.dt,
                    sample_stride: s.sample_stride,
                    seed: cfg.seed,
                    compare_variants: true,
                },
            )?;
            let summary = format!(
                "lambda = {lambda:.4}: V rate {:?} (target {:.4}), state bound {}, variants identical {:?}",
                rs.v_rate,
                lambda / 2.0,
                rs.state_bound_holds,
                rs.variants_identical
            );
            report.results = serde_json::to_value(&rs)?;
            (rs.trajectory, summary)
        }
    };
    report.constants = Some(rec);
    let csv = write_traj(&dir, &traj)?;
    finish(report, &dir, vec![csv], summary)
}

fn null_config(cfg: &RunConfig, n0: u32, dt: f64) -> NullControlConfig {
    let n = &cfg.nullcontrol;
    NullControlConfig {
        n0,
        n_max: n.n_max,
        eps_zero: cfg.eps_zero,
        y0_norm: n.y0_norm,
        seed: cfg.seed,
        dt,
        cutoff: n.cutoff,
        enforce_bounds: n.enforce_bounds,
    }
}

fn nullcontrol_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let prep = prepare(cfg)?;
    let rec = resolve_constants(cfg, &prep)?;
    let dir = out_dir(cfg, Subcommand::NullControl)?;
    let mut report = Report::new("nullcontrol", cfg)?;
    cite_cache(&mut report, cfg)?;
    let r = run_null_control(&prep.model, &rec.pack, &null_config(cfg, cfg.nullcontrol.n0, cfg.dt))?;
    let summary = match r.status {
        NullControlStatus::BasinBelowFloatPrecision => format!(
            "basin below float precision (ln R = {:.4e}); {} of {} chain inequalities hold",
            r.ln_basin,
            r.log_checks.iter().filter(|c| c.holds).count(),
            r.log_checks.len()
        ),
        NullControlStatus::Simulated => format!(
            "T = {}: final relative norm {:.3e}, cost {:.4e} (bound {:.4e})",
            r.horizon,
            r.final_relative_norm,
            r.cost,
            (rec.pack.c3 / r.horizon).exp() * r.y0_norm
        ),
    };
    let mut artifacts = vec![];
    if r.status == NullControlStatus::Simulated {
        artifacts.push(write_traj(&dir, &r.trajectory)?);
    }
    report.results = serde_json::to_value(&r)?;
    report.constants = Some(rec);
    finish(report, &dir, artifacts, summary)
}

fn stabilize_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let prep = prepare(cfg)?;
    let rec = resolve_constants(cfg, &prep)?;
    let st = &cfg.stabilize;
    let dir = out_dir(cfg, Subcommand::Stabilize)?;
    let mut report = Report::new("stabilize", cfg)?;
    cite_cache(&mut report, cfg)?;
    let scfg = SmallTimeConfig {
        n0: st.n0,
        n_max: st.n_max,
        s_offsets: st.s_offsets.clone(),
        periods: st.periods,
        eps_zero: cfg.eps_zero,
        y0_norm: st.y0_norm,
        eta_grid: st.eta_grid.clone(),
        seed: cfg.seed,
        dt: cfg.dt,
    };
    let probe = run_small_time(&prep.model, &rec.pack, &scfg)?;
    let schedule = build_schedule(st.n0, &rec.pack, &prep.model.tau, st.n_max, rec.pack.mode == ConstantMode::Practical)?;
    let x0 = random_state(prep.model.dim(), probe.y0_norm, cfg.seed);
    let traj = run_from_offset(&prep.model, &schedule, &x0, 0.0, st.periods, cfg.dt)?;
    let csv = write_traj(&dir, &traj)?;
    let delta = dir.join("delta.csv");
    let rows: Vec<Vec<f64>> = probe.eta.iter().zip(&probe.delta).map(|(e, d)| vec![*e, *d]).collect();
    write_csv_table(&delta, &["eta", "delta"], &rows)?;
    let worst = probe.runs.iter().map(|r| r.two_t_relative).fold(0.0, f64::max);
    let summary = format!(
        "T = {}: worst 2T relative norm {worst:.3e} over {} offsets, Lambda_T >= {:.3e}",
        probe.horizon,
        probe.runs.len(),
        probe.lambda_t_calibrated
    );
    report.results = serde_json::to_value(&probe)?;
    report.constants = Some(rec);
    finish(report, &dir, vec![csv, delta], summary)
}

fn cost_curve_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let prep = prepare(cfg)?;
    let rec = resolve_constants(cfg, &prep)?;
    let dir = out_dir(cfg, Subcommand::CostCurve)?;
    let mut report = Report::new("cost-curve", cfg)?;
    cite_cache(&mut report, cfg)?;
    let reports = cfg
        .cost_curve
        .n0
        .iter()
        .map(|&n0| {
            let dt = 2f64.powi(-(n0 as i32)) / cfg.cost_curve.steps as f64;
            run_null_control(&prep.model, &rec.pack, &null_config(cfg, n0, dt))
        })
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_cost_curve(&reports)?;
    let table = dir.join("cost_curve.csv");
    let rows: Vec<Vec<f64>> = fit.points.iter().map(|(x, y)| vec![1.0 / x, *x, *y]).collect();
    write_csv_table(&table, &["T", "inv_T", "ln_cost_over_y0"], &rows)?;
    let summary = format!(
        "fitted exponent {:.4} against C3 = {:.4} (ratio {:.3})",
        fit.slope,
        rec.pack.c3,
        fit.slope / rec.pack.c3
    );
    report.results = json!({ "fit": fit, "c3": rec.pack.c3, "runs": reports });
    report.constants = Some(rec);
    finish(report, &dir, vec![table], summary)
}

fn report_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let source = cfg.output.join(&cfg.report.source);
    let csv_path = source.join("trajectory.csv");
    let rows = read_trajectory_csv(fs::File::open(&csv_path)?)?;
    if rows.is_empty() {
        return Err(Error::Format(format!("{} has no samples", csv_path.display())));
    }
    let dir = out_dir(cfg, Subcommand::Report)?;
    let mut report = Report::new("report", cfg)?;
    Report::cite(&mut report.inputs, "trajectory", &csv_path)?;
    let consumed = report.inputs[0].sha256.clone();
    let recorded = Report::read(&source.join("report.json"))
        .ok()
        .and_then(|r| r.outputs.into_iter().find(|o| o.role == "trajectory.csv"))
        .map(|o| o.sha256);
    if let Some(h) = &recorded {
        if *h != consumed {
            log::warn!("trajectory hash {consumed} differs from the one its producer recorded ({h})");
        }
    }
    let (ts, ln_norm): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.norm_h > 0.0)
        .map(|r| (r.t, r.norm_h.ln()))
        .unzip();
    let rate = linear_fit(&ts, &ln_norm).ok().map(|(s, _)| -s);
    let sup_f = rows.iter().map(|r| r.norm_f).fold(0.0, f64::max);
    let first = rows[0];
    let last = *rows.last().unwrap();
    let text = format!(
        "source: {}\ntrajectory sha256: {consumed}\nsamples: {}\nt: {:.6e} .. {:.6e}\n||y|| first: {:.6e}\n||y|| last: {:.6e}\nfitted decay rate of ||y||: {}\nsup ||f|| at samples: {:.6e}\n",
        cfg.report.source,
        rows.len(),
        first.t,
        last.t,
        first.norm_h,
        last.norm_h,
        rate.map_or("undefined".into(), |r| format!("{r:.6e}")),
        sup_f,
    );
    let summary_path = dir.join("summary.txt");
    fs::write(&summary_path, &text)?;
    let plot = dir.join("plot.csv");
    let lg = |v: f64| if v > 0.0 { v.log10() } else { f64::NEG_INFINITY };
    let prow: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.t, lg(r.norm_h), lg(r.v), lg(r.norm_f)]).collect();
    write_csv_table(&plot, &["t", "log10_norm_H", "log10_V", "log10_norm_f"], &prow)?;
    report.results = json!({
        "source": cfg.report.source,
        "trajectory_sha256": consumed,
        "producer_recorded_sha256": recorded,
        "samples": rows.len(),
        "decay_rate": rate,
        "sup_norm_f": sup_f,
    });
    finish(report, &dir, vec![summary_path, plot], text)
}
