//! Closed-loop experiments: rapid stabilization, null control along the
//! dyadic schedule, T-periodic small-time stabilization and the cost curve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{
    build_schedule, feedback_params, l2, ConstantMode, ConstantPack,
    FeedbackParams, Schedule,
};
use crate::dynamics::{simulate, GalerkinModel, LinearFeedback, NoControl, ScheduledFeedback, Trajectory};
use crate::error::{Error, Result};

/// Number of low modes that carry random initial data.
pub const RANDOM_MODES: usize = 8;

/// Isotropic random state on the first `min(8, m)` modes with the given norm.
pub fn random_state(m: usize, norm: f64, seed: u64) -> Vec<f64> {
    let mut x = vec![0.0; m];
    if norm == 0.0 || m == 0 {
        return x;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = RANDOM_MODES.min(m);
    loop {
        for v in x.iter_mut().take(k) {
            *v = StandardNormal.sample(&mut rng);
        }
        let n = l2(&x);
        if n > 0.0 {
            x.iter_mut().for_each(|v| *v *= norm / n);
            return x;
        }
    }
}

/// Least-squares line through `(xs, ys)`: returns `(slope, intercept)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return Err(Error::InsufficientPoints(format!("{} points", xs.len())));
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientPoints("abscissae coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Decay rate `−d ln s / dt` fitted after dropping the first 5% of samples.
fn fitted_rate(t: &[f64], s: &[f64]) -> Option<f64> {
    let skip = t.len() / 20;
    let (xs, ys): (Vec<f64>, Vec<f64>) = t[skip..]
        .iter()
        .zip(&s[skip..])
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(t, v)| (*t, v.ln()))
        .unzip();
    linear_fit(&xs, &ys).ok().map(|(slope, _)| -slope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RapidStabConfig {
    pub lambda: f64,
    /// `‖y0‖ = y0_scale · r_λ` (linear) or `y0_scale · r_λ²` (cutoff).
    pub y0_scale: f64,
    pub cutoff: bool,
    pub horizon: f64,
    pub dt: f64,
    pub sample_stride: usize,
    pub seed: u64,
    /// Also run the other feedback variant and compare trajectories.
    pub compare_variants: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RapidStabReport {
    pub lambda: f64,
    pub params: FeedbackParams,
    pub y0_norm: f64,
    pub basin_radius: f64,
    /// Fitted decay rate of `‖y‖`; `None` when undefined (zero data).
    pub norm_rate: Option<f64>,
    /// Fitted decay rate of `V`.
    pub v_rate: Option<f64>,
    /// `‖y(t)‖ ≤ C1 e^{C1√λ} e^{−λt/4} ‖y0‖` at every sample.
    pub state_bound_holds: bool,
    pub state_bound_worst_ratio: f64,
    /// `‖F_λ y(t)‖ ≤ C2 e^{C2√λ} e^{−λt/4} ‖y0‖` at every sample.
    pub control_bound_holds: bool,
    pub control_bound_worst_ratio: f64,
    /// `V(t_{i+1}) ≤ e^{−λ/2 Δt} V(t_i)` between consecutive samples.
    pub v_decay_holds: bool,
    /// `max_t ‖F_λ y(t)‖ / r_λ`; at most one means the cutoff never acts.
    pub max_feedback_over_r: f64,
    /// Bitwise equality of linear and cutoff trajectories when compared.
    pub variants_identical: Option<bool>,
    pub samples: usize,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

pub fn run_rapid_stab(
    model: &GalerkinModel,
    pack: &ConstantPack,
    cfg: &RapidStabConfig,
) -> Result<RapidStabReport> {
    let params = feedback_params(cfg.lambda, pack, &model.tau)?;
    let basin_radius = if cfg.cutoff { params.r * params.r } else { params.r };
    let y0_norm = cfg.y0_scale * basin_radius;
    let x0 = random_state(model.dim(), y0_norm, cfg.seed);
    let run = |cutoff: bool| {
        let mut ctl = LinearFeedback {
            params: params.clone(),
            cutoff,
        };
        simulate(model, &mut ctl, &x0, 0.0, cfg.horizon, cfg.dt, cfg.sample_stride)
    };
    let traj = run(cfg.cutoff)?;
    let variants_identical = if cfg.compare_variants {
        let other = run(!cfg.cutoff)?;
        Some(other.x == traj.x)
    } else {
        None
    };

    let s = cfg.lambda.sqrt();
    let ln_pre_state = pack.c1.ln() + pack.c1 * s;
    let ln_pre_control = pack.c2.ln() + pack.c2 * s;
    let norms = traj.norm_h();
    let mut state_worst = 0.0f64;
    let mut control_worst = 0.0f64;
    let mut linear_norm_f = vec![0.0; model.dim()];
    let mut max_f = 0.0f64;
    for (i, &t) in traj.t.iter().enumerate() {
        if y0_norm == 0.0 {
            break;
        }
        let decay = -cfg.lambda * t / 4.0;
        state_worst = state_worst.max(norms[i] / (y0_norm * (ln_pre_state + decay).exp()));
        crate::constants::apply_f_lambda(&traj.x[i], &params, &mut linear_norm_f);
        let nf = l2(&linear_norm_f);
        max_f = max_f.max(nf);
        control_worst = control_worst.max(nf / (y0_norm * (ln_pre_control + decay).exp()));
    }
    let v_decay_holds = traj.v.windows(2).zip(traj.t.windows(2)).all(|(v, t)| {
        v[1] <= v[0] * (-cfg.lambda / 2.0 * (t[1] - t[0])).exp() * (1.0 + 1e-9)
    });
    let (norm_rate, v_rate) = if y0_norm == 0.0 {
        (None, None)
    } else {
        (fitted_rate(&traj.t, &norms), fitted_rate(&traj.t, &traj.v))
    };
    Ok(RapidStabReport {
        lambda: cfg.lambda,
        params: params.clone(),
        y0_norm,
        basin_radius,
        norm_rate,
        v_rate,
        state_bound_holds: state_worst <= 1.0,
        state_bound_worst_ratio: state_worst,
        control_bound_holds: control_worst <= 1.0,
        control_bound_worst_ratio: control_worst,
        v_decay_holds,
        max_feedback_over_r: max_f / params.r,
        variants_identical,
        samples: traj.len(),
        trajectory: traj,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullControlConfig {
    pub n0: u32,
    pub n_max: usize,
    pub eps_zero: f64,
    /// Initial norm; `None` uses the basin of the active mode.
    pub y0_norm: Option<f64>,
    pub seed: u64,
    pub dt: f64,
    pub cutoff: bool,
    /// Turn bound violations into errors.
    pub enforce_bounds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullControlStatus {
    Simulated,
    /// The admissible initial data are below `f64` resolution; only the
    /// inequality chain is checked.
    BasinBelowFloatPrecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBound {
    pub n: usize,
    pub start: f64,
    pub lambda: f64,
    pub clamped: bool,
    pub n_modes: usize,
    pub norm_at_start: f64,
    /// Product-form state bound with the thresholds actually used.
    pub state_bound: f64,
    /// Closed-form state bound `exp(−(7Q²/64) 2^{n0}(2^n − 1)) ‖y0‖`.
    pub state_bound_closed: f64,
    pub sup_control: f64,
    /// `C2 e^{C2√λ_n} ‖y(T_n)‖`.
    pub control_bound: f64,
    /// `exp(−(5Q²/64) 2^{n0+n−1}) ‖y0‖` for `n ≥ 1`.
    pub control_bound_closed: Option<f64>,
    pub samples: usize,
}

impl IntervalBound {
    fn first_violation(&self) -> Option<(String, f64, f64)> {
        let tol = 1.0 + 1e-9;
        if self.norm_at_start > self.state_bound * tol {
            return Some(("state product bound".into(), self.norm_at_start, self.state_bound));
        }
        if self.norm_at_start > self.state_bound_closed * tol {
            return Some(("state closed bound".into(), self.norm_at_start, self.state_bound_closed));
        }
        if self.sup_control > self.control_bound * tol {
            return Some(("control bound".into(), self.sup_control, self.control_bound));
        }
        if let Some(c) = self.control_bound_closed {
            if self.sup_control > c * tol {
                return Some(("control closed bound".into(), self.sup_control, c));
            }
        }
        None
    }
}

/// One logarithmic inequality `lhs ≤ rhs` of the certified chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogCheck {
    pub name: String,
    pub n: usize,
    pub ln_lhs: f64,
    pub ln_rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullControlReport {
    pub status: NullControlStatus,
    pub horizon: f64,
    pub n0: u32,
    pub n_max: usize,
    /// `ln` of the admissible initial norm for the active mode.
    pub ln_basin: f64,
    pub y0_norm: f64,
    pub cost: f64,
    pub final_relative_norm: f64,
    /// Same initial state without control, for comparison.
    pub free_decay_relative_norm: f64,
    pub null_reached_at: Option<f64>,
    /// `‖y(T_n)‖` for `n = 0..=n_max+1`.
    pub interval_norms: Vec<f64>,
    pub bounds: Vec<IntervalBound>,
    pub log_checks: Vec<LogCheck>,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

/// Inequality chain behind the null-control construction, in log space.
pub fn certified_log_checks(pack: &ConstantPack, n0: u32, n_max: usize, cutoff: bool) -> Vec<LogCheck> {
    let q2 = pack.q * pack.q;
    let ln_basin = if cutoff { -2.0 * pack.c3 } else { -pack.c3 } * 2f64.powi(n0 as i32);
    let mut out = Vec::new();
    let mut push = |name: &str, n: usize, l: f64, r: f64| {
        out.push(LogCheck {
            name: name.into(),
            n,
            ln_lhs: l,
            ln_rhs: r,
            holds: l <= r,
        });
    };
    for n in 0..=n_max {
        let p = 2f64.powi((n0 as usize + n) as i32);
        let sqrt_l = pack.q * p;
        push("C1 growth below Q²/64 rate", n, pack.c1.ln() + pack.c1 * sqrt_l, q2 / 64.0 * p);
        let ln_r = -(pack.c2.ln() + pack.c2 * sqrt_l);
        let scale = if cutoff { 2.0 } else { 1.0 };
        let target = -scale * q2 / 64.0 * p;
        push("schedule radius vs r", n, target, scale * ln_r);
        let reach = ln_basin - 7.0 * q2 / 64.0 * 2f64.powi(n0 as i32) * (2f64.powi(n as i32) - 1.0);
        push("basin reaches interval", n, reach, target);
    }
    let p0 = 2f64.powi(n0 as i32);
    push("first-interval cost", 0, pack.c2.ln() + pack.c2 * pack.q * p0, pack.c3 * p0);
    out
}

/// Admissible `ln ‖y0‖`: `−C3/T`, or `−2C3/T` with the cutoff.
fn basin(pack: &ConstantPack, horizon: f64, cutoff: bool) -> f64 {
    let c = if cutoff { 2.0 * pack.c3 } else { pack.c3 };
    -c / horizon
}

pub fn run_null_control(
    model: &GalerkinModel,
    pack: &ConstantPack,
    cfg: &NullControlConfig,
) -> Result<NullControlReport> {
    if !(cfg.eps_zero > 0.0 && cfg.eps_zero < 1.0) {
        return Err(Error::arg("eps_zero", format!("must lie in (0, 1), got {}", cfg.eps_zero)));
    }
    let horizon = 2f64.powi(-(cfg.n0 as i32));
    let ln_basin = basin(pack, horizon, cfg.cutoff);
    let log_checks = certified_log_checks(pack, cfg.n0, cfg.n_max, cfg.cutoff);
    let certified = pack.mode == ConstantMode::CertifiedFromFit;
    if certified && ln_basin < f64::EPSILON.ln() {
        log::info!("basin below float precision: ln R = {ln_basin:.6e}");
        if cfg.enforce_bounds {
            if let Some(c) = log_checks.iter().find(|c| !c.holds) {
                return Err(Error::BoundViolated {
                    n: c.n,
                    bound: c.name.clone(),
                    measured: c.ln_lhs,
                    allowed: c.ln_rhs,
                });
            }
        }
        return Ok(NullControlReport {
            status: NullControlStatus::BasinBelowFloatPrecision,
            horizon,
            n0: cfg.n0,
            n_max: cfg.n_max,
            ln_basin,
            y0_norm: 0.0,
            cost: 0.0,
            final_relative_norm: 0.0,
            free_decay_relative_norm: 0.0,
            null_reached_at: None,
            interval_norms: Vec::new(),
            bounds: Vec::new(),
            log_checks,
            trajectory: Trajectory::default(),
        });
    }

    let schedule = build_schedule(cfg.n0, pack, &model.tau, cfg.n_max, !certified)?;
    let y0_norm = cfg.y0_norm.unwrap_or_else(|| ln_basin.exp());
    let x0 = random_state(model.dim(), y0_norm, cfg.seed);
    check_dyadic_dt(cfg.dt, &schedule)?;

    let threshold = cfg.eps_zero * y0_norm;
    let mut ctl = ScheduledFeedback::new(schedule.clone(), 0.0, cfg.cutoff, false).with_null_latch(threshold);
    let traj = simulate(model, &mut ctl, &x0, 0.0, horizon, cfg.dt, 1)?;
    let null_reached_at = if y0_norm == 0.0 { Some(0.0) } else { ctl.null_reached_at() };
    let free = simulate(model, &mut NoControl, &x0, 0.0, horizon, cfg.dt, usize::MAX)?;

    let norms = traj.norm_h();
    let interval_norms: Vec<f64> = schedule
        .starts
        .iter()
        .map(|&s| norms[sample_index(&traj, s)])
        .collect();
    let rel = |v: f64| if y0_norm > 0.0 { v / y0_norm } else { 0.0 };
    let bounds = interval_bounds(pack, &schedule, &traj, &interval_norms, y0_norm);
    if cfg.enforce_bounds {
        for b in &bounds {
            if let Some((bound, measured, allowed)) = b.first_violation() {
                return Err(Error::BoundViolated {
                    n: b.n,
                    bound,
                    measured,
                    allowed,
                });
            }
        }
    }
    Ok(NullControlReport {
        status: NullControlStatus::Simulated,
        horizon,
        n0: cfg.n0,
        n_max: cfg.n_max,
        ln_basin,
        y0_norm,
        cost: traj.sup_control,
        final_relative_norm: rel(*norms.last().unwrap_or(&0.0)),
        free_decay_relative_norm: rel(l2(free.x.last().map(Vec::as_slice).unwrap_or(&[]))),
        null_reached_at,
        interval_norms,
        bounds,
        log_checks,
        trajectory: traj,
    })
}

fn check_dyadic_dt(dt: f64, schedule: &Schedule) -> Result<()> {
    let shortest = 2f64.powi(-((schedule.n0 as usize + schedule.n_max + 1) as i32));
    if dt > shortest / 8.0 {
        return Err(Error::arg(
            "dt",
            format!("need at least 8 steps on the shortest interval {shortest:e}, got dt = {dt:e}"),
        ));
    }
    let steps = shortest / dt;
    if (steps - steps.round()).abs() > 1e-9 {
        return Err(Error::arg("dt", "must divide the dyadic interval lengths"));
    }
    Ok(())
}

fn sample_index(traj: &Trajectory, t: f64) -> usize {
    traj.t
        .partition_point(|&s| s < t - 1e-12)
        .min(traj.len().saturating_sub(1))
}

fn interval_bounds(
    pack: &ConstantPack,
    schedule: &Schedule,
    traj: &Trajectory,
    interval_norms: &[f64],
    y0_norm: f64,
) -> Vec<IntervalBound> {
    let q2 = pack.q * pack.q;
    let n0 = schedule.n0 as i32;
    let mut ln_product = 0.0f64;
    let mut out = Vec::with_capacity(schedule.n_max + 1);
    for n in 0..=schedule.n_max {
        let p = &schedule.params[n];
        let (a, b) = (schedule.starts[n], schedule.starts[n + 1]);
        let lo = sample_index(traj, a);
        let hi = sample_index(traj, b);
        let sup_control = traj.norm_f[lo..hi].iter().copied().fold(0.0, f64::max);
        let closed = -7.0 * q2 / 64.0 * 2f64.powi(n0) * (2f64.powi(n as i32) - 1.0);
        out.push(IntervalBound {
            n,
            start: a,
            lambda: p.lambda,
            clamped: schedule.clamped[n],
            n_modes: p.n_modes,
            norm_at_start: interval_norms[n],
            state_bound: ln_product.exp() * y0_norm,
            state_bound_closed: closed.exp() * y0_norm,
            sup_control,
            control_bound: (pack.c2.ln() + pack.c2 * p.lambda.sqrt()).exp() * interval_norms[n],
            control_bound_closed: (n >= 1)
                .then(|| (-5.0 * q2 / 64.0 * 2f64.powi(n0 + n as i32 - 1)).exp() * y0_norm),
            samples: hi - lo,
        });
        ln_product += pack.c1.ln() + pack.c1 * p.lambda.sqrt() - p.lambda / 4.0 * (b - a);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallTimeConfig {
    pub n0: u32,
    pub n_max: usize,
    /// Start offsets as fractions of `T`.
    pub s_offsets: Vec<f64>,
    /// Periods simulated from each offset; at least 2.
    pub periods: usize,
    pub eps_zero: f64,
    /// Initial norm; `None` uses half the calibrated `Λ_T`.
    pub y0_norm: Option<f64>,
    /// `η` values as multiples of `r_{λ_0}`.
    pub eta_grid: Vec<f64>,
    pub seed: u64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetRun {
    pub offset: f64,
    /// `‖Φ(s + 2T, s; y0)‖ / ‖y0‖`.
    pub two_t_relative: f64,
    pub free_decay_two_t_relative: f64,
    /// `max_t ‖U(t)‖ / min{1, √(2‖y(t)‖)}` over samples with `y ≠ 0`.
    pub feedback_constraint_ratio: f64,
    pub sup_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityProbe {
    pub horizon: f64,
    pub n0: u32,
    pub r_scale: f64,
    /// Empirical `Λ_T` from the bisection on `‖y0‖`; labelled as such.
    pub lambda_t_calibrated: f64,
    pub y0_norm: f64,
    pub runs: Vec<OffsetRun>,
    pub eta: Vec<f64>,
    /// `δ(η) = η · min(1, η / sup ‖Φ(t, s; y0)‖)` with `‖y0‖ = η`, over offsets and times.
    pub delta: Vec<f64>,
}

fn periodic_controller(schedule: &Schedule) -> ScheduledFeedback {
    ScheduledFeedback::new(schedule.clone(), 0.0, true, true)
}

/// Periodic cutoff feedback from start time `s` over `periods` horizons.
pub fn run_from_offset(
    model: &GalerkinModel,
    schedule: &Schedule,
    x0: &[f64],
    s: f64,
    periods: usize,
    dt: f64,
) -> Result<Trajectory> {
    let mut ctl = periodic_controller(schedule);
    let end = s + periods as f64 * schedule.horizon;
    simulate(model, &mut ctl, x0, s, end, dt, 1)
}

/// `‖Φ(s + 2T, s; y0)‖ / ‖y0‖` from a trajectory starting at `s`.
fn two_t_ratio(traj: &Trajectory, s: f64, horizon: f64) -> f64 {
    let i = sample_index(traj, s + 2.0 * horizon);
    let y0 = l2(&traj.x[0]);
    if y0 == 0.0 {
        0.0
    } else {
        l2(&traj.x[i]) / y0
    }
}

/// Largest `‖y0‖` (searched on a log scale) for which the 2T-null test
/// from `s = 0` passes.
pub fn calibrate_lambda_t(
    model: &GalerkinModel,
    schedule: &Schedule,
    eps_zero: f64,
    dt: f64,
    seed: u64,
    start: f64,
) -> Result<f64> {
    let passes = |norm: f64| -> bool {
        let x0 = random_state(model.dim(), norm, seed);
        match run_from_offset(model, schedule, &x0, 0.0, 2, dt) {
            Ok(traj) => two_t_ratio(&traj, 0.0, schedule.horizon) <= eps_zero,
            Err(_) => false,
        }
    };
    let mut lo = start;
    if !passes(lo) {
        return Err(Error::TwoTFailed {
            offset: 0.0,
            relative: f64::NAN,
        });
    }
    let mut hi = lo * 10.0;
    while passes(hi) {
        lo = hi;
        hi *= 10.0;
        if hi > 1e3 {
            return Ok(lo);
        }
    }
    for _ in 0..12 {
        let mid = (lo * hi).sqrt();
        if passes(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

pub fn run_small_time(
    model: &GalerkinModel,
    pack: &ConstantPack,
    cfg: &SmallTimeConfig,
) -> Result<StabilityProbe> {
    if cfg.periods < 2 {
        return Err(Error::arg("periods", "need at least 2 periods"));
    }
    if cfg.eta_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("eta_grid", "must be strictly ascending"));
    }
    let certified = pack.mode == ConstantMode::CertifiedFromFit;
    let schedule = build_schedule(cfg.n0, pack, &model.tau, cfg.n_max, !certified)?;
    check_dyadic_dt(cfg.dt, &schedule)?;
    let horizon = schedule.horizon;
    let r_scale = schedule.params[0].r;
    let lambda_t = calibrate_lambda_t(model, &schedule, cfg.eps_zero, cfg.dt, cfg.seed, 1e-6 * r_scale)?;
    let y0_norm = cfg.y0_norm.unwrap_or(0.5 * lambda_t);
    let x0 = random_state(model.dim(), y0_norm, cfg.seed);

    let runs: Vec<OffsetRun> = cfg
        .s_offsets
        .par_iter()
        .map(|&frac| -> Result<OffsetRun> {
            let s = snap(frac * horizon, cfg.dt);
            let traj = run_from_offset(model, &schedule, &x0, s, cfg.periods, cfg.dt)?;
            let free = simulate(model, &mut NoControl, &x0, s, s + 2.0 * horizon, cfg.dt, usize::MAX)?;
            let mut ratio = 0.0f64;
            for (x, nf) in traj.x.iter().zip(&traj.norm_f) {
                let ny = l2(x);
                if ny > 0.0 {
                    ratio = ratio.max(nf / 1f64.min((2.0 * ny).sqrt()));
                }
            }
            Ok(OffsetRun {
                offset: s,
                two_t_relative: two_t_ratio(&traj, s, horizon),
                free_decay_two_t_relative: if y0_norm > 0.0 {
                    l2(free.x.last().unwrap()) / y0_norm
                } else {
                    0.0
                },
                feedback_constraint_ratio: ratio,
                sup_norm: traj.norm_h().into_iter().fold(0.0, f64::max),
            })
        })
        .collect::<Result<_>>()?;
    for r in &runs {
        let absolute = r.two_t_relative * y0_norm;
        if absolute > cfg.eps_zero * y0_norm.max(cfg.eps_zero) {
            return Err(Error::TwoTFailed {
                offset: r.offset,
                relative: r.two_t_relative,
            });
        }
    }

    let eta: Vec<f64> = cfg.eta_grid.iter().map(|e| e * r_scale).collect();
    let delta = eta
        .par_iter()
        .map(|&e| -> Result<f64> {
            let x0 = random_state(model.dim(), e, cfg.seed);
            let mut sup = 0.0f64;
            for &frac in &cfg.s_offsets {
                let s = snap(frac * horizon, cfg.dt);
                let traj = run_from_offset(model, &schedule, &x0, s, cfg.periods, cfg.dt)?;
                sup = traj.norm_h().into_iter().fold(sup, f64::max);
            }
            // amplification measured at ‖y0‖ = η; radius keeping the flow below η
            Ok(if sup > 0.0 { e * (e / sup).min(1.0) } else { e })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(StabilityProbe {
        horizon,
        n0: cfg.n0,
        r_scale,
        lambda_t_calibrated: lambda_t,
        y0_norm,
        runs,
        eta,
        delta,
    })
}

/// Rounds a start time to the step lattice so schedule switches stay on
/// step boundaries.
fn snap(t: f64, dt: f64) -> f64 {
    (t / dt).round() * dt
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFit {
    /// Empirical `C3`.
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<(f64, f64)>,
}

/// Least squares of `ln(cost / ‖y0‖)` against `1/T`.
pub fn fit_cost_curve(reports: &[NullControlReport]) -> Result<CostFit> {
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(reports.len());
    for r in reports {
        if r.status != NullControlStatus::Simulated {
            return Err(Error::InsufficientPoints(format!(
                "T = {} was not simulated",
                r.horizon
            )));
        }
        if !(r.cost > 0.0 && r.cost.is_finite() && r.y0_norm > 0.0) {
            return Err(Error::InsufficientPoints(format!(
                "T = {} has no positive finite cost",
                r.horizon
            )));
        }
        points.push((1.0 / r.horizon, (r.cost / r.y0_norm).ln()));
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InsufficientPoints(format!(
            "{} distinct horizons, need 3",
            distinct.len()
        )));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let (slope, intercept) = linear_fit(&xs, &ys)?;
    Ok(CostFit {
        slope,
        intercept,
        points,
    })
}
