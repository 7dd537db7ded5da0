//! Constant chain, feedback laws and the dyadic feedback schedule.
//!
//! All exponentially large quantities are also carried as logarithms: with
//! fitted constants `γ_λ` and `1/r_λ` overflow `f64` long before `λ` leaves
//! the retained spectrum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::TrilinearTensor;
use crate::error::{Error, Result};
use crate::spectral::count_modes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantMode {
    /// `C1` and `c0` measured, `C2`, `Q`, `C3` derived from the inequalities.
    #[serde(alias = "certified")]
    CertifiedFromFit,
    /// User-supplied constants sized for observable desk-scale dynamics.
    Practical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantPack {
    pub c1: f64,
    pub c0: f64,
    pub c2: f64,
    pub q: f64,
    pub c3: f64,
    /// Force-energy constant of the Leray energy bound; its surrogate is 1.
    pub c0_force: f64,
    pub mode: ConstantMode,
}

impl ConstantPack {
    /// Derives `C2`, `Q`, `C3` from measured `C1`, `c0`.
    pub fn certified(c1: f64, c0: f64, lambda_probe: &[f64]) -> Result<Self> {
        if !(c1 >= 1.0) {
            return Err(Error::arg("C1", format!("must be >= 1, got {c1}")));
        }
        if !(c0 > 0.0) {
            return Err(Error::arg("c0", format!("must be positive, got {c0}")));
        }
        let c2 = derive_c2(c1, c0, lambda_probe);
        let (q, c3) = derive_q_c3(c1, c2);
        let pack = Self {
            c1,
            c0,
            c2,
            q,
            c3,
            c0_force: 1.0,
            mode: ConstantMode::CertifiedFromFit,
        };
        pack.validate()?;
        Ok(pack)
    }

    /// Practical constants. Only `C2 ≥ 3 C1` and `C3 = Q²/32` are imposed;
    /// `C1 ≥ 1` is not.
    pub fn practical(c1: f64, c2: f64, q: f64, c0: f64) -> Result<Self> {
        let pack = Self {
            c1,
            c0,
            c2,
            q,
            c3: q * q / 32.0,
            c0_force: 1.0,
            mode: ConstantMode::Practical,
        };
        pack.validate()?;
        Ok(pack)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("C1", self.c1), ("c0", self.c0), ("C2", self.c2), ("Q", self.q)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::arg(name_static(name), format!("must be positive and finite, got {v}")));
            }
        }
        if self.mode == ConstantMode::CertifiedFromFit && self.c1 < 1.0 {
            return Err(Error::arg("C1", format!("must be >= 1 in certified mode, got {}", self.c1)));
        }
        if self.c2 < 3.0 * self.c1 {
            return Err(Error::arg(
                "C2",
                format!("must be >= 3 C1 = {}, got {}", 3.0 * self.c1, self.c2),
            ));
        }
        if self.c3 != self.q * self.q / 32.0 {
            return Err(Error::arg("C3", "must equal Q²/32"));
        }
        Ok(())
    }

    pub fn ln_gamma(&self, lambda: f64) -> f64 {
        self.c1.ln() + self.c1 * lambda.sqrt() + lambda.ln()
    }

    pub fn ln_inv_r(&self, lambda: f64) -> f64 {
        self.c2.ln() + self.c2 * lambda.sqrt()
    }
}

fn name_static(name: &str) -> &'static str {
    match name {
        "C1" => "C1",
        "c0" => "c0",
        "C2" => "C2",
        _ => "Q",
    }
}

/// Logarithms of the three left-hand sides that `C2 e^{C2√λ}` must dominate.
pub fn c2_constraints_ln(c1: f64, c0: f64, lambda: f64) -> [f64; 3] {
    let s = lambda.sqrt();
    let l1 = c1.ln();
    [
        (1.0 + lambda * c1).ln() + c1 * s,
        8f64.ln() + (1.0 + lambda).ln() + 2.0 * l1 + 2.0 * c1 * s,
        (8.0 * c0).ln() + 3.0 * l1 + 3.0 * c1 * s,
    ]
}

pub fn c2_feasible(c1: f64, c0: f64, c2: f64, lambda: f64) -> bool {
    let rhs = c2.ln() + c2 * lambda.sqrt();
    c2_constraints_ln(c1, c0, lambda).iter().all(|&l| l <= rhs)
}

/// λ values on which the `C2` inequalities are enforced besides the probes:
/// the λ → 0 limit and a 200-point log grid over `[1e-6, 1e8]`.
pub fn c2_check_grid(lambda_probe: &[f64]) -> Vec<f64> {
    let mut grid = Vec::with_capacity(lambda_probe.len() + 201);
    grid.push(0.0);
    grid.extend((0..200).map(|k| 10f64.powf(-6.0 + 14.0 * k as f64 / 199.0)));
    grid.extend(lambda_probe.iter().copied().filter(|l| *l >= 0.0));
    grid
}

/// Smallest `C2 ≥ 3 C1` satisfying the three inequalities on the check grid.
pub fn derive_c2(c1: f64, c0: f64, lambda_probe: &[f64]) -> f64 {
    let grid = c2_check_grid(lambda_probe);
    let feasible = |c2: f64| grid.iter().all(|&l| c2_feasible(c1, c0, c2, l));
    let mut lo = 3.0 * c1;
    if feasible(lo) {
        return lo;
    }
    let mut hi = 2.0 * lo;
    while !feasible(hi) {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// `ln C + C Q m ≤ Q² m / 64` for every integer `m ≥ 1`. The condition is
/// affine in `m`, so it holds iff `Q²/64 − C Q ≥ max(ln C, 0)`.
pub fn q_feasible(c: f64, q: f64) -> bool {
    q * q / 64.0 - c * q >= c.ln().max(0.0)
}

/// Smallest `Q` satisfying the schedule inequalities for `C1` and `C2`.
pub fn derive_q_c3(c1: f64, c2: f64) -> (f64, f64) {
    let closed = |c: f64| {
        let lc = c.ln().max(0.0);
        32.0 * c + (1024.0 * c * c + 64.0 * lc).sqrt()
    };
    let feasible = |q: f64| q_feasible(c1, q) && q_feasible(c2, q);
    let mut hi = closed(c1).max(closed(c2));
    while !feasible(hi) {
        hi *= 1.0 + 1e-14;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-13 * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (hi, hi * hi / 32.0)
}

/// Per-threshold feedback constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackParams {
    pub lambda: f64,
    pub n_modes: usize,
    pub gamma: f64,
    pub mu: f64,
    pub r: f64,
    pub ln_gamma: f64,
    pub ln_r: f64,
}

impl FeedbackParams {
    fn from_pack(lambda: f64, n_modes: usize, pack: &ConstantPack) -> Self {
        let ln_gamma = pack.ln_gamma(lambda);
        let ln_r = -pack.ln_inv_r(lambda);
        let s = lambda.sqrt();
        Self {
            lambda,
            n_modes,
            gamma: pack.c1 * (pack.c1 * s).exp() * lambda,
            mu: pack.c1 * pack.c1 * (2.0 * pack.c1 * s).exp(),
            r: 1.0 / (pack.c2 * (pack.c2 * s).exp()),
            ln_gamma,
            ln_r,
        }
    }
}

pub fn feedback_params(lambda: f64, pack: &ConstantPack, tau: &[f64]) -> Result<FeedbackParams> {
    let n_modes = count_modes(tau, lambda)?;
    Ok(FeedbackParams::from_pack(lambda, n_modes, pack))
}

/// `F_λ X = −γ_λ P_N X` in coefficients.
pub fn apply_f_lambda(x: &[f64], params: &FeedbackParams, out: &mut [f64]) {
    let n = params.n_modes.min(x.len());
    for (k, o) in out.iter_mut().enumerate() {
        *o = if k < n { -params.gamma * x[k] } else { 0.0 };
    }
}

/// Smooth radial cutoff: 1 on `[0, r]`, 0 on `[2r, ∞)`, quintic smoothstep
/// in between.
pub fn chi_r(s: f64, r: f64) -> Result<f64> {
    if !(r > 0.0 && r <= 0.5) {
        return Err(Error::arg("r", format!("must lie in (0, 1/2], got {r}")));
    }
    if !(s >= 0.0) {
        return Err(Error::arg("s", format!("must be nonnegative, got {s}")));
    }
    Ok(chi_unchecked(s, r))
}

#[inline]
fn chi_unchecked(s: f64, r: f64) -> f64 {
    if s <= r {
        1.0
    } else if s >= 2.0 * r {
        0.0
    } else {
        let t = (s - r) / r;
        1.0 - t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
    }
}

/// `K_r(f) = f · χ_r(‖f‖₂)`, in place.
pub fn apply_k_r(f: &mut [f64], r: f64) -> Result<()> {
    let norm = l2(f);
    let c = chi_r(norm, r)?;
    if c != 1.0 {
        f.iter_mut().for_each(|v| *v *= c);
    }
    Ok(())
}

/// Euclidean norm, rescaled when the squares would leave the normal range
/// (states decay far below 1e-154 on the later dyadic intervals).
pub(crate) fn l2(v: &[f64]) -> f64 {
    let plain = v.iter().map(|x| x * x).sum::<f64>();
    if plain.is_normal() && plain < 1e300 {
        return plain.sqrt();
    }
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
}

/// Which feedback acts at a given time of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Active(usize),
    /// Past the last represented interval, or in the zero tail used for a
    /// non-dyadic horizon: no feedback.
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub n0: u32,
    pub n_max: usize,
    /// Dyadic period `2^{-n0}`.
    pub period: f64,
    /// Length after which the schedule repeats; `≥ period`, the gap is the
    /// zero-feedback tail.
    pub horizon: f64,
    /// `T_n` for `n = 0..=n_max+1`.
    pub starts: Vec<f64>,
    /// Requested thresholds `Q² 4^{n0+n}` before any clamping.
    pub lambda_requested: Vec<f64>,
    pub params: Vec<FeedbackParams>,
    pub clamped: Vec<bool>,
}

pub fn interval_start(n0: u32, n: usize) -> f64 {
    2f64.powi(-(n0 as i32)) * (1.0 - 2f64.powi(-(n as i32)))
}

/// Dyadic schedule for `T = 2^{-n0}`. With `clamp` the thresholds are
/// capped at the largest retained eigenvalue below `τ_M`; without it a
/// threshold outside the basis is an error.
pub fn build_schedule(
    n0: u32,
    pack: &ConstantPack,
    tau: &[f64],
    n_max: usize,
    clamp: bool,
) -> Result<Schedule> {
    let period = 2f64.powi(-(n0 as i32));
    let tau_max = *tau.last().ok_or_else(|| Error::arg("tau", "empty spectrum"))?;
    let cap = tau
        .iter()
        .rev()
        .copied()
        .find(|&t| t < tau_max)
        .ok_or_else(|| Error::arg("tau", "need two distinct retained eigenvalues to clamp"));
    let mut starts = Vec::with_capacity(n_max + 2);
    let mut lambda_requested = Vec::with_capacity(n_max + 1);
    let mut params = Vec::with_capacity(n_max + 1);
    let mut clamped = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max + 1 {
        starts.push(interval_start(n0, n));
    }
    for n in 0..=n_max {
        let requested = pack.q * pack.q * 4f64.powi((n0 as usize + n) as i32);
        lambda_requested.push(requested);
        let (lambda, was_clamped) = if requested >= tau_max {
            if clamp {
                let c = *cap.as_ref().map_err(|e| Error::arg("tau", e.to_string()))?;
                (c, true)
            } else {
                return Err(Error::BasisTooSmall {
                    lambda: requested,
                    tau_max,
                });
            }
        } else {
            (requested, false)
        };
        if was_clamped {
            log::warn!("schedule interval {n}: λ = {requested:.4e} clamped to {lambda:.4e}");
        }
        params.push(feedback_params(lambda, pack, tau)?);
        clamped.push(was_clamped);
    }
    Ok(Schedule {
        n0,
        n_max,
        period,
        horizon: period,
        starts,
        lambda_requested,
        params,
        clamped,
    })
}

impl Schedule {
    /// Extends the dyadic schedule to a horizon `T ≥ 2^{-n0}` with zero
    /// feedback on `[2^{-n0}, T)`.
    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon >= self.period) {
            return Err(Error::arg(
                "horizon",
                format!("must be >= period {}, got {horizon}", self.period),
            ));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn locate_interval(&self, t: f64) -> Result<Regime> {
        if !(t >= 0.0 && t < self.horizon) {
            return Err(Error::arg(
                "t",
                format!("must lie in [0, {}), got {t}", self.horizon),
            ));
        }
        Ok(self.locate_unchecked(t))
    }

    fn locate_unchecked(&self, t: f64) -> Regime {
        if t >= self.starts[self.n_max + 1] {
            return Regime::Terminal;
        }
        // starts is strictly increasing; T_0 = 0 <= t
        let n = self.starts.partition_point(|&s| s <= t) - 1;
        Regime::Active(n.min(self.n_max))
    }

    /// Regime of the periodic extension at any real time.
    pub fn regime_periodic(&self, t: f64) -> Regime {
        let mut s = t.rem_euclid(self.horizon);
        if s >= self.horizon {
            s = 0.0;
        }
        self.locate_unchecked(s)
    }

    pub fn params_periodic(&self, t: f64) -> Option<&FeedbackParams> {
        match self.regime_periodic(t) {
            Regime::Active(n) => Some(&self.params[n]),
            Regime::Terminal => None,
        }
    }
}

/// Sampled trilinear constant with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C0Estimate {
    pub c0: f64,
    pub samples: usize,
    pub skipped: usize,
    pub seed: u64,
}

/// `max |B(u,v,w)| / (‖u‖^½‖v‖^½‖∇u‖^½‖∇v‖^½‖∇w‖)` over Gaussian coefficient
/// triples. A lower bound on the true constant; zero samples are skipped.
pub fn estimate_c0(
    tensor: &TrilinearTensor,
    tau: &[f64],
    samples: usize,
    seed: u64,
) -> Result<C0Estimate> {
    let m = tensor.dim();
    if tau.len() != m {
        return Err(Error::ShapeMismatch { expected: m, got: tau.len() });
    }
    if m < 3 {
        return Err(Error::arg("basis", format!("need at least 3 modes, got {m}")));
    }
    if samples < 100 {
        return Err(Error::arg("samples", format!("need at least 100, got {samples}")));
    }
    let grad = |x: &[f64]| tau.iter().zip(x).map(|(t, v)| t * v * v).sum::<f64>().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> { (0..m).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut best = 0.0f64;
    let mut skipped = 0;
    for _ in 0..samples {
        let (u, v, w) = (draw(), draw(), draw());
        let denom = (l2(&u) * l2(&v) * grad(&u) * grad(&v)).sqrt() * grad(&w);
        if !(denom > 0.0) {
            skipped += 1;
            continue;
        }
        best = best.max(tensor.eval(&u, &v, &w).abs() / denom);
    }
    Ok(C0Estimate { c0: best, samples, skipped, seed })
}
