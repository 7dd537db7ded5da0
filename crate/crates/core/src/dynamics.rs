//! Galerkin Navier–Stokes dynamics in the Stokes eigenbasis.

use std::collections::HashMap;

use faer::{Mat, Side};
use rayon::prelude::*;

use crate::constants::{apply_f_lambda, apply_k_r, l2, FeedbackParams, Regime, Schedule};
use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::spectral::{GramMatrix, StokesBasis};

/// Aborts a run once any coefficient exceeds this magnitude.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

/// `T[i][j][k] = B(e_i, e_j, e_k)`, stored densely with `k` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TrilinearTensor {
    m: usize,
    data: Vec<f64>,
}

impl TrilinearTensor {
    pub fn zeros(m: usize) -> Self {
        Self {
            m,
            data: vec![0.0; m * m * m],
        }
    }

    pub fn from_fn(m: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(m);
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    t.data[(i * m + j) * m + k] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.m + j) * self.m + k]
    }

    /// `(T[i][j][k] − T[i][k][j]) / 2`.
    pub fn skew_symmetrized(&self) -> Self {
        let m = self.m;
        let mut out = Self::zeros(m);
        for i in 0..m {
            for j in 0..m {
                for k in j..m {
                    let s = 0.5 * (self.at(i, j, k) - self.at(i, k, j));
                    out.data[(i * m + j) * m + k] = s;
                    out.data[(i * m + k) * m + j] = -s;
                }
            }
        }
        out
    }

    /// `max |T[i][j][k] + T[i][k][j]|` over indices below `limit`.
    pub fn antisymmetry_residual(&self, limit: usize) -> f64 {
        let l = limit.min(self.m);
        let mut worst = 0.0f64;
        for i in 0..l {
            for j in 0..l {
                for k in 0..l {
                    worst = worst.max((self.at(i, j, k) + self.at(i, k, j)).abs());
                }
            }
        }
        worst
    }

    /// Largest entry magnitude over indices below `limit`.
    pub fn max_abs(&self, limit: usize) -> f64 {
        let l = limit.min(self.m);
        let mut worst = 0.0f64;
        for i in 0..l {
            for j in 0..l {
                for k in 0..l {
                    worst = worst.max(self.at(i, j, k).abs());
                }
            }
        }
        worst
    }

    /// `B(u, v, w)` for coefficient vectors.
    pub fn eval(&self, u: &[f64], v: &[f64], w: &[f64]) -> f64 {
        let m = self.m;
        let mut acc = 0.0;
        for i in 0..m {
            if u[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                let uv = u[i] * v[j];
                if uv == 0.0 {
                    continue;
                }
                let row = &self.data[(i * m + j) * m..(i * m + j + 1) * m];
                acc += uv * row.iter().zip(w).map(|(t, w)| t * w).sum::<f64>();
            }
        }
        acc
    }

    /// `out_k = Σ_ij T[i][j][k] x_i x_j`.
    pub fn contract(&self, x: &[f64], out: &mut [f64]) {
        let m = self.m;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..m {
            if x[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                let w = x[i] * x[j];
                if w == 0.0 {
                    continue;
                }
                let row = &self.data[(i * m + j) * m..(i * m + j + 1) * m];
                for (o, t) in out.iter_mut().zip(row) {
                    *o += w * t;
                }
            }
        }
    }
}

/// Nodal velocity `(∂yψ, −∂xψ)` and its gradient at interior nodes, both by
/// central differences of the clamped extension.
struct NodalVelocity {
    u: [Vec<f64>; 2],
    /// `grad[c][d] = ∂_d u_c`
    grad: [[Vec<f64>; 2]; 2],
}

fn nodal_velocity(grid: &Grid, psi: &ScalarField) -> NodalVelocity {
    let (nx, ny) = (grid.nx(), grid.ny());
    let p = grid.clamped_extension(psi);
    let (ax, ay) = (0.5 / grid.hx, 0.5 / grid.hy);
    // full lattice including the boundary nodes; padded index = lattice + 1
    let fw = nx + 2;
    let fh = ny + 2;
    let mut full = [vec![0.0; fw * fh], vec![0.0; fw * fh]];
    for b in 0..fh {
        for a in 0..fw {
            full[0][b * fw + a] = (p.at(a + 1, b + 2) - p.at(a + 1, b)) * ay;
            full[1][b * fw + a] = -(p.at(a + 2, b + 1) - p.at(a, b + 1)) * ax;
        }
    }
    let n = nx * ny;
    let mut u = [vec![0.0; n], vec![0.0; n]];
    let mut grad = [[vec![0.0; n], vec![0.0; n]], [vec![0.0; n], vec![0.0; n]]];
    for j in 0..ny {
        for i in 0..nx {
            let node = j * nx + i;
            let (a, b) = (i + 1, j + 1);
            for c in 0..2 {
                let f = &full[c];
                u[c][node] = f[b * fw + a];
                grad[c][0][node] = (f[b * fw + a + 1] - f[b * fw + a - 1]) * ax;
                grad[c][1][node] = (f[(b + 1) * fw + a] - f[(b - 1) * fw + a]) * ay;
            }
        }
    }
    NodalVelocity { u, grad }
}

/// Unsymmetrized tensor from nodal quadrature of `∫ (e_i·∇e_j)·e_k`.
pub fn build_raw_trilinear(basis: &StokesBasis) -> TrilinearTensor {
    let grid = &basis.grid;
    let m = basis.len();
    let fields: Vec<NodalVelocity> = basis
        .psi
        .par_iter()
        .map(|psi| nodal_velocity(grid, psi))
        .collect();
    let area = grid.cell_area();
    let n = grid.node_count();
    let slabs: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let ui = &fields[i].u;
            let mut slab = vec![0.0; m * m];
            let mut adv = [vec![0.0; n], vec![0.0; n]];
            for j in 0..m {
                let g = &fields[j].grad;
                for c in 0..2 {
                    for node in 0..n {
                        adv[c][node] = ui[0][node] * g[c][0][node] + ui[1][node] * g[c][1][node];
                    }
                }
                for k in 0..m {
                    let uk = &fields[k].u;
                    let mut s = 0.0;
                    for node in 0..n {
                        s += adv[0][node] * uk[0][node] + adv[1][node] * uk[1][node];
                    }
                    slab[j * m + k] = s * area;
                }
            }
            slab
        })
        .collect();
    TrilinearTensor {
        m,
        data: slabs.concat(),
    }
}

/// Skew-symmetrized tensor; the discrete nonlinearity conserves energy.
pub fn build_trilinear_tensor(basis: &StokesBasis) -> TrilinearTensor {
    build_raw_trilinear(basis).skew_symmetrized()
}

/// Coefficient-space state `y = Σ X_i e_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralState {
    pub t: f64,
    pub x: Vec<f64>,
}

impl SpectralState {
    pub fn norm(&self) -> f64 {
        l2(&self.x)
    }
}

/// `Ẋ = −ν τ X − N(X) + G c`.
#[derive(Debug, Clone)]
pub struct GalerkinModel {
    pub tau: Vec<f64>,
    pub tensor: TrilinearTensor,
    /// Control Gram matrix `(e_i, e_j)_{L²(ω)}`.
    pub gram: GramMatrix,
    pub nu: f64,
}

impl GalerkinModel {
    pub fn new(tau: Vec<f64>, tensor: TrilinearTensor, gram: GramMatrix) -> Result<Self> {
        let m = tau.len();
        if tensor.dim() != m {
            return Err(Error::ShapeMismatch {
                expected: m,
                got: tensor.dim(),
            });
        }
        if gram.m != m {
            return Err(Error::ShapeMismatch {
                expected: m,
                got: gram.m,
            });
        }
        Ok(Self {
            tau,
            tensor,
            gram,
            nu: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.tau.len()
    }

    /// `Σ τ_k X_k²`, the squared gradient norm of `y`.
    pub fn dirichlet_energy(&self, x: &[f64]) -> f64 {
        self.tau.iter().zip(x).map(|(t, v)| t * v * v).sum()
    }

    /// Everything but the Stokes part: `−N(X) + G c`.
    fn forcing(&self, x: &[f64], c: &[f64], out: &mut [f64]) {
        self.tensor.contract(x, out);
        let m = self.dim();
        for k in 0..m {
            let mut gc = 0.0;
            for (i, ci) in c.iter().enumerate() {
                if *ci != 0.0 {
                    gc += self.gram.at(k, i) * ci;
                }
            }
            out[k] = gc - out[k];
        }
    }

    pub fn rhs(&self, x: &[f64], c: &[f64], out: &mut [f64]) {
        self.forcing(x, c, out);
        for k in 0..self.dim() {
            out[k] -= self.nu * self.tau[k] * x[k];
        }
    }
}

/// A (possibly time-varying) feedback law `U(t; y)` in coefficients.
pub trait Controller {
    fn control(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// Active interval and parameters at `t`, for the trajectory columns.
    fn active(&self, _t: f64) -> (Option<usize>, Option<&FeedbackParams>) {
        (None, None)
    }

    /// A stationary `F_λ` contained in the control throughout the step
    /// around `t_mid`. It is integrated exactly together with the Stokes
    /// part; only the remainder of the control is treated explicitly.
    fn linear_part(&self, _t_mid: f64) -> Option<&FeedbackParams> {
        None
    }

    /// Called once per accepted step with the new state.
    fn observe(&mut self, _t: f64, _x: &[f64]) {}
}

pub struct NoControl;

impl Controller for NoControl {
    fn control(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Stationary `F_λ`, optionally composed with the cutoff `K_{r_λ}`.
pub struct LinearFeedback {
    pub params: FeedbackParams,
    pub cutoff: bool,
}

impl Controller for LinearFeedback {
    fn control(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        apply_f_lambda(x, &self.params, out);
        if self.cutoff {
            cutoff_in_place(out, self.params.r);
        }
    }

    fn active(&self, _t: f64) -> (Option<usize>, Option<&FeedbackParams>) {
        (Some(0), Some(&self.params))
    }

    fn linear_part(&self, _t_mid: f64) -> Option<&FeedbackParams> {
        Some(&self.params)
    }
}

fn cutoff_in_place(out: &mut [f64], r: f64) {
    // r ≤ 1/2 is guaranteed by C2 ≥ 3C1 for every λ that matters; larger
    // radii would only occur for λ → 0 and are clamped to the valid range
    apply_k_r(out, r.min(0.5)).expect("cutoff radius in (0, 1/2]");
}

/// Piecewise feedback following a schedule, with the schedule's time origin
/// at `origin`. With `periodic` the law repeats with the schedule horizon.
pub struct ScheduledFeedback {
    pub schedule: Schedule,
    pub origin: f64,
    pub cutoff: bool,
    pub periodic: bool,
    latch: Option<NullLatch>,
}

#[derive(Debug, Clone)]
struct NullLatch {
    threshold: f64,
    reached: Option<f64>,
}

impl ScheduledFeedback {
    pub fn new(schedule: Schedule, origin: f64, cutoff: bool, periodic: bool) -> Self {
        Self {
            schedule,
            origin,
            cutoff,
            periodic,
            latch: None,
        }
    }

    /// Switch the control off for good once `‖X‖ ≤ threshold`.
    pub fn with_null_latch(mut self, threshold: f64) -> Self {
        self.latch = Some(NullLatch {
            threshold,
            reached: None,
        });
        self
    }

    pub fn null_reached_at(&self) -> Option<f64> {
        self.latch.as_ref().and_then(|l| l.reached)
    }

    fn regime(&self, t: f64) -> Regime {
        let s = t - self.origin;
        if self.periodic {
            self.schedule.regime_periodic(s)
        } else if s < 0.0 || s >= self.schedule.horizon {
            Regime::Terminal
        } else {
            self.schedule
                .locate_interval(s)
                .unwrap_or(Regime::Terminal)
        }
    }
}

impl Controller for ScheduledFeedback {
    fn control(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let latched = self.latch.as_ref().is_some_and(|l| l.reached.is_some());
        match (latched, self.regime(t)) {
            (false, Regime::Active(n)) => {
                let p = &self.schedule.params[n];
                apply_f_lambda(x, p, out);
                if self.cutoff {
                    cutoff_in_place(out, p.r);
                }
            }
            _ => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }

    fn active(&self, t: f64) -> (Option<usize>, Option<&FeedbackParams>) {
        match self.regime(t) {
            Regime::Active(n) => (Some(n), Some(&self.schedule.params[n])),
            Regime::Terminal => (None, None),
        }
    }

    fn linear_part(&self, t_mid: f64) -> Option<&FeedbackParams> {
        if self.latch.as_ref().is_some_and(|l| l.reached.is_some()) {
            return None;
        }
        self.active(t_mid).1
    }

    fn observe(&mut self, t: f64, x: &[f64]) {
        if let Some(l) = self.latch.as_mut() {
            if l.reached.is_none() && l2(x) <= l.threshold {
                l.reached = Some(t);
            }
        }
    }
}

/// `exp(h L)` for the linear closed loop `L = −ν A − γ G P_N`.
#[derive(Debug, Clone)]
pub enum Propagator {
    Diagonal(Vec<f64>),
    /// Row-major `M × M`.
    Dense(Vec<f64>),
}

impl Propagator {
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            Propagator::Diagonal(d) => {
                for ((o, d), v) in out.iter_mut().zip(d).zip(v) {
                    *o = d * v;
                }
            }
            Propagator::Dense(e) => {
                let m = v.len();
                for (k, o) in out.iter_mut().enumerate() {
                    *o = e[k * m..(k + 1) * m].iter().zip(v).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    pub fn to_dense(&self, m: usize) -> Vec<f64> {
        match self {
            Propagator::Dense(e) => e.clone(),
            Propagator::Diagonal(d) => {
                let mut e = vec![0.0; m * m];
                for k in 0..m {
                    e[k * m + k] = d[k];
                }
                e
            }
        }
    }
}

/// `(e^{−a h} − e^{−b h}) / (b − a)`, accurate when `a ≈ b`.
fn phi_pair(a: f64, b: f64, h: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let d = (hi - lo) * h;
    if d < 1e-8 {
        h * (-lo * h).exp() * (1.0 - 0.5 * d)
    } else {
        (-lo * h).exp() * -(-d).exp_m1() / (hi - lo)
    }
}

/// Exact propagator of the linear closed loop over a step `h`.
///
/// The operator is block lower triangular: the low block `−(νA_N + γJ_N)` is
/// symmetric, the high block is diagonal and the coupling is `−γ G_{hl}`.
pub fn closed_loop_propagator(
    model: &GalerkinModel,
    params: Option<&FeedbackParams>,
    h: f64,
) -> Result<Propagator> {
    let m = model.dim();
    let decay: Vec<f64> = model.tau.iter().map(|t| (-model.nu * t * h).exp()).collect();
    let Some(p) = params else {
        return Ok(Propagator::Diagonal(decay));
    };
    let n = p.n_modes.min(m);
    if n == 0 || p.gamma == 0.0 {
        return Ok(Propagator::Diagonal(decay));
    }
    let gamma = p.gamma;
    let s = Mat::from_fn(n, n, |i, j| {
        let d = if i == j { model.nu * model.tau[i] } else { 0.0 };
        d + gamma * 0.5 * (model.gram.at(i, j) + model.gram.at(j, i))
    });
    let evd = s
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
    let sigma: Vec<f64> = (0..n).map(|k| evd.S().column_vector()[k]).collect();
    let v = evd.U();
    let mut e = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for q in 0..n {
                acc += v[(i, q)] * (-sigma[q] * h).exp() * v[(j, q)];
            }
            e[i * m + j] = acc;
        }
    }
    let mut cv = vec![0.0; n];
    for k in n..m {
        e[k * m + k] = decay[k];
        let rate = model.nu * model.tau[k];
        for (q, cvq) in cv.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += -gamma * model.gram.at(k, i) * v[(i, q)];
            }
            *cvq = acc * phi_pair(rate, sigma[q], h);
        }
        for j in 0..n {
            let mut acc = 0.0;
            for (q, cvq) in cv.iter().enumerate() {
                acc += cvq * v[(j, q)];
            }
            e[k * m + j] = acc;
        }
    }
    Ok(Propagator::Dense(e))
}

/// Scratch buffers and cached propagators for [`step`].
pub struct Workspace {
    dt: f64,
    free: Propagator,
    cache: HashMap<(usize, u64), Propagator>,
    c: Vec<f64>,
    lin: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    stage: Vec<f64>,
    tmp: Vec<f64>,
}

impl Workspace {
    pub fn new(model: &GalerkinModel, dt: f64) -> Self {
        let m = model.dim();
        Self {
            dt,
            free: Propagator::Diagonal(model.tau.iter().map(|t| (-model.nu * t * dt).exp()).collect()),
            cache: HashMap::new(),
            c: vec![0.0; m],
            lin: vec![0.0; m],
            k1: vec![0.0; m],
            k2: vec![0.0; m],
            stage: vec![0.0; m],
            tmp: vec![0.0; m],
        }
    }

    fn ensure(&mut self, model: &GalerkinModel, params: Option<&FeedbackParams>) -> Result<Option<(usize, u64)>> {
        let Some(p) = params else {
            return Ok(None);
        };
        let key = (p.n_modes, p.gamma.to_bits());
        if !self.cache.contains_key(&key) {
            let prop = closed_loop_propagator(model, Some(p), self.dt)?;
            self.cache.insert(key, prop);
        }
        Ok(Some(key))
    }
}

/// Largest float below `t`, so that a stage at the end of a step still sees
/// the step's own schedule interval.
fn left_limit(t: f64) -> f64 {
    t.next_down()
}

/// Control beyond the exactly integrated linear part.
fn control_remainder(
    controller: &dyn Controller,
    t: f64,
    x: &[f64],
    linear: Option<&FeedbackParams>,
    c: &mut [f64],
    lin: &mut [f64],
) {
    controller.control(t, x, c);
    if let Some(p) = linear {
        apply_f_lambda(x, p, lin);
        for (c, l) in c.iter_mut().zip(lin.iter()) {
            *c -= l;
        }
    }
}

/// One integrating-factor Heun step. The Stokes part and any stationary
/// linear feedback are propagated exactly; convection and the rest of the
/// control are treated explicitly to second order.
pub fn step(
    model: &GalerkinModel,
    controller: &dyn Controller,
    state: &mut SpectralState,
    ws: &mut Workspace,
) -> Result<()> {
    let dt = ws.dt;
    let m = model.dim();
    let t = state.t;
    let linear = controller.linear_part(t + 0.5 * dt);
    let key = ws.ensure(model, linear)?;
    let Workspace {
        free,
        cache,
        c,
        lin,
        k1,
        k2,
        stage,
        tmp,
        ..
    } = ws;
    let prop = match key {
        Some(k) => &cache[&k],
        None => &*free,
    };
    let x = &mut state.x;
    control_remainder(controller, t, x, linear, c, lin);
    model.forcing(x, c, k1);
    for k in 0..m {
        tmp[k] = x[k] + dt * k1[k];
    }
    prop.apply(tmp, stage);
    control_remainder(controller, left_limit(t + dt), stage, linear, c, lin);
    model.forcing(stage, c, k2);
    for k in 0..m {
        tmp[k] = x[k] + 0.5 * dt * k1[k];
    }
    prop.apply(tmp, x);
    for k in 0..m {
        x[k] += 0.5 * dt * k2[k];
    }
    guard(t + dt, x)
}

fn guard(t: f64, x: &[f64]) -> Result<()> {
    for (index, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { t });
        }
        if v.abs() > BLOWUP_THRESHOLD {
            return Err(Error::BlowUp { t, index, value: v });
        }
    }
    Ok(())
}

/// `μ_λ ‖P_N X‖² + ‖(1 − P_N) X‖²`.
pub fn lyapunov_v(x: &[f64], params: &FeedbackParams) -> f64 {
    let n = params.n_modes.min(x.len());
    let low: f64 = x[..n].iter().map(|v| v * v).sum();
    let high: f64 = x[n..].iter().map(|v| v * v).sum();
    params.mu * low + high
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub norm_f: Vec<f64>,
    pub v: Vec<f64>,
    pub interval: Vec<Option<usize>>,
    pub lambda: Vec<Option<f64>>,
    /// `sup ‖f‖` over every step start, not only the samples.
    pub sup_control: f64,
    /// `∫ ‖∇y‖²` over all steps, mode by mode with the logarithmic mean
    /// (exact for exponential decay, trapezoid otherwise).
    pub dissipation: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn norm_h(&self) -> Vec<f64> {
        self.x.iter().map(|x| l2(x)).collect()
    }

    pub fn last_state(&self) -> Option<SpectralState> {
        Some(SpectralState {
            t: *self.t.last()?,
            x: self.x.last()?.clone(),
        })
    }

    fn record(&mut self, t: f64, x: &[f64], controller: &dyn Controller, c: &mut [f64]) -> f64 {
        controller.control(t, x, c);
        let nf = l2(c);
        let (interval, params) = controller.active(t);
        self.t.push(t);
        self.x.push(x.to_vec());
        self.norm_f.push(nf);
        self.v.push(match params {
            Some(p) => lyapunov_v(x, p),
            None => x.iter().map(|v| v * v).sum(),
        });
        self.interval.push(interval);
        self.lambda.push(params.map(|p| p.lambda));
        nf
    }
}

/// `(a − b) / ln(a / b)`: the mean of `e^{−ks}` between values `a` and `b`.
fn log_mean(a: f64, b: f64) -> f64 {
    if !(a > 0.0 && b > 0.0) || ((b / a) - 1.0).abs() < 1e-6 {
        return 0.5 * (a + b);
    }
    (a - b) / (a / b).ln()
}

/// Steps from `t_start` to `t_end` with step `dt`, sampling every `stride`
/// steps and at the end.
pub fn simulate(
    model: &GalerkinModel,
    controller: &mut dyn Controller,
    x0: &[f64],
    t_start: f64,
    t_end: f64,
    dt: f64,
    stride: usize,
) -> Result<Trajectory> {
    if x0.len() != model.dim() {
        return Err(Error::ShapeMismatch {
            expected: model.dim(),
            got: x0.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::arg("dt", format!("must be positive, got {dt}")));
    }
    if stride == 0 {
        return Err(Error::arg("sample_stride", "must be at least 1"));
    }
    let span = t_end - t_start;
    if !(span >= 0.0) {
        return Err(Error::arg("t_end", "must not precede t_start"));
    }
    let steps = (span / dt).round() as usize;
    if ((steps as f64) * dt - span).abs() > 1e-9 * span.max(dt) {
        return Err(Error::arg("dt", format!("must divide the horizon {span}")));
    }
    guard(t_start, x0)?;
    let mut ws = Workspace::new(model, dt);
    let mut state = SpectralState {
        t: t_start,
        x: x0.to_vec(),
    };
    let mut traj = Trajectory::default();
    let mut c = vec![0.0; model.dim()];
    traj.sup_control = traj.record(t_start, x0, controller, &mut c);
    let mut prev = x0.to_vec();
    for s in 1..=steps {
        if s > 1 {
            controller.control(state.t, &state.x, &mut c);
            traj.sup_control = traj.sup_control.max(l2(&c));
        }
        step(model, controller, &mut state, &mut ws)?;
        state.t = t_start + s as f64 * dt;
        traj.dissipation += dt
            * model
                .tau
                .iter()
                .zip(prev.iter().zip(&state.x))
                .map(|(t, (a, b))| t * log_mean(a * a, b * b))
                .sum::<f64>();
        prev.copy_from_slice(&state.x);
        controller.observe(state.t, &state.x);
        if s % stride == 0 || s == steps {
            let nf = traj.record(state.t, &state.x, controller, &mut c);
            traj.sup_control = traj.sup_control.max(nf);
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{build_schedule, feedback_params, ConstantPack};
    use crate::grid::{build_grid, DomainSpec, Rect, Region};
    use crate::spectral::{assemble_gram, assemble_operators, solve_eigenbasis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(n: usize, m: usize) -> StokesBasis {
        let spec = DomainSpec::unit_square(n, Rect::new(0.6, 0.9, 0.1, 0.4));
        let grid = build_grid(&spec).unwrap();
        let ops = assemble_operators(&grid);
        solve_eigenbasis(&ops, &grid, m).unwrap()
    }

    fn model(n: usize, m: usize) -> GalerkinModel {
        let b = basis(n, m);
        let t = build_trilinear_tensor(&b);
        let g = assemble_gram(&b, Region::Control).unwrap();
        GalerkinModel::new(b.tau.clone(), t, g).unwrap()
    }

    fn random_x(m: usize, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
    }

    /// Independent physical-space evaluation of `∫ (u·∇v)·w` at interior
    /// nodes, with the clamped mirror written out by hand.
    fn oracle_b(b: &StokesBasis, i: usize, j: usize, k: usize) -> f64 {
        let g = &b.grid;
        let (nx, ny) = (g.nx() as i64, g.ny() as i64);
        let psi = |m: usize, a: i64, c: i64| -> f64 {
            let a = if a < 0 { -a } else if a > nx + 1 { 2 * (nx + 1) - a } else { a };
            let c = if c < 0 { -c } else if c > ny + 1 { 2 * (ny + 1) - c } else { c };
            if a == 0 || c == 0 || a == nx + 1 || c == ny + 1 {
                0.0
            } else {
                b.psi[m].values[((c - 1) * nx + (a - 1)) as usize]
            }
        };
        let vel = |m: usize, a: i64, c: i64| -> [f64; 2] {
            [
                (psi(m, a, c + 1) - psi(m, a, c - 1)) / (2.0 * g.hy),
                -(psi(m, a + 1, c) - psi(m, a - 1, c)) / (2.0 * g.hx),
            ]
        };
        let mut s = 0.0;
        for c in 1..=ny {
            for a in 1..=nx {
                let u = vel(i, a, c);
                let w = vel(k, a, c);
                let (vxp, vxm) = (vel(j, a + 1, c), vel(j, a - 1, c));
                let (vyp, vym) = (vel(j, a, c + 1), vel(j, a, c - 1));
                for comp in 0..2 {
                    let dx = (vxp[comp] - vxm[comp]) / (2.0 * g.hx);
                    let dy = (vyp[comp] - vym[comp]) / (2.0 * g.hy);
                    s += (u[0] * dx + u[1] * dy) * w[comp];
                }
            }
        }
        s * g.hx * g.hy
    }

    #[test]
    fn raw_tensor_matches_quadruple_loop_oracle() {
        let b = basis(12, 6);
        let raw = build_raw_trilinear(&b);
        let scale = raw.max_abs(6);
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    let o = oracle_b(&b, i, j, k);
                    assert!((raw.at(i, j, k) - o).abs() <= 1e-12 * scale, "{i}{j}{k}");
                }
            }
        }
    }

    #[test]
    fn c0_estimate_agrees_with_oracle_tensor() {
        let b = basis(32, 16);
        let fast = build_trilinear_tensor(&b);
        let slow = TrilinearTensor::from_fn(16, |i, j, k| oracle_b(&b, i, j, k)).skew_symmetrized();
        let a = crate::constants::estimate_c0(&fast, &b.tau, 400, 42).unwrap();
        let o = crate::constants::estimate_c0(&slow, &b.tau, 400, 42).unwrap();
        assert!(a.c0 > 0.0 && a.c0.is_finite());
        assert!((a.c0 - o.c0).abs() <= 1e-10 * o.c0, "{} vs {}", a.c0, o.c0);
        assert_eq!(a.skipped, 0);
    }

    #[test]
    fn c0_ratio_vanishes_for_repeated_last_argument() {
        let b = basis(10, 6);
        let t = build_trilinear_tensor(&b);
        let u = random_x(6, 1.0, 1);
        let v = random_x(6, 1.0, 2);
        assert!(t.eval(&u, &v, &v).abs() <= 1e-15 * t.max_abs(6));
        assert!(t.eval(&u, &u, &v).is_finite());
        assert!(crate::constants::estimate_c0(&t, &b.tau, 99, 0).is_err());
        assert!(crate::constants::estimate_c0(&t, &b.tau[..5], 100, 0).is_err());
    }

    #[test]
    fn log_mean_integrates_exponentials_exactly() {
        let (k, h) = (37.0f64, 0.01);
        let exact = (1.0 - (-k * h).exp()) / (k * h);
        assert!((log_mean(1.0, (-k * h).exp()) - exact).abs() < 1e-15);
        assert_eq!(log_mean(0.0, 2.0), 1.0);
        assert_eq!(log_mean(3.0, 3.0), 3.0);
    }

    #[test]
    fn skew_tensor_is_exactly_antisymmetric() {
        let b = basis(10, 8);
        let t = build_trilinear_tensor(&b);
        assert_eq!(t.antisymmetry_residual(8), 0.0);
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(t.at(i, j, j), 0.0);
            }
        }
    }

    #[test]
    fn nonlinearity_is_energy_neutral() {
        let m = model(10, 10);
        let mut out = vec![0.0; 10];
        for seed in 0..20 {
            let x = random_x(10, 3.0, seed);
            m.tensor.contract(&x, &mut out);
            let p: f64 = x.iter().zip(&out).map(|(a, b)| a * b).sum();
            let scale = l2(&x).powi(3) * m.tensor.max_abs(10);
            assert!(p.abs() <= 1e-13 * scale, "{p}");
        }
    }

    #[test]
    fn rhs_simple_cases() {
        let m = model(10, 6);
        let mut out = vec![1.0; 6];
        m.rhs(&[0.0; 6], &[0.0; 6], &mut out);
        assert_eq!(out, vec![0.0; 6]);
        let mut x = vec![0.0; 6];
        x[0] = 0.3;
        m.rhs(&x, &[0.0; 6], &mut out);
        assert!((out[0] + m.tau[0] * 0.3).abs() < 1e-14);
    }

    #[test]
    fn feedback_jacobian_reproduces_closed_loop_block() {
        let m = model(12, 10);
        let pack = ConstantPack::practical(0.3, 1.0, 2.0, 1.0).unwrap();
        let p = feedback_params(m.tau[4] + 1e-9, &pack, &m.tau).unwrap();
        assert_eq!(p.n_modes, 5);
        let ctl = LinearFeedback {
            params: p.clone(),
            cutoff: false,
        };
        let h = 1e-6;
        let mut c = vec![0.0; 10];
        let (mut fp, mut fm) = (vec![0.0; 10], vec![0.0; 10]);
        for col in 0..5 {
            let mut xp = vec![0.0; 10];
            xp[col] = h;
            let xm: Vec<f64> = xp.iter().map(|v| -v).collect();
            ctl.control(0.0, &xp, &mut c);
            m.rhs(&xp, &c, &mut fp);
            ctl.control(0.0, &xm, &mut c);
            m.rhs(&xm, &c, &mut fm);
            for row in 0..5 {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                let want = if row == col { -m.tau[row] } else { 0.0 } - p.gamma * m.gram.at(row, col);
                assert!((fd - want).abs() <= 1e-12 * want.abs().max(1.0), "{row} {col}");
            }
        }
    }

    #[test]
    fn integrating_factor_is_exact_for_linear_decay() {
        let mut m = model(10, 8);
        m.tensor = TrilinearTensor::zeros(8);
        let x0 = random_x(8, 1.0, 4);
        let dt = 1e-3;
        let traj = simulate(&m, &mut NoControl, &x0, 0.0, 10.0 * dt, dt, 10).unwrap();
        let xe = traj.x.last().unwrap();
        for k in 0..8 {
            let want = (-m.tau[k] * 10.0 * dt).exp() * x0[k];
            assert!((xe[k] - want).abs() <= 1e-14 * x0[k].abs().max(1e-300) * 10.0);
        }
    }

    #[test]
    fn heun_step_is_second_order() {
        let m = model(10, 8);
        let pack = ConstantPack::practical(0.3, 1.0, 2.0, 1.0).unwrap();
        let p = feedback_params(m.tau[3], &pack, &m.tau).unwrap();
        let x0 = random_x(8, 2.0, 9);
        let end = 0.02;
        let run = |dt: f64| {
            let mut ctl = LinearFeedback {
                params: p.clone(),
                cutoff: false,
            };
            simulate(&m, &mut ctl, &x0, 0.0, end, dt, usize::MAX >> 1)
                .unwrap()
                .x
                .last()
                .unwrap()
                .clone()
        };
        let base = 2e-3;
        let reference = run(base / 16.0);
        let err = |dt: f64| {
            let x = run(dt);
            l2(&x.iter().zip(&reference).map(|(a, b)| a - b).collect::<Vec<_>>())
        };
        let (e1, e2) = (err(base), err(base / 2.0));
        let ratio = e1 / e2;
        assert!(ratio > 3.0 && ratio < 5.5, "ratio {ratio}");
    }

    #[test]
    fn zero_state_is_fixed_and_deterministic() {
        let m = model(10, 8);
        let pack = ConstantPack::practical(0.3, 1.0, 2.0, 1.0).unwrap();
        let p = feedback_params(m.tau[3], &pack, &m.tau).unwrap();
        let mut ctl = LinearFeedback {
            params: p,
            cutoff: true,
        };
        let traj = simulate(&m, &mut ctl, &[0.0; 8], 0.0, 0.1, 1e-3, 10).unwrap();
        assert!(traj.x.iter().all(|x| x.iter().all(|&v| v == 0.0)));
        assert_eq!(traj.sup_control, 0.0);
    }

    #[test]
    fn semigroup_property() {
        let m = model(10, 8);
        let x0 = random_x(8, 1.0, 2);
        let dt = 1e-3;
        let whole = simulate(&m, &mut NoControl, &x0, 0.0, 0.05, dt, 1).unwrap();
        let a = simulate(&m, &mut NoControl, &x0, 0.0, 0.02, dt, 1).unwrap();
        let b = simulate(&m, &mut NoControl, a.x.last().unwrap(), 0.02, 0.05, dt, 1).unwrap();
        let (xw, xb) = (whole.x.last().unwrap(), b.x.last().unwrap());
        for k in 0..8 {
            assert!((xw[k] - xb[k]).abs() <= 1e-12 * l2(&x0));
        }
    }

    #[test]
    fn free_decay_below_poincare_bound() {
        let m = model(10, 8);
        let x0 = random_x(8, 1e-3, 5);
        let traj = simulate(&m, &mut NoControl, &x0, 0.0, 0.05, 1e-4, 10).unwrap();
        let n0 = l2(&x0);
        for (t, n) in traj.t.iter().zip(traj.norm_h()) {
            assert!(n <= (-m.tau[0] * t).exp() * n0 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn lyapunov_identities() {
        let p = FeedbackParams {
            lambda: 1.0,
            n_modes: 2,
            gamma: 1.0,
            mu: 1.0,
            r: 0.1,
            ln_gamma: 0.0,
            ln_r: 0.1f64.ln(),
        };
        let x = [1.0, 2.0, 3.0];
        assert_eq!(lyapunov_v(&x, &p), 14.0);
        let p2 = FeedbackParams { mu: 5.0, ..p };
        let v = lyapunov_v(&x, &p2);
        assert!(v >= 14.0 && v <= 5.0 * 14.0);
    }

    #[test]
    fn blowup_guard_aborts() {
        let mut m = model(10, 6);
        m.nu = -100.0;
        let x0 = vec![1.0; 6];
        let r = simulate(&m, &mut NoControl, &x0, 0.0, 1.0, 1e-3, 10);
        assert!(matches!(r, Err(Error::BlowUp { .. })), "{r:?}");
    }

    #[test]
    fn schedule_controller_tracks_intervals() {
        let m = model(10, 8);
        let pack = ConstantPack::practical(0.1, 0.5, 1.0, 1.0).unwrap();
        let sched = build_schedule(1, &pack, &m.tau, 3, true).unwrap();
        let mut ctl = ScheduledFeedback::new(sched, 0.0, false, false);
        let traj = simulate(&m, &mut ctl, &random_x(8, 1e-3, 1), 0.0, 0.5, 1.0 / 1024.0, 8).unwrap();
        assert_eq!(traj.interval[0], Some(0));
        assert_eq!(*traj.interval.last().unwrap(), None);
        assert!(traj.t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn closed_loop_propagator_matches_fine_rk4() {
        let m = model(10, 8);
        let pack = ConstantPack::practical(0.3, 1.0, 2.0, 1.0).unwrap();
        let p = feedback_params(m.tau[4] + 1e-9, &pack, &m.tau).unwrap();
        let h = 2e-3;
        let e = closed_loop_propagator(&m, Some(&p), h).unwrap().to_dense(8);
        let ctl = LinearFeedback {
            params: p.clone(),
            cutoff: false,
        };
        let lin = |x: &[f64], out: &mut [f64]| {
            let mut c = vec![0.0; 8];
            ctl.control(0.0, x, &mut c);
            for k in 0..8 {
                let gc: f64 = (0..8).map(|i| m.gram.at(k, i) * c[i]).sum();
                out[k] = -m.tau[k] * x[k] + gc;
            }
        };
        for col in 0..8 {
            let mut x = vec![0.0; 8];
            x[col] = 1.0;
            let sub = 20_000;
            let dh = h / sub as f64;
            let (mut a, mut b, mut c, mut d) = (vec![0.0; 8], vec![0.0; 8], vec![0.0; 8], vec![0.0; 8]);
            for _ in 0..sub {
                lin(&x, &mut a);
                let xa: Vec<f64> = (0..8).map(|k| x[k] + 0.5 * dh * a[k]).collect();
                lin(&xa, &mut b);
                let xb: Vec<f64> = (0..8).map(|k| x[k] + 0.5 * dh * b[k]).collect();
                lin(&xb, &mut c);
                let xc: Vec<f64> = (0..8).map(|k| x[k] + dh * c[k]).collect();
                lin(&xc, &mut d);
                for k in 0..8 {
                    x[k] += dh / 6.0 * (a[k] + 2.0 * b[k] + 2.0 * c[k] + d[k]);
                }
            }
            for row in 0..8 {
                assert!((e[row * 8 + col] - x[row]).abs() < 1e-10, "{row} {col}");
            }
        }
    }

    #[test]
    fn propagator_composes() {
        let m = model(10, 8);
        let pack = ConstantPack::practical(0.5, 1.5, 2.0, 1.0).unwrap();
        let p = feedback_params(m.tau[5] + 1e-9, &pack, &m.tau).unwrap();
        let one = closed_loop_propagator(&m, Some(&p), 1e-3).unwrap().to_dense(8);
        let two = closed_loop_propagator(&m, Some(&p), 2e-3).unwrap().to_dense(8);
        for i in 0..8 {
            for j in 0..8 {
                let sq: f64 = (0..8).map(|k| one[i * 8 + k] * one[k * 8 + j]).sum();
                assert!((sq - two[i * 8 + j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn stiff_linear_feedback_is_stable_at_large_steps() {
        let mut m = model(10, 8);
        m.tensor = TrilinearTensor::zeros(8);
        let pack = ConstantPack::practical(2.0, 6.0, 2.0, 1.0).unwrap();
        let p = feedback_params(m.tau[4] + 1e-9, &pack, &m.tau).unwrap();
        assert!(p.gamma * 1e-3 > 100.0);
        let mut ctl = LinearFeedback {
            params: p,
            cutoff: false,
        };
        let x0 = random_x(8, 1.0, 3);
        let traj = simulate(&m, &mut ctl, &x0, 0.0, 0.1, 1e-3, 10).unwrap();
        let n = traj.norm_h();
        assert!(n.last().unwrap() < &(1e-2 * n[0]));
    }
}
