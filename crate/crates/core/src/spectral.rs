//! Stokes eigenbasis through the clamped stream-function formulation.
//!
//! In 2D the Stokes eigenproblem on divergence-free fields reduces to
//! `Δ²ψ = τ(−Δψ)` with `ψ = ∂ψ/∂n = 0` on the boundary. Discretely this is
//! the symmetric-definite pencil `K2 ψ = τ K1 ψ`, where `ψᵀK1ψ` is exactly
//! the staggered velocity L² norm and `K2` is the 13-point clamped
//! biharmonic.

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{inner_l2, stream_to_velocity, Grid, Region, ScalarField, VelocityField};

/// Dense stiffness pair on the interior nodes.
#[derive(Debug, Clone)]
pub struct Operators {
    /// `hx·hy·(−Δ_h)`, 5-point Dirichlet Laplacian.
    pub k1: Mat<f64>,
    /// `hx·hy·Σ w (Δ_h ψ)²` over all nodes, boundary Laplacians taken with
    /// the mirrored ghost layer and trapezoid weight ½.
    pub k2: Mat<f64>,
}

impl Operators {
    pub fn dim(&self) -> usize {
        self.k1.nrows()
    }
}

/// Sparse row of a node Laplacian in terms of interior unknowns.
fn node_laplacian(grid: &Grid, i: usize, j: usize, row: &mut Vec<(usize, f64)>) {
    // (i, j) on the full lattice, 0..=nx+1 × 0..=ny+1
    row.clear();
    let (nx, ny) = (grid.nx(), grid.ny());
    let ax = 1.0 / (grid.hx * grid.hx);
    let ay = 1.0 / (grid.hy * grid.hy);
    let interior = |p: usize, q: usize| p >= 1 && p <= nx && q >= 1 && q <= ny;
    let on_x_wall = i == 0 || i == nx + 1;
    let on_y_wall = j == 0 || j == ny + 1;
    if on_x_wall && on_y_wall {
        return;
    }
    if on_y_wall {
        // ψ vanishes along the wall; ghost mirror doubles the inward neighbour
        let q = if j == 0 { 1 } else { ny };
        row.push((grid.node(i - 1, q - 1), 2.0 * ay));
        return;
    }
    if on_x_wall {
        let p = if i == 0 { 1 } else { nx };
        row.push((grid.node(p - 1, j - 1), 2.0 * ax));
        return;
    }
    row.push((grid.node(i - 1, j - 1), -2.0 * ax - 2.0 * ay));
    for (p, q, a) in [
        (i - 1, j, ax),
        (i + 1, j, ax),
        (i, j - 1, ay),
        (i, j + 1, ay),
    ] {
        if interior(p, q) {
            row.push((grid.node(p - 1, q - 1), a));
        }
    }
}

pub fn assemble_operators(grid: &Grid) -> Operators {
    let n = grid.node_count();
    let (nx, ny) = (grid.nx(), grid.ny());
    let area = grid.cell_area();
    let ax = area / (grid.hx * grid.hx);
    let ay = area / (grid.hy * grid.hy);

    let mut k1 = Mat::<f64>::zeros(n, n);
    for j in 0..ny {
        for i in 0..nx {
            let p = grid.node(i, j);
            k1[(p, p)] = 2.0 * ax + 2.0 * ay;
            if i + 1 < nx {
                let q = grid.node(i + 1, j);
                k1[(p, q)] = -ax;
                k1[(q, p)] = -ax;
            }
            if j + 1 < ny {
                let q = grid.node(i, j + 1);
                k1[(p, q)] = -ay;
                k1[(q, p)] = -ay;
            }
        }
    }

    let mut k2 = Mat::<f64>::zeros(n, n);
    let mut row = Vec::with_capacity(5);
    for j in 0..=ny + 1 {
        for i in 0..=nx + 1 {
            node_laplacian(grid, i, j, &mut row);
            if row.is_empty() {
                continue;
            }
            let boundary = i == 0 || j == 0 || i == nx + 1 || j == ny + 1;
            let w = if boundary { 0.5 * area } else { area };
            for &(p, a) in &row {
                for &(q, b) in &row {
                    if q >= p {
                        k2[(p, q)] += w * (a * b);
                    }
                }
            }
        }
    }
    for p in 0..n {
        for q in p + 1..n {
            k2[(q, p)] = k2[(p, q)];
        }
    }
    Operators { k1, k2 }
}

/// Retained Stokes modes, ascending in eigenvalue, velocity L²-orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct StokesBasis {
    pub grid: Grid,
    pub tau: Vec<f64>,
    pub psi: Vec<ScalarField>,
    pub e: Vec<VelocityField>,
}

impl StokesBasis {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn tau_max(&self) -> f64 {
        *self.tau.last().expect("non-empty basis")
    }

    /// Exact inverse of storing `tau` and `psi`: no renormalization, so a
    /// cached basis is bit-identical to the solved one.
    pub(crate) fn from_stored(grid: Grid, tau: Vec<f64>, psi: Vec<ScalarField>) -> Result<Self> {
        if tau.len() != psi.len() || tau.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: tau.len(),
                got: psi.len(),
            });
        }
        let e = psi
            .iter()
            .map(|p| stream_to_velocity(p, &grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, tau, psi, e })
    }

    /// Rebuilds a basis from stored eigenpairs (e.g. the cache file),
    /// normalizing each stream function to unit velocity norm.
    pub fn from_parts(grid: Grid, tau: Vec<f64>, psi: Vec<ScalarField>) -> Result<Self> {
        if tau.len() != psi.len() || tau.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: tau.len(),
                got: psi.len(),
            });
        }
        if tau[0] <= 0.0 {
            return Err(Error::NonPositiveEigenvalue(tau[0]));
        }
        let mut psi_out = Vec::with_capacity(psi.len());
        let mut e = Vec::with_capacity(psi.len());
        for mut p in psi {
            let u = stream_to_velocity(&p, &grid)?;
            let norm = inner_l2(&u, &u, &grid, Region::Full)?.sqrt();
            p.values.iter_mut().for_each(|v| *v /= norm);
            e.push(stream_to_velocity(&p, &grid)?);
            psi_out.push(p);
        }
        Ok(Self {
            grid,
            tau,
            psi: psi_out,
            e,
        })
    }
}

/// Smallest `m` eigenpairs of `K2 ψ = τ K1 ψ` by Cholesky reduction to a
/// standard symmetric problem.
pub fn solve_eigenbasis(ops: &Operators, grid: &Grid, m: usize) -> Result<StokesBasis> {
    let n = ops.dim();
    if n != grid.node_count() {
        return Err(Error::ShapeMismatch {
            expected: grid.node_count(),
            got: n,
        });
    }
    if m == 0 || m > n {
        return Err(Error::arg("M", format!("must be in 1..={n}, got {m}")));
    }
    let llt = ops
        .k1
        .llt(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("K1 is not positive definite: {e:?}")))?;
    let l = llt.L().to_owned();

    // C = L⁻¹ K2 L⁻ᵀ
    let mut y = ops.k2.clone();
    l.solve_lower_triangular_in_place(&mut y);
    let mut c = y.transpose().to_owned();
    l.solve_lower_triangular_in_place(&mut c);
    for p in 0..n {
        for q in p + 1..n {
            let s = 0.5 * (c[(p, q)] + c[(q, p)]);
            c[(p, q)] = s;
            c[(q, p)] = s;
        }
    }
    let evd = c
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let tau: Vec<f64> = (0..m).map(|k| s[k]).collect();
    if !(tau[0] > 0.0) {
        return Err(Error::NonPositiveEigenvalue(tau[0]));
    }

    let mut v = Mat::<f64>::zeros(n, m);
    for k in 0..m {
        for p in 0..n {
            v[(p, k)] = evd.U()[(p, k)];
        }
    }
    l.transpose().solve_upper_triangular_in_place(&mut v);

    let mut psi = Vec::with_capacity(m);
    for k in 0..m {
        let mut col = v.col_as_slice(k).to_vec();
        // sign convention: the entry of largest magnitude is positive
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        psi.push(ScalarField::from_values(grid, col)?);
    }
    StokesBasis::from_parts(grid.clone(), tau, psi)
}

/// `G[i][j] = (e_i, e_j)` over a region, `M × M`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    pub m: usize,
    pub g: Vec<f64>,
}

impl GramMatrix {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.m + j]
    }

    pub fn identity(m: usize) -> Self {
        let mut g = vec![0.0; m * m];
        for i in 0..m {
            g[i * m + i] = 1.0;
        }
        Self { m, g }
    }

    /// Leading `n × n` block, `J_n`.
    pub fn leading_block(&self, n: usize) -> Mat<f64> {
        Mat::from_fn(n, n, |i, j| self.at(i, j))
    }

    /// Smallest eigenvalue of the leading `n × n` block.
    pub fn lambda_min(&self, n: usize) -> Result<f64> {
        if n == 0 || n > self.m {
            return Err(Error::arg("n", format!("leading block size {n} outside 1..={}", self.m)));
        }
        let vals = self
            .leading_block(n)
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
        Ok(vals[0])
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.leading_block(self.m)
            .self_adjoint_eigenvalues(Side::Lower)
            .map_err(|e| Error::Eigensolver(format!("{e:?}")))
    }
}

pub fn assemble_gram(basis: &StokesBasis, region: Region) -> Result<GramMatrix> {
    let m = basis.len();
    let grid = &basis.grid;
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let a = inner_l2(&basis.e[i], &basis.e[j], grid, region)?;
            let b = inner_l2(&basis.e[j], &basis.e[i], grid, region)?;
            let s = 0.5 * (a + b);
            g[i * m + j] = s;
            g[j * m + i] = s;
        }
    }
    Ok(GramMatrix { m, g })
}

/// `N(λ)`: number of retained eigenvalues `≤ λ`.
pub fn count_modes(tau: &[f64], lambda: f64) -> Result<usize> {
    if !(lambda > 0.0) {
        return Err(Error::arg("lambda", format!("must be positive, got {lambda}")));
    }
    let tau_max = *tau.last().ok_or_else(|| Error::arg("tau", "empty spectrum"))?;
    if lambda >= tau_max {
        return Err(Error::BasisTooSmall { lambda, tau_max });
    }
    Ok(tau.partition_point(|&t| t <= lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Row {
    pub lambda: f64,
    pub n_modes: usize,
    pub lambda_min: f64,
    /// Smallest constant satisfying the inequality at this λ alone.
    pub c1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C1Fit {
    pub c1: f64,
    pub rows: Vec<C1Row>,
}

const C1_REL_TOL: f64 = 1e-6;

/// Smallest `C ≥ 1` with `C⁻¹ e^{−C√λ} ≤ lambda_min`, by bisection on the
/// strictly decreasing left-hand side. Returns the feasible bracket end.
pub fn c1_for_level(lambda: f64, lambda_min: f64) -> f64 {
    let s = lambda.sqrt();
    let target = -lambda_min.ln();
    // ln of the inverse bound, increasing in C
    let g = |c: f64| c.ln() + c * s;
    if g(1.0) >= target {
        return 1.0;
    }
    let mut lo = 1.0;
    let mut hi = 2.0;
    while g(hi) < target {
        lo = hi;
        hi *= 2.0;
    }
    while (hi - lo) > C1_REL_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Fits the spectral-inequality constant over `lambdas`.
pub fn fit_c1(basis: &StokesBasis, gram: &GramMatrix, lambdas: &[f64]) -> Result<C1Fit> {
    if lambdas.is_empty() {
        return Err(Error::arg("lambda_grid", "empty"));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(sorted.len());
    for &lambda in &sorted {
        if lambda < basis.tau[0] {
            return Err(Error::arg(
                "lambda_grid",
                format!("λ = {lambda} below τ₁ = {}", basis.tau[0]),
            ));
        }
        let n_modes = count_modes(&basis.tau, lambda)?;
        let lambda_min = gram.lambda_min(n_modes)?;
        if !(lambda_min > 0.0) {
            return Err(Error::SpectralDegeneracy {
                lambda,
                n_modes,
                lambda_min,
            });
        }
        rows.push(C1Row {
            lambda,
            n_modes,
            lambda_min,
            c1: c1_for_level(lambda, lambda_min),
        });
    }
    let c1 = rows.iter().map(|r| r.c1).fold(1.0, f64::max);
    Ok(C1Fit { c1, rows })
}

/// Default λ grid: the eigenvalues `τ₁ … τ_{M−4}` (at least `τ₁`).
pub fn default_lambda_grid(basis: &StokesBasis) -> Vec<f64> {
    let m = basis.len();
    let upto = m.saturating_sub(4).max(1);
    let tau_max = basis.tau_max();
    basis.tau[..upto]
        .iter()
        .copied()
        .filter(|&t| t < tau_max)
        .collect()
}
