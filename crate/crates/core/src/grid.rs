//! Rectangular domain discretization.
//!
//! Stream functions live on the interior nodes of a uniform grid and are
//! extended by zero onto the boundary. Velocities are stored on a staggered
//! (MAC) layout: the horizontal component on vertical cell faces, the
//! vertical component on horizontal cell faces. Each component is a centred
//! difference of the stream function across its face, so the discrete
//! divergence on cells vanishes identically and the velocity L² norm is
//! exactly the 5-point Dirichlet energy of the stream function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    /// `[a, b, c, d]` ordering used by the config file.
    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.x1, self.y0, self.y1]
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// Open-rectangle membership.
    pub fn contains_strict(&self, x: f64, y: f64) -> bool {
        x > self.x0 && x < self.x1 && y > self.y0 && y < self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    pub omega: Rect,
}

impl DomainSpec {
    pub fn unit_square(n: usize, omega: Rect) -> Self {
        Self {
            lx: 1.0,
            ly: 1.0,
            nx: n,
            ny: n,
            omega,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lx.is_finite() && self.lx > 0.0 && self.ly.is_finite() && self.ly > 0.0) {
            return Err(Error::InvalidDomain(format!(
                "side lengths must be positive, got Lx = {}, Ly = {}",
                self.lx, self.ly
            )));
        }
        if self.nx < 3 || self.ny < 3 {
            return Err(Error::InvalidDomain(format!(
                "need at least 3 interior nodes per axis, got nx = {}, ny = {}",
                self.nx, self.ny
            )));
        }
        let w = &self.omega;
        let finite = w.to_array().iter().all(|v| v.is_finite());
        if !finite || w.x1 <= w.x0 || w.y1 <= w.y0 {
            return Err(Error::InvalidDomain(format!(
                "omega must have positive area, got {:?}",
                w.to_array()
            )));
        }
        if w.x0 < 0.0 || w.x1 > self.lx || w.y0 < 0.0 || w.y1 > self.ly {
            return Err(Error::InvalidDomain(format!(
                "omega {:?} is not contained in [0, {}] x [0, {}]",
                w.to_array(),
                self.lx,
                self.ly
            )));
        }
        Ok(())
    }
}

/// Which part of the domain an inner product integrates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Full,
    Control,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub spec: DomainSpec,
    pub hx: f64,
    pub hy: f64,
    /// Interior node abscissae, `x[i] = (i + 1) hx`.
    pub x: Vec<f64>,
    /// Interior node ordinates, `y[j] = (j + 1) hy`.
    pub y: Vec<f64>,
    /// Node indicator of the control window, row-major with x fastest.
    pub omega_mask: Vec<u8>,
    mask_u1: Vec<f64>,
    mask_u2: Vec<f64>,
}

pub fn build_grid(spec: &DomainSpec) -> Result<Grid> {
    spec.validate()?;
    let (nx, ny) = (spec.nx, spec.ny);
    let hx = spec.lx / (nx + 1) as f64;
    let hy = spec.ly / (ny + 1) as f64;
    let x: Vec<f64> = (1..=nx).map(|i| i as f64 * hx).collect();
    let y: Vec<f64> = (1..=ny).map(|j| j as f64 * hy).collect();
    let w = spec.omega;

    let mut omega_mask = Vec::with_capacity(nx * ny);
    for &yj in &y {
        for &xi in &x {
            omega_mask.push(u8::from(w.contains_strict(xi, yj)));
        }
    }
    let mut mask_u1 = Vec::with_capacity(nx * (ny + 1));
    for j in 0..=ny {
        let yh = (j as f64 + 0.5) * hy;
        for &xi in &x {
            mask_u1.push(if w.contains_strict(xi, yh) { 1.0 } else { 0.0 });
        }
    }
    let mut mask_u2 = Vec::with_capacity((nx + 1) * ny);
    for &yj in &y {
        for i in 0..=nx {
            let xh = (i as f64 + 0.5) * hx;
            mask_u2.push(if w.contains_strict(xh, yj) { 1.0 } else { 0.0 });
        }
    }
    Ok(Grid {
        spec: spec.clone(),
        hx,
        hy,
        x,
        y,
        omega_mask,
        mask_u1,
        mask_u2,
    })
}

impl Grid {
    pub fn nx(&self) -> usize {
        self.spec.nx
    }

    pub fn ny(&self) -> usize {
        self.spec.ny
    }

    pub fn node_count(&self) -> usize {
        self.spec.nx * self.spec.ny
    }

    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * self.spec.nx + i
    }

    pub fn omega_node_count(&self) -> usize {
        self.omega_mask.iter().map(|&m| m as usize).sum()
    }

    /// Number of staggered velocity samples inside the control window.
    pub fn omega_velocity_count(&self) -> usize {
        (self.mask_u1.iter().sum::<f64>() + self.mask_u2.iter().sum::<f64>()) as usize
    }

    fn masks(&self, region: Region) -> Option<(&[f64], &[f64])> {
        match region {
            Region::Full => None,
            Region::Control => Some((&self.mask_u1, &self.mask_u2)),
        }
    }

    /// Stream function value on the full node lattice (boundary included),
    /// `i` in `0..=nx+1`, `j` in `0..=ny+1`; zero on the boundary.
    #[inline]
    fn psi_full(&self, psi: &[f64], i: usize, j: usize) -> f64 {
        let (nx, ny) = (self.spec.nx, self.spec.ny);
        if i == 0 || j == 0 || i == nx + 1 || j == ny + 1 {
            0.0
        } else {
            psi[(j - 1) * nx + (i - 1)]
        }
    }

    /// Stream function on an index lattice padded by two layers: boundary
    /// nodes carry zero and the outer ghost layer mirrors the first interior
    /// layer (`ψ₋₁ = ψ₁`), which encodes the clamped condition `∂ψ/∂n = 0`.
    pub fn clamped_extension(&self, psi: &ScalarField) -> PaddedField {
        let (nx, ny) = (self.spec.nx, self.spec.ny);
        let w = nx + 4;
        let h = ny + 4;
        let mut v = vec![0.0; w * h];
        for j in 0..ny {
            for i in 0..nx {
                v[(j + 2) * w + (i + 2)] = psi.values[j * nx + i];
            }
        }
        // mirror in x, then in y (the second pass fills the corner ghosts)
        for j in 0..h {
            v[j * w] = v[j * w + 2];
            v[j * w + (w - 1)] = v[j * w + (w - 3)];
        }
        for i in 0..w {
            v[i] = v[2 * w + i];
            v[(h - 1) * w + i] = v[(h - 3) * w + i];
        }
        PaddedField { width: w, height: h, values: v }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        Self {
            nx: grid.nx(),
            ny: grid.ny(),
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::ShapeMismatch {
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        Ok(Self {
            nx: grid.nx(),
            ny: grid.ny(),
            values,
        })
    }

    pub fn from_fn(grid: &Grid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.node_count());
        for &y in &grid.y {
            for &x in &grid.x {
                values.push(f(x, y));
            }
        }
        Self {
            nx: grid.nx(),
            ny: grid.ny(),
            values,
        }
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        if self.nx != grid.nx() || self.ny != grid.ny() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// Clamped extension of a stream function, see [`Grid::clamped_extension`].
/// Padded index `(p, q)` corresponds to full-lattice node `(p - 1, q - 1)`.
#[derive(Debug, Clone)]
pub struct PaddedField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl PaddedField {
    #[inline]
    pub fn at(&self, p: usize, q: usize) -> f64 {
        self.values[q * self.width + p]
    }
}

/// Staggered velocity: `u1` on vertical faces `(x_i, y_{j+1/2})`,
/// `nx × (ny+1)`; `u2` on horizontal faces `(x_{i+1/2}, y_j)`, `(nx+1) × ny`.
/// Both row-major with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub nx: usize,
    pub ny: usize,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(grid: &Grid) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        Self {
            nx,
            ny,
            u1: vec![0.0; nx * (ny + 1)],
            u2: vec![0.0; (nx + 1) * ny],
        }
    }

    /// Samples an analytic field at the staggered locations.
    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        let mut u1 = Vec::with_capacity(nx * (ny + 1));
        for j in 0..=ny {
            let y = (j as f64 + 0.5) * grid.hy;
            for &x in &grid.x {
                u1.push(f(x, y).0);
            }
        }
        let mut u2 = Vec::with_capacity((nx + 1) * ny);
        for &y in &grid.y {
            for i in 0..=nx {
                let x = (i as f64 + 0.5) * grid.hx;
                u2.push(f(x, y).1);
            }
        }
        Self { nx, ny, u1, u2 }
    }

    pub fn is_finite(&self) -> bool {
        self.u1.iter().chain(&self.u2).all(|v| v.is_finite())
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        if self.nx != grid.nx()
            || self.ny != grid.ny()
            || self.u1.len() != grid.nx() * (grid.ny() + 1)
            || self.u2.len() != (grid.nx() + 1) * grid.ny()
        {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// Cell-centred scalar on the `(nx+1) × (ny+1)` cells tiling the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    pub cx: usize,
    pub cy: usize,
    pub values: Vec<f64>,
}

impl CellField {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.cx + i]
    }
}

/// `u = (∂ψ/∂y, -∂ψ/∂x)` by centred differences across each face, with
/// `ψ = 0` on the boundary.
pub fn stream_to_velocity(psi: &ScalarField, grid: &Grid) -> Result<VelocityField> {
    psi.check(grid)?;
    let (nx, ny) = (grid.nx(), grid.ny());
    let p = &psi.values;
    let mut u1 = Vec::with_capacity(nx * (ny + 1));
    for j in 0..=ny {
        for i in 1..=nx {
            u1.push((grid.psi_full(p, i, j + 1) - grid.psi_full(p, i, j)) / grid.hy);
        }
    }
    let mut u2 = Vec::with_capacity((nx + 1) * ny);
    for j in 1..=ny {
        for i in 0..=nx {
            u2.push(-(grid.psi_full(p, i + 1, j) - grid.psi_full(p, i, j)) / grid.hx);
        }
    }
    Ok(VelocityField { nx, ny, u1, u2 })
}

/// Node-value × cell-area quadrature of `u · v`, optionally restricted to
/// the control window.
pub fn inner_l2(u: &VelocityField, v: &VelocityField, grid: &Grid, region: Region) -> Result<f64> {
    u.check(grid)?;
    v.check(grid)?;
    let sum = match grid.masks(region) {
        None => {
            dot(&u.u1, &v.u1) + dot(&u.u2, &v.u2)
        }
        Some((m1, m2)) => masked_dot(&u.u1, &v.u1, m1) + masked_dot(&u.u2, &v.u2, m2),
    };
    Ok(sum * grid.cell_area())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn masked_dot(a: &[f64], b: &[f64], m: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(m)
        .map(|((x, y), w)| w * (x * y))
        .sum()
}

/// Cell-centred divergence `D_x u1 + D_y u2`. Face values on the walls are
/// the zero normal velocity.
pub fn discrete_divergence(u: &VelocityField, grid: &Grid) -> Result<CellField> {
    u.check(grid)?;
    let (nx, ny) = (grid.nx(), grid.ny());
    let (cx, cy) = (nx + 1, ny + 1);
    let u1_at = |i: isize, j: usize| -> f64 {
        // vertical face at x = (i + 1) hx, i in 0..nx
        if i < 0 || i >= nx as isize {
            0.0
        } else {
            u.u1[j * nx + i as usize]
        }
    };
    let u2_at = |i: usize, j: isize| -> f64 {
        if j < 0 || j >= ny as isize {
            0.0
        } else {
            u.u2[j as usize * (nx + 1) + i]
        }
    };
    let mut values = Vec::with_capacity(cx * cy);
    for j in 0..cy {
        for i in 0..cx {
            let ii = i as isize;
            let jj = j as isize;
            let dx = (u1_at(ii, j) - u1_at(ii - 1, j)) / grid.hx;
            let dy = (u2_at(i, jj) - u2_at(i, jj - 1)) / grid.hy;
            values.push(dx + dy);
        }
    }
    Ok(CellField { cx, cy, values })
}
