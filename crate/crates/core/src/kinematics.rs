//! Finite-strain kinematics on displacement fields.
//!
//! F = I + ∇u is evaluated with central differences in physical units and
//! one-sided differences on the boundary planes. The compressible
//! Neo-Hookean density splits into a distortional part
//! `I1 · J^(-2/3) - 3` and a volumetric part `(J - 1)^2`:
//!
//! ```text
//! phi = mu/2 * (I1 * J^(-2/3) - 3) + kappa/2 * (J - 1)^2      [kPa]
//! ```

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volgrid::{for_each_line, sum_ordered, DisplacementField, Grid, Volume};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Floor applied to J inside the `J^(-2/3)` factor.
pub const DEFAULT_J_FLOOR: f64 = 1e-6;

/// Row-major 3x3 matrix.
pub type Mat3<T> = [[T; 3]; 3];

pub fn identity<T: Real>() -> Mat3<T> {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn det3<T: Real>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix, i.e. ∂det/∂m.
pub fn cofactor<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

pub fn transpose<T: Real>(m: &Mat3<T>) -> Mat3<T> {
    let mut t = *m;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j][i] = v;
        }
    }
    t
}

pub fn matmul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut c = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn trace<T: Real>(m: &Mat3<T>) -> T {
    m[0][0] + m[1][1] + m[2][2]
}

/// Per-voxel 3x3 tensors (F, C or B).
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField<T> {
    pub grid: Grid,
    pub data: Vec<Mat3<T>>,
}

/// Shear and bulk moduli in kPa.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialParams {
    pub mu: f64,
    pub kappa: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        // kappa / mu = 50
        Self { mu: 2.0, kappa: 100.0 }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.kappa > 0.0 && self.mu.is_finite() && self.kappa.is_finite()) {
            return Err(Error::invalid(format!(
                "material moduli must be positive, got mu={} kappa={}",
                self.mu, self.kappa
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// B = F Fᵀ
    Left,
    /// C = Fᵀ F
    Right,
}

#[derive(Clone, Debug)]
pub struct Invariants<T> {
    pub i1: Volume<T>,
    pub i2: Volume<T>,
    pub i3: Volume<T>,
}

#[derive(Clone, Debug)]
pub struct EnergyMaps<T> {
    /// `I1 J^(-2/3) - 3`, dimensionless.
    pub phi_dis: Volume<T>,
    /// `(J - 1)^2`, dimensionless.
    pub phi_vol: Volume<T>,
    /// Total density in kPa.
    pub phi: Volume<T>,
    /// Voxels with J at or below the floor.
    pub fold_count: usize,
}

fn check_fd_grid(grid: &Grid) -> Result<()> {
    if grid.dims.iter().any(|&n| n < 3) {
        return Err(Error::invalid(format!(
            "finite differences need at least 3 voxels per axis, got {:?}",
            grid.dims
        )));
    }
    Ok(())
}

/// ∂v/∂x_axis: central differences inside, one-sided on the two end planes.
pub(crate) fn partial<T: Real>(values: &[T], dims: [usize; 3], h: f64, axis: usize) -> Vec<T> {
    let inv = T::lit(1.0 / h);
    let half = T::lit(0.5 / h);
    for_each_line(values, dims, axis, |v, out| {
        let n = v.len();
        out[0] = (v[1] - v[0]) * inv;
        out[n - 1] = (v[n - 1] - v[n - 2]) * inv;
        for i in 1..n - 1 {
            out[i] = (v[i + 1] - v[i - 1]) * half;
        }
    })
}

/// Adjoint of [`partial`]: returns Dᵀg.
pub(crate) fn partial_adjoint<T: Real>(g: &[T], dims: [usize; 3], h: f64, axis: usize) -> Vec<T> {
    let inv = T::lit(1.0 / h);
    let half = T::lit(0.5 / h);
    for_each_line(g, dims, axis, |g, out| {
        let n = g.len();
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            if k == 0 {
                acc -= g[0] * inv;
            }
            if k == n - 1 {
                acc += g[n - 1] * inv;
            }
            if k >= 1 {
                let p = k - 1;
                acc += if p == 0 { g[0] * inv } else { g[p] * half };
            }
            if k + 1 < n {
                let p = k + 1;
                acc -= if p == n - 1 { g[p] * inv } else { g[p] * half };
            }
            *o = acc;
        }
    })
}

/// Displacement Jacobian ∂u_i/∂x_j per voxel, as 9 planes `[i * 3 + j]`.
fn displacement_jacobian<T: Real>(field: &DisplacementField<T>) -> Result<Vec<Vec<T>>> {
    check_fd_grid(&field.grid)?;
    let dims = field.grid.dims;
    let comps: Vec<Vec<T>> = (0..3).map(|c| field.component(c).data).collect();
    let mut planes = Vec::with_capacity(9);
    for comp in &comps {
        for j in 0..3 {
            planes.push(partial(comp, dims, field.grid.spacing[j], j));
        }
    }
    Ok(planes)
}

/// F = I + ∂u/∂x.
pub fn deformation_gradient<T: Real>(field: &DisplacementField<T>) -> Result<TensorField<T>> {
    let planes = displacement_jacobian(field)?;
    let data = (0..field.grid.len())
        .map(|idx| {
            let mut f = identity::<T>();
            for i in 0..3 {
                for j in 0..3 {
                    f[i][j] += planes[i * 3 + j][idx];
                }
            }
            f
        })
        .collect();
    Ok(TensorField { grid: field.grid, data })
}

pub fn cauchy_green<T: Real>(f: &TensorField<T>, side: Side) -> TensorField<T> {
    let data = f
        .data
        .par_iter()
        .map(|m| {
            let t = transpose(m);
            match side {
                Side::Left => matmul(m, &t),
                Side::Right => matmul(&t, m),
            }
        })
        .collect();
    TensorField { grid: f.grid, data }
}

/// I1 = tr C, I2 = ½((tr C)² − tr C²), I3 = det C.
pub fn invariants<T: Real>(c: &TensorField<T>) -> Invariants<T> {
    let half = T::lit(0.5);
    let mut i1 = Vec::with_capacity(c.data.len());
    let mut i2 = Vec::with_capacity(c.data.len());
    let mut i3 = Vec::with_capacity(c.data.len());
    for m in &c.data {
        let tr = trace(m);
        let tr_sq = trace(&matmul(m, m));
        i1.push(tr);
        i2.push(half * (tr * tr - tr_sq));
        i3.push(det3(m));
    }
    let grid = c.grid;
    Invariants {
        i1: Volume { grid, data: i1 },
        i2: Volume { grid, data: i2 },
        i3: Volume { grid, data: i3 },
    }
}

pub fn jacobian_det<T: Real>(f: &TensorField<T>) -> Volume<T> {
    Volume { grid: f.grid, data: f.data.par_iter().map(det3).collect() }
}

/// Pointwise energy terms `(phi_dis, phi_vol, phi)` for one F.
#[inline]
pub fn nhe_point<T: Real>(f: &Mat3<T>, mat: &MaterialParams, j_floor: T) -> (T, T, T) {
    let j = det3(f);
    let i1 = f.iter().flatten().fold(T::zero(), |a, &v| a + v * v);
    let jc = j.max(j_floor);
    let dis = i1 * jc.powf(T::lit(-2.0 / 3.0)) - T::lit(3.0);
    let vol = (j - T::one()) * (j - T::one());
    let phi = T::lit(0.5 * mat.mu) * dis + T::lit(0.5 * mat.kappa) * vol;
    (dis, vol, phi)
}

/// Energy density and its derivative ∂phi/∂F.
#[inline]
pub(crate) fn nhe_point_grad<T: Real>(f: &Mat3<T>, mat: &MaterialParams, j_floor: T) -> (T, Mat3<T>) {
    let j = det3(f);
    let cof = cofactor(f);
    let i1 = f.iter().flatten().fold(T::zero(), |a, &v| a + v * v);
    let jc = j.max(j_floor);
    let jm23 = jc.powf(T::lit(-2.0 / 3.0));
    let mu = T::lit(mat.mu);
    let kappa = T::lit(mat.kappa);
    let half = T::lit(0.5);
    let phi = half * mu * (i1 * jm23 - T::lit(3.0)) + half * kappa * (j - T::one()) * (j - T::one());
    // d(J^-2/3)/dF = -2/3 J^-5/3 cof(F), zero where the floor is active
    let dj_coef = if j > j_floor { T::lit(-2.0 / 3.0) * jm23 / jc } else { T::zero() };
    let mut p = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            p[a][b] = half * mu * (T::lit(2.0) * f[a][b] * jm23 + i1 * dj_coef * cof[a][b])
                + kappa * (j - T::one()) * cof[a][b];
        }
    }
    (phi, p)
}

/// Distortional, volumetric and total Neo-Hookean densities per voxel.
pub fn nhe_density<T: Real>(f: &TensorField<T>, mat: &MaterialParams, j_floor: f64) -> Result<EnergyMaps<T>> {
    mat.validate()?;
    if !(j_floor > 0.0) {
        return Err(Error::invalid("j_floor must be positive"));
    }
    let floor = T::lit(j_floor);
    let terms: Vec<(T, T, T)> = f.data.par_iter().map(|m| nhe_point(m, mat, floor)).collect();
    let fold_count = f.data.iter().filter(|m| det3(m) <= floor).count();
    let grid = f.grid;
    Ok(EnergyMaps {
        phi_dis: Volume { grid, data: terms.iter().map(|t| t.0).collect() },
        phi_vol: Volume { grid, data: terms.iter().map(|t| t.1).collect() },
        phi: Volume { grid, data: terms.iter().map(|t| t.2).collect() },
        fold_count,
    })
}

/// Voxel-mean Neo-Hookean energy (kPa) of a displacement field.
pub fn nhe_total<T: Real>(field: &DisplacementField<T>, mat: &MaterialParams) -> Result<T> {
    nhe_total_masked(field, mat, None)
}

/// As [`nhe_total`], averaging only over voxels where `mask` is true.
pub fn nhe_total_masked<T: Real>(
    field: &DisplacementField<T>,
    mat: &MaterialParams,
    mask: Option<&[bool]>,
) -> Result<T> {
    let f = deformation_gradient(field)?;
    let maps = nhe_density(&f, mat, DEFAULT_J_FLOOR)?;
    match mask {
        None => Ok(maps.phi.mean()),
        Some(m) => {
            if m.len() != field.grid.len() {
                return Err(Error::GridMismatch("energy mask length".into()));
            }
            let vals: Vec<T> = maps.phi.data.iter().zip(m).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
            if vals.is_empty() {
                return Ok(T::zero());
            }
            Ok(sum_ordered(&vals) / T::lit(vals.len() as f64))
        }
    }
}

/// Voxel-mean energy and its gradient with respect to every displacement
/// component (exact adjoint of the finite-difference stencil).
pub fn nhe_total_and_gradient<T: Real>(
    field: &DisplacementField<T>,
    mat: &MaterialParams,
    j_floor: f64,
) -> Result<(T, DisplacementField<T>)> {
    let f = deformation_gradient(field)?;
    let floor = T::lit(j_floor);
    let pts: Vec<(T, Mat3<T>)> = f.data.par_iter().map(|m| nhe_point_grad(m, mat, floor)).collect();
    let n = T::lit(field.grid.len() as f64);
    let phis: Vec<T> = pts.iter().map(|p| p.0).collect();
    let total = sum_ordered(&phis) / n;

    let dims = field.grid.dims;
    let mut grad = vec![T::zero(); field.data.len()];
    for i in 0..3 {
        let mut gi = vec![T::zero(); field.grid.len()];
        for j in 0..3 {
            let pij: Vec<T> = pts.iter().map(|p| p.1[i][j] / n).collect();
            let adj = partial_adjoint(&pij, dims, field.grid.spacing[j], j);
            for (g, a) in gi.iter_mut().zip(adj) {
                *g += a;
            }
        }
        for (idx, g) in gi.into_iter().enumerate() {
            grad[3 * idx + i] = g;
        }
    }
    Ok((total, DisplacementField { grid: field.grid, data: grad }))
}

/// Voxels not on any boundary plane.
pub fn interior_mask(grid: &Grid, margin: usize) -> Vec<bool> {
    (0..grid.len())
        .map(|idx| {
            let c = grid.coords(idx);
            (0..3).all(|a| c[a] >= margin && c[a] + margin < grid.dims[a])
        })
        .collect()
}
