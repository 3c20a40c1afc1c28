//! Voxel-grid containers, interpolation, warping and the resolution pyramid.
//!
//! Memory layout is x-fastest (`idx = i + nx * (j + ny * k)`); vector fields
//! interleave their three components per voxel. Displacements are stored in
//! physical millimetres and only converted to voxel units inside samplers.

use crate::error::{Error, Result};
use crate::scalar::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Axis-aligned voxel lattice: dimensions, spacing (mm/voxel) and the
/// physical position of voxel (0, 0, 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!("grid dimensions must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("grid spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Unit-spaced grid at the origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position (mm) of a voxel centre.
    #[inline]
    pub fn position(&self, ijk: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + ijk[0] as f64 * self.spacing[0],
            self.origin[1] + ijk[1] as f64 * self.spacing[1],
            self.origin[2] + ijk[2] as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a physical point.
    #[inline]
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Cell-edge bounding box `[lo, hi]` per axis.
    pub fn extent(&self) -> [[f64; 2]; 3] {
        let mut e = [[0.0; 2]; 3];
        for a in 0..3 {
            e[a][0] = self.origin[a] - 0.5 * self.spacing[a];
            e[a][1] = self.origin[a] + (self.dims[a] as f64 - 0.5) * self.spacing[a];
        }
        e
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Same lattice up to a relative tolerance on spacing and origin.
    pub fn matches(&self, other: &Grid) -> bool {
        if self.dims != other.dims {
            return false;
        }
        (0..3).all(|a| {
            let tol = 1e-9 * self.spacing[a].max(other.spacing[a]);
            (self.spacing[a] - other.spacing[a]).abs() <= tol
                && (self.origin[a] - other.origin[a]).abs() <= tol.max(1e-9)
        })
    }

    pub fn ensure_matches(&self, other: &Grid, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} spacing {:?} origin {:?} vs dims {:?} spacing {:?} origin {:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }
}

/// Scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub grid: Grid,
    pub data: Vec<T>,
}

/// Dense displacement field u(x) in mm; the transform is x + u(x).
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    pub grid: Grid,
    pub data: Vec<T>,
}

/// Integer label image; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    pub data: Vec<u8>,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "volume data length {} does not match grid size {}",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite values"));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: T) -> Self {
        Self { grid, data: vec![value; grid.len()] }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::filled(grid, T::zero())
    }

    /// Evaluate `f` at every voxel centre (physical mm).
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> f64 + Sync) -> Self {
        let data = (0..grid.len())
            .into_par_iter()
            .map(|idx| T::lit(f(grid.position(grid.coords(idx)))))
            .collect();
        Self { grid, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Self { grid: self.grid, data: self.data.par_iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume { grid: self.grid, data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }

    pub fn mean(&self) -> T {
        sum_ordered(&self.data) / T::lit(self.data.len() as f64)
    }

    /// Trilinear sample at continuous voxel coordinates, clamped to the grid.
    #[inline]
    pub fn sample_voxel(&self, c: [T; 3]) -> T {
        let (i, f) = self.cell(c);
        let d = self.grid.dims;
        let sx = 1;
        let sy = d[0];
        let sz = d[0] * d[1];
        let base = i[0] + d[0] * (i[1] + d[1] * i[2]);
        let step = [if d[0] > 1 { sx } else { 0 }, if d[1] > 1 { sy } else { 0 }, if d[2] > 1 { sz } else { 0 }];
        let v = |o: usize| self.data[base + o];
        let one = T::one();
        let c00 = v(0) * (one - f[0]) + v(step[0]) * f[0];
        let c10 = v(step[1]) * (one - f[0]) + v(step[1] + step[0]) * f[0];
        let c01 = v(step[2]) * (one - f[0]) + v(step[2] + step[0]) * f[0];
        let c11 = v(step[2] + step[1]) * (one - f[0]) + v(step[2] + step[1] + step[0]) * f[0];
        let c0 = c00 * (one - f[1]) + c10 * f[1];
        let c1 = c01 * (one - f[1]) + c11 * f[1];
        c0 * (one - f[2]) + c1 * f[2]
    }

    /// Trilinear sample plus its derivative with respect to the voxel
    /// coordinates. The derivative along a clamped axis is zero.
    #[inline]
    pub fn sample_voxel_grad(&self, c: [T; 3]) -> (T, [T; 3]) {
        let (i, f) = self.cell(c);
        let d = self.grid.dims;
        let base = i[0] + d[0] * (i[1] + d[1] * i[2]);
        let step = [
            if d[0] > 1 { 1 } else { 0 },
            if d[1] > 1 { d[0] } else { 0 },
            if d[2] > 1 { d[0] * d[1] } else { 0 },
        ];
        let v = |a: usize, b: usize, e: usize| self.data[base + a * step[0] + b * step[1] + e * step[2]];
        let one = T::one();
        let (v000, v100, v010, v110) = (v(0, 0, 0), v(1, 0, 0), v(0, 1, 0), v(1, 1, 0));
        let (v001, v101, v011, v111) = (v(0, 0, 1), v(1, 0, 1), v(0, 1, 1), v(1, 1, 1));
        let gx = one - f[0];
        let gy = one - f[1];
        let gz = one - f[2];
        let c00 = v000 * gx + v100 * f[0];
        let c10 = v010 * gx + v110 * f[0];
        let c01 = v001 * gx + v101 * f[0];
        let c11 = v011 * gx + v111 * f[0];
        let c0 = c00 * gy + c10 * f[1];
        let c1 = c01 * gy + c11 * f[1];
        let value = c0 * gz + c1 * f[2];

        let inside = |a: usize| c[a] >= T::zero() && c[a] <= T::lit((d[a] - 1) as f64) && d[a] > 1;
        let dx = if inside(0) {
            ((v100 - v000) * gy + (v110 - v010) * f[1]) * gz + ((v101 - v001) * gy + (v111 - v011) * f[1]) * f[2]
        } else {
            T::zero()
        };
        let dy = if inside(1) { (c10 - c00) * gz + (c11 - c01) * f[2] } else { T::zero() };
        let dz = if inside(2) { c1 - c0 } else { T::zero() };
        (value, [dx, dy, dz])
    }

    #[inline]
    fn cell(&self, c: [T; 3]) -> ([usize; 3], [T; 3]) {
        let mut i = [0usize; 3];
        let mut f = [T::zero(); 3];
        for a in 0..3 {
            let n = self.grid.dims[a];
            if n == 1 {
                continue;
            }
            let hi = T::lit((n - 1) as f64);
            let x = c[a].max(T::zero()).min(hi);
            let fl = x.floor().to_usize().unwrap_or(0).min(n - 2);
            i[a] = fl;
            f[a] = x - T::lit(fl as f64);
        }
        (i, f)
    }
}

/// Deterministic sum in fixed left-to-right order.
pub(crate) fn sum_ordered<T: Real>(xs: &[T]) -> T {
    // fixed-size chunks keep the result independent of thread count
    const CHUNK: usize = 4096;
    let partial: Vec<T> = xs.par_chunks(CHUNK).map(|c| c.iter().fold(T::zero(), |a, &b| a + b)).collect();
    partial.into_iter().fold(T::zero(), |a, b| a + b)
}

impl<T: Real> DisplacementField<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * grid.len() {
            return Err(Error::invalid(format!(
                "field data length {} does not match 3 x grid size {}",
                data.len(),
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("displacement field contains non-finite values"));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { grid, data: vec![T::zero(); 3 * grid.len()] }
    }

    pub fn constant(grid: Grid, v: [T; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * grid.len());
        for _ in 0..grid.len() {
            data.extend_from_slice(&v);
        }
        Self { grid, data }
    }

    /// Evaluate `f` (physical position → displacement in mm) at every voxel.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> Self {
        let data: Vec<T> = (0..grid.len())
            .into_par_iter()
            .flat_map_iter(|idx| {
                let u = f(grid.position(grid.coords(idx)));
                [T::lit(u[0]), T::lit(u[1]), T::lit(u[2])]
            })
            .collect();
        Self { grid, data }
    }

    #[inline]
    pub fn get(&self, idx: usize) -> [T; 3] {
        [self.data[3 * idx], self.data[3 * idx + 1], self.data[3 * idx + 2]]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: [T; 3]) {
        self.data[3 * idx..3 * idx + 3].copy_from_slice(&v);
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField {
            grid: self.grid,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// One component as a scalar volume.
    pub fn component(&self, c: usize) -> Volume<T> {
        Volume { grid: self.grid, data: self.data.iter().skip(c).step_by(3).copied().collect() }
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { grid: self.grid, data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.grid.ensure_matches(&other.grid, "field addition")?;
        Ok(Self { grid: self.grid, data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect() })
    }

    /// Mean Euclidean norm of the displacement, optionally restricted to a mask.
    pub fn mean_magnitude(&self, mask: Option<&[bool]>) -> T {
        let mut sum = T::zero();
        let mut n = 0usize;
        for idx in 0..self.grid.len() {
            if mask.is_some_and(|m| !m[idx]) {
                continue;
            }
            let u = self.get(idx);
            sum += (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            n += 1;
        }
        if n == 0 {
            T::zero()
        } else {
            sum / T::lit(n as f64)
        }
    }
}

impl LabelMap {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "label data length {} does not match grid size {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { grid, data: vec![0; grid.len()] }
    }

    /// Sorted distinct labels present, including background.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn mask(&self, label: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == label).collect()
    }

    pub fn mask_any(&self, labels: &[u8]) -> Vec<bool> {
        self.data.iter().map(|l| labels.contains(l)).collect()
    }
}

/// Trilinear interpolation at a physical point; coordinates outside the grid
/// are clamped to the boundary voxel plane.
pub fn trilinear_sample<T: Real>(vol: &Volume<T>, point_mm: [T; 3]) -> Result<T> {
    if point_mm.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("sample point is not finite"));
    }
    let g = &vol.grid;
    let c = [
        (point_mm[0] - T::lit(g.origin[0])) / T::lit(g.spacing[0]),
        (point_mm[1] - T::lit(g.origin[1])) / T::lit(g.spacing[1]),
        (point_mm[2] - T::lit(g.origin[2])) / T::lit(g.spacing[2]),
    ];
    Ok(vol.sample_voxel(c))
}

#[inline]
pub(crate) fn displaced_voxel<T: Real>(grid: &Grid, idx: usize, u: [T; 3]) -> [T; 3] {
    let ijk = grid.coords(idx);
    [
        T::lit(ijk[0] as f64) + u[0] / T::lit(grid.spacing[0]),
        T::lit(ijk[1] as f64) + u[1] / T::lit(grid.spacing[1]),
        T::lit(ijk[2] as f64) + u[2] / T::lit(grid.spacing[2]),
    ]
}

/// `output(p) = vol(x_p + u(p))` with trilinear interpolation.
pub fn warp_volume<T: Real>(vol: &Volume<T>, field: &DisplacementField<T>) -> Result<Volume<T>> {
    vol.grid.ensure_matches(&field.grid, "warp_volume")?;
    let grid = vol.grid;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| vol.sample_voxel(displaced_voxel(&grid, idx, field.get(idx))))
        .collect();
    Ok(Volume { grid, data })
}

/// Field of the two-step warp `moving(x + w(x))` equivalent to warping by
/// `inner` and then by `outer`: `w(y) = outer(y) + inner(y + outer(y))`,
/// with `inner` sampled trilinearly (clamped).
pub fn compose_fields<T: Real>(outer: &DisplacementField<T>, inner: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    outer.grid.ensure_matches(&inner.grid, "compose_fields")?;
    let grid = outer.grid;
    let comps: Vec<Volume<T>> = (0..3).map(|c| inner.component(c)).collect();
    let comps = &comps;
    let data = (0..grid.len())
        .into_par_iter()
        .flat_map_iter(|idx| {
            let u = outer.get(idx);
            let c = displaced_voxel(&grid, idx, u);
            (0..3).map(move |k| u[k] + comps[k].sample_voxel(c)).collect::<Vec<_>>()
        })
        .collect();
    Ok(DisplacementField { grid, data })
}

/// Nearest-neighbour label warp; exact half-voxel ties go to the lower index.
pub fn warp_labels<T: Real>(labels: &LabelMap, field: &DisplacementField<T>) -> Result<LabelMap> {
    labels.grid.ensure_matches(&field.grid, "warp_labels")?;
    let grid = labels.grid;
    let d = grid.dims;
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let c = displaced_voxel(&grid, idx, field.get(idx));
            let mut ijk = [0usize; 3];
            for a in 0..3 {
                let x = c[a].to_f64_lossy();
                let r = (x - 0.5).ceil();
                ijk[a] = r.clamp(0.0, (d[a] - 1) as f64) as usize;
            }
            labels.data[grid.index(ijk[0], ijk[1], ijk[2])]
        })
        .collect();
    Ok(LabelMap { grid, data })
}

/// Grid produced by `downsample` with the given factor.
pub fn downsampled_grid(grid: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 {
        return Err(Error::invalid("downsample factor must be at least 1"));
    }
    let f = factor as f64;
    let mut dims = [0; 3];
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        dims[a] = grid.dims[a].div_ceil(factor);
        spacing[a] = grid.spacing[a] * f;
        origin[a] = grid.origin[a] + 0.5 * (f - 1.0) * grid.spacing[a];
    }
    Grid::new(dims, spacing, origin)
}

/// Block-average pooling over `factor`³ blocks; partial boundary blocks
/// average the voxels they contain.
pub fn downsample<T: Real>(vol: &Volume<T>, factor: usize) -> Result<Volume<T>> {
    let out_grid = downsampled_grid(&vol.grid, factor)?;
    if factor == 1 {
        return Ok(vol.clone());
    }
    let d = vol.grid.dims;
    let data = (0..out_grid.len())
        .into_par_iter()
        .map(|oidx| {
            let o = out_grid.coords(oidx);
            let mut sum = T::zero();
            let mut n = 0usize;
            for k in o[2] * factor..((o[2] + 1) * factor).min(d[2]) {
                for j in o[1] * factor..((o[1] + 1) * factor).min(d[1]) {
                    for i in o[0] * factor..((o[0] + 1) * factor).min(d[0]) {
                        sum += vol.at(i, j, k);
                        n += 1;
                    }
                }
            }
            sum / T::lit(n as f64)
        })
        .collect();
    Ok(Volume { grid: out_grid, data })
}

/// Componentwise trilinear resampling of a displacement field onto `target`.
/// Magnitudes are in mm and are not rescaled.
pub fn upsample_field<T: Real>(field: &DisplacementField<T>, target: &Grid) -> Result<DisplacementField<T>> {
    let src = &field.grid;
    if src.matches(target) {
        return Ok(field.clone());
    }
    let ext = src.extent();
    for a in 0..3 {
        let tol = 0.5 * src.spacing[a].max(target.spacing[a]) + 1e-9;
        let first = target.origin[a];
        let last = target.origin[a] + (target.dims[a] as f64 - 1.0) * target.spacing[a];
        let over = (ext[a][0] - first).max(last - ext[a][1]).max(0.0);
        if over > tol {
            return Err(Error::GridMismatch(format!(
                "target grid exceeds the field extent along axis {a} by {over:.3} mm"
            )));
        }
    }
    let comps: Vec<Volume<T>> = (0..3).map(|c| field.component(c)).collect();
    let t = *target;
    let data: Vec<T> = (0..t.len())
        .into_par_iter()
        .flat_map_iter(|idx| {
            let p = t.position(t.coords(idx));
            let c = src.to_voxel(p);
            let c = [T::lit(c[0]), T::lit(c[1]), T::lit(c[2])];
            [comps[0].sample_voxel(c), comps[1].sample_voxel(c), comps[2].sample_voxel(c)]
        })
        .collect();
    Ok(DisplacementField { grid: t, data })
}

/// Voxelwise vector sum of fields sharing one grid.
pub fn accumulate_fields<T: Real>(fields: &[DisplacementField<T>]) -> Result<DisplacementField<T>> {
    let (first, rest) = fields.split_first().ok_or_else(|| Error::invalid("no fields to accumulate"))?;
    let mut acc = first.clone();
    for f in rest {
        acc.grid.ensure_matches(&f.grid, "accumulate_fields")?;
        for (a, &b) in acc.data.iter_mut().zip(&f.data) {
            *a += b;
        }
    }
    Ok(acc)
}

/// Sum over the cubic window of half-width `radius` centred on each voxel,
/// truncated at the grid boundary. `values` may hold `stride` interleaved
/// channels; each is summed independently.
pub(crate) fn box_sum<T: Real>(values: &[T], dims: [usize; 3], radius: usize) -> Vec<T> {
    let mut buf = values.to_vec();
    for axis in 0..3 {
        buf = box_sum_axis(&buf, dims, radius, axis);
    }
    buf
}

fn line_layout(dims: [usize; 3], axis: usize) -> (usize, usize, usize) {
    // (line length, element stride, number of lines)
    match axis {
        0 => (dims[0], 1, dims[1] * dims[2]),
        1 => (dims[1], dims[0], dims[0] * dims[2]),
        _ => (dims[2], dims[0] * dims[1], dims[0] * dims[1]),
    }
}

#[inline]
fn line_start(dims: [usize; 3], axis: usize, line: usize) -> usize {
    match axis {
        0 => line * dims[0],
        1 => (line % dims[0]) + (line / dims[0]) * dims[0] * dims[1],
        _ => line,
    }
}

/// Applies `f(input_line, output_line)` to every line along `axis`.
pub(crate) fn for_each_line<T: Real>(
    src: &[T],
    dims: [usize; 3],
    axis: usize,
    f: impl Fn(&[T], &mut [T]) + Sync,
) -> Vec<T> {
    let (n, stride, lines) = line_layout(dims, axis);
    let results: Vec<Vec<T>> = (0..lines)
        .into_par_iter()
        .map(|line| {
            let start = line_start(dims, axis, line);
            let input: Vec<T> = (0..n).map(|i| src[start + i * stride]).collect();
            let mut out = vec![T::zero(); n];
            f(&input, &mut out);
            out
        })
        .collect();
    let mut dst = vec![T::zero(); src.len()];
    for (line, out) in results.into_iter().enumerate() {
        let start = line_start(dims, axis, line);
        for (i, v) in out.into_iter().enumerate() {
            dst[start + i * stride] = v;
        }
    }
    dst
}

fn box_sum_axis<T: Real>(src: &[T], dims: [usize; 3], radius: usize, axis: usize) -> Vec<T> {
    for_each_line(src, dims, axis, |input, out| {
        let n = input.len();
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(T::zero());
        let mut acc = T::zero();
        for &v in input {
            acc += v;
            prefix.push(acc);
        }
        for (i, o) in out.iter_mut().enumerate() {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            *o = prefix[hi + 1] - prefix[lo];
        }
    })
}

/// Number of in-grid voxels in the truncated window around each voxel.
pub(crate) fn window_counts<T: Real>(dims: [usize; 3], radius: usize) -> Vec<T> {
    let per_axis: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let n = dims[a];
            (0..n).map(|i| (i + radius).min(n - 1) + 1 - i.saturating_sub(radius)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.push(T::lit((per_axis[0][i] * per_axis[1][j] * per_axis[2][k]) as f64));
            }
        }
    }
    out
}

/// Separable Gaussian smoothing of each field component with clamp-to-edge
/// boundaries. `sigma_mm` is converted to voxels per axis.
pub fn gaussian_smooth_field<T: Real>(field: &DisplacementField<T>, sigma_mm: f64) -> DisplacementField<T> {
    if sigma_mm <= 0.0 {
        return field.clone();
    }
    let dims = field.grid.dims;
    let mut comps: Vec<Vec<T>> = (0..3).map(|c| field.component(c).data).collect();
    for axis in 0..3 {
        let sigma = sigma_mm / field.grid.spacing[axis];
        let kernel = gaussian_kernel::<T>(sigma);
        if kernel.len() == 1 {
            continue;
        }
        for comp in comps.iter_mut() {
            *comp = convolve_axis(comp, dims, axis, &kernel);
        }
    }
    let mut data = Vec::with_capacity(field.data.len());
    for idx in 0..field.grid.len() {
        data.push(comps[0][idx]);
        data.push(comps[1][idx]);
        data.push(comps[2][idx]);
    }
    DisplacementField { grid: field.grid, data }
}

pub(crate) fn gaussian_kernel<T: Real>(sigma: f64) -> Vec<T> {
    if sigma < 1e-3 {
        return vec![T::one()];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| T::lit(v / s)).collect()
}

pub(crate) fn convolve_axis<T: Real>(src: &[T], dims: [usize; 3], axis: usize, kernel: &[T]) -> Vec<T> {
    let r = (kernel.len() / 2) as i64;
    for_each_line(src, dims, axis, |input, out| {
        let n = input.len() as i64;
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (kk, &w) in kernel.iter().enumerate() {
                let j = (i as i64 + kk as i64 - r).clamp(0, n - 1);
                acc += w * input[j as usize];
            }
            *o = acc;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(grid: Grid) -> Volume<f64> {
        Volume::from_fn(grid, |p| 0.3 * p[0] + 1.7 * p[1] * p[1] - 0.5 * p[2] + (p[0] * p[2]).sin())
    }

    #[test]
    fn sample_at_voxel_centre() {
        let g = Grid::new([4, 5, 6], [1.5, 2.0, 0.7], [-3.0, 1.0, 2.0]).unwrap();
        let v = ramp(g);
        let p = g.position([2, 3, 4]);
        assert_eq!(trilinear_sample(&v, p).unwrap(), v.at(2, 3, 4));
    }

    #[test]
    fn sample_linear_midpoint_and_clamp() {
        let g = Grid::unit([2, 1, 1]).unwrap();
        let v = Volume::new(g, vec![0.0, 1.0]).unwrap();
        assert_eq!(trilinear_sample(&v, [0.5, 0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(trilinear_sample(&v, [11.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(trilinear_sample(&v, [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let g = Grid::unit([6, 6, 6]).unwrap();
        let v = ramp(g);
        let c = [2.3, 1.6, 3.45];
        let (val, grad) = v.sample_voxel_grad(c);
        assert_eq!(val, v.sample_voxel(c));
        let h = 1e-6;
        for a in 0..3 {
            let mut cp = c;
            let mut cm = c;
            cp[a] += h;
            cm[a] -= h;
            let fd = (v.sample_voxel(cp) - v.sample_voxel(cm)) / (2.0 * h);
            assert!((fd - grad[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", grad[a]);
        }
        let (_, clamped) = v.sample_voxel_grad([-2.0, 1.5, 1.5]);
        assert_eq!(clamped[0], 0.0);
    }

    #[test]
    fn warp_zero_field_is_bit_exact_identity() {
        let g = Grid::new([5, 4, 3], [0.8, 1.1, 2.5], [1.0, -2.0, 0.5]).unwrap();
        let v = ramp(g);
        let w = warp_volume(&v, &DisplacementField::zeros(g)).unwrap();
        assert_eq!(w.data, v.data);
    }

    #[test]
    fn warp_integer_shift_matches_index_oracle() {
        let g = Grid::new([12, 6, 5], [1.5, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = ramp(g);
        let field = DisplacementField::constant(g, [3.0, 0.0, 0.0]); // 2 voxels
        let w = warp_volume(&v, &field).unwrap();
        for k in 0..5 {
            for j in 0..6 {
                for i in 0..10 {
                    assert!((w.at(i, j, k) - v.at(i + 2, j, k)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn warp_out_of_bounds_clamps() {
        let g = Grid::unit([4, 3, 3]).unwrap();
        let v = ramp(g);
        let w = warp_volume(&v, &DisplacementField::constant(g, [100.0, 0.0, 0.0])).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..4 {
                    assert_eq!(w.at(i, j, k), v.at(3, j, k));
                }
            }
        }
    }

    #[test]
    fn warp_grid_mismatch() {
        let v = ramp(Grid::unit([4, 4, 4]).unwrap());
        let f = DisplacementField::<f64>::zeros(Grid::unit([4, 4, 5]).unwrap());
        assert!(matches!(warp_volume(&v, &f), Err(Error::GridMismatch(_))));
        let l = LabelMap::zeros(Grid::unit([4, 4, 4]).unwrap());
        assert!(matches!(warp_labels(&l, &f), Err(Error::GridMismatch(_))));
    }

    fn label_pattern(g: Grid) -> LabelMap {
        let data = (0..g.len()).map(|i| ((i * 7 + i / 5) % 4) as u8).collect();
        LabelMap::new(g, data).unwrap()
    }

    #[test]
    fn warp_labels_rounding_and_shift() {
        let g = Grid::unit([8, 4, 3]).unwrap();
        let l = label_pattern(g);
        assert_eq!(warp_labels(&l, &DisplacementField::<f64>::zeros(g)).unwrap(), l);

        // half-voxel tie resolves to the lower index, i.e. no shift
        let half = warp_labels(&l, &DisplacementField::constant(g, [0.5, 0.0, 0.0])).unwrap();
        assert_eq!(half, l);
        let above = warp_labels(&l, &DisplacementField::constant(g, [0.51, 0.0, 0.0])).unwrap();
        for k in 0..3 {
            for j in 0..4 {
                for i in 0..7 {
                    assert_eq!(above.data[g.index(i, j, k)], l.data[g.index(i + 1, j, k)]);
                }
            }
        }

        let shifted = warp_labels(&l, &DisplacementField::constant(g, [0.0, 2.0, 0.0])).unwrap();
        for k in 0..3 {
            for j in 0..2 {
                for i in 0..8 {
                    assert_eq!(shifted.data[g.index(i, j, k)], l.data[g.index(i, j + 2, k)]);
                }
            }
        }
    }

    #[test]
    fn downsample_cases() {
        let g = Grid::unit([2, 2, 2]).unwrap();
        let v = Volume::new(g, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let d = downsample(&v, 2).unwrap();
        assert_eq!(d.grid.dims, [1, 1, 1]);
        assert_eq!(d.data, vec![0.5]);
        assert_eq!(d.grid.spacing, [2.0; 3]);

        let g = Grid::new([7, 5, 3], [1.0, 2.0, 0.5], [0.0; 3]).unwrap();
        let r = ramp(g);
        assert_eq!(downsample(&r, 1).unwrap(), r);
        let c = Volume::filled(g, 3.25);
        for f in 1..5 {
            assert!(downsample(&c, f).unwrap().data.iter().all(|&x| x == 3.25));
        }
        assert!(downsample(&c, 0).is_err());
    }

    #[test]
    fn upsample_reproduces_constant_and_linear_fields() {
        let fine = Grid::new([12, 10, 9], [1.0, 1.5, 2.0], [3.0, -1.0, 0.0]).unwrap();
        let coarse = downsampled_grid(&fine, 2).unwrap();
        let c = DisplacementField::<f64>::constant(coarse, [1.0, -2.0, 0.5]);
        let up = upsample_field(&c, &fine).unwrap();
        assert!(up.data.chunks(3).all(|u| u == [1.0, -2.0, 0.5]));
        let z = upsample_field(&DisplacementField::<f64>::zeros(coarse), &fine).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));

        let lin = |p: [f64; 3]| [0.1 * p[0] - 0.2, 0.05 * p[0], -0.3 * p[0] + 1.0];
        let coarse_lin = DisplacementField::<f64>::from_fn(coarse, lin);
        let up = upsample_field(&coarse_lin, &fine).unwrap();
        // interior: fine centres within the coarse centre span
        let lo = coarse.origin[0];
        let hi = coarse.origin[0] + (coarse.dims[0] - 1) as f64 * coarse.spacing[0];
        for idx in 0..fine.len() {
            let p = fine.position(fine.coords(idx));
            if p[0] < lo || p[0] > hi {
                continue;
            }
            let e = lin(p);
            let u = up.get(idx);
            for a in 0..3 {
                assert!((u[a] - e[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_rejects_mismatched_extent() {
        let a = Grid::unit([8, 8, 8]).unwrap();
        let b = Grid::new([8, 8, 8], [1.0; 3], [20.0, 0.0, 0.0]).unwrap();
        assert!(upsample_field(&DisplacementField::<f64>::zeros(a), &b).is_err());
    }

    #[test]
    fn accumulate_cases() {
        let g = Grid::unit([3, 3, 3]).unwrap();
        let f = DisplacementField::<f64>::from_fn(g, |p| [p[0], -p[1] * 0.5, p[2] + 1.0]);
        assert_eq!(accumulate_fields(&[f.clone(), DisplacementField::zeros(g)]).unwrap(), f);
        let neg = f.scaled(-1.0);
        assert!(accumulate_fields(&[f.clone(), neg]).unwrap().data.iter().all(|&v| v == 0.0));
        let s = accumulate_fields(&[
            DisplacementField::constant(g, [1.0, 0.0, 0.0]),
            DisplacementField::constant(g, [0.0, 1.0, 0.0]),
            DisplacementField::constant(g, [0.0, 0.0, 1.0]),
        ])
        .unwrap();
        assert!(s.data.chunks(3).all(|u| u == [1.0, 1.0, 1.0]));
        assert!(accumulate_fields::<f64>(&[]).is_err());
        let other = DisplacementField::zeros(Grid::unit([3, 3, 4]).unwrap());
        assert!(accumulate_fields(&[f, other]).is_err());
    }

    #[test]
    fn box_sum_matches_brute_force() {
        let dims = [5, 4, 6];
        let vals: Vec<f64> = (0..120).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        let s = box_sum(&vals, dims, 1);
        let n = window_counts::<f64>(dims, 2);
        let g = Grid::unit(dims).unwrap();
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            let span = |c: usize, hi: usize| ((c + 2).min(hi) + 1 - c.saturating_sub(2)) as f64;
            assert_eq!(n[idx], span(i, 4) * span(j, 3) * span(k, 5));
            let mut acc = 0.0;
            for kk in k.saturating_sub(1)..=(k + 1).min(5) {
                for jj in j.saturating_sub(1)..=(j + 1).min(3) {
                    for ii in i.saturating_sub(1)..=(i + 1).min(4) {
                        acc += vals[g.index(ii, jj, kk)];
                    }
                }
            }
            assert!((s[idx] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_smoothing_preserves_constants() {
        let g = Grid::new([6, 7, 5], [1.0, 0.5, 2.0], [0.0; 3]).unwrap();
        let f = DisplacementField::<f64>::constant(g, [0.3, -1.0, 2.0]);
        let s = gaussian_smooth_field(&f, 1.5);
        for (a, b) in s.data.iter().zip(&f.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_round_trip_through_pyramid() {
        let fine = Grid::new([10, 9, 8], [1.0, 1.0, 1.2], [0.0; 3]).unwrap();
        let v = Volume::filled(fine, 7.0f64);
        let d = downsample(&v, 2).unwrap();
        assert!(d.data.iter().all(|&x| x == 7.0));
        let f = DisplacementField::<f64>::constant(d.grid, [0.5, 0.25, -1.0]);
        let up = upsample_field(&f, &fine).unwrap();
        assert!(up.data.chunks(3).all(|u| u == [0.5, 0.25, -1.0]));
    }

    proptest! {
        #[test]
        fn accumulate_is_commutative_and_associative(seed in 0u64..1000) {
            let g = Grid::unit([3, 4, 2]).unwrap();
            let mk = |s: u64| DisplacementField::<f64>::from_fn(g, move |p| {
                let t = (s as f64) * 0.37;
                [(p[0] + t).sin(), (p[1] * t).cos(), p[2] - t]
            });
            let (a, b, c) = (mk(seed), mk(seed + 1), mk(seed + 2));
            let ab_c = accumulate_fields(&[accumulate_fields(&[a.clone(), b.clone()]).unwrap(), c.clone()]).unwrap();
            let a_bc = accumulate_fields(&[a.clone(), accumulate_fields(&[b.clone(), c.clone()]).unwrap()]).unwrap();
            let cba = accumulate_fields(&[c, b, a]).unwrap();
            for ((x, y), z) in ab_c.data.iter().zip(&a_bc.data).zip(&cba.data) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
                prop_assert!((x - z).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }

        #[test]
        fn warp_labels_never_invents_labels(ux in -3.0f64..3.0, uy in -3.0f64..3.0, uz in -3.0f64..3.0) {
            let g = Grid::unit([6, 5, 4]).unwrap();
            let l = label_pattern(g);
            let f = DisplacementField::<f64>::from_fn(g, |p| [ux * (p[1] * 0.3).sin(), uy, uz * (p[0] * 0.2).cos()]);
            let w = warp_labels(&l, &f).unwrap();
            let allowed = l.label_set();
            prop_assert!(w.data.iter().all(|x| allowed.contains(x)));
        }
    }
}
