//! Temporal averaging of displacement fields and voxel-wise shear and bulk
//! moduli from local Neo-Hookean energy ratios.

use crate::error::{Error, Result};
use crate::kinematics::{deformation_gradient, nhe_density, MaterialParams, DEFAULT_J_FLOOR};
use crate::propagation::{CineSequence, Phase};
use crate::registration::{register, RegConfig};
use crate::scalar::Real;
use crate::similarity::check_window;
use crate::volgrid::{box_sum, window_counts, DisplacementField, LabelMap, Volume};

/// Default moduli window (voxels).
pub const DEFAULT_MODULI_WINDOW: usize = 5;
/// Default energy floor below which a voxel's modulus is not estimated.
pub const DEFAULT_ENERGY_FLOOR: f64 = 1e-8;

/// Voxel-wise moduli in kPa. `validity_mask` is 1 where both denominators
/// exceeded the energy floor; the per-modulus masks are kept separately.
#[derive(Clone, Debug)]
pub struct ModuliMaps<T> {
    pub mu_map: Volume<T>,
    pub kappa_map: Volume<T>,
    pub validity_mask: LabelMap,
    pub mu_valid: Vec<bool>,
    pub kappa_valid: Vec<bool>,
}

/// Voxel-wise average of two fields on one grid.
pub fn temporal_mean_field<T: Real>(f_prev: &DisplacementField<T>, f_next: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    f_prev.grid.ensure_matches(&f_next.grid, "temporal mean")?;
    let half = T::lit(0.5);
    let data = f_prev.data.iter().zip(&f_next.data).map(|(&a, &b)| half * (a + b)).collect();
    DisplacementField::new(f_prev.grid, data)
}

/// Mean of `values` over the odd cubic window centred at each voxel,
/// truncated at the grid boundary.
pub fn window_mean<T: Real>(values: &Volume<T>, window: usize) -> Result<Volume<T>> {
    check_window(window)?;
    let dims = values.grid.dims;
    let r = window / 2;
    let sums = box_sum(&values.data, dims, r);
    let counts: Vec<T> = window_counts(dims, r);
    Ok(Volume { grid: values.grid, data: sums.iter().zip(&counts).map(|(&s, &c)| s / c).collect() })
}

fn modulus_map<T: Real>(density: &Volume<T>, base: f64, window: usize, floor: f64) -> Result<(Volume<T>, Vec<bool>)> {
    let mean = window_mean(density, window)?;
    let base_t = T::lit(base);
    let floor_t = T::lit(floor);
    let valid: Vec<bool> = density.data.iter().map(|&d| d > floor_t).collect();
    let data = density
        .data
        .iter()
        .zip(&mean.data)
        .zip(&valid)
        .map(|((&d, &m), &ok)| if ok { base_t * m / d } else { base_t })
        .collect();
    Ok((Volume { grid: density.grid, data }, valid))
}

/// Moduli from precomputed distortional and volumetric densities:
/// `mu(p) = mu * mean_window(phi_dis) / phi_dis(p)`, and analogously for kappa.
/// Voxels whose density is at or below `energy_floor` keep the global modulus.
pub fn moduli_from_energy<T: Real>(
    phi_dis: &Volume<T>,
    phi_vol: &Volume<T>,
    mat: &MaterialParams,
    window: usize,
    energy_floor: f64,
) -> Result<ModuliMaps<T>> {
    mat.validate()?;
    phi_dis.grid.ensure_matches(&phi_vol.grid, "moduli densities")?;
    if !(energy_floor > 0.0 && energy_floor.is_finite()) {
        return Err(Error::invalid("energy_floor must be positive"));
    }
    let (mu_map, mu_valid) = modulus_map(phi_dis, mat.mu, window, energy_floor)?;
    let (kappa_map, kappa_valid) = modulus_map(phi_vol, mat.kappa, window, energy_floor)?;
    let mask = mu_valid.iter().zip(&kappa_valid).map(|(&a, &b)| (a && b) as u8).collect();
    Ok(ModuliMaps { mu_map, kappa_map, validity_mask: LabelMap::new(phi_dis.grid, mask)?, mu_valid, kappa_valid })
}

/// Local moduli of a displacement field.
pub fn local_moduli<T: Real>(
    field: &DisplacementField<T>,
    mat: &MaterialParams,
    window: usize,
    energy_floor: f64,
) -> Result<ModuliMaps<T>> {
    let f = deformation_gradient(field)?;
    let e = nhe_density(&f, mat, DEFAULT_J_FLOOR)?;
    moduli_from_energy(&e.phi_dis, &e.phi_vol, mat, window, energy_floor)
}

/// Frames registered with a phase frame: its existing temporal neighbours.
pub fn phase_neighbours(n_frames: usize, index: usize) -> (Option<usize>, Option<usize>) {
    let prev = index.checked_sub(1);
    let next = Some(index + 1).filter(|&i| i < n_frames);
    (prev, next)
}

/// Instantaneous field at a phase: the mean of the fields `t-1 -> t` and
/// `t -> t+1`, each from registering the later frame (fixed) against the
/// earlier one (moving). At a sequence end the single available field is
/// returned.
pub fn phase_field<T: Real>(seq: &CineSequence<T>, phase: Phase, cfg: &RegConfig) -> Result<DisplacementField<T>> {
    seq.validate()?;
    let t = seq.phase_index(phase);
    let (prev, next) = phase_neighbours(seq.len(), t);
    let f_prev = prev.map(|p| register(&seq.frames[t], &seq.frames[p], cfg)).transpose()?;
    let f_next = next.map(|n| register(&seq.frames[n], &seq.frames[t], cfg)).transpose()?;
    match (f_prev, f_next) {
        (Some(a), Some(b)) => temporal_mean_field(&a.field, &b.field),
        (Some(a), None) => Ok(a.field),
        (None, Some(b)) => Ok(b.field),
        (None, None) => Err(Error::invalid(format!("phase frame {t} has no temporal neighbour"))),
    }
}
