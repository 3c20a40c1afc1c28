//! Analytic 4D cardiac-like phantom: textured frames, six-label maps and
//! closed-form ground-truth displacement fields for five class presets.
//!
//! Motion is a composition of three invertible maps applied to material
//! points of frame 0: an LV radial contraction, a twist about the LV long
//! axis and an RV radial contraction. The radial maps are volume preserving
//! outside their cavities (`h(rho)^3 = rho^3 - c`) and a uniform scaling
//! inside, so J > 0 everywhere; the twist is isochoric.

use crate::classify::CardiacClass;
use crate::error::{Error, Result};
use crate::features::split_acdc_labels;
use crate::propagation::CineSequence;
use crate::volgrid::{DisplacementField, Grid, LabelMap, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

const BACKGROUND: f64 = 20.0;
const MYOCARDIUM: f64 = 45.0;
const BLOOD: f64 = 90.0;
const EDGE_WIDTH_MM: f64 = 0.7;
const RV_WALL_MM: f64 = 3.0;
const MARGIN_VOXELS: usize = 4;
const TEXTURE_WAVELENGTH_VOXELS: (f64, f64) = (5.0, 12.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub frames: usize,
    /// Physical position of the LV centre.
    pub lv_center: [f64; 3],
    pub lv_inner_radius_mm: f64,
    /// Outer radius before applying `wall_thickness_scale`.
    pub lv_outer_radius_mm: f64,
    /// Long-axis (z) semi-axis over in-plane radius.
    pub long_axis_ratio: f64,
    /// RV centre relative to the LV centre.
    pub rv_offset_mm: [f64; 3],
    pub rv_radius_mm: f64,
    /// Fraction of LV-cavity volume ejected at ES, in [0, 1).
    pub contraction_amplitude: f64,
    /// Fraction of RV-cavity volume ejected at ES, in [0, 1).
    pub rv_contraction_amplitude: f64,
    pub twist_amplitude_rad: f64,
    pub wall_thickness_scale: f64,
    /// Contraction multiplier at the centre of the impaired sector (1 = none).
    pub sector_contraction_scale: f64,
    pub sector_center_rad: f64,
    pub sector_half_width_rad: f64,
    pub noise_sigma: f64,
    pub texture_seed: u64,
    pub class_preset: CardiacClass,
}

impl Default for PhantomParams {
    fn default() -> Self {
        let mut p = Self {
            dims: [56, 44, 44],
            spacing: [2.0; 3],
            frames: 10,
            lv_center: [0.0; 3],
            lv_inner_radius_mm: 11.0,
            lv_outer_radius_mm: 18.0,
            long_axis_ratio: 1.1,
            rv_offset_mm: [0.0; 3],
            rv_radius_mm: 12.0,
            contraction_amplitude: 0.35,
            rv_contraction_amplitude: 0.3,
            twist_amplitude_rad: 0.15,
            wall_thickness_scale: 1.0,
            sector_contraction_scale: 1.0,
            sector_center_rad: 0.0,
            sector_half_width_rad: 0.5 * PI,
            noise_sigma: 1.0,
            texture_seed: 0,
            class_preset: CardiacClass::NOR,
        };
        p.layout();
        p
    }
}

impl PhantomParams {
    /// NOR defaults on a custom grid.
    pub fn on_grid(dims: [usize; 3], spacing: [f64; 3], frames: usize) -> Self {
        let mut p = Self { dims, spacing, frames, ..Self::default() };
        p.layout();
        p
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing, [0.0; 3])
    }

    pub fn lv_outer_effective_mm(&self) -> f64 {
        self.lv_inner_radius_mm + (self.lv_outer_radius_mm - self.lv_inner_radius_mm) * self.wall_thickness_scale
    }

    pub fn wall_thickness_mm(&self) -> f64 {
        self.lv_outer_effective_mm() - self.lv_inner_radius_mm
    }

    pub fn es_index(&self) -> usize {
        self.frames / 2
    }

    /// Places the RV against the LV septum along -x and centres the pair.
    pub fn layout(&mut self) {
        let r_out = self.lv_outer_effective_mm();
        let d = r_out + 0.7 * self.rv_radius_mm;
        self.rv_offset_mm = [-d, 0.0, 0.0];
        let left = -d - self.rv_radius_mm - RV_WALL_MM;
        let right = r_out;
        let mid = [
            0.5 * (self.dims[0] as f64 - 1.0) * self.spacing[0],
            0.5 * (self.dims[1] as f64 - 1.0) * self.spacing[1],
            0.5 * (self.dims[2] as f64 - 1.0) * self.spacing[2],
        ];
        self.lv_center = [mid[0] - 0.5 * (left + right), mid[1], mid[2]];
    }

    /// Applies a class preset to NOR base parameters.
    pub fn with_preset(&self, class: CardiacClass) -> Self {
        let mut p = self.clone();
        p.class_preset = class;
        match class {
            CardiacClass::NOR => {}
            CardiacClass::MINF => p.sector_contraction_scale = 0.5 * self.sector_contraction_scale,
            CardiacClass::DCM => {
                p.lv_inner_radius_mm *= 1.4;
                p.lv_outer_radius_mm = p.lv_inner_radius_mm + (self.lv_outer_radius_mm - self.lv_inner_radius_mm);
                p.contraction_amplitude *= 0.6;
            }
            CardiacClass::HCM => p.wall_thickness_scale *= 1.8,
            CardiacClass::RV => {
                p.rv_radius_mm *= 1.5;
                p.rv_contraction_amplitude *= 0.5;
            }
        }
        p.layout();
        p
    }

    /// Independent ±`frac` multiplicative jitter on radii, wall thickness and
    /// motion amplitudes.
    pub fn jittered(&self, rng: &mut impl Rng, frac: f64) -> Self {
        let mut p = self.clone();
        let mut j = |x: f64| x * rng.random_range(1.0 - frac..=1.0 + frac);
        let wall = j(p.lv_outer_radius_mm - p.lv_inner_radius_mm);
        p.lv_inner_radius_mm = j(p.lv_inner_radius_mm);
        p.lv_outer_radius_mm = p.lv_inner_radius_mm + wall;
        p.rv_radius_mm = j(p.rv_radius_mm);
        p.contraction_amplitude = j(p.contraction_amplitude).min(0.95);
        p.rv_contraction_amplitude = j(p.rv_contraction_amplitude).min(0.95);
        p.twist_amplitude_rad = j(p.twist_amplitude_rad);
        p.layout();
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(Error::invalid("a phantom needs at least 3 frames"));
        }
        self.grid()?;
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !(pos(self.lv_inner_radius_mm) && pos(self.rv_radius_mm) && pos(self.long_axis_ratio) && pos(self.wall_thickness_scale)) {
            return Err(Error::invalid("phantom radii and scales must be positive"));
        }
        if self.lv_outer_effective_mm() <= self.lv_inner_radius_mm {
            return Err(Error::invalid("LV outer radius must exceed the inner radius"));
        }
        for (a, name) in [
            (self.contraction_amplitude, "contraction_amplitude"),
            (self.rv_contraction_amplitude, "rv_contraction_amplitude"),
        ] {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.sector_contraction_scale) {
            return Err(Error::invalid("sector_contraction_scale must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite() && self.twist_amplitude_rad.is_finite()) {
            return Err(Error::invalid("noise and twist must be finite, noise non-negative"));
        }
        if !(self.sector_half_width_rad > 0.0) {
            return Err(Error::invalid("sector half width must be positive"));
        }
        Ok(())
    }
}

/// Closed-form motion of one phantom.
#[derive(Clone, Debug)]
pub struct AnalyticMotion {
    p: PhantomParams,
    r_out: f64,
    rv_center: [f64; 3],
}

/// Smooth phase weight in [0, 1], zero at frame 0 and peaking at T/2.
fn cycle(t: f64, frames: usize) -> f64 {
    0.5 * (1.0 - (TAU * t / frames as f64).cos())
}

impl AnalyticMotion {
    pub fn new(params: &PhantomParams) -> Result<Self> {
        params.validate()?;
        let c = params.lv_center;
        let o = params.rv_offset_mm;
        Ok(Self { p: params.clone(), r_out: params.lv_outer_effective_mm(), rv_center: [c[0] + o[0], c[1] + o[1], c[2] + o[2]] })
    }

    pub fn params(&self) -> &PhantomParams {
        &self.p
    }

    /// Scaled coordinates relative to `center`: (x, y, z / e).
    fn scaled(&self, x: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        [x[0] - center[0], x[1] - center[1], (x[2] - center[2]) / self.p.long_axis_ratio]
    }

    fn unscaled(&self, q: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        [q[0] + center[0], q[1] + center[1], q[2] * self.p.long_axis_ratio + center[2]]
    }

    /// Contraction weight of the LV at a direction (1 outside the sector).
    fn lv_sector_weight(&self, q: [f64; 3]) -> f64 {
        let s = self.p.sector_contraction_scale;
        if s >= 1.0 {
            return 1.0;
        }
        let rxy2 = q[0] * q[0] + q[1] * q[1];
        let rho2 = rxy2 + q[2] * q[2];
        if rho2 == 0.0 {
            return 1.0;
        }
        let theta = q[1].atan2(q[0]);
        let mut d = (theta - self.p.sector_center_rad).rem_euclid(TAU);
        if d > PI {
            d -= TAU;
        }
        let hw = self.p.sector_half_width_rad;
        let w = if d.abs() < hw { (0.5 * PI * d / hw).cos().powi(2) } else { 0.0 };
        // sin² of the polar angle keeps the weight continuous on the axis
        1.0 - (1.0 - s) * w * rxy2 / rho2
    }

    /// Radial map `rho -> h(rho)` about `center`; `inverse` solves for rho.
    fn radial(&self, x: [f64; 3], center: [f64; 3], r_cav: f64, amp: f64, sector: bool, inverse: bool) -> [f64; 3] {
        if amp == 0.0 {
            return x;
        }
        let q = self.scaled(x, center);
        let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if rho == 0.0 {
            return x;
        }
        let a = amp * if sector { self.lv_sector_weight(q) } else { 1.0 };
        let c = a * r_cav.powi(3);
        let k = (1.0 - a).cbrt();
        let out = if !inverse {
            if rho >= r_cav { (rho.powi(3) - c).cbrt() } else { rho * k }
        } else if rho >= r_cav * k {
            (rho.powi(3) + c).cbrt()
        } else {
            rho / k
        };
        let s = out / rho;
        self.unscaled([q[0] * s, q[1] * s, q[2] * s], center)
    }

    fn twist(&self, x: [f64; 3], amp: f64, inverse: bool) -> [f64; 3] {
        if amp == 0.0 {
            return x;
        }
        let q = self.scaled(x, self.p.lv_center);
        let rho2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
        let rw = 2.0 * self.r_out;
        let mut angle = amp * (-rho2 / (rw * rw)).exp() * q[2] / self.r_out;
        if inverse {
            angle = -angle;
        }
        let (s, c) = angle.sin_cos();
        let r = [c * q[0] - s * q[1], s * q[0] + c * q[1], q[2]];
        self.unscaled(r, self.p.lv_center)
    }

    fn amplitudes(&self, t: f64) -> (f64, f64, f64) {
        let w = cycle(t, self.p.frames);
        (w * self.p.contraction_amplitude, w * self.p.twist_amplitude_rad, w * self.p.rv_contraction_amplitude)
    }

    /// Forward map psi_t: frame-0 material point to its frame-t position.
    pub fn forward(&self, t: f64, x: [f64; 3]) -> [f64; 3] {
        let (a_lv, tw, a_rv) = self.amplitudes(t);
        let y = self.radial(x, self.p.lv_center, self.p.lv_inner_radius_mm, a_lv, true, false);
        let y = self.twist(y, tw, false);
        self.radial(y, self.rv_center, self.p.rv_radius_mm, a_rv, false, false)
    }

    /// Backward map chi_t = psi_t^{-1}: frame-t position to material point.
    pub fn backward(&self, t: f64, y: [f64; 3]) -> [f64; 3] {
        let (a_lv, tw, a_rv) = self.amplitudes(t);
        let x = self.radial(y, self.rv_center, self.p.rv_radius_mm, a_rv, false, true);
        let x = self.twist(x, tw, true);
        self.radial(x, self.p.lv_center, self.p.lv_inner_radius_mm, a_lv, true, true)
    }

    /// Registration-convention displacement taking frame `t_from` onto
    /// frame `t_to`: `u(y) = psi_from(chi_to(y)) - y`, so that
    /// `frame_from(y + u(y)) = frame_to(y)`.
    pub fn displacement(&self, t_from: f64, t_to: f64, y: [f64; 3]) -> [f64; 3] {
        let m = self.backward(t_to, y);
        let z = self.forward(t_from, m);
        [z[0] - y[0], z[1] - y[1], z[2] - y[2]]
    }

    /// Three-class anatomy of a material point: 0 background, 1 LV cavity,
    /// 2 LV myocardium, 3 RV cavity.
    pub fn material_class(&self, x: [f64; 3]) -> u8 {
        let ql = self.scaled(x, self.p.lv_center);
        let rl = (ql[0] * ql[0] + ql[1] * ql[1] + ql[2] * ql[2]).sqrt();
        if rl < self.p.lv_inner_radius_mm {
            return 1;
        }
        if rl < self.r_out {
            return 2;
        }
        let qr = self.scaled(x, self.rv_center);
        let rr = (qr[0] * qr[0] + qr[1] * qr[1] + qr[2] * qr[2]).sqrt();
        if rr < self.p.rv_radius_mm {
            3
        } else {
            0
        }
    }

    /// Noise-free frame-0 intensity of a material point.
    fn material_intensity(&self, x: [f64; 3], texture: &Texture) -> f64 {
        let soft = |d: f64| 0.5 * (1.0 + (d / EDGE_WIDTH_MM).tanh());
        let ql = self.scaled(x, self.p.lv_center);
        let rl = (ql[0] * ql[0] + ql[1] * ql[1] + ql[2] * ql[2]).sqrt();
        let qr = self.scaled(x, self.rv_center);
        let rr = (qr[0] * qr[0] + qr[1] * qr[1] + qr[2] * qr[2]).sqrt();
        let lv_cav = soft(self.p.lv_inner_radius_mm - rl);
        let lv_all = soft(self.r_out - rl);
        let rv_cav = soft(self.p.rv_radius_mm - rr) * (1.0 - lv_all);
        let rv_all = soft(self.p.rv_radius_mm + RV_WALL_MM - rr);
        let tissue = lv_all.max(rv_all);
        BACKGROUND + (MYOCARDIUM - BACKGROUND) * tissue + (BLOOD - MYOCARDIUM) * (lv_cav + rv_cav) + texture.eval(x)
    }
}

/// Band-limited random sinusoid texture.
#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Texture {
    fn new(seed: u64, wl: (f64, f64)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_u64);
        let waves = (0..16)
            .map(|_| {
                let wavelength = rng.random_range(wl.0..wl.1);
                let mut d = [0.0f64; 3];
                loop {
                    for v in d.iter_mut() {
                        *v = rng.random_range(-1.0..1.0);
                    }
                    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if n > 0.2 && n <= 1.0 {
                        for v in d.iter_mut() {
                            *v *= TAU / (wavelength * n);
                        }
                        break;
                    }
                }
                (d, rng.random_range(0.0..TAU), rng.random_range(1.5..3.5))
            })
            .collect();
        Self { waves }
    }

    /// Wavelengths scale with the voxel size so the texture stays resolvable
    /// at every pyramid level used by registration.
    fn for_params(p: &PhantomParams) -> Self {
        let h = (p.spacing[0] + p.spacing[1] + p.spacing[2]) / 3.0;
        Self::new(p.texture_seed, (TEXTURE_WAVELENGTH_VOXELS.0 * h, TEXTURE_WAVELENGTH_VOXELS.1 * h))
    }

    fn eval(&self, x: [f64; 3]) -> f64 {
        self.waves.iter().map(|(k, ph, a)| a * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).sin()).sum()
    }
}

/// One generated case. Frame 0 is ED and frame `frames / 2` is ES.
#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub case_id: String,
    pub class: CardiacClass,
    pub params: PhantomParams,
    pub sequence: CineSequence<f64>,
    /// Six-label maps for every frame.
    pub labels: Vec<LabelMap>,
}

impl PhantomCase {
    pub fn analytic_field(&self, t_from: usize, t_to: usize) -> Result<DisplacementField<f64>> {
        analytic_field(&self.params, t_from, t_to)
    }
}

/// Ground-truth field registering frame `t_from` (moving) onto frame `t_to`
/// (fixed), sampled on the phantom grid.
pub fn analytic_field(params: &PhantomParams, t_from: usize, t_to: usize) -> Result<DisplacementField<f64>> {
    if t_from >= params.frames || t_to >= params.frames {
        return Err(Error::invalid(format!("frame index out of range 0..{}", params.frames)));
    }
    let motion = AnalyticMotion::new(params)?;
    let grid = params.grid()?;
    if t_from == t_to {
        return Ok(DisplacementField::zeros(grid));
    }
    Ok(DisplacementField::from_fn(grid, |y| motion.displacement(t_from as f64, t_to as f64, y)))
}

fn shifted(y: [f64; 3], shift: [f64; 3]) -> [f64; 3] {
    [y[0] - shift[0], y[1] - shift[1], y[2] - shift[2]]
}

fn frame_labels(motion: &AnalyticMotion, grid: &Grid, t: usize, shift: [f64; 3]) -> Result<LabelMap> {
    let classes: Vec<u8> = (0..grid.len())
        .into_par_iter()
        .map(|i| motion.material_class(motion.backward(t as f64, shifted(grid.position(grid.coords(i)), shift))))
        .collect();
    let lv: Vec<bool> = classes.iter().map(|&c| c == 1).collect();
    let myo: Vec<bool> = classes.iter().map(|&c| c == 2).collect();
    let rv: Vec<bool> = classes.iter().map(|&c| c == 3).collect();
    split_acdc_labels(grid, &lv, &myo, &rv)
}

fn frame_image(
    motion: &AnalyticMotion,
    texture: &Texture,
    grid: &Grid,
    t: usize,
    shift: [f64; 3],
    noise_seed: u64,
) -> Result<Volume<f64>> {
    let p = motion.params();
    let mut data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| motion.material_intensity(motion.backward(t as f64, shifted(grid.position(grid.coords(i)), shift)), texture))
        .collect();
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Volume::new(*grid, data)
}

fn frame_noise_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(t as u64)
}

/// Renders frame `t` with the whole scene rigidly translated by `shift_mm`:
/// `image(y) = frame_t(y - shift_mm)`. Returns the image and its labels.
pub fn render_shifted_frame(params: &PhantomParams, t: usize, shift_mm: [f64; 3], seed: u64) -> Result<(Volume<f64>, LabelMap)> {
    if t >= params.frames {
        return Err(Error::invalid(format!("frame {t} out of range ({} frames)", params.frames)));
    }
    let motion = AnalyticMotion::new(params)?;
    let grid = params.grid()?;
    let texture = Texture::for_params(params);
    let labels = frame_labels(&motion, &grid, t, shift_mm)?;
    check_margin(&labels)?;
    let image = frame_image(&motion, &texture, &grid, t, shift_mm, frame_noise_seed(seed, t))?;
    Ok((image, labels))
}

fn check_margin(labels: &LabelMap) -> Result<()> {
    let g = labels.grid;
    for (idx, &l) in labels.data.iter().enumerate() {
        if l != 0 {
            let c = g.coords(idx);
            if (0..3).any(|a| c[a] < MARGIN_VOXELS || c[a] + MARGIN_VOXELS >= g.dims[a]) {
                return Err(Error::invalid(format!(
                    "invalid geometry: anatomy reaches within {MARGIN_VOXELS} voxels of the grid boundary at {c:?}"
                )));
            }
        }
    }
    Ok(())
}

/// Generates all frames and labels; `seed` drives the acquisition noise.
pub fn generate_case(params: &PhantomParams, seed: u64) -> Result<PhantomCase> {
    generate_case_named(params, seed, format!("{}_{seed}", params.class_preset))
}

pub fn generate_case_named(params: &PhantomParams, seed: u64, case_id: String) -> Result<PhantomCase> {
    let motion = AnalyticMotion::new(params)?;
    let grid = params.grid()?;
    let texture = Texture::for_params(params);
    let mut labels = Vec::with_capacity(params.frames);
    let mut frames = Vec::with_capacity(params.frames);
    for t in 0..params.frames {
        let l = frame_labels(&motion, &grid, t, [0.0; 3])?;
        check_margin(&l)?;
        labels.push(l);
        frames.push(frame_image(&motion, &texture, &grid, t, [0.0; 3], frame_noise_seed(seed, t))?);
    }
    let es = params.es_index();
    let sequence = CineSequence::new(frames, 0, es, labels[0].clone(), labels[es].clone())?;
    Ok(PhantomCase { case_id, class: params.class_preset, params: params.clone(), sequence, labels })
}

/// Per-case parameters of a balanced cohort, without generating volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub case_id: String,
    pub class: CardiacClass,
    pub params: PhantomParams,
    pub seed: u64,
}

/// Class-major enumeration of `n_per_class` jittered cases per class.
pub fn cohort_params(n_per_class: usize, base: &PhantomParams, seed: u64) -> Result<Vec<CohortEntry>> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let mut out = Vec::with_capacity(5 * n_per_class);
    for class in CardiacClass::ALL {
        for i in 0..n_per_class {
            let case_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((class.index() * 10_000 + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
            let mut p = base.with_preset(class).jittered(&mut rng, 0.1);
            p.texture_seed = rng.random();
            p.sector_center_rad = base.sector_center_rad;
            out.push(CohortEntry { case_id: format!("{}_{i:03}", class), class, params: p, seed: case_seed });
        }
    }
    Ok(out)
}

pub fn generate_entry(entry: &CohortEntry) -> Result<PhantomCase> {
    generate_case_named(&entry.params, entry.seed, entry.case_id.clone())
}

pub fn generate_cohort(n_per_class: usize, base: &PhantomParams, seed: u64) -> Result<Vec<PhantomCase>> {
    cohort_params(n_per_class, base, seed)?.iter().map(generate_entry).collect()
}
