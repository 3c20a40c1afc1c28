//! Multi-resolution variational registration minimising
//! `L = L_sim + lambda * L_nhe` over an accumulated displacement field.
//!
//! Convention: `warped(x) = moving(x + u(x))`, with `u` defined on the fixed
//! grid. Stages run coarse to fine; each optimises a fresh increment with
//! earlier increments upsampled and frozen.

use crate::error::{Error, Result};
use crate::kinematics::{deformation_gradient, det3, nhe_total, nhe_total_and_gradient, MaterialParams, DEFAULT_J_FLOOR};
use crate::scalar::Real;
use crate::similarity::{similarity_with_stats, FixedStats, SimConfig};
use crate::volgrid::{
    displaced_voxel, downsample, sum_ordered, downsampled_grid, gaussian_smooth_field, upsample_field, DisplacementField, Grid, Volume,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MAX_HALVINGS: usize = 5;
const LR_RECOVERY: f64 = 1.2;
const CONVERGENCE_WINDOW: usize = 10;
const MIN_COARSE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub scale_factor: usize,
    pub iterations: usize,
    /// Adam learning rate, in mm per iteration.
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub stages: Vec<Stage>,
    pub lambda: f64,
    pub material: MaterialParams,
    pub sim: SimConfig,
    pub field_smoothing_sigma_mm: f64,
    pub seed: u64,
    pub convergence_tol: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            stages: vec![
                Stage { scale_factor: 4, iterations: 150, step_size: 0.5 },
                Stage { scale_factor: 2, iterations: 100, step_size: 0.25 },
                Stage { scale_factor: 1, iterations: 60, step_size: 0.1 },
            ],
            lambda: 0.1,
            material: MaterialParams::default(),
            sim: SimConfig::default(),
            field_smoothing_sigma_mm: 1.5,
            seed: 0,
            convergence_tol: 1e-6,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        self.sim.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        if !(self.field_smoothing_sigma_mm >= 0.0 && self.field_smoothing_sigma_mm.is_finite()) {
            return Err(Error::invalid("field_smoothing_sigma_mm must be finite and non-negative"));
        }
        if !(self.convergence_tol >= 0.0 && self.convergence_tol.is_finite()) {
            return Err(Error::invalid("convergence_tol must be finite and non-negative"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.scale_factor == 0 {
                return Err(Error::invalid(format!("stage {i}: scale_factor must be at least 1")));
            }
            if !(s.step_size > 0.0 && s.step_size.is_finite()) {
                return Err(Error::invalid(format!("stage {i}: step_size must be positive")));
            }
            if i > 0 && s.scale_factor > self.stages[i - 1].scale_factor {
                return Err(Error::invalid("stages must be ordered coarse to fine"));
            }
        }
        if let Some(last) = self.stages.last() {
            if last.scale_factor != 1 {
                return Err(Error::invalid("the last stage must have scale_factor 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sim: f64,
    pub nhe: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct RegResult<T> {
    /// Accumulated field at full resolution.
    pub field: DisplacementField<T>,
    /// Loss terms at the end of each stage, at that stage's resolution.
    pub per_stage_losses: Vec<LossTerms>,
    /// Fraction of voxels with J <= 0.
    pub fold_fraction: f64,
    pub iterations_used: Vec<usize>,
    /// Full-resolution loss of the zero field and of the result.
    pub initial_loss: LossTerms,
    pub final_loss: LossTerms,
}

/// JSON-friendly diagnostics of a [`RegResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegDiagnostics {
    pub per_stage_losses: Vec<LossTerms>,
    pub fold_fraction: f64,
    pub iterations_used: Vec<usize>,
    pub initial_loss: LossTerms,
    pub final_loss: LossTerms,
}

impl<T: Real> RegResult<T> {
    pub fn diagnostics(&self) -> RegDiagnostics {
        RegDiagnostics {
            per_stage_losses: self.per_stage_losses.clone(),
            fold_fraction: self.fold_fraction,
            iterations_used: self.iterations_used.clone(),
            initial_loss: self.initial_loss,
            final_loss: self.final_loss,
        }
    }
}

/// Which part of the objective a gradient check probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Similarity,
    Energy,
    Total,
}

/// One resolution level of the objective with cached fixed-image statistics.
struct Problem<'a, T> {
    fixed: Volume<T>,
    moving: Volume<T>,
    stats: Vec<FixedStats<T>>,
    eps: T,
    cfg: &'a RegConfig,
}

struct Eval<T> {
    sim: T,
    nhe: Option<T>,
    total: T,
    grad: Option<Vec<T>>,
}

impl<'a, T: Real> Problem<'a, T> {
    fn new(fixed: Volume<T>, moving: Volume<T>, cfg: &'a RegConfig) -> Self {
        let stats = cfg.sim.windows.iter().map(|&w| FixedStats::new(&fixed, w)).collect();
        Self { fixed, moving, stats, eps: T::lit(cfg.sim.variance_eps), cfg }
    }

    fn eval(&self, total: &DisplacementField<T>, term: LossTerm, with_grad: bool) -> Result<Eval<T>> {
        let grid = self.fixed.grid;
        let use_sim = term != LossTerm::Energy;
        let lambda = match term {
            LossTerm::Similarity => 0.0,
            LossTerm::Energy => 1.0,
            LossTerm::Total => self.cfg.lambda,
        };

        let (sim, mut grad) = if use_sim {
            let samples: Vec<(T, [T; 3])> = (0..grid.len())
                .into_par_iter()
                .map(|idx| self.moving.sample_voxel_grad(displaced_voxel(&grid, idx, total.get(idx))))
                .collect();
            let warped = Volume { grid, data: samples.iter().map(|s| s.0).collect() };
            let (sim, g) = similarity_with_stats(&self.stats, &self.fixed, &warped, self.eps, with_grad);
            let grad = g.map(|g| {
                let inv = [T::lit(1.0 / grid.spacing[0]), T::lit(1.0 / grid.spacing[1]), T::lit(1.0 / grid.spacing[2])];
                let mut out = vec![T::zero(); 3 * grid.len()];
                for (idx, (gw, s)) in g.iter().zip(&samples).enumerate() {
                    for a in 0..3 {
                        out[3 * idx + a] = *gw * s.1[a] * inv[a];
                    }
                }
                out
            });
            (sim, grad)
        } else {
            (T::zero(), if with_grad { Some(vec![T::zero(); 3 * grid.len()]) } else { None })
        };

        // lambda = 0 leaves the similarity result untouched
        let mut nhe = None;
        let mut loss = sim;
        if lambda > 0.0 {
            let lam = T::lit(lambda);
            if with_grad {
                let (e, g) = nhe_total_and_gradient(total, &self.cfg.material, DEFAULT_J_FLOOR)?;
                if let Some(acc) = grad.as_mut() {
                    for (a, &b) in acc.iter_mut().zip(&g.data) {
                        *a += lam * b;
                    }
                }
                nhe = Some(e);
                loss += lam * e;
            } else {
                let e = nhe_total(total, &self.cfg.material)?;
                nhe = Some(e);
                loss += lam * e;
            }
        }
        Ok(Eval { sim, nhe, total: loss, grad })
    }

    fn terms(&self, total: &DisplacementField<T>) -> Result<LossTerms> {
        let e = self.eval(total, LossTerm::Total, false)?;
        let sim = e.sim.to_f64_lossy();
        let nhe = match e.nhe {
            Some(v) => v.to_f64_lossy(),
            None => nhe_total(total, &self.cfg.material)?.to_f64_lossy(),
        };
        Ok(LossTerms { sim, nhe, total: e.total.to_f64_lossy() })
    }
}

fn check_finite<T: Real>(v: T, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite loss ({v}) {what}")))
    }
}

/// Total loss and its gradient with respect to `increment`, evaluated on
/// `accumulated + increment`. All inputs share the stage grid.
pub fn loss_and_gradient<T: Real>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    accumulated: &DisplacementField<T>,
    increment: &DisplacementField<T>,
    cfg: &RegConfig,
) -> Result<(T, DisplacementField<T>)> {
    loss_and_gradient_term(fixed, moving, accumulated, increment, cfg, LossTerm::Total)
}

/// As [`loss_and_gradient`], restricted to one term of the objective.
/// `Energy` returns the unweighted energy.
pub fn loss_and_gradient_term<T: Real>(
    fixed: &Volume<T>,
    moving: &Volume<T>,
    accumulated: &DisplacementField<T>,
    increment: &DisplacementField<T>,
    cfg: &RegConfig,
    term: LossTerm,
) -> Result<(T, DisplacementField<T>)> {
    fixed.grid.ensure_matches(&moving.grid, "loss_and_gradient images")?;
    fixed.grid.ensure_matches(&accumulated.grid, "loss_and_gradient accumulated field")?;
    fixed.grid.ensure_matches(&increment.grid, "loss_and_gradient increment")?;
    cfg.validate()?;
    let total = accumulated.add(increment)?;
    let problem = Problem::new(fixed.clone(), moving.clone(), cfg);
    let e = problem.eval(&total, term, true)?;
    let grad = e.grad.expect("gradient requested");
    Ok((e.total, DisplacementField { grid: fixed.grid, data: grad }))
}

/// Adam update with one second-moment estimate shared by all components,
/// so `lr` is the RMS step in mm and weakly driven voxels move little.
fn adam_step<T: Real>(x: &mut [T], m: &[T], v: T, t: usize, lr: f64) {
    let c1 = T::lit(1.0 - ADAM_BETA1.powi(t as i32));
    let c2 = T::lit(1.0 - ADAM_BETA2.powi(t as i32));
    let denom = (v / c2).sqrt() + T::lit(ADAM_EPS);
    let k = T::lit(lr) / (c1 * denom);
    for (xi, &mi) in x.iter_mut().zip(m) {
        *xi -= k * mi;
    }
}

/// Runs one stage: optimises an increment over the frozen `base`.
/// Returns the new accumulated field and the iterations performed.
fn run_stage<T: Real>(
    problem: &Problem<'_, T>,
    base: &DisplacementField<T>,
    stage: &Stage,
    stage_index: usize,
) -> Result<(DisplacementField<T>, usize)> {
    let cfg = problem.cfg;
    let grid = base.grid;
    let n = grid.len();
    let scale = T::lit(n as f64);
    let mut inc = vec![T::zero(); 3 * n];
    let mut m = vec![T::zero(); 3 * n];
    let mut v = T::zero();
    let b1 = T::lit(ADAM_BETA1);
    let b2 = T::lit(ADAM_BETA2);

    let mut current = base.clone();
    let mut cur = problem.eval(&current, LossTerm::Total, true)?;
    check_finite(cur.total, &format!("at the start of stage {stage_index}"))?;
    let mut lr = stage.step_size;
    let mut halvings = 0usize;
    let mut t = 0usize;
    let mut iters = 0usize;
    let mut history = vec![cur.total.to_f64_lossy()];

    while iters < stage.iterations {
        iters += 1;
        let g = cur.grad.take().expect("gradient requested");
        // per-voxel mean losses give O(1/N) gradients; rescale so the Adam
        // epsilon is meaningful, then smooth as a preconditioner
        let g = DisplacementField { grid, data: g.into_iter().map(|x| x * scale).collect() };
        let g = gaussian_smooth_field(&g, cfg.field_smoothing_sigma_mm * stage.scale_factor as f64);
        t += 1;
        for (mi, &gi) in m.iter_mut().zip(&g.data) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
        }
        let sq: Vec<T> = g.data.iter().map(|&x| x * x).collect();
        v = b2 * v + (T::one() - b2) * sum_ordered(&sq) / T::lit(sq.len() as f64);
        // backtrack on the step size until the loss does not increase
        loop {
            let mut trial_inc = inc.clone();
            adam_step(&mut trial_inc, &m, v, t, lr);
            let mut trial = base.clone();
            for (a, &b) in trial.data.iter_mut().zip(&trial_inc) {
                *a += b;
            }
            let e = problem.eval(&trial, LossTerm::Total, true)?;
            check_finite(e.total, &format!("in stage {stage_index}, iteration {iters}"))?;
            if e.total <= cur.total {
                inc = trial_inc;
                current = trial;
                cur = e;
                halvings = 0;
                lr = (lr * LR_RECOVERY).min(stage.step_size);
                history.push(cur.total.to_f64_lossy());
                // relative improvement per iteration, averaged over a window
                if history.len() > CONVERGENCE_WINDOW {
                    let old = history[history.len() - 1 - CONVERGENCE_WINDOW];
                    let new = *history.last().unwrap();
                    let rel = (old - new) / (CONVERGENCE_WINDOW as f64 * new.abs().max(1e-12));
                    if rel < cfg.convergence_tol {
                        return Ok((current, iters));
                    }
                }
                break;
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Ok((current, iters));
            }
            lr *= 0.5;
        }
    }
    Ok((current, iters))
}

/// Registers `moving` onto `fixed`; the returned field lives on the fixed grid.
pub fn register<T: Real>(fixed: &Volume<T>, moving: &Volume<T>, cfg: &RegConfig) -> Result<RegResult<T>> {
    fixed.grid.ensure_matches(&moving.grid, "register")?;
    cfg.validate()?;
    let full_grid = fixed.grid;
    if let Some(first) = cfg.stages.first() {
        let g = downsampled_grid(&full_grid, first.scale_factor)?;
        if g.dims.iter().any(|&d| d < MIN_COARSE_DIM) {
            return Err(Error::invalid(format!(
                "coarsest stage grid {:?} has fewer than {MIN_COARSE_DIM} voxels along an axis",
                g.dims
            )));
        }
    }
    let full = Problem::new(fixed.clone(), moving.clone(), cfg);
    let zero = DisplacementField::zeros(full_grid);
    let initial_loss = full.terms(&zero)?;
    check_finite(T::lit(initial_loss.total), "for the zero field")?;

    let mut total = zero.clone();
    let mut per_stage_losses = Vec::with_capacity(cfg.stages.len());
    let mut iterations_used = Vec::with_capacity(cfg.stages.len());
    for (si, stage) in cfg.stages.iter().enumerate() {
        let problem = if stage.scale_factor == 1 {
            None
        } else {
            Some(Problem::new(downsample(fixed, stage.scale_factor)?, downsample(moving, stage.scale_factor)?, cfg))
        };
        let problem = problem.as_ref().unwrap_or(&full);
        let stage_grid = problem.fixed.grid;
        let mut base = upsample_field(&total, &stage_grid)?;
        // never start a stage from a field worse than identity
        let z = DisplacementField::zeros(stage_grid);
        if problem.eval(&z, LossTerm::Total, false)?.total < problem.eval(&base, LossTerm::Total, false)?.total {
            base = z;
        }
        let (stage_total, iters) = run_stage(problem, &base, stage, si)?;
        per_stage_losses.push(problem.terms(&stage_total)?);
        iterations_used.push(iters);
        total = stage_total;
        log::debug!("stage {si}: {:?} after {iters} iterations", per_stage_losses.last());
    }
    let field = if total.grid.matches(&full_grid) { total } else { upsample_field(&total, &full_grid)? };
    let final_loss = full.terms(&field)?;
    let fold_fraction = fold_fraction(&field)?;
    Ok(RegResult { field, per_stage_losses, fold_fraction, iterations_used, initial_loss, final_loss })
}

/// Fraction of voxels whose finite-difference Jacobian determinant is <= 0.
pub fn fold_fraction<T: Real>(field: &DisplacementField<T>) -> Result<f64> {
    let f = deformation_gradient(field)?;
    let folds = f.data.iter().filter(|m| det3(m) <= T::zero()).count();
    Ok(folds as f64 / field.grid.len() as f64)
}

/// Setup used by [`gradient_check`]: smooth texture pair and a random
/// smooth field of sub-voxel amplitude on a `grid_size`³ unit grid.
pub fn gradient_check_problem(
    grid_size: usize,
    seed: u64,
) -> Result<(Volume<f64>, Volume<f64>, DisplacementField<f64>)> {
    if !(4..=16).contains(&grid_size) {
        return Err(Error::invalid("gradient check grid size must be within 4..=16"));
    }
    let grid = Grid::unit([grid_size; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut waves = Vec::new();
    for _ in 0..8 {
        let k: [f64; 3] = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        waves.push((k, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(5.0..15.0)));
    }
    let tex = move |p: [f64; 3]| {
        50.0 + waves.iter().map(|(k, ph, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum::<f64>()
    };
    let fixed = Volume::from_fn(grid, &tex);
    let moving = Volume::from_fn(grid, |p| tex([p[0] + 0.4, p[1] - 0.3, p[2] + 0.2]));
    let mut modes = Vec::new();
    for _ in 0..3 {
        let k: [f64; 3] = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
        let amp: [f64; 3] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        modes.push((k, rng.random_range(0.0..std::f64::consts::TAU), amp));
    }
    let field = DisplacementField::from_fn(grid, move |p| {
        let mut u = [0.0; 3];
        for (k, ph, amp) in &modes {
            let s = (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin();
            for a in 0..3 {
                u[a] += amp[a] * s;
            }
        }
        u
    });
    Ok((fixed, moving, field))
}

/// Largest relative error between the analytic gradient and central finite
/// differences over `probes` random components. Components where both
/// values are below `1e-8` are skipped.
pub fn gradient_check(cfg: &RegConfig, grid_size: usize, probes: usize, eps: f64, term: LossTerm) -> Result<f64> {
    let (fixed, moving, field) = gradient_check_problem(grid_size, cfg.seed)?;
    gradient_check_on(cfg, &fixed, &moving, &field, probes, eps, term)
}

/// [`gradient_check`] on caller-supplied images and field.
pub fn gradient_check_on(
    cfg: &RegConfig,
    fixed: &Volume<f64>,
    moving: &Volume<f64>,
    field: &DisplacementField<f64>,
    probes: usize,
    eps: f64,
    term: LossTerm,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let zero = DisplacementField::zeros(fixed.grid);
    let (_, grad) = loss_and_gradient_term(fixed, moving, &zero, field, cfg, term)?;
    let problem = Problem::new(fixed.clone(), moving.clone(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let c = rng.random_range(0..field.data.len());
        let mut plus = field.clone();
        plus.data[c] += eps;
        let mut minus = field.clone();
        minus.data[c] -= eps;
        let lp = problem.eval(&plus, term, false)?.total;
        let lm = problem.eval(&minus, term, false)?.total;
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic = grad.data[c];
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-8 {
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::similarity_loss;
    use crate::volgrid::warp_volume;

    fn smooth_texture(grid: Grid, seed: u64) -> impl Fn([f64; 3]) -> f64 + Sync + Clone {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<([f64; 3], f64)> = (0..10)
            .map(|_| {
                let k = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                (k, rng.random_range(0.0..6.28))
            })
            .collect();
        let _ = grid;
        move |p: [f64; 3]| 50.0 + waves.iter().map(|(k, ph)| 8.0 * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()).sum::<f64>()
    }

    fn small_cfg() -> RegConfig {
        RegConfig {
            stages: vec![Stage { scale_factor: 2, iterations: 60, step_size: 0.4 }, Stage { scale_factor: 1, iterations: 60, step_size: 0.2 }],
            ..RegConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RegConfig::default();
        cfg.validate().unwrap();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: RegConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        assert!(serde_json::from_str::<RegConfig>(r#"{"lamda": 0.1}"#).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = RegConfig::default();
        c.stages.reverse();
        assert!(c.validate().is_err());
        let mut c = RegConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = RegConfig::default();
        c.stages[0].step_size = 0.0;
        assert!(c.validate().is_err());
        let mut c = RegConfig::default();
        c.stages.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn self_registration_stays_at_zero() {
        let g = Grid::unit([20, 20, 20]).unwrap();
        let v = Volume::<f64>::from_fn(g, smooth_texture(g, 1));
        let r = register(&v, &v, &small_cfg()).unwrap();
        assert!(r.field.mean_magnitude(None) < 0.05);
        assert!(r.final_loss.total <= r.initial_loss.total);
    }

    #[test]
    fn recovers_translation() {
        let g = Grid::unit([24, 24, 24]).unwrap();
        let tex = smooth_texture(g, 2);
        let fixed = Volume::<f64>::from_fn(g, tex.clone());
        let moving = Volume::<f64>::from_fn(g, move |p| tex([p[0] - 1.0, p[1], p[2]]));
        let cfg = RegConfig { lambda: 0.01, ..small_cfg() };
        let r = register(&fixed, &moving, &cfg).unwrap();
        // warped(x) = moving(x + u) = tex(x + u - 1) so u = +1 along x
        let mask = crate::kinematics::interior_mask(&g, 5);
        let mut err = 0.0;
        let mut n = 0.0;
        for idx in 0..g.len() {
            if mask[idx] {
                let u = r.field.get(idx);
                err += ((u[0] - 1.0).powi(2) + u[1].powi(2) + u[2].powi(2)).sqrt();
                n += 1.0;
            }
        }
        assert!(err / n < 0.3, "mean endpoint error {}", err / n);
        assert!(r.final_loss.sim < r.initial_loss.sim);
        let warped = warp_volume(&moving, &r.field).unwrap();
        assert!(similarity_loss(&fixed, &warped, &cfg.sim).unwrap() < -0.9);
    }

    #[test]
    fn zero_stages_returns_zero_field() {
        let g = Grid::unit([10, 10, 10]).unwrap();
        let a = Volume::<f64>::from_fn(g, smooth_texture(g, 3));
        let b = Volume::<f64>::from_fn(g, smooth_texture(g, 4));
        let cfg = RegConfig { stages: vec![], ..RegConfig::default() };
        let r = register(&a, &b, &cfg).unwrap();
        assert!(r.field.data.iter().all(|&x| x == 0.0));
        assert_eq!(r.final_loss.sim, similarity_loss(&a, &b, &cfg.sim).unwrap());
        assert_eq!(r.fold_fraction, 0.0);
    }

    #[test]
    fn grid_mismatch_and_tiny_coarse_grid_rejected() {
        let a = Volume::<f64>::zeros(Grid::unit([16, 16, 16]).unwrap());
        let b = Volume::<f64>::zeros(Grid::unit([16, 16, 15]).unwrap());
        assert!(matches!(register(&a, &b, &RegConfig::default()), Err(Error::GridMismatch(_))));
        assert!(matches!(register(&a, &a, &RegConfig::default()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn stationary_point_for_identical_images() {
        let g = Grid::unit([12, 12, 12]).unwrap();
        let v = Volume::<f64>::from_fn(g, smooth_texture(g, 5));
        let z = DisplacementField::zeros(g);
        let (_, grad) = loss_and_gradient(&v, &v, &z, &z, &RegConfig::default()).unwrap();
        let mask = crate::kinematics::interior_mask(&g, 1);
        for idx in 0..g.len() {
            if mask[idx] {
                for c in 0..3 {
                    assert!(grad.data[3 * idx + c].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = RegConfig::default();
        let sim = gradient_check(&cfg, 12, 50, 1e-3, LossTerm::Similarity).unwrap();
        let nhe = gradient_check(&cfg, 12, 50, 1e-3, LossTerm::Energy).unwrap();
        let tot = gradient_check(&cfg, 12, 50, 1e-3, LossTerm::Total).unwrap();
        assert!(sim < 1e-3, "{sim}");
        assert!(nhe < 1e-4, "{nhe}");
        assert!(tot < 1e-3, "{tot}");
    }

    #[test]
    fn energy_gradient_on_linear_field() {
        let g = Grid::unit([10, 10, 10]).unwrap();
        let v = Volume::<f64>::from_fn(g, smooth_texture(g, 6));
        let field = DisplacementField::from_fn(g, |p| [0.05 * p[0] + 0.02 * p[1], -0.03 * p[2], 0.04 * p[0]]);
        let e = gradient_check_on(&RegConfig::default(), &v, &v, &field, 50, 1e-3, LossTerm::Energy).unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn degenerate_gradient_check_is_skipped() {
        let g = Grid::unit([8, 8, 8]).unwrap();
        let v = Volume::<f64>::from_fn(g, smooth_texture(g, 7));
        let z = DisplacementField::zeros(g);
        let e = gradient_check_on(&RegConfig::default(), &v, &v, &z, 30, 1e-3, LossTerm::Energy).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn zero_lambda_equals_pure_similarity() {
        let (f, m, u) = gradient_check_problem(10, 3).unwrap();
        let z = DisplacementField::zeros(f.grid);
        let cfg = RegConfig { lambda: 0.0, ..RegConfig::default() };
        let (l0, g0) = loss_and_gradient(&f, &m, &z, &u, &cfg).unwrap();
        let (ls, gs) = loss_and_gradient_term(&f, &m, &z, &u, &cfg, LossTerm::Similarity).unwrap();
        assert_eq!(l0.to_bits(), ls.to_bits());
        assert!(g0.data.iter().zip(&gs.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn accumulated_and_increment_split_is_irrelevant() {
        let (f, m, u) = gradient_check_problem(10, 4).unwrap();
        let half = u.scaled(0.5);
        let z = DisplacementField::zeros(f.grid);
        let cfg = RegConfig::default();
        let (la, ga) = loss_and_gradient(&f, &m, &z, &u, &cfg).unwrap();
        let (lb, gb) = loss_and_gradient(&f, &m, &half, &half, &cfg).unwrap();
        assert!((la - lb).abs() < 1e-12);
        assert!(ga.data.iter().zip(&gb.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn deterministic_and_f32_agrees() {
        let g = Grid::unit([16, 16, 16]).unwrap();
        let tex = smooth_texture(g, 8);
        let fixed = Volume::<f64>::from_fn(g, tex.clone());
        let moving = Volume::<f64>::from_fn(g, move |p| tex([p[0] - 0.5, p[1] + 0.5, p[2]]));
        let cfg = RegConfig { stages: vec![Stage { scale_factor: 1, iterations: 15, step_size: 0.2 }], ..RegConfig::default() };
        let a = register(&fixed, &moving, &cfg).unwrap();
        let b = register(&fixed, &moving, &cfg).unwrap();
        assert!(a.field.data.iter().zip(&b.field.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        let r32 = register(&fixed.cast::<f32>(), &moving.cast::<f32>(), &cfg).unwrap();
        assert!((r32.final_loss.total - a.final_loss.total).abs() < 1e-2);
    }
}
