//! Local normalised cross-correlation over cubic windows, truncated at the
//! grid boundary, and its multi-window average used as the similarity loss.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volgrid::{box_sum, sum_ordered, window_counts, Volume};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Odd window edge lengths in voxels.
    pub windows: Vec<usize>,
    pub variance_eps: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { windows: vec![9, 5, 3], variance_eps: 1e-5 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::invalid("similarity needs at least one window"));
        }
        for &w in &self.windows {
            check_window(w)?;
        }
        if !(self.variance_eps >= 0.0 && self.variance_eps.is_finite()) {
            return Err(Error::invalid("variance_eps must be finite and non-negative"));
        }
        Ok(())
    }
}

pub(crate) fn check_window(w: usize) -> Result<()> {
    if w < 3 || w % 2 == 0 {
        return Err(Error::invalid(format!("window size must be odd and at least 3, got {w}")));
    }
    Ok(())
}

/// Fixed-image window statistics, reusable across evaluations against
/// different warped images.
#[derive(Clone, Debug)]
pub(crate) struct FixedStats<T> {
    radius: usize,
    count: Vec<T>,
    sum_f: Vec<T>,
    /// Σ(f - f̄)² over the window.
    var_f: Vec<T>,
}

impl<T: Real> FixedStats<T> {
    pub(crate) fn new(fixed: &Volume<T>, window: usize) -> Self {
        let radius = window / 2;
        let dims = fixed.grid.dims;
        let count = window_counts(dims, radius);
        let sum_f = box_sum(&fixed.data, dims, radius);
        let sq: Vec<T> = fixed.data.iter().map(|&f| f * f).collect();
        let sum_ff = box_sum(&sq, dims, radius);
        let var_f = sum_ff
            .iter()
            .zip(&sum_f)
            .zip(&count)
            .map(|((&sff, &sf), &n)| (sff - sf * sf / n).max(T::zero()))
            .collect();
        Self { radius, count, sum_f, var_f }
    }
}

struct WindowTerms<T> {
    cc: Vec<T>,
    /// ∂cc/∂cross · ... coefficients used by the adjoint.
    a: Vec<T>,
    b: Vec<T>,
    mean_f: Vec<T>,
    mean_w: Vec<T>,
}

fn window_terms<T: Real>(
    stats: &FixedStats<T>,
    fixed: &Volume<T>,
    warped: &Volume<T>,
    eps: T,
    with_grad: bool,
) -> WindowTerms<T> {
    let dims = fixed.grid.dims;
    let r = stats.radius;
    let sum_w = box_sum(&warped.data, dims, r);
    let ww: Vec<T> = warped.data.iter().map(|&w| w * w).collect();
    let sum_ww = box_sum(&ww, dims, r);
    let fw: Vec<T> = fixed.data.iter().zip(&warped.data).map(|(&f, &w)| f * w).collect();
    let sum_fw = box_sum(&fw, dims, r);

    let n = fixed.grid.len();
    let mut cc = Vec::with_capacity(n);
    let (mut a, mut b, mut mean_f, mut mean_w) = if with_grad {
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n))
    } else {
        (Vec::new(), Vec::new(), Vec::new(), Vec::new())
    };
    let two = T::lit(2.0);
    for p in 0..n {
        let cnt = stats.count[p];
        let sf = stats.sum_f[p];
        let sw = sum_w[p];
        let cross = sum_fw[p] - sf * sw / cnt;
        let var_w = (sum_ww[p] - sw * sw / cnt).max(T::zero());
        let df = stats.var_f[p] + eps;
        let dw = var_w + eps;
        let denom = df * dw;
        let (c, ap, bp) = if denom > T::zero() {
            let c = cross * cross / denom;
            (c, two * cross / denom, two * c / dw)
        } else {
            (T::zero(), T::zero(), T::zero())
        };
        cc.push(c);
        if with_grad {
            a.push(ap);
            b.push(bp);
            mean_f.push(sf / cnt);
            mean_w.push(sw / cnt);
        }
    }
    WindowTerms { cc, a, b, mean_f, mean_w }
}

fn check_pair<T: Real>(fixed: &Volume<T>, warped: &Volume<T>) -> Result<()> {
    fixed.grid.ensure_matches(&warped.grid, "local cross-correlation")
}

/// Squared local NCC per voxel, in [0, 1].
pub fn lncc_map<T: Real>(fixed: &Volume<T>, warped: &Volume<T>, window: usize, eps: f64) -> Result<Volume<T>> {
    check_pair(fixed, warped)?;
    check_window(window)?;
    let stats = FixedStats::new(fixed, window);
    let t = window_terms(&stats, fixed, warped, T::lit(eps), false);
    Ok(Volume { grid: fixed.grid, data: t.cc })
}

/// `-(1/|windows|) Σ_w mean_p lncc(w)`, in [-1, 0].
pub fn similarity_loss<T: Real>(fixed: &Volume<T>, warped: &Volume<T>, cfg: &SimConfig) -> Result<T> {
    check_pair(fixed, warped)?;
    cfg.validate()?;
    let stats: Vec<FixedStats<T>> = cfg.windows.iter().map(|&w| FixedStats::new(fixed, w)).collect();
    Ok(similarity_with_stats(&stats, fixed, warped, T::lit(cfg.variance_eps), false).0)
}

/// Loss and, when requested, ∂loss/∂warped per voxel.
pub(crate) fn similarity_with_stats<T: Real>(
    stats: &[FixedStats<T>],
    fixed: &Volume<T>,
    warped: &Volume<T>,
    eps: T,
    with_grad: bool,
) -> (T, Option<Vec<T>>) {
    let n = fixed.grid.len();
    let dims = fixed.grid.dims;
    let scale = T::lit(1.0 / (stats.len() as f64 * n as f64));
    let mut loss = T::zero();
    let mut grad = if with_grad { Some(vec![T::zero(); n]) } else { None };
    for s in stats {
        let t = window_terms(s, fixed, warped, eps, with_grad);
        loss -= sum_ordered(&t.cc) / T::lit(n as f64);
        if let Some(g) = grad.as_mut() {
            // dcc_p/dw_q = A_p (f_q - f̄_p) - B_p (w_q - w̄_p) for q in window(p);
            // the transpose is again a truncated box sum
            let af: Vec<T> = t.a.iter().zip(&t.mean_f).map(|(&a, &m)| a * m).collect();
            let bw: Vec<T> = t.b.iter().zip(&t.mean_w).map(|(&b, &m)| b * m).collect();
            let sa = box_sum(&t.a, dims, s.radius);
            let saf = box_sum(&af, dims, s.radius);
            let sb = box_sum(&t.b, dims, s.radius);
            let sbw = box_sum(&bw, dims, s.radius);
            for q in 0..n {
                let d = fixed.data[q] * sa[q] - saf[q] - warped.data[q] * sb[q] + sbw[q];
                g[q] -= d * scale;
            }
        }
    }
    (loss / T::lit(stats.len() as f64), grad)
}
