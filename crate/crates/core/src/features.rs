//! Per-case feature vectors from moduli maps, displacement magnitudes and
//! label volumes, plus the six-label derivation from three segmentation
//! classes.

use crate::classify::CardiacClass;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volgrid::{DisplacementField, Grid, LabelMap, Volume};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

pub const LABEL_RV_SIDE_MYO: u8 = 1;
pub const LABEL_FREE_WALL_MYO: u8 = 2;
pub const LABEL_LV_CAVITY: u8 = 3;
pub const LABEL_SEPTAL_MYO: u8 = 4;
pub const LABEL_RV_CAVITY: u8 = 5;
pub const LABEL_SURROUNDING: u8 = 6;

/// Myocardium labels (union of 1, 2 and 4).
pub const MYOCARDIUM: [u8; 3] = [LABEL_RV_SIDE_MYO, LABEL_FREE_WALL_MYO, LABEL_SEPTAL_MYO];

/// Binary dilation with a Euclidean ball of `radius` voxels (index units).
pub(crate) fn dilate(mask: &[bool], dims: [usize; 3], radius: usize) -> Vec<bool> {
    let r = radius as i64;
    let offsets: Vec<[i64; 3]> = (-r..=r)
        .flat_map(|k| (-r..=r).flat_map(move |j| (-r..=r).map(move |i| [i, j, k])))
        .filter(|o| o[0] * o[0] + o[1] * o[1] + o[2] * o[2] <= r * r)
        .collect();
    let mut out = mask.to_vec();
    let n = [dims[0] as i64, dims[1] as i64, dims[2] as i64];
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let idx = (i + n[0] * (j + n[1] * k)) as usize;
                if !mask[idx] {
                    continue;
                }
                for o in &offsets {
                    let (a, b, c) = (i + o[0], j + o[1], k + o[2]);
                    if a >= 0 && b >= 0 && c >= 0 && a < n[0] && b < n[1] && c < n[2] {
                        out[(a + n[0] * (b + n[1] * c)) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

fn centroid_x(mask: &[bool], grid: &Grid) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for (idx, &m) in mask.iter().enumerate() {
        if m {
            s += grid.coords(idx)[0] as f64;
            n += 1.0;
        }
    }
    s / n
}

/// Six labels from LV cavity, myocardium and RV cavity masks:
/// 3 = LV cavity, 5 = RV cavity, myocardium split by the x-plane through
/// the LV-cavity centroid (RV side = 1, other = 2), myocardium within 2
/// voxels of the RV cavity = 4, and 6 = 3-voxel dilation shell of the union.
pub fn split_acdc_labels(grid: &Grid, lv_cavity: &[bool], myocardium: &[bool], rv_cavity: &[bool]) -> Result<LabelMap> {
    let n = grid.len();
    for (m, name) in [(lv_cavity, "LV cavity"), (myocardium, "myocardium"), (rv_cavity, "RV cavity")] {
        if m.len() != n {
            return Err(Error::GridMismatch(format!("{name} mask length {} != {n}", m.len())));
        }
    }
    for (m, name) in [(lv_cavity, "LV cavity"), (myocardium, "myocardium"), (rv_cavity, "RV cavity")] {
        if !m.iter().any(|&b| b) {
            return Err(Error::EmptyMask(name));
        }
    }
    if (0..n).any(|i| (lv_cavity[i] as u8 + myocardium[i] as u8 + rv_cavity[i] as u8) > 1) {
        return Err(Error::invalid("segmentation masks overlap"));
    }
    let cx = centroid_x(lv_cavity, grid);
    let rv_left = centroid_x(rv_cavity, grid) < cx;
    let near_rv = dilate(rv_cavity, grid.dims, 2);
    let union: Vec<bool> = (0..n).map(|i| lv_cavity[i] || myocardium[i] || rv_cavity[i]).collect();
    let shell = dilate(&union, grid.dims, 3);
    let data = (0..n)
        .map(|i| {
            if lv_cavity[i] {
                LABEL_LV_CAVITY
            } else if rv_cavity[i] {
                LABEL_RV_CAVITY
            } else if myocardium[i] {
                if near_rv[i] {
                    LABEL_SEPTAL_MYO
                } else {
                    let x = grid.coords(i)[0] as f64;
                    if (x < cx) == rv_left { LABEL_RV_SIDE_MYO } else { LABEL_FREE_WALL_MYO }
                }
            } else if shell[i] {
                LABEL_SURROUNDING
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(*grid, data)
}

/// Anatomical labels used by the feature grid, in canonical order.
pub const FEATURE_LABELS: [u8; 6] = [1, 2, 3, 4, 5, 6];
/// Denominators below this magnitude make a ratio feature 0 (with a warning).
pub const RATIO_GUARD: f64 = 1e-9;
/// Number of features in the canonical enumeration.
pub const N_FEATURES: usize = 312;

/// Mean, population standard deviation and linearly interpolated
/// 10th/90th percentiles of a region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean: f64,
    pub std: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Percentile by linear interpolation between closest ranks at position
/// `q (n - 1)` of the sorted values.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Statistics of `map` over the voxels carrying `label`.
pub fn region_stats<T: Real>(map: &Volume<T>, labels: &LabelMap, label: u8) -> Result<RegionStats> {
    map.grid.ensure_matches(&labels.grid, "region_stats")?;
    let mut vals: Vec<f64> =
        map.data.iter().zip(&labels.data).filter(|(_, &l)| l == label).map(|(v, _)| v.to_f64_lossy()).collect();
    if vals.is_empty() {
        return Err(Error::MissingLabel(label));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    vals.sort_by(f64::total_cmp);
    Ok(RegionStats { mean, std: var.sqrt(), p10: percentile_sorted(&vals, 0.1), p90: percentile_sorted(&vals, 0.9) })
}

/// Per-voxel Euclidean norm of a displacement field (mm).
pub fn field_magnitude<T: Real>(field: &DisplacementField<T>) -> Volume<T> {
    let data = field.data.chunks_exact(3).map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()).collect();
    Volume { grid: field.grid, data }
}

/// Volume of a label in ml.
pub fn label_volume(labels: &LabelMap, label: u8) -> f64 {
    labels.count(label) as f64 * labels.grid.voxel_volume_mm3() / 1000.0
}

/// Feature value family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quantity {
    Mu,
    Kappa,
    PhiMag,
    Vol,
}

impl Quantity {
    pub const MAPS: [Quantity; 3] = [Quantity::Mu, Quantity::Kappa, Quantity::PhiMag];
    pub const ALL: [Quantity; 4] = [Quantity::Mu, Quantity::Kappa, Quantity::PhiMag, Quantity::Vol];

    pub fn token(self) -> &'static str {
        match self {
            Quantity::Mu => "mu",
            Quantity::Kappa => "kappa",
            Quantity::PhiMag => "phimag",
            Quantity::Vol => "vol",
        }
    }
}

/// Label part of a feature name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelSpec {
    Single(u8),
    /// Ratio quantity(a) / quantity(b), a < b.
    Pair(u8, u8),
    /// Ratio of a label's volume to the total volume of labels 1-6.
    Total(u8),
}

/// Statistic part of a feature name. `Sum` is the plain volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stat {
    Mean,
    Std,
    P10,
    P90,
    Sum,
    Ratio,
}

impl Stat {
    pub const REGION: [Stat; 4] = [Stat::Mean, Stat::Std, Stat::P10, Stat::P90];

    pub fn token(self) -> &'static str {
        match self {
            Stat::Mean => "mean",
            Stat::Std => "std",
            Stat::P10 => "p10",
            Stat::P90 => "p90",
            Stat::Sum => "sum",
            Stat::Ratio => "ratio",
        }
    }
}

/// Phase part of a feature name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PhaseSpec {
    ED,
    ES,
    EDoverES,
}

impl PhaseSpec {
    pub fn token(self) -> &'static str {
        match self {
            PhaseSpec::ED => "ED",
            PhaseSpec::ES => "ES",
            PhaseSpec::EDoverES => "EDoverES",
        }
    }
}

/// Structured feature name rendered as `value_label_stat_phase`, e.g.
/// `mu_3_mean_ES`, `vol_1_4_ratio_ED`, `vol_5_total_ratio_ES`,
/// `phimag_2_ratio_EDoverES`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureName {
    pub value: Quantity,
    pub label: LabelSpec,
    pub stat: Stat,
    pub phase: PhaseSpec,
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.label {
            LabelSpec::Single(a) => a.to_string(),
            LabelSpec::Pair(a, b) => format!("{a}_{b}"),
            LabelSpec::Total(a) => format!("{a}_total"),
        };
        write!(f, "{}_{}_{}_{}", self.value.token(), label, self.stat.token(), self.phase.token())
    }
}

impl FromStr for FeatureName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("malformed feature name `{s}`"));
        let parts: Vec<&str> = s.split('_').collect();
        if parts.len() < 4 || parts.len() > 5 {
            return Err(bad());
        }
        let value = Quantity::ALL.into_iter().find(|q| q.token() == parts[0]).ok_or_else(bad)?;
        let phase = [PhaseSpec::ED, PhaseSpec::ES, PhaseSpec::EDoverES]
            .into_iter()
            .find(|p| p.token() == parts[parts.len() - 1])
            .ok_or_else(bad)?;
        let stat = [Stat::Mean, Stat::Std, Stat::P10, Stat::P90, Stat::Sum, Stat::Ratio]
            .into_iter()
            .find(|t| t.token() == parts[parts.len() - 2])
            .ok_or_else(bad)?;
        let lab = |t: &str| -> Result<u8> {
            let l: u8 = t.parse().map_err(|_| bad())?;
            if FEATURE_LABELS.contains(&l) { Ok(l) } else { Err(bad()) }
        };
        let label = match &parts[1..parts.len() - 2] {
            [a] => LabelSpec::Single(lab(a)?),
            [a, "total"] => LabelSpec::Total(lab(a)?),
            [a, b] => {
                let (a, b) = (lab(a)?, lab(b)?);
                if a >= b {
                    return Err(bad());
                }
                LabelSpec::Pair(a, b)
            }
            _ => return Err(bad()),
        };
        let name = FeatureName { value, label, stat, phase };
        if !canonical_feature_names().contains(&name) {
            return Err(bad());
        }
        Ok(name)
    }
}

fn label_pairs() -> Vec<(u8, u8)> {
    let mut out = Vec::new();
    for (i, &a) in FEATURE_LABELS.iter().enumerate() {
        for &b in &FEATURE_LABELS[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// The 312 feature names in canonical order: region statistics (144),
/// volumes (12), ED/ES ratios (24), label-pair ratios (120) and volume
/// fractions (12).
pub fn canonical_feature_names() -> Vec<FeatureName> {
    use PhaseSpec::{ED, ES};
    let mut out = Vec::with_capacity(N_FEATURES);
    for q in Quantity::MAPS {
        for l in FEATURE_LABELS {
            for st in Stat::REGION {
                for ph in [ED, ES] {
                    out.push(FeatureName { value: q, label: LabelSpec::Single(l), stat: st, phase: ph });
                }
            }
        }
    }
    for l in FEATURE_LABELS {
        for ph in [ED, ES] {
            out.push(FeatureName { value: Quantity::Vol, label: LabelSpec::Single(l), stat: Stat::Sum, phase: ph });
        }
    }
    for q in Quantity::ALL {
        for l in FEATURE_LABELS {
            out.push(FeatureName { value: q, label: LabelSpec::Single(l), stat: Stat::Ratio, phase: PhaseSpec::EDoverES });
        }
    }
    for q in Quantity::ALL {
        for (a, b) in label_pairs() {
            for ph in [ED, ES] {
                out.push(FeatureName { value: q, label: LabelSpec::Pair(a, b), stat: Stat::Ratio, phase: ph });
            }
        }
    }
    for l in FEATURE_LABELS {
        for ph in [ED, ES] {
            out.push(FeatureName { value: Quantity::Vol, label: LabelSpec::Total(l), stat: Stat::Ratio, phase: ph });
        }
    }
    out
}

/// Maps and labels of one phase.
#[derive(Clone, Debug)]
pub struct PhaseMaps {
    pub mu: Volume<f64>,
    pub kappa: Volume<f64>,
    pub phimag: Volume<f64>,
    pub labels: LabelMap,
}

impl PhaseMaps {
    fn map(&self, q: Quantity) -> &Volume<f64> {
        match q {
            Quantity::Mu => &self.mu,
            Quantity::Kappa => &self.kappa,
            Quantity::PhiMag => &self.phimag,
            Quantity::Vol => unreachable!("volume is not a map"),
        }
    }
}

/// One case's feature values in canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub case_id: String,
    pub class_label: CardiacClass,
    pub values: Vec<(String, f64)>,
}

impl FeatureVector {
    pub fn names(&self) -> Vec<&str> {
        self.values.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// A ratio whose denominator fell below [`RATIO_GUARD`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWarning {
    pub feature: String,
    pub denominator: f64,
}

struct PhaseSummary {
    stats: HashMap<(Quantity, u8), RegionStats>,
    volumes: HashMap<u8, f64>,
}

impl PhaseSummary {
    fn new(p: &PhaseMaps) -> Result<Self> {
        for q in Quantity::MAPS {
            p.map(q).grid.ensure_matches(&p.labels.grid, "feature map")?;
        }
        let mut stats = HashMap::new();
        for q in Quantity::MAPS {
            for l in FEATURE_LABELS {
                stats.insert((q, l), region_stats(p.map(q), &p.labels, l)?);
            }
        }
        let volumes = FEATURE_LABELS.iter().map(|&l| (l, label_volume(&p.labels, l))).collect();
        Ok(Self { stats, volumes })
    }

    /// Region mean of a map, or the volume.
    fn quantity(&self, q: Quantity, l: u8) -> f64 {
        match q {
            Quantity::Vol => self.volumes[&l],
            _ => self.stats[&(q, l)].mean,
        }
    }

    fn stat(&self, q: Quantity, l: u8, s: Stat) -> f64 {
        let r = &self.stats[&(q, l)];
        match s {
            Stat::Mean => r.mean,
            Stat::Std => r.std,
            Stat::P10 => r.p10,
            Stat::P90 => r.p90,
            Stat::Sum | Stat::Ratio => unreachable!("not a region statistic"),
        }
    }

    fn total_volume(&self) -> f64 {
        FEATURE_LABELS.iter().map(|l| self.volumes[l]).sum()
    }
}

fn guarded_ratio(name: &FeatureName, num: f64, den: f64, warnings: &mut Vec<FeatureWarning>) -> f64 {
    if den.abs() < RATIO_GUARD {
        log::warn!("feature {name}: denominator {den:e} below guard, value set to 0");
        warnings.push(FeatureWarning { feature: name.to_string(), denominator: den });
        0.0
    } else {
        num / den
    }
}

/// The canonical 312-feature vector of a case from its ED and ES maps.
/// Every label 1-6 must be present at both phases.
pub fn extract_features(
    case_id: &str,
    class_label: CardiacClass,
    ed: &PhaseMaps,
    es: &PhaseMaps,
) -> Result<(FeatureVector, Vec<FeatureWarning>)> {
    ed.labels.grid.ensure_matches(&es.labels.grid, "ED/ES labels")?;
    let s_ed = PhaseSummary::new(ed)?;
    let s_es = PhaseSummary::new(es)?;
    let by_phase = |ph: PhaseSpec| if ph == PhaseSpec::ES { &s_es } else { &s_ed };
    let mut warnings = Vec::new();
    let values = canonical_feature_names()
        .into_iter()
        .map(|n| {
            let v = match (n.label, n.stat, n.phase) {
                (LabelSpec::Single(l), Stat::Ratio, PhaseSpec::EDoverES) => {
                    guarded_ratio(&n, s_ed.quantity(n.value, l), s_es.quantity(n.value, l), &mut warnings)
                }
                (LabelSpec::Single(l), Stat::Sum, ph) => by_phase(ph).quantity(Quantity::Vol, l),
                (LabelSpec::Single(l), st, ph) => by_phase(ph).stat(n.value, l, st),
                (LabelSpec::Pair(a, b), _, ph) => {
                    let s = by_phase(ph);
                    guarded_ratio(&n, s.quantity(n.value, a), s.quantity(n.value, b), &mut warnings)
                }
                (LabelSpec::Total(l), _, ph) => {
                    let s = by_phase(ph);
                    guarded_ratio(&n, s.quantity(Quantity::Vol, l), s.total_volume(), &mut warnings)
                }
            };
            (n.to_string(), v)
        })
        .collect();
    Ok((FeatureVector { case_id: case_id.to_string(), class_label, values }, warnings))
}

/// Writes feature vectors as CSV with header `case_id,class,<names>`.
/// All vectors must share one name order.
pub fn write_features_csv<W: Write>(w: W, rows: &[FeatureVector]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let names: Vec<&str> = match rows.first() {
        Some(r) => r.names(),
        None => return Err(Error::invalid("no feature rows to write")),
    };
    let mut header = vec!["case_id", "class"];
    header.extend(names.iter().copied());
    wr.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.names() != names {
            return Err(Error::Schema(format!("case {} has a different feature order", r.case_id)));
        }
        let mut rec = vec![r.case_id.clone(), r.class_label.to_string()];
        rec.extend(r.values.iter().map(|(_, v)| format_float(*v)));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a feature CSV written by [`write_features_csv`].
pub fn read_features_csv<R: Read>(r: R) -> Result<Vec<FeatureVector>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "case_id" || header[1] != "class" {
        return Err(Error::Schema("feature CSV header must start with `case_id,class` and name at least one feature".into()));
    }
    let names = &header[2..];
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(Error::Schema(format!("row has {} fields, header has {}", rec.len(), header.len())));
        }
        let class_label: CardiacClass = rec[1].parse()?;
        let values = names
            .iter()
            .zip(rec.iter().skip(2))
            .map(|(n, v)| {
                let x: f64 = v.parse().map_err(|_| Error::Schema(format!("feature {n}: `{v}` is not a number")))?;
                if !x.is_finite() {
                    return Err(Error::Schema(format!("feature {n} is not finite")));
                }
                Ok((n.clone(), x))
            })
            .collect::<Result<_>>()?;
        out.push(FeatureVector { case_id: rec[0].to_string(), class_label, values });
    }
    Ok(out)
}

/// Shortest decimal that round-trips, '.' separator, no exponent grouping.
pub fn format_float(x: f64) -> String {
    format!("{x:?}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Schema(format!("CSV: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn annulus_masks(grid: &Grid) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
        let c = [10.0, 10.0, 6.0];
        let n = grid.len();
        let (mut lv, mut myo, mut rv) = (vec![false; n], vec![false; n], vec![false; n]);
        for i in 0..n {
            let p = grid.coords(i).map(|x| x as f64);
            let r = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            let rr = ((p[0] - 21.0).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
            let inz = p[2] >= 3.0 && p[2] <= 9.0;
            if !inz {
                continue;
            }
            if r < 4.0 {
                lv[i] = true;
            } else if r < 7.0 {
                myo[i] = true;
            } else if rr < 3.5 {
                rv[i] = true;
            }
        }
        (lv, myo, rv)
    }

    #[test]
    fn six_labels_from_three_masks() {
        let g = Grid::unit([30, 21, 13]).unwrap();
        let (lv, myo, rv) = annulus_masks(&g);
        let l = split_acdc_labels(&g, &lv, &myo, &rv).unwrap();
        for lab in 1..=6 {
            assert!(l.count(lab) > 0, "label {lab} empty");
        }
        let myo_union = l.mask_any(&MYOCARDIUM);
        assert_eq!(myo_union, myo);
        assert!(l.mask(3) == lv && l.mask(5) == rv);
        let empty = vec![false; g.len()];
        assert!(matches!(split_acdc_labels(&g, &lv, &myo, &empty), Err(Error::EmptyMask("RV cavity"))));
    }

    #[test]
    fn centroid_plane_halves_a_symmetric_annulus() {
        // RV far away so label 4 is empty and labels 1/2 are the two halves
        let g = Grid::unit([41, 21, 5]).unwrap();
        let n = g.len();
        let (mut lv, mut myo, mut rv) = (vec![false; n], vec![false; n], vec![false; n]);
        for i in 0..n {
            let p = g.coords(i).map(|x| x as f64);
            let r = ((p[0] - 10.0).powi(2) + (p[1] - 10.0).powi(2)).sqrt();
            if r < 4.0 {
                lv[i] = true;
            } else if r < 7.0 {
                myo[i] = true;
            } else if (p[0] - 37.0).abs() <= 1.0 && (p[1] - 10.0).abs() <= 1.0 {
                rv[i] = true;
            }
        }
        let l = split_acdc_labels(&g, &lv, &myo, &rv).unwrap();
        assert_eq!(l.count(4), 0);
        // the centroid plane x = 10 itself goes to the free-wall side; one
        // voxel layer of slack
        let layer = (0..n).filter(|&i| myo[i] && g.coords(i)[0] == 10).count();
        let diff = (l.count(1) as i64 - l.count(2) as i64).unsigned_abs() as usize;
        assert!(diff <= layer, "{} vs {}", l.count(1), l.count(2));
    }

    #[test]
    fn region_stats_examples() {
        let g = Grid::unit([4, 1, 1]).unwrap();
        let m = Volume::new(g, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let labels = LabelMap::new(g, vec![1; 4]).unwrap();
        let s = region_stats(&m, &labels, 1).unwrap();
        assert!((s.mean - 2.5).abs() < 1e-12);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-12);
        assert!((s.p10 - 1.3).abs() < 1e-12 && (s.p90 - 3.7).abs() < 1e-12);
        let c = region_stats(&Volume::filled(g, 7.0), &labels, 1).unwrap();
        assert_eq!((c.mean, c.std, c.p10, c.p90), (7.0, 0.0, 7.0, 7.0));
        let one = LabelMap::new(g, vec![0, 0, 2, 0]).unwrap();
        let s1 = region_stats(&m, &one, 2).unwrap();
        assert_eq!((s1.mean, s1.std, s1.p10, s1.p90), (3.0, 0.0, 3.0, 3.0));
        assert!(matches!(region_stats(&m, &one, 5), Err(Error::MissingLabel(5))));
    }

    #[test]
    fn magnitude_and_volume_examples() {
        let g = Grid::new([2, 2, 2], [2.0; 3], [0.0; 3]).unwrap();
        assert!(field_magnitude(&DisplacementField::<f64>::zeros(g)).data.iter().all(|&v| v == 0.0));
        assert!(field_magnitude(&DisplacementField::constant(g, [3.0, 4.0, 0.0])).data.iter().all(|&v| v == 5.0));
        let s3 = field_magnitude(&DisplacementField::constant(g, [1.0, 1.0, 1.0]));
        assert!(s3.data.iter().all(|&v| (v - 3f64.sqrt()).abs() < 1e-15));
        let l = LabelMap::new(g, vec![3; 8]).unwrap();
        assert!((label_volume(&l, 3) - 0.064).abs() < 1e-15);
        assert_eq!(label_volume(&l, 1), 0.0);
        let g1 = Grid::unit([10, 10, 10]).unwrap();
        assert!((label_volume(&LabelMap::new(g1, vec![1; 1000]).unwrap(), 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn canonical_names_are_unique_and_parse() {
        let names = canonical_feature_names();
        assert_eq!(names.len(), N_FEATURES);
        let rendered: std::collections::HashSet<String> = names.iter().map(|n| n.to_string()).collect();
        assert_eq!(rendered.len(), N_FEATURES);
        for n in &names {
            assert_eq!(&n.to_string().parse::<FeatureName>().unwrap(), n);
        }
        assert_eq!(names[0].to_string(), "mu_1_mean_ED");
        assert!(rendered.contains("vol_3_ratio_EDoverES"));
        assert!(rendered.contains("vol_3_5_ratio_ED"));
        assert!(rendered.contains("vol_6_total_ratio_ES"));
        assert!(rendered.contains("phimag_2_sum_ED") == false);
        for bad in ["mu_7_mean_ED", "mu_2_1_ratio_ED", "foo_1_mean_ED", "mu_1_mean", "mu_1_ratio_ED"] {
            assert!(bad.parse::<FeatureName>().is_err(), "{bad}");
        }
    }

    fn phase_maps(labels: &LabelMap, scale: f64) -> PhaseMaps {
        let g = labels.grid;
        PhaseMaps {
            mu: Volume::from_fn(g, |p| scale * (2.0 + 0.1 * p[0])),
            kappa: Volume::from_fn(g, |p| 100.0 + p[1]),
            phimag: Volume::from_fn(g, |p| 0.5 + 0.01 * p[2] * p[0]),
            labels: labels.clone(),
        }
    }

    fn six_label_map() -> LabelMap {
        let g = Grid::new([12, 2, 2], [1.5, 1.0, 2.0], [0.0; 3]).unwrap();
        LabelMap::new(g, (0..g.len()).map(|i| (g.coords(i)[0] / 2 + 1) as u8).collect()).unwrap()
    }

    #[test]
    fn feature_vector_has_canonical_layout() {
        let l = six_label_map();
        let (fv, warnings) = extract_features("c0", CardiacClass::NOR, &phase_maps(&l, 1.0), &phase_maps(&l, 1.0)).unwrap();
        assert_eq!(fv.values.len(), N_FEATURES);
        assert!(fv.values.iter().all(|(_, v)| v.is_finite()));
        assert!(warnings.is_empty());
        for (n, v) in &fv.values {
            if n.ends_with("EDoverES") {
                assert!((v - 1.0).abs() < 1e-12, "{n} = {v}");
            }
        }
        let vol1 = fv.get("vol_1_sum_ED").unwrap();
        assert!((vol1 - 8.0 * 3.0 / 1000.0).abs() < 1e-15);
        assert!((fv.get("vol_1_total_ratio_ED").unwrap() - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn scaling_a_map_scales_stats_and_keeps_ratios() {
        let l = six_label_map();
        let (a, _) = extract_features("c", CardiacClass::HCM, &phase_maps(&l, 1.0), &phase_maps(&l, 1.0)).unwrap();
        let (b, _) = extract_features("c", CardiacClass::HCM, &phase_maps(&l, 3.0), &phase_maps(&l, 3.0)).unwrap();
        for ((n, x), (_, y)) in a.values.iter().zip(&b.values) {
            let f: FeatureName = n.parse().unwrap();
            if f.value != Quantity::Mu {
                assert_eq!(x, y);
            } else if f.stat == Stat::Ratio {
                assert!((x - y).abs() < 1e-12 * x.abs().max(1.0), "{n}");
            } else {
                assert!((3.0 * x - y).abs() < 1e-12 * y.abs().max(1.0), "{n}");
            }
        }
    }

    #[test]
    fn percentiles_bracket_the_mean_and_guard_fires() {
        let l = six_label_map();
        let mut es = phase_maps(&l, 1.0);
        es.phimag = Volume::filled(l.grid, 0.0);
        let (fv, warnings) = extract_features("z", CardiacClass::RV, &phase_maps(&l, 1.0), &es).unwrap();
        assert!(!warnings.is_empty());
        assert_eq!(fv.get("phimag_1_ratio_EDoverES"), Some(0.0));
        assert_eq!(fv.get("phimag_1_2_ratio_ES"), Some(0.0));
        for lab in 1..=6 {
            let s = region_stats(&phase_maps(&l, 1.0).phimag, &l, lab).unwrap();
            assert!(s.p10 <= s.mean + 1e-15 && s.mean <= s.p90 + 1e-15);
        }
        let mut missing = l.clone();
        missing.data.iter_mut().for_each(|v| if *v == 6 { *v = 0 });
        assert!(matches!(
            extract_features("m", CardiacClass::RV, &phase_maps(&missing, 1.0), &phase_maps(&l, 1.0)),
            Err(Error::MissingLabel(6))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let l = six_label_map();
        let (a, _) = extract_features("case,a", CardiacClass::MINF, &phase_maps(&l, 1.0), &phase_maps(&l, 2.0)).unwrap();
        let (b, _) = extract_features("b", CardiacClass::DCM, &phase_maps(&l, 0.5), &phase_maps(&l, 1.0)).unwrap();
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("case_id,class,mu_1_mean_ED,"));
        assert!(!text.contains('\r'));
        let back = read_features_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
