//! Label propagation along a cine sequence, local weighted voting and Dice.

use crate::error::{Error, Result};
use crate::registration::{register, RegConfig};
use crate::scalar::Real;
use crate::similarity::{lncc_map, SimConfig};
use crate::volgrid::{compose_fields, warp_labels, warp_volume, DisplacementField, LabelMap, Volume};
use rayon::prelude::*;

/// Cardiac phase selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    ED,
    ES,
}

/// Ordered frames on one grid with ED/ES indices and their labels.
#[derive(Clone, Debug)]
pub struct CineSequence<T> {
    pub frames: Vec<Volume<T>>,
    pub ed_index: usize,
    pub es_index: usize,
    pub labels_ed: LabelMap,
    pub labels_es: LabelMap,
}

impl<T: Real> CineSequence<T> {
    pub fn new(frames: Vec<Volume<T>>, ed_index: usize, es_index: usize, labels_ed: LabelMap, labels_es: LabelMap) -> Result<Self> {
        let seq = Self { frames, ed_index, es_index, labels_ed, labels_es };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.frames.first().ok_or_else(|| Error::invalid("cine sequence has no frames"))?;
        for f in &self.frames[1..] {
            first.grid.ensure_matches(&f.grid, "cine frames")?;
        }
        first.grid.ensure_matches(&self.labels_ed.grid, "ED labels")?;
        first.grid.ensure_matches(&self.labels_es.grid, "ES labels")?;
        let n = self.frames.len();
        if self.ed_index >= n || self.es_index >= n || self.ed_index == self.es_index {
            return Err(Error::invalid(format!(
                "ED/ES indices ({}, {}) must be distinct and below {n}",
                self.ed_index, self.es_index
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn phase_index(&self, phase: Phase) -> usize {
        match phase {
            Phase::ED => self.ed_index,
            Phase::ES => self.es_index,
        }
    }

    pub fn phase_labels(&self, phase: Phase) -> &LabelMap {
        match phase {
            Phase::ED => &self.labels_ed,
            Phase::ES => &self.labels_es,
        }
    }
}

/// Default number of atlas frames for multi-frame segmentation.
pub const DEFAULT_N_ADJACENT: usize = 2;
/// Default local-weighted-voting window (voxels).
pub const DEFAULT_LWV_WINDOW: usize = 5;

/// Dice overlap of one label; 1 when both sets are empty.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u8) -> Result<f64> {
    dice_group(a, b, &[label])
}

/// Dice overlap of the union of `labels` in each map.
pub fn dice_group(a: &LabelMap, b: &LabelMap, labels: &[u8]) -> Result<f64> {
    a.grid.ensure_matches(&b.grid, "dice")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let ia = labels.contains(&x);
        let ib = labels.contains(&y);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// The three anatomical structures scored by cardiac segmentation Dice:
/// LV cavity, myocardium (labels 1, 2, 4) and RV cavity.
pub const ANATOMICAL_GROUPS: [(&str, &[u8]); 3] = [
    ("LV", &[crate::features::LABEL_LV_CAVITY]),
    ("MYO", &crate::features::MYOCARDIUM),
    ("RV", &[crate::features::LABEL_RV_CAVITY]),
];

/// Dice per anatomical structure, in [`ANATOMICAL_GROUPS`] order.
pub fn anatomical_dice(a: &LabelMap, b: &LabelMap) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (o, (_, g)) in out.iter_mut().zip(ANATOMICAL_GROUPS.iter()) {
        *o = dice_group(a, b, g)?;
    }
    Ok(out)
}

/// Registers `dst` (fixed) against `src` (moving) and warps `src_labels`
/// onto the `dst` frame. Returns the labels and the field.
pub fn propagate_labels<T: Real>(
    seq: &CineSequence<T>,
    src_frame: usize,
    dst_frame: usize,
    src_labels: &LabelMap,
    cfg: &RegConfig,
) -> Result<(LabelMap, DisplacementField<T>)> {
    let n = seq.len();
    if src_frame >= n || dst_frame >= n {
        return Err(Error::invalid(format!("frame index out of range: {src_frame} -> {dst_frame} with {n} frames")));
    }
    seq.frames[src_frame].grid.ensure_matches(&src_labels.grid, "source labels")?;
    let reg = register(&seq.frames[dst_frame], &seq.frames[src_frame], cfg)?;
    let labels = warp_labels(src_labels, &reg.field)?;
    Ok((labels, reg.field))
}

/// [`propagate_labels`] from a labelled phase frame (ED or ES).
pub fn propagate<T: Real>(
    seq: &CineSequence<T>,
    src_frame: usize,
    dst_frame: usize,
    cfg: &RegConfig,
) -> Result<(LabelMap, DisplacementField<T>)> {
    let labels = if src_frame == seq.ed_index {
        &seq.labels_ed
    } else if src_frame == seq.es_index {
        &seq.labels_es
    } else {
        return Err(Error::invalid(format!("frame {src_frame} has no labels (only ED and ES are labelled)")));
    };
    propagate_labels(seq, src_frame, dst_frame, labels, cfg)
}

/// Local weighted voting: each candidate votes for its label with weight
/// equal to the squared local NCC between its warped intensity frame and
/// the target. Ties go to the smaller label; voxels where every weight is
/// zero fall back to an unweighted vote.
pub fn lwv_fuse<T: Real>(target: &Volume<T>, candidates: &[(Volume<T>, LabelMap)], window: usize) -> Result<LabelMap> {
    if candidates.is_empty() {
        return Err(Error::invalid("local weighted voting needs at least one candidate"));
    }
    for (img, lab) in candidates {
        target.grid.ensure_matches(&img.grid, "voting candidate image")?;
        target.grid.ensure_matches(&lab.grid, "voting candidate labels")?;
    }
    let weights: Vec<Vec<f64>> = candidates
        .iter()
        .map(|(img, _)| {
            lncc_map(target, img, window, SimConfig::default().variance_eps)
                .map(|m| m.data.iter().map(|v| v.to_f64_lossy()).collect())
        })
        .collect::<Result<_>>()?;
    let data = (0..target.grid.len())
        .into_par_iter()
        .map(|p| {
            let mut votes: Vec<(u8, f64, usize)> = Vec::with_capacity(candidates.len());
            for (k, (_, lab)) in candidates.iter().enumerate() {
                let l = lab.data[p];
                let w = weights[k][p];
                match votes.iter_mut().find(|v| v.0 == l) {
                    Some(v) => {
                        v.1 += w;
                        v.2 += 1;
                    }
                    None => votes.push((l, w, 1)),
                }
            }
            let weighted = votes.iter().any(|v| v.1 > 0.0);
            let score = |v: &(u8, f64, usize)| if weighted { v.1 } else { v.2 as f64 };
            votes.sort_by_key(|v| v.0);
            let mut best = votes[0];
            for v in &votes[1..] {
                if score(v) > score(&best) {
                    best = *v;
                }
            }
            best.0
        })
        .collect();
    LabelMap::new(target.grid, data)
}

/// Atlas frames used for a source phase: offsets 0, +1, -1, +2, -2, ...
/// from the source, first `n_adjacent` entries, out-of-range ones skipped.
pub fn atlas_frames(n_frames: usize, source: usize, n_adjacent: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for k in 0..n_adjacent {
        let step = (k + 1) / 2;
        let f = if k == 0 {
            Some(source)
        } else if k % 2 == 1 {
            Some(source + step).filter(|&f| f < n_frames)
        } else {
            source.checked_sub(step)
        };
        if let Some(f) = f {
            out.push(f);
        }
    }
    out
}

/// One atlas of a multi-frame segmentation: the frame, its labels and the
/// warped frame and labels on the target.
#[derive(Clone, Debug)]
pub struct AtlasCandidate<T> {
    pub frame: usize,
    pub warped_frame: Volume<T>,
    pub warped_labels: LabelMap,
}

/// Multi-frame segmentation of `target`: the other phase's labels are
/// propagated to its atlas frames, each atlas is then registered onto the
/// target and the candidates are fused by local weighted voting. An atlas
/// equal to the source skips the first hop.
pub fn multi_frame_segment<T: Real>(
    seq: &CineSequence<T>,
    target: Phase,
    n_adjacent: usize,
    lwv_window: usize,
    cfg: &RegConfig,
) -> Result<(LabelMap, Vec<AtlasCandidate<T>>)> {
    if n_adjacent == 0 {
        return Err(Error::invalid("n_adjacent must be at least 1"));
    }
    let source = match target {
        Phase::ED => Phase::ES,
        Phase::ES => Phase::ED,
    };
    let atlases = atlas_frames(seq.len(), seq.phase_index(source), n_adjacent);
    multi_frame_segment_with(seq, target, &atlases, lwv_window, cfg)
}

/// [`multi_frame_segment`] with an explicit atlas frame list.
pub fn multi_frame_segment_with<T: Real>(
    seq: &CineSequence<T>,
    target: Phase,
    atlases: &[usize],
    lwv_window: usize,
    cfg: &RegConfig,
) -> Result<(LabelMap, Vec<AtlasCandidate<T>>)> {
    seq.validate()?;
    let (src, src_labels) = match target {
        Phase::ED => (seq.es_index, &seq.labels_es),
        Phase::ES => (seq.ed_index, &seq.labels_ed),
    };
    let tgt = seq.phase_index(target);
    let usable: Vec<usize> = atlases.iter().copied().filter(|&f| f < seq.len()).collect();
    if usable.is_empty() {
        return Err(Error::invalid("no atlas frame within the sequence"));
    }
    let mut candidates = Vec::with_capacity(usable.len());
    for &a in &usable {
        // atlas -> target registration; for a chained atlas the source labels
        // are resampled once through the composed field
        let to_target = register(&seq.frames[tgt], &seq.frames[a], cfg)?.field;
        let label_field = if a == src {
            to_target.clone()
        } else {
            let to_atlas = register(&seq.frames[a], &seq.frames[src], cfg)?.field;
            compose_fields(&to_target, &to_atlas)?
        };
        let warped_labels = warp_labels(src_labels, &label_field)?;
        let warped_frame = warp_volume(&seq.frames[src], &label_field)?;
        candidates.push(AtlasCandidate { frame: a, warped_frame, warped_labels });
    }
    let pairs: Vec<(Volume<T>, LabelMap)> =
        candidates.iter().map(|c| (c.warped_frame.clone(), c.warped_labels.clone())).collect();
    let fused = lwv_fuse(&seq.frames[tgt], &pairs, lwv_window)?;
    Ok((fused, candidates))
}
