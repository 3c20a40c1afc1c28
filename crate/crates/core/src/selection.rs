//! Greedy forward-backward wrapper feature selection scored by stratified
//! k-fold cross-validated accuracy.

use crate::classify::{CardiacClass, ClassifierSpec, Dataset};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Cross-validation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSpec {
    pub folds: usize,
}

impl Default for CvSpec {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

/// Fold index per case. Each class is shuffled with the seed and dealt
/// round-robin, continuing the rotation across classes so folds stay
/// balanced in size.
pub fn stratified_folds(y: &[CardiacClass], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; y.len()];
    let mut offset = 0;
    for c in CardiacClass::ALL {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < folds {
            return Err(Error::invalid(format!("class {c} has {} cases, fewer than {folds} folds", idx.len())));
        }
        idx.shuffle(&mut rng);
        for (p, &i) in idx.iter().enumerate() {
            out[i] = (offset + p) % folds;
        }
        offset += idx.len();
    }
    Ok(out)
}

/// Out-of-fold prediction for every case.
pub fn cross_val_predict(dataset: &Dataset, classifier: &ClassifierSpec, cv: &CvSpec, seed: u64) -> Result<Vec<CardiacClass>> {
    let fold_of = stratified_folds(&dataset.y, cv.folds, seed)?;
    let per_fold: Vec<(Vec<usize>, Vec<CardiacClass>)> = (0..cv.folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..dataset.len()).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..dataset.len()).filter(|&i| fold_of[i] == f).collect();
            let test_x: Vec<Vec<f64>> = test.iter().map(|&i| dataset.x[i].clone()).collect();
            let pred = classifier.fit_predict(&dataset.rows(&train), &test_x)?;
            Ok((test, pred))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![CardiacClass::NOR; dataset.len()];
    for (idx, pred) in per_fold {
        for (i, p) in idx.into_iter().zip(pred) {
            out[i] = p;
        }
    }
    Ok(out)
}

/// Cross-validated accuracy of the feature columns `subset`. Training-fold
/// standardization happens inside the classifiers. An empty subset scores 0.
pub fn evaluate_accuracy(dataset: &Dataset, subset: &[usize], classifier: &ClassifierSpec, cv: &CvSpec, seed: u64) -> Result<f64> {
    if subset.is_empty() {
        return Ok(0.0);
    }
    if let Some(&bad) = subset.iter().find(|&&c| c >= dataset.n_features()) {
        return Err(Error::invalid(format!("feature column {bad} out of range")));
    }
    let ds = dataset.with_features(subset);
    let pred = cross_val_predict(&ds, classifier, cv, seed)?;
    Ok(pred.iter().zip(&ds.y).filter(|(a, b)| a == b).count() as f64 / ds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionAction {
    /// Forward phase: removal confirmed.
    Removed,
    /// Forward phase: removal rejected, feature stays.
    Kept,
    /// Backward phase: feature re-added.
    Readded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub feature: String,
    pub action: SelectionAction,
    /// Accuracy of the tentative subset.
    pub accuracy: f64,
    /// Best accuracy after the decision.
    pub acc_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: Vec<String>,
    pub discarded: Vec<String>,
    pub acc_max: f64,
    /// Accuracy of the full feature set, the starting value of `acc_max`.
    pub initial_accuracy: f64,
    pub trace: Vec<TraceEntry>,
}

/// Greedy selection. Forward phase: in column order, tentatively remove
/// each feature and confirm when accuracy >= acc_max (never emptying the
/// set); sweeps repeat while acc_max strictly improved. Backward phase: in
/// column order, tentatively re-add each discarded feature and confirm only
/// on strict improvement; sweeps repeat likewise. acc_max starts at the
/// full-set accuracy.
pub fn select_features(dataset: &Dataset, classifier: &ClassifierSpec, cv: &CvSpec, seed: u64) -> Result<SelectionResult> {
    let d = dataset.n_features();
    if d < 2 {
        return Err(Error::invalid("feature selection needs at least two features"));
    }
    let eval = |mask: &[bool]| -> Result<f64> {
        let cols: Vec<usize> = (0..d).filter(|&j| mask[j]).collect();
        evaluate_accuracy(dataset, &cols, classifier, cv, seed)
    };
    let mut in_f = vec![true; d];
    let initial = eval(&in_f)?;
    let mut acc_max = initial;
    let mut trace = Vec::new();
    let mut step = 0;

    loop {
        let start = acc_max;
        for j in 0..d {
            if !in_f[j] {
                continue;
            }
            step += 1;
            let name = dataset.feature_names[j].clone();
            if in_f.iter().filter(|&&b| b).count() == 1 {
                trace.push(TraceEntry { step, feature: name, action: SelectionAction::Kept, accuracy: 0.0, acc_max });
                continue;
            }
            in_f[j] = false;
            let acc = eval(&in_f)?;
            if acc >= acc_max {
                acc_max = acc;
                trace.push(TraceEntry { step, feature: name, action: SelectionAction::Removed, accuracy: acc, acc_max });
            } else {
                in_f[j] = true;
                trace.push(TraceEntry { step, feature: name, action: SelectionAction::Kept, accuracy: acc, acc_max });
            }
            log::debug!("forward step {step}: acc {acc:.4} acc_max {acc_max:.4}");
        }
        if acc_max <= start {
            break;
        }
    }

    loop {
        let start = acc_max;
        for j in 0..d {
            if in_f[j] {
                continue;
            }
            step += 1;
            in_f[j] = true;
            let acc = eval(&in_f)?;
            if acc > acc_max {
                acc_max = acc;
                trace.push(TraceEntry {
                    step,
                    feature: dataset.feature_names[j].clone(),
                    action: SelectionAction::Readded,
                    accuracy: acc,
                    acc_max,
                });
            } else {
                in_f[j] = false;
            }
        }
        if acc_max <= start {
            break;
        }
    }

    let pick = |want: bool| (0..d).filter(|&j| in_f[j] == want).map(|j| dataset.feature_names[j].clone()).collect();
    Ok(SelectionResult { selected: pick(true), discarded: pick(false), acc_max, initial_accuracy: initial, trace })
}
