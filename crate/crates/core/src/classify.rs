//! Multinomial logistic regression, k-nearest neighbours, confusion
//! matrices and learning curves.

use crate::error::{Error, Result};
use crate::features::{format_float, FeatureVector};
use crate::selection::{evaluate_accuracy, CvSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

/// The five diagnostic categories, in canonical index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CardiacClass {
    NOR,
    MINF,
    DCM,
    HCM,
    RV,
}

impl CardiacClass {
    pub const ALL: [CardiacClass; 5] = [Self::NOR, Self::MINF, Self::DCM, Self::HCM, Self::RV];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| Error::invalid(format!("class index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NOR => "NOR",
            Self::MINF => "MINF",
            Self::DCM => "DCM",
            Self::HCM => "HCM",
            Self::RV => "RV",
        }
    }
}

impl fmt::Display for CardiacClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CardiacClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown class `{s}`")))
    }
}

/// Feature matrix with class labels and case ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub case_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<CardiacClass>,
}

impl Dataset {
    pub fn new(case_ids: Vec<String>, feature_names: Vec<String>, x: Vec<Vec<f64>>, y: Vec<CardiacClass>) -> Result<Self> {
        if case_ids.len() != x.len() || y.len() != x.len() {
            return Err(Error::invalid(format!(
                "dataset has {} ids, {} rows and {} labels",
                case_ids.len(),
                x.len(),
                y.len()
            )));
        }
        for (i, row) in x.iter().enumerate() {
            if row.len() != feature_names.len() {
                return Err(Error::invalid(format!("row {i} has {} values for {} features", row.len(), feature_names.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {i} has a non-finite value")));
            }
        }
        Ok(Self { case_ids, feature_names, x, y })
    }

    pub fn from_feature_vectors(rows: &[FeatureVector]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::invalid("no cases"))?;
        let names: Vec<String> = first.values.iter().map(|(n, _)| n.clone()).collect();
        let mut x = Vec::with_capacity(rows.len());
        for r in rows {
            if r.values.len() != names.len() || r.values.iter().zip(&names).any(|((a, _), b)| a != b) {
                return Err(Error::Schema(format!("case {} has a different feature layout", r.case_id)));
            }
            x.push(r.values.iter().map(|(_, v)| *v).collect());
        }
        Self::new(rows.iter().map(|r| r.case_id.clone()).collect(), names, x, rows.iter().map(|r| r.class_label).collect())
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Columns `cols`, in the given order.
    pub fn with_features(&self, cols: &[usize]) -> Dataset {
        Dataset {
            case_ids: self.case_ids.clone(),
            feature_names: cols.iter().map(|&c| self.feature_names[c].clone()).collect(),
            x: self.x.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect(),
            y: self.y.clone(),
        }
    }

    /// Columns by name.
    pub fn with_feature_names(&self, names: &[String]) -> Result<Dataset> {
        let cols = names
            .iter()
            .map(|n| self.feature_index(n).ok_or_else(|| Error::invalid(format!("unknown feature `{n}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.with_features(&cols))
    }

    pub fn rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            case_ids: idx.iter().map(|&i| self.case_ids[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> [usize; 5] {
        let mut c = [0; 5];
        for y in &self.y {
            c[y.index()] += 1;
        }
        c
    }
}

/// Per-feature mean and standard deviation; constant features get std 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in x {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n).sqrt();
                // relative guard so features that are constant up to round-off count as constant
                if sd > 1e-12 * m.abs().max(1e-300) && sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Logistic-regression hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogRegHyper {
    pub l2_weight: f64,
    pub max_iters: usize,
    /// Gradient-norm stopping threshold.
    pub tol: f64,
    pub seed: u64,
}

impl Default for LogRegHyper {
    fn default() -> Self {
        Self { l2_weight: 1e-3, max_iters: 2000, tol: 1e-6, seed: 0 }
    }
}

/// Optimizer record of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub iterations: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// Loss after every accepted iteration, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

/// Multinomial logistic regression over all five classes. `weights[k]`
/// holds the feature weights of class k followed by its bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub classes: Vec<CardiacClass>,
    pub feature_names: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub standardization: Standardization,
    pub hyper: LogRegHyper,
    pub diagnostics: TrainDiagnostics,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn argmax_low(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn logits(w: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let d = z.len();
    w.iter().map(|wk| wk[..d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + wk[d]).collect()
}

/// Mean cross-entropy plus ridge penalty, and its gradient.
fn objective(w: &[Vec<f64>], z: &[Vec<f64>], y: &[usize], l2: f64, with_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let k = w.len();
    let d = z.first().map_or(0, Vec::len);
    let n = z.len() as f64;
    let mut loss = 0.0;
    let mut g = if with_grad { vec![vec![0.0; d + 1]; k] } else { Vec::new() };
    for (zi, &yi) in z.iter().zip(y) {
        let l = logits(w, zi);
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - l[yi];
        if with_grad {
            for c in 0..k {
                let r = (l[c] - lse).exp() - if c == yi { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c][j] += r * zi[j];
                }
                g[c][d] += r;
            }
        }
    }
    loss /= n;
    let mut pen = 0.0;
    for wk in w {
        pen += wk[..d].iter().map(|v| v * v).sum::<f64>();
    }
    loss += l2 * pen;
    if with_grad {
        for (gk, wk) in g.iter_mut().zip(w) {
            for j in 0..=d {
                gk[j] /= n;
                if j < d {
                    gk[j] += 2.0 * l2 * wk[j];
                }
            }
        }
    }
    (loss, g)
}

fn norm2(g: &[Vec<f64>]) -> f64 {
    g.iter().flatten().map(|v| v * v).sum()
}

/// Full-batch gradient descent from zero weights with Barzilai-Borwein
/// step proposals and Armijo backtracking.
pub fn train_logreg(train: &Dataset, hyper: &LogRegHyper) -> Result<LogRegModel> {
    let present = train.class_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::invalid("logistic regression needs at least two classes"));
    }
    if !(hyper.l2_weight >= 0.0 && hyper.tol >= 0.0) {
        return Err(Error::invalid("l2_weight and tol must be non-negative"));
    }
    let st = Standardization::fit(&train.x);
    let z: Vec<Vec<f64>> = train.x.iter().map(|r| st.apply(r)).collect();
    let y: Vec<usize> = train.y.iter().map(|c| c.index()).collect();
    let k = CardiacClass::ALL.len();
    let d = train.n_features();
    let mut w = vec![vec![0.0; d + 1]; k];
    let (mut f, mut g) = objective(&w, &z, &y, hyper.l2_weight, true);
    let mut history = vec![f];
    let mut step = 1.0;
    let mut prev: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    let mut iters = 0;
    let mut converged = norm2(&g).sqrt() < hyper.tol;
    while !converged && iters < hyper.max_iters {
        if let Some((pw, pg)) = &prev {
            let (mut ss, mut sy) = (0.0, 0.0);
            for c in 0..k {
                for j in 0..=d {
                    let s = w[c][j] - pw[c][j];
                    let yv = g[c][j] - pg[c][j];
                    ss += s * s;
                    sy += s * yv;
                }
            }
            if sy > 0.0 {
                step = ss / sy;
            }
        }
        let gn2 = norm2(&g);
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<Vec<f64>> =
                w.iter().zip(&g).map(|(wk, gk)| wk.iter().zip(gk).map(|(a, b)| a - step * b).collect()).collect();
            let (fc, _) = objective(&cand, &z, &y, hyper.l2_weight, false);
            if fc <= f - 1e-4 * step * gn2 {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        prev = Some((std::mem::replace(&mut w, cand), g));
        let (_, gnew) = objective(&w, &z, &y, hyper.l2_weight, true);
        f = fc;
        g = gnew;
        history.push(f);
        iters += 1;
        converged = norm2(&g).sqrt() < hyper.tol;
    }
    if !f.is_finite() {
        return Err(Error::Numerical("logistic regression loss is not finite".into()));
    }
    Ok(LogRegModel {
        classes: CardiacClass::ALL.to_vec(),
        feature_names: train.feature_names.clone(),
        weights: w,
        standardization: st,
        hyper: hyper.clone(),
        diagnostics: TrainDiagnostics { iterations: iters, final_loss: f, grad_norm: norm2(&g).sqrt(), converged, loss_history: history },
    })
}

/// Class (ties toward the smaller class index) and softmax probabilities.
pub fn predict(model: &LogRegModel, x: &[f64]) -> Result<(CardiacClass, Vec<f64>)> {
    if x.len() != model.feature_names.len() {
        return Err(Error::invalid(format!("expected {} features, got {}", model.feature_names.len(), x.len())));
    }
    let p = softmax(&logits(&model.weights, &model.standardization.apply(x)));
    Ok((model.classes[argmax_low(&p)], p))
}

/// k-nearest-neighbour vote on standardized features. Distance ties keep
/// case order; vote ties go to the smaller class index.
pub fn knn_classify(train: &Dataset, x: &[f64], k: usize) -> Result<CardiacClass> {
    if train.is_empty() {
        return Err(Error::invalid("k-NN needs training cases"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::invalid(format!("k must be in 1..={}, got {k}", train.len())));
    }
    if x.len() != train.n_features() {
        return Err(Error::invalid(format!("expected {} features, got {}", train.n_features(), x.len())));
    }
    let st = Standardization::fit(&train.x);
    let q = st.apply(x);
    let mut d: Vec<(f64, usize)> = train
        .x
        .iter()
        .enumerate()
        .map(|(i, r)| (st.apply(r).iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = [0.0; 5];
    for &(_, i) in &d[..k] {
        votes[train.y[i].index()] += 1.0;
    }
    CardiacClass::from_index(argmax_low(&votes))
}

/// Classifier choice shared by cross-validation, selection and curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClassifierSpec {
    Logreg(LogRegHyper),
    Knn { k: usize },
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec::Logreg(LogRegHyper::default())
    }
}

impl ClassifierSpec {
    /// Trains on `train` and predicts each row of `test`.
    pub fn fit_predict(&self, train: &Dataset, test: &[Vec<f64>]) -> Result<Vec<CardiacClass>> {
        match self {
            ClassifierSpec::Logreg(h) => {
                let m = train_logreg(train, h)?;
                test.iter().map(|x| predict(&m, x).map(|p| p.0)).collect()
            }
            ClassifierSpec::Knn { k } => test.iter().map(|x| knn_classify(train, x, *k)).collect(),
        }
    }
}

/// Counts with rows = truth and columns = prediction, over `class_set`.
pub fn confusion_matrix(truth: &[CardiacClass], predicted: &[CardiacClass], class_set: &[CardiacClass]) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!("{} truths vs {} predictions", truth.len(), predicted.len())));
    }
    let pos = |c: &CardiacClass| {
        class_set.iter().position(|s| s == c).ok_or_else(|| Error::invalid(format!("class {c} not in the class set")))
    };
    let mut m = vec![vec![0; class_set.len()]; class_set.len()];
    for (t, p) in truth.iter().zip(predicted) {
        m[pos(t)?][pos(p)?] += 1;
    }
    Ok(m)
}

/// Confusion matrix as CSV: header `truth,<classes>`, one row per true class.
pub fn write_confusion_csv<W: Write>(mut w: W, m: &[Vec<usize>], class_set: &[CardiacClass]) -> Result<()> {
    let names: Vec<&str> = class_set.iter().map(|c| c.name()).collect();
    writeln!(w, "truth,{}", names.join(","))?;
    for (c, row) in class_set.iter().zip(m) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        writeln!(w, "{},{}", c, cells.join(","))?;
    }
    Ok(())
}

/// Mean and standard deviation of accuracy at one training-set size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub repeats: usize,
}

/// Per-class counts for a stratified subsample of `size` cases
/// (largest-remainder proportional allocation, at least one per present class).
fn stratified_allocation(counts: &[usize; 5], size: usize) -> Result<[usize; 5]> {
    let n: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count();
    if size < present || size > n {
        return Err(Error::invalid(format!("training size {size} cannot hold one case per class ({present} classes, {n} cases)")));
    }
    let mut alloc = [0usize; 5];
    let mut rema: Vec<(f64, usize)> = Vec::new();
    for c in 0..5 {
        let exact = size as f64 * counts[c] as f64 / n as f64;
        alloc[c] = (exact.floor() as usize).min(counts[c]);
        if counts[c] > 0 && alloc[c] == 0 {
            alloc[c] = 1;
        }
        rema.push((exact - exact.floor(), c));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut total: usize = alloc.iter().sum();
    let mut i = 0;
    while total < size {
        let c = rema[i % 5].1;
        if alloc[c] < counts[c] {
            alloc[c] += 1;
            total += 1;
        }
        i += 1;
    }
    while total > size {
        // only reachable through the one-per-class floor; trim the largest
        let c = (0..5).max_by_key(|&c| (alloc[c], std::cmp::Reverse(c))).unwrap_or(0);
        alloc[c] -= 1;
        total -= 1;
    }
    Ok(alloc)
}

/// Learning curve: for each size, `repeats` seeded stratified subsamples are
/// trained on and scored on the remaining cases. A size equal to the whole
/// dataset has no holdout and reports the cross-validated accuracy (std 0).
pub fn learning_curve(
    dataset: &Dataset,
    sizes: &[usize],
    repeats: usize,
    classifier: &ClassifierSpec,
    cv: &CvSpec,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let counts = dataset.class_counts();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 5];
    for (i, y) in dataset.y.iter().enumerate() {
        by_class[y.index()].push(i);
    }
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let alloc = stratified_allocation(&counts, size)?;
        if size == dataset.len() {
            let all: Vec<usize> = (0..dataset.n_features()).collect();
            let acc = evaluate_accuracy(dataset, &all, classifier, cv, seed)?;
            out.push(CurvePoint { size, mean_acc: acc, std_acc: 0.0, repeats: 1 });
            continue;
        }
        let seeds: Vec<u64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (size as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            (0..repeats).map(|_| rng.random()).collect()
        };
        let accs: Vec<f64> = seeds
            .par_iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut train_idx = Vec::with_capacity(size);
                let mut test_idx = Vec::new();
                for c in 0..5 {
                    let mut idx = by_class[c].clone();
                    idx.shuffle(&mut rng);
                    train_idx.extend_from_slice(&idx[..alloc[c]]);
                    test_idx.extend_from_slice(&idx[alloc[c]..]);
                }
                train_idx.sort_unstable();
                test_idx.sort_unstable();
                let train = dataset.rows(&train_idx);
                let test = dataset.rows(&test_idx);
                let pred = classifier.fit_predict(&train, &test.x)?;
                Ok(pred.iter().zip(&test.y).filter(|(a, b)| a == b).count() as f64 / test.len() as f64)
            })
            .collect::<Result<_>>()?;
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
        out.push(CurvePoint { size, mean_acc: mean, std_acc: std, repeats });
    }
    Ok(out)
}

/// Learning curve as CSV `size,mean_acc,std_acc,repeats`.
pub fn write_curve_csv<W: Write>(mut w: W, points: &[CurvePoint]) -> Result<()> {
    writeln!(w, "size,mean_acc,std_acc,repeats")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.size, format_float(p.mean_acc), format_float(p.std_acc), p.repeats)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy(n_per: usize, classes: &[CardiacClass], sep: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n_per * classes.len() {
            let c = classes[i % classes.len()];
            let k = c.index() as f64;
            x.push(vec![sep * k + rng.random_range(-1.0..1.0), sep * (k % 2.0) + rng.random_range(-1.0..1.0)]);
            y.push(c);
        }
        Dataset::new((0..y.len()).map(|i| format!("c{i}")).collect(), vec!["a".into(), "b".into()], x, y).unwrap()
    }

    #[test]
    fn logreg_separates_two_classes_and_converges() {
        let ds = toy(15, &[CardiacClass::NOR, CardiacClass::DCM], 5.0, 1);
        let m = train_logreg(&ds, &LogRegHyper::default()).unwrap();
        let acc = ds.x.iter().zip(&ds.y).filter(|(x, y)| predict(&m, x).unwrap().0 == **y).count();
        assert_eq!(acc, ds.len());
        assert!(m.diagnostics.converged);
        assert!(m.diagnostics.grad_norm < m.hyper.tol);
        assert!(m.diagnostics.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_iterations_give_uniform_probabilities() {
        let ds = toy(5, &CardiacClass::ALL, 3.0, 2);
        let m = train_logreg(&ds, &LogRegHyper { max_iters: 0, ..LogRegHyper::default() }).unwrap();
        let (c, p) = predict(&m, &[1.0, -3.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_eq!(c, CardiacClass::NOR);
        assert!(predict(&m, &[1.0]).is_err());
        let single = toy(5, &[CardiacClass::HCM], 1.0, 0);
        assert!(train_logreg(&single, &LogRegHyper::default()).is_err());
    }

    #[test]
    fn probabilities_normalise_and_are_shift_invariant() {
        let ds = toy(8, &CardiacClass::ALL, 2.0, 3);
        let mut m = train_logreg(&ds, &LogRegHyper::default()).unwrap();
        let q = [0.3, 7.0];
        let (_, p) = predict(&m, &q).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let d = m.feature_names.len();
        m.weights.iter_mut().for_each(|w| w[d] += 17.5);
        let (_, p2) = predict(&m, &q).unwrap();
        for (a, b) in p.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_invariant_to_affine_feature_rescaling() {
        let ds = toy(8, &CardiacClass::ALL, 2.0, 4);
        let mut scaled = ds.clone();
        scaled.x.iter_mut().for_each(|r| r[0] = 3.0 * r[0] - 11.0);
        let m1 = train_logreg(&ds, &LogRegHyper::default()).unwrap();
        let m2 = train_logreg(&scaled, &LogRegHyper::default()).unwrap();
        for (a, b) in ds.x.iter().zip(&scaled.x) {
            let (c1, p1) = predict(&m1, a).unwrap();
            let (c2, p2) = predict(&m2, b).unwrap();
            assert_eq!(c1, c2);
            for (u, v) in p1.iter().zip(&p2) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn knn_examples() {
        let ds = toy(6, &CardiacClass::ALL, 4.0, 5);
        for (x, y) in ds.x.iter().zip(&ds.y) {
            assert_eq!(knn_classify(&ds, x, 1).unwrap(), *y);
        }
        // k = n: global majority, ties toward the smaller class index
        assert_eq!(knn_classify(&ds, &[100.0, 100.0], ds.len()).unwrap(), CardiacClass::NOR);
        let two = toy(10, &[CardiacClass::MINF, CardiacClass::RV], 10.0, 6);
        let a = two.x[0].clone();
        assert_eq!(knn_classify(&two, &[a[0] + 0.1, a[1]], 3).unwrap(), two.y[0]);
        assert!(knn_classify(&two, &a, 0).is_err());
        assert!(knn_classify(&two, &a, 21).is_err());
    }

    #[test]
    fn confusion_matrix_examples() {
        let t = vec![CardiacClass::NOR, CardiacClass::NOR, CardiacClass::HCM, CardiacClass::RV];
        let m = confusion_matrix(&t, &t, &CardiacClass::ALL).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { t.iter().filter(|c| c.index() == i).count() } else { 0 };
                assert_eq!(m[i][j], expect);
            }
        }
        let all_one = vec![CardiacClass::MINF; 4];
        let m2 = confusion_matrix(&t, &all_one, &CardiacClass::ALL).unwrap();
        for row in &m2 {
            assert_eq!(row.iter().enumerate().filter(|(j, v)| **v > 0 && *j != 1).count(), 0);
        }
        assert_eq!(m2.iter().map(|r| r.iter().sum::<usize>()).collect::<Vec<_>>(), vec![2, 0, 0, 1, 1]);
        assert!(confusion_matrix(&t, &all_one, &[CardiacClass::NOR]).is_err());
        let mut buf = Vec::new();
        write_confusion_csv(&mut buf, &m2, &CardiacClass::ALL).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("truth,NOR,MINF,DCM,HCM,RV\nNOR,0,2,0,0,0\n"));
    }

    #[test]
    fn model_json_round_trip() {
        let ds = toy(5, &CardiacClass::ALL, 3.0, 7);
        let m = train_logreg(&ds, &LogRegHyper::default()).unwrap();
        let back: LogRegModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let spec: ClassifierSpec = serde_json::from_str(r#"{"kind":"knn","k":3}"#).unwrap();
        assert_eq!(spec, ClassifierSpec::Knn { k: 3 });
        assert!(serde_json::from_str::<LogRegHyper>(r#"{"l2":1}"#).is_err());
    }

    #[test]
    fn stratified_allocation_is_proportional() {
        assert_eq!(stratified_allocation(&[10; 5], 20).unwrap(), [4; 5]);
        assert_eq!(stratified_allocation(&[10; 5], 5).unwrap(), [1; 5]);
        assert!(stratified_allocation(&[10; 5], 4).is_err());
        assert_eq!(stratified_allocation(&[20, 10, 10, 10, 0], 10).unwrap().iter().sum::<usize>(), 10);
    }

    #[test]
    fn learning_curve_full_size_has_zero_std() {
        let ds = toy(6, &CardiacClass::ALL, 3.0, 8);
        let spec = ClassifierSpec::Knn { k: 1 };
        let pts = learning_curve(&ds, &[10, 20, 30], 8, &spec, &CvSpec::default(), 4).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[2].std_acc, 0.0);
        assert!(pts.iter().all(|p| (0.0..=1.0).contains(&p.mean_acc)));
        assert_eq!(pts, learning_curve(&ds, &[10, 20, 30], 8, &spec, &CvSpec::default(), 4).unwrap());
        assert!(learning_curve(&ds, &[3], 2, &spec, &CvSpec::default(), 0).is_err());
    }
}
