//! Weight-sensitivity defense: can a shallow classifier tell trojan models
//! from clean ones by looking only at their final-layer weights?
//!
//! Each model is reduced to a 50-bin histogram of its final fully-connected
//! layer's weight magnitudes. A from-scratch logistic regression is trained
//! on labeled histograms, scored by ROC AUC (rank formula, ties at half),
//! cross-validated with stratified folds, and additionally tested on a
//! disjoint-trigger split: no trigger word seen at training time appears in
//! the test set, so the classifier must generalize across backdoors, not
//! memorize them.

use crate::io::{self, IoError};
use crate::vqa::{self, VqaError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("{what}")]
    Invalid { what: String },
    #[error("model file: {0}")]
    Vqa(#[from] VqaError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Histogram resolution.
pub const N_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelLabel {
    Clean,
    Trojan,
}

impl ModelLabel {
    pub fn name(self) -> &'static str {
        match self {
            ModelLabel::Clean => "clean",
            ModelLabel::Trojan => "trojan",
        }
    }
}

/// One model's defense-side fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFeature {
    /// Normalized magnitude histogram; sums to 1.
    pub bins: [f64; N_BINS],
    pub label: ModelLabel,
    pub config_hash: [u8; 32],
    /// True when the final layer was all zeros and the histogram collapsed
    /// to a single bin by convention.
    pub degenerate: bool,
}

/// Bins `|w|` into 50 equal-width bins over `[0, max|w|]`, counts normalized
/// to sum 1. The maximum itself lands in the last bin. An all-zero layer has
/// no scale to bin against; by convention all mass goes to bin 0 and the
/// result is flagged degenerate.
pub fn weight_histogram(weights: &[f64]) -> ([f64; N_BINS], bool) {
    let mut bins = [0.0; N_BINS];
    let max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max == 0.0 || weights.is_empty() {
        bins[0] = 1.0;
        return (bins, true);
    }
    let n = weights.len() as f64;
    for w in weights {
        let idx = ((w.abs() / max * N_BINS as f64) as usize).min(N_BINS - 1);
        bins[idx] += 1.0 / n;
    }
    (bins, false)
}

/// Reads a stored answering model and fingerprints it. The label comes from
/// the file's provenance: models carrying a backdoor-spec hash are trojan.
pub fn extract_weight_histogram(path: &Path) -> Result<WeightFeature, DefenseError> {
    let stored = vqa::read_model_file(path, None)?;
    let (bins, degenerate) = weight_histogram(stored.model.final_fc_weights());
    Ok(WeightFeature {
        bins,
        label: if stored.spec_hash.is_some() { ModelLabel::Trojan } else { ModelLabel::Clean },
        config_hash: stored.config_hash,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ShallowClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub penalty: f64,
    pub iterations: usize,
}

impl ShallowClassifier {
    /// P(trojan) for one feature vector.
    pub fn score(&self, x: &[f64]) -> f64 {
        let z: f64 =
            self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias;
        crate::numerics::stable_sigmoid(z)
    }
}

/// Regularized loss the trainer minimizes: mean cross-entropy plus
/// `0.5 * penalty * ||w||^2` (bias unpenalized).
pub fn logistic_loss(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[bool], penalty: f64) -> f64 {
    let n = xs.len() as f64;
    let mut ce = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
        // log(1 + e^z) - y*z, computed stably.
        let log1pez = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        ce += log1pez - if y { z } else { 0.0 };
    }
    ce / n + 0.5 * penalty * w.iter().map(|wi| wi * wi).sum::<f64>()
}

/// Full-batch gradient descent from zero init until the loss change drops
/// below 1e-8 or 5000 iterations. Deterministic.
pub fn train_classifier(
    xs: &[Vec<f64>],
    ys: &[bool],
    penalty: f64,
) -> Result<ShallowClassifier, DefenseError> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(DefenseError::Invalid {
            what: format!("{} features vs {} labels", xs.len(), ys.len()),
        });
    }
    let d = xs[0].len();
    if xs.iter().any(|x| x.len() != d) {
        return Err(DefenseError::Invalid { what: "ragged feature vectors".into() });
    }
    let n_pos = ys.iter().filter(|&&y| y).count();
    let n_neg = ys.len() - n_pos;
    if n_pos < 2 || n_neg < 2 {
        return Err(DefenseError::Invalid {
            what: format!("need at least 2 examples per class, got {n_pos} trojan / {n_neg} clean"),
        });
    }
    if !(penalty.is_finite() && penalty >= 0.0) {
        return Err(DefenseError::Invalid { what: format!("bad penalty {penalty}") });
    }

    let n = xs.len() as f64;
    let lr = 0.5;
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut prev = logistic_loss(&w, b, xs, ys, penalty);
    let mut iterations = 0;
    for _ in 0..5000 {
        let mut gw = vec![0.0f64; d];
        let mut gb = 0.0f64;
        for (x, &y) in xs.iter().zip(ys) {
            let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let p = crate::numerics::stable_sigmoid(z);
            let err = p - f64::from(y);
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * (g / n + penalty * *wi);
        }
        b -= lr * gb / n;
        iterations += 1;
        let loss = logistic_loss(&w, b, xs, ys, penalty);
        if (prev - loss).abs() < 1e-8 {
            prev = loss;
            break;
        }
        prev = loss;
    }
    let _ = prev;
    Ok(ShallowClassifier { weights: w, bias: b, penalty, iterations })
}

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

/// Probability that a random positive outscores a random negative, ties
/// counted half — computed by the rank-sum formula.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, DefenseError> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(DefenseError::Invalid {
            what: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(DefenseError::Invalid { what: "non-finite score".into() });
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DefenseError::Invalid {
            what: format!("AUC needs both classes, got {n_pos} positive / {n_neg} negative"),
        });
    }
    // Average ranks (1-based) over tie runs.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CvAucReport {
    pub mean: f64,
    pub two_sigma: f64,
    pub per_fold: Vec<f64>,
}

/// Stratified k-fold cross-validated AUC: per-class shuffled round-robin
/// fold assignment, one classifier per held-out fold, mean and 2x sample
/// standard deviation of the fold AUCs.
pub fn cross_val_auc(
    xs: &[Vec<f64>],
    ys: &[bool],
    k: usize,
    seed: u64,
    penalty: f64,
) -> Result<CvAucReport, DefenseError> {
    if k < 2 {
        return Err(DefenseError::Invalid { what: format!("k = {k} folds is not a split") });
    }
    if xs.len() != ys.len() {
        return Err(DefenseError::Invalid {
            what: format!("{} features vs {} labels", xs.len(), ys.len()),
        });
    }
    let mut pos: Vec<usize> = (0..ys.len()).filter(|&i| ys[i]).collect();
    let mut neg: Vec<usize> = (0..ys.len()).filter(|&i| !ys[i]).collect();
    // Every fold must keep both classes, and the k-1 training folds of any
    // split need 2 per class for the trainer.
    if pos.len() < k.max(3) || neg.len() < k.max(3) {
        return Err(DefenseError::Invalid {
            what: format!(
                "stratified {k}-fold needs at least {} per class, got {} trojan / {} clean",
                k.max(3),
                pos.len(),
                neg.len()
            ),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(io::derive_seed(seed, "cv-folds"));
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &idx) in pos.iter().enumerate() {
        folds[i % k].push(idx);
    }
    for (i, &idx) in neg.iter().enumerate() {
        folds[i % k].push(idx);
    }

    let mut per_fold = Vec::with_capacity(k);
    for held in 0..k {
        let mut train_x = Vec::new();
        let mut train_y = Vec::new();
        for (f, fold) in folds.iter().enumerate() {
            if f != held {
                for &i in fold {
                    train_x.push(xs[i].clone());
                    train_y.push(ys[i]);
                }
            }
        }
        // Train/held index sets are disjoint by construction; make it a
        // checked invariant rather than a comment.
        debug_assert!(folds[held].iter().all(|i| !train_x.iter().any(|x| std::ptr::eq(x, &xs[*i]))));
        let clf = train_classifier(&train_x, &train_y, penalty)?;
        let scores: Vec<f64> = folds[held].iter().map(|&i| clf.score(&xs[i])).collect();
        let labels: Vec<bool> = folds[held].iter().map(|&i| ys[i]).collect();
        per_fold.push(auc(&scores, &labels)?);
    }
    let mean = per_fold.iter().sum::<f64>() / k as f64;
    let var =
        per_fold.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (k - 1) as f64;
    Ok(CvAucReport { mean, two_sigma: 2.0 * var.sqrt(), per_fold })
}

// ---------------------------------------------------------------------------
// Disjoint-trigger split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DisjointSplitReport {
    pub auc: f64,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// (score, is_trojan) per test model, aligned with `test_idx`.
    pub score_log: Vec<(f64, bool)>,
    pub train_triggers: Vec<String>,
    pub test_triggers: Vec<String>,
}

/// Splits models so that every trigger word lands entirely on one side
/// (clean models alternate), trains on one side, and reports AUC on the
/// other. A classifier that only memorized specific triggers' fingerprints
/// scores at chance here.
pub fn disjoint_trigger_split_auc(
    feats: &[WeightFeature],
    triggers: &[Option<String>],
    penalty: f64,
) -> Result<DisjointSplitReport, DefenseError> {
    if feats.len() != triggers.len() {
        return Err(DefenseError::Invalid {
            what: format!("{} features vs {} trigger tags", feats.len(), triggers.len()),
        });
    }
    for (f, t) in feats.iter().zip(triggers) {
        let is_trojan = f.label == ModelLabel::Trojan;
        if is_trojan != t.is_some() {
            return Err(DefenseError::Invalid {
                what: "trigger metadata must be present exactly on trojan models".into(),
            });
        }
    }
    let mut distinct: Vec<&String> = triggers.iter().flatten().collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(DefenseError::Invalid {
            what: format!("disjoint split needs at least 2 distinct triggers, got {}", distinct.len()),
        });
    }
    let side_of_trigger = |t: &String| -> bool {
        // Even position in the sorted distinct list trains, odd tests.
        distinct.iter().position(|d| *d == t).expect("trigger in list") % 2 == 0
    };
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut clean_seen = 0usize;
    for (i, t) in triggers.iter().enumerate() {
        let train_side = match t {
            Some(word) => side_of_trigger(word),
            None => {
                clean_seen += 1;
                clean_seen % 2 == 1
            }
        };
        if train_side {
            train_idx.push(i);
        } else {
            test_idx.push(i);
        }
    }
    let train_x: Vec<Vec<f64>> = train_idx.iter().map(|&i| feats[i].bins.to_vec()).collect();
    let train_y: Vec<bool> =
        train_idx.iter().map(|&i| feats[i].label == ModelLabel::Trojan).collect();
    let clf = train_classifier(&train_x, &train_y, penalty)?;
    let score_log: Vec<(f64, bool)> = test_idx
        .iter()
        .map(|&i| (clf.score(&feats[i].bins), feats[i].label == ModelLabel::Trojan))
        .collect();
    let scores: Vec<f64> = score_log.iter().map(|(s, _)| *s).collect();
    let labels: Vec<bool> = score_log.iter().map(|(_, y)| *y).collect();
    let split_auc = auc(&scores, &labels)?;
    let side_triggers = |idx: &[usize]| -> Vec<String> {
        let mut v: Vec<String> =
            idx.iter().filter_map(|&i| triggers[i].clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    Ok(DisjointSplitReport {
        auc: split_auc,
        train_triggers: side_triggers(&train_idx),
        test_triggers: side_triggers(&test_idx),
        train_idx,
        test_idx,
        score_log,
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub fn feature_csv_header() -> String {
    let bins: Vec<String> = (0..N_BINS).map(|i| format!("bin_{i:02}")).collect();
    format!("config_hash,label,{}", bins.join(","))
}

pub fn feature_csv_row(f: &WeightFeature) -> String {
    let mut cols = vec![io::hex32(&f.config_hash), f.label.name().to_string()];
    cols.extend(f.bins.iter().map(|b| io::fmt_f64(*b)));
    cols.join(",")
}

pub fn auc_csv_header() -> String {
    "partition,k,mean_auc,two_sigma,n_clean,n_trojan".to_string()
}

pub fn auc_csv_row(
    partition: &str,
    k: usize,
    mean: f64,
    two_sigma: Option<f64>,
    n_clean: usize,
    n_trojan: usize,
) -> String {
    [
        partition.to_string(),
        k.to_string(),
        io::fmt_f64(mean),
        two_sigma.map(io::fmt_f64).unwrap_or_else(|| "undefined".into()),
        n_clean.to_string(),
        n_trojan.to_string(),
    ]
    .join(",")
}
