//! TF-IDF n-gram features with a multinomial logistic classifier trained by
//! plain SGD.
//!
//! Features: `tf = count / document length`, `idf = ln((1 + D) / (1 + df)) + 1`,
//! and each document vector is L2-normalized. N-grams are taken over token
//! ids, so the same code serves DNA and word datasets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::data::{DatasetSplit, LabeledDataset};
use crate::error::{Result, XmarError};

pub const MAX_N: usize = 3;
pub const SGD_LR: f64 = 0.01;
pub const SGD_EPOCHS: usize = 50;
pub const DEFAULT_HOLDOUT: f64 = 0.1;

type Sparse = Vec<(usize, f64)>;

/// Counts of every n-gram of length `1..=n_max`.
pub fn ngram_counts(tokens: &[usize], n_max: usize) -> BTreeMap<Vec<usize>, usize> {
    let mut counts = BTreeMap::new();
    for n in 1..=n_max {
        for gram in tokens.windows(n) {
            *counts.entry(gram.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// L2-normalized TF-IDF vector from raw counts.
pub fn tfidf_vector(counts: &[(usize, f64)], doc_len: f64, idf: &[f64]) -> Sparse {
    let mut out: Sparse = counts
        .iter()
        .filter(|&&(_, c)| c > 0.0)
        .map(|&(col, c)| (col, c / doc_len * idf[col]))
        .collect();
    let norm = out.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, v) in &mut out {
            *v /= norm;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TfidfModel {
    n_max: usize,
    columns: BTreeMap<Vec<usize>, usize>,
    idf: Vec<f64>,
    /// Row-major `[features, labels]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    num_labels: usize,
}

impl TfidfModel {
    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn num_features(&self) -> usize {
        self.idf.len()
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn column(&self, gram: &[usize]) -> Option<usize> {
        self.columns.get(gram).copied()
    }

    /// Feature vector of a document; n-grams unseen in training are dropped.
    pub fn features(&self, tokens: &[usize]) -> Sparse {
        let counts: Vec<(usize, f64)> = ngram_counts(tokens, self.n_max)
            .into_iter()
            .filter_map(|(gram, c)| self.columns.get(&gram).map(|&col| (col, c as f64)))
            .collect();
        tfidf_vector(&counts, tokens.len().max(1) as f64, &self.idf)
    }

    fn scores(&self, x: &[(usize, f64)]) -> Vec<f64> {
        let l = self.num_labels;
        let mut s = self.bias.clone();
        for &(col, v) in x {
            for (k, sk) in s.iter_mut().enumerate() {
                *sk += self.weights[col * l + k] * v;
            }
        }
        s
    }

    /// Most probable label; ties go to the lower index.
    pub fn predict(&self, tokens: &[usize]) -> usize {
        let s = self.scores(&self.features(tokens));
        (0..s.len()).fold(0, |best, k| if s[k] > s[best] { k } else { best })
    }

    pub fn accuracy(&self, dataset: &LabeledDataset) -> f64 {
        let correct = dataset.examples.iter().filter(|e| self.predict(&e.tokens) == e.label).count();
        correct as f64 / dataset.len() as f64
    }
}

/// Fits n-grams up to length `n`, then runs `SGD_EPOCHS` of per-example
/// logistic SGD with the epoch order shuffled by `(seed, epoch)`.
pub fn fit_tfidf(train: &LabeledDataset, n: usize, seed: u64) -> Result<TfidfModel> {
    if !(1..=MAX_N).contains(&n) {
        return Err(XmarError::invalid(format!("n must be in 1..={MAX_N}, got {n}")));
    }
    if train.is_empty() {
        return Err(XmarError::invalid("cannot fit TF-IDF on an empty train set"));
    }
    let docs: Vec<BTreeMap<Vec<usize>, usize>> = train.examples.iter().map(|e| ngram_counts(&e.tokens, n)).collect();
    let mut df: BTreeMap<&[usize], usize> = BTreeMap::new();
    for doc in &docs {
        for gram in doc.keys() {
            *df.entry(gram.as_slice()).or_insert(0) += 1;
        }
    }
    let d = docs.len() as f64;
    let columns: BTreeMap<Vec<usize>, usize> = df.keys().enumerate().map(|(i, g)| (g.to_vec(), i)).collect();
    let idf: Vec<f64> = df.values().map(|&f| ((1.0 + d) / (1.0 + f as f64)).ln() + 1.0).collect();
    let num_labels = train.num_labels();
    let mut model = TfidfModel {
        n_max: n,
        weights: vec![0.0; idf.len() * num_labels],
        bias: vec![0.0; num_labels],
        columns,
        idf,
        num_labels,
    };
    let xs: Vec<Sparse> = train.examples.iter().map(|e| model.features(&e.tokens)).collect();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..SGD_EPOCHS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for &i in &order {
            let s = model.scores(&xs[i]);
            let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = s.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = exp.iter().sum();
            let label = train.examples[i].label;
            for k in 0..num_labels {
                let g = exp[k] / z - if k == label { 1.0 } else { 0.0 };
                model.bias[k] -= SGD_LR * g;
                for &(col, v) in &xs[i] {
                    model.weights[col * num_labels + k] -= SGD_LR * g * v;
                }
            }
        }
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub n: usize,
    /// Hold-out accuracy for n = 1, 2, 3.
    pub holdout_accuracy: Vec<f64>,
    /// Refit on the whole train set with the chosen n.
    pub model: TfidfModel,
}

/// Picks n by hold-out accuracy (ties to the smaller n) and refits.
pub fn select_n(train: &LabeledDataset, holdout_fraction: f64, seed: u64) -> Result<Selection> {
    if !(holdout_fraction > 0.0 && holdout_fraction <= 0.5) {
        return Err(XmarError::invalid(format!("holdout fraction must lie in (0, 0.5], got {holdout_fraction}")));
    }
    if train.len() < 2 {
        return Err(XmarError::invalid("select_n needs at least two examples"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = ((train.len() as f64 * holdout_fraction).round() as usize).clamp(1, train.len() - 1);
    let holdout = train.subset(&order[..held])?;
    let fit_part = train.subset(&order[held..])?;
    let mut holdout_accuracy = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        holdout_accuracy.push(fit_tfidf(&fit_part, n, seed)?.accuracy(&holdout));
    }
    let n = (1..=MAX_N).fold(1, |best, n| if holdout_accuracy[n - 1] > holdout_accuracy[best - 1] { n } else { best });
    Ok(Selection { n, holdout_accuracy, model: fit_tfidf(train, n, seed)? })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineReport {
    pub unigram_accuracy: f64,
    pub selected_n: usize,
    pub ngram_accuracy: f64,
    pub holdout_accuracy: Vec<f64>,
    pub majority_rate: f64,
}

impl BaselineReport {
    pub fn to_json(&self) -> Value {
        json!({
            "tag": "baseline",
            "baseline": "tfidf",
            "unigram_acc": self.unigram_accuracy,
            "selected_n": self.selected_n,
            "ngram_acc": self.ngram_accuracy,
            "holdout_acc": self.holdout_accuracy,
            "majority_rate": self.majority_rate,
        })
    }
}

/// Unigram and selected-n test accuracies.
pub fn run_baselines(split: &DatasetSplit, holdout_fraction: f64, seed: u64) -> Result<BaselineReport> {
    let unigram = fit_tfidf(&split.train, 1, seed)?;
    let selection = select_n(&split.train, holdout_fraction, seed)?;
    Ok(BaselineReport {
        unigram_accuracy: unigram.accuracy(&split.test),
        selected_n: selection.n,
        ngram_accuracy: selection.model.accuracy(&split.test),
        holdout_accuracy: selection.holdout_accuracy,
        majority_rate: split.test.majority_rate(),
    })
}
