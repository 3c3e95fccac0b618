//! Zero-shot classification against class text embeddings.

use std::cmp::Ordering;

use crate::datagen::TripletSet;
use crate::error::{Result, TammError};
use crate::numkit::{dot, Matrix};
use crate::train::DualFeatures;

/// Which adapted point feature(s) score the classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InferenceMode {
    #[default]
    Both,
    IaaOnly,
    TaaOnly,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [InferenceMode::Both, InferenceMode::IaaOnly, InferenceMode::TaaOnly];

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Both => "both",
            InferenceMode::IaaOnly => "iaa",
            InferenceMode::TaaOnly => "taa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(InferenceMode::Both),
            "iaa" | "iaa_only" => Ok(InferenceMode::IaaOnly),
            "taa" | "taa_only" => Ok(InferenceMode::TaaOnly),
            _ => Err(TammError::config(format!("unknown mode {s:?} (expected both, iaa or taa)"))),
        }
    }
}

/// One unit text embedding per class, ids strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryBank {
    embeddings: Matrix,
    ids: Vec<u32>,
}

impl CategoryBank {
    pub fn new(embeddings: Matrix, ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(TammError::config("category bank is empty"));
        }
        if embeddings.rows() != ids.len() {
            return Err(TammError::shape(format!(
                "{} embeddings for {} class ids",
                embeddings.rows(),
                ids.len()
            )));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TammError::config("class ids must be unique and increasing"));
        }
        Ok(CategoryBank { embeddings, ids })
    }

    /// Bank over the given classes of a dataset.
    pub fn from_dataset(set: &TripletSet, classes: &[u32]) -> Result<Self> {
        let mut ids = classes.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if let Some(&bad) = ids.iter().find(|&&c| c as usize >= set.class_bank.rows()) {
            return Err(TammError::config(format!("class {bad} not in the dataset's bank")));
        }
        let rows: Vec<usize> = ids.iter().map(|&c| c as usize).collect();
        CategoryBank::new(set.class_bank.select_rows(&rows), ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Per-class similarity of one feature.
    pub fn similarities(&self, f: &[f64]) -> Vec<f64> {
        self.embeddings.iter_rows().map(|t| dot(f, t)).collect()
    }
}

/// Per-class scores of one sample under `mode`.
pub fn zeroshot_scores(vision: &[f64], semantic: &[f64], bank: &CategoryBank, mode: InferenceMode) -> Vec<f64> {
    match mode {
        InferenceMode::IaaOnly => bank.similarities(vision),
        InferenceMode::TaaOnly => bank.similarities(semantic),
        InferenceMode::Both => bank
            .similarities(vision)
            .into_iter()
            .zip(bank.similarities(semantic))
            .map(|(a, b)| a + b)
            .collect(),
    }
}

/// Position of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted class id and the score vector.
pub fn zeroshot_classify(
    vision: &[f64],
    semantic: &[f64],
    bank: &CategoryBank,
    mode: InferenceMode,
) -> (u32, Vec<f64>) {
    let scores = zeroshot_scores(vision, semantic, bank, mode);
    (bank.ids[argmax(&scores)], scores)
}

/// Rank (0 = best) of position `target` under descending score order with
/// ties broken by lower index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| match s.total_cmp(&t) {
            Ordering::Greater => true,
            Ordering::Equal => i < target,
            Ordering::Less => false,
        })
        .count()
}

/// Top-k accuracy for every k in `ks`, in the order given.
pub fn zeroshot_topk(
    feats: &DualFeatures,
    labels: &[u32],
    bank: &CategoryBank,
    mode: InferenceMode,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if feats.len() != labels.len() {
        return Err(TammError::shape(format!(
            "{} feature rows for {} labels",
            feats.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(TammError::config("zero-shot evaluation needs at least one sample"));
    }
    for &k in ks {
        if k == 0 || k > bank.len() {
            return Err(TammError::config(format!(
                "top-{k} requested but the bank has {} classes",
                bank.len()
            )));
        }
    }
    let mut hits = vec![0usize; ks.len()];
    for (i, &label) in labels.iter().enumerate() {
        let pos = bank.ids.binary_search(&label).map_err(|_| {
            TammError::config(format!("sample {i} has class {label}, which is not in the bank"))
        })?;
        let scores = zeroshot_scores(feats.vision.row(i), feats.semantic.row(i), bank, mode);
        let r = rank_of(&scores, pos);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if r < k {
                *h += 1;
            }
        }
    }
    let n = labels.len() as f64;
    Ok(ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n)).collect())
}
