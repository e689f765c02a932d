//! Pseudo-labels for unlabeled samples of both domains, with entropy-based
//! outlier rejection against the pooled mean entropy.

use std::io::Write;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, ProbabilisticClassifier};
use crate::domain::{
    check_pair, ClassKey, DomainDataset, DomainId, TransformPair, WorkingLabels,
};
use crate::error::{CdaError, Result};

/// Natural-log entropy of a probability row, with `0 · ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(CdaError::Invalid("empty probability row".to_string()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(CdaError::Invalid(format!(
            "probabilities must be finite and non-negative: {probs:?}"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(CdaError::Invalid(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(h.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutlierSplit {
    pub threshold: f64,
    pub mask: Vec<bool>,
    /// The plain rule flagged every sample and the lowest-entropy half was kept.
    pub guard_applied: bool,
}

/// Flags `H ≥ mean(H)`. If that would flag everything, the lowest-entropy
/// `⌈n/2⌉` samples (ties by position) are kept instead.
pub fn outlier_split(entropies: &[f64]) -> OutlierSplit {
    let n = entropies.len();
    if n == 0 {
        return OutlierSplit {
            threshold: 0.0,
            mask: Vec::new(),
            guard_applied: false,
        };
    }
    let threshold = entropies.iter().sum::<f64>() / n as f64;
    let mut mask: Vec<bool> = entropies.iter().map(|&h| h >= threshold).collect();
    let guard_applied = mask.iter().all(|&m| m);
    if guard_applied {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| entropies[i].total_cmp(&entropies[j]).then(i.cmp(&j)));
        for &i in &order[..n.div_ceil(2)] {
            mask[i] = false;
        }
    }
    OutlierSplit {
        threshold,
        mask,
        guard_applied,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelEntry {
    pub domain: DomainId,
    /// Row index within the domain.
    pub index: usize,
    pub predicted: ClassKey,
    pub probs: Vec<f64>,
    pub entropy: f64,
    pub outlier: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub classes: Vec<ClassKey>,
    /// Unlabeled samples of A, then of B, each in row order.
    pub entries: Vec<PseudoLabelEntry>,
    pub threshold: f64,
    pub guard_applied: bool,
}

impl PseudoLabelReport {
    pub fn outlier_count(&self) -> usize {
        self.entries.iter().filter(|e| e.outlier).count()
    }

    pub fn outlier_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.outlier_count() as f64 / self.entries.len() as f64
        }
    }

    pub fn predictions(&self) -> Vec<ClassKey> {
        self.entries.iter().map(|e| e.predicted).collect()
    }

    /// Given labels plus non-outlier pseudo-labels for each domain.
    pub fn working_labels(&self, a: &DomainDataset, b: &DomainDataset) -> Result<(WorkingLabels, WorkingLabels)> {
        let pick = |dom: DomainId| {
            self.entries
                .iter()
                .filter(move |e| e.domain == dom)
                .map(|e| (e.index, (!e.outlier).then_some(e.predicted)))
        };
        Ok((
            WorkingLabels::with_pseudo(a, pick(a.domain()))?,
            WorkingLabels::with_pseudo(b, pick(b.domain()))?,
        ))
    }

    pub fn write_csv<W: Write>(&self, out: W, a: &DomainDataset, b: &DomainDataset) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let map = |e: csv::Error| CdaError::Invalid(e.to_string());
        w.write_record(["sample_id", "domain", "predicted", "entropy", "outlier"])
            .map_err(map)?;
        for e in &self.entries {
            let ds = if e.domain == a.domain() { a } else { b };
            w.write_record([
                ds.ids()[e.index].clone(),
                e.domain.to_string(),
                e.predicted.to_string(),
                format!("{:.17e}", e.entropy),
                (e.outlier as u8).to_string(),
            ])
            .map_err(map)?;
        }
        w.flush().map_err(|e| CdaError::Invalid(e.to_string()))
    }
}

/// Predicts every unlabeled sample of both domains in the mapped space.
/// `classifier` must have been fitted on mapped features of the same dimension.
pub fn assign(
    classifier: &dyn ProbabilisticClassifier,
    a: &DomainDataset,
    b: &DomainDataset,
    t: &TransformPair,
) -> Result<PseudoLabelReport> {
    check_pair(a, b)?;
    t.validate(a.dim())?;
    if classifier.dim() != a.dim() {
        return Err(CdaError::Contract(format!(
            "classifier expects {}-dimensional inputs, data is {}-dimensional",
            classifier.dim(),
            a.dim()
        )));
    }
    let ua = a.unlabeled_indices();
    let ub = b.unlabeled_indices();
    let za = a.select_rows(&ua).dot(t.get(a.domain()));
    let zb = b.select_rows(&ub).dot(t.get(b.domain()));
    let z: Array2<f64> = concatenate(Axis(0), &[za.view(), zb.view()])
        .map_err(|e| CdaError::Invalid(e.to_string()))?;
    let probs = if z.nrows() == 0 {
        Array2::zeros((0, classifier.classes().len()))
    } else {
        classifier.predict_proba(z.view())?
    };
    let mut entropies = Vec::with_capacity(z.nrows());
    for row in probs.outer_iter() {
        entropies.push(entropy(row.as_slice().expect("standard layout"))?);
    }
    let split = outlier_split(&entropies);
    let refs = ua
        .iter()
        .map(|&i| (a.domain(), i))
        .chain(ub.iter().map(|&i| (b.domain(), i)));
    let entries = refs
        .zip(probs.outer_iter())
        .zip(entropies.iter().zip(&split.mask))
        .map(|(((domain, index), row), (&h, &outlier))| PseudoLabelEntry {
            domain,
            index,
            predicted: classifier.classes()[argmax(row.iter().copied())],
            probs: row.to_vec(),
            entropy: h,
            outlier,
        })
        .collect();
    Ok(PseudoLabelReport {
        classes: classifier.classes().to_vec(),
        entries,
        threshold: split.threshold,
        guard_applied: split.guard_applied,
    })
}
