//! Accuracy over unlabeled samples and CMC curves for retrieval evaluation.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::domain::ClassKey;
use crate::error::{CdaError, Result};

/// Fraction of exact matches; the unknown class counts as one class.
pub fn accuracy(predicted: &[ClassKey], truth: &[ClassKey]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(CdaError::Dimension {
            context: "accuracy",
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(CdaError::Invalid("accuracy of an empty label set".to_string()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean and `(n − 1)`-denominator standard deviation. A single value has
/// standard deviation 0.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// `"77.1 ± 1.35"` style cell from fractions in `[0, 1]`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.2}", 100.0 * mean, 100.0 * std)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    /// `rates[r - 1]` is the match rate within the top `r`.
    pub rates: Vec<f64>,
    pub evaluated: usize,
    /// Queries without any gallery item of their identity.
    pub skipped: usize,
}

impl CmcCurve {
    pub fn rate(&self, rank: usize) -> Option<f64> {
        rank.checked_sub(1).and_then(|r| self.rates.get(r)).copied()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "rate"])?;
        for (r, v) in self.rates.iter().enumerate() {
            w.write_record([(r + 1).to_string(), format!("{v}")])?;
        }
        w.flush()
    }
}

/// Identity attached to a query or gallery item. `None` never matches
/// anything, which is how unknown-class items are represented.
pub type Identity = Option<u32>;

/// Ranks gallery items by ascending Euclidean distance in the mapped space
/// (ties by gallery index) and reports the rank of each query's first
/// correct match, for ranks `1..=max_rank`.
pub fn cmc(
    query_features: ArrayView2<'_, f64>,
    query_ids: &[Identity],
    gallery_features: ArrayView2<'_, f64>,
    gallery_ids: &[Identity],
    query_transform: &Array2<f64>,
    gallery_transform: &Array2<f64>,
    max_rank: usize,
) -> Result<CmcCurve> {
    if gallery_features.nrows() == 0 {
        return Err(CdaError::Invalid("empty gallery".to_string()));
    }
    if query_ids.len() != query_features.nrows() {
        return Err(CdaError::Dimension {
            context: "cmc query ids",
            expected: query_features.nrows(),
            found: query_ids.len(),
        });
    }
    if gallery_ids.len() != gallery_features.nrows() {
        return Err(CdaError::Dimension {
            context: "cmc gallery ids",
            expected: gallery_features.nrows(),
            found: gallery_ids.len(),
        });
    }
    if max_rank == 0 {
        return Err(CdaError::Parameter("max_rank must be >= 1".to_string()));
    }
    let q = crate::domain::transform_features(query_features, query_transform)?;
    let g = crate::domain::transform_features(gallery_features, gallery_transform)?;
    if q.ncols() != g.ncols() {
        return Err(CdaError::Dimension {
            context: "cmc mapped dimension",
            expected: q.ncols(),
            found: g.ncols(),
        });
    }

    let mut hits = vec![0usize; max_rank];
    let mut evaluated = 0;
    let mut skipped = 0;
    for (qi, qrow) in q.outer_iter().enumerate() {
        let Some(id) = query_ids[qi] else {
            skipped += 1;
            continue;
        };
        // rank of the first match = 1 + number of gallery items strictly ahead of it
        let dist = |j: usize| -> f64 {
            g.row(j)
                .iter()
                .zip(qrow.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let best = (0..g.nrows())
            .filter(|&j| gallery_ids[j] == Some(id))
            .map(|j| (dist(j), j))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let Some((dm, jm)) = best else {
            skipped += 1;
            continue;
        };
        evaluated += 1;
        let ahead = (0..g.nrows())
            .filter(|&j| {
                let dj = dist(j);
                dj < dm || (dj == dm && j < jm)
            })
            .count();
        if ahead < max_rank {
            hits[ahead] += 1;
        }
    }
    let mut rates = Vec::with_capacity(max_rank);
    let mut cum = 0;
    for h in hits {
        cum += h;
        rates.push(if evaluated == 0 {
            0.0
        } else {
            cum as f64 / evaluated as f64
        });
    }
    Ok(CmcCurve {
        rates,
        evaluated,
        skipped,
    })
}
