//! Samples, labels, domains and hyperparameters shared by every other module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DomainId {
    A,
    B,
}

impl DomainId {
    pub fn other(self) -> DomainId {
        match self {
            DomainId::A => DomainId::B,
            DomainId::B => DomainId::A,
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainId::A => f.write_str("A"),
            DomainId::B => f.write_str("B"),
        }
    }
}

/// Label carried by a sample as handed to the method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelState {
    Known(u32),
    /// The single aggregate class for everything outside the known label space.
    Unknown,
    Unlabeled,
}

impl LabelState {
    pub fn is_labeled(self) -> bool {
        !matches!(self, LabelState::Unlabeled)
    }

    pub fn class_key(self) -> Option<ClassKey> {
        match self {
            LabelState::Known(c) => Some(ClassKey::Known(c)),
            LabelState::Unknown => Some(ClassKey::Unknown),
            LabelState::Unlabeled => None,
        }
    }
}

/// A class as seen by the losses and the classifiers. Ordered with known ids
/// ascending and the unknown class last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassKey {
    Known(u32),
    Unknown,
}

impl ClassKey {
    pub fn is_known(self) -> bool {
        matches!(self, ClassKey::Known(_))
    }
}

impl fmt::Display for ClassKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassKey::Known(c) => write!(f, "{c}"),
            ClassKey::Unknown => f.write_str("unknown"),
        }
    }
}

/// One domain's samples, partially labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    domain: DomainId,
    ids: Vec<String>,
    features: Array2<f64>,
    labels: Vec<LabelState>,
    known_classes: BTreeSet<u32>,
}

impl DomainDataset {
    pub fn new(
        domain: DomainId,
        ids: Vec<String>,
        features: Array2<f64>,
        labels: Vec<LabelState>,
        known_classes: BTreeSet<u32>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(CdaError::Dimension {
                context: "dataset labels",
                expected: n,
                found: labels.len(),
            });
        }
        if ids.len() != n {
            return Err(CdaError::Dimension {
                context: "dataset ids",
                expected: n,
                found: ids.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(CdaError::Invalid(format!(
                "domain {domain} contains non-finite features"
            )));
        }
        for (i, label) in labels.iter().enumerate() {
            if let LabelState::Known(c) = label {
                if !known_classes.contains(c) {
                    return Err(CdaError::Invalid(format!(
                        "sample {} of domain {domain} has class {c} outside the known label set",
                        ids[i]
                    )));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(CdaError::Invalid(format!(
                    "duplicate sample id {id} in domain {domain}"
                )));
            }
        }
        Ok(Self {
            domain,
            ids,
            features,
            labels,
            known_classes,
        })
    }

    /// Builds a dataset from feature rows, generating ids of the form `A-000003`.
    pub fn from_rows(
        domain: DomainId,
        rows: &[Vec<f64>],
        labels: Vec<LabelState>,
        known_classes: BTreeSet<u32>,
    ) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(rows.len() * d);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(CdaError::Dimension {
                    context: "feature row",
                    expected: d,
                    found: rows[i].len(),
                });
            }
            flat.extend_from_slice(row);
        }
        let features = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| CdaError::Invalid(e.to_string()))?;
        Self::new(domain, default_ids(domain, rows.len()), features, labels, known_classes)
    }

    pub fn domain(&self) -> DomainId {
        self.domain
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[LabelState] {
        &self.labels
    }

    pub fn known_classes(&self) -> &BTreeSet<u32> {
        &self.known_classes
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_labeled()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labels[i].is_labeled()).collect()
    }

    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_labeled()).count()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.len() - self.num_labeled()
    }

    /// Copies out the rows at `indices`.
    pub fn select_rows(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), indices)
    }
}

pub(crate) fn default_ids(domain: DomainId, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{domain}-{i:06}")).collect()
}

/// Both domains of an experiment must share the feature dimension.
pub fn check_pair(a: &DomainDataset, b: &DomainDataset) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(CdaError::Dimension {
            context: "domain pair feature dimension",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

/// Effective label of a sample during one outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectiveLabel {
    Known(u32),
    Unknown,
    /// Outlier or not yet pseudo-labeled; takes part in no loss term.
    Excluded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Given,
    Pseudo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkingLabel {
    pub label: EffectiveLabel,
    pub provenance: Provenance,
}

impl WorkingLabel {
    pub fn class_key(&self) -> Option<ClassKey> {
        match self.label {
            EffectiveLabel::Known(c) => Some(ClassKey::Known(c)),
            EffectiveLabel::Unknown => Some(ClassKey::Unknown),
            EffectiveLabel::Excluded => None,
        }
    }
}

/// Per-sample labels for one domain in the current iteration. Given labels
/// always survive; only unlabeled rows can carry pseudo-labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingLabels {
    labels: Vec<WorkingLabel>,
}

impl WorkingLabels {
    /// Given labels only; every unlabeled row is excluded.
    pub fn from_given(dataset: &DomainDataset) -> Self {
        let labels = dataset
            .labels()
            .iter()
            .map(|l| match l {
                LabelState::Known(c) => WorkingLabel {
                    label: EffectiveLabel::Known(*c),
                    provenance: Provenance::Given,
                },
                LabelState::Unknown => WorkingLabel {
                    label: EffectiveLabel::Unknown,
                    provenance: Provenance::Given,
                },
                LabelState::Unlabeled => WorkingLabel {
                    label: EffectiveLabel::Excluded,
                    provenance: Provenance::Pseudo,
                },
            })
            .collect();
        Self { labels }
    }

    /// Given labels plus pseudo-labels for unlabeled rows; `None` marks an outlier.
    pub fn with_pseudo(
        dataset: &DomainDataset,
        pseudo: impl IntoIterator<Item = (usize, Option<ClassKey>)>,
    ) -> Result<Self> {
        let mut out = Self::from_given(dataset);
        for (i, class) in pseudo {
            if i >= dataset.len() {
                return Err(CdaError::Dimension {
                    context: "pseudo-label index",
                    expected: dataset.len(),
                    found: i,
                });
            }
            if dataset.labels()[i].is_labeled() {
                return Err(CdaError::Contract(format!(
                    "pseudo-label would overwrite the given label of sample {} in domain {}",
                    dataset.ids()[i],
                    dataset.domain()
                )));
            }
            let label = match class {
                Some(ClassKey::Known(c)) => {
                    if !dataset.known_classes().contains(&c) {
                        return Err(CdaError::Invalid(format!(
                            "pseudo-label class {c} outside the known label set"
                        )));
                    }
                    EffectiveLabel::Known(c)
                }
                Some(ClassKey::Unknown) => EffectiveLabel::Unknown,
                None => EffectiveLabel::Excluded,
            };
            out.labels[i] = WorkingLabel {
                label,
                provenance: Provenance::Pseudo,
            };
        }
        Ok(out)
    }

    /// Arbitrary working labels, used to build loss instances directly.
    pub fn from_labels(labels: Vec<WorkingLabel>) -> Result<Self> {
        if labels
            .iter()
            .any(|l| l.provenance == Provenance::Given && l.label == EffectiveLabel::Excluded)
        {
            return Err(CdaError::Contract(
                "a given label cannot be excluded".to_string(),
            ));
        }
        Ok(Self { labels })
    }

    /// Shorthand for pseudo-provenance labels from class keys.
    pub fn from_keys(keys: &[Option<ClassKey>]) -> Self {
        let labels = keys
            .iter()
            .map(|k| WorkingLabel {
                label: match k {
                    Some(ClassKey::Known(c)) => EffectiveLabel::Known(*c),
                    Some(ClassKey::Unknown) => EffectiveLabel::Unknown,
                    None => EffectiveLabel::Excluded,
                },
                provenance: Provenance::Pseudo,
            })
            .collect();
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize) -> WorkingLabel {
        self.labels[i]
    }

    pub fn class_key(&self, i: usize) -> Option<ClassKey> {
        self.labels[i].class_key()
    }

    pub fn iter(&self) -> impl Iterator<Item = &WorkingLabel> {
        self.labels.iter()
    }

    pub fn excluded_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| l.label == EffectiveLabel::Excluded)
            .count()
    }
}

/// The two domain-specific linear maps onto the shared latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl TransformPair {
    pub fn new(a: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        let pair = Self { a, b };
        pair.validate(pair.a.nrows())?;
        Ok(pair)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            a: Array2::eye(d),
            b: Array2::eye(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            a: Array2::zeros((d, d)),
            b: Array2::zeros((d, d)),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn get(&self, domain: DomainId) -> &Array2<f64> {
        match domain {
            DomainId::A => &self.a,
            DomainId::B => &self.b,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for (name, w) in [("W_A", &self.a), ("W_B", &self.b)] {
            if w.nrows() != d || w.ncols() != d {
                return Err(CdaError::Dimension {
                    context: if name == "W_A" { "transform W_A" } else { "transform W_B" },
                    expected: d,
                    found: if w.nrows() != d { w.nrows() } else { w.ncols() },
                });
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(CdaError::Invalid(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// Loss weights of the total objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Weight on conditional alignment; 1 is the standard objective, 0 removes the term.
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub lambda_g: f64,
    pub lambda_u: f64,
    /// Identity-anchoring regularizer weight.
    pub lambda_r: f64,
    pub margin: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_m: 10.0,
            lambda_g: 1.0,
            lambda_u: 0.1,
            lambda_r: 0.01,
            margin: 1.0,
        }
    }
}

impl Hyperparams {
    /// Weights used for the re-identification protocol.
    pub fn reid() -> Self {
        Self {
            lambda_u: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_c", self.lambda_c),
            ("lambda_m", self.lambda_m),
            ("lambda_g", self.lambda_g),
            ("lambda_u", self.lambda_u),
            ("lambda_r", self.lambda_r),
        ];
        for (name, v) in weights {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CdaError::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(CdaError::Parameter(format!(
                "margin must be > 0, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Row-wise linear map of a dataset's features.
pub fn transform(dataset: &DomainDataset, w: &Array2<f64>) -> Result<Array2<f64>> {
    transform_features(dataset.features().view(), w)
}

pub fn transform_features(features: ArrayView2<'_, f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != w.nrows() {
        return Err(CdaError::Dimension {
            context: "transform",
            expected: features.ncols(),
            found: w.nrows(),
        });
    }
    Ok(features.dot(w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenter {
    pub center: Array1<f64>,
    pub count: usize,
}

/// Mean of each class's non-excluded rows in the untransformed space. Classes
/// with no surviving rows are absent from the map.
pub fn class_centers(
    features: ArrayView2<'_, f64>,
    labels: &WorkingLabels,
) -> Result<BTreeMap<ClassKey, ClassCenter>> {
    if labels.len() != features.nrows() {
        return Err(CdaError::Dimension {
            context: "class_centers labels",
            expected: features.nrows(),
            found: labels.len(),
        });
    }
    let d = features.ncols();
    let mut sums: BTreeMap<ClassKey, (Array1<f64>, usize)> = BTreeMap::new();
    for (i, row) in features.outer_iter().enumerate() {
        if let Some(key) = labels.class_key(i) {
            let entry = sums.entry(key).or_insert_with(|| (Array1::zeros(d), 0));
            entry.0 += &row;
            entry.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (sum, count))| {
            (
                k,
                ClassCenter {
                    center: sum / count as f64,
                    count,
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn keys(v: &[Option<ClassKey>]) -> WorkingLabels {
        WorkingLabels::from_keys(v)
    }

    #[test]
    fn transform_identity_zero_and_swap() {
        let x = array![[1.0, 2.0], [3.0, -4.0]];
        assert_eq!(transform_features(x.view(), &Array2::eye(2)).unwrap(), x);
        assert_eq!(
            transform_features(x.view(), &Array2::zeros((2, 2))).unwrap(),
            Array2::<f64>::zeros((2, 2))
        );
        let swap = array![[0.0, 1.0], [1.0, 0.0]];
        let one = array![[1.0, 2.0]];
        assert_eq!(transform_features(one.view(), &swap).unwrap(), array![[2.0, 1.0]]);
    }

    #[test]
    fn transform_rejects_dimension_mismatch() {
        let x = array![[1.0, 2.0]];
        let err = transform_features(x.view(), &Array2::eye(3)).unwrap_err();
        assert!(matches!(err, CdaError::Dimension { .. }));
    }

    #[test]
    fn transform_leaves_dataset_untouched() {
        let ds = DomainDataset::from_rows(
            DomainId::A,
            &[vec![1.0, 2.0]],
            vec![LabelState::Unlabeled],
            BTreeSet::new(),
        )
        .unwrap();
        let before = ds.clone();
        let _ = transform(&ds, &array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(ds, before);
    }

    #[test]
    fn centers_by_hand() {
        let x = array![[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]];
        let labels = keys(&[
            Some(ClassKey::Known(3)),
            Some(ClassKey::Known(3)),
            Some(ClassKey::Unknown),
        ]);
        let centers = class_centers(x.view(), &labels).unwrap();
        let c = &centers[&ClassKey::Known(3)];
        assert_eq!(c.center, array![1.0, 0.0]);
        assert_eq!(c.count, 2);
        assert_eq!(centers[&ClassKey::Unknown].center, array![5.0, 5.0]);
        assert_eq!(centers[&ClassKey::Unknown].count, 1);
    }

    #[test]
    fn centers_empty_when_all_excluded() {
        let x = array![[0.0, 0.0], [2.0, 0.0]];
        let centers = class_centers(x.view(), &keys(&[None, None])).unwrap();
        assert!(centers.is_empty());
    }

    #[test]
    fn dataset_views_partition_rows() {
        let ds = DomainDataset::from_rows(
            DomainId::B,
            &[vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            vec![
                LabelState::Known(1),
                LabelState::Unlabeled,
                LabelState::Unknown,
                LabelState::Unlabeled,
            ],
            [1].into_iter().collect(),
        )
        .unwrap();
        assert_eq!(ds.labeled_indices(), vec![0, 2]);
        assert_eq!(ds.unlabeled_indices(), vec![1, 3]);
        assert_eq!(ds.num_labeled() + ds.num_unlabeled(), ds.len());
        assert_eq!(ds.ids()[3], "B-000003");
    }

    #[test]
    fn dataset_rejects_out_of_set_class_and_ragged_rows() {
        let err = DomainDataset::from_rows(
            DomainId::A,
            &[vec![0.0]],
            vec![LabelState::Known(9)],
            [1].into_iter().collect(),
        )
        .unwrap_err();
        assert!(matches!(err, CdaError::Invalid(_)));
        let err = DomainDataset::from_rows(
            DomainId::A,
            &[vec![0.0], vec![1.0, 2.0]],
            vec![LabelState::Unlabeled; 2],
            BTreeSet::new(),
        )
        .unwrap_err();
        assert!(matches!(err, CdaError::Dimension { .. }));
    }

    #[test]
    fn working_labels_never_overwrite_given() {
        let ds = DomainDataset::from_rows(
            DomainId::A,
            &[vec![0.0], vec![1.0]],
            vec![LabelState::Known(0), LabelState::Unlabeled],
            [0].into_iter().collect(),
        )
        .unwrap();
        let err = WorkingLabels::with_pseudo(&ds, [(0, Some(ClassKey::Unknown))]).unwrap_err();
        assert!(matches!(err, CdaError::Contract(_)));
        let wl = WorkingLabels::with_pseudo(&ds, [(1, None)]).unwrap();
        assert_eq!(wl.get(0).provenance, Provenance::Given);
        assert_eq!(wl.get(1).label, EffectiveLabel::Excluded);
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = Hyperparams {
            margin: 0.0,
            ..Hyperparams::default()
        };
        assert!(bad.validate().is_err());
        let bad = Hyperparams {
            lambda_g: -1.0,
            ..Hyperparams::default()
        };
        assert!(bad.validate().is_err());
    }

    fn matrix(d: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-2.0f64..2.0, d * d)
            .prop_map(move |v| Array2::from_shape_vec((d, d), v).unwrap())
    }

    proptest! {
        #[test]
        fn transform_composes(
            (x, w1, w2) in (1usize..8).prop_flat_map(|d| (
                proptest::collection::vec(-3.0f64..3.0, 5 * d)
                    .prop_map(move |v| Array2::from_shape_vec((5, d), v).unwrap()),
                matrix(d),
                matrix(d),
            ))
        ) {
            let stepwise = transform_features(
                transform_features(x.view(), &w1).unwrap().view(), &w2).unwrap();
            let fused = transform_features(x.view(), &w1.dot(&w2)).unwrap();
            for (p, q) in stepwise.iter().zip(fused.iter()) {
                prop_assert!((p - q).abs() <= 1e-10 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn centers_permutation_invariant(
            rows in proptest::collection::vec((proptest::collection::vec(-5.0f64..5.0, 3), 0u32..3), 1..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = rows.len();
            let build = |order: &[usize]| {
                let flat: Vec<f64> = order.iter().flat_map(|&i| rows[i].0.clone()).collect();
                let x = Array2::from_shape_vec((n, 3), flat).unwrap();
                let k: Vec<_> = order.iter().map(|&i| Some(ClassKey::Known(rows[i].1))).collect();
                class_centers(x.view(), &WorkingLabels::from_keys(&k)).unwrap()
            };
            let identity: Vec<usize> = (0..n).collect();
            let mut shuffled = identity.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p = build(&identity);
            let q = build(&shuffled);
            prop_assert_eq!(p.len(), q.len());
            for (k, c) in &p {
                let other = &q[k];
                prop_assert_eq!(c.count, other.count);
                for (u, v) in c.center.iter().zip(other.center.iter()) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn dataset_round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e6f64..1e6, 4), 1..10)) {
            let labels: Vec<_> = (0..rows.len()).map(|i| match i % 3 {
                0 => LabelState::Known(0),
                1 => LabelState::Unknown,
                _ => LabelState::Unlabeled,
            }).collect();
            let ds = DomainDataset::from_rows(DomainId::A, &rows, labels.clone(), [0].into_iter().collect()).unwrap();
            for (i, row) in rows.iter().enumerate() {
                prop_assert_eq!(ds.features().row(i).to_vec(), row.clone());
            }
            prop_assert_eq!(ds.labels(), &labels[..]);
        }
    }
}
