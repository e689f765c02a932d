//! Seeded labeling protocols over fully annotated data, and a synthetic
//! two-domain generator with a controlled linear domain shift.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{
    default_ids, ClassKey, DomainDataset, DomainId, LabelState,
};
use crate::error::{CdaError, Result};

/// Fully annotated samples of one domain, with raw class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPool {
    pub domain: DomainId,
    pub ids: Vec<String>,
    pub features: Array2<f64>,
    pub classes: Vec<u32>,
}

impl LabeledPool {
    /// Reads a dataset whose every sample carries an integer class id.
    pub fn from_dataset(ds: &DomainDataset) -> Result<Self> {
        let classes = ds
            .labels()
            .iter()
            .zip(ds.ids())
            .map(|(l, id)| match l {
                LabelState::Known(c) => Ok(*c),
                _ => Err(CdaError::Invalid(format!(
                    "sample {id} lacks a ground-truth class id"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            domain: ds.domain(),
            ids: ds.ids().to_vec(),
            features: ds.features().clone(),
            classes,
        })
    }

    fn class_set(&self) -> BTreeSet<u32> {
        self.classes.iter().copied().collect()
    }
}

/// Ground-truth label of every sample, known id or the merged unknown class.
/// Kept apart from the datasets handed to the method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub a: Vec<ClassKey>,
    pub b: Vec<ClassKey>,
}

impl GroundTruth {
    pub fn get(&self, domain: DomainId) -> &[ClassKey] {
        match domain {
            DomainId::A => &self.a,
            DomainId::B => &self.b,
        }
    }

    /// Truth for the unlabeled rows, in the order predictions are emitted.
    pub fn for_unlabeled(&self, a: &DomainDataset, b: &DomainDataset) -> Vec<ClassKey> {
        [a, b]
            .into_iter()
            .flat_map(|ds| {
                let truth = self.get(ds.domain());
                ds.unlabeled_indices().into_iter().map(move |i| truth[i])
            })
            .collect()
    }
}

/// Output of a protocol: the weakly labeled pair plus held-out truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSplit {
    pub a: DomainDataset,
    pub b: DomainDataset,
    pub truth: GroundTruth,
    /// Raw identity of every sample, used for retrieval scoring.
    pub raw_classes: (Vec<u32>, Vec<u32>),
    pub labeled_known: (BTreeSet<u32>, BTreeSet<u32>),
}

/// Counts shared by both protocols once the known classes are fixed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelingCounts {
    pub labeled_known_per_domain: usize,
    pub shared_labeled: usize,
    pub labeled_per_class: usize,
    pub labeled_unknown_per_domain: usize,
}

impl LabelingCounts {
    fn validate(&self, n_known: usize) -> Result<()> {
        if self.shared_labeled > self.labeled_known_per_domain {
            return Err(CdaError::Infeasible(format!(
                "{} shared labeled classes exceed the {} labeled classes per domain",
                self.shared_labeled, self.labeled_known_per_domain
            )));
        }
        if 2 * self.labeled_known_per_domain - self.shared_labeled > n_known {
            return Err(CdaError::Infeasible(format!(
                "labeled known sets of size {} sharing {} need {} known classes, only {} exist",
                self.labeled_known_per_domain,
                self.shared_labeled,
                2 * self.labeled_known_per_domain - self.shared_labeled,
                n_known
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfficeProtocolSpec {
    pub n_known: usize,
    pub labeled_known_per_domain: usize,
    pub shared_labeled: usize,
    pub labeled_per_class: usize,
    pub labeled_unknown_per_domain: usize,
}

impl Default for OfficeProtocolSpec {
    fn default() -> Self {
        Self {
            n_known: 15,
            labeled_known_per_domain: 10,
            shared_labeled: 5,
            labeled_per_class: 3,
            labeled_unknown_per_domain: 9,
        }
    }
}

impl OfficeProtocolSpec {
    fn counts(&self) -> LabelingCounts {
        LabelingCounts {
            labeled_known_per_domain: self.labeled_known_per_domain,
            shared_labeled: self.shared_labeled,
            labeled_per_class: self.labeled_per_class,
            labeled_unknown_per_domain: self.labeled_unknown_per_domain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReidProtocolSpec {
    pub labeled_per_class: usize,
}

impl Default for ReidProtocolSpec {
    fn default() -> Self {
        Self { labeled_per_class: 1 }
    }
}

impl ReidProtocolSpec {
    /// Floored `2N/3`, `N/3` and `N/4` counts for `n` shared identities.
    pub fn counts(&self, n: usize) -> LabelingCounts {
        LabelingCounts {
            labeled_known_per_domain: 2 * n / 3,
            shared_labeled: n / 3,
            labeled_per_class: self.labeled_per_class,
            labeled_unknown_per_domain: n / 4,
        }
    }
}

fn check_pools(a: &LabeledPool, b: &LabeledPool) -> Result<()> {
    if a.features.ncols() != b.features.ncols() {
        return Err(CdaError::Dimension {
            context: "protocol pools",
            expected: a.features.ncols(),
            found: b.features.ncols(),
        });
    }
    if a.domain == b.domain {
        return Err(CdaError::Invalid("pools must come from different domains".to_string()));
    }
    Ok(())
}

/// Picks labeled known sets with the requested overlap, then labeled samples
/// per class and labeled unknown samples (uniform over samples), per domain.
fn label_split(
    rng: &mut ChaCha8Rng,
    pools: [&LabeledPool; 2],
    known: &BTreeSet<u32>,
    counts: &LabelingCounts,
) -> Result<ProtocolSplit> {
    counts.validate(known.len())?;
    let mut order: Vec<u32> = known.iter().copied().collect();
    order.shuffle(rng);
    let s = counts.shared_labeled;
    let own = counts.labeled_known_per_domain - s;
    let shared = &order[..s];
    let sets = [
        shared.iter().chain(&order[s..s + own]).copied().collect::<BTreeSet<u32>>(),
        shared
            .iter()
            .chain(&order[s + own..s + 2 * own])
            .copied()
            .collect::<BTreeSet<u32>>(),
    ];

    let mut datasets = Vec::with_capacity(2);
    let mut truths = Vec::with_capacity(2);
    for (pool, set) in pools.iter().zip(&sets) {
        let mut labels = vec![LabelState::Unlabeled; pool.classes.len()];
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut unknown_rows = Vec::new();
        for (i, c) in pool.classes.iter().enumerate() {
            if known.contains(c) {
                by_class.entry(*c).or_default().push(i);
            } else {
                unknown_rows.push(i);
            }
        }
        for c in set {
            let rows = by_class.get(c).map_or(&[][..], Vec::as_slice);
            if rows.len() < counts.labeled_per_class {
                return Err(CdaError::Infeasible(format!(
                    "class {c} in domain {} has {} samples, {} must be labeled",
                    pool.domain,
                    rows.len(),
                    counts.labeled_per_class
                )));
            }
            for &i in rows.choose_multiple(rng, counts.labeled_per_class) {
                labels[i] = LabelState::Known(*c);
            }
        }
        if unknown_rows.len() < counts.labeled_unknown_per_domain {
            return Err(CdaError::Infeasible(format!(
                "domain {} has {} unknown-class samples, {} must be labeled",
                pool.domain,
                unknown_rows.len(),
                counts.labeled_unknown_per_domain
            )));
        }
        for &i in unknown_rows.choose_multiple(rng, counts.labeled_unknown_per_domain) {
            labels[i] = LabelState::Unknown;
        }
        let truth: Vec<ClassKey> = pool
            .classes
            .iter()
            .map(|c| {
                if known.contains(c) {
                    ClassKey::Known(*c)
                } else {
                    ClassKey::Unknown
                }
            })
            .collect();
        datasets.push(DomainDataset::new(
            pool.domain,
            pool.ids.clone(),
            pool.features.clone(),
            labels,
            known.clone(),
        )?);
        truths.push(truth);
    }
    let b = datasets.pop().expect("two domains");
    let a = datasets.pop().expect("two domains");
    let tb = truths.pop().expect("two domains");
    let ta = truths.pop().expect("two domains");
    let [la, lb] = sets;
    let (a, b, ta, tb, ra, rb, la, lb) = if a.domain() == DomainId::A {
        (a, b, ta, tb, pools[0].classes.clone(), pools[1].classes.clone(), la, lb)
    } else {
        (b, a, tb, ta, pools[1].classes.clone(), pools[0].classes.clone(), lb, la)
    };
    Ok(ProtocolSplit {
        a,
        b,
        truth: GroundTruth { a: ta, b: tb },
        raw_classes: (ra, rb),
        labeled_known: (la, lb),
    })
}

/// Random known classes (present in both domains), the rest merged into
/// the unknown class, then per-domain labeling.
pub fn apply_office_protocol(
    a: &LabeledPool,
    b: &LabeledPool,
    spec: &OfficeProtocolSpec,
    seed: u64,
) -> Result<ProtocolSplit> {
    check_pools(a, b)?;
    let all: BTreeSet<u32> = a.class_set().union(&b.class_set()).copied().collect();
    if all.len() < spec.n_known + 1 {
        return Err(CdaError::Infeasible(format!(
            "{} classes available, need {} known plus at least one unknown",
            all.len(),
            spec.n_known
        )));
    }
    let both: Vec<u32> = a.class_set().intersection(&b.class_set()).copied().collect();
    if both.len() < spec.n_known {
        return Err(CdaError::Infeasible(format!(
            "only {} classes occur in both domains, {} known classes requested",
            both.len(),
            spec.n_known
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let known: BTreeSet<u32> = both
        .choose_multiple(&mut rng, spec.n_known)
        .copied()
        .collect();
    label_split(&mut rng, [a, b], &known, &spec.counts())
}

/// Identities seen in both views are the known classes; view-private
/// identities are merged into the unknown class.
pub fn apply_reid_protocol(
    a: &LabeledPool,
    b: &LabeledPool,
    spec: &ReidProtocolSpec,
    seed: u64,
) -> Result<ProtocolSplit> {
    check_pools(a, b)?;
    let known: BTreeSet<u32> = a.class_set().intersection(&b.class_set()).copied().collect();
    if known.is_empty() {
        return Err(CdaError::Infeasible(
            "the two views share no identity".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    label_split(&mut rng, [a, b], &known, &spec.counts(known.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub known_classes: usize,
    /// Unknown-class clusters private to each domain.
    pub private_unknown_classes: usize,
    pub samples_per_class: usize,
    /// Standard deviation of class-center coordinates around the common offset.
    pub center_scale: f64,
    /// Norm of the offset shared by every class center.
    pub offset_norm: f64,
    pub sigma: f64,
    /// Shared directions along which within-class noise has extra spread.
    pub nuisance_directions: usize,
    /// Extra standard deviation along each nuisance direction.
    pub nuisance_sigma: f64,
    pub rotation_degrees: f64,
    /// Translation magnitude in units of `sigma`.
    pub translation_sigmas: f64,
    pub labeling: LabelingCounts,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            known_classes: 8,
            private_unknown_classes: 2,
            samples_per_class: 40,
            center_scale: 3.0,
            offset_norm: 50.0,
            sigma: 1.0,
            nuisance_directions: 6,
            nuisance_sigma: 2.0,
            rotation_degrees: 30.0,
            translation_sigmas: 2.0,
            labeling: LabelingCounts {
                labeled_known_per_domain: 5,
                shared_labeled: 2,
                labeled_per_class: 3,
                labeled_unknown_per_domain: 9,
            },
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(CdaError::Parameter("dim must be >= 2".to_string()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(CdaError::Parameter("sigma must be > 0".to_string()));
        }
        if self.known_classes == 0 || self.private_unknown_classes == 0 || self.samples_per_class == 0 {
            return Err(CdaError::Parameter(
                "class and sample counts must be >= 1".to_string(),
            ));
        }
        for (name, v) in [
            ("center_scale", self.center_scale),
            ("offset_norm", self.offset_norm),
            ("nuisance_sigma", self.nuisance_sigma),
            ("rotation_degrees", self.rotation_degrees),
            ("translation_sigmas", self.translation_sigmas),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CdaError::Parameter(format!("{name} must be finite and >= 0")));
            }
        }
        if self.nuisance_directions > self.dim {
            return Err(CdaError::Parameter(
                "nuisance_directions must not exceed dim".to_string(),
            ));
        }
        self.labeling.validate(self.known_classes)
    }

    /// The same spec with the domain shift removed.
    pub fn without_shift(&self) -> Self {
        Self {
            rotation_degrees: 0.0,
            translation_sigmas: 0.0,
            ..self.clone()
        }
    }
}

/// Fully annotated synthetic pools before labeling, with the shift applied
/// to domain B.
#[derive(Clone, Debug)]
pub struct SyntheticPools {
    pub a: LabeledPool,
    pub b: LabeledPool,
    pub rotation: Array2<f64>,
    pub translation: Array1<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Random orthonormal basis from Gram-Schmidt on Gaussian vectors.
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, d));
    let mut col = 0;
    while col < d {
        let mut v = gaussian_vec(rng, d);
        for k in 0..col {
            let qk = q.column(k);
            let p = qk.dot(&v);
            v.scaled_add(-p, &qk);
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        q.column_mut(col).assign(&(v / norm));
        col += 1;
    }
    q
}

/// Orthogonal map rotating every plane of a random basis by `angle`.
pub fn planar_rotation(rng: &mut ChaCha8Rng, d: usize, angle: f64) -> Array2<f64> {
    let basis = random_orthonormal(rng, d);
    let mut block = Array2::<f64>::eye(d);
    let (s, c) = angle.sin_cos();
    for p in 0..d / 2 {
        let (i, j) = (2 * p, 2 * p + 1);
        block[[i, i]] = c;
        block[[i, j]] = s;
        block[[j, i]] = -s;
        block[[j, j]] = c;
    }
    basis.dot(&block).dot(&basis.t())
}

pub fn synthetic_pools(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<SyntheticPools> {
    spec.validate()?;
    let d = spec.dim;
    let k = spec.known_classes;
    let p = spec.private_unknown_classes;
    let total = k + 2 * p;

    let mut offset = gaussian_vec(rng, d);
    let on = offset.dot(&offset).sqrt();
    offset *= spec.offset_norm / on;
    // rejection keeps clusters at least 4σ apart
    let min_sep = 4.0 * spec.sigma;
    let mut centers: Vec<Array1<f64>> = Vec::with_capacity(total);
    let mut attempts = 0;
    while centers.len() < total {
        attempts += 1;
        let c = &offset + &(gaussian_vec(rng, d) * spec.center_scale);
        let far = centers
            .iter()
            .all(|o| (&c - o).mapv(|v| v * v).sum().sqrt() >= min_sep);
        if far || attempts > 10_000 {
            centers.push(c);
        }
    }

    let nuisance = random_orthonormal(rng, d);
    let rotation = planar_rotation(rng, d, spec.rotation_degrees * PI / 180.0);
    let mut direction = gaussian_vec(rng, d);
    let dn = direction.dot(&direction).sqrt();
    direction /= dn;
    let translation = direction * (spec.translation_sigmas * spec.sigma);

    let draw = |classes: &[usize], rng: &mut ChaCha8Rng| {
        let n = classes.len() * spec.samples_per_class;
        let mut x = Array2::<f64>::zeros((n, d));
        let mut y = Vec::with_capacity(n);
        let mut r = 0;
        for &c in classes {
            for _ in 0..spec.samples_per_class {
                let mut v = &centers[c] + &(gaussian_vec(rng, d) * spec.sigma);
                for j in 0..spec.nuisance_directions {
                    let z: f64 = rng.sample(StandardNormal);
                    v.scaled_add(z * spec.nuisance_sigma, &nuisance.column(j));
                }
                x.row_mut(r).assign(&v);
                y.push(c as u32);
                r += 1;
            }
        }
        (x, y)
    };
    let a_classes: Vec<usize> = (0..k).chain(k..k + p).collect();
    let b_classes: Vec<usize> = (0..k).chain(k + p..k + 2 * p).collect();
    let (xa, ya) = draw(&a_classes, rng);
    let (xb0, yb) = draw(&b_classes, rng);
    let xb = xb0.dot(&rotation) + &translation;

    Ok(SyntheticPools {
        a: LabeledPool {
            domain: DomainId::A,
            ids: default_ids(DomainId::A, ya.len()),
            features: xa,
            classes: ya,
        },
        b: LabeledPool {
            domain: DomainId::B,
            ids: default_ids(DomainId::B, yb.len()),
            features: xb,
            classes: yb,
        },
        rotation,
        translation,
    })
}

/// Gaussian clusters per class; domain B draws from the same class
/// distributions pushed through a rotation and a translation. Each domain
/// also gets its own unknown-class clusters. Labeled per `spec.labeling`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<ProtocolSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = synthetic_pools(spec, &mut rng)?;
    let known: BTreeSet<u32> = (0..spec.known_classes as u32).collect();
    label_split(&mut rng, [&pools.a, &pools.b], &known, &spec.labeling)
}
