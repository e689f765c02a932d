//! Central finite-difference check of every loss term's analytic gradient
//! on random instances.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{
    ClassKey, DomainDataset, DomainId, Hyperparams, LabelState, TransformPair, WorkingLabels,
};
use crate::error::{CdaError, Result};
use crate::losses::{GradientPair, NeighborAssignment, Objective, Term};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// A random loss instance with frozen labels and transforms.
#[derive(Clone, Debug)]
pub struct Instance {
    pub a: DomainDataset,
    pub b: DomainDataset,
    pub labels: (WorkingLabels, WorkingLabels),
    pub transforms: TransformPair,
}

impl Instance {
    pub fn objective(&self) -> Result<Objective<'_>> {
        Objective::new(&self.a, &self.b, &self.labels.0, &self.labels.1)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// `n` samples per domain over three known classes plus unknowns; every
/// domain gets at least one known and one unknown sample and a few excluded.
pub fn random_instance(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Result<Instance> {
    if d == 0 || n < 3 {
        return Err(CdaError::Parameter(
            "gradcheck instances need d >= 1 and n >= 3".to_string(),
        ));
    }
    let known: BTreeSet<u32> = (0..3).collect();
    let mut make = |domain: DomainId| -> Result<(DomainDataset, WorkingLabels)> {
        let mut keys = Vec::with_capacity(n);
        for i in 0..n {
            let key = match i {
                0 => Some(ClassKey::Known(0)),
                1 => Some(ClassKey::Unknown),
                _ => match rng.random_range(0..6u32) {
                    c @ 0..=2 => Some(ClassKey::Known(c)),
                    3 | 4 => Some(ClassKey::Unknown),
                    _ => None,
                },
            };
            keys.push(key);
        }
        let features = gaussian_matrix(rng, n, d) * 2.0;
        let ds = DomainDataset::new(
            domain,
            crate::domain::default_ids(domain, n),
            features,
            vec![LabelState::Unlabeled; n],
            known.clone(),
        )?;
        Ok((ds, WorkingLabels::from_keys(&keys)))
    };
    let (a, la) = make(DomainId::A)?;
    let (b, lb) = make(DomainId::B)?;
    let eye = Array2::<f64>::eye(d);
    let transforms = TransformPair::new(
        &eye + &(gaussian_matrix(rng, d, d) * 0.3),
        &eye + &(gaussian_matrix(rng, d, d) * 0.3),
    )?;
    Ok(Instance {
        a,
        b,
        labels: (la, lb),
        transforms,
    })
}

/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central differences of one term with the neighbor assignment held fixed.
pub fn numeric_gradient(
    objective: &Objective<'_>,
    term: Term,
    t: &TransformPair,
    h: &Hyperparams,
    nbr: &NeighborAssignment,
) -> Result<GradientPair> {
    let d = objective.dim();
    let mut out = GradientPair::zeros(d);
    for which in [DomainId::A, DomainId::B] {
        for i in 0..d {
            for j in 0..d {
                let mut plus = t.clone();
                let mut minus = t.clone();
                match which {
                    DomainId::A => {
                        plus.a[[i, j]] += FD_STEP;
                        minus.a[[i, j]] -= FD_STEP;
                    }
                    DomainId::B => {
                        plus.b[[i, j]] += FD_STEP;
                        minus.b[[i, j]] -= FD_STEP;
                    }
                }
                let fp = objective.term_value(term, &plus, h, nbr)?;
                let fm = objective.term_value(term, &minus, h, nbr)?;
                let g = (fp - fm) / (2.0 * FD_STEP);
                match which {
                    DomainId::A => out.a[[i, j]] = g,
                    DomainId::B => out.b[[i, j]] = g,
                }
            }
        }
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &GradientPair, numeric: &GradientPair) -> f64 {
    analytic
        .a
        .iter()
        .zip(numeric.a.iter())
        .chain(analytic.b.iter().zip(numeric.b.iter()))
        .map(|(x, y)| relative_error(*x, *y))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermError {
    pub term: String,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub instances: usize,
    pub errors: Vec<TermError>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn error(&self, term: Term) -> Option<f64> {
        let name = term.to_string();
        self.errors
            .iter()
            .find(|e| e.term == name)
            .map(|e| e.max_relative_error)
    }
}

/// Worst relative error per term over `instances` random instances.
pub fn run(d: usize, n: usize, seed: u64, instances: usize) -> Result<GradcheckReport> {
    if d > 16 || n > 100 {
        return Err(CdaError::Parameter(format!(
            "gradcheck is limited to d <= 16 and n <= 100, got d = {d}, n = {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Hyperparams::default();
    let mut worst = [0.0f64; Term::ALL.len()];
    for _ in 0..instances {
        let inst = random_instance(&mut rng, d, n)?;
        let objective = inst.objective()?;
        let nbr = objective.assign_neighbors(&inst.transforms)?;
        for (k, term) in Term::ALL.into_iter().enumerate() {
            let analytic = objective.term_gradient(term, &inst.transforms, &h, &nbr)?;
            let numeric = numeric_gradient(&objective, term, &inst.transforms, &h, &nbr)?;
            worst[k] = worst[k].max(max_relative_error(&analytic, &numeric));
        }
    }
    let errors: Vec<TermError> = Term::ALL
        .into_iter()
        .zip(worst)
        .map(|(term, e)| TermError {
            term: term.to_string(),
            max_relative_error: e,
        })
        .collect();
    let passed = worst.iter().all(|e| *e < TOLERANCE);
    Ok(GradcheckReport {
        d,
        n,
        seed,
        instances,
        errors,
        passed,
    })
}
