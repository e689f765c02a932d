//! The outer loop: pseudo-label both domains in the current mapped space,
//! re-fit the dual mapping on given plus confident pseudo-labels, repeat
//! until the pseudo-labels stop changing, then label every unlabeled sample
//! with a classifier trained on the mapped labeled sets only.

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, ProbabilisticClassifier};
use crate::domain::{
    check_pair, ClassKey, DomainDataset, DomainId, Hyperparams, TransformPair, WorkingLabels,
};
use crate::error::{CdaError, Result};
use crate::losses::LossBreakdown;
use crate::optimizer::{minimize, SolverSettings, SolverTrace, Termination};
use crate::pseudo_label::{assign, PseudoLabelReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub max_outer_iterations: usize,
    /// Stop once this fraction of pseudo-labels is unchanged from the previous iteration.
    pub agreement_threshold: f64,
    pub classifier: ClassifierConfig,
    pub solver: SolverSettings,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            max_outer_iterations: 10,
            agreement_threshold: 0.99,
            classifier: ClassifierConfig::default(),
            solver: SolverSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based outer iteration.
    pub iteration: usize,
    /// Pseudo-label agreement with the previous iteration.
    pub agreement: Option<f64>,
    pub outlier_fraction: f64,
    pub entropy_threshold: f64,
    pub guard_applied: bool,
    /// Solver result; absent on the iteration that met the stopping rule.
    pub loss: Option<LossBreakdown>,
    pub solver_steps: usize,
    pub termination: Option<Termination>,
    /// No accepted step raised the objective within a neighbor epoch.
    pub monotone: Option<bool>,
}

/// State of the loop after its last iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineState {
    pub iteration: usize,
    pub transforms: TransformPair,
    pub labels: (WorkingLabels, WorkingLabels),
    pub history: Vec<IterationRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub domain: DomainId,
    pub index: usize,
    pub class: ClassKey,
}

/// Final label of every unlabeled sample, A first, each domain in row order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub entries: Vec<Prediction>,
}

impl PredictionResult {
    pub fn classes(&self) -> Vec<ClassKey> {
        self.entries.iter().map(|p| p.class).collect()
    }

    pub fn for_domain(&self, domain: DomainId) -> Vec<ClassKey> {
        self.entries
            .iter()
            .filter(|p| p.domain == domain)
            .map(|p| p.class)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub transforms: TransformPair,
    pub predictions: PredictionResult,
    pub state: PipelineState,
    pub converged: bool,
    pub last_report: Option<PseudoLabelReport>,
    pub last_trace: Option<SolverTrace>,
}

impl PipelineOutcome {
    pub fn history(&self) -> &[IterationRecord] {
        &self.state.history
    }
}

/// Mapped labeled rows of both domains with their class keys.
pub fn labeled_training_set(
    a: &DomainDataset,
    b: &DomainDataset,
    t: &TransformPair,
) -> Result<(Array2<f64>, Vec<ClassKey>)> {
    let mut blocks = Vec::new();
    let mut keys = Vec::new();
    for ds in [a, b] {
        let idx = ds.labeled_indices();
        blocks.push(ds.select_rows(&idx).dot(t.get(ds.domain())));
        keys.extend(idx.iter().filter_map(|&i| ds.labels()[i].class_key()));
    }
    let views: Vec<_> = blocks.iter().map(|m| m.view()).collect();
    let x = concatenate(Axis(0), &views).map_err(|e| CdaError::Invalid(e.to_string()))?;
    Ok((x, keys))
}

fn fit_on_labeled(
    config: &ClassifierConfig,
    a: &DomainDataset,
    b: &DomainDataset,
    t: &TransformPair,
) -> Result<Box<dyn ProbabilisticClassifier>> {
    let (x, y) = labeled_training_set(a, b, t)?;
    config.fit(x.view(), &y)
}

/// Classifier trained on the mapped labeled sets, applied to every mapped
/// unlabeled sample.
pub fn predict_unlabeled(
    config: &ClassifierConfig,
    a: &DomainDataset,
    b: &DomainDataset,
    t: &TransformPair,
) -> Result<PredictionResult> {
    let clf = fit_on_labeled(config, a, b, t)?;
    let mut entries = Vec::new();
    for ds in [a, b] {
        let idx = ds.unlabeled_indices();
        if idx.is_empty() {
            continue;
        }
        let z = ds.select_rows(&idx).dot(t.get(ds.domain()));
        for (i, class) in idx.into_iter().zip(clf.predict(z.view())?) {
            entries.push(Prediction {
                domain: ds.domain(),
                index: i,
                class,
            });
        }
    }
    Ok(PredictionResult { entries })
}

/// The no-adaptation reference: identity maps, classifier on the pooled labeled sets.
pub fn no_adaptation(
    config: &ClassifierConfig,
    a: &DomainDataset,
    b: &DomainDataset,
) -> Result<PredictionResult> {
    check_pair(a, b)?;
    predict_unlabeled(config, a, b, &TransformPair::identity(a.dim()))
}

fn agreement(prev: &[ClassKey], cur: &[ClassKey]) -> f64 {
    if cur.is_empty() {
        return 1.0;
    }
    let same = prev.iter().zip(cur).filter(|(p, c)| p == c).count();
    same as f64 / cur.len() as f64
}

pub fn run(
    a: &DomainDataset,
    b: &DomainDataset,
    h: &Hyperparams,
    settings: &PipelineSettings,
) -> Result<PipelineOutcome> {
    check_pair(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(CdaError::Invalid("both domains must be non-empty".to_string()));
    }
    if a.domain() == b.domain() {
        return Err(CdaError::Invalid(
            "the two datasets must belong to different domains".to_string(),
        ));
    }
    h.validate()?;
    settings.solver.validate()?;
    if !(0.0..=1.0).contains(&settings.agreement_threshold) {
        return Err(CdaError::Parameter(format!(
            "agreement_threshold must lie in [0, 1], got {}",
            settings.agreement_threshold
        )));
    }

    let mut state = PipelineState {
        iteration: 0,
        transforms: TransformPair::identity(a.dim()),
        labels: (WorkingLabels::from_given(a), WorkingLabels::from_given(b)),
        history: Vec::new(),
    };
    let mut prev: Option<Vec<ClassKey>> = None;
    let mut converged = false;
    let mut last_report = None;
    let mut last_trace = None;

    for iteration in 1..=settings.max_outer_iterations {
        let step = || -> Result<_> {
            let clf = fit_on_labeled(&settings.classifier, a, b, &state.transforms)?;
            assign(clf.as_ref(), a, b, &state.transforms)
        };
        let report = step().map_err(|e| fail(iteration, &state, e))?;
        let current = report.predictions();
        let agree = prev.as_deref().map(|p| agreement(p, &current));
        let mut record = IterationRecord {
            iteration,
            agreement: agree,
            outlier_fraction: report.outlier_fraction(),
            entropy_threshold: report.threshold,
            guard_applied: report.guard_applied,
            loss: None,
            solver_steps: 0,
            termination: None,
            monotone: None,
        };
        state.iteration = iteration;
        if agree.is_some_and(|v| v >= settings.agreement_threshold) {
            converged = true;
            state.history.push(record);
            last_report = Some(report);
            break;
        }

        let labels = report
            .working_labels(a, b)
            .map_err(|e| fail(iteration, &state, e))?;
        let (t, trace) = minimize(
            a,
            b,
            (&labels.0, &labels.1),
            h,
            &state.transforms,
            &settings.solver,
        )
        .map_err(|e| fail(iteration, &state, e))?;
        record.loss = Some(trace.final_loss);
        record.solver_steps = trace.accepted_steps();
        record.termination = Some(trace.termination);
        record.monotone = Some(trace.is_monotone_within_epochs());
        log::info!(
            "iteration {iteration}: f = {:.6e}, agreement = {}, outliers = {:.3}",
            trace.final_loss.total,
            agree.map_or("-".to_string(), |v| format!("{v:.4}")),
            report.outlier_fraction()
        );
        state.transforms = t;
        state.labels = labels;
        state.history.push(record);
        prev = Some(current);
        last_report = Some(report);
        last_trace = Some(trace);
    }

    let predictions = predict_unlabeled(&settings.classifier, a, b, &state.transforms)
        .map_err(|e| fail(state.iteration, &state, e))?;
    Ok(PipelineOutcome {
        transforms: state.transforms.clone(),
        predictions,
        state,
        converged,
        last_report,
        last_trace,
    })
}

fn fail(iteration: usize, state: &PipelineState, source: CdaError) -> CdaError {
    CdaError::Pipeline {
        iteration,
        history: state.history.clone(),
        source: Box::new(source),
    }
}
