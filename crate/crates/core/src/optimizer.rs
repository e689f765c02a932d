//! Joint gradient descent over `(W_A, W_B)` with Armijo backtracking and a
//! periodic refresh of the nearest-unknown neighbor assignment.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{DomainDataset, Hyperparams, TransformPair, WorkingLabels};
use crate::error::{CdaError, Result};
use crate::losses::{GradientPair, LossBreakdown, NeighborAssignment, Objective, Term};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub initial_step: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    /// Each line search starts from the last accepted step times this factor.
    pub step_growth: f64,
    pub max_steps: usize,
    /// Stopping threshold on the gradient norm, multiplied by `d`.
    pub gradient_tolerance: f64,
    pub refresh_period: usize,
    pub max_backtracks: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            initial_step: 1e-2,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            step_growth: 2.0,
            max_steps: 200,
            gradient_tolerance: 1e-6,
            refresh_period: 10,
            max_backtracks: 60,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(CdaError::Parameter(format!(
                "shrink factor must lie in (0, 1), got {}",
                self.shrink
            )));
        }
        let positive = [
            ("initial_step", self.initial_step),
            ("sufficient_decrease", self.sufficient_decrease),
            ("gradient_tolerance", self.gradient_tolerance),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(CdaError::Parameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.sufficient_decrease >= 1.0 {
            return Err(CdaError::Parameter(
                "sufficient_decrease must be < 1".to_string(),
            ));
        }
        if !(self.step_growth.is_finite() && self.step_growth >= 1.0) {
            return Err(CdaError::Parameter(format!(
                "step_growth must be >= 1, got {}",
                self.step_growth
            )));
        }
        if self.refresh_period == 0 {
            return Err(CdaError::Parameter(
                "refresh_period must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    BudgetExhausted,
    /// Backtracking could not find a decreasing step.
    Stalled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of accepted steps taken when this point was evaluated.
    pub step: usize,
    /// Neighbor epoch; bumped on each refresh.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Step that produced this point; zero for the initial point and refreshes.
    pub step_size: f64,
    pub refreshed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub records: Vec<StepRecord>,
    pub termination: Termination,
    /// Loss at the returned transforms under a freshly computed assignment.
    pub final_loss: LossBreakdown,
    pub diverged: bool,
}

impl SolverTrace {
    pub fn accepted_steps(&self) -> usize {
        self.records.last().map_or(0, |r| r.step)
    }

    /// True when no accepted step increased the objective within an epoch.
    pub fn is_monotone_within_epochs(&self) -> bool {
        self.records.windows(2).all(|w| {
            w[0].epoch != w[1].epoch || w[1].loss.total <= w[0].loss.total
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "step", "f", "dist_C", "dist_M", "G", "U", "reg", "grad_norm", "step_size", "refreshed",
        ])?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                format!("{:e}", r.loss.total),
                format!("{:e}", r.loss.dist_c),
                format!("{:e}", r.loss.dist_m),
                format!("{:e}", r.loss.g),
                format!("{:e}", r.loss.u),
                format!("{:e}", r.loss.reg),
                format!("{:e}", r.grad_norm),
                format!("{:e}", r.step_size),
                (r.refreshed as u8).to_string(),
            ])?;
        }
        w.flush()
    }
}

fn check_finite(loss: &LossBreakdown) -> Result<()> {
    for term in Term::ALL {
        if !loss.component(term).is_finite() {
            return Err(CdaError::NonFinite { term, what: "value" });
        }
    }
    Ok(())
}

fn step_from(t: &TransformPair, g: &GradientPair, alpha: f64) -> TransformPair {
    let mut next = t.clone();
    next.a.scaled_add(-alpha, &g.a);
    next.b.scaled_add(-alpha, &g.b);
    next
}

pub fn minimize(
    a: &DomainDataset,
    b: &DomainDataset,
    labels: (&WorkingLabels, &WorkingLabels),
    h: &Hyperparams,
    init: &TransformPair,
    settings: &SolverSettings,
) -> Result<(TransformPair, SolverTrace)> {
    let objective = Objective::new(a, b, labels.0, labels.1)?;
    minimize_objective(&objective, h, init, settings)
}

pub fn minimize_objective(
    objective: &Objective<'_>,
    h: &Hyperparams,
    init: &TransformPair,
    settings: &SolverSettings,
) -> Result<(TransformPair, SolverTrace)> {
    h.validate()?;
    settings.validate()?;
    let d = objective.dim();
    init.validate(d)?;
    let tol = settings.gradient_tolerance * d as f64;

    let mut t = init.clone();
    let mut nbr: NeighborAssignment = objective.assign_neighbors(&t)?;
    let mut loss = objective.breakdown(&t, h, &nbr)?;
    check_finite(&loss)?;
    let mut grad = objective.gradient(&t, h, &nbr)?;
    let mut epoch = 0;
    let mut records = vec![StepRecord {
        step: 0,
        epoch,
        loss,
        grad_norm: grad.norm(),
        step_size: 0.0,
        refreshed: false,
    }];

    let mut alpha = settings.initial_step / settings.step_growth;
    let mut termination = Termination::BudgetExhausted;
    let mut steps = 0;
    while steps < settings.max_steps {
        if steps > 0 && steps % settings.refresh_period == 0 && records.last().is_some_and(|r| !r.refreshed) {
            let fresh = objective.assign_neighbors(&t)?;
            if fresh != nbr {
                nbr = fresh;
                let before = loss.total;
                loss = objective.breakdown(&t, h, &nbr)?;
                check_finite(&loss)?;
                grad = objective.gradient(&t, h, &nbr)?;
                epoch += 1;
                log::debug!(
                    "neighbor refresh at step {steps}: f {before:.6e} -> {:.6e}",
                    loss.total
                );
                records.push(StepRecord {
                    step: steps,
                    epoch,
                    loss,
                    grad_norm: grad.norm(),
                    step_size: 0.0,
                    refreshed: true,
                });
            }
        }

        let gnorm2 = grad.a.iter().chain(grad.b.iter()).map(|v| v * v).sum::<f64>();
        if gnorm2.sqrt() <= tol {
            termination = Termination::Converged;
            break;
        }

        alpha *= settings.step_growth;
        let mut accepted = None;
        for _ in 0..=settings.max_backtracks {
            let candidate = step_from(&t, &grad, alpha);
            let cand_loss = objective.breakdown(&candidate, h, &nbr)?;
            if cand_loss.total.is_finite()
                && cand_loss.total <= loss.total - settings.sufficient_decrease * alpha * gnorm2
            {
                accepted = Some((candidate, cand_loss));
                break;
            }
            alpha *= settings.shrink;
        }
        let Some((next, next_loss)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        check_finite(&next_loss)?;
        t = next;
        loss = next_loss;
        grad = objective.gradient(&t, h, &nbr)?;
        steps += 1;
        records.push(StepRecord {
            step: steps,
            epoch,
            loss,
            grad_norm: grad.norm(),
            step_size: alpha,
            refreshed: false,
        });
    }

    let final_nbr = objective.assign_neighbors(&t)?;
    let final_loss = objective.breakdown(&t, h, &final_nbr)?;
    let deviation = deviation_from_identity(&t);
    let diverged = deviation > 10.0 * d as f64;
    if diverged {
        log::warn!("solver output deviates from identity by {deviation:.3e}; likely divergence");
    }
    Ok((
        t,
        SolverTrace {
            records,
            termination,
            final_loss,
            diverged,
        },
    ))
}

/// `max(‖W_A − I‖_F, ‖W_B − I‖_F)`.
pub fn deviation_from_identity(t: &TransformPair) -> f64 {
    let dev = |w: &ndarray::Array2<f64>| {
        w.indexed_iter()
            .map(|((i, j), v)| {
                let e = if i == j { v - 1.0 } else { *v };
                e * e
            })
            .sum::<f64>()
            .sqrt()
    };
    dev(&t.a).max(dev(&t.b))
}
