//! Loss terms of the dual-mapping objective and their analytic gradients.
//!
//! Every term is evaluated for fixed working labels. The known-unknown
//! separation term additionally takes a fixed [`NeighborAssignment`]; its
//! gradient treats the hinge active set and the neighbor identities as
//! constants, giving the active-side subgradient (zero exactly at a kink).

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::{
    check_pair, class_centers, ClassCenter, ClassKey, DomainDataset, DomainId, Hyperparams,
    TransformPair, WorkingLabels,
};
use crate::error::{CdaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    DistC,
    DistM,
    Aggregation,
    Unknown,
    Reg,
}

impl Term {
    pub const ALL: [Term; 5] = [
        Term::DistC,
        Term::DistM,
        Term::Aggregation,
        Term::Unknown,
        Term::Reg,
    ];

    pub fn weight(self, h: &Hyperparams) -> f64 {
        match self {
            Term::DistC => h.lambda_c,
            Term::DistM => h.lambda_m,
            Term::Aggregation => h.lambda_g,
            Term::Unknown => h.lambda_u,
            Term::Reg => h.lambda_r,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Term::DistC => "dist_C",
            Term::DistM => "dist_M",
            Term::Aggregation => "G",
            Term::Unknown => "U",
            Term::Reg => "reg",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub domain: DomainId,
    pub index: usize,
}

/// Nearest unknown-class sample, over both domains, of every known-class sample.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborAssignment {
    a: Vec<Option<SampleRef>>,
    b: Vec<Option<SampleRef>>,
}

impl NeighborAssignment {
    pub fn from_parts(a: Vec<Option<SampleRef>>, b: Vec<Option<SampleRef>>) -> Self {
        Self { a, b }
    }

    pub fn get(&self, domain: DomainId, index: usize) -> Option<SampleRef> {
        let v = match domain {
            DomainId::A => &self.a,
            DomainId::B => &self.b,
        };
        v.get(index).copied().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.a.iter().chain(&self.b).all(Option::is_none)
    }

    pub fn len(&self) -> usize {
        self.a.iter().chain(&self.b).filter(|n| n.is_some()).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dist_c: f64,
    pub dist_m: f64,
    pub g: f64,
    pub u: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(dist_c: f64, dist_m: f64, g: f64, u: f64, reg: f64, h: &Hyperparams) -> Self {
        let total = h.lambda_c * dist_c
            + h.lambda_m * dist_m
            + h.lambda_g * g
            + h.lambda_u * u
            + h.lambda_r * reg;
        Self {
            dist_c,
            dist_m,
            g,
            u,
            reg,
            total,
        }
    }

    pub fn component(&self, term: Term) -> f64 {
        match term {
            Term::DistC => self.dist_c,
            Term::DistM => self.dist_m,
            Term::Aggregation => self.g,
            Term::Unknown => self.u,
            Term::Reg => self.reg,
        }
    }
}

/// Partial derivatives of a scalar with respect to `W_A` and `W_B`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl GradientPair {
    pub fn zeros(d: usize) -> Self {
        Self {
            a: Array2::zeros((d, d)),
            b: Array2::zeros((d, d)),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.a.iter().chain(self.b.iter()).map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &GradientPair) {
        self.a.scaled_add(alpha, &other.a);
        self.b.scaled_add(alpha, &other.b);
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
struct DomainStats {
    domain: DomainId,
    known_mean: Option<Array1<f64>>,
    centers: BTreeMap<ClassKey, ClassCenter>,
    /// Rows `(x - center) / sqrt(n_c)` over every non-excluded sample.
    scatter_rows: Array2<f64>,
    /// Indices of non-excluded known-class samples.
    known: Vec<usize>,
    /// Rows `x - center` aligned with `known`.
    known_offsets: Array2<f64>,
    /// Indices of non-excluded unknown-class samples.
    unknown: Vec<usize>,
}

impl DomainStats {
    fn new(dataset: &DomainDataset, labels: &WorkingLabels) -> Result<Self> {
        let x = dataset.features();
        let d = dataset.dim();
        let centers = class_centers(x.view(), labels)?;

        let mut known = Vec::new();
        let mut unknown = Vec::new();
        let mut scatter = Vec::new();
        let mut offsets = Vec::new();
        let mut known_sum = Array1::<f64>::zeros(d);
        for i in 0..dataset.len() {
            let Some(key) = labels.class_key(i) else { continue };
            let c = &centers[&key];
            let scale = 1.0 / (c.count as f64).sqrt();
            let row = x.row(i);
            for (v, m) in row.iter().zip(c.center.iter()) {
                scatter.push((v - m) * scale);
            }
            match key {
                ClassKey::Known(_) => {
                    known.push(i);
                    known_sum += &row;
                    offsets.extend(row.iter().zip(c.center.iter()).map(|(v, m)| v - m));
                }
                ClassKey::Unknown => unknown.push(i),
            }
        }
        let rows = scatter.len() / d.max(1);
        let scatter_rows = Array2::from_shape_vec((rows, d), scatter)
            .map_err(|e| CdaError::Invalid(e.to_string()))?;
        let known_offsets = Array2::from_shape_vec((known.len(), d), offsets)
            .map_err(|e| CdaError::Invalid(e.to_string()))?;
        let known_mean = (!known.is_empty()).then(|| known_sum / known.len() as f64);
        Ok(Self {
            domain: dataset.domain(),
            known_mean,
            centers,
            scatter_rows,
            known,
            known_offsets,
            unknown,
        })
    }
}

/// A loss instance: both domains with their working labels frozen, with the
/// label-dependent statistics precomputed.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    a: &'a DomainDataset,
    b: &'a DomainDataset,
    stats: [DomainStats; 2],
    shared_classes: Vec<u32>,
    shared_a: Array2<f64>,
    shared_b: Array2<f64>,
}

fn slot(domain: DomainId) -> usize {
    match domain {
        DomainId::A => 0,
        DomainId::B => 1,
    }
}

impl<'a> Objective<'a> {
    pub fn new(
        a: &'a DomainDataset,
        b: &'a DomainDataset,
        labels_a: &WorkingLabels,
        labels_b: &WorkingLabels,
    ) -> Result<Self> {
        check_pair(a, b)?;
        if a.domain() == b.domain() {
            return Err(CdaError::Invalid(
                "the two datasets must belong to different domains".to_string(),
            ));
        }
        let (a, b, labels_a, labels_b) = if a.domain() == DomainId::A {
            (a, b, labels_a, labels_b)
        } else {
            (b, a, labels_b, labels_a)
        };
        for (ds, labels) in [(a, labels_a), (b, labels_b)] {
            if labels.len() != ds.len() {
                return Err(CdaError::Dimension {
                    context: "working labels",
                    expected: ds.len(),
                    found: labels.len(),
                });
            }
        }
        let sa = DomainStats::new(a, labels_a)?;
        let sb = DomainStats::new(b, labels_b)?;

        let d = a.dim();
        let shared_classes: Vec<u32> = sa
            .centers
            .keys()
            .filter_map(|k| match k {
                ClassKey::Known(c) if sb.centers.contains_key(k) => Some(*c),
                _ => None,
            })
            .collect();
        let m = shared_classes.len();
        let mut shared_a = Array2::zeros((m, d));
        let mut shared_b = Array2::zeros((m, d));
        for (r, c) in shared_classes.iter().enumerate() {
            shared_a
                .row_mut(r)
                .assign(&sa.centers[&ClassKey::Known(*c)].center);
            shared_b
                .row_mut(r)
                .assign(&sb.centers[&ClassKey::Known(*c)].center);
        }
        Ok(Self {
            a,
            b,
            stats: [sa, sb],
            shared_classes,
            shared_a,
            shared_b,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    fn dataset(&self, domain: DomainId) -> &'a DomainDataset {
        match domain {
            DomainId::A => self.a,
            DomainId::B => self.b,
        }
    }

    fn stats(&self, domain: DomainId) -> &DomainStats {
        &self.stats[slot(domain)]
    }

    /// Known classes with surviving samples in both domains.
    pub fn shared_classes(&self) -> &[u32] {
        &self.shared_classes
    }

    pub fn known_count(&self, domain: DomainId) -> usize {
        self.stats(domain).known.len()
    }

    pub fn unknown_count(&self, domain: DomainId) -> usize {
        self.stats(domain).unknown.len()
    }

    fn check(&self, t: &TransformPair) -> Result<()> {
        t.validate(self.dim())
    }

    fn known_means(&self) -> Result<(&Array1<f64>, &Array1<f64>)> {
        fn get(s: &DomainStats) -> Result<&Array1<f64>> {
            s.known_mean.as_ref().ok_or(CdaError::EmptyPopulation {
                domain: s.domain,
                context: "marginal alignment",
            })
        }
        Ok((get(&self.stats[0])?, get(&self.stats[1])?))
    }

    fn marginal_residual(&self, t: &TransformPair) -> Result<(Array1<f64>, &Array1<f64>, &Array1<f64>)> {
        let (pa, pb) = self.known_means()?;
        let r = pa.dot(&t.a) - pb.dot(&t.b);
        Ok((r, pa, pb))
    }

    /// `½‖P_A W_A − P_B W_B‖²` over the known-class means.
    pub fn dist_marginal(&self, t: &TransformPair) -> Result<f64> {
        self.check(t)?;
        let (r, _, _) = self.marginal_residual(t)?;
        Ok(0.5 * sq_norm(r.view()))
    }

    fn conditional_residual(&self, t: &TransformPair) -> Array2<f64> {
        self.shared_a.dot(&t.a) - self.shared_b.dot(&t.b)
    }

    /// `½ Σ_c ‖P_A^c W_A − P_B^c W_B‖²` over classes present in both domains.
    pub fn dist_conditional(&self, t: &TransformPair) -> Result<f64> {
        self.check(t)?;
        Ok(self.dist_conditional_unchecked(t))
    }

    fn dist_conditional_unchecked(&self, t: &TransformPair) -> f64 {
        if self.shared_classes.is_empty() {
            log::warn!("no known class is present in both domains; conditional alignment is vacuous");
            return 0.0;
        }
        let r = self.conditional_residual(t);
        0.5 * r.iter().map(|v| v * v).sum::<f64>()
    }

    /// `½(G_A + G_B)`, within-class spread in the mapped space over every
    /// class including the unknown class.
    pub fn aggregation(&self, t: &TransformPair) -> Result<f64> {
        self.check(t)?;
        Ok(self.aggregation_unchecked(t))
    }

    fn aggregation_unchecked(&self, t: &TransformPair) -> f64 {
        let ga = self.stats[0].scatter_rows.dot(&t.a);
        let gb = self.stats[1].scatter_rows.dot(&t.b);
        0.5 * (ga.iter().map(|v| v * v).sum::<f64>() + gb.iter().map(|v| v * v).sum::<f64>())
    }

    /// Exhaustive nearest unknown-class neighbor in the mapped space. Ties go
    /// to the lowest (domain, index).
    pub fn assign_neighbors(&self, t: &TransformPair) -> Result<NeighborAssignment> {
        self.check(t)?;
        let za = self.a.features().dot(&t.a);
        let zb = self.b.features().dot(&t.b);
        let z = [&za, &zb];
        let candidates: Vec<(DomainId, usize)> = [DomainId::A, DomainId::B]
            .into_iter()
            .flat_map(|dom| self.stats(dom).unknown.iter().map(move |&j| (dom, j)))
            .collect();
        let mut out = [vec![None; self.a.len()], vec![None; self.b.len()]];
        if candidates.is_empty() {
            return Ok(NeighborAssignment::from_parts(
                std::mem::take(&mut out[0]),
                std::mem::take(&mut out[1]),
            ));
        }
        for dom in [DomainId::A, DomainId::B] {
            let zd = z[slot(dom)];
            for &i in &self.stats(dom).known {
                let zi = zd.row(i);
                let mut best = f64::INFINITY;
                let mut best_ref = None;
                for &(cd, j) in &candidates {
                    let zj = z[slot(cd)].row(j);
                    let dist: f64 = zi.iter().zip(zj.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
                    if dist < best {
                        best = dist;
                        best_ref = Some(SampleRef { domain: cd, index: j });
                    }
                }
                out[slot(dom)][i] = best_ref;
            }
        }
        let [a, b] = out;
        Ok(NeighborAssignment::from_parts(a, b))
    }

    /// Known-unknown separation `½(U_A + U_B)` with hinge margin `margin`.
    /// A domain without surviving unknown-class samples contributes zero.
    pub fn unknown_separation(&self, t: &TransformPair, nbr: &NeighborAssignment, margin: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.unknown_pass(t, nbr, margin, false)?.0)
    }

    fn resolve_neighbor(&self, nbr: &NeighborAssignment, dom: DomainId, i: usize) -> Result<SampleRef> {
        let n = nbr.get(dom, i).ok_or_else(|| {
            CdaError::Contract(format!(
                "no nearest-unknown neighbor recorded for known sample {} of domain {dom}",
                self.dataset(dom).ids()[i]
            ))
        })?;
        if self.stats(n.domain).unknown.binary_search(&n.index).is_err() {
            return Err(CdaError::Contract(format!(
                "neighbor {}:{} of sample {} is not a surviving unknown-class sample",
                n.domain,
                n.index,
                self.dataset(dom).ids()[i]
            )));
        }
        Ok(n)
    }

    fn unknown_pass(
        &self,
        t: &TransformPair,
        nbr: &NeighborAssignment,
        margin: f64,
        with_grad: bool,
    ) -> Result<(f64, Option<GradientPair>)> {
        let d = self.dim();
        let za = self.a.features().dot(&t.a);
        let zb = self.b.features().dot(&t.b);
        let z = [&za, &zb];
        let x = [self.a.features(), self.b.features()];
        // Accumulated as Σ lᵀ r per domain.
        let mut left: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut right: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut total = [0.0f64; 2];

        for dom in [DomainId::A, DomainId::B] {
            let s = self.stats(dom);
            if s.unknown.is_empty() || s.known.is_empty() {
                continue;
            }
            let projected = s.known_offsets.dot(t.get(dom));
            let sd = slot(dom);
            for (k, &i) in s.known.iter().enumerate() {
                let n = self.resolve_neighbor(nbr, dom, i)?;
                let sn = slot(n.domain);
                let m = projected.row(k);
                let r: Array1<f64> = &z[sd].row(i) - &z[sn].row(n.index);
                let hinge = margin + sq_norm(m) - sq_norm(r.view());
                if hinge <= 0.0 {
                    continue;
                }
                total[sd] += hinge;
                if with_grad {
                    left[sd].extend(s.known_offsets.row(k).iter());
                    right[sd].extend(m.iter());
                    left[sd].extend(x[sd].row(i).iter());
                    right[sd].extend(r.iter().map(|v| -v));
                    left[sn].extend(x[sn].row(n.index).iter());
                    right[sn].extend(r.iter());
                }
            }
        }
        let value = 0.5 * (total[0] + total[1]);
        if !with_grad {
            return Ok((value, None));
        }
        let mut grad = GradientPair::zeros(d);
        for (sd, g) in [(0usize, &mut grad.a), (1usize, &mut grad.b)] {
            let rows = left[sd].len() / d.max(1);
            if rows == 0 {
                continue;
            }
            let l = Array2::from_shape_vec((rows, d), std::mem::take(&mut left[sd]))
                .map_err(|e| CdaError::Invalid(e.to_string()))?;
            let r = Array2::from_shape_vec((rows, d), std::mem::take(&mut right[sd]))
                .map_err(|e| CdaError::Invalid(e.to_string()))?;
            *g = l.t().dot(&r);
        }
        Ok((value, Some(grad)))
    }

    pub fn regularizer(&self, t: &TransformPair) -> Result<f64> {
        self.check(t)?;
        Ok(regularizer_value(t))
    }

    /// Every component and the weighted total.
    pub fn breakdown(&self, t: &TransformPair, h: &Hyperparams, nbr: &NeighborAssignment) -> Result<LossBreakdown> {
        self.check(t)?;
        let dist_c = self.dist_conditional_unchecked(t);
        let dist_m = 0.5 * sq_norm(self.marginal_residual(t)?.0.view());
        let g = self.aggregation_unchecked(t);
        let u = self.unknown_pass(t, nbr, h.margin, false)?.0;
        let reg = regularizer_value(t);
        Ok(LossBreakdown::from_components(dist_c, dist_m, g, u, reg, h))
    }

    pub fn term_value(&self, term: Term, t: &TransformPair, h: &Hyperparams, nbr: &NeighborAssignment) -> Result<f64> {
        match term {
            Term::DistC => self.dist_conditional(t),
            Term::DistM => self.dist_marginal(t),
            Term::Aggregation => self.aggregation(t),
            Term::Unknown => self.unknown_separation(t, nbr, h.margin),
            Term::Reg => self.regularizer(t),
        }
    }

    /// Unweighted gradient of one component.
    pub fn term_gradient(
        &self,
        term: Term,
        t: &TransformPair,
        h: &Hyperparams,
        nbr: &NeighborAssignment,
    ) -> Result<GradientPair> {
        self.check(t)?;
        let d = self.dim();
        Ok(match term {
            Term::DistC => {
                if self.shared_classes.is_empty() {
                    GradientPair::zeros(d)
                } else {
                    let r = self.conditional_residual(t);
                    GradientPair {
                        a: self.shared_a.t().dot(&r),
                        b: -self.shared_b.t().dot(&r),
                    }
                }
            }
            Term::DistM => {
                let (r, pa, pb) = self.marginal_residual(t)?;
                GradientPair {
                    a: outer(pa.view(), r.view()),
                    b: -outer(pb.view(), r.view()),
                }
            }
            Term::Aggregation => {
                let sa = &self.stats[0].scatter_rows;
                let sb = &self.stats[1].scatter_rows;
                GradientPair {
                    a: sa.t().dot(&sa.dot(&t.a)),
                    b: sb.t().dot(&sb.dot(&t.b)),
                }
            }
            Term::Unknown => self
                .unknown_pass(t, nbr, h.margin, true)?
                .1
                .unwrap_or_else(|| GradientPair::zeros(d)),
            Term::Reg => GradientPair {
                a: &t.a - &Array2::<f64>::eye(d),
                b: &t.b - &Array2::<f64>::eye(d),
            },
        })
    }

    /// Gradient of the weighted total. Zero-weight terms are skipped.
    pub fn gradient(&self, t: &TransformPair, h: &Hyperparams, nbr: &NeighborAssignment) -> Result<GradientPair> {
        let mut g = GradientPair::zeros(self.dim());
        for term in Term::ALL {
            let w = term.weight(h);
            if w == 0.0 {
                continue;
            }
            let tg = self.term_gradient(term, t, h, nbr)?;
            if !tg.is_finite() {
                return Err(CdaError::NonFinite {
                    term,
                    what: "gradient",
                });
            }
            g.scaled_add(w, &tg);
        }
        Ok(g)
    }
}

fn sq_norm(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn outer(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Array2<f64> {
    let col = u.insert_axis(Axis(1));
    let row = v.insert_axis(Axis(0));
    col.dot(&row)
}

fn regularizer_value(t: &TransformPair) -> f64 {
    let d = t.dim();
    let dev = |w: &Array2<f64>| -> f64 {
        w.indexed_iter()
            .map(|((i, j), v)| {
                let e = if i == j { v - 1.0 } else { *v };
                e * e
            })
            .sum()
    };
    debug_assert_eq!(t.b.nrows(), d);
    0.5 * (dev(&t.a) + dev(&t.b))
}

pub fn dist_marginal(
    a: &DomainDataset,
    b: &DomainDataset,
    labels: (&WorkingLabels, &WorkingLabels),
    t: &TransformPair,
) -> Result<f64> {
    Objective::new(a, b, labels.0, labels.1)?.dist_marginal(t)
}

pub fn dist_conditional(
    a: &DomainDataset,
    b: &DomainDataset,
    labels: (&WorkingLabels, &WorkingLabels),
    t: &TransformPair,
) -> Result<f64> {
    Objective::new(a, b, labels.0, labels.1)?.dist_conditional(t)
}

pub fn aggregation(
    a: &DomainDataset,
    b: &DomainDataset,
    labels: (&WorkingLabels, &WorkingLabels),
    t: &TransformPair,
) -> Result<f64> {
    Objective::new(a, b, labels.0, labels.1)?.aggregation(t)
}

pub fn unknown_separation(
    a: &DomainDataset,
    b: &DomainDataset,
    labels: (&WorkingLabels, &WorkingLabels),
    t: &TransformPair,
    nbr: &NeighborAssignment,
    margin: f64,
) -> Result<f64> {
    Objective::new(a, b, labels.0, labels.1)?.unknown_separation(t, nbr, margin)
}

pub fn assign_neighbors(
    a: &DomainDataset,
    b: &DomainDataset,
    labels: (&WorkingLabels, &WorkingLabels),
    t: &TransformPair,
) -> Result<NeighborAssignment> {
    Objective::new(a, b, labels.0, labels.1)?.assign_neighbors(t)
}

pub fn total_loss(
    a: &DomainDataset,
    b: &DomainDataset,
    labels: (&WorkingLabels, &WorkingLabels),
    t: &TransformPair,
    h: &Hyperparams,
    nbr: &NeighborAssignment,
) -> Result<LossBreakdown> {
    Objective::new(a, b, labels.0, labels.1)?.breakdown(t, h, nbr)
}

pub fn gradient(
    a: &DomainDataset,
    b: &DomainDataset,
    labels: (&WorkingLabels, &WorkingLabels),
    t: &TransformPair,
    h: &Hyperparams,
    nbr: &NeighborAssignment,
) -> Result<GradientPair> {
    Objective::new(a, b, labels.0, labels.1)?.gradient(t, h, nbr)
}
