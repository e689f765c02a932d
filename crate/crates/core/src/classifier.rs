//! Probabilistic multiclass base classifiers. The unknown class is fitted and
//! predicted like any other class.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::ClassKey;
use crate::error::{CdaError, Result};

pub trait ProbabilisticClassifier: Send + Sync {
    /// Column order of [`predict_proba`](Self::predict_proba).
    fn classes(&self) -> &[ClassKey];

    fn dim(&self) -> usize;

    /// One row per query, each row a probability distribution over `classes()`.
    fn predict_proba(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    /// Arg-max class per row; ties go to the earliest column.
    fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Vec<ClassKey>> {
        let probs = self.predict_proba(features)?;
        Ok(probs
            .outer_iter()
            .map(|row| self.classes()[argmax(row.iter().copied())])
            .collect())
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierConfig {
    Linear {
        #[serde(default = "default_l2")]
        l2_weight: f64,
        #[serde(default = "default_epochs")]
        max_epochs: usize,
    },
    SoftKnn {
        k: usize,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
}

fn default_l2() -> f64 {
    1e-3
}

fn default_epochs() -> usize {
    1000
}

fn default_temperature() -> f64 {
    1.0
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig::Linear {
            l2_weight: default_l2(),
            max_epochs: default_epochs(),
        }
    }
}

impl ClassifierConfig {
    pub fn fit(
        &self,
        features: ArrayView2<'_, f64>,
        labels: &[ClassKey],
    ) -> Result<Box<dyn ProbabilisticClassifier>> {
        Ok(match *self {
            ClassifierConfig::Linear {
                l2_weight,
                max_epochs,
            } => Box::new(fit_linear(features, labels, l2_weight, max_epochs)?),
            ClassifierConfig::SoftKnn { k, temperature } => {
                Box::new(fit_soft_knn(features, labels, k, temperature)?)
            }
        })
    }
}

fn check_training(features: ArrayView2<'_, f64>, labels: &[ClassKey]) -> Result<Vec<ClassKey>> {
    if labels.len() != features.nrows() {
        return Err(CdaError::Dimension {
            context: "classifier training labels",
            expected: features.nrows(),
            found: labels.len(),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(CdaError::Invalid(
            "classifier training features must be finite".to_string(),
        ));
    }
    Ok(labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect())
}

/// Training order independent of the caller's row order.
fn canonical_order(features: ArrayView2<'_, f64>, labels: &[ClassKey]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&i, &j| {
        for (p, q) in features.row(i).iter().zip(features.row(j).iter()) {
            match p.total_cmp(q) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        labels[i].cmp(&labels[j])
    });
    order
}

/// Multinomial logistic regression with an unpenalized bias, fitted by L-BFGS
/// on mean-centered, globally rescaled features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    classes: Vec<ClassKey>,
    mean: Array1<f64>,
    scale: f64,
    weights: Array2<f64>,
    bias: Array1<f64>,
    /// Gradient norm at the last iterate.
    pub final_gradient_norm: f64,
    pub epochs: usize,
}

pub fn fit_linear(
    features: ArrayView2<'_, f64>,
    labels: &[ClassKey],
    l2_weight: f64,
    max_epochs: usize,
) -> Result<LinearClassifier> {
    let classes = check_training(features, labels)?;
    if classes.len() < 2 {
        return Err(CdaError::DegenerateTraining(format!(
            "linear classifier needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    if !(l2_weight.is_finite() && l2_weight >= 0.0) {
        return Err(CdaError::Parameter(format!(
            "l2_weight must be >= 0, got {l2_weight}"
        )));
    }
    let n = features.nrows();
    let d = features.ncols();
    let c = classes.len();

    let order = canonical_order(features, labels);
    let x = features.select(Axis(0), &order);
    let y: Vec<usize> = order
        .iter()
        .map(|&i| classes.binary_search(&labels[i]).expect("class listed"))
        .collect();

    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let ms = centered.iter().map(|v| v * v).sum::<f64>() / (n * d.max(1)) as f64;
    let scale = if ms > 0.0 { ms.sqrt() } else { 1.0 };
    let xs = centered / scale;

    let problem = SoftmaxProblem {
        x: &xs,
        y: &y,
        classes: c,
        l2: l2_weight,
    };
    let (theta, gnorm, epochs) = lbfgs(&problem, Array1::zeros((d + 1) * c), 1e-5, max_epochs);
    let (weights, bias) = problem.unpack(&theta);
    Ok(LinearClassifier {
        classes,
        mean,
        scale,
        weights,
        bias,
        final_gradient_norm: gnorm,
        epochs,
    })
}

impl ProbabilisticClassifier for LinearClassifier {
    fn classes(&self) -> &[ClassKey] {
        &self.classes
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn predict_proba(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(CdaError::Dimension {
                context: "classifier query",
                expected: self.dim(),
                found: features.ncols(),
            });
        }
        let xs = (&features - &self.mean) / self.scale;
        let mut logits = xs.dot(&self.weights) + &self.bias;
        softmax_rows(&mut logits);
        Ok(logits)
    }
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

struct SoftmaxProblem<'a> {
    x: &'a Array2<f64>,
    y: &'a [usize],
    classes: usize,
    l2: f64,
}

impl SoftmaxProblem<'_> {
    fn unpack(&self, theta: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
        let d = self.x.ncols();
        let c = self.classes;
        let w = Array2::from_shape_vec((d, c), theta.slice(ndarray::s![..d * c]).to_vec())
            .expect("shape");
        let b = theta.slice(ndarray::s![d * c..]).to_owned();
        (w, b)
    }

    /// Mean cross-entropy plus `l2/2 ‖W‖²`, and its gradient.
    fn eval(&self, theta: &Array1<f64>) -> (f64, Array1<f64>) {
        let n = self.x.nrows() as f64;
        let (w, b) = self.unpack(theta);
        let mut logits = self.x.dot(&w) + &b;
        let mut loss = 0.0;
        for (row, &yi) in logits.outer_iter().zip(self.y) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[yi];
        }
        loss /= n;
        loss += 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        softmax_rows(&mut logits);
        for (mut row, &yi) in logits.outer_iter_mut().zip(self.y) {
            row[yi] -= 1.0;
        }
        logits /= n;
        let gw = self.x.t().dot(&logits) + &(&w * self.l2);
        let gb = logits.sum_axis(Axis(0));
        let mut g = Vec::with_capacity(theta.len());
        g.extend(gw.iter());
        g.extend(gb.iter());
        (loss, Array1::from(g))
    }
}

/// Limited-memory BFGS with Armijo backtracking. Returns the iterate, its
/// gradient norm and the number of iterations used.
fn lbfgs(problem: &SoftmaxProblem<'_>, mut x: Array1<f64>, tol: f64, max_iter: usize) -> (Array1<f64>, f64, usize) {
    const MEMORY: usize = 10;
    let (mut f, mut g) = problem.eval(&x);
    let mut s_hist: Vec<Array1<f64>> = Vec::new();
    let mut y_hist: Vec<Array1<f64>> = Vec::new();
    let mut iter = 0;
    while iter < max_iter {
        let gnorm = g.dot(&g).sqrt();
        if gnorm < tol {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / y.dot(s);
            let a = rho * s.dot(&q);
            q.scaled_add(-a, y);
            alphas.push((a, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            q *= s.dot(y) / y.dot(y);
        } else {
            q /= gnorm.max(1.0);
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q.scaled_add(a - b, s);
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            dir = -g.clone();
            slope = -g.dot(&g);
            s_hist.clear();
            y_hist.clear();
        }

        let mut step = 1.0;
        let mut next = None;
        for _ in 0..50 {
            let cand = &x + &(&dir * step);
            let (fc, gc) = problem.eval(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope {
                next = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = next else { break };
        let s = &xn - &x;
        let y = &gn - &g;
        if s.dot(&y) > 1e-12 {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        x = xn;
        f = fnew;
        g = gn;
        iter += 1;
    }
    let gnorm = g.dot(&g).sqrt();
    (x, gnorm, iter)
}

/// Distance-softmax vote among the `k` nearest training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftKnnClassifier {
    classes: Vec<ClassKey>,
    features: Array2<f64>,
    labels: Vec<usize>,
    k: usize,
    temperature: f64,
}

pub fn fit_soft_knn(
    features: ArrayView2<'_, f64>,
    labels: &[ClassKey],
    k: usize,
    temperature: f64,
) -> Result<SoftKnnClassifier> {
    let classes = check_training(features, labels)?;
    if k == 0 || k > features.nrows() {
        return Err(CdaError::Parameter(format!(
            "k must lie in 1..={}, got {k}",
            features.nrows()
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(CdaError::Parameter(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let order = canonical_order(features, labels);
    Ok(SoftKnnClassifier {
        features: features.select(Axis(0), &order),
        labels: order
            .iter()
            .map(|&i| classes.binary_search(&labels[i]).expect("class listed"))
            .collect(),
        classes,
        k,
        temperature,
    })
}

impl ProbabilisticClassifier for SoftKnnClassifier {
    fn classes(&self) -> &[ClassKey] {
        &self.classes
    }

    fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn predict_proba(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(CdaError::Dimension {
                context: "classifier query",
                expected: self.dim(),
                found: features.ncols(),
            });
        }
        let mut out = Array2::zeros((features.nrows(), self.classes.len()));
        for (q, mut row) in features.outer_iter().zip(out.outer_iter_mut()) {
            let mut dists: Vec<(f64, usize)> = self
                .features
                .outer_iter()
                .enumerate()
                .map(|(j, x)| {
                    let d2: f64 = x.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d2.sqrt(), j)
                })
                .collect();
            dists.sort_by(|p, r| p.0.total_cmp(&r.0).then(p.1.cmp(&r.1)));
            let nearest = &dists[..self.k];
            let dmin = nearest[0].0;
            let mut total = 0.0;
            for &(dist, j) in nearest {
                let w = (-(dist - dmin) / self.temperature).exp();
                row[self.labels[j]] += w;
                total += w;
            }
            row.mapv_inplace(|v| v / total);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const C0: ClassKey = ClassKey::Known(0);
    const C1: ClassKey = ClassKey::Known(1);
    const C2: ClassKey = ClassKey::Known(2);

    fn assert_stochastic(p: &Array2<f64>) {
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn linear_separates_two_classes() {
        let x = array![
            [0.0, 0.0],
            [0.5, 1.0],
            [-0.5, 0.3],
            [3.0, 0.0],
            [3.5, 1.0],
            [2.5, -0.5]
        ];
        let y = [C0, C0, C0, C1, C1, C1];
        let clf = fit_linear(x.view(), &y, 1e-3, 1000).unwrap();
        assert_eq!(clf.predict(x.view()).unwrap(), y.to_vec());
        assert!(clf.final_gradient_norm < 1e-5);
        assert_stochastic(&clf.predict_proba(x.view()).unwrap());
    }

    #[test]
    fn linear_uniform_on_coincident_classes() {
        let x = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let y = [C0, C1, ClassKey::Unknown];
        let clf = fit_linear(x.view(), &y, 1e-3, 1000).unwrap();
        let p = clf.predict_proba(array![[1.0, 2.0], [5.0, -1.0]].view()).unwrap();
        assert_eq!(p.ncols(), 3);
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        assert_eq!(clf.classes(), &[C0, C1, ClassKey::Unknown]);
    }

    #[test]
    fn linear_rejects_single_class() {
        let x = array![[0.0], [1.0]];
        let err = fit_linear(x.view(), &[C0, C0], 1e-3, 10).unwrap_err();
        assert!(matches!(err, CdaError::DegenerateTraining(_)));
    }

    #[test]
    fn knn_exact_match_and_symmetry() {
        let x = array![[0.0, 0.0], [2.0, 0.0]];
        let clf = fit_soft_knn(x.view(), &[C0, C1], 1, 1.0).unwrap();
        let p = clf.predict_proba(array![[2.0, 0.0]].view()).unwrap();
        assert_eq!(p.row(0).to_vec(), vec![0.0, 1.0]);
        let clf = fit_soft_knn(x.view(), &[C0, C1], 2, 1.0).unwrap();
        let p = clf.predict_proba(array![[1.0, 5.0]].view()).unwrap();
        assert!((p[[0, 0]] - 0.5).abs() < 1e-12 && (p[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn knn_matches_hand_softmax() {
        let x = array![[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0], [10.0, 10.0]];
        let clf = fit_soft_knn(x.view(), &[C0, C1, C2, C0], 3, 0.5).unwrap();
        let p = clf.predict_proba(array![[0.0, 0.0]].view()).unwrap();
        // distances 1, 2, 3 at temperature 0.5
        let w = [(-2.0f64).exp(), (-4.0f64).exp(), (-6.0f64).exp()];
        let s: f64 = w.iter().sum();
        for (c, wc) in w.iter().enumerate() {
            assert!((p[[0, c]] - wc / s).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_rejects_large_k() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            fit_soft_knn(x.view(), &[C0, C1], 3, 1.0),
            Err(CdaError::Parameter(_))
        ));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ClassifierConfig::SoftKnn {
            k: 5,
            temperature: 0.3,
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ClassifierConfig>(&text).unwrap(), cfg);
        let lin: ClassifierConfig = serde_json::from_str(r#"{"kind":"linear"}"#).unwrap();
        assert_eq!(lin, ClassifierConfig::default());
    }

    fn training_set() -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<u32>)> {
        proptest::collection::vec(([-4.0f64..4.0, -4.0f64..4.0, -4.0f64..4.0], 0u32..3), 6..25)
            .prop_filter("two classes", |v| {
                v.iter().map(|(_, c)| *c).collect::<BTreeSet<_>>().len() >= 2
            })
            .prop_map(|v| v.into_iter().unzip())
    }

    fn matrix(rows: &[[f64; 3]]) -> Array2<f64> {
        Array2::from_shape_vec((rows.len(), 3), rows.iter().flatten().copied().collect()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn outputs_are_row_stochastic((rows, ys) in training_set(), k in 1usize..6) {
            let x = matrix(&rows);
            let y: Vec<_> = ys.iter().map(|&c| ClassKey::Known(c)).collect();
            let queries = array![[0.0, 0.0, 0.0], [100.0, -50.0, 3.0], [1.0, 2.0, -1.0]];
            let lin = fit_linear(x.view(), &y, 1e-3, 300).unwrap();
            assert_stochastic(&lin.predict_proba(queries.view()).unwrap());
            let knn = fit_soft_knn(x.view(), &y, k.min(rows.len()), 1.0).unwrap();
            assert_stochastic(&knn.predict_proba(queries.view()).unwrap());
        }

        #[test]
        fn permutation_equivariant((rows, ys) in training_set(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..rows.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let x = matrix(&rows);
            let xp = x.select(Axis(0), &perm);
            let y: Vec<_> = ys.iter().map(|&c| ClassKey::Known(c)).collect();
            let yp: Vec<_> = perm.iter().map(|&i| y[i]).collect();
            let p = fit_linear(x.view(), &y, 1e-3, 300).unwrap().predict_proba(x.view()).unwrap();
            let q = fit_linear(xp.view(), &yp, 1e-3, 300).unwrap().predict_proba(x.view()).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let p = fit_soft_knn(x.view(), &y, 3, 1.0).unwrap().predict_proba(x.view()).unwrap();
            let q = fit_soft_knn(xp.view(), &yp, 3, 1.0).unwrap().predict_proba(x.view()).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn relabeling_permutes_columns((rows, ys) in training_set()) {
            // 0 -> 2, 1 -> 0, 2 -> 1
            let rename = [2u32, 0, 1];
            let x = matrix(&rows);
            let y: Vec<_> = ys.iter().map(|&c| ClassKey::Known(c)).collect();
            let yr: Vec<_> = ys.iter().map(|&c| ClassKey::Known(rename[c as usize])).collect();
            let lin = fit_linear(x.view(), &y, 1e-3, 300).unwrap();
            let linr = fit_linear(x.view(), &yr, 1e-3, 300).unwrap();
            let p = lin.predict_proba(x.view()).unwrap();
            let q = linr.predict_proba(x.view()).unwrap();
            for (col, class) in lin.classes().iter().enumerate() {
                let ClassKey::Known(c) = class else { unreachable!() };
                let target = ClassKey::Known(rename[*c as usize]);
                let qcol = linr.classes().iter().position(|k| *k == target).unwrap();
                for r in 0..p.nrows() {
                    prop_assert!((p[[r, col]] - q[[r, qcol]]).abs() < 1e-9);
                }
            }
        }
    }
}
