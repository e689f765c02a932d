//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to see them.

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cda_core::domain::{ClassKey, DomainDataset, DomainId, Hyperparams, LabelState, TransformPair, WorkingLabels};
use cda_core::evaluation::{cmc, CmcCurve, Identity};
use cda_core::experiment::{run_ablation, run_experiment, save_results, DataSource, ExperimentConfig};
use cda_core::gradcheck::random_instance;
use cda_core::losses::{self, LossBreakdown, Objective, SampleRef, Term};
use cda_core::pipeline::labeled_training_set;
use cda_core::protocols::{
    apply_office_protocol, apply_reid_protocol, generate_synthetic, LabeledPool, OfficeProtocolSpec,
    ReidProtocolSpec, SyntheticSpec,
};
use cda_core::pseudo_label::{assign, entropy, outlier_split};

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1. analytic gradients against this file's own central differences
fn gradient_correctness() -> Verdict {
    const STEP: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = Hyperparams::default();
    let mut worst = [0.0f64; 5];
    for k in 0..20 {
        let d = [4, 6, 8][k % 3];
        let n = rng.random_range(10..=50);
        let inst = random_instance(&mut rng, d, n).map_err(err)?;
        let obj = inst.objective().map_err(err)?;
        let t = &inst.transforms;
        let nbr = obj.assign_neighbors(t).map_err(err)?;
        for (slot, term) in Term::ALL.into_iter().enumerate() {
            let analytic = obj.term_gradient(term, t, &h, &nbr).map_err(err)?;
            for (side, g) in [(0, &analytic.a), (1, &analytic.b)] {
                for ((i, j), &a) in g.indexed_iter() {
                    let shifted = |delta: f64| {
                        let mut p = t.clone();
                        if side == 0 {
                            p.a[[i, j]] += delta;
                        } else {
                            p.b[[i, j]] += delta;
                        }
                        obj.term_value(term, &p, &h, &nbr)
                    };
                    let num = (shifted(STEP).map_err(err)? - shifted(-STEP).map_err(err)?) / (2.0 * STEP);
                    let rel = (a - num).abs() / 1f64.max(a.abs()).max(num.abs());
                    worst[slot] = worst[slot].max(rel);
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let detail = Term::ALL
        .iter()
        .zip(worst)
        .map(|(t, e)| format!("{t} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.iter().all(|e| *e < 1e-5), format!("max relative error ≥ 1e-5: {detail}"))?;
    ensure(elapsed < 30.0, format!("took {elapsed:.1} s"))?;
    Ok(format!("20 instances, {detail}, {elapsed:.1} s"))
}

fn ds2(domain: DomainId, rows: &[[f64; 2]]) -> DomainDataset {
    let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    DomainDataset::from_rows(domain, &rows, vec![LabelState::Unlabeled; rows.len()], [0, 1].into_iter().collect())
        .unwrap()
}

// 2. hand-evaluated loss values
fn loss_hand_values() -> Verdict {
    const TOL: f64 = 1e-10;
    let k0 = Some(ClassKey::Known(0));
    let k1 = Some(ClassKey::Known(1));
    let unk = Some(ClassKey::Unknown);
    let wl = WorkingLabels::from_keys;
    let eye = TransformPair::identity(2);
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    let a = ds2(DomainId::A, &[[1.0, 0.0]]);
    let b = ds2(DomainId::B, &[[0.0, 1.0]]);
    let l = wl(&[k0]);
    checks.push(("dist_M means (1,0) vs (0,1)", losses::dist_marginal(&a, &b, (&l, &l), &eye).map_err(err)?, 1.0));

    let a = ds2(DomainId::A, &[[1.0, 0.0], [0.0, 3.0]]);
    let b = ds2(DomainId::B, &[[0.0, 0.0], [0.0, 2.0]]);
    let (la, lb) = (wl(&[k0, None]), wl(&[k0, None]));
    checks.push(("dist_C one shared class", losses::dist_conditional(&a, &b, (&la, &lb), &eye).map_err(err)?, 0.5));
    let (la, lb) = (wl(&[k0, k1]), wl(&[k0, k1]));
    checks.push(("dist_C two shared classes", losses::dist_conditional(&a, &b, (&la, &lb), &eye).map_err(err)?, 1.0));

    let a = ds2(DomainId::A, &[[0.0, 0.0], [2.0, 0.0]]);
    let b = ds2(DomainId::B, &[[5.0, 5.0]]);
    let (la, lb) = (wl(&[k0, k0]), wl(&[k0]));
    checks.push(("G one class {(0,0),(2,0)}", losses::aggregation(&a, &b, (&la, &lb), &eye).map_err(err)?, 0.5));

    // x at its center with f_u = 4, then f_u = 0.25; B has no unknowns
    let b = ds2(DomainId::B, &[[9.0, 9.0]]);
    let (la, lb) = (wl(&[k0, unk]), wl(&[k0]));
    for (u, expect) in [(2.0, 0.0), (0.5, 0.75)] {
        let a = ds2(DomainId::A, &[[0.0, 0.0], [u, 0.0]]);
        let obj = Objective::new(&a, &b, &la, &lb).map_err(err)?;
        let nbr = obj.assign_neighbors(&eye).map_err(err)?;
        let total = obj.unknown_separation(&eye, &nbr, 1.0).map_err(err)?;
        checks.push(("hinge value", 2.0 * total, expect));
    }

    let a = ds2(DomainId::A, &[[0.0, 0.0], [1.0, 0.0]]);
    let b = ds2(DomainId::B, &[[0.0, 3.0]]);
    let obj = Objective::new(&a, &b, &wl(&[k0, unk]), &wl(&[unk])).map_err(err)?;
    let nbr = obj.assign_neighbors(&eye).map_err(err)?;
    ensure(
        nbr.get(DomainId::A, 0) == Some(SampleRef { domain: DomainId::A, index: 1 }),
        "nearest unknown of (0,0) is not (1,0)",
    )?;

    let h = Hyperparams { lambda_r: 0.0, ..Hyperparams::default() };
    checks.push(("f from components", LossBreakdown::from_components(2.0, 1.0, 3.0, 0.5, 0.0, &h).total, 15.05));

    let a = ds2(DomainId::A, &[[0.0, 1.0]]);
    let b = ds2(DomainId::B, &[[1.0, 0.0]]);
    let obj = Objective::new(&a, &b, &wl(&[k0]), &wl(&[k0])).map_err(err)?;
    let only_reg = Hyperparams { lambda_c: 0.0, lambda_m: 0.0, lambda_g: 0.0, lambda_u: 0.0, lambda_r: 1.0, margin: 1.0 };
    let two = TransformPair::new(Array2::eye(2) * 2.0, Array2::eye(2) * 2.0).map_err(err)?;
    let g = obj.gradient(&two, &only_reg, &Default::default()).map_err(err)?;
    let dev = (&g.a - &Array2::<f64>::eye(2)).iter().chain((&g.b - &Array2::<f64>::eye(2)).iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    checks.push(("reg gradient at 2I minus I", dev, 0.0));

    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > TOL)
        .map(|(name, got, want)| format!("{name}: {got} != {want}"))
        .collect();
    ensure(bad.is_empty(), bad.join("; "))?;
    Ok(format!("{} values within {TOL:e}, neighbor choice exact", checks.len()))
}

// 3. entropy and outlier rule
fn entropy_outlier_contract() -> Verdict {
    let one_hot = entropy(&[0.0, 1.0, 0.0, 0.0]).map_err(err)?;
    ensure(one_hot == 0.0, format!("one-hot entropy {one_hot}"))?;
    let uniform = entropy(&[0.25; 4]).map_err(err)?;
    ensure((uniform - 4f64.ln()).abs() <= 1e-12, format!("uniform-4 entropy {uniform}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(2..60);
        let c = rng.random_range(2..8);
        let entropies: Vec<f64> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>().powi(3)).collect();
                let s: f64 = raw.iter().sum();
                entropy(&raw.iter().map(|v| v / s).collect::<Vec<_>>())
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let split = outlier_split(&entropies);
        let mean = entropies.iter().sum::<f64>() / n as f64;
        if !split.guard_applied {
            let expect: Vec<bool> = entropies.iter().map(|h| *h >= mean).collect();
            ensure(split.mask == expect, "mask differs from {H ≥ mean(H)}")?;
        }
        for base in [2f64, 10.0] {
            let rescaled: Vec<f64> = entropies.iter().map(|h| h / base.ln()).collect();
            ensure(outlier_split(&rescaled).mask == split.mask, format!("mask changed under log base {base}"))?;
        }
    }

    let s = generate_synthetic(&SyntheticSpec::default(), 0).map_err(err)?;
    let t = TransformPair::identity(s.a.dim());
    let (x, y) = labeled_training_set(&s.a, &s.b, &t).map_err(err)?;
    let clf = cda_core::ClassifierConfig::default().fit(x.view(), &y).map_err(err)?;
    let report = assign(clf.as_ref(), &s.a, &s.b, &t).map_err(err)?;
    let mean = report.entries.iter().map(|e| e.entropy).sum::<f64>() / report.entries.len() as f64;
    ensure((report.threshold - mean).abs() < 1e-12, "report threshold is not the mean entropy")?;
    ensure(
        report.entries.iter().all(|e| e.outlier == (e.entropy >= mean)),
        "report mask differs from {H ≥ γ}",
    )?;
    Ok(format!(
        "one-hot 0, uniform-4 ln 4, 200 random reports + pipeline report ({:.0}% outliers)",
        100.0 * report.outlier_fraction()
    ))
}

fn synthetic_config(spec: SyntheticSpec) -> ExperimentConfig {
    ExperimentConfig { data: DataSource::Synthetic { spec }, ..ExperimentConfig::default() }
}

struct SyntheticRuns {
    na: f64,
    cda: f64,
    zero_na: f64,
    zero_cda: f64,
    converged: usize,
    max_iterations: usize,
    monotone: bool,
    seconds: f64,
}

fn synthetic_runs() -> Result<SyntheticRuns, String> {
    let start = Instant::now();
    let shifted = run_experiment(&synthetic_config(SyntheticSpec::default()), true).map_err(err)?;
    let zero = run_experiment(&synthetic_config(SyntheticSpec::default().without_shift()), true).map_err(err)?;
    let mean = |o: &cda_core::experiment::ExperimentOutput, f: fn(&cda_core::experiment::Summary) -> Option<cda_core::experiment::MeanStd>| {
        f(&o.manifest.summary).map(|m| m.mean).ok_or("missing accuracy".to_string())
    };
    let repeats = &shifted.manifest.repeats;
    Ok(SyntheticRuns {
        na: mean(&shifted, |s| s.na_accuracy)?,
        cda: mean(&shifted, |s| s.cda_accuracy)?,
        zero_na: mean(&zero, |s| s.na_accuracy)?,
        zero_cda: mean(&zero, |s| s.cda_accuracy)?,
        converged: repeats.iter().filter(|r| r.converged).count(),
        max_iterations: repeats.iter().map(|r| r.iterations.len()).max().unwrap_or(0),
        monotone: repeats
            .iter()
            .flat_map(|r| &r.iterations)
            .chain(zero.manifest.repeats.iter().flat_map(|r| &r.iterations))
            .all(|i| i.monotone != Some(false)),
        seconds: start.elapsed().as_secs_f64(),
    })
}

// 4. adaptation gain over the baseline, and no gain without shift
fn synthetic_gain(runs: &SyntheticRuns) -> Verdict {
    let gain = 100.0 * (runs.cda - runs.na);
    let zero_gap = 100.0 * (runs.zero_cda - runs.zero_na).abs();
    let detail = format!(
        "NA {:.1}, CDA {:.1}, gain {gain:.1} pts; zero shift NA {:.1}, CDA {:.1}, |Δ| {zero_gap:.2} pts; {:.1} s",
        100.0 * runs.na,
        100.0 * runs.cda,
        100.0 * runs.zero_na,
        100.0 * runs.zero_cda,
        runs.seconds
    );
    ensure(gain >= 10.0 && zero_gap <= 2.0 && runs.seconds < 300.0, detail.clone())?;
    Ok(detail)
}

// 5. removing any one component does not beat the full objective
fn ablation_direction() -> Verdict {
    let table = run_ablation(&ExperimentConfig::default(), true).map_err(err)?;
    let full = table.row("CDA").ok_or("no full row")?.mean;
    let detail = table
        .rows
        .iter()
        .map(|r| format!("{} {:.1}", r.variant, 100.0 * r.mean))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(table.rows.iter().all(|r| full >= r.mean), detail.clone())?;
    Ok(detail)
}

// 6. outer-loop convergence and solver monotonicity
fn convergence(runs: &SyntheticRuns) -> Verdict {
    let detail = format!(
        "{}/5 seeds converged, at most {} outer iterations, monotone within epochs: {}",
        runs.converged, runs.max_iterations, runs.monotone
    );
    ensure(runs.converged >= 4 && runs.max_iterations <= 10 && runs.monotone, detail.clone())?;
    Ok(detail)
}

fn pool(domain: DomainId, classes: impl IntoIterator<Item = u32>, per_class: usize) -> LabeledPool {
    let classes: Vec<u32> = classes.into_iter().flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let n = classes.len();
    LabeledPool {
        domain,
        ids: (0..n).map(|i| format!("{domain}{i}")).collect(),
        features: Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64),
        classes,
    }
}

fn labeled_per_class(ds: &DomainDataset) -> (std::collections::BTreeMap<u32, usize>, usize) {
    let mut known = std::collections::BTreeMap::new();
    let mut unknown = 0;
    for l in ds.labels() {
        match l {
            LabelState::Known(c) => *known.entry(*c).or_insert(0) += 1,
            LabelState::Unknown => unknown += 1,
            LabelState::Unlabeled => {}
        }
    }
    (known, unknown)
}

// 7. protocol counts
fn protocol_exactness() -> Verdict {
    for seed in 0..5 {
        let s = apply_office_protocol(
            &pool(DomainId::A, 0..31, 20),
            &pool(DomainId::B, 0..31, 20),
            &OfficeProtocolSpec::default(),
            seed,
        )
        .map_err(err)?;
        let classes: BTreeSet<ClassKey> = s.truth.a.iter().chain(&s.truth.b).copied().collect();
        ensure(classes.len() == 16, format!("office: {} classes", classes.len()))?;
        ensure(s.a.num_labeled() == 39 && s.b.num_labeled() == 39, "office: labeled count is not 39")?;
        let overlap = s.labeled_known.0.intersection(&s.labeled_known.1).count();
        ensure(overlap == 5, format!("office: overlap {overlap}"))?;
    }
    for n in [6u32, 12, 30] {
        let private = 4;
        let a = pool(DomainId::A, 0..n + private, 3);
        let b = pool(DomainId::B, private..n + 2 * private, 3);
        let s = apply_reid_protocol(&a, &b, &ReidProtocolSpec::default(), u64::from(n)).map_err(err)?;
        let n = n as usize;
        for ds in [&s.a, &s.b] {
            let (known, unknown) = labeled_per_class(ds);
            ensure(known.len() == 2 * n / 3, format!("reid N={n}: {} labeled classes", known.len()))?;
            ensure(known.values().all(|&c| c == 1), format!("reid N={n}: not one image per class"))?;
            ensure(unknown == n / 4, format!("reid N={n}: {unknown} labeled unknowns"))?;
        }
        let overlap = s.labeled_known.0.intersection(&s.labeled_known.1).count();
        ensure(overlap == n / 3, format!("reid N={n}: overlap {overlap}"))?;
    }
    Ok("office 16 classes / 39 labeled / overlap 5 over 5 seeds; reid N = 6, 12, 30".to_string())
}

fn cmc_oracle(q: &Array2<f64>, qids: &[Identity], g: &Array2<f64>, gids: &[Identity], max_rank: usize) -> CmcCurve {
    let mut hits = vec![0usize; max_rank];
    let (mut evaluated, mut skipped) = (0, 0);
    for (qi, qrow) in q.outer_iter().enumerate() {
        let mut order: Vec<(f64, usize)> = g
            .outer_iter()
            .enumerate()
            .map(|(j, grow)| (grow.iter().zip(qrow.iter()).map(|(a, b)| (a - b).powi(2)).sum(), j))
            .collect();
        order.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        let pos = qids[qi].and_then(|id| order.iter().position(|&(_, j)| gids[j] == Some(id)));
        match pos {
            Some(p) => {
                evaluated += 1;
                if p < max_rank {
                    hits[p] += 1;
                }
            }
            None => skipped += 1,
        }
    }
    let mut acc = 0;
    let rates = hits
        .iter()
        .map(|h| {
            acc += h;
            if evaluated == 0 { 0.0 } else { acc as f64 / evaluated as f64 }
        })
        .collect();
    CmcCurve { rates, evaluated, skipped }
}

// 8. CMC against exhaustive sorting
fn cmc_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for inst in 0..50 {
        let d = rng.random_range(1..5);
        let nq = rng.random_range(1..20);
        let ng = rng.random_range(1..30);
        let mut int_matrix = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| f64::from(rng.random_range(-4i32..=4)));
        let (q, g, wq, wg) = (int_matrix(nq, d), int_matrix(ng, d), int_matrix(d, d), int_matrix(d, d));
        let mut ident = || -> Identity { if rng.random_bool(0.2) { None } else { Some(rng.random_range(0..6)) } };
        let qids: Vec<Identity> = (0..nq).map(|_| ident()).collect();
        let gids: Vec<Identity> = (0..ng).map(|_| ident()).collect();
        let max_rank = rng.random_range(1..=ng + 2);
        let got = cmc(q.view(), &qids, g.view(), &gids, &wq, &wg, max_rank).map_err(err)?;
        let want = cmc_oracle(&q.dot(&wq), &qids, &g.dot(&wg), &gids, max_rank);
        ensure(got == want, format!("instance {inst}: {got:?} != {want:?}"))?;
        ensure(got.rates.windows(2).all(|w| w[0] <= w[1]), format!("instance {inst}: curve decreases"))?;
    }
    let c = cmc(array![[0.0]].view(), &[Some(1)], array![[1.0]].view(), &[Some(1)], &Array2::eye(1), &Array2::eye(1), 1)
        .map_err(err)?;
    ensure(c.rates == vec![1.0], "trivial match")?;
    Ok("50 integer-valued instances with ties equal the sort oracle; curves monotone".to_string())
}

// 9. bit-identical manifests, serial and parallel
fn determinism() -> Verdict {
    let config = ExperimentConfig::default();
    let dir = tempfile::tempdir().map_err(err)?;
    let mut bytes = Vec::new();
    for (k, parallel) in [true, true, false].into_iter().enumerate() {
        let out = run_experiment(&config, parallel).map_err(err)?;
        let path = dir.path().join(format!("run{k}"));
        save_results(&out, &path).map_err(err)?;
        bytes.push(std::fs::read(path.join("manifest.json")).map_err(err)?);
    }
    ensure(bytes[0] == bytes[1], "two parallel runs differ")?;
    ensure(bytes[0] == bytes[2], "parallel and serial runs differ")?;
    let reloaded = ExperimentConfig::load(&dir.path().join("run0/manifest.json")).map_err(err)?;
    ensure(reloaded == config, "manifest does not echo the config")?;
    Ok(format!("3 runs of {} repeats, {} byte manifest identical", config.repeats, bytes[0].len()))
}

#[test]
fn acceptance() {
    let runs = synthetic_runs();
    let with_runs = |f: fn(&SyntheticRuns) -> Verdict| -> Verdict { runs.as_ref().map_err(|e| e.clone()).and_then(f) };
    let results: Vec<(usize, &str, Verdict)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "loss hand values", loss_hand_values()),
        (3, "entropy/outlier contract", entropy_outlier_contract()),
        (4, "synthetic adaptation gain", with_runs(synthetic_gain)),
        (5, "ablation direction", ablation_direction()),
        (6, "convergence", with_runs(convergence)),
        (7, "protocol exactness", protocol_exactness()),
        (8, "CMC oracle equivalence", cmc_equivalence()),
        (9, "determinism", determinism()),
    ];
    for (id, name, verdict) in &results {
        match verdict {
            Ok(detail) => println!("PASS [{id}] {name}: {detail}"),
            Err(detail) => println!("FAIL [{id}] {name}: {detail}"),
        }
    }
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
