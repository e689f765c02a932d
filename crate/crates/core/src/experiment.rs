//! Config-driven experiments: repeated seeded splits, the no-adaptation
//! baseline next to the full method, ablations, and reproducible manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{ClassKey, DomainDataset, Hyperparams, TransformPair};
use crate::error::{CdaError, Result};
use crate::evaluation::{accuracy, cmc, format_mean_std, mean_and_std, CmcCurve, Identity};
use crate::io;
use crate::pipeline::{self, IterationRecord, PipelineOutcome, PipelineSettings, PredictionResult};
use crate::protocols::{
    apply_office_protocol, apply_reid_protocol, generate_synthetic, GroundTruth, LabeledPool,
    OfficeProtocolSpec, ReidProtocolSpec, SyntheticSpec,
};

fn default_max_rank() -> usize {
    20
}

/// Where the two domains come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
    /// Feature file with a ground-truth class id on every row, relabeled per repeat.
    Office {
        features: PathBuf,
        #[serde(default)]
        protocol: OfficeProtocolSpec,
    },
    /// Feature file where class ids are identities seen by two camera views.
    Reid {
        features: PathBuf,
        #[serde(default)]
        protocol: ReidProtocolSpec,
        #[serde(default = "default_max_rank")]
        max_rank: usize,
    },
    /// Already weakly labeled features, used as is on every repeat.
    Features {
        features: PathBuf,
        #[serde(default)]
        truth: Option<PathBuf>,
        #[serde(default)]
        known_classes: Option<BTreeSet<u32>>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

impl DataSource {
    fn input_files(&self) -> Vec<&Path> {
        match self {
            DataSource::Synthetic { .. } => Vec::new(),
            DataSource::Office { features, .. } | DataSource::Reid { features, .. } => {
                vec![features.as_path()]
            }
            DataSource::Features { features, truth, .. } => std::iter::once(features.as_path())
                .chain(truth.as_deref())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Repeat `r` uses seed `seed + r`.
    pub seed: u64,
    pub repeats: usize,
    pub hyperparams: Hyperparams,
    pub pipeline: PipelineSettings,
    pub data: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".to_string(),
            seed: 0,
            repeats: 5,
            hyperparams: Hyperparams::default(),
            pipeline: PipelineSettings::default(),
            data: DataSource::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(CdaError::Parameter("repeats must be >= 1".to_string()));
        }
        self.hyperparams.validate()?;
        self.pipeline.solver.validate()?;
        if let DataSource::Synthetic { spec } = &self.data {
            spec.validate()?;
        }
        if let DataSource::Reid { max_rank: 0, .. } = &self.data {
            return Err(CdaError::Parameter("max_rank must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Reads a config, or the config echoed inside a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = io::read_json(path)?;
        let inner = match value.get("config") {
            Some(c) if value.get("repeats").is_some_and(|r| r.is_array()) => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner).map_err(|source| CdaError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// One repeat's weakly labeled pair with whatever truth is available.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub a: DomainDataset,
    pub b: DomainDataset,
    pub truth: Option<GroundTruth>,
    /// Raw identities for retrieval scoring.
    pub raw_classes: Option<(Vec<u32>, Vec<u32>)>,
}

impl PreparedSplit {
    /// `id,domain,role` rows for the labeled/unlabeled split.
    pub fn write_split_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let map = |e: csv::Error| CdaError::Invalid(e.to_string());
        w.write_record(["id", "domain", "role"]).map_err(map)?;
        for ds in [&self.a, &self.b] {
            for (id, l) in ds.ids().iter().zip(ds.labels()) {
                let role = if l.is_labeled() { "labeled" } else { "unlabeled" };
                w.write_record([id.as_str(), &ds.domain().to_string(), role])
                    .map_err(map)?;
            }
        }
        w.flush().map_err(|e| CdaError::Invalid(e.to_string()))
    }
}

/// Data loaded once and shared by every repeat.
enum Source {
    Synthetic(SyntheticSpec),
    Pools(LabeledPool, LabeledPool, Protocol),
    Fixed(PreparedSplit),
}

enum Protocol {
    Office(OfficeProtocolSpec),
    Reid(ReidProtocolSpec),
}

fn load_pools(path: &Path) -> Result<(LabeledPool, LabeledPool)> {
    let (a, b) = io::read_features(path, None)?;
    Ok((LabeledPool::from_dataset(&a)?, LabeledPool::from_dataset(&b)?))
}

fn truth_from_file(path: &Path, a: &DomainDataset, b: &DomainDataset) -> Result<GroundTruth> {
    let rows = io::read_truth(path)?;
    let mut map: BTreeMap<(String, String), ClassKey> = BTreeMap::new();
    for (dom, id, key) in rows {
        map.insert((dom.to_string(), id), key);
    }
    let lookup = |ds: &DomainDataset| -> Result<Vec<ClassKey>> {
        ds.ids()
            .iter()
            .zip(ds.labels())
            .map(|(id, l)| {
                map.get(&(ds.domain().to_string(), id.clone()))
                    .copied()
                    .or_else(|| l.class_key())
                    .ok_or_else(|| {
                        CdaError::Invalid(format!("no truth for sample {id} in {}", path.display()))
                    })
            })
            .collect()
    };
    Ok(GroundTruth {
        a: lookup(a)?,
        b: lookup(b)?,
    })
}

impl Source {
    fn load(data: &DataSource) -> Result<Self> {
        Ok(match data {
            DataSource::Synthetic { spec } => Source::Synthetic(spec.clone()),
            DataSource::Office { features, protocol } => {
                let (a, b) = load_pools(features)?;
                Source::Pools(a, b, Protocol::Office(protocol.clone()))
            }
            DataSource::Reid { features, protocol, .. } => {
                let (a, b) = load_pools(features)?;
                Source::Pools(a, b, Protocol::Reid(protocol.clone()))
            }
            DataSource::Features {
                features,
                truth,
                known_classes,
            } => {
                let (a, b) = io::read_features(features, known_classes.as_ref())?;
                let truth = truth
                    .as_deref()
                    .map(|p| truth_from_file(p, &a, &b))
                    .transpose()?;
                Source::Fixed(PreparedSplit {
                    a,
                    b,
                    truth,
                    raw_classes: None,
                })
            }
        })
    }

    fn split(&self, seed: u64) -> Result<PreparedSplit> {
        let from = |s: crate::protocols::ProtocolSplit| PreparedSplit {
            a: s.a,
            b: s.b,
            truth: Some(s.truth),
            raw_classes: Some(s.raw_classes),
        };
        Ok(match self {
            Source::Synthetic(spec) => from(generate_synthetic(spec, seed)?),
            Source::Pools(a, b, Protocol::Office(p)) => from(apply_office_protocol(a, b, p, seed)?),
            Source::Pools(a, b, Protocol::Reid(p)) => from(apply_reid_protocol(a, b, p, seed)?),
            Source::Fixed(split) => split.clone(),
        })
    }
}

/// Metrics of one repeat, as recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub na_accuracy: Option<f64>,
    pub cda_accuracy: Option<f64>,
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
    pub na_cmc: Option<CmcCurve>,
    pub cda_cmc: Option<CmcCurve>,
}

/// Everything a repeat produced, including per-sample outputs.
#[derive(Clone, Debug)]
pub struct RepeatDetail {
    pub split: PreparedSplit,
    pub na: PredictionResult,
    pub outcome: PipelineOutcome,
    pub result: RepeatResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| {
            let (mean, std) = mean_and_std(values);
            MeanStd { mean, std }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub na_accuracy: Option<MeanStd>,
    pub cda_accuracy: Option<MeanStd>,
    pub converged: usize,
    /// Mean CMC rates at ranks 1, 5, 10 and 20 where available.
    pub na_cmc: BTreeMap<usize, MeanStd>,
    pub cda_cmc: BTreeMap<usize, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    /// SHA-256 of every input file, keyed by the path in the config.
    pub input_hashes: BTreeMap<String, String>,
    pub repeats: Vec<RepeatResult>,
    pub summary: Summary,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub manifest: Manifest,
    pub details: Vec<RepeatDetail>,
}

const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Queries are the unlabeled samples, the gallery the labeled ones, both
/// mapped by their own domain's transform. Unknown-class items carry no identity.
fn retrieval_curve(split: &PreparedSplit, t: &TransformPair, max_rank: usize) -> Result<Option<CmcCurve>> {
    let (Some(truth), Some(raw)) = (&split.truth, &split.raw_classes) else {
        return Ok(None);
    };
    let mut q_blocks = Vec::new();
    let mut g_blocks = Vec::new();
    let mut q_ids: Vec<Identity> = Vec::new();
    let mut g_ids: Vec<Identity> = Vec::new();
    for (ds, raw) in [(&split.a, &raw.0), (&split.b, &raw.1)] {
        let tr = truth.get(ds.domain());
        let id = |i: usize| tr[i].is_known().then_some(raw[i]);
        let w = t.get(ds.domain());
        let qi = ds.unlabeled_indices();
        let gi = ds.labeled_indices();
        q_blocks.push(ds.select_rows(&qi).dot(w));
        g_blocks.push(ds.select_rows(&gi).dot(w));
        q_ids.extend(qi.iter().map(|&i| id(i)));
        g_ids.extend(gi.iter().map(|&i| id(i)));
    }
    let cat = |blocks: &[Array2<f64>]| -> Result<Array2<f64>> {
        let views: Vec<_> = blocks.iter().map(|m| m.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| CdaError::Invalid(e.to_string()))
    };
    let q = cat(&q_blocks)?;
    let g = cat(&g_blocks)?;
    if g.nrows() == 0 {
        return Ok(None);
    }
    let eye = Array2::<f64>::eye(q.ncols());
    Ok(Some(cmc(q.view(), &q_ids, g.view(), &g_ids, &eye, &eye, max_rank)?))
}

fn run_repeat(
    config: &ExperimentConfig,
    hyperparams: &Hyperparams,
    source: &Source,
    repeat: usize,
) -> Result<RepeatDetail> {
    let seed = config.seed.wrapping_add(repeat as u64);
    let split = source.split(seed)?;
    let settings = &config.pipeline;
    let na = pipeline::no_adaptation(&settings.classifier, &split.a, &split.b)?;
    let outcome = pipeline::run(&split.a, &split.b, hyperparams, settings)?;
    let truth = split.truth.as_ref().map(|t| t.for_unlabeled(&split.a, &split.b));
    let score = |p: &PredictionResult| -> Result<Option<f64>> {
        truth.as_ref().map(|t| accuracy(&p.classes(), t)).transpose()
    };
    let max_rank = match &config.data {
        DataSource::Reid { max_rank, .. } => Some(*max_rank),
        _ => None,
    };
    let (na_cmc, cda_cmc) = match max_rank {
        Some(r) => (
            retrieval_curve(&split, &TransformPair::identity(split.a.dim()), r)?,
            retrieval_curve(&split, &outcome.transforms, r)?,
        ),
        None => (None, None),
    };
    let result = RepeatResult {
        repeat,
        seed,
        na_accuracy: score(&na)?,
        cda_accuracy: score(&outcome.predictions)?,
        converged: outcome.converged,
        iterations: outcome.history().to_vec(),
        na_cmc,
        cda_cmc,
    };
    Ok(RepeatDetail {
        split,
        na,
        outcome,
        result,
    })
}

fn run_repeats(
    config: &ExperimentConfig,
    hyperparams: &Hyperparams,
    source: &Source,
    parallel: bool,
) -> Result<Vec<RepeatDetail>> {
    let job = |r: usize| {
        run_repeat(config, hyperparams, source, r).map_err(|e| {
            CdaError::Invalid(format!("repeat {r} (seed {}): {e}", config.seed.wrapping_add(r as u64)))
        })
    };
    if parallel {
        (0..config.repeats).into_par_iter().map(job).collect()
    } else {
        (0..config.repeats).map(job).collect()
    }
}

fn summarize(results: &[RepeatResult]) -> Summary {
    let collect = |f: fn(&RepeatResult) -> Option<f64>| -> Vec<f64> { results.iter().filter_map(f).collect() };
    let cmc_summary = |f: fn(&RepeatResult) -> Option<&CmcCurve>| -> BTreeMap<usize, MeanStd> {
        CMC_RANKS
            .iter()
            .filter_map(|&r| {
                let v: Vec<f64> = results.iter().filter_map(|x| f(x)?.rate(r)).collect();
                MeanStd::of(&v).map(|m| (r, m))
            })
            .collect()
    };
    Summary {
        na_accuracy: MeanStd::of(&collect(|r| r.na_accuracy)),
        cda_accuracy: MeanStd::of(&collect(|r| r.cda_accuracy)),
        converged: results.iter().filter(|r| r.converged).count(),
        na_cmc: cmc_summary(|r| r.na_cmc.as_ref()),
        cda_cmc: cmc_summary(|r| r.cda_cmc.as_ref()),
    }
}

fn input_hashes(data: &DataSource) -> Result<BTreeMap<String, String>> {
    data.input_files()
        .into_iter()
        .map(|p| Ok((p.display().to_string(), io::sha256_file(p)?)))
        .collect()
}

/// Runs every repeat, concurrently when `parallel`; results are ordered by
/// repeat index either way.
pub fn run_experiment(config: &ExperimentConfig, parallel: bool) -> Result<ExperimentOutput> {
    config.validate()?;
    let source = Source::load(&config.data)?;
    let details = run_repeats(config, &config.hyperparams, &source, parallel)?;
    let repeats: Vec<RepeatResult> = details.iter().map(|d| d.result.clone()).collect();
    let manifest = Manifest {
        config: config.clone(),
        input_hashes: input_hashes(&config.data)?,
        summary: summarize(&repeats),
        repeats,
    };
    Ok(ExperimentOutput { manifest, details })
}

/// Per-repeat files plus `manifest.json` and `summary.csv` under `dir`.
pub fn save_results(output: &ExperimentOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CdaError::io(dir, e))?;
    io::write_json(&dir.join("manifest.json"), &output.manifest)?;
    io::write_with(&dir.join("summary.csv"), |w| {
        let mut c = csv::Writer::from_writer(w);
        let map = |e: csv::Error| CdaError::Invalid(e.to_string());
        c.write_record(["repeat", "seed", "na_accuracy", "cda_accuracy", "outer_iterations", "converged"])
            .map_err(map)?;
        for r in &output.manifest.repeats {
            let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            c.write_record([
                r.repeat.to_string(),
                r.seed.to_string(),
                cell(r.na_accuracy),
                cell(r.cda_accuracy),
                r.iterations.len().to_string(),
                (r.converged as u8).to_string(),
            ])
            .map_err(map)?;
        }
        c.flush().map_err(|e| CdaError::io(dir, e))
    })?;
    for d in &output.details {
        let r = d.result.repeat;
        let file = |stem: &str| dir.join(format!("{stem}_r{r}.csv"));
        let (a, b) = (&d.split.a, &d.split.b);
        io::write_predictions(&file("predictions"), a, b, &d.outcome.predictions)?;
        io::write_predictions(&file("predictions_na"), a, b, &d.na)?;
        io::write_with(&file("split"), |w| d.split.write_split_csv(w))?;
        if let Some(t) = &d.split.truth {
            io::write_truth(&file("truth"), a, b, t)?;
        }
        if let Some(report) = &d.outcome.last_report {
            io::write_with(&file("pseudo_labels"), |w| report.write_csv(w, a, b))?;
        }
        if let Some(trace) = &d.outcome.last_trace {
            let path = file("solver_trace");
            io::write_with(&path, |w| trace.write_csv(w).map_err(|e| CdaError::io(&path, e)))?;
        }
        if let Some(c) = &d.result.cda_cmc {
            let path = file("cmc");
            io::write_with(&path, |w| c.write_csv(w).map_err(|e| CdaError::io(&path, e)))?;
        }
    }
    Ok(())
}

/// Text table of mean ± std cells.
pub fn format_summary(manifest: &Manifest) -> String {
    let s = &manifest.summary;
    let mut out = String::new();
    let cell = |m: Option<&MeanStd>| m.map_or("-".to_string(), |m| format_mean_std(m.mean, m.std));
    let _ = writeln!(
        out,
        "{} ({} repeats, seed {})",
        manifest.config.name,
        manifest.repeats.len(),
        manifest.config.seed
    );
    if s.na_cmc.is_empty() {
        let _ = writeln!(out, "{:<8}{:>16}", "method", "accuracy");
        let _ = writeln!(out, "{:<8}{:>16}", "NA", cell(s.na_accuracy.as_ref()));
        let _ = writeln!(out, "{:<8}{:>16}", "CDA", cell(s.cda_accuracy.as_ref()));
    } else {
        let ranks: Vec<usize> = s.cda_cmc.keys().copied().collect();
        let _ = write!(out, "{:<8}{:>16}", "method", "accuracy");
        for r in &ranks {
            let _ = write!(out, "{:>16}", format!("rank-{r}"));
        }
        let _ = writeln!(out);
        for (name, acc, curve) in [
            ("NA", s.na_accuracy.as_ref(), &s.na_cmc),
            ("CDA", s.cda_accuracy.as_ref(), &s.cda_cmc),
        ] {
            let _ = write!(out, "{:<8}{:>16}", name, cell(acc));
            for r in &ranks {
                let _ = write!(out, "{:>16}", cell(curve.get(r)));
            }
            let _ = writeln!(out);
        }
    }
    let _ = writeln!(out, "converged: {}/{}", s.converged, manifest.repeats.len());
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub hyperparams: Hyperparams,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: ExperimentConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16}{:>16}", "variant", "accuracy");
        for r in &self.rows {
            let _ = writeln!(out, "{:<16}{:>16}", r.variant, format_mean_std(r.mean, r.std));
        }
        out
    }
}

/// Full objective and the four single-term removals.
pub fn ablation_variants(h: &Hyperparams) -> Vec<(&'static str, Hyperparams)> {
    vec![
        ("CDA", h.clone()),
        ("Missing G", Hyperparams { lambda_g: 0.0, ..h.clone() }),
        ("Missing U", Hyperparams { lambda_u: 0.0, ..h.clone() }),
        ("Missing Dist_C", Hyperparams { lambda_c: 0.0, ..h.clone() }),
        ("Missing Dist_M", Hyperparams { lambda_m: 0.0, ..h.clone() }),
    ]
}

pub fn run_ablation(config: &ExperimentConfig, parallel: bool) -> Result<AblationTable> {
    config.validate()?;
    let source = Source::load(&config.data)?;
    let mut rows = Vec::new();
    for (variant, h) in ablation_variants(&config.hyperparams) {
        let details = run_repeats(config, &h, &source, parallel)?;
        let accuracies: Vec<f64> = details
            .iter()
            .map(|d| {
                d.result.cda_accuracy.ok_or_else(|| {
                    CdaError::Invalid("ablation needs ground truth for the unlabeled samples".to_string())
                })
            })
            .collect::<Result<_>>()?;
        let (mean, std) = mean_and_std(&accuracies);
        rows.push(AblationRow {
            variant: variant.to_string(),
            hyperparams: h,
            accuracies,
            mean,
            std,
        });
    }
    Ok(AblationTable {
        config: config.clone(),
        rows,
    })
}
