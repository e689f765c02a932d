//! CSV and JSON files: features with weak labels, held-out truth,
//! predictions, and content hashes of inputs.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::domain::{ClassKey, DomainDataset, DomainId, LabelState};
use crate::error::{CdaError, Result};
use crate::pipeline::PredictionResult;
use crate::protocols::GroundTruth;

fn parse_domain(s: &str) -> Option<DomainId> {
    match s.trim() {
        "A" | "a" => Some(DomainId::A),
        "B" | "b" => Some(DomainId::B),
        _ => None,
    }
}

fn parse_class(s: &str) -> Option<ClassKey> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("unknown") {
        Some(ClassKey::Unknown)
    } else {
        s.parse().ok().map(ClassKey::Known)
    }
}

/// Label cell: integer known class, `unknown`, or empty for unlabeled.
fn parse_label(s: &str) -> Option<LabelState> {
    if s.trim().is_empty() {
        return Some(LabelState::Unlabeled);
    }
    parse_class(s).map(|k| match k {
        ClassKey::Known(c) => LabelState::Known(c),
        ClassKey::Unknown => LabelState::Unknown,
    })
}

fn label_cell(l: LabelState) -> String {
    match l {
        LabelState::Known(c) => c.to_string(),
        LabelState::Unknown => "unknown".to_string(),
        LabelState::Unlabeled => String::new(),
    }
}

fn open(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| CdaError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file)))
}

fn create(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CdaError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| CdaError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path, e: csv::Error) -> CdaError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    CdaError::parse(path, line, e.to_string())
}

fn header_check(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for (i, name) in expected.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(CdaError::parse(
                path,
                1,
                format!("expected column {} to be `{name}`", i + 1),
            ));
        }
    }
    Ok(())
}

struct Columns {
    ids: Vec<String>,
    rows: Vec<f64>,
    labels: Vec<LabelState>,
}

/// Reads `id,domain,label,f0,f1,...`. The known-class set of both domains
/// is `known` if given, else every integer label present in the file.
pub fn read_features(
    path: &Path,
    known: Option<&BTreeSet<u32>>,
) -> Result<(DomainDataset, DomainDataset)> {
    let mut reader = open(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    header_check(path, &headers, &["id", "domain", "label"])?;
    let dim = headers.len() - 3;
    if dim == 0 {
        return Err(CdaError::parse(path, 1, "no feature columns"));
    }
    let mut cols = [
        Columns { ids: Vec::new(), rows: Vec::new(), labels: Vec::new() },
        Columns { ids: Vec::new(), rows: Vec::new(), labels: Vec::new() },
    ];
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let domain = parse_domain(&record[1])
            .ok_or_else(|| CdaError::parse(path, line, format!("bad domain `{}`", &record[1])))?;
        let label = parse_label(&record[2])
            .ok_or_else(|| CdaError::parse(path, line, format!("bad label `{}`", &record[2])))?;
        let col = &mut cols[domain as usize];
        for (j, cell) in record.iter().skip(3).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                CdaError::parse(path, line, format!("feature {j} is not a number: `{cell}`"))
            })?;
            if !v.is_finite() {
                return Err(CdaError::parse(path, line, format!("feature {j} is not finite")));
            }
            col.rows.push(v);
        }
        col.ids.push(record[0].to_string());
        col.labels.push(label);
    }
    let known = match known {
        Some(k) => k.clone(),
        None => cols
            .iter()
            .flat_map(|c| c.labels.iter())
            .filter_map(|l| match l {
                LabelState::Known(c) => Some(*c),
                _ => None,
            })
            .collect(),
    };
    let [ca, cb] = cols;
    let build = |domain: DomainId, c: Columns| -> Result<DomainDataset> {
        let n = c.ids.len();
        let features = Array2::from_shape_vec((n, dim), c.rows)
            .map_err(|e| CdaError::Invalid(e.to_string()))?;
        DomainDataset::new(domain, c.ids, features, c.labels, known.clone())
    };
    Ok((build(DomainId::A, ca)?, build(DomainId::B, cb)?))
}

/// Floats are written in shortest round-trip form, so reading back is exact.
pub fn write_features(path: &Path, a: &DomainDataset, b: &DomainDataset) -> Result<()> {
    let mut w = create(path)?;
    let mut header = vec!["id".to_string(), "domain".to_string(), "label".to_string()];
    header.extend((0..a.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for ds in [a, b] {
        for (i, row) in ds.features().outer_iter().enumerate() {
            let mut rec = vec![
                ds.ids()[i].clone(),
                ds.domain().to_string(),
                label_cell(ds.labels()[i]),
            ];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CdaError::io(path, e))
}

fn read_keyed(path: &Path, column: &str) -> Result<Vec<(DomainId, String, ClassKey)>> {
    let mut reader = open(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    header_check(path, &headers, &["id", "domain", column])?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let domain = parse_domain(&record[1])
            .ok_or_else(|| CdaError::parse(path, line, format!("bad domain `{}`", &record[1])))?;
        let class = parse_class(&record[2])
            .ok_or_else(|| CdaError::parse(path, line, format!("bad class `{}`", &record[2])))?;
        out.push((domain, record[0].to_string(), class));
    }
    Ok(out)
}

/// `id,domain,truth` for every sample of both domains.
pub fn write_truth(path: &Path, a: &DomainDataset, b: &DomainDataset, truth: &GroundTruth) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["id", "domain", "truth"]).map_err(|e| csv_err(path, e))?;
    for ds in [a, b] {
        for (id, t) in ds.ids().iter().zip(truth.get(ds.domain())) {
            w.write_record([id.as_str(), &ds.domain().to_string(), &t.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CdaError::io(path, e))
}

/// `id,domain,truth` rows in file order.
pub fn read_truth(path: &Path) -> Result<Vec<(DomainId, String, ClassKey)>> {
    read_keyed(path, "truth")
}

/// `id,domain,predicted` for every unlabeled sample.
pub fn write_predictions(
    path: &Path,
    a: &DomainDataset,
    b: &DomainDataset,
    predictions: &PredictionResult,
) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["id", "domain", "predicted"]).map_err(|e| csv_err(path, e))?;
    for p in &predictions.entries {
        let ds = if p.domain == a.domain() { a } else { b };
        w.write_record([ds.ids()[p.index].as_str(), &p.domain.to_string(), &p.class.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CdaError::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<(DomainId, String, ClassKey)>> {
    read_keyed(path, "predicted")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| CdaError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| CdaError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CdaError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CdaError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CdaError::io(path, e))
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| CdaError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| CdaError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Writes through a closure into a buffered file, creating parent directories.
pub fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CdaError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| CdaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| CdaError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{generate_synthetic, SyntheticSpec};

    #[test]
    fn features_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let split = generate_synthetic(&SyntheticSpec::default(), 4).unwrap();
        let path = dir.path().join("f.csv");
        write_features(&path, &split.a, &split.b).unwrap();
        let (a, b) = read_features(&path, Some(split.a.known_classes())).unwrap();
        assert_eq!(a, split.a);
        assert_eq!(b, split.b);

        let tpath = dir.path().join("t.csv");
        write_truth(&tpath, &split.a, &split.b, &split.truth).unwrap();
        let rows = read_truth(&tpath).unwrap();
        assert_eq!(rows.len(), split.a.len() + split.b.len());
        assert_eq!(rows[0].2, split.truth.a[0]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,domain,label,f0\nx,A,1,0.5\ny,A,1,abc\n").unwrap();
        match read_features(&path, None) {
            Err(CdaError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "id,domain,label,f0\nx,C,1,0.5\n").unwrap();
        assert!(matches!(read_features(&path, None), Err(CdaError::Parse { line: 2, .. })));
        std::fs::write(&path, "id,dom,label,f0\n").unwrap();
        assert!(matches!(read_features(&path, None), Err(CdaError::Parse { line: 1, .. })));
    }

    #[test]
    fn labels_parse_three_ways() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(
            &path,
            "id,domain,label,f0,f1\na0,A,3,0,1\na1,A,unknown,1,1\na2,A,,2,2\nb0,B,,0,0\n",
        )
        .unwrap();
        let (a, b) = read_features(&path, None).unwrap();
        assert_eq!(
            a.labels(),
            &[LabelState::Known(3), LabelState::Unknown, LabelState::Unlabeled]
        );
        assert_eq!(b.len(), 1);
        assert_eq!(a.known_classes(), &[3].into_iter().collect());
    }

    #[test]
    fn sha256_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            sha256_file(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
