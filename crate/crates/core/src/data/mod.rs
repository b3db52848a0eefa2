//! Dataset manifests, label policy, patient-disjoint splits, image decoding
//! and augmentation, plus a synthetic dataset generator.

mod augment;
mod loader;
mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Targets, Task};
use crate::error::{Error, Result};

pub use augment::{augment, augment_with, decode_image, AugmentConfig, AugmentParams, DecodedImage, Mode, IMAGENET_MEAN, IMAGENET_STD};
pub use loader::{sample_rng, worker_count, Dataset, WORKERS_ENV};
pub use synthetic::{generate_synthetic, render_synthetic, GeneratedDataset, SyntheticSpec};

/// One radiology-style label value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RawLabel {
    Positive,
    Negative,
    Uncertain,
    Missing,
}

impl RawLabel {
    fn parse(token: &str) -> Option<Self> {
        match token.trim() {
            "1" | "1.0" => Some(RawLabel::Positive),
            "0" | "0.0" => Some(RawLabel::Negative),
            "-1" | "-1.0" => Some(RawLabel::Uncertain),
            "" => Some(RawLabel::Missing),
            _ => None,
        }
    }

    fn token(self) -> &'static str {
        match self {
            RawLabel::Positive => "1",
            RawLabel::Negative => "0",
            RawLabel::Uncertain => "-1",
            RawLabel::Missing => "",
        }
    }
}

/// U-zero policy: only positives stay positive.
pub fn map_labels_uzero(raw: &[RawLabel]) -> Vec<u8> {
    raw.iter().map(|&l| u8::from(l == RawLabel::Positive)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RecordLabels {
    Multilabel(Vec<RawLabel>),
    Multiclass(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    /// Resolved against the manifest directory when relative.
    pub image_path: PathBuf,
    pub patient_id: String,
    pub labels: RecordLabels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub task: Task,
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
    /// Directory relative image paths are resolved against.
    pub root: PathBuf,
}

/// Column name of the single label column of a multiclass manifest.
pub const CLASS_INDEX_COLUMN: &str = "class_index";

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Label width for multilabel manifests, class count for multiclass.
    /// A multiclass count is taken from `class_names` when it is set and
    /// otherwise inferred from the largest index (at least 2).
    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::MultilabelBinary => self.class_names.len(),
            Task::Multiclass if !self.class_names.is_empty() => self.class_names.len(),
            Task::Multiclass => self
                .records
                .iter()
                .filter_map(|r| match r.labels {
                    RecordLabels::Multiclass(c) => Some(c + 1),
                    RecordLabels::Multilabel(_) => None,
                })
                .max()
                .unwrap_or(0)
                .max(2),
        }
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        let p = &self.records[index].image_path;
        if p.is_absolute() {
            p.clone()
        } else {
            self.root.join(p)
        }
    }

    /// Targets for the given records, with U-zero applied to multilabel rows.
    pub fn targets(&self, indices: &[usize]) -> Result<Targets> {
        let k = self.num_classes();
        match self.task {
            Task::MultilabelBinary => {
                let mut labels = Vec::with_capacity(indices.len() * k);
                for &i in indices {
                    match &self.records[i].labels {
                        RecordLabels::Multilabel(raw) => labels.extend(map_labels_uzero(raw)),
                        RecordLabels::Multiclass(_) => return Err(Error::invalid("multiclass record in multilabel manifest")),
                    }
                }
                Ok(Targets::Multilabel { labels, num_labels: k })
            }
            Task::Multiclass => {
                let classes = indices
                    .iter()
                    .map(|&i| match self.records[i].labels {
                        RecordLabels::Multiclass(c) => Ok(c),
                        RecordLabels::Multilabel(_) => Err(Error::invalid("multilabel record in multiclass manifest")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Targets::Multiclass { classes, num_classes: k })
            }
        }
    }

    /// Writes the manifest in the format [`load_manifest`] reads.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["image_path".to_string(), "patient_id".to_string()];
        match self.task {
            Task::MultilabelBinary => header.extend(self.class_names.iter().cloned()),
            Task::Multiclass => header.push(CLASS_INDEX_COLUMN.into()),
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.image_path.to_string_lossy().into_owned(), r.patient_id.clone()];
            match &r.labels {
                RecordLabels::Multilabel(raw) => row.extend(raw.iter().map(|l| l.token().to_string())),
                RecordLabels::Multiclass(c) => row.push(c.to_string()),
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line: line as usize, msg: msg.into() }
}

/// Reads a manifest. The header is `image_path,patient_id` followed by one
/// column per class (multilabel) or a single `class_index` column
/// (multiclass). Parsing is strict: unknown label tokens, wrong field counts,
/// empty patient ids and duplicate image paths are errors.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(h) => h?,
        None => return Err(parse_err(path, 1, "missing header row")),
    };
    let cols: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    if cols.len() < 3 || cols[0] != "image_path" || cols[1] != "patient_id" {
        return Err(parse_err(path, 1, format!("header must start with image_path,patient_id and name at least one label column, got {cols:?}")));
    }
    let task = if cols.len() == 3 && cols[2] == CLASS_INDEX_COLUMN { Task::Multiclass } else { Task::MultilabelBinary };
    let class_names = match task {
        Task::MultilabelBinary => cols[2..].to_vec(),
        Task::Multiclass => Vec::new(),
    };
    if let Some(dup) = class_names.iter().enumerate().find(|(i, c)| c.is_empty() || class_names[..*i].contains(c)) {
        return Err(parse_err(path, 1, format!("empty or repeated class column {:?}", dup.1)));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rows {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() == 1 && row.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        if row.len() != cols.len() {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", cols.len(), row.len())));
        }
        let image_path = row[0].trim();
        let patient_id = row[1].trim();
        if image_path.is_empty() {
            return Err(parse_err(path, line, "empty image_path"));
        }
        if patient_id.is_empty() {
            return Err(parse_err(path, line, "empty patient_id"));
        }
        if !seen.insert(image_path.to_string()) {
            return Err(parse_err(path, line, format!("duplicate image path {image_path:?}")));
        }
        let labels = match task {
            Task::MultilabelBinary => RecordLabels::Multilabel(
                row.iter()
                    .skip(2)
                    .zip(&class_names)
                    .map(|(tok, class)| {
                        RawLabel::parse(tok)
                            .ok_or_else(|| parse_err(path, line, format!("label {tok:?} for {class:?} is not one of 1, 0, -1 or empty")))
                    })
                    .collect::<Result<_>>()?,
            ),
            Task::Multiclass => RecordLabels::Multiclass(
                row[2].trim().parse().map_err(|_| parse_err(path, line, format!("class index {:?} is not a non-negative integer", &row[2])))?,
            ),
        };
        records.push(Record { image_path: PathBuf::from(image_path), patient_id: patient_id.to_string(), labels });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(DatasetManifest { task, class_names, records, root })
}

/// Requested split sizes, counted in records. The test split receives every
/// record not assigned to train or validation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSizes {
    Fractions { train: f64, validation: f64, test: f64 },
    Counts { train: usize, validation: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

/// Patient-disjoint partition of a manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    /// Patient ids per split, in shuffled assignment order.
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub train_records: Vec<usize>,
    pub validation_records: Vec<usize>,
    pub test_records: Vec<usize>,
}

impl SplitAssignment {
    pub fn records(&self, split: SplitName) -> &[usize] {
        match split {
            SplitName::Train => &self.train_records,
            SplitName::Validation => &self.validation_records,
            SplitName::Test => &self.test_records,
        }
    }

    pub fn patients(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    /// Records of the first `n_patients` training patients. Because the
    /// patient order is fixed per seed, smaller subsets nest inside larger.
    pub fn train_subset(&self, manifest: &DatasetManifest, n_patients: usize) -> Result<Vec<usize>> {
        if n_patients == 0 || n_patients > self.train.len() {
            return Err(Error::invalid(format!(
                "training subset of {n_patients} patients requested; {} available",
                self.train.len()
            )));
        }
        let keep: HashSet<&str> = self.train[..n_patients].iter().map(String::as_str).collect();
        Ok(self.train_records.iter().copied().filter(|&i| keep.contains(manifest.records[i].patient_id.as_str())).collect())
    }
}

/// Shuffles patients with a seeded generator and assigns them greedily to
/// train, then validation, until each record target is met. Patients are
/// never divided, so a split may overshoot its target.
pub fn split_by_patient(manifest: &DatasetManifest, sizes: SplitSizes, seed: u64) -> Result<SplitAssignment> {
    let total = manifest.len();
    let (t_train, t_val) = match sizes {
        SplitSizes::Fractions { train, validation, test } => {
            for f in [train, validation, test] {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::invalid(format!("split fraction {f} outside [0, 1]")));
                }
            }
            if ((train + validation + test) - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("split fractions sum to {}, not 1", train + validation + test)));
            }
            ((train * total as f64).round() as usize, (validation * total as f64).round() as usize)
        }
        SplitSizes::Counts { train, validation } => {
            if train + validation > total {
                return Err(Error::invalid(format!("{train} + {validation} records requested from {total}")));
            }
            (train, validation)
        }
    };
    let t_test = total - (t_train + t_val).min(total);

    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_patient.entry(&r.patient_id).or_default().push(i);
    }
    let mut patients: Vec<&str> = by_patient.keys().copied().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = SplitAssignment {
        seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        train_records: Vec::new(),
        validation_records: Vec::new(),
        test_records: Vec::new(),
    };
    for p in patients {
        let recs = &by_patient[p];
        let (ids, rows) = if out.train_records.len() < t_train {
            (&mut out.train, &mut out.train_records)
        } else if out.validation_records.len() < t_val {
            (&mut out.validation, &mut out.validation_records)
        } else {
            (&mut out.test, &mut out.test_records)
        };
        ids.push(p.to_string());
        rows.extend_from_slice(recs);
    }
    for (name, target, got) in [
        ("train", t_train, out.train_records.len()),
        ("validation", t_val, out.validation_records.len()),
        ("test", t_test, out.test_records.len()),
    ] {
        if target > 0 && got == 0 {
            return Err(Error::invalid(format!(
                "{name} split is empty: earlier splits absorbed every patient (patients cannot be divided)"
            )));
        }
        if got > target {
            log::debug!("{name} split overshoots its target: {got} records for {target}");
        }
    }
    Ok(out)
}

/// Counts records per patient; handy for sanity reports.
pub fn records_per_patient(manifest: &DatasetManifest) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for r in &manifest.records {
        *m.entry(r.patient_id.as_str()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("m.csv");
        std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_four_state_labels() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "image_path,patient_id,a,b\nx1.png,p1,1,\nx2.png,p1,0,-1\nx3.png,p2,-1.0,1.0\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records[0].labels, RecordLabels::Multilabel(vec![RawLabel::Positive, RawLabel::Missing]));
        assert_eq!(m.records[1].labels, RecordLabels::Multilabel(vec![RawLabel::Negative, RawLabel::Uncertain]));
        assert_eq!(m.records[2].labels, RecordLabels::Multilabel(vec![RawLabel::Uncertain, RawLabel::Positive]));
        assert_eq!(m.image_path(0), d.path().join("x1.png"));
        let t = m.targets(&[0, 1, 2]).unwrap();
        assert_eq!(t, Targets::Multilabel { labels: vec![1, 0, 0, 0, 0, 1], num_labels: 2 });
    }

    #[test]
    fn header_only_is_empty() {
        let d = tempfile::tempdir().unwrap();
        let m = load_manifest(&write(d.path(), "image_path,patient_id,a\n")).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn strict_parse_errors_carry_line_numbers() {
        let d = tempfile::tempdir().unwrap();
        let err = load_manifest(&write(d.path(), "image_path,patient_id,a\nx.png,p,1\ny.png,p,2\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = load_manifest(&write(d.path(), "image_path,patient_id,a\nx.png,p,1\nx.png,q,0\n")).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let err = load_manifest(&write(d.path(), "image_path,patient_id,a\nx.png,,1\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = load_manifest(&write(d.path(), "image_path,patient_id,a\nx.png,p\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(load_manifest(&write(d.path(), "path,patient,a\n")).is_err());
    }

    #[test]
    fn multiclass_manifest() {
        let d = tempfile::tempdir().unwrap();
        let m = load_manifest(&write(d.path(), "image_path,patient_id,class_index\na,p,0\nb,q,4\n")).unwrap();
        assert_eq!(m.task, Task::Multiclass);
        assert_eq!(m.num_classes(), 5);
        assert!(load_manifest(&write(d.path(), "image_path,patient_id,class_index\na,p,-1\n")).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let p = write(d.path(), "image_path,patient_id,a,b\nx1.png,p1,1,\nx2.png,p1,0,-1\n");
        let m = load_manifest(&p).unwrap();
        let q = d.path().join("again.csv");
        m.write_csv(&q).unwrap();
        assert_eq!(load_manifest(&q).unwrap(), m);
    }

    #[test]
    fn uzero() {
        use RawLabel::*;
        assert_eq!(map_labels_uzero(&[Positive, Uncertain, Negative, Missing]), vec![1, 0, 0, 0]);
        assert_eq!(map_labels_uzero(&[Positive; 3]), vec![1; 3]);
        assert_eq!(map_labels_uzero(&[Missing; 3]), vec![0; 3]);
    }

    pub(crate) fn manifest_from_counts(counts: &[usize]) -> DatasetManifest {
        let mut records = Vec::new();
        for (p, &n) in counts.iter().enumerate() {
            for k in 0..n {
                records.push(Record {
                    image_path: PathBuf::from(format!("p{p}_{k}.png")),
                    patient_id: format!("p{p}"),
                    labels: RecordLabels::Multilabel(vec![RawLabel::Negative]),
                });
            }
        }
        DatasetManifest { task: Task::MultilabelBinary, class_names: vec!["a".into()], records, root: PathBuf::new() }
    }

    #[test]
    fn split_fractions_and_determinism() {
        let m = manifest_from_counts(&[2; 10]);
        let sizes = SplitSizes::Fractions { train: 0.6, validation: 0.2, test: 0.2 };
        let s = split_by_patient(&m, sizes, 7).unwrap();
        assert_eq!((s.train_records.len(), s.validation_records.len(), s.test_records.len()), (12, 4, 4));
        assert_eq!(s, split_by_patient(&m, sizes, 7).unwrap());
        let all: HashSet<_> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn skewed_patient_overshoots() {
        // patient 0 holds half of the 20 records
        let mut counts = vec![10];
        counts.extend([1; 10]);
        let m = manifest_from_counts(&counts);
        let sizes = SplitSizes::Fractions { train: 0.4, validation: 0.3, test: 0.3 };
        let mut overshoots = 0;
        for seed in 0..40 {
            match split_by_patient(&m, sizes, seed) {
                Ok(s) => {
                    let n = s.train_records.len() + s.validation_records.len() + s.test_records.len();
                    assert_eq!(n, 20);
                    assert!(s.train_records.len() >= 8);
                    overshoots += usize::from(s.train_records.len() > 8);
                }
                // the big patient can leave nothing for a later split
                Err(e) => assert!(e.to_string().contains("empty"), "{e}"),
            }
        }
        assert!(overshoots > 0);
    }

    #[test]
    fn infeasible_split_is_error() {
        let m = manifest_from_counts(&[4]);
        assert!(split_by_patient(&m, SplitSizes::Fractions { train: 0.5, validation: 0.25, test: 0.25 }, 0).is_err());
        assert!(split_by_patient(&m, SplitSizes::Fractions { train: 0.5, validation: 0.2, test: 0.2 }, 0).is_err());
        assert!(split_by_patient(&m, SplitSizes::Counts { train: 4, validation: 1 }, 0).is_err());
    }

    #[test]
    fn subsets_nest() {
        let m = manifest_from_counts(&[2; 30]);
        let s = split_by_patient(&m, SplitSizes::Fractions { train: 0.8, validation: 0.1, test: 0.1 }, 3).unwrap();
        let small: HashSet<_> = s.train_subset(&m, 5).unwrap().into_iter().collect();
        let big: HashSet<_> = s.train_subset(&m, 20).unwrap().into_iter().collect();
        assert_eq!(small.len(), 10);
        assert!(small.is_subset(&big));
        assert!(s.train_subset(&m, 1000).is_err());
    }
}
