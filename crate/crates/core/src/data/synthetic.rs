//! Synthetic chest-film stand-in: a smooth patient-specific background with
//! an oriented texture, faint distractor blobs, and small class-specific
//! lesions whose presence defines the labels. Each finding favours its own
//! band of rows, the way diseases favour anatomical regions.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::augment::DecodedImage;
use super::{split_by_patient, DatasetManifest, RawLabel, Record, RecordLabels, SplitSizes};
use crate::attention::Task;
use crate::error::{Error, Result};
use crate::metrics::roc_auc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub task: Task,
    /// Peak intensity change of a lesion, in `[0, 1]` pixel units.
    pub lesion_amplitude: f64,
    /// Lesion radius as a fraction of the image side.
    pub lesion_radius: f64,
    /// Maximum number of lesions per positive class and image.
    pub max_lesions: usize,
    /// Maximum number of label-free distractor blobs per image.
    pub max_distractors: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Moves background brightness, texture frequency and contrast; 0 is the
    /// source domain, 1 the most distant one.
    pub domain_shift: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_patients: 200,
            images_per_patient: 2,
            image_size: 64,
            n_classes: 2,
            task: Task::MultilabelBinary,
            lesion_amplitude: 0.3,
            lesion_radius: 0.07,
            max_lesions: 2,
            max_distractors: 2,
            noise: 0.06,
            domain_shift: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_patients < 2 || self.images_per_patient == 0 {
            return fail("needs at least 2 patients and 1 image per patient");
        }
        if self.image_size < 8 {
            return fail("image_size must be at least 8");
        }
        match self.task {
            Task::Multiclass if self.n_classes < 2 => return fail("multiclass needs at least 2 classes"),
            _ if self.n_classes == 0 => return fail("n_classes must be positive"),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.domain_shift) {
            return fail("domain_shift must lie in [0, 1]");
        }
        if !(self.lesion_radius > 0.0 && self.lesion_radius < 0.5) || self.noise < 0.0 || self.max_lesions == 0 {
            return fail("lesion radius, lesion count or noise out of range");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(|c| format!("finding{c}")).collect()
    }
}

/// Result of [`generate_synthetic`].
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    /// Mean validation AUC of a nearest-centroid probe on raw pixels.
    pub probe_auc: f64,
}

struct Background {
    base: f64,
    grad: (f64, f64),
    freq: f64,
    theta: f64,
    phase: f64,
    texture: f64,
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng, shift: f64) -> Self {
        Self {
            base: 0.35 + 0.08 * rng.random_range(-1.0..1.0) + 0.2 * shift,
            grad: (0.08 * rng.random_range(-1.0..1.0), 0.08 * rng.random_range(-1.0..1.0)),
            freq: 2.0 + 3.0 * rng.random::<f64>() + 8.0 * shift,
            theta: rng.random_range(0.0..PI),
            phase: rng.random_range(0.0..2.0 * PI),
            texture: 0.04 + 0.08 * shift,
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let along = u * self.theta.cos() + v * self.theta.sin();
        self.base + self.grad.0 * (u - 0.5) + self.grad.1 * (v - 0.5) + self.texture * (2.0 * PI * self.freq * along + self.phase).sin()
    }
}

/// Intensity profile of a lesion of `class` at normalised distance `d`
/// (distance over radius). Even classes are filled spots, odd classes rings;
/// the sign alternates every two classes.
fn lesion_profile(class: usize, d: f64) -> f64 {
    let sign = if (class / 2).is_multiple_of(2) { 1.0 } else { -1.0 };
    let shape = if class.is_multiple_of(2) { (-d * d * 2.0).exp() } else { (-((d - 1.0) * 3.0).powi(2)).exp() };
    sign * shape
}

fn patient_labels(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<RecordLabels> {
    let n = spec.n_patients;
    match spec.task {
        Task::MultilabelBinary => {
            let mut rows = vec![vec![RawLabel::Negative; spec.n_classes]; n];
            for c in 0..spec.n_classes {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                for &p in &order[..n / 2] {
                    rows[p][c] = RawLabel::Positive;
                }
            }
            rows.into_iter().map(RecordLabels::Multilabel).collect()
        }
        Task::Multiclass => {
            let mut classes: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
            classes.shuffle(rng);
            classes.into_iter().map(RecordLabels::Multiclass).collect()
        }
    }
}

fn positive_classes(labels: &RecordLabels) -> Vec<usize> {
    match labels {
        RecordLabels::Multilabel(raw) => (0..raw.len()).filter(|&c| raw[c] == RawLabel::Positive).collect(),
        RecordLabels::Multiclass(c) => vec![*c],
    }
}

/// Renders the dataset in memory. Image paths are relative
/// (`images/<patient>_<k>.png`) and the manifest root is empty.
pub fn render_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(DatasetManifest, Vec<DecodedImage>)> {
    spec.validate()?;
    let s = spec.image_size;
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = patient_labels(spec, &mut label_rng);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
    let radius = spec.lesion_radius * s as f64;

    let mut records = Vec::new();
    let mut images = Vec::new();
    for (p, lab) in labels.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64 + 1);
        let bg = Background::sample(&mut rng, spec.domain_shift);
        let positives = positive_classes(&lab);
        for k in 0..spec.images_per_patient {
            let mut field: Vec<f64> = (0..s * s)
                .map(|i| {
                    let (y, x) = (i / s, i % s);
                    bg.at(x as f64 / s as f64, y as f64 / s as f64)
                })
                .collect();
            let jitter = 0.03 * rng.random_range(-1.0..1.0);
            field.iter_mut().for_each(|v| *v += jitter);

            let blob = |field: &mut [f64], cx: f64, cy: f64, r: f64, f: &dyn Fn(f64) -> f64| {
                let reach = (2.0 * r).ceil() as isize + 1;
                for y in (cy as isize - reach).max(0)..(cy as isize + reach).min(s as isize) {
                    for x in (cx as isize - reach).max(0)..(cx as isize + reach).min(s as isize) {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() / r;
                        field[y as usize * s + x as usize] += f(d);
                    }
                }
            };
            let n_distract = rng.random_range(0..=spec.max_distractors);
            for _ in 0..n_distract {
                let (cx, cy) = (rng.random_range(0.0..s as f64), rng.random_range(0.0..s as f64));
                let amp = 0.5 * spec.lesion_amplitude * if rng.random::<bool>() { 1.0 } else { -1.0 };
                blob(&mut field, cx, cy, 2.5 * radius, &|d| amp * (-d * d * 2.0).exp());
            }
            let margin = (2.0 * radius).min(s as f64 / 4.0);
            for &c in &positives {
                let n = rng.random_range(1..=spec.max_lesions);
                // each finding has a preferred band of rows
                let band = s as f64 / (spec.n_classes + 1) as f64;
                let centre = band * (c + 1) as f64;
                let (lo, hi) = ((centre - band / 2.0).max(margin), (centre + band / 2.0).min(s as f64 - margin));
                for _ in 0..n {
                    let cx = rng.random_range(margin..s as f64 - margin);
                    let cy = if hi > lo { rng.random_range(lo..hi) } else { centre };
                    let amp = spec.lesion_amplitude;
                    blob(&mut field, cx, cy, radius, &|d| amp * lesion_profile(c, d));
                }
            }
            let data = field
                .iter()
                .map(|&v| {
                    let v = v + noise.sample(&mut rng) * f64::from(u8::from(spec.noise > 0.0));
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                })
                .collect();
            images.push(DecodedImage::new(s, s, 1, data)?);
            let pid = format!("P{p:05}");
            records.push(Record {
                image_path: PathBuf::from(format!("images/{pid}_{k}.png")),
                patient_id: pid,
                labels: lab.clone(),
            });
        }
    }
    let class_names = match spec.task {
        Task::MultilabelBinary => spec.class_names(),
        Task::Multiclass => Vec::new(),
    };
    Ok((DatasetManifest { task: spec.task, class_names, records, root: PathBuf::new() }, images))
}

/// Mean one-vs-rest validation AUC of a nearest-centroid probe on raw pixels.
fn probe_auc(manifest: &DatasetManifest, images: &[DecodedImage], seed: u64) -> Result<f64> {
    let split = split_by_patient(manifest, SplitSizes::Fractions { train: 0.7, validation: 0.3, test: 0.0 }, seed)?;
    let k = manifest.num_classes();
    let px = |i: usize| images[i].data.iter().map(|&v| v as f64 / 255.0);
    let dim = images[0].data.len();
    let tr = manifest.targets(&split.train_records)?;
    let va = manifest.targets(&split.validation_records)?;
    let label = |t: &crate::attention::Targets, row: usize, c: usize| match t {
        crate::attention::Targets::Multilabel { labels, num_labels } => labels[row * num_labels + c] == 1,
        crate::attention::Targets::Multiclass { classes, .. } => classes[row] == c,
    };
    let mut aucs = Vec::new();
    for c in 0..k {
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (row, &i) in split.train_records.iter().enumerate() {
            let side = usize::from(label(&tr, row, c));
            counts[side] += 1;
            for (a, v) in sums[side].iter_mut().zip(px(i)) {
                *a += v;
            }
        }
        if counts.contains(&0) {
            continue;
        }
        let w: Vec<f64> = (0..dim).map(|j| sums[1][j] / counts[1] as f64 - sums[0][j] / counts[0] as f64).collect();
        let scores: Vec<f64> = split.validation_records.iter().map(|&i| px(i).zip(&w).map(|(v, w)| v * w).sum()).collect();
        let truth: Vec<bool> = (0..split.validation_records.len()).map(|row| label(&va, row, c)).collect();
        if let Ok(a) = roc_auc(&scores, &truth) {
            aucs.push(a);
        }
    }
    if aucs.is_empty() {
        return Err(Error::Metric("probe AUC undefined: validation split lacks both label values".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Writes PNG images and `manifest.csv` under `out_dir`, then runs the
/// linear-probe learnability self-check.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out_dir: &Path) -> Result<GeneratedDataset> {
    let (mut manifest, images) = render_synthetic(spec, seed)?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (r, img) in manifest.records.iter().zip(&images) {
        let path = out_dir.join(&r.image_path);
        image::GrayImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .ok_or_else(|| Error::invalid("image buffer size mismatch"))?
            .save(&path)
            .map_err(|e| Error::Image { path: path.clone(), msg: e.to_string() })?;
    }
    let manifest_path = out_dir.join("manifest.csv");
    manifest.write_csv(&manifest_path)?;
    manifest.root = out_dir.to_path_buf();
    let probe_auc = probe_auc(&manifest, &images, seed)?;
    if probe_auc <= 0.6 {
        log::warn!("synthetic dataset is hard for a linear probe: validation AUC {probe_auc:.3}");
    }
    let spec_path = out_dir.join("synthetic_spec.toml");
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    Ok(GeneratedDataset { manifest_path, manifest, probe_auc })
}
