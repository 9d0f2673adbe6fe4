//! YOLO polygon labels, patient grouping and leakage-free splitting.
//!
//! A dataset directory holds `images/<id>.png`, `labels/<id>.txt` and an
//! optional `dimensions.json` sidecar mapping image ids to `[width, height]`.
//! Splitting assigns whole patients, never individual frames, so no patient's
//! images can appear on both sides of an evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Polygon;
use crate::rng;

/// Default patient pattern for HC18-style names: `123_HC.png`, `123_2HC.png`.
pub const DEFAULT_PATIENT_PATTERN: &str = r"^(\d+)_\d*HC";

pub const DIMENSIONS_FILE: &str = "dimensions.json";
pub const MANIFEST_FILE: &str = "split_manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("{path}: line {line}: {reason}")]
    MalformedFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("filename {0:?} does not match the patient-id pattern")]
    NoMatch(String),
    #[error("patient-id pattern must have exactly one capture group: {0}")]
    InvalidPattern(String),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("need at least 3 patients to split, found {0}")]
    TooFewPatients(usize),
    #[error("no dimensions known for image {0}")]
    MissingDimensions(String),
    #[error("image {0} has zero width or height")]
    InvalidDimensions(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DatasetError {
    let path = path.into();
    move |source| DatasetError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassId {
    Brain = 0,
    Csp = 1,
    Lv = 2,
}

impl ClassId {
    pub const ALL: [ClassId; 3] = [ClassId::Brain, ClassId::Csp, ClassId::Lv];

    pub fn from_index(index: i64) -> Option<ClassId> {
        match index {
            0 => Some(ClassId::Brain),
            1 => Some(ClassId::Csp),
            2 => Some(ClassId::Lv),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Brain => "Brain",
            ClassId::Csp => "CSP",
            ClassId::Lv => "LV",
        }
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub class: ClassId,
    /// Normalized coordinates.
    pub polygon: Polygon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<InstanceAnnotation>,
}

impl ImageRecord {
    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for inst in &self.instances {
            counts[inst.class.index()] += 1;
        }
        counts
    }
}

/// Parse a YOLO segmentation label file: one `class x1 y1 x2 y2 ...` line per
/// instance, coordinates normalized to `[0, 1]`. Blank lines are ignored.
pub fn parse_label_file(text: &str) -> Result<Vec<InstanceAnnotation>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let bad = |reason: String| DatasetError::MalformedLine { line, reason };
        let mut tokens = raw.split_whitespace();
        let Some(class_tok) = tokens.next() else {
            continue;
        };
        let class_index: i64 = class_tok
            .parse()
            .map_err(|_| bad(format!("class {class_tok:?} is not an integer")))?;
        let class = ClassId::from_index(class_index)
            .ok_or_else(|| bad(format!("unknown class {class_index}")))?;
        let coords = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| bad(format!("coordinate {t:?} is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if coords.len() % 2 != 0 {
            return Err(bad(format!("odd coordinate count {}", coords.len())));
        }
        if coords.len() < 6 {
            return Err(bad(format!(
                "{} vertices, need at least 3",
                coords.len() / 2
            )));
        }
        if let Some(c) = coords.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(bad(format!("coordinate {c} outside [0, 1]")));
        }
        let vertices = coords.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        out.push(InstanceAnnotation {
            class,
            polygon: Polygon::normalized(vertices),
        });
    }
    Ok(out)
}

/// Inverse of [`parse_label_file`], six decimals per coordinate.
pub fn serialize_labels(instances: &[InstanceAnnotation]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&inst.class.index().to_string());
        for &(x, y) in &inst.polygon.vertices {
            out.push_str(&format!(" {x:.6} {y:.6}"));
        }
        out.push('\n');
    }
    out
}

pub fn patient_pattern(pattern: &str) -> Result<Regex> {
    let re = Regex::new(pattern).map_err(|e| DatasetError::InvalidPattern(e.to_string()))?;
    if re.captures_len() != 2 {
        return Err(DatasetError::InvalidPattern(pattern.to_string()));
    }
    Ok(re)
}

pub fn extract_patient_id(filename: &str, pattern: &Regex) -> Result<String> {
    pattern
        .captures(filename)
        .and_then(|c| c.get(1))
        .map(|m| m.as_str().to_string())
        .ok_or_else(|| DatasetError::NoMatch(filename.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub patients: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, patient_id: &str) -> Option<Split> {
        self.patients.get(patient_id).copied()
    }

    pub fn patients_in(&self, split: Split) -> BTreeSet<&str> {
        self.patients
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    /// Records of each split, sorted by image id.
    pub fn partition<'a>(&self, records: &'a [ImageRecord]) -> [Vec<&'a ImageRecord>; 3] {
        let mut parts: [Vec<&ImageRecord>; 3] = Default::default();
        for r in records {
            if let Some(s) = self.split_of(&r.patient_id) {
                parts[s.index()].push(r);
            }
        }
        for p in &mut parts {
            p.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        }
        parts
    }
}

#[derive(Default, Clone, Copy)]
struct Tally {
    images: usize,
    classes: [usize; 3],
}

impl Tally {
    fn add(&mut self, other: &Tally) {
        self.images += other.images;
        for c in 0..3 {
            self.classes[c] += other.classes[c];
        }
    }

    fn instances(&self) -> usize {
        self.classes.iter().sum()
    }
}

/// Assign patients to train/val/test.
///
/// Patients are sorted by id, shuffled with the seeded stream, then stably
/// sorted by descending instance count; each is placed greedily into the
/// split whose image and per-class quotas are least filled, weighted by the
/// patient's own class mix.
pub fn stratified_patient_split(
    records: &[ImageRecord],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    if ratios.iter().any(|&r| r.is_nan() || r <= 0.0)
        || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DatasetError::InvalidRatios(ratios));
    }
    let mut per_patient: BTreeMap<&str, Tally> = BTreeMap::new();
    let mut total = Tally::default();
    for r in records {
        let t = per_patient.entry(r.patient_id.as_str()).or_default();
        let counts = r.class_counts();
        let one = Tally {
            images: 1,
            classes: counts,
        };
        t.add(&one);
        total.add(&one);
    }
    if per_patient.len() < 3 {
        return Err(DatasetError::TooFewPatients(per_patient.len()));
    }

    let mut order: Vec<(&str, Tally)> = per_patient.into_iter().collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    order.sort_by_key(|p| std::cmp::Reverse(p.1.instances()));

    let mut filled = [Tally::default(); 3];
    let mut patients = BTreeMap::new();
    for (pid, tally) in order {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (s, fill) in filled.iter().enumerate() {
            let score = deficit_score(fill, &tally, &total, ratios[s]);
            if score > best_score {
                best_score = score;
                best = s;
            }
        }
        filled[best].add(&tally);
        patients.insert(pid.to_string(), Split::ALL[best]);
    }
    Ok(SplitAssignment {
        seed,
        ratios,
        patients,
    })
}

fn deficit_score(fill: &Tally, patient: &Tally, total: &Tally, ratio: f64) -> f64 {
    let image_term = 1.0 - fill.images as f64 / (ratio * total.images as f64);
    let n = patient.instances();
    if n == 0 {
        return image_term;
    }
    let class_term: f64 = (0..3)
        .filter(|&c| patient.classes[c] > 0)
        .map(|c| {
            let share = patient.classes[c] as f64 / n as f64;
            share * (1.0 - fill.classes[c] as f64 / (ratio * total.classes[c] as f64))
        })
        .sum();
    0.5 * image_term + 0.5 * class_term
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub brain: usize,
    pub csp: usize,
    pub lv: usize,
}

impl ClassCounts {
    pub fn from_array(c: [usize; 3]) -> Self {
        Self {
            brain: c[0],
            csp: c[1],
            lv: c[2],
        }
    }

    pub fn total(&self) -> usize {
        self.brain + self.csp + self.lv
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub num_images: usize,
    pub images: Vec<String>,
    pub class_counts: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummaries {
    pub train: SplitSummary,
    pub val: SplitSummary,
    pub test: SplitSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub num_images: usize,
    pub class_counts: ClassCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: Ratios,
    pub splits: SplitSummaries,
    pub totals: Totals,
}

impl SplitManifest {
    pub fn build(assignment: &SplitAssignment, records: &[ImageRecord]) -> Self {
        let parts = assignment.partition(records);
        let summary = |part: &Vec<&ImageRecord>| {
            let mut counts = [0; 3];
            for r in part {
                for (c, n) in r.class_counts().into_iter().enumerate() {
                    counts[c] += n;
                }
            }
            SplitSummary {
                num_images: part.len(),
                images: part.iter().map(|r| r.image_id.clone()).collect(),
                class_counts: ClassCounts::from_array(counts),
            }
        };
        let [train, val, test] = parts.each_ref().map(summary);
        let totals = Totals {
            num_images: train.num_images + val.num_images + test.num_images,
            class_counts: ClassCounts {
                brain: train.class_counts.brain + val.class_counts.brain + test.class_counts.brain,
                csp: train.class_counts.csp + val.class_counts.csp + test.class_counts.csp,
                lv: train.class_counts.lv + val.class_counts.lv + test.class_counts.lv,
            },
        };
        let [r_train, r_val, r_test] = assignment.ratios;
        SplitManifest {
            seed: assignment.seed,
            ratios: Ratios {
                train: r_train,
                val: r_val,
                test: r_test,
            },
            splits: SplitSummaries { train, val, test },
            totals,
        }
    }

    pub fn split(&self, split: Split) -> &SplitSummary {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Aligned text table: one row per split plus a totals row.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<6} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "Split", "Images", "Brain", "CSP", "LV", "Total"
        );
        let row = |name: &str, images: usize, c: &ClassCounts| {
            format!(
                "{:<6} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
                name,
                images,
                c.brain,
                c.csp,
                c.lv,
                c.total()
            )
        };
        for s in Split::ALL {
            let sum = self.split(s);
            out.push_str(&row(s.name(), sum.num_images, &sum.class_counts));
        }
        out.push_str(&row(
            "all",
            self.totals.num_images,
            &self.totals.class_counts,
        ));
        out
    }
}

/// Write `train.txt`, `val.txt`, `test.txt` and the JSON manifest into `out_dir`.
pub fn write_split_manifest(
    assignment: &SplitAssignment,
    records: &[ImageRecord],
    out_dir: &Path,
) -> Result<SplitManifest> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let manifest = SplitManifest::build(assignment, records);
    for s in Split::ALL {
        let mut listing = manifest.split(s).images.join("\n");
        if !listing.is_empty() {
            listing.push('\n');
        }
        let path = out_dir.join(format!("{}.txt", s.name()));
        fs::write(&path, listing).map_err(io_err(&path))?;
    }
    let path = out_dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Copy each split's images, labels and dimension entries into
/// `out_dir/<split>/`.
pub fn materialize_splits(
    assignment: &SplitAssignment,
    records: &[ImageRecord],
    src_dir: &Path,
    out_dir: &Path,
) -> Result<()> {
    for (split, part) in Split::ALL.into_iter().zip(assignment.partition(records)) {
        let dst = out_dir.join(split.name());
        let images = dst.join("images");
        let labels = dst.join("labels");
        fs::create_dir_all(&images).map_err(io_err(&images))?;
        fs::create_dir_all(&labels).map_err(io_err(&labels))?;
        let mut dims = BTreeMap::new();
        for r in part {
            let img = src_dir.join("images").join(format!("{}.png", r.image_id));
            if img.exists() {
                let to = images.join(format!("{}.png", r.image_id));
                fs::copy(&img, &to).map_err(io_err(&to))?;
            }
            let to = labels.join(format!("{}.txt", r.image_id));
            fs::write(&to, serialize_labels(&r.instances)).map_err(io_err(&to))?;
            dims.insert(r.image_id.clone(), [r.width, r.height]);
        }
        write_dimensions(&dst, &dims)?;
    }
    Ok(())
}

pub fn read_dimensions(dir: &Path) -> Result<BTreeMap<String, [usize; 2]>> {
    let path = dir.join(DIMENSIONS_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Format {
        path,
        reason: e.to_string(),
    })
}

pub fn write_dimensions(dir: &Path, dims: &BTreeMap<String, [usize; 2]>) -> Result<()> {
    let path = dir.join(DIMENSIONS_FILE);
    let mut json = serde_json::to_string_pretty(dims).expect("dimensions serialize");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))
}

fn stems(dir: &Path, ext: &str) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Load every image in a dataset directory, sorted by image id.
///
/// Dimensions come from the sidecar when present, otherwise from the PNG
/// header. Images without a label file have no instances.
pub fn load_records(dir: &Path, pattern: &Regex) -> Result<Vec<ImageRecord>> {
    let image_dir = dir.join("images");
    let label_dir = dir.join("labels");
    let dims = read_dimensions(dir)?;
    let mut ids = stems(&image_dir, "png")?;
    ids.extend(stems(&label_dir, "txt")?);

    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let image_path = image_dir.join(format!("{id}.png"));
        let (width, height) = match dims.get(&id) {
            Some(&[w, h]) => (w, h),
            None if image_path.exists() => {
                let (w, h) =
                    image::image_dimensions(&image_path).map_err(|e| DatasetError::Format {
                        path: image_path.clone(),
                        reason: e.to_string(),
                    })?;
                (w as usize, h as usize)
            }
            None => return Err(DatasetError::MissingDimensions(id)),
        };
        if width == 0 || height == 0 {
            return Err(DatasetError::InvalidDimensions(id));
        }
        let label_path = label_dir.join(format!("{id}.txt"));
        let instances = if label_path.exists() {
            let text = fs::read_to_string(&label_path).map_err(io_err(&label_path))?;
            parse_label_file(&text).map_err(|e| match e {
                DatasetError::MalformedLine { line, reason } => DatasetError::MalformedFile {
                    path: label_path.clone(),
                    line,
                    reason,
                },
                other => other,
            })?
        } else {
            Vec::new()
        };
        let patient_id = extract_patient_id(&format!("{id}.png"), pattern)?;
        records.push(ImageRecord {
            image_id: id,
            patient_id,
            width,
            height,
            instances,
        });
    }
    Ok(records)
}
