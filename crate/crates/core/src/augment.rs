//! Domain-guided copy-paste.
//!
//! CSP and LV structures are cut from donor images and pasted into
//! brain-only acceptors at the donor's offset from its own brain centroid.
//! A paste is kept only if enough of it lands inside the acceptor's brain.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, ClassId, DatasetError, ImageRecord, InstanceAnnotation};
use crate::geometry::{self, BinaryMask, GeometryError, Polygon};
use crate::rng;

pub const MARKER_FILE: &str = ".domain_augmented.json";
pub const AUGMENTED_SUFFIX: &str = "_aug";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("image {0:?} has no brain instance")]
    MissingBrain(String),
    #[error("image {image_id:?} has no instance {index}")]
    InstanceOutOfRange { image_id: String, index: usize },
    #[error("size mismatch: image {image:?} vs mask {mask:?}")]
    SizeMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("invalid paste spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("{path}: unreadable marker: {reason}")]
    Marker { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, AugmentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AugmentError + '_ {
    move |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A donor structure: the record and the index of its CSP or LV instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DonorEntry {
    pub record: ImageRecord,
    pub instance: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DonorPool {
    /// Images with exactly one Brain instance and nothing else.
    pub acceptors: Vec<ImageRecord>,
    pub csp_donors: Vec<DonorEntry>,
    pub lv_donors: Vec<DonorEntry>,
}

impl DonorPool {
    pub fn donors(&self, class: ClassId) -> &[DonorEntry] {
        match class {
            ClassId::Csp => &self.csp_donors,
            ClassId::Lv => &self.lv_donors,
            ClassId::Brain => &[],
        }
    }
}

pub fn categorize(records: &[ImageRecord]) -> DonorPool {
    let mut pool = DonorPool::default();
    for r in records {
        let [brain, csp, lv] = r.class_counts();
        if brain == 0 {
            continue;
        }
        if brain == 1 && csp == 0 && lv == 0 {
            pool.acceptors.push(r.clone());
            continue;
        }
        for (i, inst) in r.instances.iter().enumerate() {
            let entry = DonorEntry {
                record: r.clone(),
                instance: i,
            };
            match inst.class {
                ClassId::Csp => pool.csp_donors.push(entry),
                ClassId::Lv => pool.lv_donors.push(entry),
                ClassId::Brain => {}
            }
        }
    }
    pool
}

fn brain_mask(record: &ImageRecord) -> Result<BinaryMask> {
    let brain = record
        .instances
        .iter()
        .find(|i| i.class == ClassId::Brain)
        .ok_or_else(|| AugmentError::MissingBrain(record.image_id.clone()))?;
    Ok(geometry::rasterize(
        &brain.polygon,
        record.width,
        record.height,
    )?)
}

fn instance_mask(record: &ImageRecord, index: usize) -> Result<BinaryMask> {
    let inst = record
        .instances
        .get(index)
        .ok_or_else(|| AugmentError::InstanceOutOfRange {
            image_id: record.image_id.clone(),
            index,
        })?;
    Ok(geometry::rasterize(
        &inst.polygon,
        record.width,
        record.height,
    )?)
}

/// Pixel offset of a structure's centroid from the brain centroid of the
/// same image.
pub fn compute_offset(donor: &ImageRecord, instance_index: usize) -> Result<(f64, f64)> {
    let brain = brain_mask(donor)?;
    let structure = instance_mask(donor, instance_index)?;
    let (bx, by) = geometry::centroid(&brain)?;
    let (sx, sy) = geometry::centroid(&structure)?;
    Ok((sx - bx, sy - by))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasteSpec {
    pub delta: (f64, f64),
    pub alpha: f64,
    pub min_overlap: f64,
}

impl PasteSpec {
    pub fn new(delta: (f64, f64), alpha: f64, min_overlap: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(AugmentError::InvalidSpec(format!(
                "alpha {alpha} outside (0, 1]"
            )));
        }
        if !(min_overlap > 0.0 && min_overlap <= 1.0) {
            return Err(AugmentError::InvalidSpec(format!(
                "min_overlap {min_overlap} outside (0, 1]"
            )));
        }
        Ok(Self {
            delta,
            alpha,
            min_overlap,
        })
    }
}

/// Donor pixels together with the structure mask in donor coordinates.
#[derive(Debug, Clone)]
pub struct DonorPatch {
    pub image: GrayImage,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct AugmentedResult {
    pub image: GrayImage,
    /// Pasted structure in acceptor coordinates.
    pub mask: BinaryMask,
    /// Re-extracted outlines of `mask`, normalized.
    pub polygons: Vec<Polygon>,
    pub overlap: f64,
    pub shift: (i64, i64),
}

#[derive(Debug, Clone)]
pub enum PasteOutcome {
    Accepted(AugmentedResult),
    Rejected { overlap: f64 },
}

impl PasteOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, PasteOutcome::Accepted(_))
    }
}

fn check_size(image: &GrayImage, mask: &BinaryMask) -> Result<()> {
    let dims = (image.width() as usize, image.height() as usize);
    if dims != (mask.width(), mask.height()) {
        return Err(AugmentError::SizeMismatch {
            image: dims,
            mask: (mask.width(), mask.height()),
        });
    }
    Ok(())
}

/// Denominator `alpha` is snapped to before blending.
pub const ALPHA_SCALE: u32 = 10_000;

/// `round(alpha·donor + (1 − alpha)·acceptor)`, ties to even, computed in
/// integers with `alpha` taken to four decimals.
pub fn blend(donor: u8, acceptor: u8, alpha: f64) -> u8 {
    let a = (alpha.clamp(0.0, 1.0) * ALPHA_SCALE as f64).round() as u32;
    let num = a * donor as u32 + (ALPHA_SCALE - a) * acceptor as u32;
    let (q, r) = (num / ALPHA_SCALE, num % ALPHA_SCALE);
    let up = 2 * r > ALPHA_SCALE || (2 * r == ALPHA_SCALE && q % 2 == 1);
    (q + up as u32) as u8
}

/// Paste `donor` into `acceptor` so the structure centroid lands at the
/// acceptor brain centroid plus `spec.delta`.
///
/// The overlap fraction is measured against the whole donor structure, so
/// pixels shifted off the image count as outside the brain. Below
/// `spec.min_overlap` the paste is rejected.
pub fn paste(
    acceptor: &GrayImage,
    acceptor_brain: &BinaryMask,
    donor: &DonorPatch,
    spec: &PasteSpec,
) -> Result<PasteOutcome> {
    check_size(acceptor, acceptor_brain)?;
    check_size(&donor.image, &donor.mask)?;
    let (bx, by) = geometry::centroid(acceptor_brain)?;
    let (cx, cy) = geometry::centroid(&donor.mask)?;
    let sx = (bx + spec.delta.0 - cx).round_ties_even() as i64;
    let sy = (by + spec.delta.1 - cy).round_ties_even() as i64;

    let (w, h) = (acceptor_brain.width(), acceptor_brain.height());
    let mut pasted = BinaryMask::new(w, h)?;
    let mut sources = Vec::new();
    for (x, y) in donor.mask.iter_set() {
        let (tx, ty) = (x as i64 + sx, y as i64 + sy);
        if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
            pasted.set(tx as usize, ty as usize, true);
            sources.push(((x, y), (tx as usize, ty as usize)));
        }
    }
    let inside = pasted.intersection_count(acceptor_brain)?;
    let overlap = inside as f64 / donor.mask.count() as f64;
    if overlap < spec.min_overlap {
        return Ok(PasteOutcome::Rejected { overlap });
    }

    let mut image = acceptor.clone();
    for ((x, y), (tx, ty)) in sources {
        let d = donor.image.get_pixel(x as u32, y as u32)[0];
        let px = image.get_pixel_mut(tx as u32, ty as u32);
        px[0] = blend(d, px[0], spec.alpha);
    }
    let polygons = geometry::extract_contours(&pasted)
        .into_iter()
        .map(|p| p.to_normalized(w, h))
        .collect();
    Ok(PasteOutcome::Accepted(AugmentedResult {
        image,
        mask: pasted,
        polygons,
        overlap,
        shift: (sx, sy),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub alpha: f64,
    pub min_overlap: f64,
    /// Paste attempts per (acceptor, class, paste).
    pub retries: usize,
    /// Pastes attempted per class for each acceptor.
    pub pastes_per_class: usize,
    /// Worker threads; 0 uses all available.
    pub jobs: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            min_overlap: 0.70,
            retries: 10,
            pastes_per_class: 1,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassTally {
    pub attempts: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl ClassTally {
    fn add(&mut self, other: &ClassTally) {
        self.attempts += other.attempts;
        self.accepted += other.accepted;
        self.rejected += other.rejected;
    }
}

/// Contents of the marker file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub seed: u64,
    pub attempts: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub per_class: BTreeMap<String, ClassTally>,
    pub acceptors: usize,
    pub augmented_images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OfflineRun {
    Applied(AugmentationReport),
    AlreadyAugmented(AugmentationReport),
}

impl OfflineRun {
    pub fn report(&self) -> &AugmentationReport {
        match self {
            OfflineRun::Applied(r) | OfflineRun::AlreadyAugmented(r) => r,
        }
    }
}

struct Donor<'a> {
    entry: &'a DonorEntry,
    delta: (f64, f64),
}

struct AcceptorOutcome {
    image_id: String,
    tallies: [ClassTally; 2],
    output: Option<(GrayImage, Vec<InstanceAnnotation>)>,
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|e| AugmentError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

fn augment_acceptor(
    dir: &Path,
    acceptor: &ImageRecord,
    donors: [&[Donor]; 2],
    config: &AugmentConfig,
    seed: u64,
) -> Result<AcceptorOutcome> {
    let image_dir = dir.join("images");
    let mut image = read_gray(&image_dir.join(format!("{}.png", acceptor.image_id)))?;
    let brain = brain_mask(acceptor)?;
    check_size(&image, &brain)?;
    let mut rng = rng::stream(seed, &format!("augment/{}", acceptor.image_id));
    let mut tallies = [ClassTally::default(); 2];
    let mut occupied = BinaryMask::new(acceptor.width, acceptor.height)?;
    let mut instances = acceptor.instances.clone();

    for (slot, class) in [ClassId::Csp, ClassId::Lv].into_iter().enumerate() {
        let pool = donors[slot];
        if pool.is_empty() {
            continue;
        }
        for _ in 0..config.pastes_per_class {
            for _ in 0..config.retries {
                let donor = &pool[rng.random_range(0..pool.len())];
                tallies[slot].attempts += 1;
                let record = &donor.entry.record;
                let patch = DonorPatch {
                    image: read_gray(&image_dir.join(format!("{}.png", record.image_id)))?,
                    mask: instance_mask(record, donor.entry.instance)?,
                };
                let spec = PasteSpec::new(donor.delta, config.alpha, config.min_overlap)?;
                match paste(&image, &brain, &patch, &spec)? {
                    PasteOutcome::Accepted(res) if res.mask.intersection_count(&occupied)? == 0 => {
                        log::debug!(
                            "{}: {} from {} accepted, overlap {:.3}",
                            acceptor.image_id,
                            class,
                            record.image_id,
                            res.overlap
                        );
                        occupied = occupied.union(&res.mask)?;
                        image = res.image;
                        instances.extend(
                            res.polygons
                                .into_iter()
                                .map(|polygon| InstanceAnnotation { class, polygon }),
                        );
                        tallies[slot].accepted += 1;
                        break;
                    }
                    _ => tallies[slot].rejected += 1,
                }
            }
        }
    }
    let output = (tallies[0].accepted + tallies[1].accepted > 0).then_some((image, instances));
    Ok(AcceptorOutcome {
        image_id: acceptor.image_id.clone(),
        tallies,
        output,
    })
}

pub fn read_marker(dir: &Path) -> Result<Option<AugmentationReport>> {
    let path = dir.join(MARKER_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| AugmentError::Marker {
            path,
            reason: e.to_string(),
        })
}

/// Augment a training directory in place, once.
///
/// Each acceptor gets `pastes_per_class` CSP and LV pastes from uniformly
/// drawn donors, each with up to `retries` attempts. Acceptors with at least
/// one accepted paste produce `images/<id>_aug.png` and `labels/<id>_aug.txt`;
/// originals are never touched. A marker file records the report and makes
/// later calls return it without doing anything.
pub fn run_offline(train_dir: &Path, config: &AugmentConfig, seed: u64) -> Result<OfflineRun> {
    if let Some(report) = read_marker(train_dir)? {
        log::info!(
            "{} already augmented (seed {})",
            train_dir.display(),
            report.seed
        );
        return Ok(OfflineRun::AlreadyAugmented(report));
    }
    PasteSpec::new((0.0, 0.0), config.alpha, config.min_overlap)?;
    let any_id = Regex::new("^(.*)$").expect("valid regex");
    let records: Vec<ImageRecord> =
        if train_dir.join("images").is_dir() || train_dir.join("labels").is_dir() {
            dataset::load_records(train_dir, &any_id)?
                .into_iter()
                .filter(|r| !r.image_id.ends_with(AUGMENTED_SUFFIX))
                .collect()
        } else {
            Vec::new()
        };
    let pool = categorize(&records);
    let csp = usable_donors(&pool.csp_donors);
    let lv = usable_donors(&pool.lv_donors);

    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| AugmentError::InvalidSpec(e.to_string()))?;
    let outcomes: Vec<AcceptorOutcome> = workers.install(|| {
        pool.acceptors
            .par_iter()
            .map(|acc| {
                let out = augment_acceptor(train_dir, acc, [&csp, &lv], config, seed)?;
                if let Some((image, instances)) = &out.output {
                    write_output(train_dir, &out.image_id, image, instances)?;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut per_class = BTreeMap::new();
    let mut totals = ClassTally::default();
    let mut augmented_images = Vec::new();
    for (slot, class) in [ClassId::Csp, ClassId::Lv].into_iter().enumerate() {
        let mut tally = ClassTally::default();
        for o in &outcomes {
            tally.add(&o.tallies[slot]);
        }
        totals.add(&tally);
        per_class.insert(class.name().to_string(), tally);
    }
    for o in &outcomes {
        if o.output.is_some() {
            augmented_images.push(format!("{}{AUGMENTED_SUFFIX}", o.image_id));
        }
    }
    let report = AugmentationReport {
        seed,
        attempts: totals.attempts,
        accepted: totals.accepted,
        rejected: totals.rejected,
        per_class,
        acceptors: pool.acceptors.len(),
        augmented_images,
    };
    fs::create_dir_all(train_dir).map_err(io_err(train_dir))?;
    let marker = train_dir.join(MARKER_FILE);
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(&marker, json).map_err(io_err(&marker))?;
    log::info!(
        "{} acceptors, {} pastes accepted, {} rejected",
        report.acceptors,
        report.accepted,
        report.rejected
    );
    Ok(OfflineRun::Applied(report))
}

fn usable_donors(entries: &[DonorEntry]) -> Vec<Donor<'_>> {
    entries
        .iter()
        .filter_map(
            |entry| match compute_offset(&entry.record, entry.instance) {
                Ok(delta) => Some(Donor { entry, delta }),
                Err(e) => {
                    log::warn!(
                        "skipping donor {}#{}: {e}",
                        entry.record.image_id,
                        entry.instance
                    );
                    None
                }
            },
        )
        .collect()
}

fn write_output(
    dir: &Path,
    image_id: &str,
    image: &GrayImage,
    instances: &[InstanceAnnotation],
) -> Result<()> {
    let id = format!("{image_id}{AUGMENTED_SUFFIX}");
    let image_path = dir.join("images").join(format!("{id}.png"));
    image.save(&image_path).map_err(|e| AugmentError::Image {
        path: image_path.clone(),
        reason: e.to_string(),
    })?;
    let label_dir = dir.join("labels");
    fs::create_dir_all(&label_dir).map_err(io_err(&label_dir))?;
    let label_path = label_dir.join(format!("{id}.txt"));
    fs::write(&label_path, dataset::serialize_labels(instances)).map_err(io_err(&label_path))
}
