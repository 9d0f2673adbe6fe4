//! Synthetic ultrasound-like datasets for demos and tests.
//!
//! Each frame is a noisy grayscale image with an elliptical brain and,
//! depending on the draw, a CSP and/or LV blob inside it. Files follow the
//! on-disk layout read by [`crate::dataset::load_records`].

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;

use crate::dataset::{self, ClassId, DatasetError, ImageRecord, InstanceAnnotation};
use crate::geometry::{self, Polygon};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub patients: usize,
    /// Frames per patient are drawn uniformly from this inclusive range.
    pub frames: (usize, usize),
    pub width: usize,
    pub height: usize,
    /// Probability that a frame shows only the brain.
    pub brain_only: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            patients: 10,
            frames: (1, 3),
            width: 64,
            height: 48,
            brain_only: 0.5,
        }
    }
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, vertices: usize) -> Polygon {
    Polygon::pixel(
        (0..vertices)
            .map(|k| {
                let t = TAU * k as f64 / vertices as f64;
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect(),
    )
}

/// Generate records without touching the disk. Image ids look like
/// `007_2HC`, so the default patient pattern groups them.
pub fn generate_records(spec: &SyntheticSpec, seed: u64) -> Vec<ImageRecord> {
    let mut rng = rng::stream(seed, "synthetic");
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut records = Vec::new();
    for p in 0..spec.patients {
        let frames = rng.random_range(spec.frames.0..=spec.frames.1.max(spec.frames.0));
        for f in 0..frames {
            let cx = w * rng.random_range(0.45..0.55);
            let cy = h * rng.random_range(0.45..0.55);
            let rx = w * rng.random_range(0.30..0.40);
            let ry = h * rng.random_range(0.30..0.40);
            let mut instances = vec![(ClassId::Brain, ellipse(cx, cy, rx, ry, 24))];
            if !rng.random_bool(spec.brain_only) {
                match rng.random_range(0..3) {
                    0 => instances.push((ClassId::Csp, csp(&mut rng, cx, cy, rx, ry))),
                    1 => instances.push((ClassId::Lv, lv(&mut rng, cx, cy, rx, ry))),
                    _ => {
                        instances.push((ClassId::Csp, csp(&mut rng, cx, cy, rx, ry)));
                        instances.push((ClassId::Lv, lv(&mut rng, cx, cy, rx, ry)));
                    }
                }
            }
            let suffix = if f == 0 {
                String::new()
            } else {
                (f + 1).to_string()
            };
            records.push(ImageRecord {
                image_id: format!("{p:03}_{suffix}HC"),
                patient_id: format!("{p:03}"),
                width: spec.width,
                height: spec.height,
                instances: instances
                    .into_iter()
                    .map(|(class, poly)| InstanceAnnotation {
                        class,
                        polygon: poly.to_normalized(spec.width, spec.height),
                    })
                    .collect(),
            });
        }
    }
    records
}

fn csp(rng: &mut impl Rng, cx: f64, cy: f64, rx: f64, ry: f64) -> Polygon {
    let dx = rx * rng.random_range(-0.3..0.3);
    let dy = -ry * rng.random_range(0.2..0.4);
    ellipse(cx + dx, cy + dy, rx * 0.18, ry * 0.12, 12)
}

fn lv(rng: &mut impl Rng, cx: f64, cy: f64, rx: f64, ry: f64) -> Polygon {
    let dx = rx * rng.random_range(-0.4..0.4);
    let dy = ry * rng.random_range(0.2..0.4);
    ellipse(cx + dx, cy + dy, rx * 0.25, ry * 0.10, 12)
}

/// Render a record: speckle background, brighter brain, bright structures.
pub fn render(record: &ImageRecord, seed: u64) -> Result<GrayImage, DatasetError> {
    let mut rng = rng::stream(seed, &format!("synthetic/{}", record.image_id));
    let (w, h) = (record.width, record.height);
    let mut levels = vec![0u8; w * h];
    for v in levels.iter_mut() {
        *v = rng.random_range(10..60);
    }
    for inst in &record.instances {
        let base: u8 = match inst.class {
            ClassId::Brain => 110,
            ClassId::Csp => 190,
            ClassId::Lv => 220,
        };
        let mask = geometry::rasterize(&inst.polygon, w, h).map_err(|e| DatasetError::Format {
            path: record.image_id.clone().into(),
            reason: e.to_string(),
        })?;
        for (x, y) in mask.iter_set() {
            levels[y * w + x] = base + rng.random_range(0..30);
        }
    }
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([levels[y as usize * w + x as usize]])
    }))
}

/// Write `images/<id>.png` and `labels/<id>.txt` for every generated record.
pub fn write_dataset(
    dir: &Path,
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<Vec<ImageRecord>, DatasetError> {
    let records = generate_records(spec, seed);
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        fs::create_dir_all(d).map_err(dataset::io_err(d))?;
    }
    for r in &records {
        let path = images.join(format!("{}.png", r.image_id));
        render(r, seed)?
            .save(&path)
            .map_err(|e| DatasetError::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        let path = labels.join(format!("{}.txt", r.image_id));
        fs::write(&path, dataset::serialize_labels(&r.instances))
            .map_err(dataset::io_err(&path))?;
    }
    Ok(records)
}
