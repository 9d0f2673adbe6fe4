//! COCO-style instance-segmentation evaluation.
//!
//! Detections are matched greedily per image and class in descending
//! confidence; AP is the mean of the precision envelope sampled at 101
//! recall points. Confusion rates, mask overlap and a combined report sit on
//! top of the same matching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ClassId, ImageRecord};
use crate::geometry::{self, BinaryMask, GeometryError, Polygon};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: unknown image_id {image_id:?}")]
    UnknownImage { line: usize, image_id: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// The ten COCO thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub confidence: f64,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedDetection {
    pub confidence: f64,
    pub is_tp: bool,
    pub det_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub det_index: usize,
    pub gt_index: usize,
    pub iou: f64,
    pub dsc: f64,
}

/// Matching outcome for one class at one threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassMatches {
    /// Detections in processing order: confidence descending, then
    /// `(image_id, det_index)`.
    pub ranked: Vec<RankedDetection>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pairs: Vec<MatchedPair>,
    pub images_with_gt: BTreeSet<String>,
    pub images_with_det: BTreeSet<String>,
}

impl ClassMatches {
    pub fn gt_count(&self) -> usize {
        self.tp + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub iou_threshold: f64,
    pub classes: BTreeMap<usize, ClassMatches>,
}

/// Pairwise mask overlaps between detections and ground truths that share
/// an image and class.
struct OverlapTable {
    // (det, gt) -> (iou, dsc)
    pairs: BTreeMap<(usize, usize), (f64, f64)>,
    // (image, class) -> gt indices
    gts_by_key: BTreeMap<(String, usize), Vec<usize>>,
}

impl OverlapTable {
    fn build(dets: &[Detection], gts: &[GroundTruth]) -> Result<Self> {
        let mut gts_by_key: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
        for (i, g) in gts.iter().enumerate() {
            gts_by_key
                .entry((g.image_id.clone(), g.class_id))
                .or_default()
                .push(i);
        }
        let mut pairs = BTreeMap::new();
        for (d, det) in dets.iter().enumerate() {
            if let Some(list) = gts_by_key.get(&(det.image_id.clone(), det.class_id)) {
                for &g in list {
                    let iou = geometry::mask_iou(&det.mask, &gts[g].mask)?;
                    let dsc = geometry::mask_dsc(&det.mask, &gts[g].mask)?;
                    pairs.insert((d, g), (iou, dsc));
                }
            }
        }
        Ok(Self { pairs, gts_by_key })
    }

    fn match_at(&self, dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> MatchResult {
        let mut classes: BTreeMap<usize, ClassMatches> = BTreeMap::new();
        for g in gts {
            classes
                .entry(g.class_id)
                .or_default()
                .images_with_gt
                .insert(g.image_id.clone());
        }
        for d in dets {
            classes
                .entry(d.class_id)
                .or_default()
                .images_with_det
                .insert(d.image_id.clone());
        }

        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .confidence
                .total_cmp(&dets[a].confidence)
                .then_with(|| dets[a].image_id.cmp(&dets[b].image_id))
                .then(a.cmp(&b))
        });

        let mut claimed = vec![false; gts.len()];
        for d in order {
            let det = &dets[d];
            let mut best: Option<(usize, f64, f64)> = None;
            if let Some(list) = self.gts_by_key.get(&(det.image_id.clone(), det.class_id)) {
                for &g in list {
                    if claimed[g] {
                        continue;
                    }
                    let (iou, dsc) = self.pairs[&(d, g)];
                    if best.is_none_or(|(_, b, _)| iou > b) {
                        best = Some((g, iou, dsc));
                    }
                }
            }
            let entry = classes.get_mut(&det.class_id).expect("class registered");
            let is_tp = match best {
                Some((g, iou, dsc)) if iou >= threshold => {
                    claimed[g] = true;
                    entry.pairs.push(MatchedPair {
                        det_index: d,
                        gt_index: g,
                        iou,
                        dsc,
                    });
                    true
                }
                _ => false,
            };
            if is_tp {
                entry.tp += 1;
            } else {
                entry.fp += 1;
            }
            entry.ranked.push(RankedDetection {
                confidence: det.confidence,
                is_tp,
                det_index: d,
            });
        }
        for (g, gt) in gts.iter().enumerate() {
            if !claimed[g] {
                classes.get_mut(&gt.class_id).expect("class registered").fn_ += 1;
            }
        }
        MatchResult {
            iou_threshold: threshold,
            classes,
        }
    }
}

/// Greedy matching at a single IoU threshold (inclusive).
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_threshold: f64,
) -> Result<MatchResult> {
    Ok(OverlapTable::build(dets, gts)?.match_at(dets, gts, iou_threshold))
}

/// Matching at several thresholds, sharing the pairwise overlap computation.
pub fn match_all(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
) -> Result<Vec<MatchResult>> {
    let table = OverlapTable::build(dets, gts)?;
    Ok(thresholds
        .iter()
        .map(|&t| table.match_at(dets, gts, t))
        .collect())
}

/// 101-point interpolated AP for one class at one threshold.
/// Zero when the class has no ground truth.
pub fn average_precision(matches: &ClassMatches) -> f64 {
    let n_gt = matches.gt_count();
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp_cum = Vec::with_capacity(matches.ranked.len());
    let mut precision = Vec::with_capacity(matches.ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for r in &matches.ranked {
        if r.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        tp_cum.push(tp);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut i = 0;
    for k in 0..=100usize {
        // first index with recall >= k/100, compared exactly in integers
        while i < tp_cum.len() && tp_cum[i] * 100 < k * n_gt {
            i += 1;
        }
        if i < tp_cum.len() {
            sum += precision[i];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapScores {
    pub map50: f64,
    pub map50_95: f64,
    pub thresholds: Vec<f64>,
    /// AP per threshold for every class with ground truth.
    pub per_class: BTreeMap<usize, Vec<f64>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn scores_from_matches(
    results: &[MatchResult],
    thresholds: &[f64],
    at50: &MatchResult,
) -> MapScores {
    let classes: BTreeSet<usize> = results
        .iter()
        .chain(std::iter::once(at50))
        .flat_map(|r| {
            r.classes
                .iter()
                .filter(|(_, m)| m.gt_count() > 0)
                .map(|(&c, _)| c)
        })
        .collect();
    let per_class: BTreeMap<usize, Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let aps = results
                .iter()
                .map(|r| r.classes.get(&c).map_or(0.0, average_precision))
                .collect();
            (c, aps)
        })
        .collect();
    let map50 = mean(
        classes
            .iter()
            .map(|c| at50.classes.get(c).map_or(0.0, average_precision)),
    );
    let map50_95 = mean(per_class.values().map(|aps| mean(aps.iter().copied())));
    MapScores {
        map50,
        map50_95,
        thresholds: thresholds.to_vec(),
        per_class,
    }
}

/// mAP@50 and the mean over `thresholds` (normally [`coco_thresholds`]),
/// averaged over classes that have ground truth.
pub fn map_scores(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
) -> Result<MapScores> {
    let table = OverlapTable::build(dets, gts)?;
    let results: Vec<MatchResult> = thresholds
        .iter()
        .map(|&t| table.match_at(dets, gts, t))
        .collect();
    let at50 = match thresholds.iter().position(|&t| t == 0.5) {
        Some(i) => results[i].clone(),
        None => table.match_at(dets, gts, 0.5),
    };
    Ok(scores_from_matches(&results, thresholds, &at50))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl ConfusionRates {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let (tpf, fpf, fnf, tnf) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        let precision = ratio(tpf, tpf + fpf);
        let recall = ratio(tpf, tpf + fnf);
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
            specificity: ratio(tnf, tnf + fpf),
            accuracy: ratio(tpf, tpf + fpf + fnf),
        }
    }
}

/// Per-class confusion rates. TN counts images in `images` with neither a
/// ground truth nor a prediction of the class.
pub fn confusion_metrics(
    matches: &MatchResult,
    images: &[String],
) -> BTreeMap<usize, ConfusionRates> {
    matches
        .classes
        .iter()
        .map(|(&c, m)| {
            let tn = images
                .iter()
                .filter(|id| !m.images_with_gt.contains(*id) && !m.images_with_det.contains(*id))
                .count();
            (c, ConfusionRates::from_counts(m.tp, m.fp, m.fn_, tn))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub iou: f64,
    pub dsc: f64,
}

/// Mean mask IoU and DSC of matched pairs per class. With `penalize_misses`
/// the sums are divided by the ground-truth count instead, so every missed
/// instance counts as zero.
pub fn segmentation_overlap(
    matches: &MatchResult,
    penalize_misses: bool,
) -> BTreeMap<usize, Overlap> {
    matches
        .classes
        .iter()
        .map(|(&c, m)| {
            let n = if penalize_misses {
                m.gt_count()
            } else {
                m.pairs.len()
            } as f64;
            let iou = ratio(m.pairs.iter().map(|p| p.iou).sum(), n);
            let dsc = ratio(m.pairs.iter().map(|p| p.dsc).sum(), n);
            (c, Overlap { iou, dsc })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub iou: f64,
    pub dsc: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroReport {
    pub map50: f64,
    pub map50_95: f64,
    pub mdsc: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_images: usize,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroReport,
    /// AP per threshold, keyed by class name.
    pub ap_per_threshold: BTreeMap<String, Vec<f64>>,
}

fn class_name(id: usize) -> String {
    ClassId::from_index(id as i64).map_or_else(|| format!("class{id}"), |c| c.name().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub thresholds: Vec<f64>,
    pub penalize_misses: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            thresholds: coco_thresholds(),
            penalize_misses: false,
        }
    }
}

/// Evaluate `dets` against `gts` over the image universe `images`.
///
/// Per-class rows cover every class with ground truth; macro values are
/// unweighted means over those rows.
pub fn build_report(
    dets: &[Detection],
    gts: &[GroundTruth],
    images: &[String],
    options: &ReportOptions,
) -> Result<MetricsReport> {
    let table = OverlapTable::build(dets, gts)?;
    let results: Vec<MatchResult> = options
        .thresholds
        .iter()
        .map(|&t| table.match_at(dets, gts, t))
        .collect();
    let at50 = table.match_at(dets, gts, 0.5);
    let scores = scores_from_matches(&results, &options.thresholds, &at50);
    let confusion = confusion_metrics(&at50, images);
    let overlap = segmentation_overlap(&at50, options.penalize_misses);

    let mut classes = Vec::new();
    for (&c, aps) in &scores.per_class {
        let conf = confusion[&c];
        let ov = overlap[&c];
        classes.push(ClassReport {
            class_id: c,
            name: class_name(c),
            precision: conf.precision,
            recall: conf.recall,
            f1: conf.f1,
            specificity: conf.specificity,
            accuracy: conf.accuracy,
            iou: ov.iou,
            dsc: ov.dsc,
            tp: conf.tp,
            fp: conf.fp,
            fn_: conf.fn_,
            tn: conf.tn,
            ap50: at50.classes.get(&c).map_or(0.0, average_precision),
            ap50_95: mean(aps.iter().copied()),
        });
    }
    let macro_avg = MacroReport {
        map50: scores.map50,
        map50_95: scores.map50_95,
        mdsc: mean(classes.iter().map(|r| r.dsc)),
        miou: mean(classes.iter().map(|r| r.iou)),
        precision: mean(classes.iter().map(|r| r.precision)),
        recall: mean(classes.iter().map(|r| r.recall)),
        f1: mean(classes.iter().map(|r| r.f1)),
        specificity: mean(classes.iter().map(|r| r.specificity)),
        accuracy: mean(classes.iter().map(|r| r.accuracy)),
    };
    let ap_per_threshold = scores
        .per_class
        .iter()
        .map(|(&c, aps)| (class_name(c), aps.clone()))
        .collect();
    Ok(MetricsReport {
        num_images: images.len(),
        thresholds: options.thresholds.clone(),
        classes,
        macro_avg,
        ap_per_threshold,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned text table, three decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>9} {:>7} {:>7} {:>11} {:>8} {:>7} {:>7} {:>6} {:>6} {:>6} {:>7} {:>10}",
            "Class",
            "Precision",
            "Recall",
            "F1",
            "Specificity",
            "Accuracy",
            "IoU",
            "DSC",
            "TP",
            "FP",
            "FN",
            "AP50",
            "AP50-95"
        );
        for r in &self.classes {
            let _ = writeln!(
                out,
                "{:<8} {:>9.3} {:>7.3} {:>7.3} {:>11.3} {:>8.3} {:>7.3} {:>7.3} {:>6} {:>6} {:>6} {:>7.3} {:>10.3}",
                r.name, r.precision, r.recall, r.f1, r.specificity, r.accuracy, r.iou, r.dsc, r.tp, r.fp,
                r.fn_, r.ap50, r.ap50_95
            );
        }
        let m = &self.macro_avg;
        let _ = writeln!(
            out,
            "{:<8} {:>9.3} {:>7.3} {:>7.3} {:>11.3} {:>8.3} {:>7.3} {:>7.3} {:>6} {:>6} {:>6} {:>7.3} {:>10.3}",
            "Overall", m.precision, m.recall, m.f1, m.specificity, m.accuracy, m.miou, m.mdsc, "", "", "",
            m.map50, m.map50_95
        );
        let _ = writeln!(
            out,
            "\nmAP@50 {:.4}  mAP@50-95 {:.4}  mDSC {:.4}  mIoU {:.4}  images {}",
            m.map50, m.map50_95, m.mdsc, m.miou, self.num_images
        );
        out
    }

    /// `class,t0.50,t0.55,...` with one row per class.
    pub fn ap_csv(&self) -> String {
        let mut out = String::from("class");
        for t in &self.thresholds {
            let _ = write!(out, ",{t:.2}");
        }
        out.push('\n');
        for (name, aps) in &self.ap_per_threshold {
            out.push_str(name);
            for ap in aps {
                let _ = write!(out, ",{ap}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_all(&self, out_dir: &Path) -> Result<()> {
        let io = |path: PathBuf| move |source| MetricsError::Io { path, source };
        fs::create_dir_all(out_dir).map_err(io(out_dir.to_path_buf()))?;
        for (name, body) in [
            ("report.json", self.to_json()),
            ("report.txt", self.to_text()),
            ("ap_per_threshold.csv", self.ap_csv()),
        ] {
            let path = out_dir.join(name);
            fs::write(&path, body).map_err(io(path.clone()))?;
        }
        Ok(())
    }
}

/// Rasterize every labelled instance into a ground truth. Returns the
/// ground truths and the sorted image universe.
pub fn ground_truth_from_records(
    records: &[ImageRecord],
) -> Result<(Vec<GroundTruth>, Vec<String>)> {
    let mut gts = Vec::new();
    let mut images = Vec::with_capacity(records.len());
    for r in records {
        images.push(r.image_id.clone());
        for inst in &r.instances {
            gts.push(GroundTruth {
                image_id: r.image_id.clone(),
                class_id: inst.class.index(),
                mask: geometry::rasterize(&inst.polygon, r.width, r.height)?,
            });
        }
    }
    images.sort();
    Ok((gts, images))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: String,
    pub class_id: usize,
    pub confidence: f64,
    /// Normalized `[x1, y1, x2, y2, ...]`.
    pub polygon: Vec<f64>,
}

/// Parse a JSON Lines predictions file and rasterize each polygon at the
/// dimensions of its image. Blank lines are skipped.
pub fn parse_predictions(
    text: &str,
    dims: &BTreeMap<String, [usize; 2]>,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| MetricsError::MalformedLine { line, reason };
        let pred: PredictionLine =
            serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
        if !(0.0..=1.0).contains(&pred.confidence) {
            return Err(malformed(format!(
                "confidence {} outside [0, 1]",
                pred.confidence
            )));
        }
        if pred.polygon.len() < 6 || !pred.polygon.len().is_multiple_of(2) {
            return Err(malformed(format!(
                "polygon has {} coordinates",
                pred.polygon.len()
            )));
        }
        let &[w, h] = dims
            .get(&pred.image_id)
            .ok_or_else(|| MetricsError::UnknownImage {
                line,
                image_id: pred.image_id.clone(),
            })?;
        let polygon = Polygon::normalized(pred.polygon.chunks(2).map(|c| (c[0], c[1])).collect());
        out.push(Detection {
            mask: geometry::rasterize(&polygon, w, h)?,
            image_id: pred.image_id,
            class_id: pred.class_id,
            confidence: pred.confidence,
        });
    }
    Ok(out)
}

pub fn load_predictions(
    path: &Path,
    dims: &BTreeMap<String, [usize; 2]>,
) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_predictions(&text, dims)
}
