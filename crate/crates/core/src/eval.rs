//! Evaluation metrics: pixel confusion, CHM masks, keypoint recall and AP@0.5.

use std::collections::BTreeSet;

use geo::{Point, Polygon};
use rstar::{RTree, RTreeObject, AABB};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom;
use crate::predict::{InstanceClass, InstanceObject};
use crate::raster::{DType, PixelBlock, RasterInfo, RasterSource, RasterWindow, Samples};
use crate::stitch::MASK_NODATA;

pub const DEFAULT_HEIGHT_THRESHOLD: f64 = 3.0;
pub const AP_IOU: f64 = 0.5;

const STRIP_PIXELS: usize = 1 << 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn scores(c: &ConfusionCounts) -> Scores {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let positives = tp + fp + fn_;
    let total = positives + tn;
    Scores {
        iou: if positives == 0.0 { 1.0 } else { tp / positives },
        f1: if positives == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) },
        accuracy: if total == 0.0 { 1.0 } else { (tp + tn) / total },
    }
}

/// Pixel confusion between two binary masks. Pixels that are nodata in either mask are
/// not counted; with an ROI (world coordinates of `pred`) only pixels whose centers fall
/// inside it are.
pub fn confusion(pred: &dyn RasterSource, truth: &dyn RasterSource, roi: Option<&[Polygon<f64>]>) -> Result<ConfusionCounts> {
    let (pi, ti) = (pred.info(), truth.info());
    if (pi.width, pi.height) != (ti.width, ti.height) {
        return Err(Error::invalid(format!(
            "mask dimensions differ: prediction {}x{}, truth {}x{}",
            pi.width, pi.height, ti.width, ti.height
        )));
    }
    if pi.bands != 1 || ti.bands != 1 {
        return Err(Error::invalid("confusion expects single-band masks"));
    }
    let pixel_roi: Option<Vec<Polygon<f64>>> =
        roi.map(|ps| ps.iter().map(|p| geom::world_to_pixel_polygon(p, &pi.geotransform)).collect());
    let roi_refs: Option<Vec<&Polygon<f64>>> = pixel_roi.as_ref().map(|v| v.iter().collect());
    let mut c = ConfusionCounts::default();
    let rows = (STRIP_PIXELS / pi.width.max(1)).max(1);
    for strip in pi.extent().row_strips(rows) {
        let pb = pred.read_window(strip)?;
        let tb = truth.read_window(strip)?;
        let inside = roi_refs.as_ref().map(|r| geom::rasterize(r, strip));
        for i in 0..strip.area() {
            if inside.as_ref().is_some_and(|m| m[i] == 0) {
                continue;
            }
            let (col, row) = (i % strip.width, i / strip.width);
            let (p, t) = (pb.get(col, row, 0), tb.get(col, row, 0));
            if pi.is_nodata(p) || ti.is_nodata(t) {
                continue;
            }
            c.add(p == 1.0, t == 1.0);
        }
    }
    Ok(c)
}

/// Lazy binary view of a canopy height model: 1 iff `height >= threshold`, nodata kept.
pub struct ChmMask<S> {
    chm: S,
    threshold: f64,
    info: RasterInfo,
}

pub fn chm_to_mask<S: RasterSource>(chm: S, height_threshold: f64) -> Result<ChmMask<S>> {
    let ci = chm.info();
    if ci.bands != 1 {
        return Err(Error::invalid("CHM must have one band"));
    }
    if !height_threshold.is_finite() {
        return Err(Error::invalid("height threshold must be finite"));
    }
    let info = RasterInfo::new(ci.width, ci.height, 1, DType::U8, ci.geotransform).with_nodata(Some(MASK_NODATA as f64));
    Ok(ChmMask {
        chm,
        threshold: height_threshold,
        info,
    })
}

impl<S: RasterSource> RasterSource for ChmMask<S> {
    fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn read_window(&self, window: RasterWindow) -> Result<PixelBlock> {
        let block = self.chm.read_window(window)?;
        let ci = self.chm.info();
        let f = |h: f64| {
            if ci.is_nodata(h) || h.is_nan() {
                MASK_NODATA
            } else {
                u8::from(h >= self.threshold)
            }
        };
        let data = match &block.samples {
            Samples::F32(v) => v.iter().map(|&h| f(h as f64)).collect(),
            Samples::U8(v) => v.iter().map(|&h| f(h as f64)).collect(),
        };
        PixelBlock::from_u8(window.width, window.height, 1, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecall {
    pub matched: usize,
    pub total: usize,
    pub recall: f64,
}

struct Boxed {
    idx: usize,
    envelope: AABB<[f64; 2]>,
}

impl RTreeObject for Boxed {
    type Envelope = AABB<[f64; 2]>;
    fn envelope(&self) -> Self::Envelope {
        self.envelope
    }
}

fn polygon_tree<'a>(polys: impl Iterator<Item = (usize, &'a Polygon<f64>)>) -> RTree<Boxed> {
    RTree::bulk_load(
        polys
            .filter_map(|(idx, p)| {
                geom::bbox(p).map(|r| Boxed {
                    idx,
                    envelope: AABB::from_corners([r.min().x, r.min().y], [r.max().x, r.max().y]),
                })
            })
            .collect(),
    )
}

/// Fraction of points inside (or on the boundary of) an eligible instance polygon.
pub fn keypoint_recall(
    points: &[Point<f64>],
    instances: &[InstanceObject],
    include_canopy: bool,
    confidence_threshold: f64,
) -> Result<KeypointRecall> {
    if points.is_empty() {
        return Err(Error::invalid("empty ground truth: no keypoints to match"));
    }
    let eligible: Vec<&InstanceObject> = instances
        .iter()
        .filter(|i| i.score >= confidence_threshold && (i.class == InstanceClass::Tree || include_canopy))
        .collect();
    let tree = polygon_tree(eligible.iter().enumerate().map(|(i, x)| (i, &x.geometry)));
    let matched = points
        .iter()
        .filter(|p| {
            let q = [p.x(), p.y()];
            tree.locate_in_envelope_intersecting(&AABB::from_point(q))
                .any(|b| geom::contains_inclusive(&eligible[b.idx].geometry, **p))
        })
        .count();
    Ok(KeypointRecall {
        matched,
        total: points.len(),
        recall: matched as f64 / points.len() as f64,
    })
}

/// COCO-style interpolated AP from per-detection TP flags (already in descending score
/// order) and the number of ground-truth objects.
pub fn interpolated_ap(tp_flags: &[bool], n_truth: usize) -> f64 {
    if n_truth == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_truth as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (1..precision.len()).rev() {
        if precision[k] > precision[k - 1] {
            precision[k - 1] = precision[k];
        }
    }
    let mut sum = 0.0;
    for t in 0..=100 {
        let r = if t == 100 { 1.0 } else { t as f64 * 0.01 };
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// TP flags for predictions in descending score order (ties keep input order). Each
/// prediction takes the unmatched truth of highest IoU; it is a TP iff that IoU >= `iou`.
pub fn match_predictions(preds: &[(f64, &Polygon<f64>)], truth: &[&Polygon<f64>], iou: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].0.total_cmp(&preds[a].0));
    let tree = polygon_tree(truth.iter().enumerate().map(|(i, p)| (i, *p)));
    let mut taken = vec![false; truth.len()];
    order
        .into_iter()
        .map(|k| {
            let p = preds[k].1;
            let Some(r) = geom::bbox(p) else { return false };
            let env = AABB::from_corners([r.min().x, r.min().y], [r.max().x, r.max().y]);
            let mut best: Option<(f64, usize)> = None;
            let mut cands: Vec<usize> = tree.locate_in_envelope_intersecting(&env).map(|b| b.idx).collect();
            cands.sort_unstable();
            for g in cands {
                if taken[g] {
                    continue;
                }
                let v = geom::polygon_iou(p, truth[g]);
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            match best {
                Some((v, g)) if v >= iou => {
                    taken[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Single-class AP at IoU 0.5 with 101-point interpolation.
pub fn average_precision_50(preds: &[(f64, &Polygon<f64>)], truth: &[&Polygon<f64>]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::invalid("no ground truth instances for AP"));
    }
    Ok(interpolated_ap(&match_predictions(preds, truth, AP_IOU), truth.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: InstanceClass,
    pub ap50: f64,
    pub predictions: usize,
    pub truths: usize,
}

/// AP50 per class present in the ground truth and their mean. With `class` set only
/// that class is evaluated.
pub fn ap50_by_class(
    preds: &[InstanceObject],
    truth: &[(InstanceClass, Polygon<f64>)],
    class: Option<InstanceClass>,
) -> Result<(f64, Vec<ClassAp>)> {
    let present: BTreeSet<InstanceClass> = truth.iter().map(|(c, _)| *c).filter(|c| class.is_none_or(|k| k == *c)).collect();
    if present.is_empty() {
        return Err(Error::invalid("no ground truth instances for AP"));
    }
    let mut per = Vec::new();
    for c in present {
        let p: Vec<(f64, &Polygon<f64>)> = preds.iter().filter(|i| i.class == c).map(|i| (i.score, &i.geometry)).collect();
        let t: Vec<&Polygon<f64>> = truth.iter().filter(|(k, _)| *k == c).map(|(_, g)| g).collect();
        per.push(ClassAp {
            class: c,
            ap50: average_precision_50(&p, &t)?,
            predictions: p.len(),
            truths: t.len(),
        });
    }
    let mean = per.iter().map(|c| c.ap50).sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_tree: Option<KeypointRecall>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_tree_canopy: Option<KeypointRecall>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ap50_per_class: Vec<ClassAp>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<usize>,
}

impl EvalReport {
    pub fn from_confusion(c: ConfusionCounts) -> Self {
        let s = scores(&c);
        EvalReport {
            confusion: Some(c),
            iou: Some(s.iou),
            f1: Some(s.f1),
            accuracy: Some(s.accuracy),
            ..Default::default()
        }
    }

    /// Two-column text table of the populated fields.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        if let Some(c) = self.confusion {
            rows.push(("tp / fp / fn / tn".into(), format!("{} / {} / {} / {}", c.tp, c.fp, c.fn_, c.tn)));
        }
        for (k, v) in [("iou", self.iou), ("f1", self.f1), ("accuracy", self.accuracy), ("ap50", self.ap50)] {
            if let Some(v) = v {
                rows.push((k.into(), format!("{v:.4}")));
            }
        }
        for c in &self.ap50_per_class {
            rows.push((format!("ap50 [{}]", c.class.as_str()), format!("{:.4}", c.ap50)));
        }
        for (k, v) in [("recall (tree)", &self.recall_tree), ("recall (tree+canopy)", &self.recall_tree_canopy)] {
            if let Some(r) = v {
                rows.push((k.into(), format!("{:.4} ({}/{})", r.recall, r.matched, r.total)));
            }
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}
