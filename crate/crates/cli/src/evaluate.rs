use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use serde_json::Value;
use tcd_core::config::RunConfig;
use tcd_core::dataset::coco;
use tcd_core::eval::{self, EvalReport};
use tcd_core::geo::Polygon;
use tcd_core::predict::InstanceClass;
use tcd_core::raster::mosaic::open_raster;
use tcd_core::raster::DType;
use tcd_core::vector;
use tcd_core::{Error, Result};

use crate::predict::read_roi;
use crate::{require_file, set, write_json, Context, Outcome};

#[derive(Subcommand, Debug)]
pub enum EvaluateCmd {
    /// Pixel IoU / F1 / accuracy of a binary mask against a mask or canopy height model.
    Semantic(SemanticArgs),
    /// Keypoint recall or AP50 of predicted polygons.
    Instance(InstanceArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TruthKind {
    /// `chm` for float rasters, `mask` for u8 rasters.
    Auto,
    /// Canopy height model, thresholded at --height-threshold.
    Chm,
    /// Binary mask (1 = tree).
    Mask,
}

#[derive(Args, Debug)]
pub struct SemanticArgs {
    /// Predicted u8 mask (1 = tree, 255 = nodata).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    truth_kind: TruthKind,
    /// Metres; CHM pixels at or above it count as tree.
    #[arg(long)]
    height_threshold: Option<f64>,
    #[arg(long)]
    roi: Option<PathBuf>,
    /// Also write the report JSON here.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Recall,
    Ap50,
}

#[derive(Args, Debug)]
pub struct InstanceArgs {
    /// Predicted instances (GeoJSON).
    #[arg(long)]
    pred: PathBuf,
    /// Points or polygons as GeoJSON, or a COCO annotation file (`.json` with annotations).
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Minimum prediction score for recall.
    #[arg(long)]
    confidence: Option<f64>,
    /// Restrict AP50 to one class.
    #[arg(long)]
    class: Option<String>,
    /// Restrict COCO ground truth to one image.
    #[arg(long)]
    image_id: Option<u64>,
    #[arg(long)]
    roi: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

impl EvaluateCmd {
    pub fn name(&self) -> &'static str {
        match self {
            EvaluateCmd::Semantic(_) => "evaluate semantic",
            EvaluateCmd::Instance(_) => "evaluate instance",
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        match self {
            EvaluateCmd::Semantic(a) => set(&mut cfg.height_threshold, a.height_threshold),
            EvaluateCmd::Instance(a) => set(&mut cfg.confidence, a.confidence),
        }
    }
}

pub fn run(cmd: EvaluateCmd, ctx: &Context) -> Result<Outcome> {
    let (report, output) = match cmd {
        EvaluateCmd::Semantic(a) => (semantic(&a, &ctx.cfg)?, a.output),
        EvaluateCmd::Instance(a) => (instance(&a, &ctx.cfg)?, a.output),
    };
    print!("{}", report.table());
    let mut out = Outcome::default();
    if let Some(p) = &output {
        write_json(p, &serde_json::to_value(&report)?)?;
        out.output("report", p);
    }
    out.extra.insert("report".into(), serde_json::to_value(&report)?);
    Ok(out)
}

fn semantic(a: &SemanticArgs, cfg: &RunConfig) -> Result<EvalReport> {
    require_file(&a.pred, "prediction")?;
    require_file(&a.truth, "ground truth")?;
    let pred = open_raster(&a.pred)?;
    if pred.info().dtype != DType::U8 || pred.info().bands != 1 {
        return Err(Error::invalid("prediction must be a single-band u8 mask"));
    }
    let truth = open_raster(&a.truth)?;
    let roi = a.roi.as_deref().map(|p| read_roi(p, pred.info().geotransform.crs)).transpose()?;
    let kind = match a.truth_kind {
        TruthKind::Auto if truth.info().dtype == DType::U8 => TruthKind::Mask,
        TruthKind::Auto => TruthKind::Chm,
        k => k,
    };
    let counts = match kind {
        TruthKind::Chm => {
            let mask = eval::chm_to_mask(truth, cfg.height_threshold)?;
            eval::confusion(&*pred, &mask, roi.as_deref())?
        }
        _ => eval::confusion(&*pred, &*truth, roi.as_deref())?,
    };
    Ok(EvalReport::from_confusion(counts))
}

fn is_coco(path: &Path, doc: &Value) -> bool {
    path.extension().is_some_and(|e| e == "json") && doc.get("annotations").is_some()
}

fn instance(a: &InstanceArgs, cfg: &RunConfig) -> Result<EvalReport> {
    require_file(&a.pred, "prediction")?;
    require_file(&a.truth, "ground truth")?;
    let pred_fc = vector::read_geojson(&a.pred)?;
    let roi = a.roi.as_deref().map(|p| read_roi(p, pred_fc.epsg.unwrap_or(0))).transpose()?;
    let mut preds = pred_fc.instances()?;
    if let Some(roi) = &roi {
        preds = vector::filter_by_roi(preds, roi);
    }
    let text = std::fs::read_to_string(&a.truth).map_err(Error::Io)?;
    let doc: Value = serde_json::from_str(&text)?;
    let mut report = EvalReport {
        instances: Some(preds.len()),
        ..Default::default()
    };
    match a.mode {
        Mode::Recall => {
            let truth = vector::parse_feature_collection(&doc)?;
            if let (Some(p), Some(t)) = (pred_fc.epsg, truth.epsg) {
                if p != t {
                    return Err(Error::CrsMismatch { left: p, right: t });
                }
            }
            let mut points = truth.points();
            if let Some(roi) = &roi {
                points = vector::filter_points_by_roi(points, roi);
            }
            report.keypoints = Some(points.len());
            report.recall_tree = Some(eval::keypoint_recall(&points, &preds, false, cfg.confidence)?);
            report.recall_tree_canopy = Some(eval::keypoint_recall(&points, &preds, true, cfg.confidence)?);
        }
        Mode::Ap50 => {
            let class = a
                .class
                .as_deref()
                .map(|c| InstanceClass::parse(c).ok_or_else(|| Error::invalid(format!("unknown class {c:?}"))))
                .transpose()?;
            let mut truth: Vec<(InstanceClass, Polygon<f64>)> = if is_coco(&a.truth, &doc) {
                coco::parse_coco(&doc)?
                    .annotations
                    .into_iter()
                    .filter(|x| a.image_id.is_none_or(|id| x.tile_id == id))
                    .map(|x| (x.class, x.polygon))
                    .collect()
            } else {
                vector::parse_feature_collection(&doc)?
                    .instances()?
                    .into_iter()
                    .map(|i| (i.class, i.geometry))
                    .collect()
            };
            if let Some(roi) = &roi {
                truth = vector::filter_by_roi(
                    truth
                        .into_iter()
                        .map(|(class, geometry)| tcd_core::predict::InstanceObject { class, score: 1.0, geometry })
                        .collect(),
                    roi,
                )
                .into_iter()
                .map(|i| (i.class, i.geometry))
                .collect();
            }
            let (mean, per) = eval::ap50_by_class(&preds, &truth, class)?;
            report.ap50 = Some(mean);
            report.ap50_per_class = per;
        }
    }
    Ok(report)
}
