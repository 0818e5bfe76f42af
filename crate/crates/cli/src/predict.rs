use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Subcommand};
use serde_json::json;
use tcd_core::config::RunConfig;
use tcd_core::geo::Polygon;
use tcd_core::merge::{filter_by_semantic, predict_instances_tiled};
use tcd_core::predict::{InstanceClass, PredictorDescriptor};
use tcd_core::raster::geotiff::{GeoTiffSink, GeoTiffSource};
use tcd_core::raster::mosaic::open_raster;
use tcd_core::raster::RasterSource;
use tcd_core::stitch::{self, binarize, canopy_cover, confidence_info, mask_info, stitch_semantic};
use tcd_core::vector::{self, filter_by_roi, write_instances};
use tcd_core::{Error, Result};

use crate::{require_file, set, write_json, Context, Outcome, RunFlags};

#[derive(Subcommand, Debug)]
pub enum PredictCmd {
    /// Per-pixel tree-cover confidence, binary mask and cover summary.
    Semantic(SemanticArgs),
    /// Tree and canopy polygons merged across tiles, written as GeoJSON.
    Instance(InstanceArgs),
}

#[derive(Args, Debug)]
pub struct SemanticArgs {
    /// GeoTIFF or mosaic manifest.
    #[arg(long)]
    input: PathBuf,
    /// greenness | constant:<v> | playback-semantic:<raster> | adapter:<command>
    #[arg(long)]
    model: String,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Write nodata rather than zero confidence over skipped empty tiles.
    #[arg(long)]
    nodata_skip: bool,
    /// Polygons (GeoJSON, raster CRS) restricting the cover statistic.
    #[arg(long)]
    roi: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args, Debug)]
pub struct InstanceArgs {
    #[arg(long)]
    input: PathBuf,
    /// greenness | playback-instance:<geojson> | adapter:<command>
    #[arg(long)]
    model: String,
    /// GeoJSON output file; a `<name>.summary.json` is written beside it.
    #[arg(long)]
    output: PathBuf,
    /// Minimum instance score.
    #[arg(long)]
    confidence: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    merge_iou: Option<f64>,
    /// Binary mask used to drop instances not covered by predicted canopy.
    #[arg(long)]
    semantic_mask: Option<PathBuf>,
    /// Minimum covered fraction of each instance when --semantic-mask is given (default 0.5).
    #[arg(long)]
    semantic_fraction: Option<f64>,
    /// Keep only instances whose centroid falls inside these polygons.
    #[arg(long)]
    roi: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

impl PredictCmd {
    pub fn name(&self) -> &'static str {
        match self {
            PredictCmd::Semantic(_) => "predict semantic",
            PredictCmd::Instance(_) => "predict instance",
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        match self {
            PredictCmd::Semantic(a) => {
                a.run.apply(cfg);
                set(&mut cfg.threshold, a.threshold);
                if a.nodata_skip {
                    cfg.nodata_skip = true;
                }
            }
            PredictCmd::Instance(a) => {
                a.run.apply(cfg);
                set(&mut cfg.confidence, a.confidence);
                set(&mut cfg.nms_iou, a.nms_iou);
                set(&mut cfg.merge_iou, a.merge_iou);
                if a.semantic_fraction.is_some() {
                    cfg.semantic_fraction = a.semantic_fraction;
                }
            }
        }
    }
}

pub fn run(cmd: PredictCmd, ctx: &Context) -> Result<Outcome> {
    match cmd {
        PredictCmd::Semantic(a) => semantic(a, ctx),
        PredictCmd::Instance(a) => instance(a, ctx),
    }
}

/// ROI polygons in world coordinates, checked against the raster CRS.
pub fn read_roi(path: &Path, crs: u32) -> Result<Vec<Polygon<f64>>> {
    require_file(path, "ROI")?;
    let fc = vector::read_geojson(path)?;
    if let Some(e) = fc.epsg {
        if crs != 0 && e != crs {
            return Err(Error::CrsMismatch { left: e, right: crs });
        }
    }
    let polys = fc.polygons();
    if polys.is_empty() {
        return Err(Error::invalid(format!("ROI {} contains no polygons", path.display())));
    }
    Ok(polys)
}

fn open_input(path: &Path) -> Result<Box<dyn RasterSource>> {
    require_file(path, "input")?;
    let src = open_raster(path)?;
    let info = src.info();
    if info.bands != 3 || info.dtype != tcd_core::raster::DType::U8 {
        return Err(Error::invalid(format!(
            "input must be 3-band u8 imagery, got {} band(s) of {:?}",
            info.bands, info.dtype
        )));
    }
    Ok(src)
}

fn semantic(a: SemanticArgs, ctx: &Context) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = &ctx.cfg;
    let descriptor = PredictorDescriptor::parse(&a.model)?;
    let src = open_input(&a.input)?;
    let info = src.info().clone();
    let roi = a.roi.as_deref().map(|p| read_roi(p, info.geotransform.crs)).transpose()?;
    let predictor = descriptor.build(&info, ctx.adapter_options())?;
    if !predictor.capabilities().semantic {
        return Err(Error::invalid(format!("model {} does not produce semantic output", a.model)));
    }
    std::fs::create_dir_all(&a.output).map_err(Error::Io)?;

    let conf_sink = GeoTiffSink::create(a.output.join("confidence.tif"), confidence_info(&info))?;
    let tiles = stitch_semantic(&*src, &*predictor, &cfg.stitch(), &conf_sink)?;
    let conf_path = conf_sink.finish()?;
    let conf = GeoTiffSource::open(&conf_path)?;
    let mask_sink = GeoTiffSink::create(a.output.join("mask.tif"), mask_info(&info))?;
    binarize(&conf, cfg.threshold, &mask_sink)?;
    let mask_path = mask_sink.finish()?;
    let mask = GeoTiffSource::open(&mask_path)?;
    let cover = canopy_cover(&mask, roi.as_deref())?;

    if tiles.tiles_failed > 0 {
        eprintln!(
            "tcd predict semantic: {} tile(s) failed and were written as nodata ({})",
            tiles.tiles_failed,
            stitch::FAILED_CONFIDENCE
        );
    }
    let summary_path = a.output.join("summary.json");
    let mut out = Outcome::default();
    out.output("confidence", &conf_path);
    out.output("mask", &mask_path);
    out.output("summary", &summary_path);
    let summary = json!({
        "kind": "semantic",
        "input": a.input.display().to_string(),
        "model": a.model,
        "roi": a.roi.as_ref().map(|p| p.display().to_string()),
        "config": cfg,
        "tiles": tiles,
        "cover": cover,
        "outputs": {"confidence": "confidence.tif", "mask": "mask.tif"},
        "elapsed_secs": started.elapsed().as_secs_f64(),
    });
    write_json(&summary_path, &summary)?;
    out.extra.insert("cover".into(), json!(cover));
    out.extra.insert("tiles_failed".into(), json!(tiles.tiles_failed));
    Ok(out)
}

pub fn summary_path_for(geojson: &Path) -> PathBuf {
    let stem = geojson.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    geojson.with_file_name(format!("{stem}.summary.json"))
}

fn instance(a: InstanceArgs, ctx: &Context) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = &ctx.cfg;
    if a.semantic_fraction.is_some() && a.semantic_mask.is_none() {
        return Err(Error::invalid("--semantic-fraction needs --semantic-mask"));
    }
    let descriptor = PredictorDescriptor::parse(&a.model)?;
    let src = open_input(&a.input)?;
    let info = src.info().clone();
    let crs = info.geotransform.crs;
    let roi = a.roi.as_deref().map(|p| read_roi(p, crs)).transpose()?;
    let mask = match &a.semantic_mask {
        Some(p) => {
            require_file(p, "semantic mask")?;
            Some(open_raster(p)?)
        }
        None => None,
    };
    let predictor = descriptor.build(&info, ctx.adapter_options())?;

    let (mut instances, tiles) = predict_instances_tiled(&*src, &*predictor, &cfg.instances())?;
    let merged = instances.len();
    if let Some(mask) = &mask {
        instances = filter_by_semantic(instances, crs, &**mask, cfg.semantic_fraction.unwrap_or(0.5))?;
    }
    let after_semantic = instances.len();
    if let Some(roi) = &roi {
        instances = filter_by_roi(instances, roi);
    }
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::Io)?;
    }
    write_instances(&a.output, (crs != 0).then_some(crs), &instances)?;

    let count = |c: InstanceClass| instances.iter().filter(|i| i.class == c).count();
    let (trees, canopy) = (count(InstanceClass::Tree), count(InstanceClass::Canopy));
    let summary_path = summary_path_for(&a.output);
    let summary = json!({
        "kind": "instance",
        "input": a.input.display().to_string(),
        "model": a.model,
        "roi": a.roi.as_ref().map(|p| p.display().to_string()),
        "semantic_mask": a.semantic_mask.as_ref().map(|p| p.display().to_string()),
        "config": cfg,
        "tiles": tiles,
        "merged_instances": merged,
        "after_semantic_filter": after_semantic,
        "written": instances.len(),
        "tree_count": trees,
        "canopy_count": canopy,
        "outputs": {"instances": a.output.file_name().map(|n| n.to_string_lossy().into_owned())},
        "elapsed_secs": started.elapsed().as_secs_f64(),
    });
    write_json(&summary_path, &summary)?;
    if tiles.tiles_failed > 0 {
        eprintln!("tcd predict instance: {} tile(s) failed", tiles.tiles_failed);
    }
    let mut out = Outcome::default();
    out.output("instances", &a.output);
    out.output("summary", &summary_path);
    out.extra.insert("tree_count".into(), json!(trees));
    out.extra.insert("canopy_count".into(), json!(canopy));
    out.extra.insert("tiles_failed".into(), json!(tiles.tiles_failed));
    Ok(out)
}
