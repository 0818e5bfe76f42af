//! Tiled semantic prediction and the per-pixel products derived from it.
//!
//! Tiles are predicted in batches on a worker pool; once a batch is done its cores are
//! written to the sink in grid order. Cores partition the raster, so every output pixel
//! is written exactly once and the result does not depend on scheduling.

use std::time::Instant;

use geo::Polygon;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom;
use crate::predict::{Predictor, TileInput};
use crate::raster::{DType, PixelBlock, RasterInfo, RasterSink, RasterSource, RasterWindow, Samples};
use crate::tiling::{self, Tile, TileGridSpec};

/// Written over the cores of tiles whose prediction failed; declared as the confidence
/// raster's nodata value.
pub const FAILED_CONFIDENCE: f32 = -1.0;

/// Mask value for pixels whose confidence is nodata.
pub const MASK_NODATA: u8 = 255;

const STRIP_PIXELS: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StitchConfig {
    pub tile_size: usize,
    pub overlap: usize,
    pub batch_size: usize,
    pub skip_empty: bool,
    /// Skipped tiles get nodata instead of confidence 0.
    pub nodata_skip: bool,
    pub threshold: f64,
    pub workers: usize,
    /// Extra attempts per tile after a predictor error.
    pub retries: usize,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            tile_size: tiling::DEFAULT_TILE_SIZE,
            overlap: tiling::DEFAULT_OVERLAP,
            batch_size: 4,
            skip_empty: true,
            nodata_skip: false,
            threshold: 0.5,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            retries: 1,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.overlap >= self.tile_size {
            return Err(Error::invalid(format!(
                "need 0 <= overlap < tile_size, got overlap {} and tile_size {}",
                self.overlap, self.tile_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be > 0"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    pub fn grid_spec(&self, info: &RasterInfo) -> Result<TileGridSpec> {
        TileGridSpec::new(info.width, info.height, self.tile_size, self.overlap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileFailure {
    pub col: usize,
    pub row: usize,
    pub window: RasterWindow,
    pub attempts: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StitchSummary {
    pub tiles_total: usize,
    pub tiles_processed: usize,
    pub tiles_skipped: usize,
    pub tiles_failed: usize,
    pub failures: Vec<TileFailure>,
    pub pixels_written: u64,
    pub elapsed_secs: f64,
}

/// Layout of the confidence raster for `src`: one f32 band with [`FAILED_CONFIDENCE`]
/// as nodata.
pub fn confidence_info(src: &RasterInfo) -> RasterInfo {
    RasterInfo::new(src.width, src.height, 1, DType::F32, src.geotransform)
        .with_nodata(Some(FAILED_CONFIDENCE as f64))
}

/// Layout of the binary mask raster for `src`.
pub fn mask_info(src: &RasterInfo) -> RasterInfo {
    RasterInfo::new(src.width, src.height, 1, DType::U8, src.geotransform).with_nodata(Some(MASK_NODATA as f64))
}

enum Outcome {
    Predicted(PixelBlock),
    Skipped,
    Failed { attempts: usize, error: String },
}

/// Runs a predictor under the retry policy: `1 + retries` attempts, then give up.
pub(crate) fn with_retries<T>(retries: usize, mut f: impl FnMut() -> Result<T>) -> std::result::Result<T, (usize, Error)> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match f() {
            Ok(v) => return Ok(v),
            Err(e) if attempt > retries => return Err((attempt, e)),
            Err(e) => warn!("attempt {attempt} failed, retrying: {e}"),
        }
    }
}

pub(crate) fn worker_pool(workers: usize, predictor: &dyn Predictor) -> Result<rayon::ThreadPool> {
    let n = predictor.max_concurrency().map_or(workers, |m| m.clamp(1, workers));
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .thread_name(|i| format!("tcd-worker-{i}"))
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))
}

fn predict_tile(src: &dyn RasterSource, predictor: &dyn Predictor, cfg: &StitchConfig, tile: &Tile) -> Result<Outcome> {
    let block = src.read_window(tile.window)?;
    if cfg.skip_empty && tiling::is_empty_tile(&block, src.info().nodata) {
        return Ok(Outcome::Skipped);
    }
    let input = TileInput::new(tile.window, &block);
    let result = with_retries(cfg.retries, || {
        let pred = predictor.predict_semantic(&input)?;
        pred.validate(tile.window.width, tile.window.height)?;
        Ok(pred)
    });
    drop(block);
    Ok(match result {
        Ok(pred) => {
            let full = pred.into_block();
            Outcome::Predicted(full.crop(tile.core.relative_to(&tile.window)))
        }
        Err((attempts, e)) => Outcome::Failed {
            attempts,
            error: e.to_string(),
        },
    })
}

/// Predicts every tile of `src` and writes the tile cores into `sink`.
pub fn stitch_semantic(
    src: &dyn RasterSource,
    predictor: &dyn Predictor,
    cfg: &StitchConfig,
    sink: &dyn RasterSink,
) -> Result<StitchSummary> {
    cfg.validate()?;
    let si = src.info();
    let oi = sink.info();
    if (oi.width, oi.height) != (si.width, si.height) || oi.bands != 1 || oi.dtype != DType::F32 {
        return Err(Error::invalid(format!(
            "sink must be a {}x{} single-band f32 raster, got {}x{}x{} {:?}",
            si.width, si.height, oi.width, oi.height, oi.bands, oi.dtype
        )));
    }
    if !predictor.capabilities().semantic {
        return Err(Error::invalid(format!("{} cannot predict semantic masks", predictor.name())));
    }
    let started = Instant::now();
    let grid = tiling::build_grid(&cfg.grid_spec(si)?)?;
    let pool = worker_pool(cfg.workers, predictor)?;
    let nodata = oi.nodata.unwrap_or(FAILED_CONFIDENCE as f64);
    let mut summary = StitchSummary {
        tiles_total: grid.len(),
        ..Default::default()
    };
    info!(
        "semantic run: {} tiles of {} px, overlap {}, {} workers",
        grid.len(),
        cfg.tile_size,
        cfg.overlap,
        pool.current_num_threads()
    );
    for batch in grid.chunks(cfg.batch_size) {
        let outcomes: Vec<Result<Outcome>> =
            pool.install(|| batch.par_iter().map(|t| predict_tile(src, predictor, cfg, t)).collect());
        for (tile, outcome) in batch.iter().zip(outcomes) {
            let block = match outcome? {
                Outcome::Predicted(core) => {
                    summary.tiles_processed += 1;
                    core
                }
                Outcome::Skipped => {
                    summary.tiles_skipped += 1;
                    let v = if cfg.nodata_skip { nodata } else { 0.0 };
                    PixelBlock::filled(tile.core.width, tile.core.height, 1, DType::F32, v)
                }
                Outcome::Failed { attempts, error } => {
                    warn!("tile ({}, {}) failed after {attempts} attempts: {error}", tile.col, tile.row);
                    summary.tiles_failed += 1;
                    summary.failures.push(TileFailure {
                        col: tile.col,
                        row: tile.row,
                        window: tile.window,
                        attempts,
                        error,
                    });
                    PixelBlock::filled(tile.core.width, tile.core.height, 1, DType::F32, nodata)
                }
            };
            sink.write_window(tile.core, &block)?;
            summary.pixels_written += tile.core.area() as u64;
        }
    }
    summary.elapsed_secs = started.elapsed().as_secs_f64();
    Ok(summary)
}

fn strip_rows(width: usize) -> usize {
    (STRIP_PIXELS / width.max(1)).max(1)
}

fn single_band_f32(info: &RasterInfo, what: &str) -> Result<()> {
    if info.bands != 1 || info.dtype != DType::F32 {
        return Err(Error::invalid(format!("{what} expects a single-band f32 raster")));
    }
    Ok(())
}

/// Per-pixel threshold of a confidence block: 1 iff `c >= threshold`, nodata kept.
pub fn binarize_block(conf: &PixelBlock, nodata: Option<f64>, threshold: f64) -> PixelBlock {
    let data = match &conf.samples {
        Samples::F32(v) => v
            .iter()
            .map(|&c| {
                if nodata.is_some_and(|n| c as f64 == n) || c.is_nan() {
                    MASK_NODATA
                } else {
                    u8::from(c as f64 >= threshold)
                }
            })
            .collect(),
        Samples::U8(v) => v.iter().map(|&c| u8::from(c as f64 >= threshold)).collect(),
    };
    PixelBlock {
        width: conf.width,
        height: conf.height,
        bands: 1,
        samples: Samples::U8(data),
    }
}

/// Streams `conf` through [`binarize_block`] into a u8 sink of the same size.
pub fn binarize(conf: &dyn RasterSource, threshold: f64, sink: &dyn RasterSink) -> Result<()> {
    let ci = conf.info();
    single_band_f32(ci, "binarize")?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    for strip in ci.extent().row_strips(strip_rows(ci.width)) {
        let block = conf.read_window(strip)?;
        sink.write_window(strip, &binarize_block(&block, ci.nodata, threshold))?;
    }
    Ok(())
}

/// Quantizes confidences to u8 as `round(255 c)`; nodata pixels become 0.
pub fn export_u8(conf: &dyn RasterSource, sink: &dyn RasterSink) -> Result<()> {
    let ci = conf.info();
    single_band_f32(ci, "u8 export")?;
    for strip in ci.extent().row_strips(strip_rows(ci.width)) {
        let block = conf.read_window(strip)?;
        let v = block.as_f32().expect("f32 block");
        let data = v
            .iter()
            .map(|&c| {
                if ci.is_nodata(c as f64) {
                    0
                } else {
                    (255.0 * c.clamp(0.0, 1.0) as f64).round() as u8
                }
            })
            .collect();
        sink.write_window(strip, &PixelBlock::from_u8(strip.width, strip.height, 1, data)?)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverStats {
    pub canopy_pixels: u64,
    pub total_pixels: u64,
    pub fraction: f64,
}

/// Fraction of mask pixels equal to 1 among the pixels whose centers fall inside `roi`
/// (world coordinates), or among all non-nodata pixels without an ROI.
pub fn canopy_cover(mask: &dyn RasterSource, roi: Option<&[Polygon<f64>]>) -> Result<CoverStats> {
    let mi = mask.info();
    if mi.bands != 1 {
        return Err(Error::invalid("canopy cover expects a single-band mask"));
    }
    let extent = mi.extent();
    let pixel_roi: Option<Vec<Polygon<f64>>> =
        roi.map(|ps| ps.iter().map(|p| geom::world_to_pixel_polygon(p, &mi.geotransform)).collect());
    // Only the rows overlapped by the ROI need to be read.
    let bounds = match &pixel_roi {
        None => Some(extent),
        Some(ps) => roi_window(ps, &extent),
    };
    let mut stats = CoverStats {
        canopy_pixels: 0,
        total_pixels: 0,
        fraction: 0.0,
    };
    if let Some(bounds) = bounds {
        let refs: Option<Vec<&Polygon<f64>>> = pixel_roi.as_ref().map(|ps| ps.iter().collect());
        for strip in bounds.row_strips(strip_rows(bounds.width)) {
            let block = mask.read_window(strip)?;
            let inside = refs.as_ref().map(|r| geom::rasterize(r, strip));
            for i in 0..strip.area() {
                if inside.as_ref().is_some_and(|m| m[i] == 0) {
                    continue;
                }
                let v = block.get(i % strip.width, i / strip.width, 0);
                if mi.is_nodata(v) {
                    continue;
                }
                stats.total_pixels += 1;
                if v == 1.0 {
                    stats.canopy_pixels += 1;
                }
            }
        }
    }
    if stats.total_pixels == 0 {
        return Err(Error::EmptyRegion(
            "empty region: no valid pixel centers fall inside the region of interest".into(),
        ));
    }
    stats.fraction = stats.canopy_pixels as f64 / stats.total_pixels as f64;
    Ok(stats)
}

fn roi_window(polys: &[Polygon<f64>], extent: &RasterWindow) -> Option<RasterWindow> {
    let mut acc: Option<(f64, f64, f64, f64)> = None;
    for p in polys {
        if let Some(r) = geom::bbox(p) {
            let b = (r.min().x, r.min().y, r.max().x, r.max().y);
            acc = Some(match acc {
                None => b,
                Some(a) => (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3)),
            });
        }
    }
    let (x0, y0, x1, y1) = acc?;
    let c0 = x0.floor().max(0.0) as usize;
    let r0 = y0.floor().max(0.0) as usize;
    let c1 = (x1.ceil().max(0.0) as usize).min(extent.width);
    let r1 = (y1.ceil().max(0.0) as usize).min(extent.height);
    (c1 > c0 && r1 > r0).then(|| RasterWindow::new(c0, r0, c1 - c0, r1 - r0))
}
