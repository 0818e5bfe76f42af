//! Per-tile predictors.
//!
//! A [`Predictor`] turns one tile of RGB imagery into a confidence grid and/or a list of
//! scored instance polygons. The built-in predictors are deterministic oracles used to
//! exercise the pipeline without a neural network; real models attach through the
//! subprocess protocol in [`adapter`].

pub mod adapter;
pub mod protocol;
pub mod trace;

use std::path::PathBuf;
use std::sync::Arc;

use geo::{BooleanOps, BoundingRect, Polygon};
use rstar::{RTree, RTreeObject, AABB};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom;
use crate::raster::{PixelBlock, RasterInfo, RasterSource, RasterWindow, Samples};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceClass {
    Tree,
    Canopy,
}

impl InstanceClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            InstanceClass::Tree => "tree",
            InstanceClass::Canopy => "canopy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tree" => Some(InstanceClass::Tree),
            "canopy" => Some(InstanceClass::Canopy),
            _ => None,
        }
    }
}

/// A scored, class-tagged polygon. Coordinates are tile pixels when produced by a
/// predictor and world units after georeferencing.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceObject {
    pub class: InstanceClass,
    pub score: f64,
    pub geometry: Polygon<f64>,
}

/// Confidence grid for one tile, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPrediction {
    pub width: usize,
    pub height: usize,
    pub confidence: Vec<f32>,
}

impl SemanticPrediction {
    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        SemanticPrediction {
            width,
            height,
            confidence: vec![value; width * height],
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height || self.confidence.len() != width * height {
            return Err(Error::Predictor(format!(
                "prediction is {}x{} ({} values), tile is {width}x{height}",
                self.width,
                self.height,
                self.confidence.len()
            )));
        }
        if let Some(v) = self.confidence.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Predictor(format!("confidence {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn into_block(self) -> PixelBlock {
        PixelBlock {
            width: self.width,
            height: self.height,
            bands: 1,
            samples: Samples::F32(self.confidence),
        }
    }
}

/// One tile handed to a predictor: its window in the source raster and its pixels.
#[derive(Clone, Copy, Debug)]
pub struct TileInput<'a> {
    pub window: RasterWindow,
    pub block: &'a PixelBlock,
}

impl<'a> TileInput<'a> {
    pub fn new(window: RasterWindow, block: &'a PixelBlock) -> Self {
        TileInput { window, block }
    }

    fn rgb(&self) -> Result<&'a [u8]> {
        match self.block.as_u8() {
            Some(v) if self.block.bands == 3 => Ok(v),
            _ => Err(Error::invalid("predictors expect 3-band u8 imagery")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub semantic: bool,
    pub instance: bool,
}

pub trait Predictor: Send + Sync {
    fn name(&self) -> String;

    fn capabilities(&self) -> Capabilities;

    fn predict_semantic(&self, tile: &TileInput<'_>) -> Result<SemanticPrediction>;

    fn predict_instances(&self, tile: &TileInput<'_>) -> Result<Vec<InstanceObject>>;

    /// Maximum number of requests this predictor can serve at once (`None` = unbounded).
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

fn unsupported(name: &str, task: &str) -> Error {
    Error::Predictor(format!("{name} does not support {task} prediction"))
}

/// Same value everywhere; never finds instances.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub f32);

impl Predictor for ConstantPredictor {
    fn name(&self) -> String {
        format!("constant:{}", self.0)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            semantic: true,
            instance: true,
        }
    }

    fn predict_semantic(&self, tile: &TileInput<'_>) -> Result<SemanticPrediction> {
        Ok(SemanticPrediction::constant(tile.block.width, tile.block.height, self.0))
    }

    fn predict_instances(&self, _tile: &TileInput<'_>) -> Result<Vec<InstanceObject>> {
        Ok(Vec::new())
    }
}

/// Excess-green index mapped to [0, 1]: `clamp((2G - R - B) / 510 + 0.5, 0, 1)`.
pub fn greenness(r: u8, g: u8, b: u8) -> f32 {
    let v = (2.0 * g as f64 - r as f64 - b as f64) / 510.0 + 0.5;
    v.clamp(0.0, 1.0) as f32
}

/// Pixel-local vegetation oracle. Instances are the 4-connected components of
/// `confidence >= threshold`, each scored by its mean confidence.
#[derive(Clone, Copy, Debug)]
pub struct GreennessPredictor {
    pub instance_threshold: f32,
    /// Components smaller than this many pixels are ignored.
    pub min_pixels: usize,
}

impl Default for GreennessPredictor {
    fn default() -> Self {
        GreennessPredictor {
            instance_threshold: 0.5,
            min_pixels: 4,
        }
    }
}

impl Predictor for GreennessPredictor {
    fn name(&self) -> String {
        "greenness".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            semantic: true,
            instance: true,
        }
    }

    fn predict_semantic(&self, tile: &TileInput<'_>) -> Result<SemanticPrediction> {
        let rgb = tile.rgb()?;
        Ok(SemanticPrediction {
            width: tile.block.width,
            height: tile.block.height,
            confidence: rgb.chunks_exact(3).map(|p| greenness(p[0], p[1], p[2])).collect(),
        })
    }

    fn predict_instances(&self, tile: &TileInput<'_>) -> Result<Vec<InstanceObject>> {
        let conf = self.predict_semantic(tile)?;
        let mask: Vec<bool> = conf.confidence.iter().map(|&c| c >= self.instance_threshold).collect();
        let comps = trace::components(&mask, conf.width, conf.height);
        Ok(comps
            .into_iter()
            .filter(|c| c.pixels.len() >= self.min_pixels)
            .filter_map(|c| {
                let score = c
                    .pixels
                    .iter()
                    .map(|&i| conf.confidence[i] as f64)
                    .sum::<f64>()
                    / c.pixels.len() as f64;
                trace::component_polygon(&c, conf.width).map(|geometry| InstanceObject {
                    class: InstanceClass::Tree,
                    score: score.clamp(0.0, 1.0),
                    geometry,
                })
            })
            .collect())
    }
}

/// Replays a ground-truth mask or confidence raster aligned with the input.
pub struct PlaybackSemantic {
    truth: Arc<dyn RasterSource>,
}

impl PlaybackSemantic {
    pub fn new(truth: Arc<dyn RasterSource>) -> Result<Self> {
        if truth.info().bands != 1 {
            return Err(Error::invalid("playback truth raster must have one band"));
        }
        Ok(PlaybackSemantic { truth })
    }
}

impl Predictor for PlaybackSemantic {
    fn name(&self) -> String {
        "playback-semantic".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            semantic: true,
            instance: false,
        }
    }

    fn predict_semantic(&self, tile: &TileInput<'_>) -> Result<SemanticPrediction> {
        let block = self.truth.read_window(tile.window)?;
        let confidence = match block.samples {
            Samples::U8(v) => v.into_iter().map(|x| if x > 0 { 1.0 } else { 0.0 }).collect(),
            Samples::F32(v) => v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect(),
        };
        Ok(SemanticPrediction {
            width: tile.window.width,
            height: tile.window.height,
            confidence,
        })
    }

    fn predict_instances(&self, _tile: &TileInput<'_>) -> Result<Vec<InstanceObject>> {
        Err(unsupported("playback-semantic", "instance"))
    }
}

struct IndexedTruth {
    idx: usize,
    envelope: AABB<[f64; 2]>,
}

impl RTreeObject for IndexedTruth {
    type Envelope = AABB<[f64; 2]>;
    fn envelope(&self) -> Self::Envelope {
        self.envelope
    }
}

/// Replays ground-truth polygons (raster pixel coordinates) clipped to each tile, score 1.
pub struct PlaybackInstances {
    truth: Vec<(InstanceClass, Polygon<f64>)>,
    index: RTree<IndexedTruth>,
}

impl PlaybackInstances {
    pub fn new(truth: Vec<(InstanceClass, Polygon<f64>)>) -> Self {
        let entries = truth
            .iter()
            .enumerate()
            .filter_map(|(idx, (_, p))| {
                p.bounding_rect().map(|r| IndexedTruth {
                    idx,
                    envelope: AABB::from_corners([r.min().x, r.min().y], [r.max().x, r.max().y]),
                })
            })
            .collect();
        PlaybackInstances {
            truth,
            index: RTree::bulk_load(entries),
        }
    }
}

impl Predictor for PlaybackInstances {
    fn name(&self) -> String {
        "playback-instance".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            semantic: false,
            instance: true,
        }
    }

    fn predict_semantic(&self, _tile: &TileInput<'_>) -> Result<SemanticPrediction> {
        Err(unsupported("playback-instance", "semantic"))
    }

    fn predict_instances(&self, tile: &TileInput<'_>) -> Result<Vec<InstanceObject>> {
        let w = tile.window;
        let (x0, y0) = (w.col_off as f64, w.row_off as f64);
        let (x1, y1) = (w.col_end() as f64, w.row_end() as f64);
        let query = AABB::from_corners([x0, y0], [x1, y1]);
        let mut hits: Vec<usize> = self
            .index
            .locate_in_envelope_intersecting(&query)
            .map(|e| e.idx)
            .collect();
        hits.sort_unstable();
        let local = hits
            .into_iter()
            .map(|idx| {
                let (class, poly) = &self.truth[idx];
                InstanceObject {
                    class: *class,
                    score: 1.0,
                    geometry: geo::MapCoords::map_coords(poly, |c| geo::Coord { x: c.x - x0, y: c.y - y0 }),
                }
            })
            .collect();
        Ok(clip_to_tile(local, x1 - x0, y1 - y0))
    }
}

/// Repairs instances from an untrusted source and clips them to `[0, w] x [0, h]`.
pub(crate) fn clip_to_tile(instances: Vec<InstanceObject>, w: f64, h: f64) -> Vec<InstanceObject> {
    let clip = geom::rect_polygon(0.0, 0.0, w, h);
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let Some(valid) = geom::repair(&inst.geometry) else {
            continue;
        };
        let inside = valid
            .bounding_rect()
            .is_some_and(|r| r.min().x >= 0.0 && r.min().y >= 0.0 && r.max().x <= w && r.max().y <= h);
        let parts = if inside { vec![valid] } else { valid.intersection(&clip).0 };
        for part in parts {
            let snapped = geo::MapCoords::map_coords(&part, |c| geo::Coord {
                x: c.x.clamp(0.0, w),
                y: c.y.clamp(0.0, h),
            });
            if let Some(geometry) = geom::repair(&snapped) {
                out.push(InstanceObject {
                    class: inst.class,
                    score: inst.score.clamp(0.0, 1.0),
                    geometry,
                });
            }
        }
    }
    out
}

/// How to build a predictor, as given on the command line:
/// `greenness`, `constant:<v>`, `playback-semantic:<raster>`,
/// `playback-instance:<geojson>`, `adapter:<command line>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorDescriptor {
    PlaybackSemantic { truth: PathBuf },
    PlaybackInstance { truth: PathBuf },
    Greenness,
    Constant { value: f32 },
    Adapter { command: Vec<String> },
}

impl PredictorDescriptor {
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        fn need<'s>(kind: &str, a: Option<&'s str>) -> Result<&'s str> {
            a.filter(|a| !a.trim().is_empty())
                .ok_or_else(|| Error::invalid(format!("model descriptor {kind:?} needs a parameter")))
        }
        match kind {
            "greenness" => Ok(PredictorDescriptor::Greenness),
            "constant" => {
                let v: f32 = need(kind, arg)?
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad constant in {s:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid("constant predictor value must be in [0, 1]"));
                }
                Ok(PredictorDescriptor::Constant { value: v })
            }
            "playback-semantic" => Ok(PredictorDescriptor::PlaybackSemantic {
                truth: need(kind, arg)?.into(),
            }),
            "playback-instance" => Ok(PredictorDescriptor::PlaybackInstance {
                truth: need(kind, arg)?.into(),
            }),
            "adapter" => {
                let command: Vec<String> = need(kind, arg)?.split_whitespace().map(String::from).collect();
                Ok(PredictorDescriptor::Adapter { command })
            }
            _ => Err(Error::invalid(format!("unknown model kind {kind:?}"))),
        }
    }

    /// Instantiates the predictor for an input raster with geotransform `input`.
    /// Playback truth in world coordinates is mapped to the input's pixel grid.
    pub fn build(&self, input: &RasterInfo, adapter: adapter::AdapterOptions) -> Result<Box<dyn Predictor>> {
        Ok(match self {
            PredictorDescriptor::Greenness => Box::new(GreennessPredictor::default()),
            PredictorDescriptor::Constant { value } => Box::new(ConstantPredictor(*value)),
            PredictorDescriptor::PlaybackSemantic { truth } => {
                let src = crate::raster::mosaic::open_raster(truth)?;
                let ti = src.info();
                if (ti.width, ti.height) != (input.width, input.height) {
                    return Err(Error::invalid(format!(
                        "playback raster is {}x{}, input is {}x{}",
                        ti.width, ti.height, input.width, input.height
                    )));
                }
                Box::new(PlaybackSemantic::new(Arc::from(src))?)
            }
            PredictorDescriptor::PlaybackInstance { truth } => {
                let fc = crate::vector::read_geojson(truth)?;
                if let (Some(a), b) = (fc.epsg, input.geotransform.crs) {
                    if b != 0 && a != b {
                        return Err(Error::CrsMismatch { left: a, right: b });
                    }
                }
                let truth = fc
                    .instances()?
                    .into_iter()
                    .map(|i| (i.class, geom::world_to_pixel_polygon(&i.geometry, &input.geotransform)))
                    .collect();
                Box::new(PlaybackInstances::new(truth))
            }
            PredictorDescriptor::Adapter { command } => Box::new(adapter::spawn_adapter(command, adapter)?),
        })
    }
}
