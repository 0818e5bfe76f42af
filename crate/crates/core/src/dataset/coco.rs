//! MS-COCO reading and export for tile annotations.
//!
//! Segmentations are polygon lists in tile pixel coordinates. The first ring is the
//! exterior; any further rings are holes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use geo::{Area, BoundingRect, Coord, LineString, Polygon};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Assignment, SourceImageRecord, SplitResult};
use crate::error::{Error, Result};
use crate::geom;
use crate::predict::InstanceClass;
use crate::raster::geotiff::write_geotiff;
use crate::raster::{DType, GeoTransform, MemRaster, PixelBlock, RasterInfo, RasterWindow};

pub const TILE_SIZE: u32 = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

impl CocoImage {
    pub fn for_tile(id: u64) -> Self {
        CocoImage {
            id,
            file_name: format!("{id}.tif"),
            width: TILE_SIZE,
            height: TILE_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub tile_id: u64,
    pub class: InstanceClass,
    pub polygon: Polygon<f64>,
}

impl Annotation {
    pub fn category_id(&self) -> u64 {
        category_id(self.class)
    }

    pub fn iscrowd(&self) -> u8 {
        u8::from(self.class == InstanceClass::Canopy)
    }

    pub fn area(&self) -> f64 {
        self.polygon.unsigned_area()
    }

    /// `[x, y, w, h]` of the exterior ring.
    pub fn bbox(&self) -> [f64; 4] {
        match self.polygon.bounding_rect() {
            Some(r) => [r.min().x, r.min().y, r.width(), r.height()],
            None => [0.0; 4],
        }
    }

    pub fn segmentation(&self) -> Vec<Vec<f64>> {
        std::iter::once(self.polygon.exterior())
            .chain(self.polygon.interiors())
            .map(|ring| {
                let n = ring.0.len().saturating_sub(1);
                ring.0[..n].iter().flat_map(|c| [c.x, c.y]).collect()
            })
            .collect()
    }
}

pub fn category_id(class: InstanceClass) -> u64 {
    match class {
        InstanceClass::Tree => 1,
        InstanceClass::Canopy => 2,
    }
}

pub fn category_class(id: u64) -> Option<InstanceClass> {
    match id {
        1 => Some(InstanceClass::Tree),
        2 => Some(InstanceClass::Canopy),
        _ => None,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<Annotation>,
}

impl CocoDataset {
    pub fn annotations_for(&self, tile_id: u64) -> Vec<&Annotation> {
        self.annotations.iter().filter(|a| a.tile_id == tile_id).collect()
    }
}

fn ring_from_flat(flat: &[f64]) -> Result<LineString<f64>> {
    if flat.len() % 2 != 0 || flat.len() < 6 {
        return Err(Error::invalid("segmentation ring needs at least 3 x,y pairs"));
    }
    Ok(LineString::new(flat.chunks_exact(2).map(|p| Coord { x: p[0], y: p[1] }).collect()))
}

fn parse_annotation(v: &Value) -> Result<Annotation> {
    let field = |k: &str| v.get(k).and_then(Value::as_u64).ok_or_else(|| Error::invalid(format!("annotation without integer {k:?}")));
    let id = field("id")?;
    let tile_id = field("image_id")?;
    let cat = field("category_id")?;
    let class = category_class(cat).ok_or_else(|| Error::invalid(format!("annotation {id}: unknown category {cat}")))?;
    let seg = v
        .get("segmentation")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Unsupported(format!("annotation {id}: only polygon segmentations are supported")))?;
    let mut rings = Vec::with_capacity(seg.len());
    for ring in seg {
        let flat: Vec<f64> = ring
            .as_array()
            .ok_or_else(|| Error::invalid(format!("annotation {id}: ring is not an array")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| Error::invalid(format!("annotation {id}: non-numeric coordinate"))))
            .collect::<Result<_>>()?;
        rings.push(ring_from_flat(&flat)?);
    }
    let mut rings = rings.into_iter();
    let exterior = rings.next().ok_or_else(|| Error::invalid(format!("annotation {id}: empty segmentation")))?;
    Ok(Annotation {
        id,
        tile_id,
        class,
        polygon: Polygon::new(exterior, rings.collect()),
    })
}

pub fn parse_coco(v: &Value) -> Result<CocoDataset> {
    let images = match v.get("images") {
        Some(imgs) => serde_json::from_value(imgs.clone())?,
        None => Vec::new(),
    };
    let annotations = v
        .get("annotations")
        .and_then(Value::as_array)
        .map(|a| a.iter().map(parse_annotation).collect::<Result<Vec<_>>>())
        .transpose()?
        .unwrap_or_default();
    Ok(CocoDataset { images, annotations })
}

pub fn read_coco(path: impl AsRef<Path>) -> Result<CocoDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_coco(&serde_json::from_str(&text)?)
}

/// Which part of a split to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSelector {
    Holdout,
    /// All training folds.
    Train,
    /// Training folds except this one.
    TrainExcept(usize),
    Fold(usize),
}

impl SplitSelector {
    /// `holdout`, `train`, `fold:<n>` or `train-except:<n>`.
    pub fn parse(s: &str) -> Result<Self> {
        let num = |v: &str| v.parse::<usize>().map_err(|_| Error::invalid(format!("bad fold in {s:?}")));
        match s.split_once(':') {
            None if s == "holdout" => Ok(SplitSelector::Holdout),
            None if s == "train" => Ok(SplitSelector::Train),
            Some(("fold", n)) => Ok(SplitSelector::Fold(num(n)?)),
            Some(("train-except", n)) => Ok(SplitSelector::TrainExcept(num(n)?)),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }

    pub fn matches(self, a: Assignment) -> bool {
        match (self, a) {
            (SplitSelector::Holdout, Assignment::Holdout) => true,
            (SplitSelector::Train, Assignment::Train { .. }) => true,
            (SplitSelector::TrainExcept(k), Assignment::Train { fold }) => fold != k,
            (SplitSelector::Fold(k), Assignment::Train { fold }) => fold == k,
            _ => false,
        }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn annotation_json(a: &Annotation) -> Value {
    let bbox = a.bbox().map(round6);
    json!({
        "id": a.id,
        "image_id": a.tile_id,
        "category_id": a.category_id(),
        "segmentation": a.segmentation(),
        "area": round6(a.area()),
        "bbox": bbox,
        "iscrowd": a.iscrowd(),
    })
}

/// COCO document for the tiles of `split`. Image metadata comes from `known` when present.
pub fn coco_json(
    split: SplitSelector,
    records: &[SourceImageRecord],
    splits: &SplitResult,
    annotations: &[Annotation],
    known: &[CocoImage],
) -> Result<Value> {
    let all_tiles: BTreeSet<u64> = records.iter().flat_map(|r| r.tile_ids.iter().copied()).collect();
    if let Some(a) = annotations.iter().find(|a| !all_tiles.contains(&a.tile_id)) {
        return Err(Error::invalid(format!("annotation {} references unknown tile {}", a.id, a.tile_id)));
    }
    let mut ids = BTreeSet::new();
    if let Some(a) = annotations.iter().find(|a| !ids.insert(a.id)) {
        return Err(Error::invalid(format!("duplicate annotation id {}", a.id)));
    }
    let mut selected = BTreeSet::new();
    for t in &all_tiles {
        let a = splits
            .tiles
            .get(t)
            .ok_or_else(|| Error::invalid(format!("tile {t} missing from split assignment")))?;
        if split.matches(*a) {
            selected.insert(*t);
        }
    }
    let known: BTreeMap<u64, &CocoImage> = known.iter().map(|i| (i.id, i)).collect();
    let images: Vec<CocoImage> = selected
        .iter()
        .map(|t| known.get(t).map_or_else(|| CocoImage::for_tile(*t), |i| (*i).clone()))
        .collect();
    let mut anns: Vec<&Annotation> = annotations.iter().filter(|a| selected.contains(&a.tile_id)).collect();
    anns.sort_by_key(|a| a.id);
    Ok(json!({
        "images": images,
        "categories": [
            {"id": 1, "name": "tree"},
            {"id": 2, "name": "canopy"},
        ],
        "annotations": anns.into_iter().map(annotation_json).collect::<Vec<_>>(),
    }))
}

/// Returns (images, annotations) written.
pub fn export_coco(
    split: SplitSelector,
    records: &[SourceImageRecord],
    splits: &SplitResult,
    annotations: &[Annotation],
    known: &[CocoImage],
    path: impl AsRef<Path>,
) -> Result<(usize, usize)> {
    let doc = coco_json(split, records, splits, annotations, known)?;
    let counts = (doc["images"].as_array().map_or(0, Vec::len), doc["annotations"].as_array().map_or(0, Vec::len));
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_vec(&doc)?).map_err(|e| Error::file(path, e))?;
    Ok(counts)
}

/// Binary mask (1 = tree or canopy) over a `width` × `height` tile.
pub fn rasterize_annotations(annotations: &[&Annotation], width: usize, height: usize) -> Vec<u8> {
    let polys: Vec<&Polygon<f64>> = annotations.iter().map(|a| &a.polygon).collect();
    geom::rasterize(&polys, RasterWindow::full(width, height))
}

/// Writes one `<image id>.tif` binary mask per image (or only `only`) into `dir`.
/// Tiles are rasterized in parallel.
pub fn rasterize_to_dir(ds: &CocoDataset, dir: &Path, only: Option<u64>) -> Result<Vec<PathBuf>> {
    let mut images: BTreeMap<u64, CocoImage> = ds.images.iter().map(|i| (i.id, i.clone())).collect();
    for a in &ds.annotations {
        images.entry(a.tile_id).or_insert_with(|| CocoImage::for_tile(a.tile_id));
    }
    if let Some(id) = only {
        if !images.contains_key(&id) {
            return Err(Error::invalid(format!("image {id} not found in annotations")));
        }
        images.retain(|k, _| *k == id);
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut by_tile: BTreeMap<u64, Vec<&Annotation>> = BTreeMap::new();
    for a in &ds.annotations {
        by_tile.entry(a.tile_id).or_default().push(a);
    }
    images
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|img| {
            let (w, h) = (img.width as usize, img.height as usize);
            let anns = by_tile.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
            let mask = rasterize_annotations(anns, w, h);
            let info = RasterInfo::new(w, h, 1, DType::U8, GeoTransform::identity());
            let raster = MemRaster::from_block(info, PixelBlock::from_u8(w, h, 1, mask)?)?;
            let path = dir.join(format!("{}.tif", img.id));
            write_geotiff(&path, &raster)?;
            Ok(path)
        })
        .collect()
}
