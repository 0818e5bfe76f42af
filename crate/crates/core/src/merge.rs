//! Instance post-processing: per-tile cleanup and the cross-tile merge.

use std::cmp::Ordering;
use std::time::Instant;

use geo::{Area, BoundingRect, Centroid, Contains, Polygon};
use log::{info, warn};
use rayon::prelude::*;
use rstar::{RTree, RTreeObject, AABB};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom;
use crate::predict::{InstanceClass, InstanceObject, Predictor, TileInput};
use crate::raster::{GeoTransform, RasterSource, RasterWindow};
use crate::stitch::{self, TileFailure};
use crate::tiling::{self, Tile, TileGridSpec};

/// Distance (px) from a window edge under which a geometry counts as touching it.
pub const EDGE_TOLERANCE: f64 = 0.5;

/// Relative intersection area below which two polygons are treated as not overlapping.
const OVERLAP_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub nms_iou: f64,
    pub merge_iou: f64,
    pub confidence_threshold: f64,
    pub semantic_filter_fraction: Option<f64>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            nms_iou: 0.5,
            merge_iou: 0.5,
            confidence_threshold: 0.4,
            semantic_filter_fraction: None,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("nms_iou", Some(self.nms_iou)),
            ("merge_iou", Some(self.merge_iou)),
            ("confidence_threshold", Some(self.confidence_threshold)),
            ("semantic_filter_fraction", self.semantic_filter_fraction),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

struct Entry {
    id: usize,
    envelope: AABB<[f64; 2]>,
}

impl RTreeObject for Entry {
    type Envelope = AABB<[f64; 2]>;
    fn envelope(&self) -> Self::Envelope {
        self.envelope
    }
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

fn envelope_of(p: &Polygon<f64>) -> Option<AABB<[f64; 2]>> {
    p.bounding_rect()
        .map(|r| AABB::from_corners([r.min().x, r.min().y], [r.max().x, r.max().y]))
}

/// Bounding-box R-tree over polygons, keyed by caller-chosen ids.
#[derive(Default)]
pub struct SpatialIndex {
    tree: RTree<Entry>,
}

impl SpatialIndex {
    pub fn new() -> Self {
        SpatialIndex::default()
    }

    pub fn bulk_load<'a>(items: impl IntoIterator<Item = (usize, &'a Polygon<f64>)>) -> Self {
        let entries = items
            .into_iter()
            .filter_map(|(id, p)| envelope_of(p).map(|envelope| Entry { id, envelope }))
            .collect();
        SpatialIndex {
            tree: RTree::bulk_load(entries),
        }
    }

    pub fn insert(&mut self, id: usize, p: &Polygon<f64>) {
        if let Some(envelope) = envelope_of(p) {
            self.tree.insert(Entry { id, envelope });
        }
    }

    pub fn remove(&mut self, id: usize, p: &Polygon<f64>) -> bool {
        match envelope_of(p) {
            Some(envelope) => self.tree.remove(&Entry { id, envelope }).is_some(),
            None => false,
        }
    }

    pub fn len(&self) -> usize {
        self.tree.size()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.size() == 0
    }

    /// Ids whose bounding box intersects `[min, max]`, ascending.
    pub fn query(&self, min: [f64; 2], max: [f64; 2]) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .tree
            .locate_in_envelope_intersecting(&AABB::from_corners(min, max))
            .map(|e| e.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn query_polygon(&self, p: &Polygon<f64>) -> Vec<usize> {
        match envelope_of(p) {
            Some(e) => self.query(e.lower(), e.upper()),
            None => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocessStats {
    pub input: usize,
    pub below_confidence: usize,
    pub repaired: usize,
    pub unrepairable: usize,
    pub suppressed: usize,
    pub touching_boundary: usize,
    pub kept: usize,
}

impl std::ops::AddAssign for PostprocessStats {
    fn add_assign(&mut self, o: Self) {
        self.input += o.input;
        self.below_confidence += o.below_confidence;
        self.repaired += o.repaired;
        self.unrepairable += o.unrepairable;
        self.suppressed += o.suppressed;
        self.touching_boundary += o.touching_boundary;
        self.kept += o.kept;
    }
}

fn by_score_desc(a: &InstanceObject, b: &InstanceObject) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Greedy per-class NMS: walk by descending score, suppress anything whose IoU with an
/// already kept instance of the same class is `>= iou`.
pub fn nms(mut instances: Vec<InstanceObject>, iou: f64) -> (Vec<InstanceObject>, usize) {
    instances.sort_by(|a, b| by_score_desc(a, b).then_with(|| canonical_cmp(a, b)));
    let mut kept: Vec<InstanceObject> = Vec::with_capacity(instances.len());
    let mut suppressed = 0;
    for inst in instances {
        let clash = kept
            .iter()
            .any(|k| k.class == inst.class && geom::polygon_iou(&k.geometry, &inst.geometry) >= iou);
        if clash {
            suppressed += 1;
        } else {
            kept.push(inst);
        }
    }
    (kept, suppressed)
}

fn touches_interior_edge(p: &Polygon<f64>, tile: &Tile) -> bool {
    let Some(r) = p.bounding_rect() else {
        return true;
    };
    let (w, h) = (tile.window.width as f64, tile.window.height as f64);
    (!tile.edges.left && r.min().x < EDGE_TOLERANCE)
        || (!tile.edges.top && r.min().y < EDGE_TOLERANCE)
        || (!tile.edges.right && r.max().x > w - EDGE_TOLERANCE)
        || (!tile.edges.bottom && r.max().y > h - EDGE_TOLERANCE)
}

/// Cleans one tile's predictions (tile pixel coordinates) and moves the survivors to
/// world coordinates.
pub fn tile_postprocess(
    instances: Vec<InstanceObject>,
    tile: &Tile,
    geotransform: &GeoTransform,
    cfg: &MergeConfig,
) -> (Vec<InstanceObject>, PostprocessStats) {
    let mut stats = PostprocessStats {
        input: instances.len(),
        ..Default::default()
    };
    let mut valid = Vec::with_capacity(instances.len());
    for inst in instances {
        if inst.score < cfg.confidence_threshold {
            stats.below_confidence += 1;
            continue;
        }
        let was_valid = geo::Validation::is_valid(&inst.geometry);
        match geom::repair(&inst.geometry) {
            Some(g) => {
                if !was_valid {
                    stats.repaired += 1;
                }
                valid.push(InstanceObject { geometry: g, ..inst });
            }
            None => stats.unrepairable += 1,
        }
    }
    if stats.unrepairable > 0 {
        warn!(
            "tile ({}, {}): dropped {} unrepairable polygons",
            tile.col, tile.row, stats.unrepairable
        );
    }
    let (kept, suppressed) = nms(valid, cfg.nms_iou);
    stats.suppressed = suppressed;
    let tile_gt = geotransform.shifted(tile.window.col_off, tile.window.row_off);
    let mut out = Vec::with_capacity(kept.len());
    for inst in kept {
        if inst.class == InstanceClass::Tree && touches_interior_edge(&inst.geometry, tile) {
            stats.touching_boundary += 1;
            continue;
        }
        out.push(InstanceObject {
            geometry: geom::pixel_to_world_polygon(&inst.geometry, &tile_gt),
            ..inst
        });
    }
    stats.kept = out.len();
    (out, stats)
}

fn cmp_f64s(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn bbox_key(p: &Polygon<f64>) -> [f64; 4] {
    p.bounding_rect()
        .map(|r| [r.min().x, r.min().y, r.max().x, r.max().y])
        .unwrap_or([f64::NAN; 4])
}

fn vertex_key(p: &Polygon<f64>) -> Vec<f64> {
    std::iter::once(p.exterior())
        .chain(p.interiors())
        .flat_map(|r| r.coords().flat_map(|c| [c.x, c.y]))
        .collect()
}

/// Canonical instance order: score descending, then bounding box, then class, then vertices.
pub fn canonical_cmp(a: &InstanceObject, b: &InstanceObject) -> Ordering {
    by_score_desc(a, b)
        .then_with(|| cmp_f64s(&bbox_key(&a.geometry), &bbox_key(&b.geometry)))
        .then_with(|| a.class.cmp(&b.class))
        .then_with(|| cmp_f64s(&vertex_key(&a.geometry), &vertex_key(&b.geometry)))
}

fn overlaps(a: &Polygon<f64>, b: &Polygon<f64>) -> bool {
    let inter = geom::intersection_area(a, b);
    inter > OVERLAP_EPS * a.unsigned_area().min(b.unsigned_area())
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Groups of same-class instances connected by positive-area overlap. Members and
/// groups come out in index order.
pub fn overlap_clusters(instances: &[InstanceObject]) -> Vec<Vec<usize>> {
    let index = SpatialIndex::bulk_load(instances.iter().enumerate().map(|(i, x)| (i, &x.geometry)));
    let mut ds = DisjointSet((0..instances.len()).collect());
    for (i, a) in instances.iter().enumerate() {
        for j in index.query_polygon(&a.geometry) {
            if j > i && instances[j].class == a.class && overlaps(&a.geometry, &instances[j].geometry) {
                ds.union(i, j);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; instances.len()];
    for i in 0..instances.len() {
        let root = ds.find(i);
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[root]].push(i);
    }
    groups
}

fn dissolve(members: Vec<InstanceObject>) -> InstanceObject {
    let score = members.iter().map(|m| m.score).fold(f64::NEG_INFINITY, f64::max);
    let class = members[0].class;
    let polys: Vec<Polygon<f64>> = members.into_iter().map(|m| m.geometry).collect();
    let merged = geom::largest_part(geo::unary_union(&polys))
        .map(|p| geom::normalize(&p))
        .unwrap_or_else(|| polys[0].clone());
    InstanceObject {
        class,
        score,
        geometry: merged,
    }
}

/// Index of the first member (in the given order) that covers the centroids of at least
/// two distinct other members. Members that are near-duplicates of the candidate
/// (IoU >= `dup_iou`) are not counted, and near-duplicates among the counted members
/// count once.
fn find_umbrella(members: &[InstanceObject], dup_iou: f64) -> Option<usize> {
    let centroids: Vec<Option<geo::Point<f64>>> = members.iter().map(|m| m.geometry.centroid()).collect();
    for (i, cand) in members.iter().enumerate() {
        let mut distinct: Vec<usize> = Vec::new();
        for (j, other) in members.iter().enumerate() {
            if i == j {
                continue;
            }
            let Some(c) = centroids[j] else { continue };
            if !cand.geometry.contains(&c) || geom::polygon_iou(&cand.geometry, &other.geometry) >= dup_iou {
                continue;
            }
            if distinct
                .iter()
                .all(|&k| geom::polygon_iou(&members[k].geometry, &other.geometry) < dup_iou)
            {
                distinct.push(j);
                if distinct.len() >= 2 {
                    return Some(i);
                }
            }
        }
    }
    None
}

fn first_mergeable_pair(members: &[InstanceObject], iou: f64) -> Option<(usize, usize)> {
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            if geom::polygon_iou(&members[i].geometry, &members[j].geometry) >= iou {
                return Some((i, j));
            }
        }
    }
    None
}

/// Umbrella removal and pairwise merging, repeated until neither applies.
fn resolve_trees(mut members: Vec<InstanceObject>, merge_iou: f64) -> Vec<InstanceObject> {
    loop {
        if let Some(u) = find_umbrella(&members, merge_iou) {
            members.remove(u);
            continue;
        }
        if let Some((i, j)) = first_mergeable_pair(&members, merge_iou) {
            let b = members.remove(j);
            let a = &members[i];
            members[i] = InstanceObject {
                class: a.class,
                score: a.score.max(b.score),
                geometry: geom::union_polygon(&a.geometry, &b.geometry),
            };
            members.sort_by(canonical_cmp);
            continue;
        }
        return members;
    }
}

/// Merges world-space instances from all tiles into one consistent set.
pub fn global_merge(instances: Vec<InstanceObject>, cfg: &MergeConfig) -> Vec<InstanceObject> {
    let mut items: Vec<InstanceObject> = instances
        .into_iter()
        .filter_map(|i| {
            geom::repair(&i.geometry).map(|g| InstanceObject {
                geometry: g,
                score: i.score.clamp(0.0, 1.0),
                ..i
            })
        })
        .collect();
    items.sort_by(canonical_cmp);
    let clusters = overlap_clusters(&items);
    let mut slots: Vec<Option<InstanceObject>> = items.into_iter().map(Some).collect();
    let mut out = Vec::new();
    for cluster in clusters {
        let members: Vec<InstanceObject> = cluster.iter().map(|&i| slots[i].take().expect("each index once")).collect();
        if members.len() == 1 {
            out.extend(members);
            continue;
        }
        match members[0].class {
            InstanceClass::Canopy => out.push(dissolve(members)),
            InstanceClass::Tree => out.extend(resolve_trees(members, cfg.merge_iou)),
        }
    }
    out.sort_by(canonical_cmp);
    out
}

/// Keeps instances whose pixel-center coverage by `mask == 1` is at least `fraction`.
/// Instances are in world coordinates of `crs`.
pub fn filter_by_semantic(
    instances: Vec<InstanceObject>,
    crs: u32,
    mask: &dyn RasterSource,
    fraction: f64,
) -> Result<Vec<InstanceObject>> {
    let mi = mask.info();
    if mi.geotransform.crs != crs {
        return Err(Error::CrsMismatch {
            left: crs,
            right: mi.geotransform.crs,
        });
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("semantic fraction {fraction} outside [0, 1]")));
    }
    let extent = mi.extent();
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let px = geom::world_to_pixel_polygon(&inst.geometry, &mi.geotransform);
        let cover = match pixel_bounds(&px, &extent) {
            Some(win) => {
                let inside = geom::rasterize(&[&px], win);
                let block = mask.read_window(win)?;
                let mut n_in = 0usize;
                let mut n_on = 0usize;
                for (i, &m) in inside.iter().enumerate() {
                    if m == 1 {
                        n_in += 1;
                        if block.get(i % win.width, i / win.width, 0) == 1.0 {
                            n_on += 1;
                        }
                    }
                }
                if n_in == 0 {
                    0.0
                } else {
                    n_on as f64 / n_in as f64
                }
            }
            None => 0.0,
        };
        if cover >= fraction {
            out.push(inst);
        }
    }
    Ok(out)
}

fn pixel_bounds(p: &Polygon<f64>, extent: &RasterWindow) -> Option<RasterWindow> {
    let r = p.bounding_rect()?;
    let c0 = r.min().x.floor().max(0.0) as usize;
    let r0 = r.min().y.floor().max(0.0) as usize;
    let c1 = (r.max().x.ceil().max(0.0) as usize).min(extent.width);
    let r1 = (r.max().y.ceil().max(0.0) as usize).min(extent.height);
    (c1 > c0 && r1 > r0).then(|| RasterWindow::new(c0, r0, c1 - c0, r1 - r0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRunConfig {
    pub tile_size: usize,
    pub overlap: usize,
    pub batch_size: usize,
    pub skip_empty: bool,
    pub workers: usize,
    pub retries: usize,
    pub merge: MergeConfig,
}

impl Default for InstanceRunConfig {
    fn default() -> Self {
        let s = stitch::StitchConfig::default();
        InstanceRunConfig {
            tile_size: s.tile_size,
            overlap: s.overlap,
            batch_size: s.batch_size,
            skip_empty: s.skip_empty,
            workers: s.workers,
            retries: s.retries,
            merge: MergeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub tiles_total: usize,
    pub tiles_processed: usize,
    pub tiles_skipped: usize,
    pub tiles_failed: usize,
    pub failures: Vec<TileFailure>,
    pub postprocess: PostprocessStats,
    pub merged_instances: usize,
    pub elapsed_secs: f64,
}

/// Tiled instance prediction followed by the global merge. Returned instances are in
/// world coordinates of the source raster.
pub fn predict_instances_tiled(
    src: &dyn RasterSource,
    predictor: &dyn Predictor,
    cfg: &InstanceRunConfig,
) -> Result<(Vec<InstanceObject>, InstanceSummary)> {
    cfg.merge.validate()?;
    if cfg.batch_size == 0 || cfg.workers == 0 {
        return Err(Error::invalid("batch_size and workers must be > 0"));
    }
    if !predictor.capabilities().instance {
        return Err(Error::invalid(format!("{} cannot predict instances", predictor.name())));
    }
    let started = Instant::now();
    let si = src.info();
    let grid = tiling::build_grid(&TileGridSpec::new(si.width, si.height, cfg.tile_size, cfg.overlap)?)?;
    let pool = stitch::worker_pool(cfg.workers, predictor)?;
    let gt = si.geotransform;
    let mut summary = InstanceSummary {
        tiles_total: grid.len(),
        ..Default::default()
    };
    let mut collected = Vec::new();
    for batch in grid.chunks(cfg.batch_size) {
        let results: Vec<Result<TileResult>> = pool.install(|| {
            batch
                .par_iter()
                .map(|tile| {
                    let block = src.read_window(tile.window)?;
                    if cfg.skip_empty && tiling::is_empty_tile(&block, si.nodata) {
                        return Ok(TileResult::Skipped);
                    }
                    let input = TileInput::new(tile.window, &block);
                    Ok(match stitch::with_retries(cfg.retries, || predictor.predict_instances(&input)) {
                        Ok(raw) => {
                            let (inst, stats) = tile_postprocess(raw, tile, &gt, &cfg.merge);
                            TileResult::Done(inst, stats)
                        }
                        Err((attempts, e)) => TileResult::Failed(attempts, e.to_string()),
                    })
                })
                .collect()
        });
        for (tile, r) in batch.iter().zip(results) {
            match r? {
                TileResult::Done(inst, stats) => {
                    summary.tiles_processed += 1;
                    summary.postprocess += stats;
                    collected.extend(inst);
                }
                TileResult::Skipped => summary.tiles_skipped += 1,
                TileResult::Failed(attempts, error) => {
                    warn!("tile ({}, {}) failed after {attempts} attempts: {error}", tile.col, tile.row);
                    summary.tiles_failed += 1;
                    summary.failures.push(TileFailure {
                        col: tile.col,
                        row: tile.row,
                        window: tile.window,
                        attempts,
                        error,
                    });
                }
            }
        }
    }
    info!("merging {} tile instances", collected.len());
    let merged = global_merge(collected, &cfg.merge);
    summary.merged_instances = merged.len();
    summary.elapsed_secs = started.elapsed().as_secs_f64();
    Ok((merged, summary))
}

enum TileResult {
    Done(Vec<InstanceObject>, PostprocessStats),
    Skipped,
    Failed(usize, String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{DType, MemRaster, RasterInfo};
    use crate::tiling::RasterEdges;
    use approx::assert_relative_eq;
    use geo::LineString;
    use proptest::prelude::*;

    fn tree(score: f64, p: Polygon<f64>) -> InstanceObject {
        InstanceObject {
            class: InstanceClass::Tree,
            score,
            geometry: geom::normalize(&p),
        }
    }

    fn canopy(score: f64, p: Polygon<f64>) -> InstanceObject {
        InstanceObject {
            class: InstanceClass::Canopy,
            ..tree(score, p)
        }
    }

    fn interior_tile() -> Tile {
        Tile {
            col: 1,
            row: 1,
            window: RasterWindow::new(100, 100, 100, 100),
            core: RasterWindow::new(125, 125, 50, 50),
            edges: RasterEdges::default(),
        }
    }

    /// Pixel-grid IoU at `step` resolution, used as an independent check of clipping.
    fn raster_iou(a: &Polygon<f64>, b: &Polygon<f64>, step: f64) -> f64 {
        let ra = a.bounding_rect().unwrap();
        let rb = b.bounding_rect().unwrap();
        let (x0, y0) = (ra.min().x.min(rb.min().x), ra.min().y.min(rb.min().y));
        let (x1, y1) = (ra.max().x.max(rb.max().x), ra.max().y.max(rb.max().y));
        let (mut inter, mut uni) = (0u64, 0u64);
        let mut y = y0 + step / 2.0;
        while y < y1 {
            let mut x = x0 + step / 2.0;
            while x < x1 {
                let p = geo::Point::new(x, y);
                let (ia, ib) = (a.contains(&p), b.contains(&p));
                inter += (ia && ib) as u64;
                uni += (ia || ib) as u64;
                x += step;
            }
            y += step;
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn duplicate_trees_suppressed() {
        let p = geom::rect_polygon(10.0, 10.0, 30.0, 30.0);
        let (out, s) = tile_postprocess(
            vec![tree(0.8, p.clone()), tree(0.9, p)],
            &interior_tile(),
            &GeoTransform::identity(),
            &MergeConfig::default(),
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(s.suppressed, 1);
    }

    #[test]
    fn boundary_rule() {
        let touching = geom::rect_polygon(0.0, 40.0, 20.0, 60.0);
        let cfg = MergeConfig::default();
        let (out, s) = tile_postprocess(vec![tree(0.9, touching.clone())], &interior_tile(), &GeoTransform::identity(), &cfg);
        assert!(out.is_empty());
        assert_eq!(s.touching_boundary, 1);

        let mut edge_tile = interior_tile();
        edge_tile.edges.left = true;
        let (out, _) = tile_postprocess(vec![tree(0.9, touching.clone())], &edge_tile, &GeoTransform::identity(), &cfg);
        assert_eq!(out.len(), 1);
        // Shifted into raster coordinates.
        assert_relative_eq!(out[0].geometry.bounding_rect().unwrap().min().x, 100.0);

        let (out, _) = tile_postprocess(vec![canopy(0.9, touching)], &interior_tile(), &GeoTransform::identity(), &cfg);
        assert_eq!(out.len(), 1);

        let near = geom::rect_polygon(0.6, 40.0, 20.0, 60.0);
        let (out, _) = tile_postprocess(vec![tree(0.9, near)], &interior_tile(), &GeoTransform::identity(), &cfg);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn low_scores_and_bad_geometry_dropped() {
        let bowtie = Polygon::new(
            LineString::from(vec![(20.0, 20.0), (40.0, 40.0), (40.0, 20.0), (20.0, 40.0), (20.0, 20.0)]),
            vec![],
        );
        let line = Polygon::new(LineString::from(vec![(20.0, 20.0), (30.0, 30.0), (40.0, 40.0), (20.0, 20.0)]), vec![]);
        let low = geom::rect_polygon(50.0, 50.0, 60.0, 60.0);
        let input = vec![
            InstanceObject {
                class: InstanceClass::Tree,
                score: 0.9,
                geometry: bowtie,
            },
            InstanceObject {
                class: InstanceClass::Tree,
                score: 0.9,
                geometry: line,
            },
            tree(0.39, low),
        ];
        let (out, s) = tile_postprocess(input, &interior_tile(), &GeoTransform::identity(), &MergeConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!((s.repaired, s.unrepairable, s.below_confidence), (1, 1, 1));
        assert!(geo::Validation::is_valid(&out[0].geometry));
    }

    #[test]
    fn low_iou_disks_all_kept() {
        // Centers 1.6 r apart: pairwise IoU about 0.15.
        let r = 10.0;
        let disks: Vec<Polygon<f64>> = [(40.0, 40.0), (56.0, 40.0), (48.0, 53.86)]
            .iter()
            .map(|&(x, y)| geom::regular_polygon(x, y, r, 128))
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let oracle = raster_iou(&disks[i], &disks[j], 0.05);
                assert!(oracle < 0.5);
                assert!((geom::polygon_iou(&disks[i], &disks[j]) - oracle).abs() < 0.01);
            }
        }
        let input = disks.into_iter().map(|d| tree(0.9, d)).collect();
        let (out, _) = tile_postprocess(input, &interior_tile(), &GeoTransform::identity(), &MergeConfig::default());
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn duplicate_disk_from_two_tiles_merges() {
        let disk = geom::regular_polygon(500.0, 500.0, 30.0, 64);
        let mut shifted = disk.clone();
        shifted.exterior_mut(|e| {
            for c in e.0.iter_mut() {
                c.x += 1e-7;
            }
        });
        let out = global_merge(vec![tree(0.8, disk.clone()), tree(0.9, shifted)], &MergeConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        assert!(geom::polygon_iou(&out[0].geometry, &disk) > 0.99);
    }

    #[test]
    fn umbrella_removed() {
        let big = geom::rect_polygon(0.0, 0.0, 100.0, 100.0);
        let a = geom::regular_polygon(25.0, 50.0, 10.0, 32);
        let b = geom::regular_polygon(75.0, 50.0, 10.0, 32);
        let out = global_merge(vec![tree(0.95, big), tree(0.7, a), tree(0.6, b)], &MergeConfig::default());
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| o.geometry.unsigned_area() < 400.0));
    }

    #[test]
    fn repeated_duplicates_survive_umbrella() {
        let disk = geom::regular_polygon(50.0, 50.0, 20.0, 64);
        let out = global_merge(vec![tree(0.9, disk.clone()); 4], &MergeConfig::default());
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn canopies_dissolve() {
        let a = geom::rect_polygon(0.0, 0.0, 10.0, 10.0);
        let b = geom::rect_polygon(9.0, 0.0, 20.0, 10.0);
        let out = global_merge(vec![canopy(0.5, a), canopy(0.7, b)], &MergeConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.7);
        assert_relative_eq!(out[0].geometry.unsigned_area(), 200.0, epsilon = 1e-9);
    }

    #[test]
    fn classes_do_not_mix() {
        let a = geom::rect_polygon(0.0, 0.0, 10.0, 10.0);
        let out = global_merge(vec![canopy(0.5, a.clone()), tree(0.7, a)], &MergeConfig::default());
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn spatial_index_ops() {
        let a = geom::rect_polygon(0.0, 0.0, 1.0, 1.0);
        let b = geom::rect_polygon(5.0, 5.0, 6.0, 6.0);
        let mut idx = SpatialIndex::new();
        idx.insert(0, &a);
        idx.insert(1, &b);
        assert_eq!(idx.query([0.5, 0.5], [5.5, 5.5]), vec![0, 1]);
        assert_eq!(idx.query([2.0, 2.0], [3.0, 3.0]), Vec::<usize>::new());
        assert!(idx.remove(0, &a));
        assert_eq!(idx.query([0.0, 0.0], [10.0, 10.0]), vec![1]);
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn semantic_filter() {
        let info = RasterInfo::new(20, 10, 1, DType::U8, GeoTransform::identity());
        let mask = MemRaster::from_fn(info, |c, _, _| u8::from(c < 10) as f64);
        let on = tree(0.9, geom::rect_polygon(1.0, 1.0, 5.0, 5.0));
        let off = tree(0.9, geom::rect_polygon(12.0, 1.0, 16.0, 5.0));
        let half = tree(0.9, geom::rect_polygon(8.0, 1.0, 12.0, 5.0));
        let out = filter_by_semantic(vec![on.clone(), off.clone(), half.clone()], 0, &mask, 0.5).unwrap();
        assert_eq!(out, vec![on.clone(), half.clone()]);
        let out = filter_by_semantic(vec![on.clone(), off.clone(), half], 0, &mask, 0.51).unwrap();
        assert_eq!(out, vec![on.clone()]);
        assert!(filter_by_semantic(vec![off], 0, &mask, 1e-9).unwrap().is_empty());
        assert!(matches!(
            filter_by_semantic(vec![on], 3395, &mask, 0.5),
            Err(Error::CrsMismatch { .. })
        ));
    }

    fn arb_instance() -> impl Strategy<Value = InstanceObject> {
        (0.0f64..200.0, 0.0f64..200.0, 3.0f64..30.0, 0.0f64..1.0, any::<bool>(), 5usize..12).prop_map(
            |(x, y, r, s, is_tree, n)| InstanceObject {
                class: if is_tree { InstanceClass::Tree } else { InstanceClass::Canopy },
                score: (s * 100.0).round() / 100.0,
                geometry: geom::normalize(&geom::regular_polygon(x, y, r, n)),
            },
        )
    }

    fn same_set(a: &[InstanceObject], b: &[InstanceObject]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.class == y.class
                    && x.score == y.score
                    && vertex_key(&x.geometry).len() == vertex_key(&y.geometry).len()
                    && vertex_key(&x.geometry)
                        .iter()
                        .zip(vertex_key(&y.geometry))
                        .all(|(p, q)| (p - q).abs() <= 1e-9)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn nms_postcondition(set in prop::collection::vec(arb_instance(), 0..25), t in 0.1f64..0.9) {
            let (kept, _) = nms(set, t);
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    if kept[i].class == kept[j].class {
                        prop_assert!(geom::polygon_iou(&kept[i].geometry, &kept[j].geometry) < t);
                    }
                }
            }
        }

        #[test]
        fn merge_invariants(set in prop::collection::vec(arb_instance(), 0..25)) {
            let cfg = MergeConfig::default();
            let once = global_merge(set.clone(), &cfg);
            let twice = global_merge(once.clone(), &cfg);
            prop_assert!(same_set(&once, &twice));

            let mut reversed = set.clone();
            reversed.reverse();
            prop_assert!(same_set(&once, &global_merge(reversed, &cfg)));

            let canopies: Vec<_> = once.iter().filter(|o| o.class == InstanceClass::Canopy).collect();
            for i in 0..canopies.len() {
                for j in i + 1..canopies.len() {
                    let (a, b) = (&canopies[i].geometry, &canopies[j].geometry);
                    let small = a.unsigned_area().min(b.unsigned_area());
                    prop_assert!(geom::intersection_area(a, b) <= 1e-6 * small);
                }
            }
            for class in [InstanceClass::Tree, InstanceClass::Canopy] {
                let inputs: Vec<Polygon<f64>> =
                    set.iter().filter(|s| s.class == class).map(|s| s.geometry.clone()).collect();
                let cover = geo::unary_union(&inputs);
                for o in once.iter().filter(|o| o.class == class) {
                    let outside = geo::BooleanOps::difference(&geo::MultiPolygon::new(vec![o.geometry.clone()]), &cover);
                    prop_assert!(outside.unsigned_area() <= 1e-6 * o.geometry.unsigned_area());
                }
            }
        }
    }
}
