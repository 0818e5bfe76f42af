//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness) so that a
//! counting global allocator can observe peak heap use; prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use geo::{Area, BooleanOps, BoundingRect, Centroid, Coord, Intersects, LineString, Point, Polygon};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use tcd_core::dataset::coco::{self, Annotation, SplitSelector};
use tcd_core::dataset::{self, Assignment, License, SourceImageRecord};
use tcd_core::eval;
use tcd_core::geom::{rect_polygon, regular_polygon};
use tcd_core::merge::{self, InstanceRunConfig, MergeConfig};
use tcd_core::predict::{GreennessPredictor, InstanceClass, InstanceObject, PlaybackInstances, PlaybackSemantic};
use tcd_core::raster::geotiff::GeoTiffSink;
use tcd_core::raster::{DType, FnSource, GeoTransform, MemRaster, PixelBlock, RasterInfo, RasterSink, RasterSource, RasterWindow, Samples};
use tcd_core::stitch::{self, StitchConfig};
use tcd_core::tiling::{build_grid, TileGridSpec};
use tcd_core::vector;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size > layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rgb_source(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64 + Send + Sync) -> FnSource<impl Fn(usize, usize, usize) -> f64 + Send + Sync> {
    FnSource::new(RasterInfo::new(w, h, 3, DType::U8, GeoTransform::identity()), f)
}

fn hash32(a: u64, b: u64, seed: u64) -> u32 {
    let mut x = a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ seed;
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 29;
    (x >> 32) as u32
}

// ---------------------------------------------------------------------------------------

fn stitching_identity() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pixels = 0u64;
    for case in 0..50u64 {
        let w = rng.random_range(512..=4096usize);
        let h = rng.random_range(512..=4096usize);
        let overlap = [0, 128, 256][rng.random_range(0..3)];
        let tile = [512, 1024][rng.random_range(0..2)];
        let truth_value = move |c: usize, r: usize| (hash32(c as u64, r as u64, case) >> 8) as f32 / (1u32 << 24) as f32;
        let truth = FnSource::new(RasterInfo::new(w, h, 1, DType::F32, GeoTransform::identity()), move |c, r, _| {
            truth_value(c, r) as f64
        });
        let predictor = PlaybackSemantic::new(Arc::new(truth)).map_err(|e| e.to_string())?;
        let input = rgb_source(w, h, |_, _, _| 90.0);
        let sink = MemRaster::new(stitch::confidence_info(&RasterInfo::new(w, h, 3, DType::U8, GeoTransform::identity())), 7.0);
        let cfg = StitchConfig {
            tile_size: tile,
            overlap,
            ..StitchConfig::default()
        };
        let summary = stitch::stitch_semantic(&input, &predictor, &cfg, &sink).map_err(|e| e.to_string())?;
        ensure(summary.tiles_failed == 0, || format!("case {case}: failed tiles"))?;
        let out = sink.into_block();
        let Samples::F32(v) = &out.samples else {
            return Err("confidence raster is not f32".into());
        };
        for r in 0..h {
            for c in 0..w {
                let got = v[r * w + c];
                let want = truth_value(c, r);
                if got.to_bits() != want.to_bits() {
                    return Err(format!("case {case} ({w}x{h}, tile {tile}, overlap {overlap}): pixel ({c},{r}) {got} != {want}"));
                }
            }
        }
        pixels += (w * h) as u64;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1} s (limit 120 s)"))?;
    Ok(format!("50 rasters, {:.1} Mpx, {secs:.1} s", pixels as f64 / 1e6))
}

fn check_partition(spec: &TileGridSpec) -> Result<usize, String> {
    let grid = build_grid(spec).map_err(|e| e.to_string())?;
    let xs: BTreeSet<(usize, usize)> = grid.iter().map(|t| (t.core.col_off, t.core.col_end())).collect();
    let ys: BTreeSet<(usize, usize)> = grid.iter().map(|t| (t.core.row_off, t.core.row_end())).collect();
    for (set, size, axis) in [(&xs, spec.raster_width, "x"), (&ys, spec.raster_height, "y")] {
        let mut at = 0;
        for &(a, b) in set {
            ensure(a == at && b > a, || format!("{spec:?}: {axis} cores not contiguous at {at}: [{a},{b})"))?;
            at = b;
        }
        ensure(at == size, || format!("{spec:?}: {axis} cores end at {at}, raster is {size}"))?;
    }
    let mut seen = HashMap::new();
    for t in &grid {
        *seen.entry((t.core.col_off, t.core.row_off)).or_insert(0) += 1;
        ensure(
            t.window.col_off <= t.core.col_off
                && t.core.col_end() <= t.window.col_end()
                && t.window.row_off <= t.core.row_off
                && t.core.row_end() <= t.window.row_end()
                && t.window.col_end() <= spec.raster_width
                && t.window.row_end() <= spec.raster_height,
            || format!("{spec:?}: core {:?} outside window {:?}", t.core, t.window),
        )?;
    }
    ensure(seen.len() == xs.len() * ys.len() && seen.values().all(|&n| n == 1) && grid.len() == seen.len(), || {
        format!("{spec:?}: cores are not the product of the axis partitions")
    })?;
    Ok(grid.len())
}

fn core_partition() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tiles = 0;
    for _ in 0..1000 {
        let tile = rng.random_range(1..=2048usize);
        let overlap = rng.random_range(0..tile);
        let stride = tile - overlap;
        // Keep grids to a manageable number of tiles.
        let max_side = (stride * 200).min(20_000);
        let w = rng.random_range(1..=max_side);
        let h = rng.random_range(1..=max_side);
        let spec = TileGridSpec::new(w, h, tile, overlap).map_err(|e| e.to_string())?;
        tiles += check_partition(&spec)?;
    }
    let spec = TileGridSpec::new(2048, 2048, 1024, 256).unwrap();
    let grid = build_grid(&spec).unwrap();
    ensure(grid.len() == 9, || format!("worked example has {} tiles", grid.len()))?;
    let xcores: Vec<(usize, usize)> = grid.iter().filter(|t| t.row == 0).map(|t| (t.core.col_off, t.core.col_end())).collect();
    ensure(xcores == vec![(0, 896), (896, 1408), (1408, 2048)], || format!("worked example x-cores {xcores:?}"))?;
    let xwins: Vec<usize> = grid.iter().filter(|t| t.row == 0).map(|t| t.window.col_off).collect();
    ensure(xwins == vec![0, 768, 1024], || format!("worked example window starts {xwins:?}"))?;
    Ok(format!("1000 specs ({tiles} tiles) + 2048/1024/256 example"))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (w, h) = (1500, 1300);
    let input = rgb_source(w, h, |c, r, b| (hash32(c as u64, r as u64, b as u64) & 0xff) as f64);
    let predictor = GreennessPredictor::default();
    let mut files = Vec::new();
    for workers in [1, 4, 16] {
        let path = dir.path().join(format!("w{workers}.tif"));
        let sink = GeoTiffSink::create(&path, stitch::confidence_info(&input.info().clone())).map_err(|e| e.to_string())?;
        let cfg = StitchConfig {
            tile_size: 256,
            overlap: 64,
            batch_size: 3,
            workers,
            ..StitchConfig::default()
        };
        stitch::stitch_semantic(&input, &predictor, &cfg, &sink).map_err(|e| e.to_string())?;
        let path = sink.finish().map_err(|e| e.to_string())?;
        files.push(std::fs::read(path).map_err(|e| e.to_string())?);
    }
    ensure(files[0] == files[1] && files[1] == files[2], || "GeoTIFF bytes differ between worker counts".into())?;
    Ok(format!("workers 1/4/16, {} bytes each", files[0].len()))
}

/// Accepts every write and keeps only a running count.
struct DiscardSink {
    info: RasterInfo,
    written: AtomicUsize,
    positive: AtomicUsize,
}

impl RasterSink for DiscardSink {
    fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn write_window(&self, window: RasterWindow, block: &PixelBlock) -> tcd_core::Result<()> {
        self.info.check_block(window, block)?;
        self.written.fetch_add(window.area(), Ordering::Relaxed);
        if let Samples::F32(v) = &block.samples {
            self.positive.fetch_add(v.iter().filter(|&&x| x >= 0.5).count(), Ordering::Relaxed);
        }
        Ok(())
    }
}

fn out_of_core() -> Check {
    let side = 16_384;
    let input = rgb_source(side, side, |c, r, b| {
        let green = ((c / 700) + (r / 900)) % 2 == 0;
        match (b, green) {
            (1, true) => 190.0,
            (1, false) => 60.0,
            _ => 80.0,
        }
    });
    let cfg = StitchConfig::default();
    let sink = DiscardSink {
        info: stitch::confidence_info(&input.info().clone()),
        written: AtomicUsize::new(0),
        positive: AtomicUsize::new(0),
    };
    let predictor = GreennessPredictor::default();
    let started = Instant::now();
    let baseline = CURRENT.load(Ordering::SeqCst);
    PEAK.store(baseline, Ordering::SeqCst);
    let summary = stitch::stitch_semantic(&input, &predictor, &cfg, &sink).map_err(|e| e.to_string())?;
    let peak = PEAK.load(Ordering::SeqCst).saturating_sub(baseline);
    let tile_bytes = cfg.tile_size * cfg.tile_size * 3;
    let bound = 4 * cfg.batch_size * tile_bytes;
    ensure(sink.written.load(Ordering::Relaxed) == side * side, || "not every pixel was written".into())?;
    ensure(summary.tiles_failed == 0, || "tiles failed".into())?;
    ensure(peak <= bound, || format!("peak heap {:.1} MiB > bound {:.1} MiB", peak as f64 / 1048576.0, bound as f64 / 1048576.0))?;
    Ok(format!(
        "{side}² px, {} tiles, peak {:.1} MiB <= {:.1} MiB (batch {}, tile {} B), {:.1} s",
        summary.tiles_total,
        peak as f64 / 1048576.0,
        bound as f64 / 1048576.0,
        cfg.batch_size,
        tile_bytes,
        started.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------------------

fn iou(a: &Polygon<f64>, b: &Polygon<f64>) -> f64 {
    let i = a.intersection(b).unsigned_area();
    let u = a.union(b).unsigned_area();
    if u == 0.0 {
        0.0
    } else {
        i / u
    }
}

fn merge_oracle() -> Check {
    let side = 2048.0;
    let mut worst = 1.0f64;
    let mut total = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.random_range(20..=200usize);
        let mut disks: Vec<(f64, f64, f64)> = Vec::new();
        while disks.len() < n {
            let r = rng.random_range(10.0..=40.0);
            let x = rng.random_range(r + 2.0..side - r - 2.0);
            let y = rng.random_range(r + 2.0..side - r - 2.0);
            if disks.iter().all(|&(a, b, s)| ((a - x).powi(2) + (b - y).powi(2)).sqrt() > r + s + 2.0) {
                disks.push((x, y, r));
            }
        }
        let truth: Vec<Polygon<f64>> = disks.iter().map(|&(x, y, r)| regular_polygon(x, y, r, 64)).collect();
        let predictor = PlaybackInstances::new(truth.iter().map(|p| (InstanceClass::Tree, p.clone())).collect());
        let input = rgb_source(side as usize, side as usize, |_, _, _| 120.0);
        let cfg = InstanceRunConfig {
            tile_size: 512,
            overlap: 128,
            ..InstanceRunConfig::default()
        };
        let (out, summary) = merge::predict_instances_tiled(&input, &predictor, &cfg).map_err(|e| e.to_string())?;
        ensure(out.len() == n, || format!("seed {seed}: {} instances for {n} disks", out.len()))?;
        ensure(summary.tiles_failed == 0, || format!("seed {seed}: failed tiles"))?;
        let spanning = disks
            .iter()
            .filter(|&&(x, y, r)| {
                let cut = |v: f64| (1..4).any(|k| ((k * 384) as f64 + 64.0 - v).abs() < r);
                cut(x) || cut(y)
            })
            .count();
        ensure(spanning > 0, || format!("seed {seed}: no disk spans a core boundary"))?;
        for t in &truth {
            let c = t.centroid().unwrap();
            let best = out
                .iter()
                .filter(|o| o.geometry.intersects(&c))
                .map(|o| iou(&o.geometry, t))
                .fold(0.0, f64::max);
            worst = worst.min(best);
            ensure(best >= 0.99, || format!("seed {seed}: disk at {:?} best IoU {best:.4}", c))?;
        }
        total += n;
    }
    Ok(format!("20 seeds, {total} disks, min IoU {worst:.6}"))
}

fn random_instances(rng: &mut ChaCha8Rng) -> Vec<InstanceObject> {
    let n = rng.random_range(2..40usize);
    let mut out: Vec<InstanceObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = if rng.random_bool(0.3) { InstanceClass::Canopy } else { InstanceClass::Tree };
        let score = (rng.random_range(1..100) as f64) / 100.0;
        let geometry = if !out.is_empty() && rng.random_bool(0.25) {
            // Near-duplicate of an earlier instance.
            let base = &out[rng.random_range(0..out.len())].geometry;
            let (dx, dy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            Polygon::new(
                LineString::new(base.exterior().0.iter().map(|c| Coord { x: c.x + dx, y: c.y + dy }).collect()),
                vec![],
            )
        } else if rng.random_bool(0.5) {
            let (x, y) = (rng.random_range(0.0..150.0), rng.random_range(0.0..150.0));
            rect_polygon(x, y, x + rng.random_range(4.0..40.0), y + rng.random_range(4.0..40.0))
        } else {
            regular_polygon(
                rng.random_range(0.0..150.0),
                rng.random_range(0.0..150.0),
                rng.random_range(4.0..30.0),
                rng.random_range(4..17),
            )
        };
        out.push(InstanceObject { class, score, geometry });
    }
    out
}

fn vertex_list(p: &Polygon<f64>) -> Vec<f64> {
    std::iter::once(p.exterior())
        .chain(p.interiors())
        .flat_map(|r| r.0.iter().flat_map(|c| [c.x, c.y]))
        .collect()
}

fn same_instances(a: &[InstanceObject], b: &[InstanceObject]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let (p, q) = (vertex_list(&x.geometry), vertex_list(&y.geometry));
            x.class == y.class && x.score == y.score && p.len() == q.len() && p.iter().zip(&q).all(|(u, v)| (u - v).abs() <= 1e-9)
        })
}

fn merge_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MergeConfig::default();
    let mut pairs = 0usize;
    for case in 0..100 {
        let set = random_instances(&mut rng);
        // NMS postcondition.
        let (kept, suppressed) = merge::nms(set.clone(), cfg.nms_iou);
        ensure(kept.len() + suppressed == set.len(), || format!("case {case}: NMS lost instances"))?;
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                if kept[i].class == kept[j].class {
                    pairs += 1;
                    let v = iou(&kept[i].geometry, &kept[j].geometry);
                    ensure(v < cfg.nms_iou, || format!("case {case}: kept pair with IoU {v:.4}"))?;
                }
            }
        }
        let merged = merge::global_merge(set.clone(), &cfg);
        // Canopy disjointness.
        let canopy: Vec<&InstanceObject> = merged.iter().filter(|i| i.class == InstanceClass::Canopy).collect();
        for i in 0..canopy.len() {
            for j in i + 1..canopy.len() {
                let a = canopy[i].geometry.intersection(&canopy[j].geometry).unsigned_area();
                ensure(a <= 1e-6, || format!("case {case}: canopy overlap area {a}"))?;
            }
        }
        // Idempotence.
        let again = merge::global_merge(merged.clone(), &cfg);
        ensure(same_instances(&merged, &again), || format!("case {case}: merge is not idempotent ({} -> {})", merged.len(), again.len()))?;
        // Order independence.
        let mut shuffled = set.clone();
        shuffled.shuffle(&mut rng);
        let other = merge::global_merge(shuffled, &cfg);
        ensure(same_instances(&merged, &other), || format!("case {case}: result depends on input order"))?;
    }
    Ok(format!("100 sets each; {pairs} same-class NMS pairs checked"))
}

// ---------------------------------------------------------------------------------------

fn mask_raster(w: usize, h: usize, v: Vec<u8>) -> MemRaster {
    let info = RasterInfo::new(w, h, 1, DType::U8, GeoTransform::identity()).with_nodata(Some(255.0));
    MemRaster::from_block(info, PixelBlock::from_u8(w, h, 1, v).unwrap()).unwrap()
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    // Confusion counts and the F1/IoU identity.
    for case in 0..100 {
        let n = 64 * 64;
        let density = rng.random_range(0.0..1.0);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.03) {
                        255
                    } else {
                        u8::from(rng.random_bool(density))
                    }
                })
                .collect()
        };
        let (p, t) = (draw(&mut rng), draw(&mut rng));
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..n {
            if p[i] == 255 || t[i] == 255 {
                continue;
            }
            match (p[i] == 1, t[i] == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let c = eval::confusion(&mask_raster(64, 64, p), &mask_raster(64, 64, t), None).map_err(|e| e.to_string())?;
        if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fn_, tn) {
            failures.push(format!("confusion case {case}"));
        }
        let s = eval::scores(&c);
        if (s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() > 1e-12 {
            failures.push(format!("f1 identity case {case}"));
        }
    }
    // Keypoint recall against a brute-force containment scan.
    let mut polys: Vec<InstanceObject> = random_instances(&mut rng);
    polys.extend(random_instances(&mut rng));
    let mut points: Vec<Point<f64>> = (0..900).map(|_| Point::new(rng.random_range(-5.0..190.0), rng.random_range(-5.0..190.0))).collect();
    // Vertices and edge midpoints exercise the boundary rule.
    for p in polys.iter().take(50) {
        let ring = &p.geometry.exterior().0;
        points.push(Point::from(ring[0]));
        points.push(Point::new((ring[0].x + ring[1].x) / 2.0, (ring[0].y + ring[1].y) / 2.0));
    }
    while points.len() < 1000 {
        points.push(Point::new(rng.random_range(0.0..150.0), rng.random_range(0.0..150.0)));
    }
    points.truncate(1000);
    for include_canopy in [false, true] {
        let threshold = 0.3;
        let brute = points
            .iter()
            .filter(|pt| {
                polys.iter().any(|i| {
                    i.score >= threshold && (include_canopy || i.class == InstanceClass::Tree) && i.geometry.intersects(*pt)
                })
            })
            .count();
        let k = eval::keypoint_recall(&points, &polys, include_canopy, threshold).map_err(|e| e.to_string())?;
        if k.matched != brute || k.total != 1000 {
            failures.push(format!("keypoint recall (canopy={include_canopy}): {} vs {brute}", k.matched));
        }
    }
    // Hand-traced AP50 examples.
    let gt1 = rect_polygon(0.0, 0.0, 10.0, 10.0);
    let gt2 = rect_polygon(100.0, 0.0, 110.0, 10.0);
    // Shifted copies with a chosen IoU against a 10x10 square: overlap width w gives w/(20-w).
    let shifted = |g: &Polygon<f64>, target: f64| {
        let w = 20.0 * target / (1.0 + target);
        let r = g.bounding_rect().unwrap();
        rect_polygon(r.min().x + 10.0 - w, r.min().y, r.min().x + 20.0 - w, r.min().y + 10.0)
    };
    let ex = [
        eval::average_precision_50(&[(0.9, &shifted(&gt1, 0.6))], &[&gt1]),
        eval::average_precision_50(&[(0.9, &shifted(&gt1, 0.4))], &[&gt1]),
        eval::average_precision_50(
            &[(0.9, &shifted(&gt1, 0.8)), (0.8, &shifted(&gt2, 0.3)), (0.7, &shifted(&gt2, 0.9))],
            &[&gt1, &gt2],
        ),
    ];
    let expected = [(1.0, 1e-12), (0.0, 1e-12), (5.0 / 6.0, 1e-6)];
    let mut ap = Vec::new();
    for (i, (got, (want, tol))) in ex.into_iter().zip(expected).enumerate() {
        let got = got.map_err(|e| e.to_string())?;
        ap.push(got);
        if (got - want).abs() > tol {
            failures.push(format!("ap50 example {}: got {got:.6}, expected {want:.6} ± {tol:e}", i + 1));
        }
    }
    if failures.is_empty() {
        Ok(format!("100 mask pairs, 1000 keypoints, ap50 examples {:?}", ap))
    } else {
        Err(failures.join("; "))
    }
}

// ---------------------------------------------------------------------------------------

fn random_records(rng: &mut ChaCha8Rng, n: usize, biomes: i32, max_tiles: u64, sa_rate: f64) -> Vec<SourceImageRecord> {
    let mut next = 0u64;
    (0..n)
        .map(|i| {
            let tiles = rng.random_range(1..=max_tiles);
            let license = if rng.random_bool(sa_rate) {
                License::CcBySa
            } else if rng.random_bool(0.3) {
                License::CcByNc
            } else {
                License::CcBy
            };
            let r = SourceImageRecord {
                oam_id: format!("{:08x}-{i}", rng.random::<u32>()),
                license,
                biome: Some(rng.random_range(-1..biomes)),
                tile_ids: (next..next + tiles).collect(),
                footprint: None,
                metadata_url: String::new(),
            };
            next += tiles;
            r
        })
        .collect()
}

fn split_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..50 {
        let n = rng.random_range(40..400);
        let biomes = rng.random_range(1..15);
        let records = random_records(&mut rng, n, biomes, 12, 0.05);
        let seed = rng.random::<u64>();
        let s = dataset::make_splits(&records, 5, 0.1, seed).map_err(|e| format!("case {case}: {e}"))?;
        ensure(s.sources.len() == records.len(), || format!("case {case}: partition incomplete"))?;
        let mut tile_seen: HashMap<u64, Assignment> = HashMap::new();
        let mut per_biome: BTreeMap<i32, [usize; 5]> = BTreeMap::new();
        for r in &records {
            let a = *s.sources.get(&r.oam_id).ok_or_else(|| format!("case {case}: {} unassigned", r.oam_id))?;
            if r.license == License::CcBySa {
                ensure(a == Assignment::Holdout, || format!("case {case}: CC-BY-SA source in training"))?;
            }
            for t in &r.tile_ids {
                ensure(tile_seen.insert(*t, a).is_none() && s.tiles.get(t) == Some(&a), || format!("case {case}: tile {t} leaks"))?;
            }
            if let Assignment::Train { fold } = a {
                ensure(fold < 5, || format!("case {case}: fold {fold}"))?;
                per_biome.entry(r.biome.unwrap()).or_default()[fold] += 1;
            }
        }
        ensure(tile_seen.len() == s.tiles.len(), || format!("case {case}: stray tiles in output"))?;
        for (b, counts) in &per_biome {
            let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            ensure(spread <= 1, || format!("case {case}: biome {b} fold counts {counts:?}"))?;
        }
        let again = dataset::make_splits(&records, 5, 0.1, seed).unwrap();
        ensure(s.to_json().unwrap() == again.to_json().unwrap(), || format!("case {case}: not byte-deterministic"))?;
    }
    // Population-scale holdout sizing.
    let records = random_records(&mut rng, 5072, 14, 3, 0.02);
    let s = dataset::make_splits(&records, 5, 0.1, 42).map_err(|e| e.to_string())?;
    let total: usize = records.iter().map(|r| r.tiles()).sum();
    let mut slack = 0usize;
    let mut biome_max: BTreeMap<i32, usize> = BTreeMap::new();
    for r in &records {
        let m = biome_max.entry(r.biome.unwrap()).or_default();
        *m = (*m).max(r.tiles());
    }
    slack += biome_max.values().sum::<usize>();
    let target = 0.1 * total as f64;
    let held = s.summary.holdout_tiles as f64;
    ensure((held - target).abs() <= slack as f64, || format!("holdout {held} tiles vs target {target:.1} ± {slack}"))?;
    Ok(format!(
        "50 sets; population 5072 sources / {total} tiles -> holdout {} tiles ({:.2}%), target {target:.1} ± {slack}",
        s.summary.holdout_tiles,
        100.0 * held / total as f64
    ))
}

// ---------------------------------------------------------------------------------------

/// Shoelace area over rings given as flat x,y lists: first ring counts positive, the rest negative.
fn flat_area(rings: &[Vec<f64>]) -> f64 {
    rings
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let n = r.len() / 2;
            let mut s = 0.0;
            for i in 0..n {
                let j = (i + 1) % n;
                s += r[2 * i] * r[2 * j + 1] - r[2 * j] * r[2 * i + 1];
            }
            let a = (s / 2.0).abs();
            if k == 0 {
                a
            } else {
                -a
            }
        })
        .sum()
}

fn format_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = random_records(&mut rng, 30, 3, 4, 0.1);
    let splits = dataset::make_splits(&records, 5, 0.1, 42).map_err(|e| e.to_string())?;
    let tiles: Vec<u64> = records.iter().flat_map(|r| r.tile_ids.clone()).collect();
    let mut anns = Vec::new();
    for id in 0..300u64 {
        let tile = tiles[rng.random_range(0..tiles.len())];
        let class = if rng.random_bool(0.3) { InstanceClass::Canopy } else { InstanceClass::Tree };
        let (x, y) = (rng.random_range(0.0..1900.0), rng.random_range(0.0..1900.0));
        let mut polygon = regular_polygon(x + 60.0, y + 60.0, rng.random_range(10.0..60.0), rng.random_range(3..20));
        if rng.random_bool(0.2) {
            polygon = Polygon::new(polygon.exterior().clone(), vec![regular_polygon(x + 60.0, y + 60.0, 5.0, 6).exterior().clone()]);
        }
        anns.push(Annotation { id: id + 1, tile_id: tile, class, polygon });
    }
    let mut details = Vec::new();
    for sel in [SplitSelector::Holdout, SplitSelector::Train, SplitSelector::Fold(2)] {
        let path = dir.path().join("coco.json");
        let (ni, na) = coco::export_coco(sel, &records, &splits, &anns, &[], &path).map_err(|e| e.to_string())?;
        let doc: Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).map_err(|e| e.to_string())?;
        let images = doc["images"].as_array().ok_or("images missing")?;
        let annotations = doc["annotations"].as_array().ok_or("annotations missing")?;
        let image_ids: BTreeSet<u64> = images.iter().filter_map(|i| i["id"].as_u64()).collect();
        let want_tiles: BTreeSet<u64> = splits.tiles.iter().filter(|(_, a)| sel.matches(**a)).map(|(t, _)| *t).collect();
        let want_anns = anns.iter().filter(|a| want_tiles.contains(&a.tile_id)).count();
        ensure(image_ids == want_tiles && images.len() == ni, || format!("{sel:?}: image set differs"))?;
        ensure(annotations.len() == want_anns && na == want_anns, || format!("{sel:?}: {} annotations, want {want_anns}", annotations.len()))?;
        ensure(images.iter().all(|i| i["width"] == 2048 && i["height"] == 2048), || "image size not 2048".into())?;
        let cats: Vec<(u64, &str)> = doc["categories"]
            .as_array()
            .ok_or("categories missing")?
            .iter()
            .map(|c| (c["id"].as_u64().unwrap_or(0), c["name"].as_str().unwrap_or("")))
            .collect();
        ensure(cats == vec![(1, "tree"), (2, "canopy")], || format!("categories {cats:?}"))?;
        for a in annotations {
            let rings: Vec<Vec<f64>> = a["segmentation"]
                .as_array()
                .ok_or("segmentation")?
                .iter()
                .map(|r| r.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect())
                .collect();
            let xs: Vec<f64> = rings[0].iter().step_by(2).copied().collect();
            let ys: Vec<f64> = rings[0].iter().skip(1).step_by(2).copied().collect();
            let (x0, x1) = xs.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let (y0, y1) = ys.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let bbox: Vec<f64> = a["bbox"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            let want = [x0, y0, x1 - x0, y1 - y0];
            ensure(bbox.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-5), || format!("bbox {bbox:?} vs {want:?}"))?;
            let area = a["area"].as_f64().unwrap();
            ensure((area - flat_area(&rings)).abs() <= 1e-5, || format!("area {area} vs {}", flat_area(&rings)))?;
            let crowd = a["iscrowd"].as_u64().unwrap();
            ensure((crowd == 1) == (a["category_id"] == 2), || "iscrowd does not follow category".into())?;
        }
        details.push(format!("{ni}/{na}"));
    }
    let empty = coco::coco_json(SplitSelector::Fold(99), &records, &splits, &anns, &[]).map_err(|e| e.to_string())?;
    ensure(empty["images"].as_array().is_some_and(|v| v.is_empty()), || "empty split has images".into())?;

    // GeoJSON.
    let instances: Vec<InstanceObject> = anns
        .iter()
        .map(|a| InstanceObject {
            class: a.class,
            score: (a.id % 97) as f64 / 97.0,
            geometry: a.polygon.clone(),
        })
        .collect();
    let gj = dir.path().join("out.geojson");
    vector::write_instances(&gj, Some(3395), &instances).map_err(|e| e.to_string())?;
    let doc: Value = serde_json::from_slice(&std::fs::read(&gj).unwrap()).map_err(|e| e.to_string())?;
    let feats = doc["features"].as_array().ok_or("features missing")?;
    ensure(doc["type"] == "FeatureCollection" && feats.len() == instances.len(), || format!("{} features", feats.len()))?;
    for (f, i) in feats.iter().zip(&instances) {
        let props = f["properties"].as_object().ok_or("properties")?;
        let keys: BTreeSet<&str> = props.keys().map(String::as_str).collect();
        ensure(keys == BTreeSet::from(["class", "score"]), || format!("property keys {keys:?}"))?;
        ensure(props["class"] == i.class.as_str() && props["score"].as_f64() == Some(i.score), || "property values changed".into())?;
        ensure(matches!(f["geometry"]["type"].as_str(), Some("Polygon" | "MultiPolygon")), || "geometry type".into())?;
    }
    Ok(format!("COCO holdout/train/fold2 images/annotations {}; GeoJSON {} features", details.join(", "), feats.len()))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Check)> = vec![
        ("stitching identity", stitching_identity),
        ("core partition", core_partition),
        ("determinism under parallelism", determinism),
        ("out-of-core bound", out_of_core),
        ("instance merge oracle", merge_oracle),
        ("merge invariants", merge_invariants),
        ("metric oracle equivalence", metric_oracles),
        ("split properties", split_properties),
        ("format round trips", format_round_trips),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = f();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}  [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}  [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criterion/criteria failed");
        std::process::exit(1);
    }
}
