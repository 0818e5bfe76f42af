//! Polygon helpers shared by the instance and evaluation code.
//!
//! Clipping and unions are delegated to `geo`'s boolean operations. Raster membership
//! always uses the pixel-center rule: pixel `(c, r)` belongs to a polygon when the
//! point `(c + 0.5, r + 0.5)` is inside it under the even-odd rule, with edges
//! half-open in y.

use std::cmp::Ordering;

use geo::algorithm::bool_ops::FillRule;
use geo::{
    Area, BooleanOps, BoundingRect, Coord, Intersects, LineString, MapCoords, MultiPolygon, OpType, Orient,
    Point, Polygon, Rect, Validation,
};
use geo::orient::Direction;

use crate::raster::{GeoTransform, RasterWindow};

pub fn rect_polygon(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon<f64> {
    Polygon::new(
        LineString::from(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]),
        vec![],
    )
}

/// Regular `n`-gon inscribed in the circle of radius `r` around `(cx, cy)`.
pub fn regular_polygon(cx: f64, cy: f64, r: f64, n: usize) -> Polygon<f64> {
    let mut pts: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / n as f64;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    pts.push(pts[0]);
    Polygon::new(LineString::from(pts), vec![])
}

pub fn bbox(p: &Polygon<f64>) -> Option<Rect<f64>> {
    p.bounding_rect()
}

fn rects_overlap(a: &Rect<f64>, b: &Rect<f64>) -> bool {
    a.min().x < b.max().x && b.min().x < a.max().x && a.min().y < b.max().y && b.min().y < a.max().y
}

pub fn intersection_area(a: &Polygon<f64>, b: &Polygon<f64>) -> f64 {
    match (a.bounding_rect(), b.bounding_rect()) {
        (Some(ra), Some(rb)) if rects_overlap(&ra, &rb) => a.intersection(b).unsigned_area(),
        _ => 0.0,
    }
}

/// Intersection over union by exact polygon clipping.
pub fn polygon_iou(a: &Polygon<f64>, b: &Polygon<f64>) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.unsigned_area() + b.unsigned_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn largest_part(mp: MultiPolygon<f64>) -> Option<Polygon<f64>> {
    mp.0.into_iter()
        .map(|p| (p.unsigned_area(), p))
        .filter(|(a, _)| *a > 0.0)
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal))
        .map(|(_, p)| p)
}

/// Make a polygon valid: self-intersections are resolved with the even-odd rule and,
/// if that splits the shape, the largest piece is kept. Returns `None` when nothing
/// with positive area remains.
pub fn repair(p: &Polygon<f64>) -> Option<Polygon<f64>> {
    let finite = p.exterior().coords().all(|c| c.x.is_finite() && c.y.is_finite());
    if !finite || p.exterior().0.len() < 4 {
        return None;
    }
    if p.is_valid() && p.unsigned_area() > 0.0 {
        return Some(normalize(p));
    }
    let empty: MultiPolygon<f64> = MultiPolygon::new(vec![]);
    let fixed = p.boolean_op_with_fill_rule(&empty, OpType::Union, FillRule::EvenOdd);
    largest_part(fixed).map(|q| normalize(&q))
}

/// Union of two polygons reduced to a single polygon (largest connected piece).
pub fn union_polygon(a: &Polygon<f64>, b: &Polygon<f64>) -> Polygon<f64> {
    largest_part(a.union(b)).map(|p| normalize(&p)).unwrap_or_else(|| normalize(a))
}

fn cmp_coord(a: &Coord<f64>, b: &Coord<f64>) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

fn canonical_ring(ring: &LineString<f64>) -> LineString<f64> {
    let mut pts: Vec<Coord<f64>> = ring.0.clone();
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    pts.dedup();
    if pts.is_empty() {
        return LineString::new(vec![]);
    }
    let start = pts
        .iter()
        .enumerate()
        .min_by(|a, b| cmp_coord(a.1, b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    pts.rotate_left(start);
    pts.push(pts[0]);
    LineString::new(pts)
}

/// Canonical form: exterior counter-clockwise, holes clockwise, each ring starting at its
/// lexicographically smallest vertex, holes sorted by that vertex.
pub fn normalize(p: &Polygon<f64>) -> Polygon<f64> {
    let oriented = p.orient(Direction::Default);
    let (ext, holes) = oriented.into_inner();
    let mut holes: Vec<LineString<f64>> = holes.iter().map(canonical_ring).collect();
    holes.sort_by(|a, b| cmp_coord(&a.0[0], &b.0[0]));
    Polygon::new(canonical_ring(&ext), holes)
}

/// True when `p` lies inside or on the boundary of `poly`.
pub fn contains_inclusive(poly: &Polygon<f64>, p: Point<f64>) -> bool {
    poly.intersects(&p)
}

pub fn pixel_to_world_polygon(p: &Polygon<f64>, gt: &GeoTransform) -> Polygon<f64> {
    let q = p.map_coords(|c| {
        let (x, y) = gt.pixel_to_world(c.x, c.y);
        Coord { x, y }
    });
    normalize(&q)
}

pub fn world_to_pixel_polygon(p: &Polygon<f64>, gt: &GeoTransform) -> Polygon<f64> {
    let q = p.map_coords(|c| {
        let (x, y) = gt.world_to_pixel(c.x, c.y);
        Coord { x, y }
    });
    normalize(&q)
}

/// Mask (row-major over `window`, 1 = inside) of pixel centers covered by any polygon.
/// Polygons are in the same pixel space as `window`.
pub fn rasterize(polygons: &[&Polygon<f64>], window: RasterWindow) -> Vec<u8> {
    let mut mask = vec![0u8; window.area()];
    let mut xs: Vec<f64> = Vec::new();
    for poly in polygons {
        let Some(bb) = poly.bounding_rect() else {
            continue;
        };
        let r0 = ((bb.min().y - 0.5).floor().max(window.row_off as f64) as usize).max(window.row_off);
        let r1 = ((bb.max().y - 0.5).ceil() + 1.0).clamp(window.row_off as f64, window.row_end() as f64) as usize;
        for r in r0..r1 {
            let y = r as f64 + 0.5;
            xs.clear();
            for ring in std::iter::once(poly.exterior()).chain(poly.interiors()) {
                for seg in ring.lines() {
                    let (a, b) = (seg.start, seg.end);
                    if (a.y > y) != (b.y > y) {
                        xs.push((b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x);
                    }
                }
            }
            xs.sort_by(|a, b| a.total_cmp(b));
            let row = &mut mask[(r - window.row_off) * window.width..(r - window.row_off + 1) * window.width];
            for pair in xs.chunks_exact(2) {
                // Centers c + 0.5 with pair[0] <= c + 0.5 < pair[1].
                let c0 = (pair[0] - 0.5).ceil().max(window.col_off as f64);
                let c1 = (pair[1] - 0.5).ceil().min(window.col_end() as f64);
                if c1 <= c0 {
                    continue;
                }
                for c in c0 as usize..c1 as usize {
                    row[c - window.col_off] = 1;
                }
            }
        }
    }
    mask
}
