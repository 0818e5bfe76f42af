//! Mask components to polygons.

use geo::{MultiPolygon, Polygon};

use crate::geom;

/// A 4-connected component; `pixels` are row-major indices in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<usize>,
}

/// 4-connected components of `mask`, ordered by their first pixel.
pub fn components(mask: &[bool], width: usize, height: usize) -> Vec<Component> {
    assert_eq!(mask.len(), width * height);
    let mut label = vec![u32::MAX; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for seed in 0..mask.len() {
        if !mask[seed] || label[seed] != u32::MAX {
            continue;
        }
        let id = out.len() as u32;
        let mut pixels = Vec::new();
        label[seed] = id;
        stack.push(seed);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (c, r) = (i % width, i / width);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == u32::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < width {
                visit(i + 1);
            }
            if r > 0 {
                visit(i - width);
            }
            if r + 1 < height {
                visit(i + width);
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels });
    }
    out
}

/// Outline of a component along pixel edges, in pixel coordinates of the mask.
/// Row runs are unioned so holes and pinch points come out valid.
pub fn component_polygon(comp: &Component, width: usize) -> Option<Polygon<f64>> {
    let mut runs: Vec<Polygon<f64>> = Vec::new();
    let mut iter = comp.pixels.iter().copied().peekable();
    while let Some(start) = iter.next() {
        let mut end = start;
        while let Some(&next) = iter.peek() {
            if next == end + 1 && next / width == start / width {
                end = next;
                iter.next();
            } else {
                break;
            }
        }
        let (r, c0, c1) = ((start / width) as f64, (start % width) as f64, (end % width + 1) as f64);
        runs.push(geom::rect_polygon(c0, r, c1, r + 1.0));
    }
    match runs.len() {
        0 => None,
        1 => Some(geom::normalize(&runs[0])),
        _ => {
            let merged: MultiPolygon<f64> = geo::unary_union(&runs);
            geom::largest_part(merged).map(|p| geom::normalize(&p))
        }
    }
}
