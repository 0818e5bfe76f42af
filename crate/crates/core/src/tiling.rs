//! Overlapping tile grid and the disjoint core regions kept when stitching.
//!
//! Along each axis windows start at `0, s, 2s, ...` with stride `s = tile_size - overlap`;
//! the last start is clamped so the window ends on the raster edge. Consecutive windows
//! split their overlap at the midpoint, so the cores partition the raster and every
//! interior edge gives up half of the overlap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{PixelBlock, RasterWindow, Samples};

pub const DEFAULT_TILE_SIZE: usize = 1024;
pub const DEFAULT_OVERLAP: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGridSpec {
    pub raster_width: usize,
    pub raster_height: usize,
    pub tile_size: usize,
    pub overlap: usize,
}

impl TileGridSpec {
    pub fn new(raster_width: usize, raster_height: usize, tile_size: usize, overlap: usize) -> Result<Self> {
        let spec = TileGridSpec {
            raster_width,
            raster_height,
            tile_size,
            overlap,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::invalid("tile_size must be > 0"));
        }
        if self.overlap >= self.tile_size {
            return Err(Error::invalid(format!(
                "overlap ({}) must be smaller than tile_size ({})",
                self.overlap, self.tile_size
            )));
        }
        if self.raster_width == 0 || self.raster_height == 0 {
            return Err(Error::invalid("raster dimensions must be > 0"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.tile_size - self.overlap
    }
}

/// Which sides of a tile window coincide with the raster boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterEdges {
    pub left: bool,
    pub top: bool,
    pub right: bool,
    pub bottom: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub col: usize,
    pub row: usize,
    /// Extent handed to the predictor.
    pub window: RasterWindow,
    /// Extent whose predictions are kept.
    pub core: RasterWindow,
    pub edges: RasterEdges,
}

/// Axis layout: window starts and core boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Axis {
    starts: Vec<usize>,
    len: usize,
    cores: Vec<(usize, usize)>,
}

fn axis(size: usize, tile: usize, stride: usize) -> Axis {
    if size <= tile {
        return Axis {
            starts: vec![0],
            len: size,
            cores: vec![(0, size)],
        };
    }
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&x| x + tile < size)
        .collect();
    starts.push(size - tile);

    let n = starts.len();
    let mut bounds = Vec::with_capacity(n + 1);
    bounds.push(0);
    for k in 0..n - 1 {
        bounds.push((starts[k + 1] + starts[k] + tile) / 2);
    }
    bounds.push(size);
    let cores = bounds.windows(2).map(|b| (b[0], b[1])).collect();
    Axis {
        starts,
        len: tile,
        cores,
    }
}

/// Row-major tile grid.
pub fn build_grid(spec: &TileGridSpec) -> Result<Vec<Tile>> {
    spec.validate()?;
    let xs = axis(spec.raster_width, spec.tile_size, spec.stride());
    let ys = axis(spec.raster_height, spec.tile_size, spec.stride());
    let mut tiles = Vec::with_capacity(xs.starts.len() * ys.starts.len());
    for (row, (&y, &(cy0, cy1))) in ys.starts.iter().zip(&ys.cores).enumerate() {
        for (col, (&x, &(cx0, cx1))) in xs.starts.iter().zip(&xs.cores).enumerate() {
            let window = RasterWindow::new(x, y, xs.len, ys.len);
            tiles.push(Tile {
                col,
                row,
                window,
                core: RasterWindow::new(cx0, cy0, cx1 - cx0, cy1 - cy0),
                edges: RasterEdges {
                    left: x == 0,
                    top: y == 0,
                    right: window.col_end() == spec.raster_width,
                    bottom: window.row_end() == spec.raster_height,
                },
            });
        }
    }
    Ok(tiles)
}

/// True when every pixel is zero on all bands or equals `nodata` on all bands.
pub fn is_empty_tile(block: &PixelBlock, nodata: Option<f64>) -> bool {
    let bands = block.bands.max(1);
    match &block.samples {
        Samples::U8(v) => {
            let nd = nodata.filter(|n| n.fract() == 0.0 && (0.0..=255.0).contains(n)).map(|n| n as u8);
            v.chunks_exact(bands).all(|px| {
                px.iter().all(|&s| s == 0) || nd.is_some_and(|n| px.iter().all(|&s| s == n))
            })
        }
        Samples::F32(v) => v.chunks_exact(bands).all(|px| {
            px.iter().all(|&s| s == 0.0)
                || nodata.is_some_and(|n| px.iter().all(|&s| s as f64 == n || (n.is_nan() && s.is_nan())))
        }),
    }
}
