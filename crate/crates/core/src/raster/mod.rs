//! Georeferenced rasters with windowed access.
//!
//! Everything that touches pixels goes through [`RasterSource::read_window`] and
//! [`RasterSink::write_window`], so a pipeline never needs a full-raster buffer.
//! Two backends satisfy the same contract: [`MemRaster`] (tests, small data) and the
//! GeoTIFF pair in [`geotiff`]. A [`mosaic::MosaicSource`] stitches several files
//! into one virtual raster.

pub mod geotiff;
pub mod mosaic;

use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned affine mapping between pixel indices and world coordinates.
///
/// `(origin_x, origin_y)` is the outer corner of pixel (0, 0). Rotation terms are
/// not representable; readers reject rasters that carry them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_w: f64,
    pub pixel_h: f64,
    pub crs: u32,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_w: f64, pixel_h: f64, crs: u32) -> Result<Self> {
        let gt = GeoTransform {
            origin_x,
            origin_y,
            pixel_w,
            pixel_h,
            crs,
        };
        gt.validate()?;
        Ok(gt)
    }

    /// Identity pixel space: world == pixel, y growing downwards.
    pub fn identity() -> Self {
        GeoTransform {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_w: 1.0,
            pixel_h: 1.0,
            crs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.origin_x, self.origin_y, self.pixel_w, self.pixel_h]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("geotransform has non-finite terms"));
        }
        if self.pixel_w == 0.0 || self.pixel_h == 0.0 {
            return Err(Error::invalid("geotransform pixel size must be non-zero"));
        }
        Ok(())
    }

    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_w,
            self.origin_y + row * self.pixel_h,
        )
    }

    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_w,
            (y - self.origin_y) / self.pixel_h,
        )
    }

    /// Transform for the sub-raster whose pixel (0, 0) is `(col_off, row_off)` here.
    pub fn shifted(&self, col_off: usize, row_off: usize) -> Self {
        let (x, y) = self.pixel_to_world(col_off as f64, row_off as f64);
        GeoTransform {
            origin_x: x,
            origin_y: y,
            ..*self
        }
    }

    /// World-space bounding rectangle `(min_x, min_y, max_x, max_y)` of a window.
    pub fn window_bounds(&self, w: RasterWindow) -> (f64, f64, f64, f64) {
        let (x0, y0) = self.pixel_to_world(w.col_off as f64, w.row_off as f64);
        let (x1, y1) = self.pixel_to_world(w.col_end() as f64, w.row_end() as f64);
        (x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
    }
}

/// A rectangular block of pixels: columns `col_off..col_off+width`, rows likewise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RasterWindow {
    pub col_off: usize,
    pub row_off: usize,
    pub width: usize,
    pub height: usize,
}

impl RasterWindow {
    pub const fn new(col_off: usize, row_off: usize, width: usize, height: usize) -> Self {
        RasterWindow {
            col_off,
            row_off,
            width,
            height,
        }
    }

    pub const fn full(width: usize, height: usize) -> Self {
        RasterWindow::new(0, 0, width, height)
    }

    pub const fn col_end(&self) -> usize {
        self.col_off + self.width
    }

    pub const fn row_end(&self) -> usize {
        self.row_off + self.height
    }

    pub const fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, other: &RasterWindow) -> bool {
        other.col_off >= self.col_off
            && other.row_off >= self.row_off
            && other.col_end() <= self.col_end()
            && other.row_end() <= self.row_end()
    }

    pub fn intersection(&self, other: &RasterWindow) -> Option<RasterWindow> {
        let c0 = self.col_off.max(other.col_off);
        let r0 = self.row_off.max(other.row_off);
        let c1 = self.col_end().min(other.col_end());
        let r1 = self.row_end().min(other.row_end());
        (c1 > c0 && r1 > r0).then(|| RasterWindow::new(c0, r0, c1 - c0, r1 - r0))
    }

    /// This window expressed relative to `outer`'s origin.
    pub fn relative_to(&self, outer: &RasterWindow) -> RasterWindow {
        RasterWindow::new(
            self.col_off - outer.col_off,
            self.row_off - outer.row_off,
            self.width,
            self.height,
        )
    }

    /// Split into horizontal strips of at most `rows` rows.
    pub fn row_strips(&self, rows: usize) -> impl Iterator<Item = RasterWindow> + '_ {
        let rows = rows.max(1);
        (self.row_off..self.row_end())
            .step_by(rows)
            .map(move |r| RasterWindow::new(self.col_off, r, self.width, rows.min(self.row_end() - r)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
}

impl DType {
    pub const fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::U8(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Samples::U8(_) => DType::U8,
            Samples::F32(_) => DType::F32,
        }
    }

    fn filled(dtype: DType, len: usize, value: f64) -> Samples {
        match dtype {
            DType::U8 => Samples::U8(vec![value as u8; len]),
            DType::F32 => Samples::F32(vec![value as f32; len]),
        }
    }
}

/// Row-major, band-interleaved pixel data for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBlock {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub samples: Samples,
}

impl PixelBlock {
    pub fn new(width: usize, height: usize, bands: usize, samples: Samples) -> Result<Self> {
        let expected = width * height * bands;
        if samples.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: samples.len(),
            });
        }
        Ok(PixelBlock {
            width,
            height,
            bands,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, bands: usize, dtype: DType, value: f64) -> Self {
        PixelBlock {
            width,
            height,
            bands,
            samples: Samples::filled(dtype, width * height * bands, value),
        }
    }

    pub fn from_u8(width: usize, height: usize, bands: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, bands, Samples::U8(data))
    }

    pub fn from_f32(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(width, height, 1, Samples::F32(data))
    }

    pub fn dtype(&self) -> DType {
        self.samples.dtype()
    }

    pub fn byte_len(&self) -> usize {
        self.samples.len() * self.dtype().size()
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.samples {
            Samples::U8(v) => Some(v),
            Samples::F32(_) => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.samples {
            Samples::F32(v) => Some(v),
            Samples::U8(_) => None,
        }
    }

    /// Sample value as f64, for code that is generic over dtype.
    pub fn get(&self, col: usize, row: usize, band: usize) -> f64 {
        let i = (row * self.width + col) * self.bands + band;
        match &self.samples {
            Samples::U8(v) => v[i] as f64,
            Samples::F32(v) => v[i] as f64,
        }
    }

    /// Copy of the sub-rectangle `w`, given relative to this block.
    pub fn crop(&self, w: RasterWindow) -> PixelBlock {
        debug_assert!(RasterWindow::full(self.width, self.height).contains(&w));
        let mut out = PixelBlock::filled(w.width, w.height, self.bands, self.dtype(), 0.0);
        out.paste(RasterWindow::full(w.width, w.height), self, w);
        out
    }

    /// Copy `src_win` (relative to `src`) into `dst_win` (relative to self). Both windows
    /// must have the same size and the blocks the same band count and dtype.
    pub fn paste(&mut self, dst_win: RasterWindow, src: &PixelBlock, src_win: RasterWindow) {
        debug_assert_eq!((dst_win.width, dst_win.height), (src_win.width, src_win.height));
        let b = self.bands;
        let row_len = dst_win.width * b;
        for r in 0..dst_win.height {
            let d = ((dst_win.row_off + r) * self.width + dst_win.col_off) * b;
            let s = ((src_win.row_off + r) * src.width + src_win.col_off) * b;
            match (&mut self.samples, &src.samples) {
                (Samples::U8(dst), Samples::U8(sv)) => {
                    dst[d..d + row_len].copy_from_slice(&sv[s..s + row_len])
                }
                (Samples::F32(dst), Samples::F32(sv)) => {
                    dst[d..d + row_len].copy_from_slice(&sv[s..s + row_len])
                }
                _ => panic!("paste between blocks of different dtype"),
            }
        }
    }
}

/// Shape and georeferencing of a raster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterInfo {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub dtype: DType,
    pub geotransform: GeoTransform,
    pub nodata: Option<f64>,
}

impl RasterInfo {
    pub fn new(width: usize, height: usize, bands: usize, dtype: DType, geotransform: GeoTransform) -> Self {
        RasterInfo {
            width,
            height,
            bands,
            dtype,
            geotransform,
            nodata: None,
        }
    }

    pub fn with_nodata(mut self, nodata: Option<f64>) -> Self {
        self.nodata = nodata;
        self
    }

    pub fn extent(&self) -> RasterWindow {
        RasterWindow::full(self.width, self.height)
    }

    pub fn check_window(&self, window: RasterWindow) -> Result<()> {
        if window.width == 0 || window.height == 0 || !self.extent().contains(&window) {
            return Err(Error::OutOfBounds {
                window,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    pub fn check_block(&self, window: RasterWindow, block: &PixelBlock) -> Result<()> {
        self.check_window(window)?;
        let expected = window.area() * self.bands;
        if block.width != window.width
            || block.height != window.height
            || block.bands != self.bands
            || block.samples.len() != expected
        {
            return Err(Error::ShapeMismatch {
                expected,
                actual: block.samples.len(),
            });
        }
        if block.dtype() != self.dtype {
            return Err(Error::invalid(format!(
                "block dtype {:?} does not match raster dtype {:?}",
                block.dtype(),
                self.dtype
            )));
        }
        Ok(())
    }

    /// True when `value` equals the declared nodata value exactly.
    pub fn is_nodata(&self, value: f64) -> bool {
        match self.nodata {
            Some(nd) if nd.is_nan() => value.is_nan(),
            Some(nd) => value == nd,
            None => false,
        }
    }
}

/// Read side of a raster. Implementations must tolerate concurrent readers.
pub trait RasterSource: Send + Sync {
    fn info(&self) -> &RasterInfo;

    /// Returns exactly `window.area() * bands` samples; out-of-bounds windows are errors.
    fn read_window(&self, window: RasterWindow) -> Result<PixelBlock>;
}

/// Write side of a raster. Writes are serialized internally; the last write to a pixel wins.
pub trait RasterSink: Send + Sync {
    fn info(&self) -> &RasterInfo;

    fn write_window(&self, window: RasterWindow, block: &PixelBlock) -> Result<()>;
}

impl<T: RasterSource + ?Sized> RasterSource for &T {
    fn info(&self) -> &RasterInfo {
        (**self).info()
    }
    fn read_window(&self, window: RasterWindow) -> Result<PixelBlock> {
        (**self).read_window(window)
    }
}

impl<T: RasterSource + ?Sized> RasterSource for Arc<T> {
    fn info(&self) -> &RasterInfo {
        (**self).info()
    }
    fn read_window(&self, window: RasterWindow) -> Result<PixelBlock> {
        (**self).read_window(window)
    }
}

impl<T: RasterSource + ?Sized> RasterSource for Box<T> {
    fn info(&self) -> &RasterInfo {
        (**self).info()
    }
    fn read_window(&self, window: RasterWindow) -> Result<PixelBlock> {
        (**self).read_window(window)
    }
}

impl<T: RasterSink + ?Sized> RasterSink for &T {
    fn info(&self) -> &RasterInfo {
        (**self).info()
    }
    fn write_window(&self, window: RasterWindow, block: &PixelBlock) -> Result<()> {
        (**self).write_window(window, block)
    }
}

impl<T: RasterSink + ?Sized> RasterSink for Arc<T> {
    fn info(&self) -> &RasterInfo {
        (**self).info()
    }
    fn write_window(&self, window: RasterWindow, block: &PixelBlock) -> Result<()> {
        (**self).write_window(window, block)
    }
}

/// In-memory raster implementing both sides of the contract.
#[derive(Debug)]
pub struct MemRaster {
    info: RasterInfo,
    data: RwLock<PixelBlock>,
}

impl MemRaster {
    /// A raster filled with `value` (or zero) everywhere.
    pub fn new(info: RasterInfo, value: f64) -> Self {
        let block = PixelBlock::filled(info.width, info.height, info.bands, info.dtype, value);
        MemRaster {
            info,
            data: RwLock::new(block),
        }
    }

    pub fn from_block(info: RasterInfo, block: PixelBlock) -> Result<Self> {
        info.check_block(info.extent(), &block)?;
        Ok(MemRaster {
            info,
            data: RwLock::new(block),
        })
    }

    /// Build from a per-pixel function `f(col, row, band)`.
    pub fn from_fn(info: RasterInfo, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let n = info.width * info.height * info.bands;
        let idx = |i: usize| {
            let band = i % info.bands;
            let px = i / info.bands;
            (px % info.width, px / info.width, band)
        };
        let samples = match info.dtype {
            DType::U8 => Samples::U8(
                (0..n)
                    .map(|i| {
                        let (c, r, b) = idx(i);
                        f(c, r, b) as u8
                    })
                    .collect(),
            ),
            DType::F32 => Samples::F32(
                (0..n)
                    .map(|i| {
                        let (c, r, b) = idx(i);
                        f(c, r, b) as f32
                    })
                    .collect(),
            ),
        };
        let block = PixelBlock {
            width: info.width,
            height: info.height,
            bands: info.bands,
            samples,
        };
        MemRaster {
            info,
            data: RwLock::new(block),
        }
    }

    pub fn info(&self) -> &RasterInfo {
        &self.info
    }

    pub fn into_block(self) -> PixelBlock {
        self.data.into_inner().expect("raster lock poisoned")
    }

    pub fn snapshot(&self) -> PixelBlock {
        self.data.read().expect("raster lock poisoned").clone()
    }
}

impl RasterSource for MemRaster {
    fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn read_window(&self, window: RasterWindow) -> Result<PixelBlock> {
        self.info.check_window(window)?;
        Ok(self.data.read().expect("raster lock poisoned").crop(window))
    }
}

impl RasterSink for MemRaster {
    fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn write_window(&self, window: RasterWindow, block: &PixelBlock) -> Result<()> {
        self.info.check_block(window, block)?;
        let mut data = self.data.write().expect("raster lock poisoned");
        data.paste(window, block, RasterWindow::full(block.width, block.height));
        Ok(())
    }
}

/// Procedural raster: pixels are computed on demand, nothing is stored.
pub struct FnSource<F> {
    info: RasterInfo,
    f: F,
}

impl<F> FnSource<F>
where
    F: Fn(usize, usize, usize) -> f64 + Send + Sync,
{
    pub fn new(info: RasterInfo, f: F) -> Self {
        FnSource { info, f }
    }
}

impl<F> RasterSource for FnSource<F>
where
    F: Fn(usize, usize, usize) -> f64 + Send + Sync,
{
    fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn read_window(&self, w: RasterWindow) -> Result<PixelBlock> {
        self.info.check_window(w)?;
        let bands = self.info.bands;
        let mut block = PixelBlock::filled(w.width, w.height, bands, self.info.dtype, 0.0);
        let mut i = 0;
        for r in w.row_off..w.row_end() {
            for c in w.col_off..w.col_end() {
                for b in 0..bands {
                    let v = (self.f)(c, r, b);
                    match &mut block.samples {
                        Samples::U8(d) => d[i] = v as u8,
                        Samples::F32(d) => d[i] = v as f32,
                    }
                    i += 1;
                }
            }
        }
        Ok(block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(ox: f64, oy: f64, pw: f64, ph: f64) -> GeoTransform {
        GeoTransform::new(ox, oy, pw, ph, 3395).unwrap()
    }

    #[test]
    fn pixel_to_world_examples() {
        let g = gt(0.0, 0.0, 0.1, -0.1);
        assert_eq!(g.pixel_to_world(0.0, 0.0), (0.0, 0.0));
        let (x, y) = g.pixel_to_world(2048.0, 2048.0);
        assert!((x - 204.8).abs() < 1e-9 && (y + 204.8).abs() < 1e-9);
        assert_eq!(gt(100.0, 50.0, 1.0, -1.0).pixel_to_world(3.0, 4.0), (103.0, 46.0));
    }

    #[test]
    fn world_to_pixel_examples() {
        let g = gt(0.0, 0.0, 0.1, -0.1);
        assert_eq!(g.world_to_pixel(0.0, 0.0), (0.0, 0.0));
        let (c, r) = g.world_to_pixel(204.8, -204.8);
        assert!((c - 2048.0).abs() < 1e-9 && (r - 2048.0).abs() < 1e-9);
        assert_eq!(gt(100.0, 50.0, 1.0, -1.0).world_to_pixel(103.0, 46.0), (3.0, 4.0));
    }

    #[test]
    fn zero_pixel_size_rejected() {
        assert!(GeoTransform::new(0.0, 0.0, 0.0, -1.0, 3395).is_err());
        assert!(GeoTransform::new(0.0, 0.0, 1.0, 0.0, 3395).is_err());
    }

    fn info(w: usize, h: usize) -> RasterInfo {
        RasterInfo::new(w, h, 1, DType::U8, GeoTransform::identity())
    }

    #[test]
    fn read_constant_and_formula() {
        let r = MemRaster::new(info(4, 4), 7.0);
        let b = r.read_window(RasterWindow::full(4, 4)).unwrap();
        assert_eq!(b.as_u8().unwrap(), &[7u8; 16]);

        let r = MemRaster::from_fn(info(4, 4), |c, row, _| (c + 10 * row) as f64);
        let b = r.read_window(RasterWindow::new(1, 1, 2, 2)).unwrap();
        assert_eq!(b.as_u8().unwrap(), &[11, 12, 21, 22]);

        assert!(matches!(
            r.read_window(RasterWindow::new(3, 3, 2, 2)),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn write_errors() {
        let r = MemRaster::new(info(4, 4), 0.0);
        let block = PixelBlock::filled(2, 2, 1, DType::U8, 1.0);
        assert!(matches!(
            r.write_window(RasterWindow::new(3, 0, 2, 2), &block),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(matches!(
            r.write_window(RasterWindow::new(0, 0, 3, 2), &block),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn writes_are_local() {
        let r = MemRaster::new(info(6, 6), 0.0);
        let a = PixelBlock::filled(2, 2, 1, DType::U8, 5.0);
        let b = PixelBlock::filled(3, 3, 1, DType::U8, 9.0);
        r.write_window(RasterWindow::new(0, 0, 2, 2), &a).unwrap();
        r.write_window(RasterWindow::new(3, 3, 3, 3), &b).unwrap();
        assert_eq!(r.read_window(RasterWindow::new(0, 0, 2, 2)).unwrap(), a);
        assert_eq!(r.read_window(RasterWindow::new(3, 3, 3, 3)).unwrap(), b);
        let untouched = r.read_window(RasterWindow::new(2, 0, 1, 6)).unwrap();
        assert!(untouched.as_u8().unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn row_strips_cover_window() {
        let w = RasterWindow::new(3, 5, 10, 11);
        let strips: Vec<_> = w.row_strips(4).collect();
        assert_eq!(strips.len(), 3);
        assert_eq!(strips.iter().map(|s| s.height).sum::<usize>(), 11);
        assert_eq!(strips[2], RasterWindow::new(3, 13, 10, 3));
    }
}
