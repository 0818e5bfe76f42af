//! Virtual raster assembled from several GeoTIFF files.
//!
//! Manifest format, one entry per line, `#` starts a comment:
//!
//! ```text
//! # path        col_off  row_off
//! nodata 0
//! north.tif     0        0
//! south.tif     0        4096
//! ```
//!
//! Paths are relative to the manifest. The optional `nodata <value>` line declares the
//! value reported for pixels no member covers (default 0). All members must share band
//! count, dtype, pixel size and CRS. The mosaic's geotransform is derived from the first
//! member and its offset; its extent is the bounding box of all members.

use std::path::{Path, PathBuf};

use super::geotiff::GeoTiffSource;
use super::{PixelBlock, RasterInfo, RasterSource, RasterWindow};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub col_off: usize,
    pub row_off: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub nodata: Option<f64>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Manifest> {
        let mut manifest = Manifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::invalid(format!("manifest line {}: {line:?}", lineno + 1));
            match fields.as_slice() {
                ["nodata", v] => manifest.nodata = Some(v.parse().map_err(|_| bad())?),
                [path, col, row] => manifest.entries.push(ManifestEntry {
                    path: base.join(path),
                    col_off: col.parse().map_err(|_| bad())?,
                    row_off: row.parse().map_err(|_| bad())?,
                }),
                _ => return Err(bad()),
            }
        }
        if manifest.entries.is_empty() {
            return Err(Error::invalid("manifest lists no files"));
        }
        Ok(manifest)
    }
}

pub struct MosaicSource {
    info: RasterInfo,
    members: Vec<(RasterWindow, GeoTiffSource)>,
}

impl MosaicSource {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::file(manifest_path, e))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&Manifest::parse(&text, base)?)
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let mut members = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let src = GeoTiffSource::open(&e.path)?;
            let i = src.info();
            members.push((RasterWindow::new(e.col_off, e.row_off, i.width, i.height), src));
        }
        let (first_win, first) = &members[0];
        let fi = first.info().clone();
        for (_, m) in &members[1..] {
            let mi = m.info();
            let g = &mi.geotransform;
            if mi.bands != fi.bands || mi.dtype != fi.dtype {
                return Err(Error::invalid(format!(
                    "{}: band count or dtype differs from first member",
                    m.path().display()
                )));
            }
            if g.pixel_w != fi.geotransform.pixel_w || g.pixel_h != fi.geotransform.pixel_h {
                return Err(Error::invalid(format!("{}: pixel size differs", m.path().display())));
            }
            if g.crs != fi.geotransform.crs {
                return Err(Error::CrsMismatch {
                    left: fi.geotransform.crs,
                    right: g.crs,
                });
            }
        }
        let width = members.iter().map(|(w, _)| w.col_end()).max().unwrap_or(0);
        let height = members.iter().map(|(w, _)| w.row_end()).max().unwrap_or(0);
        let g = fi.geotransform;
        let (ox, oy) = g.pixel_to_world(-(first_win.col_off as f64), -(first_win.row_off as f64));
        let geotransform = super::GeoTransform {
            origin_x: ox,
            origin_y: oy,
            ..g
        };
        let info = RasterInfo::new(width, height, fi.bands, fi.dtype, geotransform)
            .with_nodata(manifest.nodata.or(fi.nodata));
        Ok(MosaicSource { info, members })
    }
}

impl RasterSource for MosaicSource {
    fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn read_window(&self, window: RasterWindow) -> Result<PixelBlock> {
        self.info.check_window(window)?;
        let fill = self.info.nodata.unwrap_or(0.0);
        let mut out = PixelBlock::filled(window.width, window.height, self.info.bands, self.info.dtype, fill);
        for (placement, src) in &self.members {
            if let Some(isect) = placement.intersection(&window) {
                let block = src.read_window(isect.relative_to(placement))?;
                out.paste(
                    isect.relative_to(&window),
                    &block,
                    RasterWindow::full(isect.width, isect.height),
                );
            }
        }
        Ok(out)
    }
}

/// Open a GeoTIFF, or a mosaic manifest when the path does not end in `.tif`/`.tiff`.
pub fn open_raster(path: impl AsRef<Path>) -> Result<Box<dyn RasterSource>> {
    let path = path.as_ref();
    let is_tiff = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.eq_ignore_ascii_case("tif") || e.eq_ignore_ascii_case("tiff"))
        .unwrap_or(false);
    if is_tiff {
        Ok(Box::new(GeoTiffSource::open(path)?))
    } else {
        Ok(Box::new(MosaicSource::open(path)?))
    }
}
