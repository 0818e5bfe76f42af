//! GeoTIFF backend.
//!
//! Reading goes through the `tiff` decoder one chunk (strip or tile) at a time, so a
//! windowed read only decodes the chunks it intersects. Writing produces a tiled,
//! deflate-compressed GeoTIFF (256 px tiles). [`GeoTiffSink`] accepts windowed writes in
//! any order into an uncompressed scratch file next to the destination and encodes the
//! final file on [`GeoTiffSink::finish`]; neither side ever holds the full raster.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use flate2::write::ZlibEncoder;
use flate2::Compression;
use tiff::decoder::{ChunkType, Decoder, DecodingResult, Limits};
use tiff::tags::Tag;
use tiff::ColorType;

use super::{DType, GeoTransform, PixelBlock, RasterInfo, RasterSink, RasterSource, RasterWindow, Samples};
use crate::error::{Error, Result};

pub const OUTPUT_TILE_SIZE: usize = 256;

const DEFAULT_CHUNK_CACHE: usize = 64;

// GeoKey ids
const GT_MODEL_TYPE: u16 = 1024;
const GT_RASTER_TYPE: u16 = 1025;
const GEOGRAPHIC_TYPE: u16 = 2048;
const PROJECTED_CS_TYPE: u16 = 3072;

fn is_geographic(epsg: u32) -> bool {
    (4000..5000).contains(&epsg)
}

/// Windowed GeoTIFF reader with a small decoded-chunk cache.
pub struct GeoTiffSource {
    path: PathBuf,
    info: RasterInfo,
    chunk_w: usize,
    chunk_h: usize,
    chunks_across: usize,
    state: Mutex<ReaderState>,
}

struct ReaderState {
    decoder: Decoder<BufReader<File>>,
    cache: HashMap<usize, Arc<PixelBlock>>,
    order: VecDeque<usize>,
    capacity: usize,
}

impl GeoTiffSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::file(&path, e))?;
        let mut decoder = Decoder::new(BufReader::new(file))?.with_limits(Limits::unlimited());

        let (width, height) = decoder.dimensions()?;
        let (bands, bits) = match decoder.colortype()? {
            ColorType::Gray(b) => (1, b),
            ColorType::RGB(b) => (3, b),
            ColorType::Multiband {
                bit_depth,
                num_samples,
            } => (num_samples as usize, bit_depth),
            other => return Err(Error::Unsupported(format!("color type {other:?}"))),
        };
        if bands > 1 {
            let planar = decoder.find_tag_unsigned::<u16>(Tag::PlanarConfiguration)?.unwrap_or(1);
            if planar != 1 {
                return Err(Error::Unsupported("planar (band-separate) layout".into()));
            }
        }
        let format = decoder
            .find_tag_unsigned_vec::<u16>(Tag::SampleFormat)?
            .and_then(|v| v.first().copied())
            .unwrap_or(1);
        let dtype = match (bits, format) {
            (8, 1) => DType::U8,
            (32, 3) => DType::F32,
            _ => {
                return Err(Error::Unsupported(format!(
                    "{bits}-bit samples with sample format {format}; only u8 and f32 are supported"
                )))
            }
        };

        let geotransform = read_geotransform(&mut decoder)?;
        let nodata = match decoder.find_tag(Tag::GdalNodata)? {
            Some(v) => {
                let s = v.into_string()?;
                let s = s.trim_end_matches('\0').trim();
                Some(
                    s.parse::<f64>()
                        .map_err(|_| Error::Unsupported(format!("nodata value {s:?}")))?,
                )
            }
            None => None,
        };

        let (chunk_w, chunk_h) = match decoder.get_chunk_type() {
            ChunkType::Strip => (width as usize, decoder.chunk_dimensions().1 as usize),
            ChunkType::Tile => {
                let (w, h) = decoder.chunk_dimensions();
                (w as usize, h as usize)
            }
        };
        let chunks_across = (width as usize).div_ceil(chunk_w);

        let info = RasterInfo::new(width as usize, height as usize, bands, dtype, geotransform)
            .with_nodata(nodata);
        Ok(GeoTiffSource {
            path,
            info,
            chunk_w,
            chunk_h,
            chunks_across,
            state: Mutex::new(ReaderState {
                decoder,
                cache: HashMap::new(),
                order: VecDeque::new(),
                capacity: DEFAULT_CHUNK_CACHE,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Maximum number of decoded chunks kept in memory (0 disables caching).
    pub fn set_cache_capacity(&self, capacity: usize) {
        let mut st = self.state.lock().expect("reader lock poisoned");
        st.capacity = capacity;
        while st.order.len() > capacity {
            if let Some(k) = st.order.pop_front() {
                st.cache.remove(&k);
            }
        }
    }

    fn chunk(&self, index: usize) -> Result<Arc<PixelBlock>> {
        let mut st = self.state.lock().expect("reader lock poisoned");
        if let Some(b) = st.cache.get(&index) {
            return Ok(b.clone());
        }
        let (w, h) = st.decoder.chunk_data_dimensions(index as u32);
        let samples = match st.decoder.read_chunk(index as u32)? {
            DecodingResult::U8(v) => Samples::U8(v),
            DecodingResult::F32(v) => Samples::F32(v),
            _ => return Err(Error::Unsupported("sample type".into())),
        };
        let mut block = PixelBlock::new(w as usize, h as usize, self.info.bands, samples)?;
        if block.dtype() != self.info.dtype {
            return Err(Error::Unsupported("chunk dtype differs from header".into()));
        }
        // Tiles at the right/bottom edge may come back padded.
        let (dw, dh) = self.chunk_data_extent(index);
        if (block.width, block.height) != (dw, dh) {
            block = block.crop(RasterWindow::full(dw, dh));
        }
        let block = Arc::new(block);
        if st.capacity > 0 {
            if st.order.len() >= st.capacity {
                if let Some(k) = st.order.pop_front() {
                    st.cache.remove(&k);
                }
            }
            st.cache.insert(index, block.clone());
            st.order.push_back(index);
        }
        Ok(block)
    }

    fn chunk_data_extent(&self, index: usize) -> (usize, usize) {
        let cx = index % self.chunks_across;
        let cy = index / self.chunks_across;
        let w = self.chunk_w.min(self.info.width - cx * self.chunk_w);
        let h = self.chunk_h.min(self.info.height - cy * self.chunk_h);
        (w, h)
    }
}

impl RasterSource for GeoTiffSource {
    fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn read_window(&self, window: RasterWindow) -> Result<PixelBlock> {
        self.info.check_window(window)?;
        let mut out = PixelBlock::filled(window.width, window.height, self.info.bands, self.info.dtype, 0.0);
        let cx0 = window.col_off / self.chunk_w;
        let cx1 = (window.col_end() - 1) / self.chunk_w;
        let cy0 = window.row_off / self.chunk_h;
        let cy1 = (window.row_end() - 1) / self.chunk_h;
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                let index = cy * self.chunks_across + cx;
                let chunk = self.chunk(index)?;
                let chunk_win = RasterWindow::new(cx * self.chunk_w, cy * self.chunk_h, chunk.width, chunk.height);
                if let Some(isect) = chunk_win.intersection(&window) {
                    out.paste(isect.relative_to(&window), &chunk, isect.relative_to(&chunk_win));
                }
            }
        }
        Ok(out)
    }
}

fn read_geotransform(decoder: &mut Decoder<BufReader<File>>) -> Result<GeoTransform> {
    let crs = match decoder.find_tag(Tag::GeoKeyDirectoryTag)? {
        Some(v) => {
            let keys: Vec<u16> = v
                .into_u64_vec()?
                .into_iter()
                .map(|x| x as u16)
                .collect();
            parse_epsg(&keys)
        }
        None => 0,
    };

    if let Some(v) = decoder.find_tag(Tag::ModelTransformationTag)? {
        let m = v.into_f64_vec()?;
        if m.len() < 8 {
            return Err(Error::Unsupported("short ModelTransformation tag".into()));
        }
        if m[1] != 0.0 || m[4] != 0.0 {
            return Err(Error::Unsupported("rotated geotransform".into()));
        }
        return GeoTransform::new(m[3], m[7], m[0], m[5], crs);
    }

    let scale = decoder.find_tag(Tag::ModelPixelScaleTag)?;
    let tie = decoder.find_tag(Tag::ModelTiepointTag)?;
    match (scale, tie) {
        (Some(s), Some(t)) => {
            let s = s.into_f64_vec()?;
            let t = t.into_f64_vec()?;
            if s.len() < 2 || t.len() < 6 {
                return Err(Error::Unsupported("malformed georeferencing tags".into()));
            }
            let (i, j, x, y) = (t[0], t[1], t[3], t[4]);
            let (sx, sy) = (s[0], s[1]);
            GeoTransform::new(x - i * sx, y + j * sy, sx, -sy, crs)
        }
        _ => Ok(GeoTransform {
            crs,
            ..GeoTransform::identity()
        }),
    }
}

fn parse_epsg(keys: &[u16]) -> u32 {
    if keys.len() < 4 {
        return 0;
    }
    let n = keys[3] as usize;
    let mut geographic = 0;
    for k in 0..n {
        let base = 4 + 4 * k;
        let Some(entry) = keys.get(base..base + 4) else {
            break;
        };
        let (id, loc, value) = (entry[0], entry[1], entry[3]);
        if loc != 0 {
            continue;
        }
        match id {
            PROJECTED_CS_TYPE => return value as u32,
            GEOGRAPHIC_TYPE => geographic = value as u32,
            _ => {}
        }
    }
    geographic
}

// --- writer ---------------------------------------------------------------

enum Value {
    Short(Vec<u16>),
    Long(Vec<u32>),
    Long8(Vec<u64>),
    Double(Vec<f64>),
    Ascii(Vec<u8>),
}

impl Value {
    fn type_code(&self) -> u16 {
        match self {
            Value::Ascii(_) => 2,
            Value::Short(_) => 3,
            Value::Long(_) => 4,
            Value::Double(_) => 12,
            Value::Long8(_) => 16,
        }
    }

    fn count(&self) -> usize {
        match self {
            Value::Short(v) => v.len(),
            Value::Long(v) => v.len(),
            Value::Long8(v) => v.len(),
            Value::Double(v) => v.len(),
            Value::Ascii(v) => v.len(),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Value::Short(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Value::Long(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Value::Long8(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Value::Double(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Value::Ascii(v) => v.clone(),
        }
    }
}

const HEADER_RESERVED: u64 = 16;

/// Encode any raster source as a tiled, deflate-compressed GeoTIFF.
///
/// Tiles are pulled one at a time through `read_window`. The output is classic TIFF unless
/// the file outgrows 32-bit offsets, in which case it is written as BigTIFF.
pub fn write_geotiff(path: impl AsRef<Path>, src: &dyn RasterSource) -> Result<()> {
    let path = path.as_ref();
    let info = src.info().clone();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&[0u8; HEADER_RESERVED as usize])?;
    let mut pos = HEADER_RESERVED;

    let ts = OUTPUT_TILE_SIZE;
    let across = info.width.div_ceil(ts);
    let down = info.height.div_ceil(ts);
    let mut offsets = Vec::with_capacity(across * down);
    let mut counts = Vec::with_capacity(across * down);
    let pad_value = info.nodata.unwrap_or(0.0);
    let mut raw = Vec::with_capacity(ts * ts * info.bands * info.dtype.size());
    for ty in 0..down {
        for tx in 0..across {
            let win = RasterWindow::new(tx * ts, ty * ts, ts, ts);
            let win = win
                .intersection(&info.extent())
                .expect("tile origin lies inside the raster");
            let data = src.read_window(win)?;
            let mut tile = PixelBlock::filled(ts, ts, info.bands, info.dtype, pad_value);
            tile.paste(RasterWindow::full(win.width, win.height), &data, RasterWindow::full(win.width, win.height));
            raw.clear();
            match &tile.samples {
                Samples::U8(v) => raw.extend_from_slice(v),
                Samples::F32(v) => raw.extend(v.iter().flat_map(|x| x.to_le_bytes())),
            }
            let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&raw)?;
            let compressed = enc.finish()?;
            out.write_all(&compressed)?;
            offsets.push(pos);
            counts.push(compressed.len() as u64);
            pos += compressed.len() as u64;
        }
    }

    let gt = info.geotransform;
    let bits = (info.dtype.size() * 8) as u16;
    let format = match info.dtype {
        DType::U8 => 1u16,
        DType::F32 => 3,
    };
    let mut geokeys: Vec<u16> = vec![1, 1, 0, 0];
    let mut push_key = |id: u16, value: u16| geokeys.extend_from_slice(&[id, 0, 1, value]);
    if gt.crs != 0 {
        if is_geographic(gt.crs) {
            push_key(GT_MODEL_TYPE, 2);
            push_key(GT_RASTER_TYPE, 1);
            push_key(GEOGRAPHIC_TYPE, gt.crs as u16);
        } else {
            push_key(GT_MODEL_TYPE, 1);
            push_key(GT_RASTER_TYPE, 1);
            push_key(PROJECTED_CS_TYPE, gt.crs as u16);
        }
    } else {
        push_key(GT_RASTER_TYPE, 1);
    }
    geokeys[3] = ((geokeys.len() - 4) / 4) as u16;

    // Tag data (plus an IFD of ~20 entries) must fit below 4 GiB for classic TIFF.
    let big = pos + (offsets.len() as u64) * 16 + 4096 > u32::MAX as u64;
    let (offsets_val, counts_val) = if big {
        (Value::Long8(offsets), Value::Long8(counts))
    } else {
        (
            Value::Long(offsets.iter().map(|&x| x as u32).collect()),
            Value::Long(counts.iter().map(|&x| x as u32).collect()),
        )
    };
    let mut tags: Vec<(u16, Value)> = vec![
        (256, Value::Long(vec![info.width as u32])),
        (257, Value::Long(vec![info.height as u32])),
        (258, Value::Short(vec![bits; info.bands])),
        (259, Value::Short(vec![8])),
        (262, Value::Short(vec![if info.bands == 3 { 2 } else { 1 }])),
        (277, Value::Short(vec![info.bands as u16])),
        (284, Value::Short(vec![1])),
        (322, Value::Short(vec![ts as u16])),
        (323, Value::Short(vec![ts as u16])),
        (324, offsets_val),
        (325, counts_val),
        (339, Value::Short(vec![format; info.bands])),
        (33550, Value::Double(vec![gt.pixel_w, -gt.pixel_h, 0.0])),
        (33922, Value::Double(vec![0.0, 0.0, 0.0, gt.origin_x, gt.origin_y, 0.0])),
        (34735, Value::Short(geokeys)),
    ];
    if let Some(nd) = info.nodata {
        let mut s = format_nodata(nd).into_bytes();
        s.push(0);
        tags.push((42113, Value::Ascii(s)));
    }
    tags.sort_by_key(|(id, _)| *id);

    // Out-of-line values first, then the IFD.
    let inline_limit = if big { 8 } else { 4 };
    let mut value_offsets = Vec::with_capacity(tags.len());
    for (_, v) in &tags {
        let bytes = v.bytes();
        if bytes.len() > inline_limit {
            if pos % 2 == 1 {
                out.write_all(&[0])?;
                pos += 1;
            }
            value_offsets.push(Some(pos));
            out.write_all(&bytes)?;
            pos += bytes.len() as u64;
        } else {
            value_offsets.push(None);
        }
    }
    if pos % 2 == 1 {
        out.write_all(&[0])?;
        pos += 1;
    }
    let ifd_offset = pos;
    if big {
        out.write_all(&(tags.len() as u64).to_le_bytes())?;
    } else {
        out.write_all(&(tags.len() as u16).to_le_bytes())?;
    }
    for ((id, v), off) in tags.iter().zip(&value_offsets) {
        out.write_all(&id.to_le_bytes())?;
        out.write_all(&v.type_code().to_le_bytes())?;
        let mut field = vec![0u8; inline_limit];
        match off {
            Some(o) if big => field.copy_from_slice(&o.to_le_bytes()),
            Some(o) => field.copy_from_slice(&(*o as u32).to_le_bytes()),
            None => {
                let b = v.bytes();
                field[..b.len()].copy_from_slice(&b);
            }
        }
        if big {
            out.write_all(&(v.count() as u64).to_le_bytes())?;
        } else {
            out.write_all(&(v.count() as u32).to_le_bytes())?;
        }
        out.write_all(&field)?;
    }
    if big {
        out.write_all(&0u64.to_le_bytes())?;
    } else {
        out.write_all(&0u32.to_le_bytes())?;
    }

    out.seek(SeekFrom::Start(0))?;
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(b"II");
    if big {
        header.extend_from_slice(&43u16.to_le_bytes());
        header.extend_from_slice(&8u16.to_le_bytes());
        header.extend_from_slice(&0u16.to_le_bytes());
        header.extend_from_slice(&ifd_offset.to_le_bytes());
    } else {
        header.extend_from_slice(&42u16.to_le_bytes());
        header.extend_from_slice(&(ifd_offset as u32).to_le_bytes());
    }
    out.write_all(&header)?;
    out.flush()?;
    Ok(())
}

fn format_nodata(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Windowed GeoTIFF writer.
///
/// Pixels are kept uncompressed in `<path>.scratch` until [`finish`](Self::finish)
/// encodes the tiled output and removes the scratch file. Unwritten pixels read as zero.
pub struct GeoTiffSink {
    path: PathBuf,
    scratch_path: PathBuf,
    info: RasterInfo,
    scratch: Mutex<File>,
}

impl GeoTiffSink {
    pub fn create(path: impl AsRef<Path>, info: RasterInfo) -> Result<Self> {
        info.geotransform.validate()?;
        if info.width == 0 || info.height == 0 || info.bands == 0 {
            return Err(Error::invalid("raster dimensions must be positive"));
        }
        let path = path.as_ref().to_path_buf();
        let mut scratch_path = path.clone().into_os_string();
        scratch_path.push(".scratch");
        let scratch_path = PathBuf::from(scratch_path);
        let scratch = File::options()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&scratch_path)
            .map_err(|e| Error::file(&scratch_path, e))?;
        let len = (info.width * info.height * info.bands * info.dtype.size()) as u64;
        scratch.set_len(len)?;
        Ok(GeoTiffSink {
            path,
            scratch_path,
            info,
            scratch: Mutex::new(scratch),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn row_offset(&self, col: usize, row: usize) -> u64 {
        ((row * self.info.width + col) * self.info.bands * self.info.dtype.size()) as u64
    }

    /// Encode the destination GeoTIFF and remove the scratch file.
    pub fn finish(self) -> Result<PathBuf> {
        write_geotiff(&self.path, &self)?;
        std::fs::remove_file(&self.scratch_path).map_err(|e| Error::file(&self.scratch_path, e))?;
        Ok(self.path.clone())
    }
}

impl RasterSink for GeoTiffSink {
    fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn write_window(&self, window: RasterWindow, block: &PixelBlock) -> Result<()> {
        self.info.check_block(window, block)?;
        let file = self.scratch.lock().expect("sink lock poisoned");
        let row_samples = window.width * self.info.bands;
        let mut buf = Vec::with_capacity(row_samples * self.info.dtype.size());
        for r in 0..window.height {
            buf.clear();
            let s = r * row_samples;
            match &block.samples {
                Samples::U8(v) => buf.extend_from_slice(&v[s..s + row_samples]),
                Samples::F32(v) => buf.extend(v[s..s + row_samples].iter().flat_map(|x| x.to_le_bytes())),
            }
            file.write_all_at(&buf, self.row_offset(window.col_off, window.row_off + r))?;
        }
        Ok(())
    }
}

impl RasterSource for GeoTiffSink {
    fn info(&self) -> &RasterInfo {
        &self.info
    }

    fn read_window(&self, window: RasterWindow) -> Result<PixelBlock> {
        self.info.check_window(window)?;
        let file = self.scratch.lock().expect("sink lock poisoned");
        let row_samples = window.width * self.info.bands;
        let mut buf = vec![0u8; row_samples * self.info.dtype.size()];
        let mut out = PixelBlock::filled(window.width, window.height, self.info.bands, self.info.dtype, 0.0);
        for r in 0..window.height {
            file.read_exact_at(&mut buf, self.row_offset(window.col_off, window.row_off + r))?;
            let s = r * row_samples;
            match &mut out.samples {
                Samples::U8(v) => v[s..s + row_samples].copy_from_slice(&buf),
                Samples::F32(v) => {
                    for (d, c) in v[s..s + row_samples].iter_mut().zip(buf.chunks_exact(4)) {
                        *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Drop for GeoTiffSink {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.scratch_path);
    }
}
