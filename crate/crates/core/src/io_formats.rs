//! On-disk formats: raw rasters, 8-bit PNG previews, INR checkpoints.
//!
//! All integers and floats are little-endian. The byte layouts are listed in
//! `docs/FORMATS.md`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::geometry::{FanGeometry, GridSpec};
use crate::inr::{Architecture, InrModel, ParamLayout};
use crate::projector::{Image, Sinogram};
use crate::scalar::Real;

pub const RASTER_MAGIC: &[u8; 8] = b"CTINRRAS";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTINRCKP";
pub const FORMAT_VERSION: u8 = 1;
/// Dtype marker for little-endian IEEE-754 binary64.
pub const DTYPE_F64_LE: u8 = 1;
const RASTER_HEADER_LEN: usize = 32;
const CHECKPOINT_HEADER_LEN: usize = 24;
/// Metadata blocks larger than this are treated as corrupt.
const MAX_META_LEN: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported raster kind {0}")]
    UnsupportedKind(u8),

    #[error("unsupported dtype marker {0}")]
    UnsupportedDtype(u8),

    #[error("zero dimension in {rows}x{cols} raster")]
    ZeroDims { rows: u64, cols: u64 },

    #[error("dimensions {rows}x{cols} overflow the addressable payload size")]
    DimensionOverflow { rows: u64, cols: u64 },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated { what: &'static str, expected: u64, found: u64 },

    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(u64),

    #[error("bad metadata: {0}")]
    BadMetadata(String),

    #[error("invalid display window [{lo}, {hi}]")]
    InvalidWindow { lo: f64, hi: f64 },

    #[error("payload value {0} is not finite")]
    NonFinite(f64),

    #[error("png encoding failed: {0}")]
    Png(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RasterKind {
    Image = 1,
    Sinogram = 2,
}

impl RasterKind {
    fn from_byte(b: u8) -> std::result::Result<Self, FormatError> {
        match b {
            1 => Ok(RasterKind::Image),
            2 => Ok(RasterKind::Sinogram),
            other => Err(FormatError::UnsupportedKind(other)),
        }
    }
}

/// A raster read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster {
    Image(Image<f64>),
    Sinogram(Sinogram<f64>),
}

impl Raster {
    pub fn kind(&self) -> RasterKind {
        match self {
            Raster::Image(_) => RasterKind::Image,
            Raster::Sinogram(_) => RasterKind::Sinogram,
        }
    }
}

/// `(kind, rows, cols, JSON metadata, payload)`.
pub type RasterParts = (RasterKind, u64, u64, Vec<u8>, Vec<f64>);

/// Anything that can be stored as a raster.
pub trait ToRaster {
    fn raster_parts(&self) -> Result<RasterParts>;
}

impl<T: Real> ToRaster for Image<T> {
    fn raster_parts(&self) -> Result<RasterParts> {
        let n = self.grid.n_side as u64;
        let meta = serde_json::to_vec(&self.grid).map_err(|e| FormatError::BadMetadata(e.to_string()))?;
        Ok((RasterKind::Image, n, n, meta, self.data.iter().map(|v| v.to_f64_lossy()).collect()))
    }
}

impl<T: Real> ToRaster for Sinogram<T> {
    fn raster_parts(&self) -> Result<RasterParts> {
        let g = &self.geom;
        let meta = serde_json::to_vec(g).map_err(|e| FormatError::BadMetadata(e.to_string()))?;
        Ok((
            RasterKind::Sinogram,
            g.n_views as u64,
            g.n_det as u64,
            meta,
            self.data.iter().map(|v| v.to_f64_lossy()).collect(),
        ))
    }
}

fn payload_len(rows: u64, cols: u64) -> std::result::Result<u64, FormatError> {
    if rows == 0 || cols == 0 {
        return Err(FormatError::ZeroDims { rows, cols });
    }
    rows.checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(FormatError::DimensionOverflow { rows, cols })
}

/// Encodes a raster into its on-disk bytes.
pub fn encode_raster(value: &dyn ToRaster) -> Result<Vec<u8>> {
    let (kind, rows, cols, meta, payload) = value.raster_parts()?;
    let expected = payload_len(rows, cols)?;
    if payload.len() as u64 * 8 != expected {
        return Err(Error::dim(format!("{} values for a {rows}x{cols} raster", payload.len())));
    }
    let meta_len = u32::try_from(meta.len())
        .ok()
        .filter(|&m| m <= MAX_META_LEN)
        .ok_or_else(|| FormatError::BadMetadata("metadata block too large".into()))?;
    let mut out = Vec::with_capacity(RASTER_HEADER_LEN + meta.len() + expected as usize);
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&[FORMAT_VERSION, kind as u8, DTYPE_F64_LE, 0]);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
    bytes.get(at..at + n).ok_or(FormatError::Truncated { what, expected: (at + n) as u64, found: bytes.len() as u64 })
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn check_magic(found: &[u8], expected: &[u8; 8]) -> std::result::Result<(), FormatError> {
    if found != expected {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    Ok(())
}

fn decode_f64s(raw: &[u8]) -> Vec<f64> {
    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Parses raster bytes, validating the header before allocating the payload.
pub fn decode_raster(bytes: &[u8]) -> Result<Raster> {
    let head = take(bytes, 0, RASTER_HEADER_LEN, "header")?;
    check_magic(&head[..8], RASTER_MAGIC)?;
    if head[8] != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(head[8]).into());
    }
    let kind = RasterKind::from_byte(head[9])?;
    if head[10] != DTYPE_F64_LE {
        return Err(FormatError::UnsupportedDtype(head[10]).into());
    }
    let (rows, cols) = (u64_at(head, 12), u64_at(head, 20));
    let plen = payload_len(rows, cols)?;
    let meta_len = u32::from_le_bytes(head[28..32].try_into().unwrap());
    if meta_len > MAX_META_LEN {
        return Err(FormatError::BadMetadata(format!("metadata length {meta_len} is implausible")).into());
    }
    let meta = take(bytes, RASTER_HEADER_LEN, meta_len as usize, "metadata")?;
    let start = RASTER_HEADER_LEN + meta_len as usize;
    let body = take(bytes, start, plen as usize, "payload")?;
    let extra = bytes.len() - start - plen as usize;
    if extra != 0 {
        return Err(FormatError::TrailingBytes(extra as u64).into());
    }
    let bad = |e: String| Error::from(FormatError::BadMetadata(e));
    match kind {
        RasterKind::Image => {
            let grid: GridSpec = serde_json::from_slice(meta).map_err(|e| bad(e.to_string()))?;
            grid.validate().map_err(|e| bad(e.to_string()))?;
            if grid.n_side as u64 != rows || rows != cols {
                return Err(bad(format!("grid side {} disagrees with {rows}x{cols} payload", grid.n_side)));
            }
            Ok(Raster::Image(Image { grid, data: decode_f64s(body) }))
        }
        RasterKind::Sinogram => {
            let geom: FanGeometry = serde_json::from_slice(meta).map_err(|e| bad(e.to_string()))?;
            geom.validate().map_err(|e| bad(e.to_string()))?;
            if geom.n_views as u64 != rows || geom.n_det as u64 != cols {
                return Err(bad(format!(
                    "geometry {}x{} disagrees with {rows}x{cols} payload",
                    geom.n_views, geom.n_det
                )));
            }
            Ok(Raster::Sinogram(Sinogram { geom, data: decode_f64s(body) }))
        }
    }
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn write_raster(path: impl AsRef<Path>, value: &dyn ToRaster) -> Result<()> {
    let bytes = encode_raster(value)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes)
}

pub fn read_image<T: Real>(path: impl AsRef<Path>) -> Result<Image<T>> {
    match read_raster(&path)? {
        Raster::Image(img) => Ok(img.cast()),
        Raster::Sinogram(_) => {
            Err(FormatError::BadMetadata(format!("{} holds a sinogram, not an image", path.as_ref().display())).into())
        }
    }
}

pub fn read_sinogram<T: Real>(path: impl AsRef<Path>) -> Result<Sinogram<T>> {
    match read_raster(&path)? {
        Raster::Sinogram(s) => Ok(s.cast()),
        Raster::Image(_) => {
            Err(FormatError::BadMetadata(format!("{} holds an image, not a sinogram", path.as_ref().display())).into())
        }
    }
}

/// Gray level of `v` under the window: `round(255 (v - lo) / (hi - lo))`
/// after clamping to `[0, 1]`, with halves rounded away from zero, so the
/// window midpoint maps to 128.
pub fn window_level(v: f64, lo: f64, hi: f64) -> u8 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (255.0 * t).round() as u8
}

/// Linear window to 8-bit grayscale. Row 0 of the image is the top row.
pub fn export_png<T: Real>(path: impl AsRef<Path>, img: &Image<T>, window: (f64, f64)) -> Result<()> {
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(FormatError::InvalidWindow { lo, hi }.into());
    }
    let mut levels = Vec::with_capacity(img.data.len());
    for v in &img.data {
        let v = v.to_f64_lossy();
        if !v.is_finite() {
            return Err(FormatError::NonFinite(v).into());
        }
        levels.push(window_level(v, lo, hi));
    }
    let n = img.grid.n_side as u32;
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, n, n);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| FormatError::Png(e.to_string()))?;
        w.write_image_data(&levels).map_err(|e| FormatError::Png(e.to_string()))?;
    }
    write_atomic(path.as_ref(), &buf)
}

/// Self-describing checkpoint header, stored as JSON after the fixed prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub arch: Architecture,
    pub layout: ParamLayout,
}

pub fn encode_checkpoint<T: Real>(model: &InrModel<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader { arch: model.arch.clone(), layout: model.layout().clone() };
    let meta = serde_json::to_vec(&header).map_err(|e| FormatError::BadMetadata(e.to_string()))?;
    let meta_len = u32::try_from(meta.len()).map_err(|_| FormatError::BadMetadata("header too large".into()))?;
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + meta.len() + 8 * model.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&[FORMAT_VERSION, model.arch.kind().tag(), DTYPE_F64_LE, 0]);
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for p in &model.params {
        out.extend_from_slice(&p.to_f64_lossy().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<InrModel<T>> {
    let head = take(bytes, 0, CHECKPOINT_HEADER_LEN, "header")?;
    check_magic(&head[..8], CHECKPOINT_MAGIC)?;
    if head[8] != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(head[8]).into());
    }
    if head[10] != DTYPE_F64_LE {
        return Err(FormatError::UnsupportedDtype(head[10]).into());
    }
    let meta_len = u32::from_le_bytes(head[12..16].try_into().unwrap());
    if meta_len > MAX_META_LEN {
        return Err(FormatError::BadMetadata(format!("header length {meta_len} is implausible")).into());
    }
    let n_params = u64_at(head, 16);
    let plen = n_params
        .checked_mul(8)
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(FormatError::DimensionOverflow { rows: n_params, cols: 1 })?;
    let meta = take(bytes, CHECKPOINT_HEADER_LEN, meta_len as usize, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(meta).map_err(|e| FormatError::BadMetadata(e.to_string()))?;
    if header.arch.kind().tag() != head[9] {
        return Err(FormatError::BadMetadata(format!(
            "arch tag {} disagrees with config {}",
            head[9],
            header.arch.kind()
        ))
        .into());
    }
    let layout = ParamLayout::for_arch(&header.arch).map_err(|e| FormatError::BadMetadata(e.to_string()))?;
    if layout != header.layout || layout.len as u64 != n_params {
        return Err(FormatError::BadMetadata("stored layout does not match the config".into()).into());
    }
    let start = CHECKPOINT_HEADER_LEN + meta_len as usize;
    let body = take(bytes, start, plen as usize, "parameters")?;
    let extra = bytes.len() - start - plen as usize;
    if extra != 0 {
        return Err(FormatError::TrailingBytes(extra as u64).into());
    }
    let params = decode_f64s(body);
    if let Some(v) = params.iter().find(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(*v).into());
    }
    InrModel::from_params(&header.arch, params.into_iter().map(T::of).collect())
}

pub fn write_checkpoint<T: Real>(path: impl AsRef<Path>, model: &InrModel<T>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(model)?)
}

pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<InrModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
