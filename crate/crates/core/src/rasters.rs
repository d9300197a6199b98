//! Raster containers and their file formats.
//!
//! World/cell convention used across the crate: `(origin_x, origin_y)` is the
//! outer upper-left corner of cell `(0, 0)`. Columns grow eastward (+x), rows
//! grow southward (-y), so the center of cell `(col, row)` is at
//! `(origin_x + (col + 0.5) * cell_size, origin_y - (row + 0.5) * cell_size)`.
//! Continuous cell coordinates put integer values on cell centers, the same
//! convention image pixels use.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoGrid {
    pub width: usize,
    pub height: usize,
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub nodata: f32,
}

impl GeoGrid {
    pub fn new(width: usize, height: usize, origin_x: f64, origin_y: f64, cell_size: f64, nodata: f32) -> Result<Self> {
        let grid = GeoGrid { width, height, origin_x, origin_y, cell_size, nodata };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("grid must have at least one cell".into()));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("cell size {} must be > 0", self.cell_size)));
        }
        if !(self.origin_x.is_finite() && self.origin_y.is_finite()) {
            return Err(Error::InvalidConfig("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        self.cell_to_world(col as f64, row as f64)
    }

    pub fn cell_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        (self.origin_x + (col + 0.5) * self.cell_size, self.origin_y - (row + 0.5) * self.cell_size)
    }

    /// Continuous cell coordinates of a world position.
    pub fn world_to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) / self.cell_size - 0.5, (self.origin_y - y) / self.cell_size - 0.5)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (c, r) = self.world_to_cell(x, y);
        c >= -0.5 && r >= -0.5 && c <= self.width as f64 - 0.5 && r <= self.height as f64 - 0.5
    }

    /// (min_x, min_y, max_x, max_y) of the outer cell boundary.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin_x,
            self.origin_y - self.height as f64 * self.cell_size,
            self.origin_x + self.width as f64 * self.cell_size,
            self.origin_y,
        )
    }
}

#[derive(Debug, Clone)]
pub struct DsmRaster {
    pub grid: GeoGrid,
    /// Row-major, top row first.
    elevations: Vec<f32>,
    z_range: OnceLock<Option<(f64, f64)>>,
}

impl PartialEq for DsmRaster {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.elevations.len() == other.elevations.len()
            && self.elevations.iter().zip(&other.elevations).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl DsmRaster {
    pub fn new(grid: GeoGrid, elevations: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if elevations.len() != grid.len() {
            return Err(Error::SizeMismatch { expected: grid.len(), found: elevations.len() });
        }
        Ok(DsmRaster { grid, elevations, z_range: OnceLock::new() })
    }

    pub fn filled(grid: GeoGrid, value: f32) -> Self {
        DsmRaster { grid, elevations: vec![value; grid.len()], z_range: OnceLock::new() }
    }

    pub fn elevations(&self) -> &[f32] {
        &self.elevations
    }

    pub fn elevations_mut(&mut self) -> &mut [f32] {
        self.z_range = OnceLock::new();
        &mut self.elevations
    }

    pub fn from_fn(grid: GeoGrid, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut elevations = Vec::with_capacity(grid.len());
        for row in 0..grid.height {
            for col in 0..grid.width {
                elevations.push(f(col, row));
            }
        }
        DsmRaster { grid, elevations, z_range: OnceLock::new() }
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        !v.is_finite() || v == self.grid.nodata
    }

    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let v = self.elevations[row * self.grid.width + col];
        (!self.is_nodata(v)).then_some(v as f64)
    }

    pub fn set(&mut self, col: usize, row: usize, value: Option<f64>) {
        self.z_range = OnceLock::new();
        let idx = row * self.grid.width + col;
        self.elevations[idx] = value.map_or(self.grid.nodata, |v| v as f32);
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.elevations.iter().filter(|v| !self.is_nodata(**v)).map(|v| *v as f64)
    }

    pub fn valid_count(&self) -> usize {
        self.valid_values().count()
    }

    /// (min, max) over valid cells, computed once and cached.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        *self.z_range.get_or_init(|| {
            self.valid_values().fold(None, |acc, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
        })
    }

    /// Bilinear interpolation between the cell centers around `(x, y)`.
    ///
    /// Positions inside the outer half-cell border are clamped onto the
    /// outermost centers. Neighbors that carry zero weight are ignored, so a
    /// query at a cell center returns that cell even next to nodata.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !self.grid.contains(x, y) {
            return None;
        }
        let (c, r) = self.grid.world_to_cell(x, y);
        let c = c.clamp(0.0, (self.grid.width - 1) as f64);
        let r = r.clamp(0.0, (self.grid.height - 1) as f64);
        let c0 = c.floor() as usize;
        let r0 = r.floor() as usize;
        let c1 = (c0 + 1).min(self.grid.width - 1);
        let r1 = (r0 + 1).min(self.grid.height - 1);
        let fc = c - c0 as f64;
        let fr = r - r0 as f64;
        let taps = [
            (c0, r0, (1.0 - fc) * (1.0 - fr)),
            (c1, r0, fc * (1.0 - fr)),
            (c0, r1, (1.0 - fc) * fr),
            (c1, r1, fc * fr),
        ];
        let mut acc = 0.0;
        for (cc, rr, w) in taps {
            if w == 0.0 {
                continue;
            }
            acc += w * self.get(cc, rr)?;
        }
        Some(acc)
    }

    /// Block-average downsampling; a block is nodata only if all its cells are.
    pub fn downsample(&self, factor: usize) -> DsmRaster {
        if factor <= 1 {
            return self.clone();
        }
        let w = self.grid.width.div_ceil(factor);
        let h = self.grid.height.div_ceil(factor);
        let grid = GeoGrid { width: w, height: h, cell_size: self.grid.cell_size * factor as f64, ..self.grid };
        DsmRaster::from_fn(grid, |col, row| {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for r in row * factor..((row + 1) * factor).min(self.grid.height) {
                for c in col * factor..((col + 1) * factor).min(self.grid.width) {
                    if let Some(v) = self.get(c, r) {
                        sum += v;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                grid.nodata
            } else {
                (sum / n as f64) as f32
            }
        })
    }
}

/// 8-bit single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage { width, height, pixels: vec![0; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::SizeMismatch { expected: width * height, found: pixels.len() });
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage { width, height, pixels }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn rect(&self) -> PixelRect {
        PixelRect::new(0, 0, self.width, self.height)
    }

    /// Block-average downsampling over full `factor`×`factor` blocks; pixel
    /// `(x, y)` of the result is centered on `factor·x + (factor−1)/2`.
    pub fn downsample(&self, factor: usize) -> GrayImage {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = ((self.width / factor).max(1), (self.height / factor).max(1));
        GrayImage::from_fn(w, h, |x, y| {
            let mut sum = 0u32;
            let mut n = 0u32;
            for yy in y * factor..((y + 1) * factor).min(self.height) {
                for xx in x * factor..((x + 1) * factor).min(self.width) {
                    sum += self.get(xx, yy) as u32;
                    n += 1;
                }
            }
            ((sum + n / 2) / n) as u8
        })
    }

    /// Bilinear sample at continuous pixel coordinates (integers are pixel
    /// centers). `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |xx: usize, yy: usize| self.get(xx, yy) as f64;
        Some(
            (1.0 - fx) * (1.0 - fy) * p(x0, y0)
                + fx * (1.0 - fy) * p(x1, y0)
                + (1.0 - fx) * fy * p(x0, y1)
                + fx * fy * p(x1, y1),
        )
    }

    /// Rotates counter-clockwise (as displayed, y down) by `k` quarter turns.
    pub fn rotate_quarter(&self, k: u8) -> GrayImage {
        let k = k % 4;
        let (w, h) = if k.is_multiple_of(2) { (self.width, self.height) } else { (self.height, self.width) };
        GrayImage::from_fn(w, h, |x, y| {
            let (sx, sy) = quarter_turn_source(k, self.width, self.height, x, y);
            self.get(sx, sy)
        })
    }
}

/// Maps a pixel of the image rotated by `k` quarter turns back to the
/// unrotated `width x height` image. Works on continuous coordinates too.
pub fn quarter_turn_unrotate(k: u8, width: usize, height: usize, x: f64, y: f64) -> (f64, f64) {
    let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
    match k % 4 {
        0 => (x, y),
        1 => (w - y, x),
        2 => (w - x, h - y),
        _ => (y, h - x),
    }
}

/// Inverse of [`quarter_turn_unrotate`].
pub fn quarter_turn_rotate(k: u8, width: usize, height: usize, x: f64, y: f64) -> (f64, f64) {
    let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
    match k % 4 {
        0 => (x, y),
        1 => (y, w - x),
        2 => (w - x, h - y),
        _ => (h - y, x),
    }
}

fn quarter_turn_source(k: u8, width: usize, height: usize, x: usize, y: usize) -> (usize, usize) {
    let (sx, sy) = quarter_turn_unrotate(k, width, height, x as f64, y as f64);
    (sx as usize, sy as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: i64,
    pub y: i64,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn new(x: i64, y: i64, width: usize, height: usize) -> Self {
        PixelRect { x, y, width, height }
    }

    pub fn right(&self) -> i64 {
        self.x + self.width as i64
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.height as i64
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn intersect(&self, other: &PixelRect) -> Option<PixelRect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| PixelRect::new(x0, y0, (x1 - x0) as usize, (y1 - y0) as usize))
    }

    pub fn inflate(&self, by: usize) -> PixelRect {
        let b = by as i64;
        PixelRect::new(self.x - b, self.y - b, self.width + 2 * by, self.height + 2 * by)
    }

    /// Half-open containment on continuous pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64 && y >= self.y as f64 && x < self.right() as f64 && y < self.bottom() as f64
    }
}

/// Crops `img` to `rect ∩ image`, returning the tile and the rectangle
/// actually used.
pub fn crop(img: &GrayImage, rect: PixelRect) -> Result<(GrayImage, PixelRect)> {
    let used = rect.intersect(&img.rect()).ok_or(Error::EmptyIntersection)?;
    let tile = GrayImage::from_fn(used.width, used.height, |x, y| img.get(used.x as usize + x, used.y as usize + y));
    Ok((tile, used))
}

/// Converts a DSM to an 8-bit image for matching.
///
/// Cells farther than two standard deviations from the mean elevation are
/// treated like nodata: they render as 0 and take no part in the min/max
/// stretch. The remaining cells map linearly onto `[0, 255]` with floor
/// rounding.
pub fn dsm_to_gray(dsm: &DsmRaster) -> Result<GrayImage> {
    let n = dsm.valid_count();
    if n == 0 {
        return Err(Error::AllNodata);
    }
    let mean = dsm.valid_values().sum::<f64>() / n as f64;
    let var = dsm.valid_values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let limit = 2.0 * var.sqrt();
    let keep = |v: f32| !dsm.is_nodata(v) && ((v as f64) - mean).abs() <= limit;

    let (lo, hi) = dsm
        .elevations()
        .iter()
        .filter(|v| keep(**v))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v as f64), hi.max(*v as f64)));
    let range = hi - lo;
    let pixels = dsm
        .elevations
        .iter()
        .map(|&v| {
            if !keep(v) || !(range > 0.0) {
                0
            } else {
                (255.0 * ((v as f64) - lo) / range).floor().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Ok(GrayImage { width: dsm.grid.width, height: dsm.grid.height, pixels })
}

fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("bin"), path.with_extension("json"))
}

/// Writes `<stem>.bin` (little-endian f32, row-major, top row first) and the
/// `<stem>.json` sidecar.
pub fn write_raster(dsm: &DsmRaster, path: &Path) -> Result<()> {
    let (bin, json) = sidecar_paths(path);
    crate::io::ensure_parent(&bin)?;
    let mut bytes = Vec::with_capacity(dsm.elevations.len() * 4);
    for v in &dsm.elevations {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    crate::io::write_json(&json, &dsm.grid)
}

pub fn read_raster(path: &Path) -> Result<DsmRaster> {
    let (bin, json) = sidecar_paths(path);
    let text = crate::io::read_text(&json)?;
    let grid: GeoGrid = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedHeader { path: json.clone(), reason: e.to_string() })?;
    grid.validate().map_err(|e| Error::MalformedHeader { path: json.clone(), reason: e.to_string() })?;
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != grid.len() {
        return Err(Error::SizeMismatch { expected: grid.len(), found: bytes.len() / 4 });
    }
    let elevations = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    DsmRaster::new(grid, elevations)
}

/// Binary PGM (P5, maxval 255).
pub fn write_gray(img: &GrayImage, path: &Path) -> Result<()> {
    crate::io::ensure_parent(path)?;
    let mut bytes = Vec::with_capacity(img.pixels.len() + 32);
    write!(bytes, "P5\n{} {}\n255\n", img.width, img.height).expect("write to Vec");
    bytes.extend_from_slice(&img.pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|reason| match reason {
        PgmError::Header(reason) => Error::MalformedHeader { path: path.to_path_buf(), reason },
        PgmError::Size { expected, found } => Error::SizeMismatch { expected, found },
    })
}

enum PgmError {
    Header(String),
    Size { expected: usize, found: usize },
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, PgmError> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PgmError::Header("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(PgmError::Header(format!("unsupported magic {:?}", tokens[0])));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| PgmError::Header(format!("bad {what} {s:?}")));
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval != 255 {
        return Err(PgmError::Header(format!("maxval {maxval} unsupported")));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != width * height {
        return Err(PgmError::Size { expected: width * height, found: payload.len() });
    }
    Ok(GrayImage { width, height, pixels: payload.to_vec() })
}
