//! Accuracy measures: DSM differences, check-point statistics,
//! orthorectification and orthophoto displacement maps.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::triangulate_rays;
use crate::cameras::{EpochBlock, FraserCamera, Pose, Surface};
use crate::error::{Error, Result};
use crate::rasters::{DsmRaster, GeoGrid, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DodStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Mean of absolute values.
    pub mean_abs: f64,
    pub valid_cell_count: usize,
}

impl DodStats {
    pub fn from_values(values: &[f64]) -> Option<DodStats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / n;
        Some(DodStats { mean, std: var.sqrt(), mean_abs, valid_cell_count: values.len() })
    }
}

/// Samples `surface` at every cell center of `grid` (nodata where it has no
/// elevation). This is the eager export of a lazily transformed DSM.
pub fn resample_surface(surface: &impl Surface, grid: &GeoGrid) -> DsmRaster {
    let values: Vec<f32> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = grid.cell_center(i % grid.width, i / grid.width);
            surface.height_at(x, y).map_or(grid.nodata, |z| z as f32)
        })
        .collect();
    DsmRaster::new(*grid, values).expect("grid-sized buffer")
}

/// Difference `a − b` on `b`'s grid, `a` sampled bilinearly.
pub fn dod(a: &impl Surface, b: &DsmRaster) -> Result<(DsmRaster, DodStats)> {
    let grid = b.grid;
    let diffs: Vec<Option<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (c, r) = (i % grid.width, i / grid.width);
            let zb = b.get(c, r)?;
            let (x, y) = grid.cell_center(c, r);
            a.height_at(x, y).map(|za| za - zb)
        })
        .collect();
    let values: Vec<f64> = diffs.iter().flatten().copied().collect();
    let stats = DodStats::from_values(&values).ok_or(Error::NoOverlap)?;
    let raster = DsmRaster::new(grid, diffs.iter().map(|d| d.map_or(grid.nodata, |v| v as f32)).collect())?;
    Ok((raster, stats))
}

/// Sparse DoD: each point's elevation minus the reference surface under it,
/// averaged over the points falling in each cell of `grid`.
pub fn point_dod(points: &[Vector3<f64>], reference: &impl Surface, grid: &GeoGrid) -> Result<(DsmRaster, DodStats)> {
    let diffs: Vec<Vector3<f64>> = points
        .iter()
        .filter_map(|p| reference.height_at(p.x, p.y).map(|zr| Vector3::new(p.x, p.y, p.z - zr)))
        .collect();
    let out = rasterize_points(&diffs, grid);
    let values: Vec<f64> = (0..grid.len()).filter_map(|i| out.get(i % grid.width, i / grid.width)).collect();
    let stats = DodStats::from_values(&values).ok_or(Error::NoOverlap)?;
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckPoint {
    pub id: String,
    pub reference_ground: Vector3<f64>,
    pub observations: Vec<(String, Vector2<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointResidual {
    pub id: String,
    pub residual: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub x: AxisStats,
    pub y: AxisStats,
    pub z: AxisStats,
    pub used: usize,
    pub residuals: Vec<CheckpointResidual>,
    /// Points excluded with the reason.
    pub excluded: Vec<(String, String)>,
}

impl CheckpointReport {
    pub fn mean_abs(&self) -> [f64; 3] {
        [self.x.mean_abs, self.y.mean_abs, self.z.mean_abs]
    }
}

/// Triangulates each check point with the block's orientations and compares
/// with its reference coordinates.
pub fn checkpoint_accuracy(points: &[CheckPoint], block: &EpochBlock) -> Result<CheckpointReport> {
    let mut residuals = Vec::new();
    let mut excluded = Vec::new();
    for p in points {
        let mut rays = Vec::new();
        let mut failure = None;
        for (image_id, px) in &p.observations {
            let ray = block.image(image_id).and_then(|img| block.camera_of(img)?.backproject_ray(&img.pose, px));
            match ray {
                Ok(r) => rays.push(r),
                Err(e) => failure = Some(e.to_string()),
            }
        }
        if let Some(reason) = failure {
            excluded.push((p.id.clone(), reason));
            continue;
        }
        match triangulate_rays(&rays) {
            Ok(est) => {
                let r = est - p.reference_ground;
                residuals.push(CheckpointResidual { id: p.id.clone(), residual: [r.x, r.y, r.z] });
            }
            Err(e) => excluded.push((p.id.clone(), e.to_string())),
        }
    }
    if residuals.is_empty() {
        return Err(Error::RaysNearParallel);
    }
    let axis = |k: usize| {
        let v: Vec<f64> = residuals.iter().map(|r| r.residual[k]).collect();
        let s = DodStats::from_values(&v).expect("non-empty");
        AxisStats { mean: s.mean, std: s.std, mean_abs: s.mean_abs }
    };
    Ok(CheckpointReport { x: axis(0), y: axis(1), z: axis(2), used: residuals.len(), residuals, excluded })
}

/// Check-point file: a line `id ref_x ref_y ref_z` starts a point and each
/// following `image_id x y` line adds an observation.
pub fn read_checkpoints(path: &Path) -> Result<Vec<CheckPoint>> {
    let text = crate::io::read_text(path)?;
    let mut out: Vec<CheckPoint> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() || toks[0].starts_with('#') {
            continue;
        }
        let num = |t: &str| t.parse::<f64>().map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)));
        match toks.len() {
            4 => out.push(CheckPoint {
                id: toks[0].to_string(),
                reference_ground: Vector3::new(num(toks[1])?, num(toks[2])?, num(toks[3])?),
                observations: Vec::new(),
            }),
            3 => {
                let p = out
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, format!("line {}: observation before any point", n + 1)))?;
                p.observations.push((toks[0].to_string(), Vector2::new(num(toks[1])?, num(toks[2])?)));
            }
            _ => return Err(Error::parse(path, format!("line {}: expected 3 or 4 fields", n + 1))),
        }
    }
    Ok(out)
}

pub fn write_checkpoints(points: &[CheckPoint], path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in points {
        let g = p.reference_ground;
        text.push_str(&format!("{} {} {} {}\n", p.id, g.x, g.y, g.z));
        for (img, px) in &p.observations {
            text.push_str(&format!("{} {} {}\n", img, px.x, px.y));
        }
    }
    crate::io::write_text(path, &text)
}

/// Resamples `img` onto `grid` using the surface heights; cells without an
/// elevation or outside the image are 0.
pub fn orthorectify(
    img: &GrayImage,
    camera: &FraserCamera,
    pose: &Pose,
    surface: &impl Surface,
    grid: &GeoGrid,
) -> Result<GrayImage> {
    let values: Vec<Option<u8>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = grid.cell_center(i % grid.width, i / grid.width);
            let z = surface.height_at(x, y)?;
            let px = camera.project(pose, &Vector3::new(x, y, z)).ok()?;
            img.sample_bilinear(px.x, px.y).map(|v| v.round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    if values.iter().all(|v| v.is_none()) {
        return Err(Error::NoOverlap);
    }
    GrayImage::from_pixels(grid.width, grid.height, values.into_iter().map(|v| v.unwrap_or(0)).collect())
}

/// Orthophoto mosaic of a block on a grid in its DSM's own frame. Each cell
/// takes the image whose projection lies closest to its principal point.
pub fn orthomosaic(block: &EpochBlock, grid: &GeoGrid) -> Result<GrayImage> {
    let views = block
        .images
        .iter()
        .map(|img| {
            let pixels = img
                .pixels
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("image {} has no pixels loaded", img.image_id)))?;
            Ok((block.camera_of(img)?, &img.pose, pixels.as_ref()))
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<Option<u8>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = grid.cell_center(i % grid.width, i / grid.width);
            let z = block.dsm.sample_bilinear(x, y)?;
            let world = block.dsm_transform.apply(&Vector3::new(x, y, z));
            let mut best: Option<(f64, f64)> = None;
            for (cam, pose, pixels) in &views {
                let Ok(px) = cam.project(pose, &world) else { continue };
                let Some(v) = pixels.sample_bilinear(px.x, px.y) else { continue };
                let d = (px.x - cam.pp[0]).hypot(px.y - cam.pp[1]);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, v));
                }
            }
            best.map(|(_, v)| v.round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    if values.iter().all(|v| v.is_none()) {
        return Err(Error::NoOverlap);
    }
    GrayImage::from_pixels(grid.width, grid.height, values.into_iter().map(|v| v.unwrap_or(0)).collect())
}

/// Zero-normalized cross-correlation; `None` when either window is flat.
pub fn zncc(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    // relative floor: windows whose variation is pure rounding noise are flat
    let floor = 1e-12 * n * (ma * ma + mb * mb + 1.0);
    if saa <= floor || sbb <= floor {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisplacementConfig {
    /// Window side in pixels.
    pub window: usize,
    /// Maximum integer offset searched along each axis.
    pub search: usize,
    /// Spacing of the output grid in input pixels.
    pub step: usize,
    pub min_peak: f64,
}

impl Default for DisplacementConfig {
    fn default() -> Self {
        DisplacementConfig { window: 15, search: 5, step: 4, min_peak: 0.5 }
    }
}

/// Two-band displacement raster in world units on a step-spaced grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementMap {
    pub dx: DsmRaster,
    pub dy: DsmRaster,
    pub peak: DsmRaster,
}

impl DisplacementMap {
    /// Displacement projected on a horizontal azimuth (radians from +x
    /// towards +y).
    pub fn along_azimuth(&self, azimuth: f64) -> DsmRaster {
        let (s, c) = azimuth.sin_cos();
        let mut out = self.dx.clone();
        for i in 0..out.grid.len() {
            let (col, row) = (i % out.grid.width, i / out.grid.width);
            let v = match (self.dx.get(col, row), self.dy.get(col, row)) {
                (Some(dx), Some(dy)) => Some(c * dx + s * dy),
                _ => None,
            };
            out.set(col, row, v);
        }
        out
    }
}

fn window_values(img: &GrayImage, x0: i64, y0: i64, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * w);
    for y in 0..w as i64 {
        for x in 0..w as i64 {
            out.push(img.get((x0 + x) as usize, (y0 + y) as usize) as f64);
        }
    }
    out
}

fn parabola_offset(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    }
}

/// Finds, for windows of `a` on a step-spaced grid, the offset at which `b`
/// correlates best (integer search plus per-axis parabolic refinement). A
/// feature at pixel `p` in `a` appears at `p + d` in `b`; `d` is reported in
/// world units (`dy` world = −row offset).
pub fn displacement_map(
    a: &GrayImage,
    b: &GrayImage,
    grid: &GeoGrid,
    cfg: &DisplacementConfig,
) -> Result<DisplacementMap> {
    if a.width != b.width || a.height != b.height || a.width != grid.width || a.height != grid.height {
        return Err(Error::SizeMismatch { expected: grid.len(), found: b.width * b.height });
    }
    if cfg.window < 3 || cfg.step == 0 {
        return Err(Error::InvalidConfig("displacement window must be >= 3 and step >= 1".into()));
    }
    let half = (cfg.window / 2) as i64;
    let margin = half + cfg.search as i64 + 1;
    let first = margin;
    let count = |len: usize| {
        let last = len as i64 - 1 - margin - (cfg.window as i64 - 1 - half);
        if last < first {
            0
        } else {
            ((last - first) / cfg.step as i64 + 1) as usize
        }
    };
    let (nx, ny) = (count(a.width), count(a.height));
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidConfig("images too small for the displacement window and search".into()));
    }
    let cs = grid.cell_size;
    let step = cfg.step as f64;
    let (ox, oy) = grid.cell_to_world(first as f64, first as f64);
    let out_grid = GeoGrid::new(nx, ny, ox - 0.5 * step * cs, oy + 0.5 * step * cs, step * cs, -9999.0)?;
    let s = cfg.search as i64;
    let side = (2 * s + 1) as usize;
    let cells: Vec<Option<(f64, f64, f64)>> = (0..nx * ny)
        .into_par_iter()
        .map(|i| {
            let cx = first + (i % nx) as i64 * cfg.step as i64;
            let cy = first + (i / nx) as i64 * cfg.step as i64;
            let t = window_values(a, cx - half, cy - half, cfg.window);
            let mut scores = vec![f64::NAN; side * side];
            for v in -s..=s {
                for u in -s..=s {
                    let w = window_values(b, cx + u - half, cy + v - half, cfg.window);
                    if let Some(r) = zncc(&t, &w) {
                        scores[((v + s) as usize) * side + (u + s) as usize] = r;
                    }
                }
            }
            let (best, peak) = scores.iter().enumerate().filter(|(_, v)| !v.is_nan()).fold(
                None,
                |acc: Option<(usize, f64)>, (k, v)| match acc {
                    Some((_, bv)) if bv >= *v => acc,
                    _ => Some((k, *v)),
                },
            )?;
            if peak < cfg.min_peak {
                return None;
            }
            let (bu, bv) = ((best % side) as i64, (best / side) as i64);
            if peak >= 1.0 - 1e-9 {
                // identical windows: the integer offset is exact, and the
                // parabola would be pulled off by texture asymmetry
                return Some(((bu - s) as f64 * cs, -((bv - s) as f64) * cs, peak));
            }
            let at = |u: i64, v: i64| {
                if u < 0 || v < 0 || u >= side as i64 || v >= side as i64 {
                    return None;
                }
                let r = scores[v as usize * side + u as usize];
                (!r.is_nan()).then_some(r)
            };
            let sub_u = match (at(bu - 1, bv), at(bu + 1, bv)) {
                (Some(l), Some(r)) => parabola_offset(l, peak, r),
                _ => 0.0,
            };
            let sub_v = match (at(bu, bv - 1), at(bu, bv + 1)) {
                (Some(l), Some(r)) => parabola_offset(l, peak, r),
                _ => 0.0,
            };
            let du = (bu - s) as f64 + sub_u;
            let dv = (bv - s) as f64 + sub_v;
            Some((du * cs, -dv * cs, peak))
        })
        .collect();
    let band = |f: fn(&(f64, f64, f64)) -> f64| {
        DsmRaster::new(out_grid, cells.iter().map(|c| c.as_ref().map_or(-9999.0, |v| f(v) as f32)).collect())
    };
    Ok(DisplacementMap { dx: band(|v| v.0)?, dy: band(|v| v.1)?, peak: band(|v| v.2)? })
}

/// Sparse DSM: mean elevation of the points falling in each cell.
pub fn rasterize_points(points: &[Vector3<f64>], grid: &GeoGrid) -> DsmRaster {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for p in points {
        if !grid.contains(p.x, p.y) {
            continue;
        }
        let (c, r) = grid.world_to_cell(p.x, p.y);
        let (c, r) = (
            c.round().clamp(0.0, (grid.width - 1) as f64) as usize,
            r.round().clamp(0.0, (grid.height - 1) as f64) as usize,
        );
        let e = acc.entry(r * grid.width + c).or_insert((0.0, 0));
        e.0 += p.z;
        e.1 += 1;
    }
    let mut out = DsmRaster::filled(*grid, grid.nodata);
    for (i, (sum, n)) in acc {
        out.set(i % grid.width, i / grid.width, Some(sum / n as f64));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cameras::{ImageEntry, Transformed};
    use crate::features::test_pattern;
    use crate::transforms::Helmert3D;
    use std::sync::Arc;

    fn bumpy() -> DsmRaster {
        let grid = GeoGrid::new(60, 50, -30.0, 25.0, 1.0, -9999.0).unwrap();
        DsmRaster::from_fn(grid, |c, r| 10.0 + ((c as f32) * 0.3).sin() * 3.0 + ((r as f32) * 0.2).cos() * 2.0)
    }

    #[test]
    fn point_dod_measures_offset_points() {
        let dsm = bumpy();
        let grid = GeoGrid::new(12, 10, -30.0, 25.0, 5.0, -9999.0).unwrap();
        // points anywhere inside the cells, lifted by 1.5 over the surface
        // beneath them; three share the first cell
        let mut pts: Vec<Vector3<f64>> = (0..grid.len())
            .step_by(3)
            .map(|i| {
                let (x, y) = grid.cell_center(i % grid.width, i / grid.width);
                let (x, y) = (x + 1.7, y - 0.9);
                Vector3::new(x, y, dsm.height_at(x, y).unwrap() + 1.5)
            })
            .collect();
        let cells = pts.len();
        for (dx, lift) in [(-2.0, 0.5), (-1.0, 2.5)] {
            let (x, y) = grid.cell_center(0, 0);
            pts.push(Vector3::new(x + dx, y, dsm.height_at(x + dx, y).unwrap() + lift));
        }
        let (raster, stats) = point_dod(&pts, &dsm, &grid).unwrap();
        assert_eq!(stats.valid_cell_count, cells);
        assert!((stats.mean - 1.5).abs() < 1e-4 && stats.std < 1e-4);
        assert!((raster.get(0, 0).unwrap() - 1.5).abs() < 1e-4);
        assert_eq!(raster.valid_count(), cells);
        assert!(matches!(point_dod(&[], &dsm, &grid), Err(Error::NoOverlap)));
    }

    #[test]
    fn dod_self_and_offset() {
        let d = bumpy();
        let (_, s) = dod(&d, &d).unwrap();
        assert_eq!((s.mean, s.std, s.mean_abs), (0.0, 0.0, 0.0));
        let mut up = d.clone();
        for v in up.elevations_mut() {
            *v += 2.0;
        }
        let (_, s) = dod(&d, &up).unwrap();
        assert!((s.mean + 2.0).abs() < 1e-6 && s.std < 1e-6 && (s.mean_abs - 2.0).abs() < 1e-6);
    }

    #[test]
    fn dod_of_helmert_round_trip() {
        let d = Arc::new(bumpy());
        let h = Helmert3D::from_euler(1.3, 0.02, -0.01, 0.8, Vector3::new(50.0, -20.0, 4.0));
        let there = Transformed::new(Arc::clone(&d), h);
        let back = Transformed::new(there, h.inverse());
        let (_, s) = dod(&back, &d).unwrap();
        assert!(s.mean_abs <= 1e-3, "{s:?}");
        assert!(s.valid_cell_count > 2000);
    }

    #[test]
    fn dod_antisymmetric_on_shared_grid() {
        let a = bumpy();
        let b = DsmRaster::from_fn(a.grid, |c, r| (c as f32 * 0.1 + r as f32 * 0.05).sin() * 4.0);
        let (_, ab) = dod(&a, &b).unwrap();
        let (_, ba) = dod(&b, &a).unwrap();
        assert!((ab.mean + ba.mean).abs() < 1e-9);
        assert!((ab.std - ba.std).abs() < 1e-6 && (ab.mean_abs - ba.mean_abs).abs() < 1e-6);
    }

    #[test]
    fn dod_disjoint() {
        let a = bumpy();
        let far = DsmRaster::filled(GeoGrid::new(10, 10, 1000.0, 1000.0, 1.0, -9999.0).unwrap(), 1.0);
        assert!(matches!(dod(&a, &far), Err(Error::NoOverlap)));
    }

    fn block(pixels: GrayImage, h: f64, f: f64) -> EpochBlock {
        let cam = FraserCamera::pinhole(f, pixels.width, pixels.height);
        let grid = GeoGrid::new(200, 200, -100.0, 100.0, 1.0, -9999.0).unwrap();
        EpochBlock {
            epoch_id: "e".into(),
            cameras: BTreeMap::from([("c".into(), cam)]),
            images: vec![ImageEntry {
                image_id: "i".into(),
                camera_id: "c".into(),
                pose: Pose::nadir(Vector3::new(0.0, 0.0, h)),
                pixels: Some(Arc::new(pixels)),
            }],
            dsm: Arc::new(DsmRaster::filled(grid, 0.0)),
            dsm_transform: Helmert3D::identity(),
        }
    }

    #[test]
    fn flat_nadir_orthophoto_reproduces_image() {
        // H / f = 1: image pixels and ground cells coincide
        let img = test_pattern(101, 101, 4);
        let b = block(img.clone(), 100.0, 100.0);
        let grid = GeoGrid::new(101, 101, -50.5, 50.5, 1.0, -9999.0).unwrap();
        let e = &b.images[0];
        let ortho = orthorectify(&img, &b.cameras["c"], &e.pose, &b.surface(), &grid).unwrap();
        for y in 0..101 {
            for x in 0..101 {
                assert!((ortho.get(x, y) as i32 - img.get(x, y) as i32).abs() <= 1);
            }
        }
        let mosaic = orthomosaic(&b, &grid).unwrap();
        assert_eq!(mosaic, ortho);
    }

    #[test]
    fn ortho_outside_footprint_and_constant() {
        let img = GrayImage::from_fn(50, 50, |_, _| 77);
        let b = block(img.clone(), 100.0, 100.0);
        let grid = GeoGrid::new(100, 100, -50.0, 50.0, 1.0, -9999.0).unwrap();
        let ortho = orthorectify(&img, &b.cameras["c"], &b.images[0].pose, &b.surface(), &grid).unwrap();
        assert_eq!(ortho.get(0, 0), 0);
        assert_eq!(ortho.get(50, 50), 77);
        assert!(ortho.pixels.iter().all(|v| *v == 0 || *v == 77));
        let far = GeoGrid::new(10, 10, 5000.0, 5000.0, 1.0, -9999.0).unwrap();
        assert!(matches!(
            orthorectify(&img, &b.cameras["c"], &b.images[0].pose, &b.surface(), &far),
            Err(Error::NoOverlap)
        ));
    }

    fn shifted(img: &GrayImage, dx: i64, dy: i64) -> GrayImage {
        GrayImage::from_fn(img.width, img.height, |x, y| {
            let (sx, sy) = (x as i64 - dx, y as i64 - dy);
            if sx < 0 || sy < 0 || sx >= img.width as i64 || sy >= img.height as i64 {
                0
            } else {
                img.get(sx as usize, sy as usize)
            }
        })
    }

    #[test]
    fn displacement_self_and_shift() {
        let img = test_pattern(96, 96, 6);
        let grid = GeoGrid::new(96, 96, 0.0, 96.0, 0.5, -9999.0).unwrap();
        let cfg = DisplacementConfig::default();
        let same = displacement_map(&img, &img, &grid, &cfg).unwrap();
        assert!(same.dx.valid_values().all(|v| v == 0.0));
        assert!(same.dy.valid_values().all(|v| v == 0.0));
        let moved = displacement_map(&img, &shifted(&img, 3, -2), &grid, &cfg).unwrap();
        assert!(moved.dx.valid_count() > 100);
        for v in moved.dx.valid_values() {
            assert!((v - 1.5).abs() <= 0.2 * 0.5, "{v}");
        }
        for v in moved.dy.valid_values() {
            assert!((v - 1.0).abs() <= 0.2 * 0.5, "{v}");
        }
    }

    #[test]
    fn displacement_textureless_is_nodata() {
        let img = GrayImage::from_fn(64, 64, |_, _| 100);
        let grid = GeoGrid::new(64, 64, 0.0, 64.0, 1.0, -9999.0).unwrap();
        let m = displacement_map(&img, &img, &grid, &DisplacementConfig::default()).unwrap();
        assert_eq!(m.dx.valid_count(), 0);
    }

    #[test]
    fn zncc_cases() {
        let a: Vec<f64> = (0..64).map(|i| ((i * 37) % 17) as f64).collect();
        assert!((zncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| 255.0 - v).collect();
        assert!((zncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let gain: Vec<f64> = a.iter().map(|v| 3.0 * v + 10.0).collect();
        assert!((zncc(&a, &gain).unwrap() - 1.0).abs() < 1e-12);
        assert!(zncc(&a, &[5.0; 64]).is_none());
    }

    #[test]
    fn checkpoint_translation_and_exclusion() {
        let mut b = block(GrayImage::new(200, 200), 100.0, 100.0);
        let mut second = b.images[0].clone();
        second.image_id = "j".into();
        second.pose = Pose::nadir(Vector3::new(30.0, 0.0, 100.0));
        b.images.push(second);
        let mut points = Vec::new();
        for k in 0..15 {
            let g = Vector3::new(k as f64 * 2.0 - 10.0, (k % 4) as f64 * 5.0 - 8.0, 0.0);
            let obs = b
                .images
                .iter()
                .map(|img| (img.image_id.clone(), b.cameras["c"].project(&img.pose, &g).unwrap()))
                .collect();
            points.push(CheckPoint { id: format!("p{k}"), reference_ground: g, observations: obs });
        }
        let r = checkpoint_accuracy(&points, &b).unwrap();
        assert!(r.mean_abs().iter().all(|v| *v < 1e-9));
        let mut moved = b.clone();
        for img in &mut moved.images {
            img.pose.center += Vector3::new(1.0, 0.0, 0.0);
        }
        points[3].observations.truncate(1);
        let r = checkpoint_accuracy(&points, &moved).unwrap();
        assert!((r.x.mean - 1.0).abs() < 1e-9 && r.x.std < 1e-9);
        assert_eq!(r.used, 14);
        assert_eq!(r.excluded.len(), 1);
        assert_eq!(r.excluded[0].0, "p3");
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let pts = vec![CheckPoint {
            id: "a".into(),
            reference_ground: Vector3::new(1.5, -2.0, 3.25),
            observations: vec![("img1".into(), Vector2::new(10.5, 20.0)), ("img2".into(), Vector2::new(1.0, 2.0))],
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cp.txt");
        write_checkpoints(&pts, &p).unwrap();
        assert_eq!(read_checkpoints(&p).unwrap(), pts);
        std::fs::write(&p, "img 1 2\n").unwrap();
        assert!(read_checkpoints(&p).is_err());
    }

    #[test]
    fn rasterize_means() {
        let grid = GeoGrid::new(4, 4, 0.0, 4.0, 1.0, -9999.0).unwrap();
        let r = rasterize_points(
            &[Vector3::new(0.5, 3.5, 2.0), Vector3::new(0.6, 3.4, 4.0), Vector3::new(9.0, 9.0, 1.0)],
            &grid,
        );
        assert_eq!(r.get(0, 0), Some(3.0));
        assert_eq!(r.valid_count(), 1);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dod_is_antisymmetric(fa in 0.05f32..0.5, fb in 0.05f32..0.5, amp in 0.1f32..20.0, lift in -50.0f32..50.0) {
                let grid = GeoGrid::new(40, 30, -20.0, 15.0, 1.0, -9999.0).unwrap();
                let a = DsmRaster::from_fn(grid, |c, r| (c as f32 * fa).sin() * amp + r as f32 * 0.1);
                let b = DsmRaster::from_fn(grid, |c, r| (r as f32 * fb).cos() * 3.0 + lift + c as f32 * 0.05);
                let (ab_map, ab) = dod(&a, &b).unwrap();
                let (ba_map, ba) = dod(&b, &a).unwrap();
                prop_assert_eq!(ab.valid_cell_count, ba.valid_cell_count);
                prop_assert!((ab.mean + ba.mean).abs() < 1e-6);
                prop_assert!((ab.std - ba.std).abs() < 1e-6 && (ab.mean_abs - ba.mean_abs).abs() < 1e-6);
                for (u, v) in ab_map.valid_values().zip(ba_map.valid_values()) {
                    prop_assert_eq!(u, -v);
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn displacement_recovers_shifts(seed in 0u64..1000, dx in -5i64..=5, dy in -5i64..=5, cell in 0.25f64..2.0) {
                let img = test_pattern(96, 96, seed);
                let grid = GeoGrid::new(96, 96, 0.0, 96.0 * cell, cell, -9999.0).unwrap();
                let m = displacement_map(&img, &shifted(&img, dx, dy), &grid, &DisplacementConfig::default()).unwrap();
                prop_assert!(m.dx.valid_count() > 50);
                // image rows grow southwards, world y northwards
                for v in m.dx.valid_values() {
                    prop_assert!((v - dx as f64 * cell).abs() <= 0.2 * cell, "{v}");
                }
                for v in m.dy.valid_values() {
                    prop_assert!((v + dy as f64 * cell).abs() <= 0.2 * cell, "{v}");
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn checkpoint_errors_follow_block_translation(t in prop::array::uniform3(-5.0f64..5.0)) {
                let b = block(GrayImage::new(200, 200), 100.0, 100.0);
                let points: Vec<CheckPoint> = (0..12)
                    .map(|k| {
                        let g = Vector3::new(k as f64 * 3.0 - 15.0, (k % 4) as f64 * 6.0 - 9.0, (k % 3) as f64);
                        let pixel = b.cameras["c"].project(&b.images[0].pose, &g).unwrap();
                        let mut second = b.images[0].pose;
                        second.center.x += 20.0;
                        let other = b.cameras["c"].project(&second, &g).unwrap();
                        CheckPoint { id: format!("p{k}"), reference_ground: g, observations: vec![("i".into(), pixel), ("j".into(), other)] }
                    })
                    .collect();
                let mut two = b.clone();
                let mut second = two.images[0].clone();
                second.image_id = "j".into();
                second.pose.center.x += 20.0;
                two.images.push(second);
                let before = checkpoint_accuracy(&points, &two).unwrap();
                let mut moved = two.clone();
                for img in &mut moved.images {
                    img.pose.center += Vector3::from(t);
                }
                let after = checkpoint_accuracy(&points, &moved).unwrap();
                for (axis, (moved_axis, base_axis)) in [(&after.x, &before.x), (&after.y, &before.y), (&after.z, &before.z)].into_iter().enumerate() {
                    prop_assert!((moved_axis.mean - base_axis.mean - t[axis]).abs() < 1e-6, "axis {axis}: {} vs {}", moved_axis.mean, base_axis.mean);
                }
            }
        }
    }
}
