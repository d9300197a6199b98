//! Interior/exterior orientation, projection, ray–surface intersection.
//!
//! Poses map world to camera: `X_c = R (X - C)`. The camera looks along +z,
//! image x grows with camera x and image y with camera y. Pixel coordinates
//! put integer values on pixel centers.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasters::{DsmRaster, GrayImage};
use crate::transforms::{is_rotation, Helmert3D};

/// Fraser self-calibration model with all coefficients in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FraserCamera {
    pub focal_px: f64,
    /// Principal point (cx, cy).
    pub pp: [f64; 2],
    /// Sensor (width, height) in pixels.
    pub sensor: [usize; 2],
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
    #[serde(default)]
    pub b1: f64,
    #[serde(default)]
    pub b2: f64,
}

const UNDISTORT_MAX_ITER: usize = 20;
const UNDISTORT_TOL: f64 = 1e-6;

impl FraserCamera {
    /// Distortion-free camera with the principal point at the sensor center.
    pub fn pinhole(focal_px: f64, width: usize, height: usize) -> Self {
        FraserCamera {
            focal_px,
            pp: [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0],
            sensor: [width, height],
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            p1: 0.0,
            p2: 0.0,
            b1: 0.0,
            b2: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.sensor[0]
    }

    pub fn height(&self) -> usize {
        self.sensor[1]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0 && self.focal_px.is_finite()) {
            return Err(Error::InvalidConfig(format!("focal {} must be > 0", self.focal_px)));
        }
        let [w, h] = self.sensor;
        if w == 0 || h == 0 {
            return Err(Error::InvalidConfig("sensor must be non-empty".into()));
        }
        let [cx, cy] = self.pp;
        if !(cx >= 0.0 && cy >= 0.0 && cx <= w as f64 && cy <= h as f64) {
            return Err(Error::InvalidConfig(format!("principal point ({cx}, {cy}) outside sensor")));
        }
        let coeffs = [self.k1, self.k2, self.k3, self.p1, self.p2, self.b1, self.b2];
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig("distortion coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Distortion `(dx, dy)` at centered ideal coordinates.
    pub fn distortion(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dx = x * radial + self.p1 * (r2 + 2.0 * x * x) + 2.0 * self.p2 * x * y + self.b1 * x + self.b2 * y;
        let dy = y * radial + self.p2 * (r2 + 2.0 * y * y) + 2.0 * self.p1 * x * y;
        (dx, dy)
    }

    /// Centered ideal coordinates to pixel coordinates.
    pub fn ideal_to_pixel(&self, x: f64, y: f64) -> Vector2<f64> {
        let (dx, dy) = self.distortion(x, y);
        Vector2::new(x + dx + self.pp[0], y + dy + self.pp[1])
    }

    /// Inverts [`Self::ideal_to_pixel`] by fixed-point iteration.
    pub fn pixel_to_ideal(&self, pixel: &Vector2<f64>) -> Result<(f64, f64)> {
        let u = pixel.x - self.pp[0];
        let v = pixel.y - self.pp[1];
        let (mut x, mut y) = (u, v);
        for _ in 0..UNDISTORT_MAX_ITER {
            let (dx, dy) = self.distortion(x, y);
            let (nx, ny) = (u - dx, v - dy);
            let step = (nx - x).hypot(ny - y);
            x = nx;
            y = ny;
            if !step.is_finite() {
                break;
            }
            if step < UNDISTORT_TOL {
                return Ok((x, y));
            }
        }
        Err(Error::UndistortDiverged)
    }

    /// Projects a point given in the camera frame.
    pub fn project_camera_frame(&self, pc: &Vector3<f64>) -> Result<Vector2<f64>> {
        if !(pc.z > 0.0) {
            return Err(Error::BehindCamera);
        }
        let x = self.focal_px * pc.x / pc.z;
        let y = self.focal_px * pc.y / pc.z;
        Ok(self.ideal_to_pixel(x, y))
    }

    pub fn project(&self, pose: &Pose, ground: &Vector3<f64>) -> Result<Vector2<f64>> {
        self.project_camera_frame(&pose.to_camera(ground))
    }

    pub fn in_margin(&self, pixel: &Vector2<f64>) -> bool {
        let (w, h) = (self.sensor[0] as f64, self.sensor[1] as f64);
        pixel.x >= -w && pixel.x <= 2.0 * w && pixel.y >= -h && pixel.y <= 2.0 * h
    }

    pub fn in_sensor(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= self.sensor[0] as f64 - 1.0
            && pixel.y <= self.sensor[1] as f64 - 1.0
    }

    /// World ray through `pixel`.
    pub fn backproject_ray(&self, pose: &Pose, pixel: &Vector2<f64>) -> Result<Ray> {
        if !self.in_margin(pixel) {
            return Err(Error::OutsideSensor { x: pixel.x, y: pixel.y });
        }
        let (x, y) = self.pixel_to_ideal(pixel)?;
        let dir_cam = Vector3::new(x / self.focal_px, y / self.focal_px, 1.0);
        Ok(Ray::new(pose.center, pose.rotation.transpose() * dir_cam))
    }

    /// Camera for images resampled by `1/factor` (pixel centers stay aligned).
    pub fn downscaled(&self, factor: f64) -> FraserCamera {
        let s = 1.0 / factor;
        FraserCamera {
            focal_px: self.focal_px * s,
            pp: [(self.pp[0] + 0.5) * s - 0.5, (self.pp[1] + 0.5) * s - 0.5],
            sensor: [
                ((self.sensor[0] as f64) * s).floor().max(1.0) as usize,
                ((self.sensor[1] as f64) * s).floor().max(1.0) as usize,
            ],
            k1: self.k1 * factor.powi(2),
            k2: self.k2 * factor.powi(4),
            k3: self.k3 * factor.powi(6),
            p1: self.p1 * factor,
            p2: self.p2 * factor,
            b1: self.b1,
            b2: self.b2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// World to camera.
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Self {
        Pose { rotation, center }
    }

    /// Looking straight down, image x along world +x, image y along world -y.
    pub fn nadir(center: Vector3<f64>) -> Self {
        Pose { rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0), center }
    }

    /// Nadir pose rotated about the vertical by `heading` radians.
    pub fn nadir_with_heading(center: Vector3<f64>, heading: f64) -> Self {
        let yaw = *nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), heading).matrix();
        Pose { rotation: Pose::nadir(center).rotation * yaw.transpose(), center }
    }

    pub fn validate(&self) -> Result<()> {
        if !is_rotation(&self.rotation, 1e-9) {
            return Err(Error::InvalidConfig("pose rotation must be orthonormal with det +1".into()));
        }
        if !(self.center.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidConfig("pose center must be finite".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.center)
    }

    /// Viewing axis (+z of the camera) in world coordinates.
    pub fn axis(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::z()
    }
}

/// Moves a pose into the frame `X' = lambda R X + t`, so that projecting the
/// transformed point through the transformed pose gives the same pixel.
pub fn apply_helmert_to_pose(pose: &Pose, h: &Helmert3D) -> Pose {
    Pose { rotation: pose.rotation * h.rotation.transpose(), center: h.apply(&pose.center) }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Ray { origin, direction: direction.normalize() }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Axis-aligned bounds of a surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

/// A 2.5D surface that rays can hit.
pub trait Surface: Sync {
    fn intersect(&self, ray: &Ray) -> Option<Vector3<f64>>;
    fn bounds(&self) -> Option<Bounds>;

    /// Elevation under `(x, y)`, found with a vertical ray.
    fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let b = self.bounds()?;
        let top = b.max.z + 1.0 + 1e-3 * (b.max.z - b.min.z).abs();
        self.intersect(&Ray::new(Vector3::new(x, y, top), -Vector3::z())).map(|p| p.z)
    }
}

impl<S: Surface + ?Sized> Surface for &S {
    fn intersect(&self, ray: &Ray) -> Option<Vector3<f64>> {
        (**self).intersect(ray)
    }

    fn bounds(&self) -> Option<Bounds> {
        (**self).bounds()
    }

    fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        (**self).height_at(x, y)
    }
}

impl<S: Surface + ?Sized + Send> Surface for Arc<S> {
    fn intersect(&self, ray: &Ray) -> Option<Vector3<f64>> {
        (**self).intersect(ray)
    }

    fn bounds(&self) -> Option<Bounds> {
        (**self).bounds()
    }

    fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        (**self).height_at(x, y)
    }
}

impl Surface for DsmRaster {
    fn intersect(&self, ray: &Ray) -> Option<Vector3<f64>> {
        intersect_ray_dsm(ray, self)
    }

    fn bounds(&self) -> Option<Bounds> {
        let (zmin, zmax) = self.min_max()?;
        let (x0, y0, x1, y1) = self.grid.extent();
        Some(Bounds { min: Vector3::new(x0, y0, zmin), max: Vector3::new(x1, y1, zmax) })
    }

    fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        self.sample_bilinear(x, y)
    }
}

/// A surface expressed in another frame: `outer = helmert(inner)`.
///
/// This is how a co-registered DSM is represented: the raster stays in its
/// own frame and rays are mapped into it, so no resampling happens.
#[derive(Debug, Clone)]
pub struct Transformed<S> {
    pub inner: S,
    pub helmert: Helmert3D,
}

pub type CoregisteredDsm = Transformed<Arc<DsmRaster>>;

impl<S: Surface> Transformed<S> {
    pub fn new(inner: S, helmert: Helmert3D) -> Self {
        Transformed { inner, helmert }
    }
}

impl<S: Surface> Surface for Transformed<S> {
    fn intersect(&self, ray: &Ray) -> Option<Vector3<f64>> {
        let local =
            Ray::new(self.helmert.apply_inverse(&ray.origin), self.helmert.rotation.transpose() * ray.direction);
        self.inner.intersect(&local).map(|p| self.helmert.apply(&p))
    }

    fn bounds(&self) -> Option<Bounds> {
        let b = self.inner.bounds()?;
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for i in 0..8 {
            let corner = Vector3::new(
                if i & 1 == 0 { b.min.x } else { b.max.x },
                if i & 2 == 0 { b.min.y } else { b.max.y },
                if i & 4 == 0 { b.min.z } else { b.max.z },
            );
            let p = self.helmert.apply(&corner);
            min = min.inf(&p);
            max = max.sup(&p);
        }
        Some(Bounds { min, max })
    }
}

const BISECTION_STEPS: usize = 10;

/// Marches `ray` over the bilinear DSM surface in horizontal steps of one
/// cell, brackets the first above-to-below crossing, refines it with ten
/// bisection steps and a final linear interpolation inside the bracket.
pub fn intersect_ray_dsm(ray: &Ray, dsm: &DsmRaster) -> Option<Vector3<f64>> {
    let (zmin, zmax) = dsm.min_max()?;
    // pad the slab so the march starts strictly above and ends strictly
    // below the surface even when rounding lands exactly on it
    let pad = 1e-6 * (1.0f64).max(dsm.grid.cell_size).max(zmin.abs()).max(zmax.abs());
    let (zmin, zmax) = (zmin - pad, zmax + pad);
    let o = ray.origin;
    let d = ray.direction;

    // parameter range in which the ray is inside the elevation slab
    let (mut t0, mut t1) = if d.z.abs() < 1e-12 {
        if o.z < zmin || o.z > zmax {
            return None;
        }
        (0.0, f64::INFINITY)
    } else {
        let ta = (zmax - o.z) / d.z;
        let tb = (zmin - o.z) / d.z;
        (ta.min(tb).max(0.0), ta.max(tb))
    };
    if t1 < t0 {
        return None;
    }
    // clip to the grid footprint
    let (x0, y0, x1, y1) = dsm.grid.extent();
    for (orig, dir, lo, hi) in [(o.x, d.x, x0, x1), (o.y, d.y, y0, y1)] {
        if dir.abs() < 1e-15 {
            if orig < lo || orig > hi {
                return None;
            }
        } else {
            let ta = (lo - orig) / dir;
            let tb = (hi - orig) / dir;
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if !(t1 >= t0) || !t1.is_finite() {
        return None;
    }

    let gap = |t: f64| -> Option<f64> {
        let p = ray.at(t);
        dsm.sample_bilinear(p.x, p.y).map(|h| p.z - h)
    };

    let horizontal = d.x.hypot(d.y);
    let step = if horizontal > 1e-12 { dsm.grid.cell_size / horizontal } else { f64::INFINITY };
    let step = step.min(t1 - t0);

    let mut prev: Option<(f64, f64)> = None;
    let mut t = t0;
    loop {
        let g = gap(t);
        match (prev, g) {
            (_, Some(0.0)) => return Some(ray.at(t)),
            (Some((tp, gp)), Some(g)) if gp > 0.0 && g < 0.0 => {
                return Some(refine(&gap, ray, tp, gp, t, g));
            }
            _ => {}
        }
        prev = g.map(|g| (t, g));
        if t >= t1 || step <= 0.0 {
            return None;
        }
        t = (t + step).min(t1);
    }
}

fn refine(
    gap: &impl Fn(f64) -> Option<f64>,
    ray: &Ray,
    mut ta: f64,
    mut ga: f64,
    mut tb: f64,
    mut gb: f64,
) -> Vector3<f64> {
    for _ in 0..BISECTION_STEPS {
        let tm = 0.5 * (ta + tb);
        match gap(tm) {
            Some(gm) if gm > 0.0 => {
                ta = tm;
                ga = gm;
            }
            Some(gm) if gm < 0.0 => {
                tb = tm;
                gb = gm;
            }
            Some(_) => return ray.at(tm),
            None => break,
        }
    }
    ray.at(ta + ga * (tb - ta) / (ga - gb))
}

#[derive(Debug, Clone)]
pub struct ImageEntry {
    pub image_id: String,
    pub camera_id: String,
    pub pose: Pose,
    pub pixels: Option<Arc<GrayImage>>,
}

/// One acquisition campaign: cameras, oriented images and its DSM.
#[derive(Debug, Clone)]
pub struct EpochBlock {
    pub epoch_id: String,
    pub cameras: BTreeMap<String, FraserCamera>,
    pub images: Vec<ImageEntry>,
    pub dsm: Arc<DsmRaster>,
    /// Maps the DSM's own frame into the frame the poses live in.
    pub dsm_transform: Helmert3D,
}

impl EpochBlock {
    pub fn validate(&self) -> Result<()> {
        for cam in self.cameras.values() {
            cam.validate()?;
        }
        for img in &self.images {
            if !self.cameras.contains_key(&img.camera_id) {
                return Err(Error::UnknownCamera(img.camera_id.clone()));
            }
            img.pose.validate()?;
        }
        Ok(())
    }

    pub fn camera(&self, camera_id: &str) -> Result<&FraserCamera> {
        self.cameras.get(camera_id).ok_or_else(|| Error::UnknownCamera(camera_id.to_string()))
    }

    pub fn image(&self, image_id: &str) -> Result<&ImageEntry> {
        self.images.iter().find(|i| i.image_id == image_id).ok_or_else(|| Error::UnknownImage(image_id.to_string()))
    }

    pub fn camera_of(&self, image: &ImageEntry) -> Result<&FraserCamera> {
        self.camera(&image.camera_id)
    }

    pub fn surface(&self) -> CoregisteredDsm {
        Transformed::new(Arc::clone(&self.dsm), self.dsm_transform)
    }

    pub fn orientation(&self) -> OrientationFile {
        OrientationFile::from_parts(&self.cameras, &self.images)
    }
}

/// Ground distance between the rays of the central pixel and its right
/// neighbor, averaged over images whose rays hit the surface.
pub fn mean_gsd(block: &EpochBlock) -> Result<f64> {
    let surface = block.surface();
    let mut sum = 0.0;
    let mut n = 0usize;
    for img in &block.images {
        let cam = block.camera_of(img)?;
        if let Some(g) = image_gsd(cam, &img.pose, &surface) {
            sum += g;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidFootprint);
    }
    Ok(sum / n as f64)
}

pub fn image_gsd(cam: &FraserCamera, pose: &Pose, surface: &impl Surface) -> Option<f64> {
    let cx = ((cam.sensor[0] as f64 - 1.0) / 2.0).floor();
    let cy = ((cam.sensor[1] as f64 - 1.0) / 2.0).floor();
    let a = surface.intersect(&cam.backproject_ray(pose, &Vector2::new(cx, cy)).ok()?)?;
    let b = surface.intersect(&cam.backproject_ray(pose, &Vector2::new(cx + 1.0, cy)).ok()?)?;
    Some((a - b).norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub camera_id: String,
    #[serde(flatten)]
    pub camera: FraserCamera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub camera_id: String,
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub center: [f64; 3],
}

impl ImageRecord {
    pub fn pose(&self) -> Pose {
        Pose { rotation: Matrix3::from_row_slice(&self.rotation), center: Vector3::from(self.center) }
    }
}

/// Orientation file: camera table plus oriented images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientationFile {
    pub cameras: Vec<CameraRecord>,
    pub images: Vec<ImageRecord>,
}

impl OrientationFile {
    pub fn from_parts(cameras: &BTreeMap<String, FraserCamera>, images: &[ImageEntry]) -> Self {
        OrientationFile {
            cameras: cameras.iter().map(|(id, c)| CameraRecord { camera_id: id.clone(), camera: *c }).collect(),
            images: images
                .iter()
                .map(|img| {
                    let r = &img.pose.rotation;
                    ImageRecord {
                        image_id: img.image_id.clone(),
                        camera_id: img.camera_id.clone(),
                        rotation: [
                            r[(0, 0)],
                            r[(0, 1)],
                            r[(0, 2)],
                            r[(1, 0)],
                            r[(1, 1)],
                            r[(1, 2)],
                            r[(2, 0)],
                            r[(2, 1)],
                            r[(2, 2)],
                        ],
                        center: [img.pose.center.x, img.pose.center.y, img.pose.center.z],
                    }
                })
                .collect(),
        }
    }

    pub fn camera_map(&self) -> BTreeMap<String, FraserCamera> {
        self.cameras.iter().map(|c| (c.camera_id.clone(), c.camera)).collect()
    }

    pub fn image_entries(&self) -> Vec<ImageEntry> {
        self.images
            .iter()
            .map(|r| ImageEntry {
                image_id: r.image_id.clone(),
                camera_id: r.camera_id.clone(),
                pose: r.pose(),
                pixels: None,
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasters::GeoGrid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(h: f32) -> DsmRaster {
        DsmRaster::filled(GeoGrid::new(100, 100, -50.0, 50.0, 1.0, -9999.0).unwrap(), h)
    }

    fn distorted() -> FraserCamera {
        FraserCamera {
            k1: 1e-8,
            k2: -2e-14,
            k3: 1e-20,
            p1: 3e-6,
            p2: -2e-6,
            b1: 1e-3,
            b2: -5e-4,
            ..FraserCamera::pinhole(800.0, 1000, 800)
        }
    }

    fn oblique_pose() -> Pose {
        let r = *nalgebra::Rotation3::from_euler_angles(0.05, -0.03, 0.4).matrix();
        Pose::new(r * Pose::nadir(Vector3::zeros()).rotation, Vector3::new(10.0, -5.0, 500.0))
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = FraserCamera { pp: [510.0, 390.0], ..distorted() };
        let pose = Pose::nadir(Vector3::new(0.0, 0.0, 100.0));
        let px = cam.project(&pose, &Vector3::new(0.0, 0.0, 0.0)).unwrap();
        let undist = FraserCamera { pp: [510.0, 390.0], ..FraserCamera::pinhole(800.0, 1000, 800) };
        assert_eq!(undist.project(&pose, &Vector3::zeros()).unwrap(), Vector2::new(510.0, 390.0));
        // the distortion polynomial vanishes at the center as well
        assert!((px - Vector2::new(510.0, 390.0)).norm() < 1e-12);
    }

    #[test]
    fn pinhole_projection() {
        let cam = FraserCamera::pinhole(800.0, 1000, 800);
        let pose = Pose::new(Matrix3::identity(), Vector3::zeros());
        let p = Vector3::new(1.0, -2.0, 10.0);
        let px = cam.project(&pose, &p).unwrap();
        assert!((px.x - (80.0 + cam.pp[0])).abs() < 1e-12);
        assert!((px.y - (-160.0 + cam.pp[1])).abs() < 1e-12);
    }

    #[test]
    fn radial_shift_of_one_pixel() {
        let cam = FraserCamera { k1: 1e-9, ..FraserCamera::pinhole(1000.0, 4000, 4000) };
        let pose = Pose::new(Matrix3::identity(), Vector3::zeros());
        // ideal radius 1000 px along +x
        let px = cam.project(&pose, &Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert!((px.x - cam.pp[0] - 1001.0).abs() < 1e-9);
        assert!((px.y - cam.pp[1]).abs() < 1e-12);
    }

    #[test]
    fn behind_camera() {
        let cam = FraserCamera::pinhole(800.0, 1000, 800);
        let pose = Pose::nadir(Vector3::new(0.0, 0.0, 100.0));
        assert!(matches!(cam.project(&pose, &Vector3::new(0.0, 0.0, 200.0)), Err(Error::BehindCamera)));
    }

    #[test]
    fn principal_ray_is_viewing_axis() {
        let cam = FraserCamera::pinhole(800.0, 1000, 800);
        let pose = oblique_pose();
        let ray = cam.backproject_ray(&pose, &Vector2::new(cam.pp[0], cam.pp[1])).unwrap();
        assert!((ray.direction - pose.axis()).norm() < 1e-12);
    }

    #[test]
    fn round_trip_random_points() {
        let cam = distorted();
        let pose = oblique_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let g = Vector3::new(
                rng.random_range(-200.0..200.0),
                rng.random_range(-200.0..200.0),
                rng.random_range(-20.0..20.0),
            );
            let px = cam.project(&pose, &g).unwrap();
            if !cam.in_sensor(&px) {
                continue;
            }
            let ray = cam.backproject_ray(&pose, &px).unwrap();
            let to_point = (g - ray.origin).normalize();
            assert!((ray.direction - to_point).norm() < 1e-6);
            for t in [1.0, 100.0, 1e4] {
                let back = cam.project(&pose, &ray.at(t)).unwrap();
                assert!((back - px).norm() < 1e-4);
            }
            checked += 1;
        }
    }

    #[test]
    fn far_outside_margin_is_rejected() {
        let cam = FraserCamera::pinhole(800.0, 1000, 800);
        let pose = Pose::nadir(Vector3::new(0.0, 0.0, 100.0));
        assert!(matches!(cam.backproject_ray(&pose, &Vector2::new(5000.0, 10.0)), Err(Error::OutsideSensor { .. })));
    }

    #[test]
    fn diverging_undistortion() {
        let cam = FraserCamera { k1: 1e-3, ..FraserCamera::pinhole(800.0, 1000, 800) };
        assert!(matches!(cam.pixel_to_ideal(&Vector2::new(990.0, 790.0)), Err(Error::UndistortDiverged)));
    }

    #[test]
    fn vertical_ray_on_flat_dsm() {
        let dsm = flat(12.5);
        let p = intersect_ray_dsm(&Ray::new(Vector3::new(3.3, -4.2, 100.0), -Vector3::z()), &dsm).unwrap();
        assert!((p - Vector3::new(3.3, -4.2, 12.5)).norm() < 1e-9);
    }

    #[test]
    fn diagonal_ray_on_flat_dsm() {
        let dsm = flat(0.0);
        let ray = Ray::new(Vector3::new(0.0, 0.0, 10.0), Vector3::new(1.0, 0.0, -1.0));
        let p = intersect_ray_dsm(&ray, &dsm).unwrap();
        assert!((p - Vector3::new(10.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn nodata_region_has_no_hit() {
        let dsm = flat(-9999.0);
        assert!(intersect_ray_dsm(&Ray::new(Vector3::new(0.0, 0.0, 10.0), -Vector3::z()), &dsm).is_none());
    }

    #[test]
    fn ray_finds_first_crossing_on_relief() {
        // wall of height 20 at x >= 10
        let grid = GeoGrid::new(100, 10, 0.0, 5.0, 1.0, -9999.0).unwrap();
        let dsm = DsmRaster::from_fn(grid, |c, _| if c >= 20 { 20.0 } else { 0.0 });
        let ray = Ray::new(Vector3::new(0.0, 0.0, 30.0), Vector3::new(1.0, 0.0, -1.0));
        let p = intersect_ray_dsm(&ray, &dsm).unwrap();
        // the flat floor is hit first at x = 30 is behind the wall; the wall face comes at x ~ 19.5..20.5
        assert!(p.x > 19.0 && p.x < 21.0, "{p}");
        let h = dsm.sample_bilinear(p.x, p.y).unwrap();
        assert!((p.z - h).abs() < 1e-3);
    }

    #[test]
    fn helmert_pose_cases() {
        let cam = distorted();
        let pose = oblique_pose();
        let same = apply_helmert_to_pose(&pose, &Helmert3D::identity());
        assert_eq!(same, pose);
        let shift = Helmert3D::new(1.0, Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0));
        let moved = apply_helmert_to_pose(&pose, &shift);
        assert_eq!(moved.rotation, pose.rotation);
        assert!((moved.center - pose.center - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);

        let h = Helmert3D::from_euler(1.7, 0.1, -0.2, 2.5, Vector3::new(40.0, 5.0, -6.0));
        let moved = apply_helmert_to_pose(&pose, &h);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let g = Vector3::new(
                rng.random_range(-200.0..200.0),
                rng.random_range(-200.0..200.0),
                rng.random_range(-20.0..20.0),
            );
            let a = cam.project(&pose, &g).unwrap();
            let b = cam.project(&moved, &h.apply(&g)).unwrap();
            assert!((a - b).norm() < 1e-6);
        }
    }

    fn nadir_block(images: usize, dsm: DsmRaster, height: f64) -> EpochBlock {
        let cam = FraserCamera::pinhole(500.0, 201, 201);
        EpochBlock {
            epoch_id: "e".into(),
            cameras: BTreeMap::from([("c".to_string(), cam)]),
            images: (0..images)
                .map(|i| ImageEntry {
                    image_id: format!("i{i}"),
                    camera_id: "c".into(),
                    pose: Pose::nadir(Vector3::new(0.0, 0.0, height)),
                    pixels: None,
                })
                .collect(),
            dsm: Arc::new(dsm),
            dsm_transform: Helmert3D::identity(),
        }
    }

    #[test]
    fn gsd_of_nadir_image() {
        let one = nadir_block(1, flat(0.0), 250.0);
        let g = mean_gsd(&one).unwrap();
        assert!((g - 250.0 / 500.0).abs() < 1e-6);
        let two = nadir_block(2, flat(0.0), 250.0);
        assert!((mean_gsd(&two).unwrap() - g).abs() < 1e-12);
        let mut miss = nadir_block(2, flat(0.0), 250.0);
        for img in &mut miss.images {
            img.pose.center.x = 1e4;
        }
        assert!(matches!(mean_gsd(&miss), Err(Error::NoValidFootprint)));
    }

    #[test]
    fn transformed_surface_maps_hits() {
        let h = Helmert3D::from_euler(2.0, 0.0, 0.0, 0.7, Vector3::new(100.0, -20.0, 5.0));
        let surf = Transformed::new(flat(3.0), h);
        let p = surf.height_at(h.apply(&Vector3::new(1.0, 2.0, 3.0)).x, h.apply(&Vector3::new(1.0, 2.0, 3.0)).y);
        assert!((p.unwrap() - (2.0 * 3.0 + 5.0)).abs() < 1e-9);
    }

    #[test]
    fn orientation_json_shape() {
        let block = nadir_block(1, flat(0.0), 100.0);
        let file = block.orientation();
        let v = serde_json::to_value(&file).unwrap();
        let cam = &v["cameras"][0];
        for key in ["camera_id", "focal_px", "pp", "sensor", "k1", "k2", "k3", "p1", "p2", "b1", "b2"] {
            assert!(cam.get(key).is_some(), "{key}");
        }
        let img = &v["images"][0];
        assert_eq!(img["rotation"].as_array().unwrap().len(), 9);
        let back: OrientationFile = serde_json::from_value(v).unwrap();
        assert_eq!(back, file);
    }

    proptest! {
        #[test]
        fn intersection_lies_on_surface(
            seed in 0u64..1000,
            ox in -30.0f64..30.0, oy in -30.0f64..30.0,
            dx in -0.6f64..0.6, dy in -0.6f64..0.6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = GeoGrid::new(80, 80, -40.0, 40.0, 1.0, -9999.0).unwrap();
            let dsm = DsmRaster::from_fn(grid, |_, _| rng.random_range(0.0..8.0));
            let ray = Ray::new(Vector3::new(ox, oy, 50.0), Vector3::new(dx, dy, -1.0));
            if let Some(p) = intersect_ray_dsm(&ray, &dsm) {
                let h = dsm.sample_bilinear(p.x, p.y).unwrap();
                prop_assert!((p.z - h).abs() <= 1e-3 * grid.cell_size, "{} vs {}", p.z, h);
            }
        }

        #[test]
        fn projection_round_trip_over_sensor(px in 0.0f64..999.0, py in 0.0f64..799.0, t in 1.0f64..1e4) {
            let cam = distorted();
            let pose = oblique_pose();
            let pixel = Vector2::new(px, py);
            let ray = cam.backproject_ray(&pose, &pixel).unwrap();
            let back = cam.project(&pose, &ray.at(t)).unwrap();
            prop_assert!((back - pixel).norm() <= 1e-4);
        }
    }

    proptest! {
        #[test]
        fn helmert_pose_preserves_reprojection(
            scale in 0.3f64..3.0,
            roll in -0.3f64..0.3,
            pitch in -0.3f64..0.3,
            yaw in -3.1f64..3.1,
            t in prop::array::uniform3(-500.0f64..500.0),
            gx in -200.0f64..200.0,
            gy in -200.0f64..200.0,
            gz in -20.0f64..20.0,
        ) {
            let cam = distorted();
            let pose = oblique_pose();
            let h = Helmert3D::from_euler(scale, roll, pitch, yaw, Vector3::from(t));
            let moved = apply_helmert_to_pose(&pose, &h);
            let g = Vector3::new(gx, gy, gz);
            let a = cam.project(&pose, &g).unwrap();
            let b = cam.project(&moved, &h.apply(&g)).unwrap();
            prop_assert!((a - b).norm() < 1e-6, "{a} vs {b}");
        }
    }
}
