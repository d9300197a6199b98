//! Combined bundle adjustment over intra- and inter-epoch tie points with
//! Fraser self-calibration.
//!
//! Unknowns are pose increments (rotation as a left-multiplied rotation
//! vector, `R ← exp([ω]×) R`, and the center), interior parameters per
//! camera, optional per-image affine terms and the tie-point coordinates.
//! All unknowns are normalized so that a unit step moves image points by
//! roughly one pixel, which makes the additive Levenberg–Marquardt damping
//! isotropic. Tie points are eliminated with the Schur complement.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, SMatrix, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cameras::{apply_helmert_to_pose, EpochBlock, FraserCamera, ImageEntry, Pose, Ray};
use crate::error::{Error, Result};
use crate::transforms::{fit_helmert3d, Helmert3D};

/// Minimum angle between two rays for a point to be triangulable.
pub const MIN_RAY_ANGLE_DEG: f64 = 0.1;

/// Solves the multi-ray midpoint problem `min Σ dist²(X, ray_i)`.
pub fn triangulate_rays(rays: &[Ray]) -> Result<Vector3<f64>> {
    if rays.len() < 2 {
        return Err(Error::RaysNearParallel);
    }
    let min_cos = MIN_RAY_ANGLE_DEG.to_radians().cos();
    let spread = rays
        .iter()
        .enumerate()
        .any(|(i, a)| rays[i + 1..].iter().any(|b| a.direction.dot(&b.direction).abs() < min_cos));
    if !spread {
        return Err(Error::RaysNearParallel);
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for r in rays {
        let p = Matrix3::identity() - r.direction * r.direction.transpose();
        a += p;
        b += p * r.origin;
    }
    a.cholesky().map(|c| c.solve(&b)).ok_or(Error::RaysNearParallel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieKind {
    Intra,
    Inter,
}

impl TieKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TieKind::Intra => "intra",
            TieKind::Inter => "inter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image_id: String,
    pub pixel: Vector2<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiePoint {
    pub id: String,
    pub kind: TieKind,
    pub observations: Vec<Observation>,
    pub ground: Vector3<f64>,
}

impl TiePoint {
    pub fn multiplicity(&self) -> usize {
        self.observations.len()
    }
}

/// Tie-point file: one line per point,
/// `tiepoint_id kind n_obs {image_id x y weight}...`.
pub fn write_tie_points(points: &[TiePoint], path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in points {
        text.push_str(&format!("{} {} {}", p.id, p.kind.as_str(), p.observations.len()));
        for o in &p.observations {
            text.push_str(&format!(" {} {} {} {}", o.image_id, o.pixel.x, o.pixel.y, o.weight));
        }
        text.push('\n');
    }
    crate::io::write_text(path, &text)
}

pub fn read_tie_points(path: &Path) -> Result<Vec<TiePoint>> {
    let text = crate::io::read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() || toks[0].starts_with('#') {
            continue;
        }
        let bad = |why: &str| Error::parse(path, format!("line {}: {why}", n + 1));
        if toks.len() < 3 {
            return Err(bad("expected id, kind and observation count"));
        }
        let kind = match toks[1] {
            "intra" => TieKind::Intra,
            "inter" => TieKind::Inter,
            _ => return Err(bad("kind must be intra or inter")),
        };
        let count: usize = toks[2].parse().map_err(|_| bad("bad observation count"))?;
        if toks.len() != 3 + 4 * count {
            return Err(bad("observation count does not match the fields"));
        }
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad("bad number"));
        let observations = toks[3..]
            .chunks_exact(4)
            .map(|c| {
                Ok(Observation {
                    image_id: c[0].to_string(),
                    pixel: Vector2::new(num(c[1])?, num(c[2])?),
                    weight: num(c[3])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(TiePoint { id: toks[0].to_string(), kind, observations, ground: Vector3::zeros() });
    }
    Ok(out)
}

/// Which interior parameters are estimated for cameras of free epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InteriorFlags {
    pub focal: bool,
    pub pp: bool,
    pub k1: bool,
    pub k2: bool,
    pub k3: bool,
    pub p1: bool,
    pub p2: bool,
    pub b1: bool,
    pub b2: bool,
}

impl Default for InteriorFlags {
    fn default() -> Self {
        InteriorFlags { focal: true, pp: true, k1: true, k2: true, k3: true, p1: true, p2: true, b1: true, b2: true }
    }
}

impl InteriorFlags {
    pub fn none() -> Self {
        InteriorFlags {
            focal: false,
            pp: false,
            k1: false,
            k2: false,
            k3: false,
            p1: false,
            p2: false,
            b1: false,
            b2: false,
        }
    }

    /// Flags in interior-parameter order: f, cx, cy, k1, k2, k3, p1, p2, b1, b2.
    fn as_array(&self) -> [bool; N_INTERIOR] {
        [self.focal, self.pp, self.pp, self.k1, self.k2, self.k3, self.p1, self.p2, self.b1, self.b2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamPolicy {
    /// Epochs whose poses and cameras stay fixed.
    pub fixed_epochs: BTreeSet<String>,
    /// Interior parameters estimated for cameras of free epochs; images that
    /// share a camera id share these parameters.
    pub interior: InteriorFlags,
    /// Image-dependent affine terms b1, b2 (replace the camera's values).
    pub per_image_affine: bool,
    /// Multiplies the weight of inter-epoch observations.
    pub inter_weight: f64,
    /// Fix one pose and one more center coordinate when no epoch is fixed.
    pub free_network_datum: bool,
}

impl Default for ParamPolicy {
    fn default() -> Self {
        ParamPolicy {
            fixed_epochs: BTreeSet::new(),
            interior: InteriorFlags::default(),
            per_image_affine: false,
            inter_weight: 1.0,
            free_network_datum: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub damping_init: f64,
    /// Relative cost decrease below which an accepted step ends the solve.
    pub cost_tolerance: f64,
    /// Normalized step norm below which the solve ends.
    pub step_tolerance: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { max_iterations: 50, damping_init: 1e-3, cost_tolerance: 1e-10, step_tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaImage {
    pub image_id: String,
    pub camera_id: String,
    pub epoch_id: String,
    pub pose: Pose,
    /// Image-dependent (b1, b2) overriding the camera's affine terms.
    pub affine: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub cameras: BTreeMap<String, FraserCamera>,
    pub images: Vec<BaImage>,
    pub tie_points: Vec<TiePoint>,
    pub policy: ParamPolicy,
    pub settings: SolverSettings,
}

pub const N_INTERIOR: usize = 10;
/// Local Jacobian columns: ω(3), C(3), interior(10), X(3).
pub const OBS_COLS: usize = 6 + N_INTERIOR + 3;
const COL_INTERIOR: usize = 6;
const COL_POINT: usize = 16;

pub type ObsJacobian = SMatrix<f64, 2, OBS_COLS>;

/// Residual `project − measured` and its partial derivatives with respect
/// to the rotation increment, center, interior parameters
/// (f, cx, cy, k1, k2, k3, p1, p2, b1, b2) and ground point.
pub fn observation_jacobian(
    cam: &FraserCamera,
    pose: &Pose,
    ground: &Vector3<f64>,
    measured: &Vector2<f64>,
) -> Result<(Vector2<f64>, ObsJacobian)> {
    let pc = pose.to_camera(ground);
    if !(pc.z > 0.0) {
        return Err(Error::BehindCamera);
    }
    let f = cam.focal_px;
    let (u, v) = (pc.x / pc.z, pc.y / pc.z);
    let (x, y) = (f * u, f * v);
    let r2 = x * x + y * y;
    let rad = r2 * (cam.k1 + r2 * (cam.k2 + r2 * cam.k3));
    let drad = cam.k1 + r2 * (2.0 * cam.k2 + 3.0 * r2 * cam.k3);
    let (dx, dy) = cam.distortion(x, y);
    let residual = Vector2::new(x + dx + cam.pp[0] - measured.x, y + dy + cam.pp[1] - measured.y);

    // d pixel / d (x̄, ȳ)
    let dpx_dx = 1.0 + rad + 2.0 * x * x * drad + 6.0 * cam.p1 * x + 2.0 * cam.p2 * y + cam.b1;
    let dpx_dy = 2.0 * x * y * drad + 2.0 * cam.p1 * y + 2.0 * cam.p2 * x + cam.b2;
    let dpy_dx = 2.0 * x * y * drad + 2.0 * cam.p2 * x + 2.0 * cam.p1 * y;
    let dpy_dy = 1.0 + rad + 2.0 * y * y * drad + 6.0 * cam.p2 * y + 2.0 * cam.p1 * x;
    let d_ideal = nalgebra::Matrix2::new(dpx_dx, dpx_dy, dpy_dx, dpy_dy);
    // d (x̄, ȳ) / d Xc
    let d_proj = SMatrix::<f64, 2, 3>::new(f / pc.z, 0.0, -x / pc.z, 0.0, f / pc.z, -y / pc.z);
    let d_pc = d_ideal * d_proj;

    let mut j = ObsJacobian::zeros();
    let skew = pc.cross_matrix();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_pc * -skew));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(d_pc * -pose.rotation));
    j.fixed_view_mut::<2, 3>(0, COL_POINT).copy_from(&(d_pc * pose.rotation));

    let df = d_ideal * Vector2::new(u, v);
    let cols: [[f64; 2]; N_INTERIOR] = [
        [df.x, df.y],
        [1.0, 0.0],
        [0.0, 1.0],
        [x * r2, y * r2],
        [x * r2 * r2, y * r2 * r2],
        [x * r2 * r2 * r2, y * r2 * r2 * r2],
        [r2 + 2.0 * x * x, 2.0 * x * y],
        [2.0 * x * y, r2 + 2.0 * y * y],
        [x, 0.0],
        [y, 0.0],
    ];
    for (k, c) in cols.iter().enumerate() {
        j[(0, COL_INTERIOR + k)] = c[0];
        j[(1, COL_INTERIOR + k)] = c[1];
    }
    Ok((residual, j))
}

fn interior_values(c: &FraserCamera) -> [f64; N_INTERIOR] {
    [c.focal_px, c.pp[0], c.pp[1], c.k1, c.k2, c.k3, c.p1, c.p2, c.b1, c.b2]
}

fn set_interior(c: &mut FraserCamera, k: usize, v: f64) {
    match k {
        0 => c.focal_px = v,
        1 => c.pp[0] = v,
        2 => c.pp[1] = v,
        3 => c.k1 = v,
        4 => c.k2 = v,
        5 => c.k3 = v,
        6 => c.p1 = v,
        7 => c.p2 = v,
        8 => c.b1 = v,
        _ => c.b2 = v,
    }
}

/// Unit of each normalized interior parameter: the change that moves a
/// point at the sensor corner by about one pixel.
fn interior_scales(c: &FraserCamera) -> [f64; N_INTERIOR] {
    let r = 0.5 * (c.sensor[0] as f64).hypot(c.sensor[1] as f64);
    [1.0, 1.0, 1.0, r.powi(-3), r.powi(-5), r.powi(-7), r.powi(-2), r.powi(-2), 1.0 / r, 1.0 / r]
}

/// Where each unknown lives in the reduced (camera-side) parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    pose: Vec<[Option<usize>; 6]>,
    interior: BTreeMap<String, [Option<usize>; N_INTERIOR]>,
    affine: Vec<[Option<usize>; 2]>,
    scales: Vec<f64>,
    world_scale: f64,
    n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    CostConverged,
    StepConverged,
    MaxIterations,
    DampingExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub initial_rms: f64,
    pub final_rms: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
    pub behind_camera: usize,
    pub free_parameters: usize,
    pub tie_points: usize,
    pub observations: usize,
    pub settings: SolverSettings,
}

/// Reprojection residuals of the whole problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    /// Weighted `project − measured`, two rows per observation in tie-point
    /// and observation order; masked observations contribute zeros.
    pub weighted: DVector<f64>,
    /// Unweighted pixel residual norms² summed over valid observations.
    pub pixel_sq_sum: f64,
    pub valid: usize,
    pub behind_camera: usize,
}

impl Residuals {
    pub fn cost(&self) -> f64 {
        self.weighted.norm_squared()
    }

    /// Per-coordinate pixel RMS.
    pub fn rms(&self) -> f64 {
        if self.valid == 0 {
            0.0
        } else {
            (self.pixel_sq_sum / (2 * self.valid) as f64).sqrt()
        }
    }
}

/// Observation geometry gathered for one tie point.
struct PointTerms {
    /// Global camera-side indices touched by the point, sorted.
    idx: Vec<usize>,
    /// Jc^T Jc on `idx`.
    a: DMatrix<f64>,
    gc: DVector<f64>,
    /// Jc^T Jp.
    w: DMatrix<f64>,
    c: Matrix3<f64>,
    gp: Vector3<f64>,
}

impl BaProblem {
    /// Builds a problem from epoch blocks; every block's epoch id tags its
    /// images. Camera and image ids must be unique across blocks.
    pub fn from_blocks(
        blocks: &[EpochBlock],
        tie_points: Vec<TiePoint>,
        policy: ParamPolicy,
        settings: SolverSettings,
    ) -> Result<Self> {
        let mut cameras = BTreeMap::new();
        let mut images = Vec::new();
        let mut seen = BTreeSet::new();
        for b in blocks {
            b.validate()?;
            for (id, c) in &b.cameras {
                if let Some(prev) = cameras.insert(id.clone(), *c) {
                    if prev != *c {
                        return Err(Error::InvalidConfig(format!("camera id {id} differs between epochs")));
                    }
                }
            }
            for img in &b.images {
                if !seen.insert(img.image_id.clone()) {
                    return Err(Error::InvalidConfig(format!("duplicate image id {}", img.image_id)));
                }
                images.push(BaImage {
                    image_id: img.image_id.clone(),
                    camera_id: img.camera_id.clone(),
                    epoch_id: b.epoch_id.clone(),
                    pose: img.pose,
                    affine: None,
                });
            }
        }
        let problem = BaProblem { cameras, images, tie_points, policy, settings };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        let ids = self.image_index();
        for img in &self.images {
            if !self.cameras.contains_key(&img.camera_id) {
                return Err(Error::UnknownCamera(img.camera_id.clone()));
            }
        }
        for t in &self.tie_points {
            for o in &t.observations {
                if !ids.contains_key(o.image_id.as_str()) {
                    return Err(Error::UnknownImage(o.image_id.clone()));
                }
            }
        }
        if !(self.policy.inter_weight > 0.0) {
            return Err(Error::InvalidConfig("inter_weight must be > 0".into()));
        }
        Ok(())
    }

    pub fn image_index(&self) -> BTreeMap<&str, usize> {
        self.images.iter().enumerate().map(|(i, im)| (im.image_id.as_str(), i)).collect()
    }

    /// Camera model used for an image, with per-image affine terms applied.
    pub fn effective_camera(&self, image: usize) -> FraserCamera {
        let img = &self.images[image];
        let mut c = self.cameras[&img.camera_id];
        if let Some([b1, b2]) = img.affine {
            c.b1 = b1;
            c.b2 = b2;
        }
        c
    }

    fn obs_weight(&self, t: &TiePoint, o: &Observation) -> f64 {
        match t.kind {
            TieKind::Intra => o.weight,
            TieKind::Inter => o.weight * self.policy.inter_weight,
        }
    }

    /// Triangulates every tie point from the current orientations; points
    /// that cannot be triangulated are removed and their ids returned.
    pub fn initialize_points(&mut self) -> Vec<String> {
        let index = self.image_index();
        let grounds: Vec<Option<Vector3<f64>>> = self
            .tie_points
            .par_iter()
            .map(|t| {
                let rays = t
                    .observations
                    .iter()
                    .map(|o| {
                        let i = index[o.image_id.as_str()];
                        self.effective_camera(i).backproject_ray(&self.images[i].pose, &o.pixel)
                    })
                    .collect::<Result<Vec<_>>>()
                    .ok()?;
                triangulate_rays(&rays).ok()
            })
            .collect();
        let mut dropped = Vec::new();
        let mut kept = Vec::new();
        for (mut t, g) in std::mem::take(&mut self.tie_points).into_iter().zip(grounds) {
            match g {
                Some(g) => {
                    t.ground = g;
                    kept.push(t);
                }
                None => dropped.push(t.id),
            }
        }
        self.tie_points = kept;
        dropped
    }

    pub fn residuals(&self) -> Residuals {
        let index = self.image_index();
        let per_point: Vec<(Vec<f64>, f64, usize, usize)> = self
            .tie_points
            .par_iter()
            .map(|t| {
                let mut rows = Vec::with_capacity(2 * t.observations.len());
                let (mut sq, mut valid, mut behind) = (0.0, 0, 0);
                for o in &t.observations {
                    let i = index[o.image_id.as_str()];
                    let cam = self.effective_camera(i);
                    match cam.project(&self.images[i].pose, &t.ground) {
                        Ok(p) => {
                            let d = p - o.pixel;
                            let w = self.obs_weight(t, o);
                            rows.push(w * d.x);
                            rows.push(w * d.y);
                            sq += d.norm_squared();
                            valid += 1;
                        }
                        Err(_) => {
                            rows.extend([0.0, 0.0]);
                            behind += 1;
                        }
                    }
                }
                (rows, sq, valid, behind)
            })
            .collect();
        let mut weighted = Vec::new();
        let (mut sq, mut valid, mut behind) = (0.0, 0, 0);
        for (rows, s, v, b) in per_point {
            weighted.extend(rows);
            sq += s;
            valid += v;
            behind += b;
        }
        Residuals { weighted: DVector::from_vec(weighted), pixel_sq_sum: sq, valid, behind_camera: behind }
    }

    /// Per-tie-point reprojection RMS (pixels, per coordinate).
    pub fn point_rms(&self) -> Vec<f64> {
        let index = self.image_index();
        self.tie_points
            .iter()
            .map(|t| {
                let (mut sq, mut n) = (0.0, 0usize);
                for o in &t.observations {
                    let i = index[o.image_id.as_str()];
                    if let Ok(p) = self.effective_camera(i).project(&self.images[i].pose, &t.ground) {
                        sq += (p - o.pixel).norm_squared();
                        n += 1;
                    }
                }
                if n == 0 {
                    f64::INFINITY
                } else {
                    (sq / (2 * n) as f64).sqrt()
                }
            })
            .collect()
    }

    fn layout(&self) -> Layout {
        let fixed_image: Vec<bool> =
            self.images.iter().map(|im| self.policy.fixed_epochs.contains(&im.epoch_id)).collect();
        let mut pose_free: Vec<[bool; 6]> = fixed_image.iter().map(|f| [!f; 6]).collect();
        if self.policy.free_network_datum && !fixed_image.iter().any(|f| *f) && !self.images.is_empty() {
            pose_free[0] = [false; 6];
            let c0 = self.images[0].pose.center;
            let far = (1..self.images.len()).max_by(|&a, &b| {
                let da = (self.images[a].pose.center - c0).norm();
                let db = (self.images[b].pose.center - c0).norm();
                da.total_cmp(&db).then(b.cmp(&a))
            });
            if let Some(k) = far {
                let d = self.images[k].pose.center - c0;
                let axis = d.iamax();
                pose_free[k][3 + axis] = false;
            }
        }
        let fixed_cameras: BTreeSet<&str> =
            self.images.iter().zip(&fixed_image).filter(|(_, f)| **f).map(|(im, _)| im.camera_id.as_str()).collect();
        let affine_cameras: BTreeSet<&str> = self
            .images
            .iter()
            .zip(&fixed_image)
            .filter(|(im, f)| !**f && self.policy.per_image_affine && im.affine.is_some())
            .map(|(im, _)| im.camera_id.as_str())
            .collect();

        let mut scales = Vec::new();
        let next = |scale: f64, scales: &mut Vec<f64>| {
            scales.push(scale);
            Some(scales.len() - 1)
        };
        let (rot_scale, world_scale) = self.pose_scales();
        let mut pose = Vec::with_capacity(self.images.len());
        for free in &pose_free {
            let mut slots = [None; 6];
            for k in 0..6 {
                if free[k] {
                    slots[k] = next(if k < 3 { rot_scale } else { world_scale }, &mut scales);
                }
            }
            pose.push(slots);
        }
        let mut interior = BTreeMap::new();
        for (id, cam) in &self.cameras {
            let mut slots = [None; N_INTERIOR];
            if !fixed_cameras.contains(id.as_str()) {
                let flags = self.policy.interior.as_array();
                let sc = interior_scales(cam);
                for k in 0..N_INTERIOR {
                    let replaced_by_affine = k >= 8 && affine_cameras.contains(id.as_str());
                    if flags[k] && !replaced_by_affine {
                        slots[k] = next(sc[k], &mut scales);
                    }
                }
            }
            interior.insert(id.clone(), slots);
        }
        let mut affine = Vec::with_capacity(self.images.len());
        for (im, f) in self.images.iter().zip(&fixed_image) {
            let mut slots = [None; 2];
            if !f && self.policy.per_image_affine && im.affine.is_some() {
                let sc = interior_scales(&self.cameras[&im.camera_id]);
                slots[0] = next(sc[8], &mut scales);
                slots[1] = next(sc[9], &mut scales);
            }
            affine.push(slots);
        }
        let n = scales.len();
        Layout { pose, interior, affine, scales, world_scale, n }
    }

    /// Radians and world units that shift an image point by about a pixel.
    fn pose_scales(&self) -> (f64, f64) {
        let index = self.image_index();
        let (mut focal, mut depth, mut n) = (0.0, 0.0, 0usize);
        for t in &self.tie_points {
            for o in &t.observations {
                let i = index[o.image_id.as_str()];
                let z = self.images[i].pose.to_camera(&t.ground).z;
                if z > 0.0 {
                    depth += z;
                    focal += self.cameras[&self.images[i].camera_id].focal_px;
                    n += 1;
                }
            }
        }
        if n == 0 {
            let f = self.cameras.values().map(|c| c.focal_px).sum::<f64>() / self.cameras.len().max(1) as f64;
            return (1.0 / f.max(1.0), 1.0);
        }
        let f = focal / n as f64;
        (1.0 / f, depth / n as f64 / f)
    }

    /// Global camera-side index for each local Jacobian column of an
    /// observation in `image`.
    fn column_map(&self, layout: &Layout, image: usize) -> [Option<usize>; COL_POINT] {
        let mut map = [None; COL_POINT];
        map[..6].copy_from_slice(&layout.pose[image]);
        let cam = &layout.interior[&self.images[image].camera_id];
        map[COL_INTERIOR..COL_POINT].copy_from_slice(cam);
        if layout.affine[image][0].is_some() {
            map[COL_INTERIOR + 8] = layout.affine[image][0];
            map[COL_INTERIOR + 9] = layout.affine[image][1];
        }
        map
    }

    fn point_terms(&self, layout: &Layout, index: &BTreeMap<&str, usize>, t: &TiePoint) -> Option<PointTerms> {
        let mut rows: Vec<(Vector2<f64>, ObsJacobian, [Option<usize>; COL_POINT])> = Vec::new();
        for o in &t.observations {
            let i = index[o.image_id.as_str()];
            let cam = self.effective_camera(i);
            let Ok((r, mut j)) = observation_jacobian(&cam, &self.images[i].pose, &t.ground, &o.pixel) else {
                continue;
            };
            let map = self.column_map(layout, i);
            for (col, g) in map.iter().enumerate() {
                match g {
                    Some(g) => j.column_mut(col).scale_mut(layout.scales[*g]),
                    None => j.column_mut(col).fill(0.0),
                }
            }
            for col in COL_POINT..OBS_COLS {
                j.column_mut(col).scale_mut(layout.world_scale);
            }
            let w = self.obs_weight(t, o);
            rows.push((r * w, j * w, map));
        }
        if rows.is_empty() {
            return None;
        }
        let idx: Vec<usize> = rows
            .iter()
            .flat_map(|(_, _, m)| m.iter().flatten().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let pos: BTreeMap<usize, usize> = idx.iter().enumerate().map(|(k, g)| (*g, k)).collect();
        let k = idx.len();
        let mut a = DMatrix::zeros(k, k);
        let mut gc = DVector::zeros(k);
        let mut w = DMatrix::zeros(k, 3);
        let mut c = Matrix3::zeros();
        let mut gp = Vector3::zeros();
        for (r, j, map) in &rows {
            let jp = j.fixed_view::<2, 3>(0, COL_POINT);
            c += jp.transpose() * jp;
            gp += jp.transpose() * r;
            let cols: Vec<(usize, usize)> =
                map.iter().enumerate().filter_map(|(col, g)| g.map(|g| (col, pos[&g]))).collect();
            for &(ca, ka) in &cols {
                let ja = j.column(ca);
                gc[ka] += ja.dot(r);
                for &(cb, kb) in &cols {
                    a[(ka, kb)] += ja.dot(&j.column(cb));
                }
                let wa = jp.transpose() * ja;
                for d in 0..3 {
                    w[(ka, d)] += wa[d];
                }
            }
        }
        Some(PointTerms { idx, a, gc, w, c, gp })
    }

    fn linearize(&self, layout: &Layout) -> Vec<PointTerms> {
        let index = self.image_index();
        self.tie_points.par_iter().filter_map(|t| self.point_terms(layout, &index, t)).collect()
    }

    /// Dense Jacobian of the weighted residuals with respect to the
    /// normalized free parameters: camera-side columns first, then three
    /// columns per tie point.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let layout = self.layout();
        let index = self.image_index();
        let rows: usize = self.tie_points.iter().map(|t| 2 * t.observations.len()).sum();
        let mut jac = DMatrix::zeros(rows, layout.n + 3 * self.tie_points.len());
        let mut row = 0;
        for (p, t) in self.tie_points.iter().enumerate() {
            for o in &t.observations {
                let i = index[o.image_id.as_str()];
                if let Ok((_, j)) =
                    observation_jacobian(&self.effective_camera(i), &self.images[i].pose, &t.ground, &o.pixel)
                {
                    let w = self.obs_weight(t, o);
                    for (col, g) in self.column_map(&layout, i).iter().enumerate() {
                        if let Some(g) = g {
                            for d in 0..2 {
                                jac[(row + d, *g)] += w * j[(d, col)] * layout.scales[*g];
                            }
                        }
                    }
                    for d in 0..2 {
                        for c in 0..3 {
                            jac[(row + d, layout.n + 3 * p + c)] = w * j[(d, COL_POINT + c)] * layout.world_scale;
                        }
                    }
                }
                row += 2;
            }
        }
        jac
    }

    /// Applies a normalized step (camera side, then points) to a copy.
    fn stepped(&self, layout: &Layout, dc: &DVector<f64>, dp: &[Vector3<f64>]) -> BaProblem {
        let mut out = self.clone();
        let val = |g: Option<usize>| g.map_or(0.0, |g| dc[g] * layout.scales[g]);
        for (img, slots) in out.images.iter_mut().zip(&layout.pose) {
            let w = Vector3::new(val(slots[0]), val(slots[1]), val(slots[2]));
            if slots[..3].iter().any(|s| s.is_some()) {
                img.pose.rotation = *Rotation3::new(w).matrix() * img.pose.rotation;
            }
            for k in 0..3 {
                if let Some(g) = slots[3 + k] {
                    img.pose.center[k] += dc[g] * layout.scales[g];
                }
            }
        }
        for (id, slots) in &layout.interior {
            let cam = out.cameras.get_mut(id).expect("layout camera exists");
            let vals = interior_values(cam);
            for k in 0..N_INTERIOR {
                if let Some(g) = slots[k] {
                    set_interior(cam, k, vals[k] + dc[g] * layout.scales[g]);
                }
            }
        }
        for (img, slots) in out.images.iter_mut().zip(&layout.affine) {
            if let (Some(a), Some(g0), Some(g1)) = (img.affine.as_mut(), slots[0], slots[1]) {
                a[0] += dc[g0] * layout.scales[g0];
                a[1] += dc[g1] * layout.scales[g1];
            }
        }
        for (t, d) in out.tie_points.iter_mut().zip(dp) {
            t.ground += d * layout.world_scale;
        }
        out
    }

    /// Errors with `SingularNormalEquations` if the undamped reduced system
    /// has a (numerically) zero eigenvalue, i.e. an unconstrained gauge.
    pub fn check_gauge(&self) -> Result<()> {
        let layout = self.layout();
        let terms = self.linearize(&layout);
        let s = reduced_system(layout.n, &terms, 0.0).ok_or(Error::SingularNormalEquations)?.0;
        if layout.n == 0 {
            return Ok(());
        }
        let eig = s.symmetric_eigen().eigenvalues;
        let max = eig.iter().cloned().fold(0.0, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min <= GAUGE_EIGEN_RATIO * max {
            return Err(Error::SingularNormalEquations);
        }
        Ok(())
    }

    /// Levenberg–Marquardt; returns the refined problem and a report.
    pub fn solve_lm(&self) -> Result<(BaProblem, ConvergenceReport)> {
        self.validate()?;
        let mut current = self.clone();
        for img in &mut current.images {
            if current.policy.per_image_affine
                && img.affine.is_none()
                && !current.policy.fixed_epochs.contains(&img.epoch_id)
            {
                let c = current.cameras[&img.camera_id];
                img.affine = Some([c.b1, c.b2]);
            }
        }
        current.check_gauge()?;
        let layout = current.layout();
        let st = current.settings;

        let res0 = current.residuals();
        let mut cost = res0.cost();
        let mut report = ConvergenceReport {
            iterations: 0,
            accepted_steps: 0,
            rejected_steps: 0,
            initial_cost: cost,
            final_cost: cost,
            initial_rms: res0.rms(),
            final_rms: res0.rms(),
            cost_history: vec![cost],
            termination: Termination::MaxIterations,
            behind_camera: res0.behind_camera,
            free_parameters: layout.n + 3 * current.tie_points.len(),
            tie_points: current.tie_points.len(),
            observations: current.tie_points.iter().map(|t| t.observations.len()).sum(),
            settings: st,
        };
        let mut damping = st.damping_init;
        'outer: while report.iterations < st.max_iterations {
            report.iterations += 1;
            let terms = current.linearize(&layout);
            loop {
                let Some((dc, dp)) = solve_step(layout.n, &terms, damping) else {
                    damping *= 2.0;
                    report.rejected_steps += 1;
                    if damping > 1e32 {
                        report.termination = Termination::DampingExhausted;
                        break 'outer;
                    }
                    continue;
                };
                let norm = (dc.norm_squared() + dp.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
                if norm < st.step_tolerance {
                    report.termination = Termination::StepConverged;
                    break 'outer;
                }
                let candidate = current.stepped(&layout, &dc, &dp);
                let new_cost = candidate.residuals().cost();
                if new_cost.is_finite() && new_cost < cost {
                    let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    current = candidate;
                    cost = new_cost;
                    damping /= 3.0;
                    report.accepted_steps += 1;
                    report.cost_history.push(cost);
                    if rel < st.cost_tolerance {
                        report.termination = Termination::CostConverged;
                        break 'outer;
                    }
                    break;
                }
                damping *= 2.0;
                report.rejected_steps += 1;
                if damping > 1e32 {
                    report.termination = Termination::DampingExhausted;
                    break 'outer;
                }
            }
        }
        let fin = current.residuals();
        report.final_cost = fin.cost();
        report.final_rms = fin.rms();
        report.behind_camera = fin.behind_camera;
        Ok((current, report))
    }

    /// Shared interior first, then image-dependent affine terms released.
    pub fn solve_two_phase(&self) -> Result<(BaProblem, [ConvergenceReport; 2])> {
        let mut first = self.clone();
        first.policy.per_image_affine = false;
        let (solved, r1) = first.solve_lm()?;
        let mut second = solved;
        second.policy.per_image_affine = true;
        let (solved, r2) = second.solve_lm()?;
        Ok((solved, [r1, r2]))
    }

    /// Writes the solution back into epoch blocks. Images with their own
    /// affine terms get a dedicated camera entry `<camera>#<image>`.
    pub fn to_blocks(&self, blocks: &[EpochBlock]) -> Result<Vec<EpochBlock>> {
        let index = self.image_index();
        let mut out = Vec::with_capacity(blocks.len());
        for b in blocks {
            let mut nb = b.clone();
            let mut cameras = BTreeMap::new();
            let mut images: Vec<ImageEntry> = Vec::new();
            for img in &b.images {
                let i = *index.get(img.image_id.as_str()).ok_or_else(|| Error::UnknownImage(img.image_id.clone()))?;
                let bi = &self.images[i];
                let mut e = img.clone();
                e.pose = bi.pose;
                if bi.affine.is_some() {
                    e.camera_id = format!("{}#{}", bi.camera_id, bi.image_id);
                    cameras.insert(e.camera_id.clone(), self.effective_camera(i));
                } else {
                    cameras.insert(bi.camera_id.clone(), self.cameras[&bi.camera_id]);
                }
                images.push(e);
            }
            nb.cameras = cameras;
            nb.images = images;
            out.push(nb);
        }
        Ok(out)
    }

    /// Moves the whole solution by a Helmert transform.
    pub fn transformed(&self, h: &Helmert3D) -> BaProblem {
        let mut out = self.clone();
        for img in &mut out.images {
            img.pose = apply_helmert_to_pose(&img.pose, h);
        }
        for t in &mut out.tie_points {
            t.ground = h.apply(&t.ground);
        }
        out
    }
}

const GAUGE_EIGEN_RATIO: f64 = 1e-11;

/// Tie points per partial sum of the reduced system.
const REDUCE_CHUNK: usize = 64;

type ReducedSystem = (DMatrix<f64>, DVector<f64>, Vec<Matrix3<f64>>);

/// Reduced camera system `S δc = rhs` after eliminating the points with
/// damping `mu`; also returns each point's damped inverse block.
fn reduced_system(n: usize, terms: &[PointTerms], mu: f64) -> Option<ReducedSystem> {
    let cinv: Vec<Matrix3<f64>> =
        terms.iter().map(|t| (t.c + Matrix3::identity() * mu).try_inverse()).collect::<Option<_>>()?;
    // Fixed-size chunks summed in order: the result does not depend on how
    // many threads run or how the work is scheduled.
    let partials: Vec<(DMatrix<f64>, DVector<f64>)> = terms
        .par_chunks(REDUCE_CHUNK)
        .zip(cinv.par_chunks(REDUCE_CHUNK))
        .map(|(ts, cis)| {
            let mut s = DMatrix::<f64>::zeros(n, n);
            let mut rhs = DVector::<f64>::zeros(n);
            for (t, ci) in ts.iter().zip(cis) {
                let wc = &t.w * ci;
                let red = &t.a - &wc * t.w.transpose();
                let r = -&t.gc + &wc * t.gp;
                for (ka, &ga) in t.idx.iter().enumerate() {
                    rhs[ga] += r[ka];
                    for (kb, &gb) in t.idx.iter().enumerate() {
                        s[(ga, gb)] += red[(ka, kb)];
                    }
                }
            }
            (s, rhs)
        })
        .collect();
    let (s, rhs) =
        partials.into_iter().fold((DMatrix::zeros(n, n), DVector::zeros(n)), |(a, b), (c, d)| (a + c, b + d));
    let mut s = s;
    for k in 0..n {
        s[(k, k)] += mu;
    }
    Some((s, rhs, cinv))
}

fn solve_step(n: usize, terms: &[PointTerms], mu: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let (s, rhs, cinv) = reduced_system(n, terms, mu)?;
    let dc = if n == 0 { DVector::zeros(0) } else { s.cholesky()?.solve(&rhs) };
    if dc.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let dp = terms
        .iter()
        .zip(&cinv)
        .map(|(t, ci)| {
            let local = DVector::from_iterator(t.idx.len(), t.idx.iter().map(|g| dc[*g]));
            let wt = t.w.transpose() * local;
            ci * (-t.gp - Vector3::new(wt[0], wt[1], wt[2]))
        })
        .collect();
    Some((dc, dp))
}

/// Spatial thinning: in every image, each grid cell keeps the `cap` best
/// tie points (highest multiplicity, then lowest RMS, then id); a point
/// survives if any image keeps it. `rms[i]` belongs to `points[i]`.
pub fn reduce_matches(
    points: &[TiePoint],
    rms: &[f64],
    image_sizes: &BTreeMap<String, (usize, usize)>,
    grid: usize,
    cap: usize,
) -> Vec<TiePoint> {
    let grid = grid.max(1);
    let mut cells: BTreeMap<(&str, usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        for o in &p.observations {
            let Some(&(w, h)) = image_sizes.get(&o.image_id) else { continue };
            let cx = ((o.pixel.x / w as f64 * grid as f64).floor().max(0.0) as usize).min(grid - 1);
            let cy = ((o.pixel.y / h as f64 * grid as f64).floor().max(0.0) as usize).min(grid - 1);
            cells.entry((o.image_id.as_str(), cx, cy)).or_default().push(i);
        }
    }
    let mut keep = vec![false; points.len()];
    for members in cells.values_mut() {
        members.sort_by(|&a, &b| {
            points[b]
                .multiplicity()
                .cmp(&points[a].multiplicity())
                .then(rms[a].total_cmp(&rms[b]))
                .then(points[a].id.cmp(&points[b].id))
        });
        for &i in members.iter().take(cap) {
            keep[i] = true;
        }
    }
    points.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p.clone()).collect()
}

/// Fits the arbitrary → metric Helmert on anchor pairs and applies it to the
/// problem. Returns the identity untouched when a fixed epoch provides the
/// datum.
pub fn similarity_to_metric(
    problem: &BaProblem,
    anchors: &[(Vector3<f64>, Vector3<f64>)],
) -> Result<(BaProblem, Helmert3D)> {
    let fixed = problem.images.iter().any(|im| problem.policy.fixed_epochs.contains(&im.epoch_id));
    if fixed {
        return Ok((problem.clone(), Helmert3D::identity()));
    }
    let (a, b): (Vec<_>, Vec<_>) = anchors.iter().copied().unzip();
    let h = fit_helmert3d(&a, &b)?;
    Ok((problem.transformed(&h), h))
}
