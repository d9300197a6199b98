//! Ground-truth multi-epoch scenes: fractal terrain, procedural texture,
//! rendered nadir blocks, and the transforms, tie points and check points
//! needed to score every stage.
//!
//! Geometry is built in a canonical frame. Each epoch is delivered in its own
//! frame, related to the canonical one by a known Helmert transform, with
//! perturbed poses and optionally a miscalibrated camera, changed scene
//! regions, or a shifted flight pattern.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{write_tie_points, Observation, TieKind, TiePoint};
use crate::cameras::{
    apply_helmert_to_pose, EpochBlock, FraserCamera, ImageEntry, OrientationFile, Pose, Surface, Transformed,
};
use crate::error::{Error, Result};
use crate::evaluation::{write_checkpoints, CheckPoint};
use crate::rasters::{write_gray, write_raster, DsmRaster, GeoGrid, GrayImage};
use crate::transforms::Helmert3D;

fn hash01(x: i64, y: i64, seed: u64) -> f64 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ seed.wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (x0, y0) = (gx.floor(), gy.floor());
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(gx - x0), s(gy - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = hash01(ix, iy, seed);
    let v10 = hash01(ix + 1, iy, seed);
    let v01 = hash01(ix, iy + 1, seed);
    let v11 = hash01(ix + 1, iy + 1, seed);
    (v00 * (1.0 - sx) + v10 * sx) * (1.0 - sy) + (v01 * (1.0 - sx) + v11 * sx) * sy
}

/// Three-octave value noise in [0, 1]; `unit` sets the finest feature size
/// (about three units).
pub fn texture(x: f64, y: f64, unit: f64, seed: u64) -> f64 {
    0.5 * value_noise(x, y, 16.0 * unit, seed ^ 1)
        + 0.3 * value_noise(x, y, 7.0 * unit, seed ^ 2)
        + 0.2 * value_noise(x, y, 3.0 * unit, seed ^ 3)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerrainSpec {
    /// The grid has 2^levels + 1 cells per side.
    pub levels: u32,
    pub cell_size: f64,
    /// Peak-to-peak elevation range.
    pub relief: f64,
    /// Amplitude decay per subdivision level, in (0, 1).
    pub roughness: f64,
    pub seed: u64,
    /// Box-shaped surface objects (buildings) per square kilometre.
    pub object_density: f64,
    /// Object height range.
    pub object_height: [f64; 2],
    /// Object footprint side range.
    pub object_size: [f64; 2],
}

impl Default for TerrainSpec {
    fn default() -> Self {
        TerrainSpec {
            levels: 8,
            cell_size: 2.5,
            relief: 40.0,
            roughness: 0.55,
            seed: 1,
            object_density: 600.0,
            object_height: [4.0, 15.0],
            object_size: [8.0, 30.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlightSpec {
    /// Flying height above the mean terrain.
    pub height: f64,
    pub forward_overlap: f64,
    pub side_overlap: f64,
    pub strips: usize,
    pub images_per_strip: usize,
    pub focal_px: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Random roll/pitch/yaw of the true poses, degrees.
    pub attitude_jitter_deg: f64,
}

impl Default for FlightSpec {
    fn default() -> Self {
        FlightSpec {
            height: 300.0,
            forward_overlap: 0.6,
            side_overlap: 0.6,
            strips: 3,
            images_per_strip: 3,
            focal_px: 300.0,
            image_width: 256,
            image_height: 256,
            attitude_jitter_deg: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpochSpec {
    pub id: String,
    /// Canonical frame → this epoch's frame.
    pub helmert: Helmert3D,
    /// Each delivered pose is rotated by exactly this angle about a random axis.
    pub rotation_noise_deg: f64,
    /// Each delivered center is moved by exactly this distance (canonical units).
    pub position_noise: f64,
    /// Approximate share of the block area whose texture and relief change.
    pub change_fraction: f64,
    /// Radial distortion of the true camera missing from the delivered one.
    pub k1_error: f64,
    /// Horizontal offset of the flight pattern.
    pub offset: [f64; 2],
    pub heading_deg: f64,
    pub seed: u64,
}

impl Default for EpochSpec {
    fn default() -> Self {
        EpochSpec {
            id: "e0".into(),
            helmert: Helmert3D::identity(),
            rotation_noise_deg: 0.0,
            position_noise: 0.0,
            change_fraction: 0.0,
            k1_error: 0.0,
            offset: [0.0, 0.0],
            heading_deg: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub terrain: TerrainSpec,
    pub texture_seed: u64,
    /// Texture feature unit in canonical world units.
    pub texture_unit: f64,
    pub flight: FlightSpec,
    /// The last epoch is the reference.
    pub epochs: Vec<EpochSpec>,
    pub tie_points_per_epoch: usize,
    pub tie_noise_px: f64,
    pub check_points: usize,
    pub check_noise_px: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            terrain: TerrainSpec::default(),
            texture_seed: 7,
            texture_unit: 1.0,
            flight: FlightSpec::default(),
            epochs: vec![
                EpochSpec { id: "e0".into(), offset: [20.0, -15.0], seed: 11, ..EpochSpec::default() },
                EpochSpec { id: "e1".into(), seed: 12, ..EpochSpec::default() },
            ],
            tie_points_per_epoch: 300,
            tie_noise_px: 0.5,
            check_points: 30,
            check_noise_px: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::SpecInvalid(m.to_string()));
        let t = &self.terrain;
        if !(2..=12).contains(&t.levels) || !(t.cell_size > 0.0) || !(t.relief >= 0.0) {
            return bad("terrain needs 2..=12 levels, cell_size > 0 and relief >= 0");
        }
        if !(t.roughness > 0.0 && t.roughness < 1.0) {
            return bad("roughness must be in (0, 1)");
        }
        if !(t.object_density >= 0.0)
            || !(0.0 <= t.object_height[0] && t.object_height[0] <= t.object_height[1])
            || !(0.0 < t.object_size[0] && t.object_size[0] <= t.object_size[1])
        {
            return bad("object density must be >= 0 and object ranges ordered and positive");
        }
        let f = &self.flight;
        for o in [f.forward_overlap, f.side_overlap] {
            if !(o > 0.0 && o < 1.0) {
                return bad("overlaps must be in (0, 1)");
            }
        }
        if f.strips * f.images_per_strip == 0 {
            return bad("image count must be >= 1");
        }
        if !(f.height > 0.0 && f.focal_px > 0.0) || f.image_width < 32 || f.image_height < 32 {
            return bad("flight height and focal must be > 0 and images at least 32 px");
        }
        if self.epochs.is_empty() {
            return bad("at least one epoch is required");
        }
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.epochs {
            if !ids.insert(e.id.as_str()) || e.id.is_empty() || e.id.contains(char::is_whitespace) {
                return bad("epoch ids must be unique, non-empty and without whitespace");
            }
            if !(e.helmert.lambda > 0.0) || !(0.0..=1.0).contains(&e.change_fraction) {
                return bad("epoch scale must be > 0 and change fraction in [0, 1]");
            }
            if !(e.rotation_noise_deg >= 0.0 && e.position_noise >= 0.0) {
                return bad("pose noise must be >= 0");
            }
        }
        if !(self.texture_unit > 0.0) || !(self.tie_noise_px >= 0.0) || !(self.check_noise_px >= 0.0) {
            return bad("texture unit must be > 0 and noise levels >= 0");
        }
        Ok(())
    }

    /// Ground footprint side of one image at the nominal height.
    pub fn footprint(&self) -> (f64, f64) {
        let f = &self.flight;
        (f.image_width as f64 * f.height / f.focal_px, f.image_height as f64 * f.height / f.focal_px)
    }

    /// Nominal ground sampling distance in canonical units.
    pub fn gsd(&self) -> f64 {
        self.flight.height / self.flight.focal_px
    }
}

/// Midpoint-displacement (diamond–square) terrain centred on the origin,
/// scaled to the requested peak-to-peak relief with zero mean.
pub fn fractal_terrain(spec: &TerrainSpec) -> DsmRaster {
    let n = (1usize << spec.levels) + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut h = vec![0.0f64; n * n];
    let idx = |x: usize, y: usize| y * n + x;
    for (x, y) in [(0, 0), (n - 1, 0), (0, n - 1), (n - 1, n - 1)] {
        h[idx(x, y)] = rng.random_range(-1.0..1.0);
    }
    let mut step = n - 1;
    let mut amp = 1.0;
    while step > 1 {
        let half = step / 2;
        for y in (half..n).step_by(step) {
            for x in (half..n).step_by(step) {
                let avg = (h[idx(x - half, y - half)]
                    + h[idx(x + half, y - half)]
                    + h[idx(x - half, y + half)]
                    + h[idx(x + half, y + half)])
                    / 4.0;
                h[idx(x, y)] = avg + amp * rng.random_range(-1.0..1.0);
            }
        }
        for y in (0..n).step_by(half) {
            let start = if (y / half).is_multiple_of(2) { half } else { 0 };
            for x in (start..n).step_by(step) {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                if x >= half {
                    sum += h[idx(x - half, y)];
                    cnt += 1.0;
                }
                if x + half < n {
                    sum += h[idx(x + half, y)];
                    cnt += 1.0;
                }
                if y >= half {
                    sum += h[idx(x, y - half)];
                    cnt += 1.0;
                }
                if y + half < n {
                    sum += h[idx(x, y + half)];
                    cnt += 1.0;
                }
                h[idx(x, y)] = sum / cnt + amp * rng.random_range(-1.0..1.0);
            }
        }
        amp *= spec.roughness;
        step = half;
    }
    let (lo, hi) = h.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    let side = n as f64 * spec.cell_size;
    let grid = GeoGrid::new(n, n, -side / 2.0, side / 2.0, spec.cell_size, -9999.0).expect("valid terrain grid");
    let mut dsm = DsmRaster::new(grid, h.iter().map(|v| ((v - mean) / span * spec.relief) as f32).collect())
        .expect("sized terrain");
    let count = (spec.object_density * (side / 1000.0).powi(2)).round() as usize;
    for _ in 0..count {
        let cx = rng.random_range(-side / 2.0..side / 2.0);
        let cy = rng.random_range(-side / 2.0..side / 2.0);
        let a = 0.5 * rng.random_range(spec.object_size[0]..=spec.object_size[1]);
        let b = 0.5 * rng.random_range(spec.object_size[0]..=spec.object_size[1]);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let height = rng.random_range(spec.object_height[0]..=spec.object_height[1]);
        let (cos, sin) = (angle.cos(), angle.sin());
        let reach = a.hypot(b);
        let (c0, r0) = grid.world_to_cell(cx - reach, cy + reach);
        let (c1, r1) = grid.world_to_cell(cx + reach, cy - reach);
        let clamp = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
        // the roof is flat at the terrain height under the object's center
        let Some(base) = dsm.sample_bilinear(cx, cy) else { continue };
        let roof = base + height;
        for r in clamp(r0, n - 1)..=clamp(r1, n - 1) {
            for c in clamp(c0, n - 1)..=clamp(c1, n - 1) {
                let (x, y) = grid.cell_center(c, r);
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                if u.abs() <= a && v.abs() <= b {
                    let z = dsm.get(c, r).unwrap_or(0.0);
                    dsm.set(c, r, Some(z.max(roof)));
                }
            }
        }
    }
    dsm
}

/// A disc of changed texture and relief.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeRegion {
    pub center: [f64; 2],
    pub radius: f64,
    pub bump: f64,
    pub texture_seed: u64,
}

impl ChangeRegion {
    fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.center[0]).hypot(y - self.center[1]) < self.radius
    }

    fn relief(&self, x: f64, y: f64) -> f64 {
        let d = (x - self.center[0]).hypot(y - self.center[1]) / self.radius;
        if d < 1.0 {
            self.bump * (1.0 - d * d).powi(2)
        } else {
            0.0
        }
    }
}

/// The canonical scene as one epoch saw it.
#[derive(Debug, Clone)]
pub struct EpochWorld {
    pub terrain: DsmRaster,
    pub changes: Vec<ChangeRegion>,
    pub texture_seed: u64,
    pub texture_unit: f64,
}

impl EpochWorld {
    pub fn gray_at(&self, x: f64, y: f64) -> u8 {
        let seed = self.changes.iter().find(|c| c.contains(x, y)).map_or(self.texture_seed, |c| c.texture_seed);
        (texture(x, y, self.texture_unit, seed) * 255.0).round().clamp(0.0, 255.0) as u8
    }

    pub fn changed(&self, x: f64, y: f64) -> bool {
        self.changes.iter().any(|c| c.contains(x, y))
    }
}

/// Ground truth and delivered data for one epoch.
#[derive(Debug, Clone)]
pub struct SyntheticEpoch {
    /// Delivered block: epoch frame, perturbed poses, nominal camera.
    pub block: EpochBlock,
    /// True poses in the canonical frame, in block image order.
    pub true_poses: Vec<Pose>,
    pub true_camera: FraserCamera,
    /// Canonical → epoch frame.
    pub helmert: Helmert3D,
    /// Intra-epoch tie points with noisy observations; ground in epoch frame.
    pub intra_ties: Vec<TiePoint>,
    /// Check points seen by this epoch; reference ground in the reference
    /// epoch's frame.
    pub check_points: Vec<CheckPoint>,
    pub world: EpochWorld,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub epochs: Vec<SyntheticEpoch>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochTruth {
    pub epoch_id: String,
    pub helmert: Helmert3D,
    pub camera: FraserCamera,
    pub images: Vec<crate::cameras::ImageRecord>,
    pub changes: Vec<ChangeRegion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneTruth {
    pub reference_epoch: String,
    pub gsd: f64,
    pub epochs: Vec<EpochTruth>,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rotates a pose by exactly `angle` about a random axis and moves its
/// center by exactly `distance` in a random direction.
pub fn perturb_pose(pose: &Pose, angle: f64, distance: f64, rng: &mut ChaCha8Rng) -> Pose {
    let axis = Unit::new_normalize(random_unit(rng));
    let dir = random_unit(rng);
    Pose::new(*Rotation3::from_axis_angle(&axis, angle).matrix() * pose.rotation, pose.center + dir * distance)
}

impl Scene {
    pub fn reference(&self) -> &SyntheticEpoch {
        self.epochs.last().expect("validated scene has epochs")
    }

    pub fn epoch(&self, id: &str) -> Option<&SyntheticEpoch> {
        self.epochs.iter().find(|e| e.block.epoch_id == id)
    }

    pub fn truth(&self) -> SceneTruth {
        SceneTruth {
            reference_epoch: self.reference().block.epoch_id.clone(),
            gsd: self.spec.gsd(),
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochTruth {
                    epoch_id: e.block.epoch_id.clone(),
                    helmert: e.helmert,
                    camera: e.true_camera,
                    images: {
                        let truth: Vec<ImageEntry> = e
                            .block
                            .images
                            .iter()
                            .zip(&e.true_poses)
                            .map(|(im, p)| ImageEntry { pose: *p, pixels: None, ..im.clone() })
                            .collect();
                        OrientationFile::from_parts(&BTreeMap::new(), &truth).images
                    },
                    changes: e.world.changes.clone(),
                })
                .collect(),
        }
    }

    /// Writes one directory per epoch (`orientation.json`, `dsm.bin/.json`,
    /// `images/<id>.pgm`, `ties.txt`, `checkpoints.txt`) plus `truth.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for e in &self.epochs {
            let ed = dir.join(&e.block.epoch_id);
            e.block.orientation().write(&ed.join("orientation.json"))?;
            write_raster(&e.block.dsm, &ed.join("dsm.bin"))?;
            for im in &e.block.images {
                if let Some(px) = &im.pixels {
                    write_gray(px, &ed.join("images").join(format!("{}.pgm", im.image_id)))?;
                }
            }
            write_tie_points(&e.intra_ties, &ed.join("ties.txt"))?;
            write_checkpoints(&e.check_points, &ed.join("checkpoints.txt"))?;
        }
        crate::io::write_json(&dir.join("truth.json"), &self.truth())?;
        crate::io::write_json(&dir.join("scene.json"), &self.spec)
    }
}

/// Builds the scene; identical specs give bit-identical scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let base = fractal_terrain(&spec.terrain);
    let (fw, fh) = spec.footprint();
    let f = &spec.flight;
    let dx = fw * (1.0 - f.forward_overlap);
    let dy = fh * (1.0 - f.side_overlap);
    let ref_helmert = spec.epochs.last().expect("validated").helmert;

    let mut epochs = Vec::with_capacity(spec.epochs.len());
    for es in &spec.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(es.seed ^ 0x5EED_0000_0000_0000);
        let heading = es.heading_deg.to_radians();
        let block_half =
            Vector2::new(0.5 * (dx * (f.images_per_strip - 1) as f64 + fw), 0.5 * (dy * (f.strips - 1) as f64 + fh));
        let center_xy = Vector2::new(es.offset[0], es.offset[1]);

        // changed regions inside the block area
        let mut changes = Vec::new();
        if es.change_fraction > 0.0 {
            let radius = 0.15 * fw.min(fh);
            let probe: Vec<Vector2<f64>> = (0..40)
                .flat_map(|i| (0..40).map(move |j| (i, j)))
                .map(|(i, j)| {
                    center_xy
                        + Vector2::new(
                            ((i as f64 + 0.5) / 40.0 * 2.0 - 1.0) * block_half.x,
                            ((j as f64 + 0.5) / 40.0 * 2.0 - 1.0) * block_half.y,
                        )
                })
                .collect();
            let covered = |ch: &[ChangeRegion]| {
                probe.iter().filter(|p| ch.iter().any(|c| c.contains(p.x, p.y))).count() as f64 / probe.len() as f64
            };
            while covered(&changes) < es.change_fraction {
                let c = center_xy
                    + Vector2::new(
                        rng.random_range(-1.0..1.0) * block_half.x,
                        rng.random_range(-1.0..1.0) * block_half.y,
                    );
                changes.push(ChangeRegion {
                    center: [c.x, c.y],
                    radius,
                    bump: rng.random_range(5.0..15.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                    texture_seed: rng.random::<u64>(),
                });
            }
        }
        let mut terrain = base.clone();
        if !changes.is_empty() {
            let grid = terrain.grid;
            terrain = DsmRaster::from_fn(grid, |c, r| {
                let (x, y) = grid.cell_center(c, r);
                let v = base.get(c, r).unwrap_or(0.0);
                (v + changes.iter().map(|ch| ch.relief(x, y)).sum::<f64>()) as f32
            });
        }
        let world = EpochWorld { terrain, changes, texture_seed: spec.texture_seed, texture_unit: spec.texture_unit };

        // true camera and poses in the canonical frame
        let nominal = FraserCamera::pinhole(f.focal_px, f.image_width, f.image_height);
        let true_camera = FraserCamera { k1: es.k1_error, ..nominal };
        let camera_id = format!("cam_{}", es.id);
        let (cos_h, sin_h) = (heading.cos(), heading.sin());
        let jitter = f.attitude_jitter_deg.to_radians();
        let mut true_poses = Vec::new();
        let mut image_ids = Vec::new();
        for s in 0..f.strips {
            for k in 0..f.images_per_strip {
                let local = Vector2::new(
                    (k as f64 - (f.images_per_strip - 1) as f64 / 2.0) * dx,
                    (s as f64 - (f.strips - 1) as f64 / 2.0) * dy,
                );
                let xy = center_xy + Vector2::new(cos_h * local.x - sin_h * local.y, sin_h * local.x + cos_h * local.y);
                let pose = Pose::nadir_with_heading(Vector3::new(xy.x, xy.y, f.height), heading);
                let r = Rotation3::from_euler_angles(
                    rng.random_range(-jitter..=jitter),
                    rng.random_range(-jitter..=jitter),
                    rng.random_range(-jitter..=jitter),
                );
                true_poses.push(Pose::new(r.matrix() * pose.rotation, pose.center));
                image_ids.push(format!("{}_s{}i{}", es.id, s, k));
            }
        }

        // rendering: texture lookup along the true rays
        let images: Vec<GrayImage> = true_poses.par_iter().map(|pose| render(&world, &true_camera, pose)).collect();

        // delivered orientation: epoch frame, perturbed
        let helmert = es.helmert;
        let angle = es.rotation_noise_deg.to_radians();
        let delivered: Vec<Pose> = true_poses
            .iter()
            .map(|p| {
                let noisy = perturb_pose(p, angle, es.position_noise, &mut rng);
                apply_helmert_to_pose(&noisy, &helmert)
            })
            .collect();

        let dsm = epoch_dsm(&world.terrain, &helmert)?;
        let block = EpochBlock {
            epoch_id: es.id.clone(),
            cameras: BTreeMap::from([(camera_id.clone(), nominal)]),
            images: image_ids
                .iter()
                .zip(&delivered)
                .zip(images)
                .map(|((id, pose), px)| ImageEntry {
                    image_id: id.clone(),
                    camera_id: camera_id.clone(),
                    pose: *pose,
                    pixels: Some(Arc::new(px)),
                })
                .collect(),
            dsm: Arc::new(dsm),
            dsm_transform: Helmert3D::identity(),
        };

        let observe = |g: &Vector3<f64>, noise: f64, rng: &mut ChaCha8Rng| -> Vec<(String, Vector2<f64>)> {
            let mut out = Vec::new();
            for (id, pose) in image_ids.iter().zip(&true_poses) {
                if let Ok(p) = true_camera.project(pose, g) {
                    if true_camera.in_sensor(&p) {
                        let n = Vector2::new(gauss(rng), gauss(rng)) * noise;
                        out.push((id.clone(), p + n));
                    }
                }
            }
            out
        };
        let sample_ground = |rng: &mut ChaCha8Rng| -> Option<Vector3<f64>> {
            let x = center_xy.x + rng.random_range(-1.0..1.0) * block_half.x;
            let y = center_xy.y + rng.random_range(-1.0..1.0) * block_half.y;
            world.terrain.sample_bilinear(x, y).map(|z| Vector3::new(x, y, z))
        };

        let mut intra_ties = Vec::new();
        let mut attempts = 0;
        while intra_ties.len() < spec.tie_points_per_epoch && attempts < 50 * spec.tie_points_per_epoch.max(1) {
            attempts += 1;
            let Some(g) = sample_ground(&mut rng) else { continue };
            let obs = observe(&g, spec.tie_noise_px, &mut rng);
            if obs.len() >= 2 {
                intra_ties.push(TiePoint {
                    id: format!("{}_t{:04}", es.id, intra_ties.len()),
                    kind: TieKind::Intra,
                    observations: obs
                        .into_iter()
                        .map(|(image_id, pixel)| Observation { image_id, pixel, weight: 1.0 })
                        .collect(),
                    ground: helmert.apply(&g),
                });
            }
        }

        let mut check_points = Vec::new();
        let mut attempts = 0;
        while check_points.len() < spec.check_points && attempts < 50 * spec.check_points.max(1) {
            attempts += 1;
            let Some(g) = sample_ground(&mut rng) else { continue };
            if world.changed(g.x, g.y) {
                continue;
            }
            let obs = observe(&g, spec.check_noise_px, &mut rng);
            if obs.len() >= 2 {
                check_points.push(CheckPoint {
                    id: format!("{}_c{:03}", es.id, check_points.len()),
                    reference_ground: ref_helmert.apply(&g),
                    observations: obs,
                });
            }
        }
        log::debug!("epoch {}: {} ties, {} check points", es.id, intra_ties.len(), check_points.len());
        epochs.push(SyntheticEpoch { block, true_poses, true_camera, helmert, intra_ties, check_points, world });
    }
    Ok(Scene { spec: spec.clone(), epochs })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Renders one image by intersecting every pixel ray with the terrain.
pub fn render(world: &EpochWorld, camera: &FraserCamera, pose: &Pose) -> GrayImage {
    let (w, h) = (camera.sensor[0], camera.sensor[1]);
    let rows: Vec<Vec<u8>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    camera
                        .backproject_ray(pose, &Vector2::new(x as f64, y as f64))
                        .ok()
                        .and_then(|ray| world.terrain.intersect(&ray))
                        .map_or(0, |g| world.gray_at(g.x, g.y))
                })
                .collect()
        })
        .collect();
    GrayImage::from_pixels(w, h, rows.concat()).expect("sized render")
}

/// Rasterizes a canonical terrain in an epoch frame (cell size scaled by λ).
pub fn epoch_dsm(terrain: &DsmRaster, helmert: &Helmert3D) -> Result<DsmRaster> {
    let (x0, y0, x1, y1) = terrain.grid.extent();
    let (zmin, zmax) = terrain.min_max().ok_or(Error::AllNodata)?;
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for x in [x0, x1] {
        for y in [y0, y1] {
            for z in [zmin, zmax] {
                let p = helmert.apply(&Vector3::new(x, y, z));
                lo = lo.inf(&p.xy());
                hi = hi.sup(&p.xy());
            }
        }
    }
    let cs = terrain.grid.cell_size * helmert.lambda;
    let width = ((hi.x - lo.x) / cs).ceil() as usize;
    let height = ((hi.y - lo.y) / cs).ceil() as usize;
    let grid = GeoGrid::new(width, height, lo.x, hi.y, cs, terrain.grid.nodata)?;
    let surface = Transformed::new(terrain, *helmert);
    let values: Vec<f32> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = grid.cell_center(i % width, i / width);
            surface.height_at(x, y).map_or(grid.nodata, |z| z as f32)
        })
        .collect();
    DsmRaster::new(grid, values)
}
