//! Precise inter-epoch matching on the original images once the epochs share
//! a frame: patch matching on similarity-aligned tile pairs or keypoint
//! matching guided by DSM transfer, followed by a 3D Helmert RANSAC filter
//! and a cross-correlation check on aligned windows.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cameras::{FraserCamera, Pose, Surface};
use crate::error::{Error, Result};
use crate::evaluation::zncc;
use crate::features::{detect_and_describe, match_mutual_ratio_with, SiftConfig};
use crate::matcher::{PixelMatch, TileMatcher};
use crate::rasters::{crop, GrayImage, PixelRect};
use crate::rough_coreg::TilingSpec;
use crate::transforms::{fit_similarity2d, ransac_helmert3d, wrap_angle, Helmert3D, RansacConfig, Similarity2D};

/// An oriented image together with the surface its rays are cast onto.
#[derive(Clone, Copy)]
pub struct ImageView<'a> {
    pub image: &'a GrayImage,
    pub camera: &'a FraserCamera,
    pub pose: &'a Pose,
    pub surface: &'a dyn Surface,
}

impl ImageView<'_> {
    /// Ground point seen at `pixel`.
    pub fn lift(&self, pixel: &Vector2<f64>) -> Option<Vector3<f64>> {
        let ray = self.camera.backproject_ray(self.pose, pixel).ok()?;
        self.surface.intersect(&ray)
    }

    /// Transfers a pixel of this view into `other` through the surface.
    pub fn transfer(&self, pixel: &Vector2<f64>, other: &ImageView) -> Option<Vector2<f64>> {
        let g = self.lift(pixel)?;
        other.camera.project(other.pose, &g).ok()
    }

    fn size(&self) -> (usize, usize) {
        (self.image.width, self.image.height)
    }
}

/// A master tile and the similarity placing its resampled partner in the
/// secondary image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilePairing {
    /// Tile in the master image, without buffer.
    pub master_rect: PixelRect,
    /// Buffered tile clipped to the master image; tile coordinates are
    /// relative to its corner.
    pub tile_rect: PixelRect,
    /// Tile coordinates → secondary image pixels.
    pub similarity: Similarity2D,
    pub buffer: usize,
}

fn rect_corners(r: &PixelRect) -> [Vector2<f64>; 4] {
    let (x0, y0) = (r.x as f64, r.y as f64);
    let (x1, y1) = ((r.right() - 1) as f64, (r.bottom() - 1) as f64);
    [Vector2::new(x0, y0), Vector2::new(x1, y0), Vector2::new(x1, y1), Vector2::new(x0, y1)]
}

/// Projects the master tile corners through the surface into the secondary
/// image and fits the tile → secondary similarity. `None` when fewer than
/// three corners hit the surface or the buffered tile lands entirely outside
/// the secondary image.
pub fn predict_tile_pairing(
    master: &ImageView,
    secondary: &ImageView,
    master_rect: PixelRect,
    buffer: usize,
) -> Option<TilePairing> {
    let (w, h) = master.size();
    let tile_rect = master_rect.inflate(buffer).intersect(&PixelRect::new(0, 0, w, h))?;
    let origin = Vector2::new(tile_rect.x as f64, tile_rect.y as f64);
    let (src, dst): (Vec<_>, Vec<_>) =
        rect_corners(&master_rect).iter().filter_map(|c| Some((c - origin, master.transfer(c, secondary)?))).unzip();
    if src.len() < 3 {
        return None;
    }
    let similarity = fit_similarity2d(&src, &dst).ok()?;
    if !(similarity.scale > 0.0) {
        return None;
    }
    let tile_local = PixelRect::new(0, 0, tile_rect.width, tile_rect.height);
    let mapped: Vec<Vector2<f64>> = rect_corners(&tile_local).iter().map(|c| similarity.apply(c)).collect();
    let (sw, sh) = secondary.size();
    let min = mapped.iter().fold(Vector2::repeat(f64::INFINITY), |a, p| a.inf(p));
    let max = mapped.iter().fold(Vector2::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    if max.x < 0.0 || max.y < 0.0 || min.x > (sw - 1) as f64 || min.y > (sh - 1) as f64 {
        return None;
    }
    Some(TilePairing { master_rect, tile_rect, similarity, buffer })
}

/// One pairing per master tile that overlaps the secondary image.
pub fn pair_tiles(master: &ImageView, secondary: &ImageView, tiling: &TilingSpec, buffer: usize) -> Vec<TilePairing> {
    let (w, h) = master.size();
    tiling.tiles(w, h).into_iter().filter_map(|r| predict_tile_pairing(master, secondary, r, buffer)).collect()
}

/// Buffer of `fraction` × tile size, rounded.
pub fn buffer_pixels(tiling: &TilingSpec, fraction: f64) -> usize {
    (tiling.tile_size as f64 * fraction).round().max(0.0) as usize
}

/// Resamples the secondary image onto the tile grid (bilinear; 0 outside).
pub fn resample_secondary(secondary: &GrayImage, pairing: &TilePairing) -> GrayImage {
    let s = &pairing.similarity;
    GrayImage::from_fn(pairing.tile_rect.width, pairing.tile_rect.height, |u, v| {
        let p = s.apply(&Vector2::new(u as f64, v as f64));
        secondary.sample_bilinear(p.x, p.y).map_or(0, |g| g.round().clamp(0.0, 255.0) as u8)
    })
}

/// Sorts by master then secondary coordinates and drops exact duplicates.
fn canonical(mut matches: Vec<PixelMatch>) -> Vec<PixelMatch> {
    matches.sort_by(|a, b| {
        a.ya.total_cmp(&b.ya)
            .then(a.xa.total_cmp(&b.xa))
            .then(a.yb.total_cmp(&b.yb))
            .then(a.xb.total_cmp(&b.xb))
            .then(b.score.total_cmp(&a.score))
    });
    let mut seen = BTreeSet::new();
    matches.retain(|m| seen.insert(m.coord_bits()));
    matches
}

/// Matches every tile pairing; returns correspondences in full-image pixels,
/// keeping only those whose master point lies in the un-buffered tile and
/// whose secondary point lies in the secondary image.
pub fn patch_match_pair(
    master: &GrayImage,
    secondary: &GrayImage,
    pairings: &[TilePairing],
    matcher: &dyn TileMatcher,
    pair_id: &str,
) -> Result<Vec<PixelMatch>> {
    let per_tile: Vec<Vec<PixelMatch>> = pairings
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let (tile_a, used) = crop(master, p.tile_rect)?;
            let tile_b = resample_secondary(secondary, p);
            let raw = matcher.match_tiles(&tile_a, &tile_b, &format!("{pair_id}-t{k}"))?;
            Ok(raw
                .into_iter()
                .filter_map(|m| {
                    let xa = m.xa + used.x as f64;
                    let ya = m.ya + used.y as f64;
                    let b = p.similarity.apply(&Vector2::new(m.xb, m.yb));
                    let in_b = b.x >= 0.0
                        && b.y >= 0.0
                        && b.x <= (secondary.width - 1) as f64
                        && b.y <= (secondary.height - 1) as f64;
                    (p.master_rect.contains(xa, ya) && in_b).then(|| PixelMatch::new(xa, ya, b.x, b.y, m.score))
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(canonical(per_tile.into_iter().flatten().collect()))
}

/// Scale ratio and rotation between two views plus per-keypoint predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct GeomPrior {
    pub r_scl: f64,
    pub d_rot: f64,
    pub predicted: Vec<Option<Vector2<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidedConfig {
    /// Search radius around each predicted keypoint, pixels.
    pub radius: f64,
    pub ratio: f64,
    /// Allowed factor between a candidate's scale ratio and `r_scl`.
    pub scale_factor: f64,
    /// Allowed deviation of the orientation difference from `d_rot`, degrees.
    pub rotation_tolerance_deg: f64,
    pub max_keypoints: usize,
    pub sift: SiftConfig,
}

impl Default for GuidedConfig {
    fn default() -> Self {
        GuidedConfig {
            radius: 100.0,
            ratio: 0.8,
            scale_factor: 2.0,
            rotation_tolerance_deg: 30.0,
            max_keypoints: 4000,
            sift: SiftConfig::default(),
        }
    }
}

/// Similarity master → secondary fitted on the transferred image corners.
pub fn view_similarity(master: &ImageView, secondary: &ImageView) -> Option<Similarity2D> {
    let (w, h) = master.size();
    let (src, dst): (Vec<_>, Vec<_>) = rect_corners(&PixelRect::new(0, 0, w, h))
        .iter()
        .filter_map(|c| Some((*c, master.transfer(c, secondary)?)))
        .unzip();
    if src.len() < 3 {
        return None;
    }
    fit_similarity2d(&src, &dst).ok()
}

/// Keypoint matching restricted to candidates near the DSM-transferred
/// prediction and coherent with the expected scale ratio and rotation.
pub fn guided_match_pair(master: &ImageView, secondary: &ImageView, cfg: &GuidedConfig) -> Result<Vec<PixelMatch>> {
    let Some(sim) = view_similarity(master, secondary) else {
        return Ok(Vec::new());
    };
    let fa = detect_and_describe(master.image, cfg.max_keypoints, &cfg.sift)?;
    let fb = detect_and_describe(secondary.image, cfg.max_keypoints, &cfg.sift)?;
    let prior = GeomPrior {
        r_scl: sim.scale,
        d_rot: sim.angle,
        predicted: fa.keypoints.par_iter().map(|k| master.transfer(&Vector2::new(k.x, k.y), secondary)).collect(),
    };

    // bucket secondary keypoints for the radius search
    let cell = cfg.radius.max(1.0);
    let mut buckets: std::collections::BTreeMap<(i64, i64), Vec<usize>> = Default::default();
    for (j, k) in fb.keypoints.iter().enumerate() {
        buckets.entry(((k.x / cell).floor() as i64, (k.y / cell).floor() as i64)).or_default().push(j);
    }
    let log_factor = cfg.scale_factor.ln();
    let rot_tol = cfg.rotation_tolerance_deg.to_radians();
    let candidates: Vec<Vec<usize>> = fa
        .keypoints
        .par_iter()
        .zip(&prior.predicted)
        .map(|(ka, pred)| {
            let Some(p) = pred else { return Vec::new() };
            let (bx, by) = ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
            let mut out = Vec::new();
            for dy in -1..=1 {
                for dx in -1..=1 {
                    for &j in buckets.get(&(bx + dx, by + dy)).into_iter().flatten() {
                        let kb = &fb.keypoints[j];
                        if (Vector2::new(kb.x, kb.y) - p).norm() > cfg.radius {
                            continue;
                        }
                        if ((kb.scale / ka.scale) / prior.r_scl).ln().abs() > log_factor {
                            continue;
                        }
                        if wrap_angle(kb.orientation - ka.orientation - prior.d_rot).abs() > rot_tol {
                            continue;
                        }
                        out.push(j);
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect();
    let pairs = match_mutual_ratio_with(&fa.descriptors, &fb.descriptors, cfg.ratio, |i, j| {
        candidates[i].binary_search(&j).is_ok()
    });
    Ok(canonical(
        pairs
            .into_iter()
            .map(|m| {
                let (ka, kb) = (&fa.keypoints[m.index_a], &fb.keypoints[m.index_b]);
                PixelMatch::new(ka.x, ka.y, kb.x, kb.y, m.score)
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Tentative,
    Enhanced,
    Final,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Tentative => "tentative",
            Stage::Enhanced => "enhanced",
            Stage::Final => "final",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tentative" => Ok(Stage::Tentative),
            "enhanced" => Ok(Stage::Enhanced),
            "final" => Ok(Stage::Final),
            _ => Err(Error::InvalidConfig(format!("unknown match stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corr3D {
    pub pixels: PixelMatch,
    pub ground_a: Vector3<f64>,
    pub ground_b: Vector3<f64>,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustFilter {
    pub enhanced: Vec<Corr3D>,
    /// Maps master-side ground points onto secondary-side ground points.
    pub helmert: Helmert3D,
    /// Matches that could be lifted onto both surfaces.
    pub lifted: usize,
}

/// Lifts both sides of every match onto their surfaces and keeps the
/// matches consistent with one 3D Helmert within `10·gsd`-style threshold
/// `threshold` (world units).
pub fn filter_3d_ransac(
    tentative: &[PixelMatch],
    a: &ImageView,
    b: &ImageView,
    threshold: f64,
    iterations: usize,
    seed: u64,
) -> Result<RobustFilter> {
    let lifted: Vec<(PixelMatch, Vector3<f64>, Vector3<f64>)> = tentative
        .par_iter()
        .filter_map(|m| {
            let ga = a.lift(&Vector2::new(m.xa, m.ya))?;
            let gb = b.lift(&Vector2::new(m.xb, m.yb))?;
            Some((*m, ga, gb))
        })
        .collect();
    if lifted.len() < 3 {
        return Err(Error::TooFewValid3D { found: lifted.len(), needed: 3 });
    }
    if !(threshold > 0.0) {
        return Err(Error::NoModelFound { best: 0, needed: 4 });
    }
    let pairs: Vec<_> = lifted.iter().map(|(_, ga, gb)| (*ga, *gb)).collect();
    let outcome = ransac_helmert3d(&pairs, &RansacConfig::new(iterations, threshold, seed))?;
    let enhanced = lifted
        .iter()
        .zip(&outcome.inliers)
        .filter(|(_, keep)| **keep)
        .map(|((m, ga, gb), _)| Corr3D { pixels: *m, ground_a: *ga, ground_b: *gb, stage: Stage::Enhanced })
        .collect();
    Ok(RobustFilter { enhanced, helmert: outcome.model, lifted: lifted.len() })
}

/// `window × window` samples centred on `center`, laid out along the columns
/// of `axes` (identity for the master side).
fn aligned_window(
    img: &GrayImage,
    center: &Vector2<f64>,
    axes: &nalgebra::Matrix2<f64>,
    window: usize,
) -> Option<Vec<f64>> {
    let half = (window as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(window * window);
    for r in 0..window {
        for c in 0..window {
            let p = center + axes * Vector2::new(c as f64 - half, r as f64 - half);
            out.push(img.sample_bilinear(p.x, p.y)?);
        }
    }
    Some(out)
}

/// Zero-normalized cross-correlation of a master window and the secondary
/// window aligned by the linear part of `alignment` (master → secondary).
pub fn aligned_ncc(
    master: &GrayImage,
    secondary: &GrayImage,
    m: &PixelMatch,
    alignment: &Similarity2D,
    window: usize,
) -> Option<f64> {
    let a = aligned_window(master, &Vector2::new(m.xa, m.ya), &nalgebra::Matrix2::identity(), window)?;
    let b = aligned_window(secondary, &Vector2::new(m.xb, m.yb), &alignment.linear(), window)?;
    zncc(&a, &b)
}

/// Keeps correspondences whose aligned-window NCC reaches `threshold`;
/// windows leaving either image or without variance are discarded.
pub fn validate_ncc(
    enhanced: &[Corr3D],
    master: &GrayImage,
    secondary: &GrayImage,
    alignment: &Similarity2D,
    window: usize,
    threshold: f64,
) -> Result<Vec<Corr3D>> {
    if window < 8 || !window.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("NCC window must be even and >= 8, got {window}")));
    }
    let keep: Vec<bool> = enhanced
        .par_iter()
        .map(|c| aligned_ncc(master, secondary, &c.pixels, alignment, window).is_some_and(|r| r >= threshold))
        .collect();
    Ok(enhanced.iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| Corr3D { stage: Stage::Final, ..*c }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    Patch,
    Guided,
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(MatchMode::Patch),
            "guided" => Ok(MatchMode::Guided),
            _ => Err(Error::InvalidConfig(format!("unknown match mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreciseConfig {
    pub mode: MatchMode,
    /// One-to-one tiling of the master image for patch matching.
    pub tiling: TilingSpec,
    /// Buffer around each master tile as a fraction of the tile size.
    pub buffer_fraction: f64,
    pub guided: GuidedConfig,
    pub ransac_iterations: usize,
    /// RANSAC inlier threshold in multiples of the ground sampling distance.
    pub gsd_factor: f64,
    pub ncc_window: usize,
    pub ncc_threshold: f64,
    pub seed: u64,
}

impl Default for PreciseConfig {
    fn default() -> Self {
        PreciseConfig {
            mode: MatchMode::Patch,
            tiling: TilingSpec::default(),
            buffer_fraction: 0.1,
            guided: GuidedConfig::default(),
            ransac_iterations: 1000,
            gsd_factor: 10.0,
            ncc_window: 32,
            ncc_threshold: 0.6,
            seed: 0,
        }
    }
}

/// All three stages for one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatches {
    pub image_a: String,
    pub image_b: String,
    pub tentative: Vec<PixelMatch>,
    pub enhanced: Vec<Corr3D>,
    pub final_matches: Vec<Corr3D>,
    pub helmert: Option<Helmert3D>,
}

/// Tentative matching (patch or guided), 3D RANSAC, NCC validation. A pair
/// too sparse for the 3D filter yields empty enhanced/final stages.
pub fn match_image_pair(
    ids: (&str, &str),
    a: &ImageView,
    b: &ImageView,
    gsd: f64,
    cfg: &PreciseConfig,
    matcher: &dyn TileMatcher,
) -> Result<PairMatches> {
    let tentative = match cfg.mode {
        MatchMode::Patch => {
            let pairings = pair_tiles(a, b, &cfg.tiling, buffer_pixels(&cfg.tiling, cfg.buffer_fraction));
            patch_match_pair(a.image, b.image, &pairings, matcher, &format!("{}-{}", ids.0, ids.1))?
        }
        MatchMode::Guided => guided_match_pair(a, b, &cfg.guided)?,
    };
    let mut out = PairMatches {
        image_a: ids.0.to_string(),
        image_b: ids.1.to_string(),
        tentative,
        enhanced: Vec::new(),
        final_matches: Vec::new(),
        helmert: None,
    };
    match filter_3d_ransac(&out.tentative, a, b, cfg.gsd_factor * gsd, cfg.ransac_iterations, cfg.seed) {
        Ok(f) => {
            out.enhanced = f.enhanced;
            out.helmert = Some(f.helmert);
        }
        Err(e @ (Error::TooFewValid3D { .. } | Error::NoModelFound { .. })) => {
            log::info!("pair {}-{}: no 3D consensus ({e})", ids.0, ids.1);
            return Ok(out);
        }
        Err(e) => return Err(e),
    }
    if let Some(sim) = view_similarity(a, b) {
        out.final_matches = validate_ncc(&out.enhanced, a.image, b.image, &sim, cfg.ncc_window, cfg.ncc_threshold)?;
    }
    Ok(out)
}

/// One line of a match file.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub image_a: String,
    pub image_b: String,
    pub pixels: PixelMatch,
    pub stage: Stage,
}

impl PairMatches {
    /// Records of all stages, tentative first.
    pub fn records(&self) -> Vec<MatchRecord> {
        let rec = |m: &PixelMatch, stage| MatchRecord {
            image_a: self.image_a.clone(),
            image_b: self.image_b.clone(),
            pixels: *m,
            stage,
        };
        self.tentative
            .iter()
            .map(|m| rec(m, Stage::Tentative))
            .chain(self.enhanced.iter().map(|c| rec(&c.pixels, Stage::Enhanced)))
            .chain(self.final_matches.iter().map(|c| rec(&c.pixels, Stage::Final)))
            .collect()
    }
}

/// Writes `img_a img_b x1 y1 x2 y2 score stage` lines.
pub fn write_match_file(records: &[MatchRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        let m = &r.pixels;
        text.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            r.image_a, r.image_b, m.xa, m.ya, m.xb, m.yb, m.score, r.stage
        ));
    }
    crate::io::write_text(path, &text)
}

pub fn read_match_file(path: &Path) -> Result<Vec<MatchRecord>> {
    let text = crate::io::read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() || toks[0].starts_with('#') {
            continue;
        }
        let bad = |why: String| Error::parse(path, format!("line {}: {why}", n + 1));
        if toks.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", toks.len())));
        }
        let v: Vec<f64> =
            toks[2..7].iter().map(|t| t.parse::<f64>().map_err(|e| bad(e.to_string()))).collect::<Result<_>>()?;
        out.push(MatchRecord {
            image_a: toks[0].to_string(),
            image_b: toks[1].to_string(),
            pixels: PixelMatch::new(v[0], v[1], v[2], v[3], v[4]),
            stage: toks[7].parse().map_err(|e: Error| bad(e.to_string()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cameras::Ray;
    use crate::features::test_pattern;
    use crate::matcher::BuiltinMatcher;
    use crate::rasters::{DsmRaster, GeoGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Flat ground at z = 0 spanning ±400 m.
    fn flat() -> DsmRaster {
        DsmRaster::filled(GeoGrid::new(400, 400, -400.0, 400.0, 2.0, -9999.0).unwrap(), 0.0)
    }

    fn heading(yaw: f64, center: Vector3<f64>) -> Pose {
        let rz = *nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix();
        Pose::new(Pose::nadir(center).rotation * rz.transpose(), center)
    }

    /// Renders `dst` by casting its pixels onto the plane z = 0 analytically
    /// and sampling `src` there.
    fn render(src: &GrayImage, cam_s: &FraserCamera, pose_s: &Pose, cam_d: &FraserCamera, pose_d: &Pose) -> GrayImage {
        GrayImage::from_fn(cam_d.sensor[0], cam_d.sensor[1], |x, y| {
            let ray: Ray = cam_d.backproject_ray(pose_d, &Vector2::new(x as f64, y as f64)).unwrap();
            let t = -ray.origin.z / ray.direction.z;
            let g = ray.at(t);
            let p = cam_s.project(pose_s, &g).unwrap();
            src.sample_bilinear(p.x, p.y).map_or(0, |v| v.round() as u8)
        })
    }

    struct Setup {
        cam: FraserCamera,
        pose_a: Pose,
        pose_b: Pose,
        img_a: GrayImage,
        img_b: GrayImage,
        dsm: DsmRaster,
    }

    fn setup(height_b: f64, yaw_b: f64) -> Setup {
        let cam = FraserCamera::pinhole(256.0, 256, 256);
        let pose_a = Pose::nadir(Vector3::new(0.0, 0.0, 256.0));
        let pose_b = heading(yaw_b, Vector3::new(0.0, 0.0, height_b));
        let img_a = test_pattern(256, 256, 3);
        let img_b = render(&img_a, &cam, &pose_a, &cam, &pose_b);
        Setup { cam, pose_a, pose_b, img_a, img_b, dsm: flat() }
    }

    impl Setup {
        fn views(&self) -> (ImageView<'_>, ImageView<'_>) {
            (
                ImageView { image: &self.img_a, camera: &self.cam, pose: &self.pose_a, surface: &self.dsm },
                ImageView { image: &self.img_b, camera: &self.cam, pose: &self.pose_b, surface: &self.dsm },
            )
        }

        /// Oracle: the true position in image b of a pixel of image a.
        fn truth(&self, p: &Vector2<f64>) -> Vector2<f64> {
            let ray = self.cam.backproject_ray(&self.pose_a, p).unwrap();
            let g = ray.at(-ray.origin.z / ray.direction.z);
            self.cam.project(&self.pose_b, &g).unwrap()
        }
    }

    #[test]
    fn pairing_identity_and_half_height() {
        let s = setup(256.0, 0.0);
        let (a, b) = s.views();
        let p = predict_tile_pairing(&a, &b, PixelRect::new(64, 64, 64, 64), 8).unwrap();
        assert!((p.similarity.scale - 1.0).abs() < 1e-6);
        assert!(p.similarity.angle.abs() < 1e-6);
        let t = p.similarity.apply(&Vector2::zeros());
        assert!((t - Vector2::new(56.0, 56.0)).norm() < 1e-4);

        let s = setup(128.0, 0.0);
        let (a, b) = s.views();
        let p = predict_tile_pairing(&a, &b, PixelRect::new(96, 96, 64, 64), 0).unwrap();
        // pinhole oracle: half the distance to the ground doubles the scale
        assert!((p.similarity.scale - 2.0).abs() < 1e-6, "{}", p.similarity.scale);
    }

    #[test]
    fn pairing_over_hole_is_none() {
        let mut s = setup(256.0, 0.0);
        s.dsm = DsmRaster::filled(s.dsm.grid, -9999.0);
        let (a, b) = s.views();
        assert!(predict_tile_pairing(&a, &b, PixelRect::new(0, 0, 64, 64), 0).is_none());
        // a secondary camera far away sees none of the tile
        let s = setup(256.0, 0.0);
        let far = Pose::nadir(Vector3::new(300.0, 0.0, 256.0));
        let (a, mut b) = s.views();
        b.pose = &far;
        assert!(predict_tile_pairing(&a, &b, PixelRect::new(0, 0, 64, 64), 0).is_none());
    }

    #[test]
    fn patch_matching_on_warped_copy() {
        let s = setup(200.0, 0.7);
        let (a, b) = s.views();
        let tiling = TilingSpec::new(128, 128).unwrap();
        let pairings = pair_tiles(&a, &b, &tiling, 12);
        assert!(!pairings.is_empty());
        let m = patch_match_pair(&s.img_a, &s.img_b, &pairings, &BuiltinMatcher::default(), "p").unwrap();
        assert!(m.len() > 50, "{}", m.len());
        let good =
            m.iter().filter(|m| (s.truth(&Vector2::new(m.xa, m.ya)) - Vector2::new(m.xb, m.yb)).norm() <= 1.0).count();
        assert!(good as f64 >= 0.95 * m.len() as f64, "{good}/{}", m.len());
        for x in &m {
            assert!(pairings.iter().any(|p| p.master_rect.contains(x.xa, x.ya)));
        }
        assert!(patch_match_pair(&s.img_a, &s.img_b, &[], &BuiltinMatcher::default(), "p").unwrap().is_empty());
    }

    /// Returns a fixed set of tile-local matches regardless of input.
    struct Fixed(Vec<PixelMatch>);

    impl TileMatcher for Fixed {
        fn match_tiles(&self, _: &GrayImage, _: &GrayImage, _: &str) -> Result<Vec<PixelMatch>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn buffer_zone_matches_are_dropped() {
        let s = setup(256.0, 0.0);
        let (a, b) = s.views();
        let p = predict_tile_pairing(&a, &b, PixelRect::new(64, 64, 64, 64), 10).unwrap();
        let inside = PixelMatch::new(30.0, 30.0, 30.0, 30.0, 1.0);
        let in_buffer = PixelMatch::new(3.0, 30.0, 3.0, 30.0, 1.0);
        let out = patch_match_pair(&s.img_a, &s.img_b, &[p], &Fixed(vec![inside, in_buffer]), "p").unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].xa, out[0].ya), (84.0, 84.0));
    }

    #[test]
    fn guided_identity_is_self_matching() {
        let s = setup(256.0, 0.0);
        let (a, _) = s.views();
        let m = guided_match_pair(&a, &a, &GuidedConfig::default()).unwrap();
        assert!(m.len() > 20);
        for x in &m {
            assert_eq!((x.xa, x.ya), (x.xb, x.yb));
        }
    }

    #[test]
    fn guided_scale_and_rotation() {
        // secondary at half height, rotated a quarter turn: 2× scale, 90°
        let s = setup(128.0, std::f64::consts::FRAC_PI_2);
        let (a, b) = s.views();
        let cfg = GuidedConfig::default();
        let m = guided_match_pair(&a, &b, &cfg).unwrap();
        assert!(!m.is_empty());
        let fa = detect_and_describe(&s.img_a, cfg.max_keypoints, &cfg.sift).unwrap();
        let fb = detect_and_describe(&s.img_b, cfg.max_keypoints, &cfg.sift).unwrap();
        let sim = view_similarity(&a, &b).unwrap();
        let find =
            |v: &[crate::features::Keypoint], x: f64, y: f64| v.iter().find(|k| k.x == x && k.y == y).copied().unwrap();
        for x in &m {
            let (ka, kb) = (find(&fa.keypoints, x.xa, x.ya), find(&fb.keypoints, x.xb, x.yb));
            assert!(((kb.scale / ka.scale) / sim.scale).ln().abs() <= 2f64.ln());
            assert!(wrap_angle(kb.orientation - ka.orientation - sim.angle).abs() <= 30f64.to_radians());
        }
        // ground-truth pairs: keypoints at corresponding positions with
        // coherent scale and orientation
        let mut truth_pairs = Vec::new();
        for ka in &fa.keypoints {
            let t = s.truth(&Vector2::new(ka.x, ka.y));
            if let Some(kb) = fb.keypoints.iter().find(|kb| {
                (Vector2::new(kb.x, kb.y) - t).norm() <= 1.0
                    && ((kb.scale / ka.scale) / 2.0).ln().abs() <= 0.2
                    && wrap_angle(kb.orientation - ka.orientation - sim.angle).abs() <= 0.2
            }) {
                truth_pairs.push(((ka.x, ka.y), (kb.x, kb.y)));
            }
        }
        assert!(truth_pairs.len() > 10);
        let found =
            truth_pairs.iter().filter(|(pa, pb)| m.iter().any(|x| (x.xa, x.ya) == *pa && (x.xb, x.yb) == *pb)).count();
        assert!(found as f64 >= 0.9 * truth_pairs.len() as f64, "{found}/{}", truth_pairs.len());
        let narrow = GuidedConfig { radius: 0.0, ..cfg };
        assert!(guided_match_pair(&a, &b, &narrow).unwrap().is_empty());
    }

    fn planted(seed: u64, outlier_fraction: f64, gsd: f64) -> (Setup, Vec<PixelMatch>, Vec<bool>) {
        let s = setup(230.0, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ms = Vec::new();
        let mut truth = Vec::new();
        while ms.len() < 200 {
            let p = Vector2::new(rng.random_range(20.0..236.0), rng.random_range(20.0..236.0));
            let t = s.truth(&p);
            if !(t.x > 5.0 && t.y > 5.0 && t.x < 250.0 && t.y < 250.0) {
                continue;
            }
            if rng.random_bool(outlier_fraction) {
                // at least 50 GSD away in image b (GSD of b ≈ 230/256 · gsd)
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let d = rng.random_range(60.0..120.0) * gsd;
                let o = t + Vector2::new(ang.cos(), ang.sin()) * d;
                if !(o.x > 0.0 && o.y > 0.0 && o.x < 255.0 && o.y < 255.0) {
                    continue;
                }
                ms.push(PixelMatch::new(p.x, p.y, o.x, o.y, 0.5));
                truth.push(false);
            } else {
                ms.push(PixelMatch::new(
                    p.x,
                    p.y,
                    t.x + rng.random_range(-0.5..0.5),
                    t.y + rng.random_range(-0.5..0.5),
                    0.9,
                ));
                truth.push(true);
            }
        }
        (s, ms, truth)
    }

    #[test]
    fn ransac_filter_cases() {
        let (s, ms, truth) = planted(1, 0.0, 1.0);
        let (a, b) = s.views();
        let f = filter_3d_ransac(&ms, &a, &b, 10.0, 1000, 0).unwrap();
        assert_eq!(f.enhanced.len(), ms.len());
        assert!(truth.iter().all(|t| *t));
        for c in &f.enhanced {
            assert!((f.helmert.apply(&c.ground_a) - c.ground_b).norm() <= 10.0);
        }
        assert!(matches!(filter_3d_ransac(&ms, &a, &b, 0.0, 1000, 0), Err(Error::NoModelFound { .. })));
        assert!(matches!(filter_3d_ransac(&ms[..2], &a, &b, 10.0, 1000, 0), Err(Error::TooFewValid3D { .. })));

        let (s, ms, truth) = planted(2, 0.5, 1.0);
        let (a, b) = s.views();
        let f = filter_3d_ransac(&ms, &a, &b, 10.0, 1000, 0).unwrap();
        let kept: BTreeSet<_> = f.enhanced.iter().map(|c| c.pixels.coord_bits()).collect();
        for (m, t) in ms.iter().zip(&truth) {
            assert_eq!(kept.contains(&m.coord_bits()), *t);
        }
    }

    #[test]
    fn ncc_validation_cases() {
        let s = setup(256.0, 0.0);
        let (a, _) = s.views();
        let g = a.lift(&Vector2::new(100.0, 100.0)).unwrap();
        let c = Corr3D {
            pixels: PixelMatch::new(100.0, 100.0, 100.0, 100.0, 1.0),
            ground_a: g,
            ground_b: g,
            stage: Stage::Enhanced,
        };
        let id = Similarity2D::identity();
        assert!((aligned_ncc(&s.img_a, &s.img_a, &c.pixels, &id, 32).unwrap() - 1.0).abs() < 1e-12);
        let neg = GrayImage::from_fn(256, 256, |x, y| 255 - s.img_a.get(x, y));
        assert!((aligned_ncc(&s.img_a, &neg, &c.pixels, &id, 32).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(validate_ncc(&[c], &s.img_a, &s.img_a, &id, 32, 0.6).unwrap().len(), 1);
        assert!(validate_ncc(&[c], &s.img_a, &neg, &id, 32, 0.6).unwrap().is_empty());
        assert!(validate_ncc(&[c], &s.img_a, &s.img_a, &id, 31, 0.6).is_err());
        let flat = GrayImage::from_fn(256, 256, |_, _| 80);
        assert!(validate_ncc(&[c], &s.img_a, &flat, &id, 32, 0.6).unwrap().is_empty());
    }

    #[test]
    fn match_file_round_trip() {
        let recs = vec![
            MatchRecord {
                image_a: "a".into(),
                image_b: "b".into(),
                pixels: PixelMatch::new(1.5, 2.0, 3.25, 4.0, 0.75),
                stage: Stage::Tentative,
            },
            MatchRecord {
                image_a: "a".into(),
                image_b: "b".into(),
                pixels: PixelMatch::new(0.1, 0.2, 0.3, 1e-7, 1.0),
                stage: Stage::Final,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        write_match_file(&recs, &p).unwrap();
        assert_eq!(read_match_file(&p).unwrap(), recs);
        std::fs::write(&p, "a b 1 2 3 4 0.5 bogus\n").unwrap();
        assert!(read_match_file(&p).is_err());
    }

    #[test]
    fn stages_are_nested() {
        let s = setup(220.0, 0.3);
        let (a, b) = s.views();
        let cfg = PreciseConfig { tiling: TilingSpec::new(128, 128).unwrap(), ..PreciseConfig::default() };
        let r = match_image_pair(("a", "b"), &a, &b, 1.0, &cfg, &BuiltinMatcher::default()).unwrap();
        assert!(!r.final_matches.is_empty());
        let t: BTreeSet<_> = r.tentative.iter().map(|m| m.coord_bits()).collect();
        let e: BTreeSet<_> = r.enhanced.iter().map(|c| c.pixels.coord_bits()).collect();
        let f: BTreeSet<_> = r.final_matches.iter().map(|c| c.pixels.coord_bits()).collect();
        assert!(f.is_subset(&e) && e.is_subset(&t));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn final_correspondences_fit_the_model(seed in 0u64..10_000, outliers in 0.0f64..0.6) {
                let (s, ms, _) = planted(seed, outliers, 1.0);
                let (a, b) = s.views();
                let f = filter_3d_ransac(&ms, &a, &b, 10.0, 1000, seed).unwrap();
                let kept = validate_ncc(&f.enhanced, &s.img_a, &s.img_b, &view_similarity(&a, &b).unwrap(), 32, 0.6).unwrap();
                for c in f.enhanced.iter().chain(&kept) {
                    prop_assert!((f.helmert.apply(&c.ground_a) - c.ground_b).norm() <= 10.0);
                }
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(6))]
            #[test]
            fn patch_matches_lie_in_unbuffered_tiles(height in 180.0f64..320.0, yaw in -3.1f64..3.1, buffer in 0usize..24) {
                let s = setup(height, yaw);
                let (a, b) = s.views();
                let tiling = TilingSpec::new(128, 96).unwrap();
                let pairings = pair_tiles(&a, &b, &tiling, buffer);
                let m = patch_match_pair(&s.img_a, &s.img_b, &pairings, &BuiltinMatcher::quarter_turn_tolerant(), "p").unwrap();
                for x in &m {
                    prop_assert!(pairings.iter().any(|p| p.master_rect.contains(x.xa, x.ya)), "{x:?}");
                }
            }
        }

        proptest! {
            #[test]
            fn ncc_ignores_affine_intensity(
                seed in 0u64..1000,
                gain in 1u8..5,
                offset in 0u8..50,
                on_a in any::<bool>(),
                x in 20.0f64..236.0,
                y in 20.0f64..236.0,
            ) {
                // values in [0, 50] keep every gain/offset exactly representable
                let pattern = test_pattern(256, 256, seed);
                let base = GrayImage::from_fn(256, 256, |i, j| (pattern.get(i, j) as u16 * 50 / 255) as u8);
                let other = GrayImage::from_fn(256, 256, |i, j| base.get((i + 3) % 256, j));
                let changed = GrayImage::from_fn(256, 256, |i, j| gain * (if on_a { base.get(i, j) } else { other.get(i, j) }) + offset);
                let pm = PixelMatch::new(x, y, x + 1.5, y - 2.0, 1.0);
                let id = Similarity2D::identity();
                let plain = aligned_ncc(&base, &other, &pm, &id, 32);
                let scaled = if on_a { aligned_ncc(&changed, &other, &pm, &id, 32) } else { aligned_ncc(&base, &changed, &pm, &id, 32) };
                match (plain, scaled) {
                    (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-9, "{p} vs {q}"),
                    (p, q) => prop_assert_eq!(p.is_some(), q.is_some()),
                }
            }
        }
    }
}
