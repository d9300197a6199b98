//! End-to-end orchestration over a workspace directory.
//!
//! Every stage reads the artifacts of the stages before it from disk and
//! writes its own plus a JSON summary, so `run` and a manual chain of stage
//! calls produce byte-identical outputs.
//!
//! Output layout under `<workspace>/<output>`:
//! - `coreg/<epoch>/{orientation.json, dsm_transform.json, report.json, inliers.txt}`, `coreg/summary.json`
//! - `match/pairs.json`, `match/<a>__<b>.txt` (tentative matches)
//! - `filter/<a>__<b>.txt` (all three stages), `filter/summary.json`
//! - `ba/<epoch>/orientation.json`, `ba/ties.txt`, `ba/report.json`
//! - `eval/checkpoints.json`, `eval/dod.json`, `eval/dod_<epoch>.bin`,
//!   `eval/displacement.json`, `eval/displacement_<epoch>_{dx,dy,peak,azimuth}.bin`

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{
    read_tie_points, reduce_matches, similarity_to_metric, triangulate_rays, write_tie_points, BaProblem,
    ConvergenceReport, Observation, ParamPolicy, SolverSettings, TieKind, TiePoint,
};
use crate::cameras::{mean_gsd, EpochBlock, FraserCamera, OrientationFile, Pose, Surface, Transformed};
use crate::error::{Error, Result};
use crate::evaluation::{
    checkpoint_accuracy, displacement_map, dod, orthomosaic, point_dod, read_checkpoints, resample_surface,
    CheckpointReport, DisplacementConfig, DodStats,
};
use crate::io::{read_json, write_json};
use crate::matcher::{BuiltinMatcher, MatcherBackend, PixelMatch, TileMatcher};
use crate::precise_match::{
    buffer_pixels, filter_3d_ransac, guided_match_pair, pair_tiles, patch_match_pair, read_match_file, validate_ncc,
    view_similarity, write_match_file, ImageView, MatchMode, MatchRecord, PreciseConfig, Stage,
};
use crate::rasters::{read_gray, read_raster, write_raster, DsmRaster, GeoGrid, GrayImage};
use crate::rough_coreg::{coregister_epoch, write_pixel_matches, RoughConfig};
use crate::transforms::Helmert3D;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochInput {
    pub id: String,
    /// Directory relative to the workspace.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaConfig {
    pub policy: ParamPolicy,
    pub settings: SolverSettings,
    /// Treat the reference epoch's orientation as known and keep it fixed;
    /// otherwise solve a free network and move it back to the reference
    /// frame afterwards.
    pub fix_reference: bool,
    /// Shared interior first, then per-image affine terms.
    pub two_phase: bool,
    /// Spatial thinning of inter-epoch tie points: grid cells per image axis.
    pub reduce_grid: usize,
    /// Tie points kept per grid cell and image.
    pub reduce_cap: usize,
}

impl Default for BaConfig {
    fn default() -> Self {
        BaConfig {
            policy: ParamPolicy::default(),
            settings: SolverSettings::default(),
            fix_reference: true,
            two_phase: true,
            reduce_grid: 8,
            reduce_cap: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Epochs in chronological order.
    pub epochs: Vec<EpochInput>,
    /// Reference epoch; the most recent (last) epoch when absent.
    pub reference: Option<String>,
    /// Output directory relative to the workspace.
    pub output: PathBuf,
    pub seed: u64,
    /// Image downsampling applied before inter-epoch matching.
    pub image_downsample: usize,
    /// Extra DSM downsampling on top of the image factor.
    pub dsm_extra_downsample: usize,
    /// Rough stage; its `dsm_downsample` is replaced by the product of the
    /// two factors above and its RANSAC seed by `seed`.
    pub rough: RoughConfig,
    /// Precise stage; its seed is replaced by `seed`.
    pub precise: PreciseConfig,
    pub matcher: MatcherBackend,
    pub builtin: BuiltinMatcher,
    /// Match cap passed to adapter backends.
    pub max_matches: usize,
    /// Minimum footprint intersection over the smaller footprint.
    pub min_overlap: f64,
    pub ba: BaConfig,
    pub displacement: DisplacementConfig,
    /// Azimuth (degrees clockwise from north) of the scalar displacement band.
    pub displacement_azimuth_deg: f64,
    /// Cell of the sparse tie-point DSM compared against the reference DSM,
    /// in reference DSM cells; each cell averages the points falling in it.
    pub sparse_dod_cells: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let builtin = BuiltinMatcher::quarter_turn_tolerant();
        PipelineConfig {
            epochs: Vec::new(),
            reference: None,
            output: PathBuf::from("out"),
            seed: 0,
            image_downsample: 3,
            dsm_extra_downsample: 4,
            rough: RoughConfig::default(),
            precise: PreciseConfig::default(),
            matcher: MatcherBackend::Builtin,
            builtin,
            max_matches: 2000,
            min_overlap: 0.01,
            ba: BaConfig::default(),
            displacement: DisplacementConfig::default(),
            displacement_azimuth_deg: 45.0,
            sparse_dod_cells: 16,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs.len() < 2 {
            return bad("at least two epochs are required".into());
        }
        let mut ids = BTreeSet::new();
        for e in &self.epochs {
            if e.id.is_empty() || !ids.insert(e.id.as_str()) {
                return bad(format!("epoch ids must be unique and non-empty ({:?})", e.id));
            }
        }
        if let Some(r) = &self.reference {
            if !ids.contains(r.as_str()) {
                return bad(format!("unknown reference epoch {r:?}"));
            }
        }
        for e in &self.ba.policy.fixed_epochs {
            if !ids.contains(e.as_str()) {
                return bad(format!("unknown fixed epoch {e:?}"));
            }
        }
        if self.image_downsample == 0 || self.dsm_extra_downsample == 0 {
            return bad("downsample factors must be >= 1".into());
        }
        if self.sparse_dod_cells == 0 {
            return bad("sparse_dod_cells must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.min_overlap) {
            return bad("min_overlap must be in [0, 1]".into());
        }
        if self.precise.ncc_window < 8 || !self.precise.ncc_window.is_multiple_of(2) {
            return bad(format!("NCC window must be even and >= 8, got {}", self.precise.ncc_window));
        }
        if !(self.precise.gsd_factor > 0.0) || self.precise.ransac_iterations == 0 {
            return bad("3D RANSAC needs a positive GSD factor and >= 1 iteration".into());
        }
        self.precise.tiling.validate()?;
        self.rough_config().validate()
    }

    pub fn reference_id(&self) -> &str {
        self.reference.as_deref().unwrap_or_else(|| &self.epochs.last().expect("validated").id)
    }

    pub fn rough_config(&self) -> RoughConfig {
        let mut r = self.rough;
        r.dsm_downsample = self.image_downsample * self.dsm_extra_downsample;
        r.similarity_ransac.seed = self.seed;
        r
    }

    pub fn precise_config(&self) -> PreciseConfig {
        PreciseConfig { seed: self.seed, ..self.precise }
    }

    pub fn matcher(&self) -> Box<dyn TileMatcher + Send> {
        self.matcher.instantiate(self.builtin, self.max_matches)
    }
}

/// Full-resolution pixel of a pixel in an image downsampled by `k`.
pub fn to_full_resolution(p: f64, k: usize) -> f64 {
    k as f64 * p + (k as f64 - 1.0) / 2.0
}

/// Pixel in an image downsampled by `k` of a full-resolution pixel.
pub fn to_match_resolution(p: f64, k: usize) -> f64 {
    (p - (k as f64 - 1.0) / 2.0) / k as f64
}

fn match_to_full(m: &PixelMatch, k: usize) -> PixelMatch {
    PixelMatch::new(
        to_full_resolution(m.xa, k),
        to_full_resolution(m.ya, k),
        to_full_resolution(m.xb, k),
        to_full_resolution(m.yb, k),
        m.score,
    )
}

fn full_to_match(m: &PixelMatch, k: usize) -> PixelMatch {
    PixelMatch::new(
        to_match_resolution(m.xa, k),
        to_match_resolution(m.ya, k),
        to_match_resolution(m.xb, k),
        to_match_resolution(m.yb, k),
        m.score,
    )
}

/// Signed area of a polygon (counter-clockwise positive).
pub fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| poly[i].perp(&poly[(i + 1) % n])).sum::<f64>() / 2.0
}

/// Sutherland–Hodgman clipping of `subject` by the convex polygon `clip`;
/// both counter-clockwise.
pub fn clip_polygon(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (c0, c1) = (clip[i], clip[(i + 1) % clip.len()]);
        let edge = c1 - c0;
        let inside = |p: &Vector2<f64>| edge.perp(&(p - c0)) >= 0.0;
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (pin, qin) = (inside(&p), inside(&q));
            if pin {
                out.push(p);
            }
            if pin != qin {
                let d = q - p;
                let t = edge.perp(&(c0 - p)) / edge.perp(&d);
                out.push(p + d * t);
            }
        }
    }
    out
}

/// Intersection area over the smaller polygon's area.
pub fn overlap_ratio(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> f64 {
    let (aa, ab) = (polygon_area(a), polygon_area(b));
    let smaller = aa.min(ab);
    if !(smaller > 0.0) {
        return 0.0;
    }
    polygon_area(&clip_polygon(a, b)).max(0.0) / smaller
}

/// Horizontal footprint of an image on a surface, counter-clockwise. Corner
/// rays missing the surface fall back to the plane at its mean height.
pub fn footprint(camera: &FraserCamera, pose: &Pose, surface: &impl Surface) -> Option<Vec<Vector2<f64>>> {
    let b = surface.bounds()?;
    let plane_z = 0.5 * (b.min.z + b.max.z);
    let (w, h) = (camera.width() as f64 - 1.0, camera.height() as f64 - 1.0);
    let mut poly = Vec::with_capacity(4);
    for (x, y) in [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)] {
        let ray = camera.backproject_ray(pose, &Vector2::new(x, y)).ok()?;
        let hit = surface.intersect(&ray).or_else(|| {
            let t = (plane_z - ray.origin.z) / ray.direction.z;
            (t > 0.0).then(|| ray.at(t))
        })?;
        poly.push(hit.xy());
    }
    if polygon_area(&poly) < 0.0 {
        poly.reverse();
    }
    Some(poly)
}

fn pair_file_name(a: &str, b: &str) -> String {
    format!("{a}__{b}.txt")
}

fn tag<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage { stage, source: Box::new(e) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoregEntry {
    pub epoch: String,
    pub helmert: Helmert3D,
    pub quarter_turns: u8,
    pub inliers: usize,
    pub helmert_inliers: usize,
    pub helmert_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoregSummary {
    pub reference_epoch: String,
    pub epochs: Vec<CoregEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub image_a: String,
    pub epoch_a: String,
    pub image_b: String,
    pub epoch_b: String,
    pub overlap: f64,
    pub tentative: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub mode: MatchMode,
    pub candidate_pairs: usize,
    pub pairs: Vec<PairEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterEntry {
    pub image_a: String,
    pub image_b: String,
    pub tentative: usize,
    pub lifted: usize,
    pub enhanced: usize,
    pub final_matches: usize,
    pub helmert: Option<Helmert3D>,
    /// final ⊆ enhanced ⊆ tentative, checked on exact coordinates.
    pub nested: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub gsd: f64,
    pub threshold: f64,
    pub pairs: Vec<FilterEntry>,
    pub tentative: usize,
    pub enhanced: usize,
    pub final_matches: usize,
    pub all_nested: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaReport {
    pub intra_tie_points: usize,
    pub inter_tie_points_merged: usize,
    pub inter_tie_points_kept: usize,
    pub inconsistent_tracks: usize,
    pub dropped_untriangulable: Vec<String>,
    pub phases: Vec<ConvergenceReport>,
    /// Transform applied after a free-network solve to return to the
    /// reference frame.
    pub to_reference: Helmert3D,
    pub fixed_epochs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub epoch: String,
    pub coregistered: CheckpointReport,
    pub adjusted: Option<CheckpointReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DodEntry {
    pub epoch: String,
    /// Co-registered DSM minus the reference DSM.
    pub dsm: Option<DodStats>,
    /// Epoch tie points triangulated with the co-registered orientation,
    /// minus the reference DSM.
    pub sparse_coregistered: Option<DodStats>,
    /// Same with the adjusted orientation.
    pub sparse_adjusted: Option<DodStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementEntry {
    pub epoch: String,
    pub valid: usize,
    pub mean_dx: f64,
    pub mean_dy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub coreg: CoregSummary,
    pub matching: MatchSummary,
    pub filter: FilterSummary,
    pub ba: BaReport,
    pub checkpoints: Vec<CheckpointEntry>,
    pub dod: Vec<DodEntry>,
    pub displacement: Vec<DisplacementEntry>,
}

/// (master epoch, master image, secondary epoch, secondary image, overlap).
type CandidatePair = (usize, usize, usize, usize, f64);

/// Per-epoch data at matching resolution.
struct MatchEpoch {
    block: EpochBlock,
    images: Vec<GrayImage>,
    cameras: Vec<FraserCamera>,
    surface: Transformed<Arc<DsmRaster>>,
}

impl MatchEpoch {
    fn view(&self, i: usize) -> ImageView<'_> {
        ImageView {
            image: &self.images[i],
            camera: &self.cameras[i],
            pose: &self.block.images[i].pose,
            surface: &self.surface,
        }
    }
}

pub struct Pipeline {
    pub root: PathBuf,
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { root: root.into(), config })
    }

    /// Reads `config` (relative to `root` unless absolute).
    pub fn open(root: impl Into<PathBuf>, config: &Path) -> Result<Self> {
        let root = root.into();
        let config: PipelineConfig = read_json(&root.join(config))?;
        Pipeline::new(root, config)
    }

    pub fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(&self.config.output).join(rel)
    }

    fn epoch_input(&self, id: &str) -> Result<&EpochInput> {
        self.config
            .epochs
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown epoch {id:?}")))
    }

    pub fn epoch_dir(&self, id: &str) -> Result<PathBuf> {
        Ok(self.root.join(&self.epoch_input(id)?.dir))
    }

    fn reference_id(&self) -> String {
        self.config.reference_id().to_string()
    }

    fn epoch_ids(&self) -> Vec<String> {
        self.config.epochs.iter().map(|e| e.id.clone()).collect()
    }

    fn assemble(
        &self,
        id: &str,
        orientation: OrientationFile,
        dsm_transform: Helmert3D,
        pixels: bool,
    ) -> Result<EpochBlock> {
        let dir = self.epoch_dir(id)?;
        let mut images = orientation.image_entries();
        if pixels {
            let loaded: Vec<GrayImage> = images
                .par_iter()
                .map(|im| read_gray(&dir.join("images").join(format!("{}.pgm", im.image_id))))
                .collect::<Result<_>>()?;
            for (im, px) in images.iter_mut().zip(loaded) {
                im.pixels = Some(Arc::new(px));
            }
        }
        let block = EpochBlock {
            epoch_id: id.to_string(),
            cameras: orientation.camera_map(),
            images,
            dsm: Arc::new(read_raster(&dir.join("dsm.bin"))?),
            dsm_transform,
        };
        block.validate()?;
        Ok(block)
    }

    /// The epoch as delivered.
    pub fn load_input(&self, id: &str, pixels: bool) -> Result<EpochBlock> {
        let orientation = OrientationFile::read(&self.epoch_dir(id)?.join("orientation.json"))?;
        self.assemble(id, orientation, Helmert3D::identity(), pixels)
    }

    /// The epoch after rough co-registration (reference frame).
    pub fn load_coregistered(&self, id: &str, pixels: bool) -> Result<EpochBlock> {
        let d = self.out(Path::new("coreg").join(id));
        let orientation = OrientationFile::read(&d.join("orientation.json"))?;
        let h: Helmert3D = read_json(&d.join("dsm_transform.json"))?;
        self.assemble(id, orientation, h, pixels)
    }

    /// The epoch after bundle adjustment.
    pub fn load_adjusted(&self, id: &str, pixels: bool) -> Result<EpochBlock> {
        let orientation = OrientationFile::read(&self.out(Path::new("ba").join(id).join("orientation.json")))?;
        let h: Helmert3D = read_json(&self.out(Path::new("coreg").join(id).join("dsm_transform.json")))?;
        self.assemble(id, orientation, h, pixels)
    }

    fn intra_ties(&self, id: &str) -> Result<Vec<TiePoint>> {
        let path = self.epoch_dir(id)?.join("ties.txt");
        if path.exists() {
            read_tie_points(&path)
        } else {
            Ok(Vec::new())
        }
    }

    fn checkpoints_path(&self, id: &str) -> Result<PathBuf> {
        Ok(self.epoch_dir(id)?.join("checkpoints.txt"))
    }

    pub fn stage_coreg(&self) -> Result<CoregSummary> {
        tag("coreg", self.coreg_inner())
    }

    fn coreg_inner(&self) -> Result<CoregSummary> {
        let reference_id = self.reference_id();
        let reference =
            self.load_input(&reference_id, self.config.rough.source == crate::rough_coreg::RoughSource::Orthophoto)?;
        let matcher = self.config.matcher();
        let cfg = self.config.rough_config();
        let mut entries = Vec::new();
        for id in self.epoch_ids() {
            let dir = self.out(Path::new("coreg").join(&id));
            if id == reference_id {
                reference.orientation().write(&dir.join("orientation.json"))?;
                write_json(&dir.join("dsm_transform.json"), &Helmert3D::identity())?;
                continue;
            }
            let free = self.load_input(&id, cfg.source == crate::rough_coreg::RoughSource::Orthophoto)?;
            let (co, block) = coregister_epoch(&free, &reference, &cfg, matcher.as_ref())?;
            block.orientation().write(&dir.join("orientation.json"))?;
            write_json(&dir.join("dsm_transform.json"), &block.dsm_transform)?;
            write_pixel_matches(&co.inliers, &dir.join("inliers.txt"))?;
            write_json(&dir.join("report.json"), &co.report(&id, &reference_id, "inliers.txt"))?;
            log::info!(
                "coreg {id}: λ={:.5} quarter turns {} inliers {} helmert inliers {}",
                co.helmert.lambda,
                co.chosen_hypothesis.quarter_turns,
                co.inliers.len(),
                co.helmert_inliers
            );
            entries.push(CoregEntry {
                epoch: id.clone(),
                helmert: co.helmert,
                quarter_turns: co.chosen_hypothesis.quarter_turns,
                inliers: co.inliers.len(),
                helmert_inliers: co.helmert_inliers,
                helmert_rms: co.helmert_rms,
            });
        }
        let summary = CoregSummary { reference_epoch: reference_id, epochs: entries };
        write_json(&self.out("coreg/summary.json"), &summary)?;
        Ok(summary)
    }

    fn match_epoch(&self, id: &str) -> Result<MatchEpoch> {
        let k = self.config.image_downsample;
        let block = self.load_coregistered(id, true)?;
        let mut images = Vec::with_capacity(block.images.len());
        let mut cameras = Vec::with_capacity(block.images.len());
        for im in &block.images {
            let px = im
                .pixels
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("image {} has no pixels", im.image_id)))?;
            images.push(px.downsample(k));
            cameras.push(block.camera_of(im)?.downscaled(k as f64));
        }
        let dsm = Arc::new(block.dsm.downsample(k * self.config.dsm_extra_downsample));
        let surface = Transformed::new(dsm, block.dsm_transform);
        Ok(MatchEpoch { block, images, cameras, surface })
    }

    /// Candidate inter-epoch pairs: master from the later epoch, footprints
    /// on the reference DSM overlapping by at least `min_overlap`.
    fn candidate_pairs(&self, epochs: &[MatchEpoch]) -> Result<(usize, Vec<CandidatePair>)> {
        let reference = self.load_input(&self.reference_id(), false)?;
        let surface = reference.surface();
        let footprints: Vec<Vec<Option<Vec<Vector2<f64>>>>> = epochs
            .iter()
            .map(|e| {
                e.block.images.iter().map(|im| footprint(e.block.camera_of(im).ok()?, &im.pose, &surface)).collect()
            })
            .collect();
        let mut candidates = 0;
        let mut pairs = Vec::new();
        for ea in (0..epochs.len()).rev() {
            for eb in 0..ea {
                for ia in 0..epochs[ea].block.images.len() {
                    for ib in 0..epochs[eb].block.images.len() {
                        candidates += 1;
                        let (Some(fa), Some(fb)) = (&footprints[ea][ia], &footprints[eb][ib]) else { continue };
                        let ratio = overlap_ratio(fa, fb);
                        if ratio >= self.config.min_overlap && ratio > 0.0 {
                            pairs.push((ea, ia, eb, ib, ratio));
                        }
                    }
                }
            }
        }
        Ok((candidates, pairs))
    }

    pub fn stage_match(&self) -> Result<MatchSummary> {
        tag("match", self.match_inner())
    }

    fn match_inner(&self) -> Result<MatchSummary> {
        let ids = self.epoch_ids();
        let epochs: Vec<MatchEpoch> = ids.iter().map(|id| self.match_epoch(id)).collect::<Result<_>>()?;
        let (candidate_pairs, pairs) = self.candidate_pairs(&epochs)?;
        let cfg = self.config.precise_config();
        let k = self.config.image_downsample;
        let matcher = self.config.matcher();
        let buffer = buffer_pixels(&cfg.tiling, cfg.buffer_fraction);
        let results: Vec<(PairEntry, Vec<MatchRecord>)> = pairs
            .par_iter()
            .map(|&(ea, ia, eb, ib, overlap)| {
                let (a, b) = (epochs[ea].view(ia), epochs[eb].view(ib));
                let (id_a, id_b) = (&epochs[ea].block.images[ia].image_id, &epochs[eb].block.images[ib].image_id);
                let tentative = match cfg.mode {
                    MatchMode::Patch => {
                        let pairings = pair_tiles(&a, &b, &cfg.tiling, buffer);
                        patch_match_pair(a.image, b.image, &pairings, matcher.as_ref(), &format!("{id_a}-{id_b}"))?
                    }
                    MatchMode::Guided => guided_match_pair(&a, &b, &cfg.guided)?,
                };
                let records: Vec<MatchRecord> = tentative
                    .iter()
                    .map(|m| MatchRecord {
                        image_a: id_a.clone(),
                        image_b: id_b.clone(),
                        pixels: match_to_full(m, k),
                        stage: Stage::Tentative,
                    })
                    .collect();
                let entry = PairEntry {
                    image_a: id_a.clone(),
                    epoch_a: ids[ea].clone(),
                    image_b: id_b.clone(),
                    epoch_b: ids[eb].clone(),
                    overlap,
                    tentative: records.len(),
                    file: pair_file_name(id_a, id_b),
                };
                Ok((entry, records))
            })
            .collect::<Result<_>>()?;
        let mut entries = Vec::with_capacity(results.len());
        for (entry, records) in results {
            write_match_file(&records, &self.out(Path::new("match").join(&entry.file)))?;
            log::info!("match {} - {}: {} tentative", entry.image_a, entry.image_b, entry.tentative);
            entries.push(entry);
        }
        let summary = MatchSummary { mode: cfg.mode, candidate_pairs, pairs: entries };
        write_json(&self.out("match/pairs.json"), &summary)?;
        Ok(summary)
    }

    pub fn stage_filter(&self) -> Result<FilterSummary> {
        tag("filter", self.filter_inner())
    }

    fn filter_inner(&self) -> Result<FilterSummary> {
        let pairs: MatchSummary = read_json(&self.out("match/pairs.json"))?;
        let ids = self.epoch_ids();
        let epochs: Vec<MatchEpoch> = ids.iter().map(|id| self.match_epoch(id)).collect::<Result<_>>()?;
        let k = self.config.image_downsample;
        let cfg = self.config.precise_config();
        let reference = self.load_input(&self.reference_id(), false)?;
        let gsd = mean_gsd(&reference)? * k as f64;
        let threshold = cfg.gsd_factor * gsd;
        let locate = |epoch: &str, image: &str| -> Result<(usize, usize)> {
            let e = ids
                .iter()
                .position(|i| i == epoch)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown epoch {epoch:?}")))?;
            let i = epochs[e]
                .block
                .images
                .iter()
                .position(|im| im.image_id == image)
                .ok_or_else(|| Error::UnknownImage(image.to_string()))?;
            Ok((e, i))
        };
        let results: Vec<(FilterEntry, Vec<MatchRecord>)> = pairs
            .pairs
            .par_iter()
            .map(|p| {
                let (ea, ia) = locate(&p.epoch_a, &p.image_a)?;
                let (eb, ib) = locate(&p.epoch_b, &p.image_b)?;
                let (a, b) = (epochs[ea].view(ia), epochs[eb].view(ib));
                let records = read_match_file(&self.out(Path::new("match").join(&p.file)))?;
                let full: Vec<PixelMatch> = records.iter().map(|r| r.pixels).collect();
                let scaled: Vec<PixelMatch> = full.iter().map(|m| full_to_match(m, k)).collect();
                // exact-coordinate map back to the stored full-resolution matches
                let back: BTreeMap<[u64; 4], PixelMatch> =
                    scaled.iter().zip(&full).map(|(s, f)| (s.coord_bits(), *f)).collect();
                let mut entry = FilterEntry {
                    image_a: p.image_a.clone(),
                    image_b: p.image_b.clone(),
                    tentative: full.len(),
                    lifted: 0,
                    enhanced: 0,
                    final_matches: 0,
                    helmert: None,
                    nested: true,
                };
                let mut enhanced = Vec::new();
                let mut finals = Vec::new();
                match filter_3d_ransac(&scaled, &a, &b, threshold, cfg.ransac_iterations, cfg.seed) {
                    Ok(f) => {
                        entry.lifted = f.lifted;
                        entry.helmert = Some(f.helmert);
                        if let Some(sim) = view_similarity(&a, &b) {
                            finals =
                                validate_ncc(&f.enhanced, a.image, b.image, &sim, cfg.ncc_window, cfg.ncc_threshold)?;
                        }
                        enhanced = f.enhanced;
                    }
                    Err(e @ (Error::TooFewValid3D { .. } | Error::NoModelFound { .. })) => {
                        log::info!("filter {} - {}: no 3D consensus ({e})", p.image_a, p.image_b);
                    }
                    Err(e) => return Err(e),
                }
                let tentative_keys: BTreeSet<[u64; 4]> = scaled.iter().map(|m| m.coord_bits()).collect();
                let enhanced_keys: BTreeSet<[u64; 4]> = enhanced.iter().map(|c| c.pixels.coord_bits()).collect();
                entry.nested = enhanced_keys.is_subset(&tentative_keys)
                    && finals.iter().all(|c| enhanced_keys.contains(&c.pixels.coord_bits()));
                entry.enhanced = enhanced.len();
                entry.final_matches = finals.len();
                let rec = |m: PixelMatch, stage| MatchRecord {
                    image_a: p.image_a.clone(),
                    image_b: p.image_b.clone(),
                    pixels: m,
                    stage,
                };
                let out: Vec<MatchRecord> = full
                    .iter()
                    .map(|m| rec(*m, Stage::Tentative))
                    .chain(enhanced.iter().map(|c| rec(back[&c.pixels.coord_bits()], Stage::Enhanced)))
                    .chain(finals.iter().map(|c| rec(back[&c.pixels.coord_bits()], Stage::Final)))
                    .collect();
                Ok((entry, out))
            })
            .collect::<Result<_>>()?;
        let mut entries = Vec::with_capacity(results.len());
        for ((entry, records), p) in results.into_iter().zip(&pairs.pairs) {
            write_match_file(&records, &self.out(Path::new("filter").join(&p.file)))?;
            log::info!(
                "filter {} - {}: tentative {} enhanced {} final {}",
                entry.image_a,
                entry.image_b,
                entry.tentative,
                entry.enhanced,
                entry.final_matches
            );
            entries.push(entry);
        }
        let summary = FilterSummary {
            gsd,
            threshold,
            tentative: entries.iter().map(|e| e.tentative).sum(),
            enhanced: entries.iter().map(|e| e.enhanced).sum(),
            final_matches: entries.iter().map(|e| e.final_matches).sum(),
            all_nested: entries.iter().all(|e| e.nested),
            pairs: entries,
        };
        write_json(&self.out("filter/summary.json"), &summary)?;
        Ok(summary)
    }

    /// Final inter-epoch matches of the filter stage as multi-image tie
    /// points (observations sharing an exact pixel are merged).
    pub fn inter_tie_points(&self) -> Result<(Vec<TiePoint>, usize)> {
        let pairs: MatchSummary = read_json(&self.out("match/pairs.json"))?;
        let mut edges = Vec::new();
        for p in &pairs.pairs {
            for r in read_match_file(&self.out(Path::new("filter").join(&p.file)))? {
                if r.stage == Stage::Final {
                    let m = r.pixels;
                    edges.push((
                        (r.image_a, m.xa.to_bits(), m.ya.to_bits()),
                        (r.image_b, m.xb.to_bits(), m.yb.to_bits()),
                    ));
                }
            }
        }
        Ok(merge_tracks(&edges))
    }

    pub fn stage_ba(&self) -> Result<BaReport> {
        tag("ba", self.ba_inner())
    }

    fn ba_inner(&self) -> Result<BaReport> {
        // reference first: a free-network datum then holds one of its images
        let reference_id = self.reference_id();
        let mut ids = self.epoch_ids();
        ids.sort_by_key(|id| *id != reference_id);
        let blocks: Vec<EpochBlock> = ids.iter().map(|id| self.load_coregistered(id, false)).collect::<Result<_>>()?;
        let mut intra = Vec::new();
        for id in &ids {
            intra.extend(self.intra_ties(id)?);
        }
        let (inter, inconsistent) = self.inter_tie_points()?;
        let merged = inter.len();
        let cfg = &self.config.ba;
        let mut policy = cfg.policy.clone();
        if cfg.fix_reference {
            policy.fixed_epochs.insert(reference_id.clone());
        }

        // thin the inter-epoch points on their initial reprojection RMS
        let mut probe = BaProblem::from_blocks(&blocks, inter, policy.clone(), cfg.settings)?;
        let mut dropped = probe.initialize_points();
        let rms = probe.point_rms();
        let sizes: BTreeMap<String, (usize, usize)> = probe
            .images
            .iter()
            .map(|im| {
                let c = &probe.cameras[&im.camera_id];
                (im.image_id.clone(), (c.width(), c.height()))
            })
            .collect();
        let inter = reduce_matches(&probe.tie_points, &rms, &sizes, cfg.reduce_grid, cfg.reduce_cap);
        let kept = inter.len();

        let intra_count = intra.len();
        let mut ties = intra;
        ties.extend(inter);
        let mut problem = BaProblem::from_blocks(&blocks, ties, policy, cfg.settings)?;
        dropped.extend(problem.initialize_points());
        let initial = problem.clone();
        let (solved, phases) = if cfg.two_phase {
            let (s, r) = problem.solve_two_phase()?;
            (s, r.to_vec())
        } else {
            let (s, r) = problem.solve_lm()?;
            (s, vec![r])
        };
        // points seen only by the reference epoch carry its frame
        let reference_images: BTreeSet<&str> = blocks[0].images.iter().map(|im| im.image_id.as_str()).collect();
        let pairs: Vec<(Vector3<f64>, Vector3<f64>, bool)> = solved
            .tie_points
            .iter()
            .zip(&initial.tie_points)
            .map(|(s, i)| {
                (s.ground, i.ground, i.observations.iter().all(|o| reference_images.contains(o.image_id.as_str())))
            })
            .collect();
        let only_reference = pairs.iter().filter(|p| p.2).count() >= 3;
        let anchors: Vec<(Vector3<f64>, Vector3<f64>)> =
            pairs.iter().filter(|p| p.2 || !only_reference).map(|p| (p.0, p.1)).collect();
        let (solved, to_reference) = similarity_to_metric(&solved, &anchors)?;
        for (block, id) in solved.to_blocks(&blocks)?.iter().zip(&ids) {
            block.orientation().write(&self.out(Path::new("ba").join(id).join("orientation.json")))?;
        }
        write_tie_points(&solved.tie_points, &self.out("ba/ties.txt"))?;
        for (i, r) in phases.iter().enumerate() {
            log::info!(
                "ba phase {}: {} iterations, RMS {:.4} → {:.4} px ({:?})",
                i + 1,
                r.iterations,
                r.initial_rms,
                r.final_rms,
                r.termination
            );
        }
        let report = BaReport {
            intra_tie_points: intra_count,
            inter_tie_points_merged: merged,
            inter_tie_points_kept: kept,
            inconsistent_tracks: inconsistent,
            dropped_untriangulable: dropped,
            phases,
            to_reference,
            fixed_epochs: solved.policy.fixed_epochs.iter().cloned().collect(),
        };
        write_json(&self.out("ba/report.json"), &report)?;
        Ok(report)
    }

    fn has_adjusted(&self) -> bool {
        self.out("ba/report.json").exists()
    }

    pub fn stage_checkpoints(&self) -> Result<Vec<CheckpointEntry>> {
        tag("checkpt", self.checkpoints_inner())
    }

    fn checkpoints_inner(&self) -> Result<Vec<CheckpointEntry>> {
        let mut out = Vec::new();
        for id in self.epoch_ids() {
            let path = self.checkpoints_path(&id)?;
            if !path.exists() {
                continue;
            }
            let points = read_checkpoints(&path)?;
            let coregistered = checkpoint_accuracy(&points, &self.load_coregistered(&id, false)?)?;
            let adjusted = if self.has_adjusted() {
                Some(checkpoint_accuracy(&points, &self.load_adjusted(&id, false)?)?)
            } else {
                None
            };
            let a = coregistered.mean_abs();
            log::info!("checkpt {id}: co-registered |μ| = ({:.3}, {:.3}, {:.3})", a[0], a[1], a[2]);
            if let Some(r) = &adjusted {
                let b = r.mean_abs();
                log::info!("checkpt {id}: adjusted |μ| = ({:.3}, {:.3}, {:.3})", b[0], b[1], b[2]);
            }
            out.push(CheckpointEntry { epoch: id, coregistered, adjusted });
        }
        write_json(&self.out("eval/checkpoints.json"), &out)?;
        Ok(out)
    }

    pub fn stage_dod(&self) -> Result<Vec<DodEntry>> {
        tag("dod", self.dod_inner())
    }

    fn dod_inner(&self) -> Result<Vec<DodEntry>> {
        let reference_id = self.reference_id();
        let reference = self.load_input(&reference_id, false)?;
        let ref_dsm = reference.dsm.as_ref();
        let sparse_grid = coarser_grid(&ref_dsm.grid, self.config.sparse_dod_cells)?;
        let mut out = Vec::new();
        for id in self.epoch_ids() {
            if id == reference_id {
                continue;
            }
            let co = self.load_coregistered(&id, false)?;
            let dsm = match dod(&co.surface(), ref_dsm) {
                Ok((raster, stats)) => {
                    write_raster(&raster, &self.out(format!("eval/dod_{id}.bin")))?;
                    Some(stats)
                }
                Err(Error::NoOverlap) => None,
                Err(e) => return Err(e),
            };
            let ties = self.intra_ties(&id)?;
            let sparse = |block: &EpochBlock| -> Result<Option<DodStats>> {
                let pts = triangulate_ties(&ties, block);
                match point_dod(&pts, ref_dsm, &sparse_grid) {
                    Ok((_, s)) => Ok(Some(s)),
                    Err(Error::NoOverlap) => Ok(None),
                    Err(e) => Err(e),
                }
            };
            let sparse_coregistered = sparse(&co)?;
            let sparse_adjusted = if self.has_adjusted() { sparse(&self.load_adjusted(&id, false)?)? } else { None };
            out.push(DodEntry { epoch: id, dsm, sparse_coregistered, sparse_adjusted });
        }
        write_json(&self.out("eval/dod.json"), &out)?;
        Ok(out)
    }

    pub fn stage_displacement(&self) -> Result<Vec<DisplacementEntry>> {
        tag("displace", self.displacement_inner())
    }

    fn displacement_inner(&self) -> Result<Vec<DisplacementEntry>> {
        let reference_id = self.reference_id();
        let load = |id: &str| {
            if self.has_adjusted() {
                self.load_adjusted(id, true)
            } else {
                self.load_coregistered(id, true)
            }
        };
        let reference = load(&reference_id)?;
        let grid = reference.dsm.grid;
        let on_grid = |block: &EpochBlock| -> Result<GrayImage> {
            let mut b = block.clone();
            b.dsm = Arc::new(resample_surface(&block.surface(), &grid));
            b.dsm_transform = Helmert3D::identity();
            orthomosaic(&b, &grid)
        };
        let ortho_ref = on_grid(&reference)?;
        let mut out = Vec::new();
        for id in self.epoch_ids() {
            if id == reference_id {
                continue;
            }
            let ortho = on_grid(&load(&id)?)?;
            let map = displacement_map(&ortho_ref, &ortho, &grid, &self.config.displacement)?;
            let along = map.along_azimuth(self.config.displacement_azimuth_deg.to_radians());
            for (band, r) in [("dx", &map.dx), ("dy", &map.dy), ("peak", &map.peak), ("azimuth", &along)] {
                write_raster(r, &self.out(format!("eval/displacement_{id}_{band}.bin")))?;
            }
            let dx: Vec<f64> = map.dx.valid_values().collect();
            let dy: Vec<f64> = map.dy.valid_values().collect();
            let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            out.push(DisplacementEntry { epoch: id, valid: dx.len(), mean_dx: mean(&dx), mean_dy: mean(&dy) });
        }
        write_json(&self.out("eval/displacement.json"), &out)?;
        Ok(out)
    }

    /// All stages in order; evaluation stages run where their inputs exist.
    pub fn run(&self) -> Result<RunSummary> {
        let coreg = self.stage_coreg()?;
        let matching = self.stage_match()?;
        let filter = self.stage_filter()?;
        let ba = self.stage_ba()?;
        let checkpoints = self.stage_checkpoints()?;
        let dod = self.stage_dod()?;
        let displacement = self.stage_displacement()?;
        let summary = RunSummary { coreg, matching, filter, ba, checkpoints, dod, displacement };
        write_json(&self.out("summary.json"), &summary)?;
        Ok(summary)
    }
}

/// Grid over the same extent with cells `factor` times larger.
fn coarser_grid(grid: &GeoGrid, factor: usize) -> Result<GeoGrid> {
    GeoGrid::new(
        grid.width.div_ceil(factor),
        grid.height.div_ceil(factor),
        grid.origin_x,
        grid.origin_y,
        grid.cell_size * factor as f64,
        grid.nodata,
    )
}

type ObsKey = (String, u64, u64);

/// Union of two-view matches into tracks; tracks observing one image at two
/// different pixels are discarded (returned count).
pub fn merge_tracks(edges: &[(ObsKey, ObsKey)]) -> (Vec<TiePoint>, usize) {
    let mut index: BTreeMap<&ObsKey, usize> = BTreeMap::new();
    let mut keys: Vec<&ObsKey> = Vec::new();
    for (a, b) in edges {
        for k in [a, b] {
            index.entry(k).or_insert_with(|| {
                keys.push(k);
                keys.len() - 1
            });
        }
    }
    let mut parent: Vec<usize> = (0..keys.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, index[a]), find(&mut parent, index[b]));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..keys.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut points = Vec::new();
    let mut inconsistent = 0;
    for members in groups.values() {
        let images: BTreeSet<&str> = members.iter().map(|&i| keys[i].0.as_str()).collect();
        if images.len() != members.len() {
            inconsistent += 1;
            continue;
        }
        points.push(TiePoint {
            id: format!("m{:06}", points.len()),
            kind: TieKind::Inter,
            observations: members
                .iter()
                .map(|&i| Observation {
                    image_id: keys[i].0.clone(),
                    pixel: Vector2::new(f64::from_bits(keys[i].1), f64::from_bits(keys[i].2)),
                    weight: 1.0,
                })
                .collect(),
            ground: Vector3::zeros(),
        });
    }
    (points, inconsistent)
}

/// Triangulates tie points with a block's orientation, skipping any that
/// reference other images or cannot be triangulated.
pub fn triangulate_ties(ties: &[TiePoint], block: &EpochBlock) -> Vec<Vector3<f64>> {
    ties.par_iter()
        .filter_map(|t| {
            let rays = t
                .observations
                .iter()
                .map(|o| {
                    let img = block.image(&o.image_id)?;
                    block.camera_of(img)?.backproject_ray(&img.pose, &o.pixel)
                })
                .collect::<Result<Vec<_>>>()
                .ok()?;
            triangulate_rays(&rays).ok()
        })
        .collect()
}

/// Writes a synthetic scene into `root` with a pipeline configuration tuned
/// for it (no downsampling; tiles covering the small rasters).
pub fn write_synthetic_workspace(
    root: &Path,
    scene: &crate::synthetic::Scene,
    config_name: &str,
) -> Result<PipelineConfig> {
    scene.write(root)?;
    let f = &scene.spec.flight;
    let side = f.image_width.max(f.image_height);
    let mut config = PipelineConfig {
        epochs: scene
            .epochs
            .iter()
            .map(|e| EpochInput { id: e.block.epoch_id.clone(), dir: PathBuf::from(&e.block.epoch_id) })
            .collect(),
        image_downsample: 1,
        dsm_extra_downsample: 1,
        ..PipelineConfig::default()
    };
    config.precise.tiling = crate::rough_coreg::TilingSpec { tile_size: side, stride: side };
    write_json(&root.join(config_name), &config)?;
    Ok(config)
}
