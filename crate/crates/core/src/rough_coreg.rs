//! Rough co-registration of a free epoch onto the reference epoch by
//! matching grayscale renderings of their DSMs.
//!
//! The reference DSM image is the master, the free DSM image the secondary.
//! Both are cut into tiles and every master tile is matched against every
//! secondary tile, for each of four quarter-turn rotations of the secondary.
//! The best hypothesis (most 2D-similarity inliers) is lifted to 3D with the
//! DSM elevations and a Helmert transform free → reference is estimated.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cameras::{apply_helmert_to_pose, EpochBlock};
use crate::error::{Error, Result};
use crate::matcher::{PixelMatch, TileMatcher};
use crate::rasters::{crop, dsm_to_gray, quarter_turn_unrotate, DsmRaster, GrayImage, PixelRect};
use crate::transforms::{ransac_helmert3d, ransac_similarity2d, Helmert3D, RansacConfig, RansacOutcome, Similarity2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingSpec {
    pub tile_size: usize,
    pub stride: usize,
}

impl Default for TilingSpec {
    fn default() -> Self {
        TilingSpec { tile_size: 512, stride: 512 }
    }
}

impl TilingSpec {
    pub fn new(tile_size: usize, stride: usize) -> Result<Self> {
        let t = TilingSpec { tile_size, stride };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.stride == 0 || self.stride > self.tile_size {
            return Err(Error::InvalidConfig(format!(
                "tiling needs 0 < stride ({}) <= tile size ({})",
                self.stride, self.tile_size
            )));
        }
        Ok(())
    }

    /// Tile origins along one axis. The last tile is moved inwards so that
    /// every tile is full-size when the image is at least one tile long.
    fn starts(&self, len: usize) -> Vec<usize> {
        if len <= self.tile_size {
            return vec![0];
        }
        let last = len - self.tile_size;
        let mut out: Vec<usize> = (0..).map(|i| i * self.stride).take_while(|s| *s < last).collect();
        out.push(last);
        out
    }

    /// Tiles in row-major order.
    pub fn tiles(&self, width: usize, height: usize) -> Vec<PixelRect> {
        let xs = self.starts(width);
        let ys = self.starts(height);
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for &y in &ys {
            for &x in &xs {
                out.push(PixelRect::new(x as i64, y as i64, self.tile_size.min(width), self.tile_size.min(height)));
            }
        }
        out
    }
}

/// Number of counter-clockwise quarter turns applied to the secondary image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RotationHypothesis {
    pub quarter_turns: u8,
}

impl RotationHypothesis {
    pub const ALL: [RotationHypothesis; 4] = [
        RotationHypothesis { quarter_turns: 0 },
        RotationHypothesis { quarter_turns: 1 },
        RotationHypothesis { quarter_turns: 2 },
        RotationHypothesis { quarter_turns: 3 },
    ];
}

/// Matches every master tile against every secondary tile and merges the
/// results in full-image coordinates (master tile index, then secondary).
/// Exact duplicates, which overlapping tiles can produce, are dropped.
pub fn tile_one_to_many(
    master: &GrayImage,
    secondary: &GrayImage,
    spec: &TilingSpec,
    matcher: &dyn TileMatcher,
) -> Result<Vec<PixelMatch>> {
    spec.validate()?;
    let mt = spec.tiles(master.width, master.height);
    let st = spec.tiles(secondary.width, secondary.height);
    let m_imgs = mt.iter().map(|r| crop(master, *r)).collect::<Result<Vec<_>>>()?;
    let s_imgs = st.iter().map(|r| crop(secondary, *r)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..mt.len()).flat_map(|i| (0..st.len()).map(move |j| (i, j))).collect();
    let per_pair: Vec<Result<Vec<PixelMatch>>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (ti, ri) = &m_imgs[i];
            let (tj, rj) = &s_imgs[j];
            let found = matcher.match_tiles(ti, tj, &format!("m{i}-s{j}"))?;
            Ok(found
                .into_iter()
                .map(|m| {
                    PixelMatch::new(
                        m.xa + ri.x as f64,
                        m.ya + ri.y as f64,
                        m.xb + rj.x as f64,
                        m.yb + rj.y as f64,
                        m.score,
                    )
                })
                .collect())
        })
        .collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in per_pair {
        for m in r? {
            if seen.insert(m.coord_bits()) {
                out.push(m);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub quarter_turns: u8,
    pub matches: usize,
    pub inliers: usize,
}

/// Result of the rotation search. Matches are master (`a`) ↔ unrotated
/// secondary (`b`) pixels; the similarity maps secondary → master.
#[derive(Debug, Clone)]
pub struct HypothesisSearch {
    pub chosen: RotationHypothesis,
    pub similarity: Similarity2D,
    pub matches: Vec<PixelMatch>,
    pub inlier_mask: Vec<bool>,
    pub reports: Vec<HypothesisReport>,
}

impl HypothesisSearch {
    pub fn inliers(&self) -> Vec<PixelMatch> {
        self.matches.iter().zip(&self.inlier_mask).filter(|(_, k)| **k).map(|(m, _)| *m).collect()
    }
}

pub fn match_rotation_hypotheses(
    master: &GrayImage,
    secondary: &GrayImage,
    spec: &TilingSpec,
    matcher: &dyn TileMatcher,
    ransac_cfg: &RansacConfig,
) -> Result<HypothesisSearch> {
    ransac_cfg.validate()?;
    let mut best: Option<(RotationHypothesis, Vec<PixelMatch>, RansacOutcome<Similarity2D>)> = None;
    let mut reports = Vec::new();
    for hyp in RotationHypothesis::ALL {
        let rotated = secondary.rotate_quarter(hyp.quarter_turns);
        let matches: Vec<PixelMatch> = tile_one_to_many(master, &rotated, spec, matcher)?
            .into_iter()
            .map(|m| {
                let (x, y) = quarter_turn_unrotate(hyp.quarter_turns, secondary.width, secondary.height, m.xb, m.yb);
                PixelMatch { xb: x, yb: y, ..m }
            })
            .collect();
        let data: Vec<_> = matches.iter().map(|m| (Vector2::new(m.xb, m.yb), Vector2::new(m.xa, m.ya))).collect();
        let outcome = match ransac_similarity2d(&data, ransac_cfg) {
            Ok(o) => Some(o),
            Err(Error::NoModelFound { .. }) | Err(Error::DegenerateConfiguration(_)) => None,
            Err(e) => return Err(e),
        };
        let inliers = outcome.as_ref().map_or(0, |o| o.inlier_count);
        log::debug!("hypothesis {}: {} matches, {} inliers", hyp.quarter_turns, matches.len(), inliers);
        reports.push(HypothesisReport { quarter_turns: hyp.quarter_turns, matches: matches.len(), inliers });
        if let Some(o) = outcome {
            let better = best.as_ref().is_none_or(|(_, _, b)| o.inlier_count > b.inlier_count);
            if better {
                best = Some((hyp, matches, o));
            }
        }
    }
    let (chosen, matches, outcome) = best.ok_or(Error::NoHypothesisSucceeded)?;
    Ok(HypothesisSearch { chosen, similarity: outcome.model, matches, inlier_mask: outcome.inliers, reports })
}

/// 3D point pair (free, reference) for each match whose cells are valid.
/// Match `a` coordinates are reference DSM pixels, `b` free DSM pixels.
pub fn lift_matches(inliers: &[PixelMatch], dsm_f: &DsmRaster, dsm_r: &DsmRaster) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    inliers
        .iter()
        .filter_map(|m| {
            let lift = |dsm: &DsmRaster, c: f64, r: f64| {
                let (x, y) = dsm.grid.cell_to_world(c, r);
                dsm.sample_bilinear(x, y).map(|z| Vector3::new(x, y, z))
            };
            Some((lift(dsm_f, m.xb, m.yb)?, lift(dsm_r, m.xa, m.ya)?))
        })
        .collect()
}

/// Lifts DSM-pixel correspondences to 3D and estimates the Helmert transform
/// free → reference with RANSAC.
pub fn lift_and_estimate_helmert(
    inliers: &[PixelMatch],
    dsm_f: &DsmRaster,
    dsm_r: &DsmRaster,
    ransac_cfg: &RansacConfig,
) -> Result<RansacOutcome<Helmert3D>> {
    let pairs = lift_matches(inliers, dsm_f, dsm_r);
    if pairs.len() < 3 {
        return Err(Error::TooFewValid3D { found: pairs.len(), needed: 3 });
    }
    ransac_helmert3d(&pairs, ransac_cfg)
}

/// What the rough stage matches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoughSource {
    /// Grayscale renderings of the DSMs.
    #[default]
    Dsm,
    /// Orthophoto mosaics on the DSM grids, for flat terrain.
    Orthophoto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoughConfig {
    pub tiling: TilingSpec,
    pub source: RoughSource,
    /// Block-average factor applied to both DSMs before matching.
    pub dsm_downsample: usize,
    /// 2D RANSAC on DSM pixels.
    pub similarity_ransac: RansacConfig,
    pub helmert_iterations: usize,
    /// 3D RANSAC threshold in reference DSM cells.
    pub helmert_threshold_cells: f64,
}

impl Default for RoughConfig {
    fn default() -> Self {
        RoughConfig {
            tiling: TilingSpec::default(),
            source: RoughSource::Dsm,
            dsm_downsample: 12,
            similarity_ransac: RansacConfig::new(1000, 3.0, 0),
            helmert_iterations: 1000,
            helmert_threshold_cells: 3.0,
        }
    }
}

impl RoughConfig {
    pub fn validate(&self) -> Result<()> {
        self.tiling.validate()?;
        self.similarity_ransac.validate()?;
        if self.dsm_downsample == 0 {
            return Err(Error::InvalidConfig("DSM downsample factor must be >= 1".into()));
        }
        if self.helmert_iterations == 0 || !(self.helmert_threshold_cells > 0.0) {
            return Err(Error::InvalidConfig("Helmert RANSAC needs iterations >= 1 and threshold > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CoRegistration {
    /// Free epoch frame → reference epoch frame.
    pub helmert: Helmert3D,
    pub chosen_hypothesis: RotationHypothesis,
    /// Secondary (free) → master (reference) DSM pixels.
    pub similarity2d: Similarity2D,
    /// 2D inliers, reference (`a`) ↔ free (`b`) DSM pixels.
    pub inliers: Vec<PixelMatch>,
    pub hypotheses: Vec<HypothesisReport>,
    pub helmert_inliers: usize,
    pub helmert_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoregReport {
    pub free_epoch: String,
    pub reference_epoch: String,
    pub hypotheses: Vec<HypothesisReport>,
    pub chosen_quarter_turns: u8,
    pub similarity2d: Similarity2D,
    pub helmert: Helmert3D,
    pub inlier_count: usize,
    pub helmert_inliers: usize,
    pub helmert_rms: f64,
    pub inliers_path: String,
}

impl CoRegistration {
    pub fn report(&self, free: &str, reference: &str, inliers_path: &str) -> CoregReport {
        CoregReport {
            free_epoch: free.to_string(),
            reference_epoch: reference.to_string(),
            hypotheses: self.hypotheses.clone(),
            chosen_quarter_turns: self.chosen_hypothesis.quarter_turns,
            similarity2d: self.similarity2d,
            helmert: self.helmert,
            inlier_count: self.inliers.len(),
            helmert_inliers: self.helmert_inliers,
            helmert_rms: self.helmert_rms,
            inliers_path: inliers_path.to_string(),
        }
    }
}

/// DSM in the frame of its block's poses, resampled onto its own grid.
fn block_dsm(block: &EpochBlock, factor: usize) -> DsmRaster {
    if factor > 1 {
        block.dsm.downsample(factor)
    } else {
        (*block.dsm).clone()
    }
}

/// Estimates the transform free → reference and returns the free block with
/// poses moved into the reference frame and the Helmert attached to its DSM.
pub fn coregister_epoch(
    free: &EpochBlock,
    reference: &EpochBlock,
    cfg: &RoughConfig,
    matcher: &dyn TileMatcher,
) -> Result<(CoRegistration, EpochBlock)> {
    cfg.validate()?;
    let dsm_f = block_dsm(free, cfg.dsm_downsample);
    let dsm_r = block_dsm(reference, cfg.dsm_downsample);
    let (gray_r, gray_f) = match cfg.source {
        RoughSource::Dsm => (dsm_to_gray(&dsm_r)?, dsm_to_gray(&dsm_f)?),
        RoughSource::Orthophoto => (
            crate::evaluation::orthomosaic(reference, &dsm_r.grid)?,
            crate::evaluation::orthomosaic(free, &dsm_f.grid)?,
        ),
    };
    let search = match_rotation_hypotheses(&gray_r, &gray_f, &cfg.tiling, matcher, &cfg.similarity_ransac)?;
    let inliers = search.inliers();
    let helmert_cfg = RansacConfig {
        iterations: cfg.helmert_iterations,
        inlier_threshold: cfg.helmert_threshold_cells * dsm_r.grid.cell_size,
        ..cfg.similarity_ransac
    };
    // DSM coordinates are in each raster's own frame; bring both into the
    // frames their poses live in before estimating.
    let outcome = lift_and_estimate_helmert(&inliers, &dsm_f, &dsm_r, &helmert_cfg)?;
    let local = outcome.model;
    let helmert = reference.dsm_transform.compose(&local).compose(&free.dsm_transform.inverse());

    let mut co = free.clone();
    for img in &mut co.images {
        img.pose = apply_helmert_to_pose(&img.pose, &helmert);
    }
    co.dsm = Arc::clone(&free.dsm);
    co.dsm_transform = helmert.compose(&free.dsm_transform);
    let result = CoRegistration {
        helmert,
        chosen_hypothesis: search.chosen,
        similarity2d: search.similarity,
        inliers,
        hypotheses: search.reports,
        helmert_inliers: outcome.inlier_count,
        helmert_rms: outcome.inlier_rms,
    };
    Ok((result, co))
}

/// Writes DSM-pixel matches as `x_ref y_ref x_free y_free score` lines.
pub fn write_pixel_matches(matches: &[PixelMatch], path: &Path) -> Result<()> {
    let mut text = String::new();
    for m in matches {
        text.push_str(&format!("{} {} {} {} {}\n", m.xa, m.ya, m.xb, m.yb, m.score));
    }
    crate::io::write_text(path, &text)
}
