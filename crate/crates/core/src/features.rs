//! Difference-of-Gaussians keypoints with gradient-histogram descriptors, and
//! mutual-nearest-neighbor matching with a two-sided ratio test.
//!
//! The blur is evaluated as the average of the horizontal-then-vertical and
//! vertical-then-horizontal separable passes with symmetric tap pairing, so
//! the scale space is exactly equivariant under quarter turns and mirrors.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasters::GrayImage;

pub const DESCRIPTOR_LEN: usize = 128;
pub const MIN_IMAGE_SIDE: usize = 32;
const KPD_MAGIC: &[u8; 4] = b"KPD1";

const ORI_BINS: usize = 36;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_CLAMP: f32 = 0.2;
const BORDER: usize = 5;
const INPUT_BLUR: f64 = 0.5;

pub type Descriptor = [f32; DESCRIPTOR_LEN];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Detection scale in input pixels.
    pub scale: f64,
    /// Dominant gradient direction, radians in (-pi, pi], image axes.
    pub orientation: f64,
    pub response: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiftConfig {
    pub scales_per_octave: usize,
    pub sigma0: f64,
    /// Minimum |DoG| on the [0, 1] intensity scale, divided by the scale count.
    pub contrast_threshold: f64,
    /// Maximum principal-curvature ratio.
    pub edge_threshold: f64,
    /// Skip orientation assignment (orientation = 0) for rotation-variant use.
    pub upright: bool,
}

impl Default for SiftConfig {
    fn default() -> Self {
        SiftConfig { scales_per_octave: 3, sigma0: 1.6, contrast_threshold: 0.04, edge_threshold: 10.0, upright: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub index_a: usize,
    pub index_b: usize,
    pub score: f64,
}

/// A single-channel float image used inside the scale space.
#[derive(Debug, Clone)]
struct Plane {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn gradient(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = self.at(x + 1, y) as f64 - self.at(x - 1, y) as f64;
        let dy = self.at(x, y + 1) as f64 - self.at(x, y - 1) as f64;
        (dx, dy)
    }

    fn decimate(&self) -> Plane {
        let width = self.width.div_ceil(2);
        let height = self.height.div_ceil(2);
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { width, height, data }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum = k[0] + 2.0 * k[1..].iter().sum::<f64>();
    for v in &mut k {
        *v /= sum;
    }
    k.into_iter().map(|v| v as f32).collect()
}

/// One separable pass with taps paired symmetrically around the center.
/// `along_x` selects the axis; borders replicate the edge sample.
fn blur_pass(src: &Plane, kernel: &[f32], along_x: bool) -> Plane {
    let (w, h) = (src.width, src.height);
    let mut out = vec![0f32; w * h];
    let r = kernel.len() - 1;
    let len = if along_x { w } else { h };
    let idx = |i: isize| i.clamp(0, len as isize - 1) as usize;
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let fetch = |i: usize| if along_x { src.data[y * w + i] } else { src.data[i * w + x] };
            let c = if along_x { x } else { y } as isize;
            let mut acc = kernel[0] * fetch(c as usize);
            for (k, kv) in kernel.iter().enumerate().take(r + 1).skip(1) {
                acc += kv * (fetch(idx(c - k as isize)) + fetch(idx(c + k as isize)));
            }
            *o = acc;
        }
    });
    Plane { width: w, height: h, data: out }
}

fn blur(src: &Plane, sigma: f64) -> Plane {
    let k = gaussian_kernel(sigma);
    let hv = blur_pass(&blur_pass(src, &k, true), &k, false);
    let vh = blur_pass(&blur_pass(src, &k, false), &k, true);
    let data = hv.data.iter().zip(&vh.data).map(|(a, b)| 0.5 * (a + b)).collect();
    Plane { width: src.width, height: src.height, data }
}

struct Octave {
    gaussians: Vec<Plane>,
    dogs: Vec<Plane>,
}

fn build_pyramid(img: &GrayImage, cfg: &SiftConfig) -> Vec<Octave> {
    let s = cfg.scales_per_octave;
    let base =
        Plane { width: img.width, height: img.height, data: img.pixels.iter().map(|&p| p as f32 / 255.0).collect() };
    let k = 2f64.powf(1.0 / s as f64);
    let base_sigma = (cfg.sigma0 * cfg.sigma0 - INPUT_BLUR * INPUT_BLUR).max(0.01).sqrt();
    let mut first = blur(&base, base_sigma);
    let mut octaves = Vec::new();
    while first.width.min(first.height) >= 2 * BORDER + 6 {
        let mut gaussians = vec![first];
        for i in 1..s + 3 {
            let prev = cfg.sigma0 * k.powi(i as i32 - 1);
            let inc = (prev * k).powi(2) - prev * prev;
            let next = blur(&gaussians[i - 1], inc.sqrt());
            gaussians.push(next);
        }
        let dogs = gaussians
            .windows(2)
            .map(|w| Plane {
                width: w[0].width,
                height: w[0].height,
                data: w[1].data.iter().zip(&w[0].data).map(|(b, a)| b - a).collect(),
            })
            .collect();
        first = gaussians[s].decimate();
        octaves.push(Octave { gaussians, dogs });
    }
    octaves
}

struct Candidate {
    octave: usize,
    level: usize,
    x: f64,
    y: f64,
    sigma_oct: f64,
    response: f64,
}

fn is_extremum(dogs: &[Plane], l: usize, x: usize, y: usize) -> bool {
    let v = dogs[l].at(x, y);
    let mut is_max = true;
    let mut is_min = true;
    for plane in &dogs[l - 1..=l + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if std::ptr::eq(plane, &dogs[l]) && xx == x && yy == y {
                    continue;
                }
                let n = plane.at(xx, yy);
                is_max &= v > n;
                is_min &= v < n;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

/// Quadratic refinement of a scale-space extremum; `None` if it drifts out,
/// has low contrast or lies on an edge.
fn refine(dogs: &[Plane], octave: usize, l: usize, x: usize, y: usize, cfg: &SiftConfig) -> Option<Candidate> {
    let s = cfg.scales_per_octave;
    let (w, h) = (dogs[0].width, dogs[0].height);
    let (mut x, mut y, mut l) = (x, y, l);
    for _ in 0..5 {
        let d = |dl: isize, dx: isize, dy: isize| {
            dogs[(l as isize + dl) as usize].at((x as isize + dx) as usize, (y as isize + dy) as usize) as f64
        };
        let c = d(0, 0, 0);
        let g = Vector3::new(
            0.5 * (d(0, 1, 0) - d(0, -1, 0)),
            0.5 * (d(0, 0, 1) - d(0, 0, -1)),
            0.5 * (d(1, 0, 0) - d(-1, 0, 0)),
        );
        let dxx = d(0, 1, 0) + d(0, -1, 0) - 2.0 * c;
        let dyy = d(0, 0, 1) + d(0, 0, -1) - 2.0 * c;
        let dss = d(1, 0, 0) + d(-1, 0, 0) - 2.0 * c;
        let dxy = 0.25 * (d(0, 1, 1) - d(0, -1, 1) - d(0, 1, -1) + d(0, -1, -1));
        let dxs = 0.25 * (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0));
        let dys = 0.25 * (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1));
        let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let offset = -(hess.try_inverse()? * g);
        if offset.iter().all(|o| o.abs() < 0.5) {
            let contrast = c + 0.5 * g.dot(&offset);
            if contrast.abs() * (s as f64) < cfg.contrast_threshold {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let r = cfg.edge_threshold;
            if det <= 0.0 || tr * tr * r >= (r + 1.0).powi(2) * det {
                return None;
            }
            let sigma_oct = cfg.sigma0 * 2f64.powf((l as f64 + offset.z) / s as f64);
            return Some(Candidate {
                octave,
                level: l,
                x: x as f64 + offset.x,
                y: y as f64 + offset.y,
                sigma_oct,
                response: contrast.abs(),
            });
        }
        let step = |v: usize, o: f64| (v as f64 + o.round()) as isize;
        let (nx, ny, nl) = (step(x, offset.x), step(y, offset.y), step(l, offset.z));
        if nl < 1
            || nl > s as isize
            || nx < BORDER as isize
            || ny < BORDER as isize
            || nx >= (w - BORDER) as isize
            || ny >= (h - BORDER) as isize
        {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        l = nl as usize;
    }
    None
}

fn wrap_pi(a: f64) -> f64 {
    let a = crate::transforms::wrap_angle(a);
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

fn dominant_orientation(g: &Plane, cx: usize, cy: usize, sigma_oct: f64) -> Option<f64> {
    let sigma = 1.5 * sigma_oct;
    let radius = (3.0 * sigma).round() as isize;
    let mut hist = [0f64; ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let x = cx as isize + dx;
            let y = cy as isize + dy;
            if x < 1 || y < 1 || x >= g.width as isize - 1 || y >= g.height as isize - 1 {
                continue;
            }
            let (gx, gy) = g.gradient(x as usize, y as usize);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            let ang = gy.atan2(gx).rem_euclid(2.0 * PI);
            let bin = ((ang / (2.0 * PI) * ORI_BINS as f64).round() as usize) % ORI_BINS;
            hist[bin] += w * mag;
        }
    }
    let mut smooth = [0f64; ORI_BINS];
    for (i, s) in smooth.iter_mut().enumerate() {
        let at = |o: isize| hist[(i as isize + o).rem_euclid(ORI_BINS as isize) as usize];
        *s = (at(-2) + at(2)) / 16.0 + 4.0 * (at(-1) + at(1)) / 16.0 + 6.0 * at(0) / 16.0;
    }
    let (best, &peak) =
        smooth.iter().enumerate().fold((0, &smooth[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    if peak <= 0.0 {
        return None;
    }
    let l = smooth[(best + ORI_BINS - 1) % ORI_BINS];
    let r = smooth[(best + 1) % ORI_BINS];
    let denom = l - 2.0 * peak + r;
    let off = if denom.abs() > 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
    Some(wrap_pi((best as f64 + off) * 2.0 * PI / ORI_BINS as f64))
}

fn describe(g: &Plane, cx: usize, cy: usize, sigma_oct: f64, orientation: f64) -> Descriptor {
    let d = DESC_WIDTH as f64;
    let n = DESC_BINS as f64;
    let hist_width = 3.0 * sigma_oct;
    let radius = (hist_width * std::f64::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize;
    let (sin_t, cos_t) = orientation.sin_cos();
    let exp_scale = -1.0 / (2.0 * (0.5 * d).powi(2));
    let mut hist = [0f64; (DESC_WIDTH + 2) * (DESC_WIDTH + 2) * (DESC_BINS + 2)];
    let hidx = |r: usize, c: usize, o: usize| (r * (DESC_WIDTH + 2) + c) * (DESC_BINS + 2) + o;
    for i in -radius..=radius {
        for j in -radius..=radius {
            let c_rot = (cos_t * j as f64 + sin_t * i as f64) / hist_width;
            let r_rot = (-sin_t * j as f64 + cos_t * i as f64) / hist_width;
            let rbin = r_rot + 0.5 * d - 0.5;
            let cbin = c_rot + 0.5 * d - 0.5;
            if !(rbin > -1.0 && rbin < d && cbin > -1.0 && cbin < d) {
                continue;
            }
            let x = cx as isize + j;
            let y = cy as isize + i;
            if x < 1 || y < 1 || x >= g.width as isize - 1 || y >= g.height as isize - 1 {
                continue;
            }
            let (gx, gy) = g.gradient(x as usize, y as usize);
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let ori = (gy.atan2(gx) - orientation).rem_euclid(2.0 * PI);
            let obin = ori * n / (2.0 * PI);
            let weight = mag * ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (dr, dc, dor) = (rbin - r0, cbin - c0, obin - o0);
            for (ri, wr) in [(0, 1.0 - dr), (1, dr)] {
                let rr = (r0 as isize + ri + 1) as usize;
                for (ci, wc) in [(0, 1.0 - dc), (1, dc)] {
                    let cc = (c0 as isize + ci + 1) as usize;
                    for (oi, wo) in [(0, 1.0 - dor), (1, dor)] {
                        let oo = (o0 as usize + oi) % DESC_BINS;
                        hist[hidx(rr, cc, oo)] += weight * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut desc = [0f32; DESCRIPTOR_LEN];
    for r in 0..DESC_WIDTH {
        for c in 0..DESC_WIDTH {
            for o in 0..DESC_BINS {
                desc[(r * DESC_WIDTH + c) * DESC_BINS + o] = hist[hidx(r + 1, c + 1, o)] as f32;
            }
        }
    }
    normalize(&mut desc);
    for v in &mut desc {
        *v = v.min(DESC_CLAMP);
    }
    normalize(&mut desc);
    desc
}

fn normalize(desc: &mut Descriptor) {
    let norm = desc.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in desc.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
    }
}

/// Detects up to `max_points` keypoints, strongest first.
pub fn detect_and_describe(img: &GrayImage, max_points: usize, cfg: &SiftConfig) -> Result<Features> {
    if img.width < MIN_IMAGE_SIDE || img.height < MIN_IMAGE_SIDE {
        return Err(Error::ImageTooSmall { width: img.width, height: img.height, min: MIN_IMAGE_SIDE });
    }
    let pyramid = build_pyramid(img, cfg);
    let s = cfg.scales_per_octave;
    let mut candidates = Vec::new();
    for (o, oct) in pyramid.iter().enumerate() {
        let (w, h) = (oct.dogs[0].width, oct.dogs[0].height);
        let prefilter = (0.5 * cfg.contrast_threshold / s as f64) as f32;
        for l in 1..=s {
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    if oct.dogs[l].at(x, y).abs() <= prefilter || !is_extremum(&oct.dogs, l, x, y) {
                        continue;
                    }
                    if let Some(c) = refine(&oct.dogs, o, l, x, y, cfg) {
                        candidates.push(c);
                    }
                }
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .unwrap_or(Ordering::Equal)
            .then(a.octave.cmp(&b.octave))
            .then(a.level.cmp(&b.level))
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });

    let mut out = Features::default();
    for c in candidates {
        if out.len() >= max_points {
            break;
        }
        let g = &pyramid[c.octave].gaussians[c.level];
        let cx = c.x.round().clamp(1.0, (g.width - 2) as f64) as usize;
        let cy = c.y.round().clamp(1.0, (g.height - 2) as f64) as usize;
        let orientation = if cfg.upright {
            0.0
        } else {
            match dominant_orientation(g, cx, cy, c.sigma_oct) {
                Some(o) => o,
                None => continue,
            }
        };
        let factor = (1u64 << c.octave) as f64;
        out.keypoints.push(Keypoint {
            x: c.x * factor,
            y: c.y * factor,
            scale: c.sigma_oct * factor,
            orientation,
            response: c.response,
        });
        out.descriptors.push(describe(g, cx, cy, c.sigma_oct, orientation));
    }
    Ok(out)
}

fn distance(a: &Descriptor, b: &Descriptor) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Nearest and second-nearest distances plus the nearest index.
#[derive(Clone, Copy)]
struct Nearest {
    index: usize,
    d1: f32,
    d2: f32,
}

fn nearest_of(row: impl Iterator<Item = (usize, f32)>) -> Option<Nearest> {
    let mut best: Option<Nearest> = None;
    for (j, d) in row {
        best = Some(match best {
            None => Nearest { index: j, d1: d, d2: f32::INFINITY },
            Some(n) if d < n.d1 => Nearest { index: j, d1: d, d2: n.d1 },
            Some(n) if d < n.d2 => Nearest { d2: d, ..n },
            Some(n) => n,
        });
    }
    best
}

/// A second neighbor at the same distance (including two exact copies) means
/// a ratio of one and always fails.
fn passes_ratio(n: &Nearest, ratio: f64) -> bool {
    n.d2.is_infinite() || (n.d1 < n.d2 && (n.d1 as f64) <= ratio * n.d2 as f64)
}

/// Mutual nearest neighbors passing the ratio test on both sides.
pub fn match_mutual_ratio(desc_a: &[Descriptor], desc_b: &[Descriptor], ratio: f64) -> Vec<MatchPair> {
    match_mutual_ratio_with(desc_a, desc_b, ratio, |_, _| true)
}

/// As [`match_mutual_ratio`], with nearest neighbors searched only among the
/// pairs accepted by `allowed(i, j)`.
pub fn match_mutual_ratio_with(
    desc_a: &[Descriptor],
    desc_b: &[Descriptor],
    ratio: f64,
    allowed: impl Fn(usize, usize) -> bool + Sync,
) -> Vec<MatchPair> {
    if desc_a.is_empty() || desc_b.is_empty() {
        return Vec::new();
    }
    let nb = desc_b.len();
    let dist: Vec<f32> = (0..desc_a.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let allowed = &allowed;
            (0..nb).map(move |j| if allowed(i, j) { distance(&desc_a[i], &desc_b[j]) } else { f32::NAN })
        })
        .collect();
    let at = |i: usize, j: usize| dist[i * nb + j];
    let from_a: Vec<Option<Nearest>> =
        (0..desc_a.len()).map(|i| nearest_of((0..nb).map(|j| (j, at(i, j))).filter(|(_, d)| !d.is_nan()))).collect();
    let from_b: Vec<Option<Nearest>> =
        (0..nb).map(|j| nearest_of((0..desc_a.len()).map(|i| (i, at(i, j))).filter(|(_, d)| !d.is_nan()))).collect();
    let mut out = Vec::new();
    for (i, na) in from_a.iter().enumerate() {
        let Some(na) = na else { continue };
        let Some(nb_) = from_b[na.index] else { continue };
        if nb_.index != i || !passes_ratio(na, ratio) || !passes_ratio(&nb_, ratio) {
            continue;
        }
        out.push(MatchPair { index_a: i, index_b: na.index, score: (1.0 - na.d1 as f64 / 2.0).clamp(0.0, 1.0) });
    }
    out
}

/// Binary keypoint file: magic, count, descriptor length (u32 LE), then per
/// point x, y, scale, orientation, response and the descriptor as f32 LE.
pub fn write_features(features: &Features, path: &Path) -> Result<()> {
    crate::io::ensure_parent(path)?;
    let n = features.len();
    let mut bytes = Vec::with_capacity(12 + n * (5 + DESCRIPTOR_LEN) * 4);
    bytes.extend_from_slice(KPD_MAGIC);
    bytes.extend_from_slice(&(n as u32).to_le_bytes());
    bytes.extend_from_slice(&(DESCRIPTOR_LEN as u32).to_le_bytes());
    for (k, d) in features.keypoints.iter().zip(&features.descriptors) {
        for v in [k.x, k.y, k.scale, k.orientation, k.response] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for v in d {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Features> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: &str| Error::MalformedHeader { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < 12 || &bytes[..4] != KPD_MAGIC {
        return Err(malformed("missing KPD1 magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let n = u32_at(4);
    let dlen = u32_at(8);
    if dlen != DESCRIPTOR_LEN {
        return Err(malformed("unsupported descriptor length"));
    }
    let expected = n * (5 + dlen);
    let found = (bytes.len() - 12) / 4;
    if found != expected || (bytes.len() - 12) % 4 != 0 {
        return Err(Error::SizeMismatch { expected, found });
    }
    let floats: Vec<f32> = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut out = Features::default();
    for rec in floats.chunks_exact(5 + dlen) {
        out.keypoints.push(Keypoint {
            x: rec[0] as f64,
            y: rec[1] as f64,
            scale: rec[2] as f64,
            orientation: rec[3] as f64,
            response: rec[4] as f64,
        });
        let mut d = [0f32; DESCRIPTOR_LEN];
        d.copy_from_slice(&rec[5..]);
        out.descriptors.push(d);
    }
    Ok(out)
}

/// Deterministic value-noise texture used by tests and benchmarks.
pub fn test_pattern(width: usize, height: usize, seed: u64) -> GrayImage {
    GrayImage::from_fn(width, height, |x, y| {
        (crate::synthetic::texture(x as f64, y as f64, 1.0, seed) * 255.0).round().clamp(0.0, 255.0) as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_unit(rng: &mut ChaCha8Rng) -> Descriptor {
        let mut d = [0f32; DESCRIPTOR_LEN];
        for v in &mut d {
            *v = rng.sample::<f64, _>(StandardNormal) as f32;
        }
        normalize(&mut d);
        d
    }

    #[test]
    fn blank_image_has_no_keypoints() {
        let img = GrayImage::from_fn(64, 64, |_, _| 128);
        assert!(detect_and_describe(&img, 1000, &SiftConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn too_small() {
        let img = GrayImage::new(31, 64);
        assert!(matches!(
            detect_and_describe(&img, 10, &SiftConfig::default()),
            Err(Error::ImageTooSmall { width: 31, .. })
        ));
    }

    #[test]
    fn textured_image_yields_unit_descriptors() {
        let img = test_pattern(128, 128, 3);
        let f = detect_and_describe(&img, 500, &SiftConfig::default()).unwrap();
        assert!(f.len() > 20, "{}", f.len());
        for (k, d) in f.keypoints.iter().zip(&f.descriptors) {
            let norm = d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!(k.x >= 0.0 && k.y >= 0.0 && k.x < 128.0 && k.y < 128.0);
            assert!(k.scale > 0.0);
            assert!(k.orientation > -PI && k.orientation <= PI);
        }
        assert!(f.keypoints.windows(2).all(|w| w[0].response >= w[1].response));
    }

    #[test]
    fn deterministic_output() {
        let img = test_pattern(96, 80, 9);
        let a = detect_and_describe(&img, 300, &SiftConfig::default()).unwrap();
        let b = detect_and_describe(&img, 300, &SiftConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn max_points_truncates() {
        let img = test_pattern(128, 128, 4);
        let all = detect_and_describe(&img, usize::MAX, &SiftConfig::default()).unwrap();
        let few = detect_and_describe(&img, 10, &SiftConfig::default()).unwrap();
        assert_eq!(few.len(), 10);
        assert_eq!(few.keypoints[..], all.keypoints[..10]);
    }

    #[test]
    fn quarter_turn_keeps_keypoints_and_descriptors() {
        let img = test_pattern(129, 129, 5);
        let rot = img.rotate_quarter(1);
        let cfg = SiftConfig::default();
        let a = detect_and_describe(&img, usize::MAX, &cfg).unwrap();
        let b = detect_and_describe(&rot, usize::MAX, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        let mut compared = 0;
        for (ka, da) in a.keypoints.iter().zip(&a.descriptors) {
            let (rx, ry) = crate::rasters::quarter_turn_rotate(1, img.width, img.height, ka.x, ka.y);
            let hit = b
                .keypoints
                .iter()
                .position(|kb| (kb.x - rx).hypot(kb.y - ry) < 1e-3 && (kb.scale - ka.scale).abs() < 1e-6);
            let j = hit.expect("rotated keypoint missing");
            assert!(distance(da, &b.descriptors[j]) < 0.3);
            compared += 1;
        }
        assert!(compared > 20);
    }

    #[test]
    fn identical_sets_match_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Vec<_> = (0..50).map(|_| random_unit(&mut rng)).collect();
        let m = match_mutual_ratio(&d, &d, 0.8);
        assert_eq!(m.len(), 50);
        for (i, p) in m.iter().enumerate() {
            assert_eq!((p.index_a, p.index_b), (i, i));
            assert_eq!(p.score, 1.0);
        }
    }

    #[test]
    fn duplicated_descriptor_fails_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<_> = (0..10).map(|_| random_unit(&mut rng)).collect();
        let mut b = a.clone();
        b.push(a[3]);
        let m = match_mutual_ratio(&a, &b, 0.8);
        assert_eq!(m.len(), 9);
        assert!(m.iter().all(|p| p.index_a != 3));
    }

    #[test]
    fn random_descriptors_rarely_match() {
        // Monte-Carlo oracle: at dimension 128 the nearest and second nearest
        // random unit vectors are almost equidistant, so the ratio test at 0.8
        // nearly never passes on both sides.
        let mut total = 0;
        let trials = 20;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a: Vec<_> = (0..100).map(|_| random_unit(&mut rng)).collect();
            let b: Vec<_> = (0..100).map(|_| random_unit(&mut rng)).collect();
            total += match_mutual_ratio(&a, &b, 0.8).len();
        }
        assert!((total as f64 / trials as f64) < 0.5, "mean {}", total as f64 / trials as f64);
    }

    #[test]
    fn kpd_round_trip_and_errors() {
        let img = test_pattern(64, 64, 8);
        let f = detect_and_describe(&img, 50, &SiftConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.kpd");
        write_features(&f, &path).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.descriptors, f.descriptors);
        for (a, b) in back.keypoints.iter().zip(&f.keypoints) {
            assert_eq!(a.x, b.x as f32 as f64);
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_features(&path), Err(Error::SizeMismatch { .. })));
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_features(&path), Err(Error::MalformedHeader { .. })));
    }

    fn noisy_sets(seed: u64) -> (Vec<Descriptor>, Vec<Descriptor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<_> = (0..40).map(|_| random_unit(&mut rng)).collect();
        let mut b: Vec<_> = a
            .iter()
            .take(30)
            .map(|d| {
                let mut e = *d;
                for v in &mut e {
                    *v += 0.08 * rng.sample::<f64, _>(StandardNormal) as f32;
                }
                normalize(&mut e);
                e
            })
            .collect();
        b.extend((0..15).map(|_| random_unit(&mut rng)));
        (a, b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn matching_is_symmetric(seed in 0u64..10_000, ratio in 0.3f64..1.0) {
            let (a, b) = noisy_sets(seed);
            let ab = match_mutual_ratio(&a, &b, ratio);
            let mut ba: Vec<_> = match_mutual_ratio(&b, &a, ratio)
                .into_iter()
                .map(|p| MatchPair { index_a: p.index_b, index_b: p.index_a, score: p.score })
                .collect();
            ba.sort_by_key(|p| p.index_a);
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn lower_ratio_never_adds_matches(seed in 0u64..10_000, r1 in 0.3f64..1.0, r2 in 0.3f64..1.0) {
            let (a, b) = noisy_sets(seed);
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(match_mutual_ratio(&a, &b, lo).len() <= match_mutual_ratio(&a, &b, hi).len());
        }

        #[test]
        fn integer_shift_moves_keypoints(dx in 0usize..12, dy in 0usize..12, seed in 0u64..50) {
            // The shifted image is a crop of a larger pattern. Only first-octave
            // keypoints are compared: decimation makes octave o covariant only
            // for shifts that are multiples of 2^o. The interior margin exceeds
            // the accumulated blur support so border replication cannot leak in.
            let big = test_pattern(172, 172, seed);
            let a = crate::rasters::crop(&big, crate::rasters::PixelRect::new(12, 12, 160, 160)).unwrap().0;
            let b = crate::rasters::crop(&big, crate::rasters::PixelRect::new(12 - dx as i64, 12 - dy as i64, 160, 160)).unwrap().0;
            let cfg = SiftConfig { upright: true, ..SiftConfig::default() };
            let fa = detect_and_describe(&a, usize::MAX, &cfg).unwrap();
            let fb = detect_and_describe(&b, usize::MAX, &cfg).unwrap();
            let interior = |k: &Keypoint| k.x > 44.0 && k.y > 44.0 && k.x < 116.0 && k.y < 116.0 && k.scale < 3.5;
            let mut checked = 0;
            for ka in fa.keypoints.iter().filter(|k| interior(k)) {
                let nearest = fb.keypoints.iter()
                    .filter(|kb| (kb.scale - ka.scale).abs() < 0.1 * ka.scale)
                    .map(|kb| (kb.x - ka.x - dx as f64).hypot(kb.y - ka.y - dy as f64))
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(nearest <= 0.5, "keypoint ({}, {}) moved by {}", ka.x, ka.y, nearest);
                checked += 1;
            }
            prop_assert!(checked > 0);
        }
    }
}
