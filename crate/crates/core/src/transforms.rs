//! Closed-form similarity estimation in 2D and 3D and a seeded RANSAC engine.

use nalgebra::{Matrix2, Matrix3, Rotation3, Vector2, Vector3, SVD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `b = scale * Rot(angle) * a + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity2D {
    pub scale: f64,
    #[serde(rename = "angle_rad")]
    pub angle: f64,
    pub t: [f64; 2],
}

impl Default for Similarity2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Similarity2D {
    pub fn identity() -> Self {
        Similarity2D { scale: 1.0, angle: 0.0, t: [0.0, 0.0] }
    }

    pub fn new(scale: f64, angle: f64, t: Vector2<f64>) -> Self {
        Similarity2D { scale, angle, t: [t.x, t.y] }
    }

    pub fn linear(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, -s, s, c) * self.scale
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.t[0], self.t[1])
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.linear() * p + self.translation()
    }

    pub fn inverse(&self) -> Similarity2D {
        let inv_scale = 1.0 / self.scale;
        let rot_inv = Similarity2D { scale: inv_scale, angle: -self.angle, t: [0.0, 0.0] };
        let t = -(rot_inv.linear() * self.translation());
        Similarity2D { scale: inv_scale, angle: -self.angle, t: [t.x, t.y] }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Similarity2D) -> Similarity2D {
        let t = self.linear() * other.translation() + self.translation();
        Similarity2D { scale: self.scale * other.scale, angle: wrap_angle(self.angle + other.angle), t: [t.x, t.y] }
    }
}

/// Seven-parameter similarity `b = lambda * R * a + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "HelmertRepr", try_from = "HelmertRepr")]
pub struct Helmert3D {
    pub lambda: f64,
    pub rotation: Matrix3<f64>,
    pub t: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct HelmertRepr {
    lambda: f64,
    rotation: [f64; 9],
    t: [f64; 3],
}

impl From<Helmert3D> for HelmertRepr {
    fn from(h: Helmert3D) -> Self {
        let r = &h.rotation;
        HelmertRepr {
            lambda: h.lambda,
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
            t: [h.t.x, h.t.y, h.t.z],
        }
    }
}

impl TryFrom<HelmertRepr> for Helmert3D {
    type Error = String;

    fn try_from(r: HelmertRepr) -> std::result::Result<Self, String> {
        let h = Helmert3D { lambda: r.lambda, rotation: Matrix3::from_row_slice(&r.rotation), t: Vector3::from(r.t) };
        if !(h.lambda > 0.0) {
            return Err(format!("lambda {} must be positive", h.lambda));
        }
        if !is_rotation(&h.rotation, 1e-6) {
            return Err("rotation is not orthonormal with det +1".into());
        }
        Ok(h)
    }
}

impl Default for Helmert3D {
    fn default() -> Self {
        Self::identity()
    }
}

impl Helmert3D {
    pub fn identity() -> Self {
        Helmert3D { lambda: 1.0, rotation: Matrix3::identity(), t: Vector3::zeros() }
    }

    pub fn new(lambda: f64, rotation: Matrix3<f64>, t: Vector3<f64>) -> Self {
        Helmert3D { lambda, rotation, t }
    }

    /// Rotation given as roll/pitch/yaw about x, y, z (applied x first).
    pub fn from_euler(lambda: f64, roll: f64, pitch: f64, yaw: f64, t: Vector3<f64>) -> Self {
        let rotation = *Rotation3::from_euler_angles(roll, pitch, yaw).matrix();
        Helmert3D { lambda, rotation, t }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.lambda + self.t
    }

    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.t) / self.lambda
    }

    /// Rotates a direction (no scale, no translation).
    pub fn rotate(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    pub fn inverse(&self) -> Helmert3D {
        let rt = self.rotation.transpose();
        Helmert3D { lambda: 1.0 / self.lambda, rotation: rt, t: -(rt * self.t) / self.lambda }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Helmert3D) -> Helmert3D {
        Helmert3D {
            lambda: self.lambda * other.lambda,
            rotation: self.rotation * other.rotation,
            t: self.rotation * other.t * self.lambda + self.t,
        }
    }

    /// Angle of the relative rotation between two transforms, radians.
    pub fn rotation_angle_to(&self, other: &Helmert3D) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn residual(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        (self.apply(a) - b).norm()
    }
}

/// Rotation angle in `[0, pi]`; `atan2` keeps small angles accurate.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (0.5 * skew.norm()).atan2(0.5 * (r.trace() - 1.0))
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    (r.transpose() * r - Matrix3::identity()).abs().max() <= tol && (r.determinant() - 1.0).abs() <= tol
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Least-squares 2D similarity `b ≈ s Rot(θ) a + t` from centered cross-moments.
pub fn fit_similarity2d(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Result<Similarity2D> {
    assert_eq!(a.len(), b.len(), "point lists must be paired");
    if a.len() < 2 {
        return Err(Error::DegenerateConfiguration("need at least two pairs"));
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector2<f64>>() / n;
    let cb = b.iter().sum::<Vector2<f64>>() / n;
    let (mut dot, mut cross, mut var_a, mut mag) = (0.0, 0.0, 0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        let pa = p - ca;
        let qb = q - cb;
        dot += pa.dot(&qb);
        cross += pa.x * qb.y - pa.y * qb.x;
        var_a += pa.norm_squared();
        mag += p.norm_squared();
    }
    if !(var_a > 1e-20 * mag.max(1.0)) {
        return Err(Error::DegenerateConfiguration("source points coincide"));
    }
    let scale = dot.hypot(cross) / var_a;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::DegenerateConfiguration("target points coincide"));
    }
    let angle = cross.atan2(dot);
    let mut sim = Similarity2D { scale, angle, t: [0.0, 0.0] };
    let t = cb - sim.linear() * ca;
    sim.t = [t.x, t.y];
    Ok(sim)
}

/// Least-squares 3D similarity (Umeyama): rotation from the SVD of the
/// centered cross-covariance with the determinant sign fixed, scale from the
/// ratio of the corrected singular-value trace to the source variance.
pub fn fit_helmert3d(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<Helmert3D> {
    assert_eq!(a.len(), b.len(), "point lists must be paired");
    if a.len() < 3 {
        return Err(Error::DegenerateConfiguration("need at least three pairs"));
    }
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut cov_a = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        let pa = p - ca;
        let qb = q - cb;
        cov += qb * pa.transpose();
        cov_a += pa * pa.transpose();
    }
    cov /= n;
    cov_a /= n;
    let var_a = cov_a.trace();
    let sv_a = cov_a.symmetric_eigenvalues();
    let mut sv_sorted = [sv_a[0], sv_a[1], sv_a[2]];
    sv_sorted.sort_by(|x, y| y.total_cmp(x));
    if !(sv_sorted[0] > 0.0) || sv_sorted[1] <= 1e-12 * sv_sorted[0] {
        return Err(Error::DegenerateConfiguration("source points are collinear"));
    }
    let svd = SVD::new(cov, true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let lambda = svd.singular_values.component_mul(&d).sum() / var_a;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::DegenerateConfiguration("target points are degenerate"));
    }
    let t = cb - rotation * ca * lambda;
    Ok(Helmert3D { lambda, rotation, t })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
    /// Stop early once enough hypotheses were drawn for `confidence`.
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    0.999
}

impl RansacConfig {
    pub fn new(iterations: usize, inlier_threshold: f64, seed: u64) -> Self {
        RansacConfig { iterations, inlier_threshold, seed, adaptive: false, confidence: default_confidence() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("RANSAC needs at least one iteration".into()));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(Error::InvalidConfig(format!("RANSAC inlier threshold {} must be > 0", self.inlier_threshold)));
        }
        Ok(())
    }
}

/// A model family RANSAC can hypothesize from minimal samples.
pub trait Estimator: Sync {
    type Datum: Sync;
    type Model: Clone + Send;

    fn min_sample(&self) -> usize;
    fn fit(&self, data: &[&Self::Datum]) -> Result<Self::Model>;
    fn residual(&self, model: &Self::Model, datum: &Self::Datum) -> f64;
}

pub struct SimilarityEstimator;

impl Estimator for SimilarityEstimator {
    type Datum = (Vector2<f64>, Vector2<f64>);
    type Model = Similarity2D;

    fn min_sample(&self) -> usize {
        2
    }

    fn fit(&self, data: &[&Self::Datum]) -> Result<Similarity2D> {
        let (a, b): (Vec<_>, Vec<_>) = data.iter().map(|(p, q)| (*p, *q)).unzip();
        fit_similarity2d(&a, &b)
    }

    fn residual(&self, model: &Similarity2D, (a, b): &Self::Datum) -> f64 {
        (model.apply(a) - b).norm()
    }
}

pub struct HelmertEstimator;

impl Estimator for HelmertEstimator {
    type Datum = (Vector3<f64>, Vector3<f64>);
    type Model = Helmert3D;

    fn min_sample(&self) -> usize {
        3
    }

    fn fit(&self, data: &[&Self::Datum]) -> Result<Helmert3D> {
        let (a, b): (Vec<_>, Vec<_>) = data.iter().map(|(p, q)| (*p, *q)).unzip();
        fit_helmert3d(&a, &b)
    }

    fn residual(&self, model: &Helmert3D, (a, b): &Self::Datum) -> f64 {
        model.residual(a, b)
    }
}

#[derive(Debug, Clone)]
pub struct RansacOutcome<M> {
    pub model: M,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub inlier_rms: f64,
    pub iterations_run: usize,
}

#[derive(Clone)]
struct Hypothesis<M> {
    iteration: usize,
    model: M,
    count: usize,
    rms: f64,
}

impl<M> Hypothesis<M> {
    /// Total order: more inliers, then lower RMS, then earlier iteration.
    fn better_than(&self, other: &Self) -> bool {
        use std::cmp::Ordering::*;
        match self.count.cmp(&other.count) {
            Greater => true,
            Less => false,
            Equal => match self.rms.total_cmp(&other.rms) {
                Less => true,
                Greater => false,
                Equal => self.iteration < other.iteration,
            },
        }
    }
}

fn pick<M>(a: Option<Hypothesis<M>>, b: Option<Hypothesis<M>>) -> Option<Hypothesis<M>> {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(a), Some(b)) => Some(if b.better_than(&a) { b } else { a }),
    }
}

fn score<E: Estimator>(est: &E, model: &E::Model, data: &[E::Datum], thr: f64) -> (usize, f64) {
    let mut count = 0usize;
    let mut sq = 0.0;
    for d in data {
        let r = est.residual(model, d);
        if r <= thr {
            count += 1;
            sq += r * r;
        }
    }
    let rms = if count > 0 { (sq / count as f64).sqrt() } else { f64::INFINITY };
    (count, rms)
}

/// Rng for one iteration, derived from `(seed, iteration)` only, so the
/// result does not depend on how iterations are scheduled.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

fn hypothesis<E: Estimator>(
    est: &E,
    data: &[E::Datum],
    cfg: &RansacConfig,
    iteration: usize,
) -> Option<Hypothesis<E::Model>> {
    let mut rng = iteration_rng(cfg.seed, iteration);
    let idx = sample(&mut rng, data.len(), est.min_sample());
    let subset: Vec<&E::Datum> = idx.iter().map(|i| &data[i]).collect();
    let model = est.fit(&subset).ok()?;
    let (count, rms) = score(est, &model, data, cfg.inlier_threshold);
    Some(Hypothesis { iteration, model, count, rms })
}

/// Seeded RANSAC: uniform minimal samples, inliers by residual threshold,
/// best hypothesis by inlier count then inlier RMS, final refit on the
/// consensus set.
pub fn ransac<E: Estimator>(est: &E, data: &[E::Datum], cfg: &RansacConfig) -> Result<RansacOutcome<E::Model>> {
    cfg.validate()?;
    let m = est.min_sample();
    if data.len() < m {
        return Err(Error::NoModelFound { best: 0, needed: m + 1 });
    }

    let mut best: Option<Hypothesis<E::Model>> = None;
    let mut done = 0usize;
    let chunk = if cfg.adaptive { 64 } else { cfg.iterations };
    let mut budget = cfg.iterations;
    while done < budget {
        let end = (done + chunk).min(budget);
        let chunk_best = (done..end).into_par_iter().map(|i| hypothesis(est, data, cfg, i)).reduce(|| None, pick);
        best = pick(best, chunk_best);
        done = end;
        if cfg.adaptive {
            if let Some(b) = &best {
                let w = b.count as f64 / data.len() as f64;
                let p_good = w.powi(m as i32);
                if p_good >= 1.0 {
                    break;
                }
                if p_good > 0.0 {
                    let needed = ((1.0 - cfg.confidence).ln() / (1.0 - p_good).ln()).ceil();
                    if needed.is_finite() {
                        budget = budget.min(needed.max(1.0) as usize);
                    }
                }
            }
        }
    }

    let best = match best {
        Some(b) if b.count > m => b,
        other => return Err(Error::NoModelFound { best: other.map_or(0, |b| b.count), needed: m + 1 }),
    };

    let mask_of = |model: &E::Model| -> Vec<bool> {
        data.iter().map(|d| est.residual(model, d) <= cfg.inlier_threshold).collect()
    };
    let hyp_mask = mask_of(&best.model);
    let consensus: Vec<&E::Datum> = data.iter().zip(&hyp_mask).filter(|(_, k)| **k).map(|(d, _)| d).collect();

    let (model, count, rms) = match est.fit(&consensus) {
        Ok(refit) => {
            let (count, rms) = score(est, &refit, data, cfg.inlier_threshold);
            if count >= best.count {
                (refit, count, rms)
            } else {
                (best.model, best.count, best.rms)
            }
        }
        Err(_) => (best.model, best.count, best.rms),
    };
    let inliers = mask_of(&model);
    Ok(RansacOutcome { model, inliers, inlier_count: count, inlier_rms: rms, iterations_run: done })
}

pub fn ransac_similarity2d(
    pairs: &[(Vector2<f64>, Vector2<f64>)],
    cfg: &RansacConfig,
) -> Result<RansacOutcome<Similarity2D>> {
    ransac(&SimilarityEstimator, pairs, cfg)
}

pub fn ransac_helmert3d(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    cfg: &RansacConfig,
) -> Result<RansacOutcome<Helmert3D>> {
    ransac(&HelmertEstimator, pairs, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::FRAC_PI_2;

    fn pts2(n: usize, seed: u64) -> Vec<Vector2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0))).collect()
    }

    fn pts3(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-5.0..5.0))
            })
            .collect()
    }

    #[test]
    fn similarity_identity() {
        let a = pts2(5, 1);
        let s = fit_similarity2d(&a, &a).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!(s.angle.abs() < 1e-12);
        assert!(s.translation().norm() < 1e-10);
    }

    #[test]
    fn similarity_recovers_planted() {
        let a = pts2(5, 2);
        let truth = Similarity2D::new(2.0, FRAC_PI_2, Vector2::new(3.0, 4.0));
        let b: Vec<_> = a.iter().map(|p| truth.apply(p)).collect();
        let s = fit_similarity2d(&a, &b).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-9);
        assert!((s.angle - FRAC_PI_2).abs() < 1e-9);
        assert!((s.translation() - Vector2::new(3.0, 4.0)).norm() < 1e-9);
    }

    #[test]
    fn similarity_two_points_interpolate() {
        let a = vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 2.0)];
        let b = vec![Vector2::new(5.0, -1.0), Vector2::new(2.0, 7.0)];
        let s = fit_similarity2d(&a, &b).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((s.apply(p) - q).norm() < 1e-12);
        }
    }

    #[test]
    fn similarity_coincident_points() {
        let a = vec![Vector2::new(1.0, 1.0); 3];
        let b = pts2(3, 3);
        assert!(matches!(fit_similarity2d(&a, &b), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn helmert_identity() {
        let a = pts3(6, 4);
        let h = fit_helmert3d(&a, &a).unwrap();
        assert!((h.lambda - 1.0).abs() < 1e-12);
        assert!((h.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(h.t.norm() < 1e-10);
    }

    #[test]
    fn helmert_recovers_planted_from_three_points() {
        let a = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(10.0, 0.0, 1.0), Vector3::new(0.0, 7.0, -2.0)];
        let truth = Helmert3D::from_euler(0.5, 0.0, 0.0, 30f64.to_radians(), Vector3::new(1.0, -2.0, 3.0));
        let b: Vec<_> = a.iter().map(|p| truth.apply(p)).collect();
        let h = fit_helmert3d(&a, &b).unwrap();
        assert!((h.lambda - 0.5).abs() < 1e-9);
        assert!((h.rotation - truth.rotation).abs().max() < 1e-9);
        assert!((h.t - truth.t).norm() < 1e-9);
    }

    #[test]
    fn helmert_reflection_stays_proper() {
        let a = pts3(10, 5);
        let b: Vec<_> = a.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let h = fit_helmert3d(&a, &b).unwrap();
        assert!((h.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!(is_rotation(&h.rotation, 1e-9));
        let residual: f64 = a.iter().zip(&b).map(|(p, q)| h.residual(p, q)).sum();
        assert!(residual > 1.0);
    }

    #[test]
    fn helmert_collinear_is_degenerate() {
        let a: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, -(i as f64))).collect();
        assert!(matches!(fit_helmert3d(&a, &a), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn helmert_algebra() {
        let h = Helmert3D::from_euler(1.7, 0.1, -0.2, 2.5, Vector3::new(4.0, 5.0, -6.0));
        let g = Helmert3D::from_euler(0.6, -0.3, 0.05, -1.0, Vector3::new(-1.0, 2.0, 0.5));
        let p = Vector3::new(3.0, -7.0, 11.0);
        assert!((h.inverse().apply(&h.apply(&p)) - p).norm() < 1e-12);
        assert!((h.apply_inverse(&h.apply(&p)) - p).norm() < 1e-12);
        assert!((h.compose(&g).apply(&p) - h.apply(&g.apply(&p))).norm() < 1e-11);
    }

    #[test]
    fn helmert_json_shape() {
        let h = Helmert3D::identity();
        let v: serde_json::Value = serde_json::to_value(h).unwrap();
        assert_eq!(v["lambda"], 1.0);
        assert_eq!(v["rotation"].as_array().unwrap().len(), 9);
        assert_eq!(v["t"].as_array().unwrap().len(), 3);
        let back: Helmert3D = serde_json::from_value(v).unwrap();
        assert_eq!(back, h);
        let s: serde_json::Value = serde_json::to_value(Similarity2D::identity()).unwrap();
        assert!(s.get("angle_rad").is_some());
    }

    #[test]
    fn ransac_exact_inliers() {
        let a = pts3(100, 6);
        let truth = Helmert3D::from_euler(1.3, 0.02, -0.01, 1.0, Vector3::new(10.0, 20.0, 30.0));
        let pairs: Vec<_> = a.iter().map(|p| (*p, truth.apply(p))).collect();
        let out = ransac_helmert3d(&pairs, &RansacConfig::new(100, 0.1, 7)).unwrap();
        assert_eq!(out.inlier_count, 100);
        assert!((out.model.lambda - 1.3).abs() < 1e-9);
        assert!((out.model.t - truth.t).norm() < 1e-9);
    }

    /// 50 noisy inliers + 50 uniform outliers, 20 seeds.
    #[test]
    fn ransac_contamination_similarity() {
        let thr = 1.0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let truth = Similarity2D::new(0.8, 0.7, Vector2::new(5.0, -3.0));
            let normal = rand_distr::Normal::new(0.0, 0.1 * thr).unwrap();
            let mut pairs = Vec::new();
            for _ in 0..50 {
                let a = Vector2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
                let b = truth.apply(&a) + Vector2::new(rng.sample(normal), rng.sample(normal));
                pairs.push((a, b));
            }
            for _ in 0..50 {
                let a = Vector2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
                let b = Vector2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
                pairs.push((a, b));
            }
            let out = ransac_similarity2d(&pairs, &RansacConfig::new(1000, thr, seed)).unwrap();
            let true_in = out.inliers[..50].iter().filter(|k| **k).count();
            let false_in = out.inliers[50..].iter().filter(|k| **k).count();
            assert!(true_in >= 49, "seed {seed}: {true_in} true inliers");
            assert!(false_in <= 1, "seed {seed}: {false_in} false inliers");
        }
    }

    #[test]
    fn ransac_collinear_3d_fails() {
        let a: Vec<_> = (0..3).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let pairs: Vec<_> = a.iter().map(|p| (*p, *p)).collect();
        let res = ransac_helmert3d(&pairs, &RansacConfig::new(50, 0.1, 1));
        assert!(matches!(res, Err(Error::NoModelFound { .. }) | Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn ransac_rejects_bad_config() {
        let pairs = vec![(Vector2::zeros(), Vector2::zeros()); 3];
        assert!(matches!(ransac_similarity2d(&pairs, &RansacConfig::new(0, 1.0, 0)), Err(Error::InvalidConfig(_))));
        assert!(matches!(ransac_similarity2d(&pairs, &RansacConfig::new(10, 0.0, 0)), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn ransac_adaptive_stops_early_on_clean_data() {
        let a = pts2(60, 9);
        let truth = Similarity2D::new(1.1, -0.4, Vector2::new(1.0, 2.0));
        let pairs: Vec<_> = a.iter().map(|p| (*p, truth.apply(p))).collect();
        let mut cfg = RansacConfig::new(1000, 0.5, 3);
        cfg.adaptive = true;
        let out = ransac_similarity2d(&pairs, &cfg).unwrap();
        assert!(out.iterations_run < 1000);
        assert_eq!(out.inlier_count, 60);
    }

    fn contaminated(seed: u64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = Helmert3D::from_euler(2.0, 0.1, 0.0, -2.0, Vector3::new(1.0, 1.0, 1.0));
        (0..80)
            .map(|i| {
                let a = Vector3::new(
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-3.0..3.0),
                );
                let b = if i % 3 == 0 {
                    Vector3::new(
                        rng.random_range(-60.0..60.0),
                        rng.random_range(-60.0..60.0),
                        rng.random_range(-6.0..6.0),
                    )
                } else {
                    truth.apply(&a) + Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0)
                };
                (a, b)
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn helmert_exact_on_noise_free_data(
            lambda in 0.2f64..5.0,
            roll in -3.0f64..3.0, pitch in -1.5f64..1.5, yaw in -3.1f64..3.1,
            tx in -1e3f64..1e3, ty in -1e3f64..1e3, tz in -1e3f64..1e3,
            seed in 0u64..1000,
        ) {
            let truth = Helmert3D::from_euler(lambda, roll, pitch, yaw, Vector3::new(tx, ty, tz));
            let a = pts3(12, seed);
            let b: Vec<_> = a.iter().map(|p| truth.apply(p)).collect();
            let h = fit_helmert3d(&a, &b).unwrap();
            let scale = b.iter().map(|p| p.norm()).fold(1.0, f64::max);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!(h.residual(p, q) <= 1e-9 * scale);
            }
            let rel = h.compose(&truth.inverse());
            prop_assert!((rel.lambda - 1.0).abs() <= 1e-9);
            prop_assert!(rotation_angle(&rel.rotation) <= 1e-9);
        }

        #[test]
        fn ransac_is_reproducible(seed in 0u64..10_000) {
            let pairs = contaminated(seed);
            let cfg = RansacConfig::new(200, 1.0, seed);
            let a = ransac_helmert3d(&pairs, &cfg).unwrap();
            let b = ransac_helmert3d(&pairs, &cfg).unwrap();
            prop_assert_eq!(a.inliers, b.inliers);
            prop_assert_eq!(a.model.lambda.to_bits(), b.model.lambda.to_bits());
            prop_assert_eq!(a.model.t.x.to_bits(), b.model.t.x.to_bits());
        }

        #[test]
        fn inlier_count_grows_with_threshold(seed in 0u64..10_000) {
            let pairs = contaminated(seed);
            let mut last = 0;
            for thr in [0.5, 1.0, 2.0, 4.0] {
                let out = ransac_helmert3d(&pairs, &RansacConfig::new(300, thr, seed)).unwrap();
                prop_assert!(out.inlier_count >= last);
                last = out.inlier_count;
            }
        }
    }
}
