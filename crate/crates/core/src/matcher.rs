//! Tile-matching backends: the built-in keypoint matcher and a client for
//! external matchers speaking the request-directory protocol.
//!
//! Protocol: the client creates a directory holding `tile_a.pgm`,
//! `tile_b.pgm` and `request.json` (`{"max_matches": n, "pair_id": "..."}`),
//! runs `<adapter> <request_dir>` and, on exit status 0, reads
//! `matches.txt` with one `x1 y1 x2 y2 score` line per correspondence.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{detect_and_describe, match_mutual_ratio, SiftConfig};
use crate::rasters::{write_gray, GrayImage};

/// A correspondence between two images, `a` and `b`, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMatch {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub score: f64,
}

impl PixelMatch {
    pub fn new(xa: f64, ya: f64, xb: f64, yb: f64, score: f64) -> Self {
        PixelMatch { xa, ya, xb, yb, score }
    }

    /// Key for exact-coordinate comparisons.
    pub fn coord_bits(&self) -> [u64; 4] {
        [self.xa.to_bits(), self.ya.to_bits(), self.xb.to_bits(), self.yb.to_bits()]
    }
}

/// Matches two tiles and returns correspondences in tile-local pixels.
pub trait TileMatcher: Sync {
    fn match_tiles(&self, a: &GrayImage, b: &GrayImage, pair_id: &str) -> Result<Vec<PixelMatch>>;
}

impl<T: TileMatcher + ?Sized> TileMatcher for &T {
    fn match_tiles(&self, a: &GrayImage, b: &GrayImage, pair_id: &str) -> Result<Vec<PixelMatch>> {
        (**self).match_tiles(a, b, pair_id)
    }
}

impl<T: TileMatcher + ?Sized + Send> TileMatcher for Box<T> {
    fn match_tiles(&self, a: &GrayImage, b: &GrayImage, pair_id: &str) -> Result<Vec<PixelMatch>> {
        (**self).match_tiles(a, b, pair_id)
    }
}

/// Keypoints on both tiles, mutual nearest neighbors with the ratio test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuiltinMatcher {
    pub sift: SiftConfig,
    pub max_keypoints: usize,
    pub ratio: f64,
    /// Rejects matches whose keypoint orientations differ by more than this
    /// (degrees); makes a rotation-invariant matcher tolerate only bounded
    /// rotations, as needed when rotation hypotheses are enumerated.
    pub max_rotation_deg: Option<f64>,
}

impl Default for BuiltinMatcher {
    fn default() -> Self {
        BuiltinMatcher { sift: SiftConfig::default(), max_keypoints: 2000, ratio: 0.8, max_rotation_deg: None }
    }
}

impl BuiltinMatcher {
    /// Rotation-invariant keypoints, matches limited to ±45° of rotation:
    /// one of four quarter-turn hypotheses always falls inside the window.
    pub fn quarter_turn_tolerant() -> Self {
        BuiltinMatcher {
            sift: SiftConfig { upright: false, ..SiftConfig::default() },
            max_rotation_deg: Some(45.0),
            ..BuiltinMatcher::default()
        }
    }
}

impl TileMatcher for BuiltinMatcher {
    fn match_tiles(&self, a: &GrayImage, b: &GrayImage, _pair_id: &str) -> Result<Vec<PixelMatch>> {
        let fa = detect_and_describe(a, self.max_keypoints, &self.sift)?;
        let fb = detect_and_describe(b, self.max_keypoints, &self.sift)?;
        let gate = self.max_rotation_deg.map(f64::to_radians);
        Ok(match_mutual_ratio(&fa.descriptors, &fb.descriptors, self.ratio)
            .into_iter()
            .filter(|m| {
                gate.is_none_or(|g| {
                    let d = fb.keypoints[m.index_b].orientation - fa.keypoints[m.index_a].orientation;
                    crate::transforms::wrap_angle(d).abs() <= g
                })
            })
            .map(|m| {
                let (ka, kb) = (&fa.keypoints[m.index_a], &fb.keypoints[m.index_b]);
                PixelMatch::new(ka.x, ka.y, kb.x, kb.y, m.score)
            })
            .collect())
    }
}

static REQUEST_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Runs an external matcher program once per tile pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterMatcher {
    pub program: PathBuf,
    pub max_matches: usize,
    /// Parent of the per-request directories (system temp dir if `None`).
    pub work_root: Option<PathBuf>,
    /// Keep request directories after a successful call.
    pub keep_requests: bool,
}

impl AdapterMatcher {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        AdapterMatcher { program: program.into(), max_matches: 2000, work_root: None, keep_requests: false }
    }

    fn request_dir(&self, pair_id: &str) -> PathBuf {
        let root = self.work_root.clone().unwrap_or_else(std::env::temp_dir);
        let safe: String =
            pair_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        let n = REQUEST_COUNTER.fetch_add(1, Ordering::Relaxed);
        root.join(format!("epochreg-req-{}-{n}-{safe}", std::process::id()))
    }
}

#[derive(Serialize)]
struct AdapterRequest<'a> {
    max_matches: usize,
    pair_id: &'a str,
}

impl TileMatcher for AdapterMatcher {
    fn match_tiles(&self, a: &GrayImage, b: &GrayImage, pair_id: &str) -> Result<Vec<PixelMatch>> {
        let fail = |message: String| Error::BackendFailure { pair_id: pair_id.to_string(), message };
        let dir = self.request_dir(pair_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_gray(a, &dir.join("tile_a.pgm"))?;
        write_gray(b, &dir.join("tile_b.pgm"))?;
        crate::io::write_json(&dir.join("request.json"), &AdapterRequest { max_matches: self.max_matches, pair_id })?;

        let output = Command::new(&self.program)
            .arg(&dir)
            .output()
            .map_err(|e| fail(format!("cannot run {}: {e}", self.program.display())))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(fail(format!("adapter exited with {}: {}", output.status, stderr.trim())));
        }
        let matches = parse_adapter_matches(&dir.join("matches.txt")).map_err(|e| fail(e.to_string()))?;
        if !self.keep_requests {
            // best effort; a stale request directory is harmless
            let _ = std::fs::remove_dir_all(&dir);
        }
        Ok(matches.into_iter().take(self.max_matches).collect())
    }
}

/// Parses `x1 y1 x2 y2 score` lines; blank lines and `#` comments are skipped.
pub fn parse_adapter_matches(path: &Path) -> Result<Vec<PixelMatch>> {
    let text = crate::io::read_text(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 5 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path, format!("line {}: expected 5 finite numbers", n + 1)));
        }
        if !(0.0..=1.0).contains(&vals[4]) {
            return Err(Error::parse(path, format!("line {}: score outside [0, 1]", n + 1)));
        }
        out.push(PixelMatch::new(vals[0], vals[1], vals[2], vals[3], vals[4]));
    }
    Ok(out)
}

/// Backend selection as written in configuration files: `builtin` or
/// `adapter:<program path>`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum MatcherBackend {
    #[default]
    Builtin,
    Adapter(PathBuf),
}

impl MatcherBackend {
    /// Instantiates the backend; `upright` selects rotation-variant keypoints
    /// for the built-in matcher.
    pub fn instantiate(&self, builtin: BuiltinMatcher, max_matches: usize) -> Box<dyn TileMatcher + Send> {
        match self {
            MatcherBackend::Builtin => Box::new(builtin),
            MatcherBackend::Adapter(p) => Box::new(AdapterMatcher { max_matches, ..AdapterMatcher::new(p) }),
        }
    }
}

impl fmt::Display for MatcherBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatcherBackend::Builtin => write!(f, "builtin"),
            MatcherBackend::Adapter(p) => write!(f, "adapter:{}", p.display()),
        }
    }
}

impl FromStr for MatcherBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "builtin" {
            Ok(MatcherBackend::Builtin)
        } else if let Some(p) = s.strip_prefix("adapter:") {
            if p.is_empty() {
                return Err(Error::InvalidConfig("adapter backend needs a program path".into()));
            }
            Ok(MatcherBackend::Adapter(PathBuf::from(p)))
        } else {
            Err(Error::InvalidConfig(format!("unknown matcher backend {s:?}")))
        }
    }
}

impl Serialize for MatcherBackend {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MatcherBackend {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::test_pattern;

    #[test]
    fn builtin_self_matches() {
        let img = test_pattern(96, 96, 1);
        let m = BuiltinMatcher::default().match_tiles(&img, &img, "p").unwrap();
        assert!(m.len() > 10);
        for p in &m {
            assert_eq!((p.xa, p.ya), (p.xb, p.yb));
            assert_eq!(p.score, 1.0);
        }
    }

    #[test]
    fn rotation_gate_limits_tolerated_rotation() {
        let img = test_pattern(128, 128, 4);
        let turned = img.rotate_quarter(1);
        let free = BuiltinMatcher {
            sift: SiftConfig { upright: false, ..SiftConfig::default() },
            ..BuiltinMatcher::default()
        };
        assert!(free.match_tiles(&img, &turned, "p").unwrap().len() > 10);
        let gated = BuiltinMatcher::quarter_turn_tolerant();
        assert!(gated.match_tiles(&img, &turned, "p").unwrap().is_empty());
        assert!(gated.match_tiles(&img, &img, "p").unwrap().len() > 10);
    }

    #[test]
    fn backend_strings() {
        assert_eq!("builtin".parse::<MatcherBackend>().unwrap(), MatcherBackend::Builtin);
        assert_eq!("adapter:/x/y".parse::<MatcherBackend>().unwrap(), MatcherBackend::Adapter(PathBuf::from("/x/y")));
        assert!("adapter:".parse::<MatcherBackend>().is_err());
        assert!("superglue".parse::<MatcherBackend>().is_err());
        let json = serde_json::to_string(&MatcherBackend::Adapter("/a b".into())).unwrap();
        assert_eq!(json, "\"adapter:/a b\"");
        assert_eq!(serde_json::from_str::<MatcherBackend>(&json).unwrap(), MatcherBackend::Adapter("/a b".into()));
    }

    #[test]
    fn parse_match_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        std::fs::write(&p, "# header\n1 2 3 4 0.5\n\n10.25 20 30 40 1\n").unwrap();
        let m = parse_adapter_matches(&p).unwrap();
        assert_eq!(m, vec![PixelMatch::new(1.0, 2.0, 3.0, 4.0, 0.5), PixelMatch::new(10.25, 20.0, 30.0, 40.0, 1.0)]);
        std::fs::write(&p, "1 2 3 4\n").unwrap();
        assert!(matches!(parse_adapter_matches(&p), Err(Error::Parse { .. })));
        std::fs::write(&p, "1 2 3 4 1.5\n").unwrap();
        assert!(parse_adapter_matches(&p).is_err());
    }
}
