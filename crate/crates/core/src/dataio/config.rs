//! Run configuration (flat `key = value` text) and dataset manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::DataError;
use crate::geom::PerturbationSpec;
use crate::metrics::{EulerConvention, SuccessThresholds};
use crate::pose::RansacParams;
use crate::projection::ProjectionConfig;

/// Which descriptor feeds matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// Ideal codes for synthetic frames, the builtin descriptor otherwise.
    #[default]
    Auto,
    Builtin,
}

impl FromStr for FeatureMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(Self::Auto),
            "builtin" => Ok(Self::Builtin),
            _ => Err(format!("unknown feature mode {s:?} (expected auto or builtin)")),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Builtin => "builtin",
        })
    }
}

/// Every tunable of a run. Defaults follow the KITTI setup.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub map_width: usize,
    pub map_height: usize,
    pub range_max: f64,
    pub d_patch: usize,
    pub d_pixel: usize,
    pub features: FeatureMode,
    pub top_k: usize,
    pub ransac_max_iterations: usize,
    pub ransac_threshold: f64,
    pub ransac_min_inliers: usize,
    pub ransac_confidence: f64,
    pub seed: u64,
    pub max_xy_translation: f64,
    pub yaw_range: f64,
    pub success_rte: f64,
    pub success_rre: f64,
    pub euler: EulerConvention,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RansacParams::default();
        let s = SuccessThresholds::default();
        let p = ProjectionConfig::kitti();
        Self {
            image_width: 512,
            image_height: 160,
            map_width: p.width,
            map_height: p.height,
            range_max: p.range_max,
            d_patch: crate::features::DEFAULT_D_PATCH,
            d_pixel: crate::features::DEFAULT_D_PIXEL,
            features: FeatureMode::Auto,
            top_k: crate::matching::DEFAULT_TOP_K,
            ransac_max_iterations: r.max_iterations,
            ransac_threshold: r.inlier_threshold,
            ransac_min_inliers: r.min_inliers,
            ransac_confidence: r.confidence,
            seed: r.seed,
            max_xy_translation: 10.0,
            yaw_range: 360.0,
            success_rte: s.rte,
            success_rre: s.rre,
            euler: EulerConvention::default(),
        }
    }
}

/// Keys in canonical order, as written by [`RunConfig::to_text`].
pub const KEYS: &[&str] = &[
    "image_width",
    "image_height",
    "map_width",
    "map_height",
    "range_max",
    "d_patch",
    "d_pixel",
    "features",
    "top_k",
    "ransac_max_iterations",
    "ransac_threshold",
    "ransac_min_inliers",
    "ransac_confidence",
    "seed",
    "max_xy_translation",
    "yaw_range",
    "success_rte",
    "success_rre",
    "euler",
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V, DataError>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| DataError::Format(format!("{key} = {value:?}: {e}")))
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`. Blank lines
    /// and `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DataError::Format(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), DataError> {
        match key {
            "image_width" => self.image_width = parse_value(key, value)?,
            "image_height" => self.image_height = parse_value(key, value)?,
            "map_width" => self.map_width = parse_value(key, value)?,
            "map_height" => self.map_height = parse_value(key, value)?,
            "range_max" => self.range_max = parse_value(key, value)?,
            "d_patch" => self.d_patch = parse_value(key, value)?,
            "d_pixel" => self.d_pixel = parse_value(key, value)?,
            "features" => self.features = parse_value(key, value)?,
            "top_k" => self.top_k = parse_value(key, value)?,
            "ransac_max_iterations" => self.ransac_max_iterations = parse_value(key, value)?,
            "ransac_threshold" => self.ransac_threshold = parse_value(key, value)?,
            "ransac_min_inliers" => self.ransac_min_inliers = parse_value(key, value)?,
            "ransac_confidence" => self.ransac_confidence = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "max_xy_translation" => self.max_xy_translation = parse_value(key, value)?,
            "yaw_range" => self.yaw_range = parse_value(key, value)?,
            "success_rte" => self.success_rte = parse_value(key, value)?,
            "success_rre" => self.success_rre = parse_value(key, value)?,
            "euler" => self.euler = parse_value(key, value)?,
            _ => return Err(DataError::Format(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "image_width" => self.image_width.to_string(),
            "image_height" => self.image_height.to_string(),
            "map_width" => self.map_width.to_string(),
            "map_height" => self.map_height.to_string(),
            "range_max" => self.range_max.to_string(),
            "d_patch" => self.d_patch.to_string(),
            "d_pixel" => self.d_pixel.to_string(),
            "features" => self.features.to_string(),
            "top_k" => self.top_k.to_string(),
            "ransac_max_iterations" => self.ransac_max_iterations.to_string(),
            "ransac_threshold" => self.ransac_threshold.to_string(),
            "ransac_min_inliers" => self.ransac_min_inliers.to_string(),
            "ransac_confidence" => self.ransac_confidence.to_string(),
            "seed" => self.seed.to_string(),
            "max_xy_translation" => self.max_xy_translation.to_string(),
            "yaw_range" => self.yaw_range.to_string(),
            "success_rte" => self.success_rte.to_string(),
            "success_rre" => self.success_rre.to_string(),
            "euler" => self.euler.to_string(),
            _ => return None,
        })
    }

    /// Every resolved value, one `key = value` line each, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("known key"));
        }
        out
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.top_k == 0 {
            return Err(DataError::Format("top_k must be >= 1".into()));
        }
        for (w, h) in [(self.image_width, self.image_height), (self.map_width, self.map_height)] {
            if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
                return Err(DataError::BadDims { width: w, height: h });
            }
        }
        self.projection()
            .validate()
            .map_err(|e| DataError::Format(e.to_string()))?;
        self.ransac()
            .validate()
            .map_err(|e| DataError::Format(e.to_string()))?;
        self.perturbation(0).validate()?;
        Ok(())
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_width, self.image_height)
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            width: self.map_width,
            height: self.map_height,
            range_max: self.range_max,
            ..ProjectionConfig::kitti()
        }
    }

    pub fn ransac(&self) -> RansacParams {
        RansacParams {
            max_iterations: self.ransac_max_iterations,
            inlier_threshold: self.ransac_threshold,
            min_inliers: self.ransac_min_inliers,
            confidence: self.ransac_confidence,
            seed: self.seed,
            ..RansacParams::default()
        }
    }

    pub fn perturbation(&self, seed: u64) -> PerturbationSpec {
        PerturbationSpec {
            max_xy_translation: self.max_xy_translation,
            yaw_range: self.yaw_range,
            seed,
        }
    }

    pub fn thresholds(&self) -> SuccessThresholds {
        SuccessThresholds {
            rte: self.success_rte,
            rre: self.success_rre,
        }
    }
}

/// One frame of a dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifestEntry {
    /// `synthetic seed=N [outliers=M]`
    Synthetic { seed: u64, outliers: usize },
    /// `kitti cloud=P image=P calib=P [perturb_seed=N]`
    Kitti {
        cloud: PathBuf,
        image: PathBuf,
        calib: PathBuf,
        perturb_seed: u64,
    },
}

impl ManifestEntry {
    pub fn label(&self) -> String {
        match self {
            Self::Synthetic { seed, outliers } => format!("synthetic:{seed}:{outliers}"),
            Self::Kitti { cloud, .. } => cloud
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| cloud.display().to_string()),
        }
    }
}

/// Ordered frame list; output order always follows it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses manifest text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, DataError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| DataError::Format(format!("manifest line {}: {m}", n + 1));
            let mut words = line.split_whitespace();
            let kind = words.next().unwrap_or("");
            let mut fields = std::collections::BTreeMap::new();
            for w in words {
                let (k, v) = w.split_once('=').ok_or_else(|| err(format!("expected key=value, got {w:?}")))?;
                if fields.insert(k, v).is_some() {
                    return Err(err(format!("duplicate field {k}")));
                }
            }
            let mut take = |k: &str| fields.remove(k);
            let num = |k: &str, v: Option<&str>| -> Result<Option<u64>, DataError> {
                v.map(|v| v.parse().map_err(|e| err(format!("{k}: {e}")))).transpose()
            };
            let entry = match kind {
                "synthetic" => ManifestEntry::Synthetic {
                    seed: num("seed", take("seed"))?.ok_or_else(|| err("missing seed".into()))?,
                    outliers: num("outliers", take("outliers"))?.unwrap_or(0) as usize,
                },
                "kitti" => {
                    let mut path = |k: &str| -> Result<PathBuf, DataError> {
                        let p = take(k).ok_or_else(|| err(format!("missing {k}")))?;
                        Ok(base.join(p))
                    };
                    let (cloud, image, calib) = (path("cloud")?, path("image")?, path("calib")?);
                    ManifestEntry::Kitti {
                        cloud,
                        image,
                        calib,
                        perturb_seed: num("perturb_seed", take("perturb_seed"))?.unwrap_or(0),
                    }
                }
                other => return Err(err(format!("unknown entry kind {other:?}"))),
            };
            if let Some(k) = fields.keys().next() {
                return Err(err(format!("unknown field {k}")));
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&std::fs::read_to_string(path)?, base)
    }

    /// `n` synthetic frames with consecutive seeds.
    pub fn synthetic(first_seed: u64, n: usize, outliers: usize) -> Self {
        Self {
            entries: (0..n as u64)
                .map(|i| ManifestEntry::Synthetic {
                    seed: first_seed + i,
                    outliers,
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = match e {
                ManifestEntry::Synthetic { seed, outliers } => writeln!(out, "synthetic seed={seed} outliers={outliers}"),
                ManifestEntry::Kitti {
                    cloud,
                    image,
                    calib,
                    perturb_seed,
                } => writeln!(
                    out,
                    "kitti cloud={} image={} calib={} perturb_seed={perturb_seed}",
                    cloud.display(),
                    image.display(),
                    calib.display()
                ),
            };
        }
        out
    }
}
