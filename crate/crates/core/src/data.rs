//! Scene time series ingestion, anchored change pairs, normalization and
//! the photometric augmentation used for the teacher view.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster;

/// Reference change maps for a scene.
///
/// Maps are keyed by pair index (1-based, pair t = (I₀, I_t)). Real datasets
/// usually label only the significant pair; synthetic scenes label all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub maps: BTreeMap<usize, Array2<u8>>,
    pub significant_pair_index: usize,
}

impl GroundTruth {
    pub fn significant_map(&self) -> Option<&Array2<u8>> {
        self.maps.get(&self.significant_pair_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTimeSeries {
    pub scene_id: String,
    pub timestamps: Vec<NaiveDateTime>,
    /// T images, each H×W×C reflectance.
    pub images: Vec<Array3<f32>>,
    pub band_names: Vec<String>,
    pub ground_truth: Option<GroundTruth>,
}

impl SceneTimeSeries {
    /// Builds a scene and checks every invariant.
    pub fn new(
        scene_id: impl Into<String>,
        timestamps: Vec<NaiveDateTime>,
        images: Vec<Array3<f32>>,
        band_names: Vec<String>,
        ground_truth: Option<GroundTruth>,
    ) -> Result<Self> {
        let scene = Self {
            scene_id: scene_id.into(),
            timestamps,
            images,
            band_names,
            ground_truth,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// (H, W, C) of every image.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.images[0].dim()
    }

    pub fn num_pairs(&self) -> usize {
        self.images.len().saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() < 2 {
            return Err(Error::InsufficientFrames {
                needed: 2,
                got: self.images.len(),
            });
        }
        if self.timestamps.len() != self.images.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} timestamps for {} images",
                self.timestamps.len(),
                self.images.len()
            )));
        }
        for w in self.timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::NonMonotoneTimestamps(format!("{} then {}", w[0], w[1])));
            }
        }
        let dims = self.images[0].dim();
        for (t, img) in self.images.iter().enumerate() {
            if img.dim() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "image {t} is {:?}, image 0 is {dims:?}",
                    img.dim()
                )));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("image {t} of scene {}", self.scene_id)));
            }
        }
        if !self.band_names.is_empty() && self.band_names.len() != dims.2 {
            return Err(Error::ChannelMismatch {
                expected: dims.2,
                got: self.band_names.len(),
            });
        }
        if let Some(gt) = &self.ground_truth {
            let last = self.images.len() - 1;
            if gt.significant_pair_index < 1 || gt.significant_pair_index > last {
                return Err(Error::InvalidArgument(format!(
                    "significant_pair_index {} outside [1, {last}]",
                    gt.significant_pair_index
                )));
            }
            for (&t, map) in &gt.maps {
                if t < 1 || t > last {
                    return Err(Error::InvalidArgument(format!("ground-truth pair index {t}")));
                }
                if map.dim() != (dims.0, dims.1) {
                    return Err(Error::ShapeMismatch(format!(
                        "ground-truth map {t} is {:?}",
                        map.dim()
                    )));
                }
                if map.iter().any(|&v| v > 1) {
                    return Err(Error::InvalidArgument(format!(
                        "ground-truth map {t} has values outside {{0,1}}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The unit every feature, label and map is defined on: (I₀, I_t).
#[derive(Debug, Clone, PartialEq)]
pub struct ChangePair {
    pub pair_index: usize,
    pub anchor: Array3<f32>,
    pub target: Array3<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroundTruthManifest {
    maps: Vec<PathBuf>,
    significant_pair_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneManifest {
    scene_id: String,
    dates: Vec<String>,
    rasters: Vec<PathBuf>,
    bands: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<GroundTruthManifest>,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").ok()
}

fn format_timestamp(t: &NaiveDateTime) -> String {
    if t.time() == chrono::NaiveTime::MIN {
        t.format("%Y-%m-%d").to_string()
    } else {
        t.format("%Y-%m-%dT%H:%M:%S").to_string()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a scene manifest and every raster it references.
///
/// Relative raster paths resolve against the manifest's directory. The
/// ground-truth `maps` array holds either one map per pair (T−1 entries) or
/// a single map for the significant pair.
pub fn load_scene(manifest_path: &Path) -> Result<SceneTimeSeries> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        what: "scene manifest",
        path: manifest_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.dates.len() != manifest.rasters.len() {
        return Err(Error::Malformed {
            what: "scene manifest",
            path: manifest_path.to_path_buf(),
            detail: format!(
                "{} dates but {} rasters",
                manifest.dates.len(),
                manifest.rasters.len()
            ),
        });
    }
    let timestamps = manifest
        .dates
        .iter()
        .map(|s| {
            parse_timestamp(s).ok_or_else(|| Error::Malformed {
                what: "timestamp",
                path: manifest_path.to_path_buf(),
                detail: s.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let images = manifest
        .rasters
        .iter()
        .map(|p| raster::read_f32(&resolve(base, p)))
        .collect::<Result<Vec<_>>>()?;

    let ground_truth = match &manifest.ground_truth {
        None => None,
        Some(gt) => {
            let pairs = images.len().saturating_sub(1);
            let indices: Vec<usize> = if gt.maps.len() == pairs {
                (1..=pairs).collect()
            } else if gt.maps.len() == 1 {
                vec![gt.significant_pair_index]
            } else {
                return Err(Error::Malformed {
                    what: "ground truth",
                    path: manifest_path.to_path_buf(),
                    detail: format!("expected 1 or {pairs} maps, got {}", gt.maps.len()),
                });
            };
            let mut maps = BTreeMap::new();
            for (t, p) in indices.into_iter().zip(&gt.maps) {
                let cube = raster::read_f32(&resolve(base, p))?;
                if cube.dim().2 != 1 {
                    return Err(Error::ShapeMismatch(format!(
                        "ground-truth map {} has {} channels",
                        p.display(),
                        cube.dim().2
                    )));
                }
                let map = cube.index_axis(Axis(2), 0).mapv(|v| {
                    if v == 0.0 {
                        0u8
                    } else if v == 1.0 {
                        1
                    } else {
                        u8::MAX
                    }
                });
                maps.insert(t, map);
            }
            Some(GroundTruth {
                maps,
                significant_pair_index: gt.significant_pair_index,
            })
        }
    };

    let mut scene = SceneTimeSeries {
        scene_id: manifest.scene_id,
        timestamps,
        images,
        band_names: manifest.bands,
        ground_truth,
    };
    scene.validate()?;
    scene.images.shrink_to_fit();
    Ok(scene)
}

/// Writes `scene` as `dir/manifest.json` plus one raster per date and per
/// ground-truth map. Returns the manifest path.
pub fn save_scene(scene: &SceneTimeSeries, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rasters = Vec::with_capacity(scene.images.len());
    for (t, img) in scene.images.iter().enumerate() {
        let name = PathBuf::from(format!("image_{t:03}.f32"));
        raster::write_f32(&dir.join(&name), img)?;
        rasters.push(name);
    }
    let ground_truth = match &scene.ground_truth {
        None => None,
        Some(gt) => {
            let mut maps = Vec::new();
            for (t, map) in &gt.maps {
                let name = PathBuf::from(format!("truth_{t:03}.u8"));
                raster::write_u8(&dir.join(&name), map)?;
                maps.push(name);
            }
            Some(GroundTruthManifest {
                maps,
                significant_pair_index: gt.significant_pair_index,
            })
        }
    };
    let manifest = SceneManifest {
        scene_id: scene.scene_id.clone(),
        dates: scene.timestamps.iter().map(format_timestamp).collect(),
        rasters,
        bands: scene.band_names.clone(),
        ground_truth,
    };
    let path = dir.join("manifest.json");
    raster::write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Pairs every later image with the first: T−1 pairs, pair t = (I₀, I_t).
pub fn build_change_pairs(scene: &SceneTimeSeries) -> Result<Vec<ChangePair>> {
    if scene.images.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: scene.images.len(),
        });
    }
    let anchor = &scene.images[0];
    Ok(scene.images[1..]
        .iter()
        .enumerate()
        .map(|(i, target)| ChangePair {
            pair_index: i + 1,
            anchor: anchor.clone(),
            target: target.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormalizationStats {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::ChannelMismatch {
                expected: mean.len(),
                got: std.len(),
            });
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(
                "normalization std must be finite and positive".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    /// Per-band statistics over all dates of a scene jointly.
    ///
    /// A constant band gets std 1 so that it is centred but not scaled.
    pub fn from_images(images: &[Array3<f32>]) -> Self {
        Self::from_image_refs(images.iter())
    }

    fn from_image_refs<'a>(images: impl Iterator<Item = &'a Array3<f32>> + Clone) -> Self {
        let c = images.clone().next().map(|a| a.dim().2).unwrap_or(0);
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let mut n = 0usize;
        for img in images {
            for px in img.lanes(Axis(2)) {
                for (b, &v) in px.iter().enumerate() {
                    sum[b] += v as f64;
                    sq[b] += (v as f64) * (v as f64);
                }
            }
            n += img.dim().0 * img.dim().1;
        }
        let n = n as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n;
                let var = (q / n - m * m).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn from_scene(scene: &SceneTimeSeries) -> Self {
        Self::from_images(&scene.images)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub fn normalize(image: &Array3<f32>, stats: &NormalizationStats) -> Result<Array3<f32>> {
    let c = image.dim().2;
    if c != stats.channels() {
        return Err(Error::ChannelMismatch {
            expected: stats.channels(),
            got: c,
        });
    }
    let mut out = image.clone();
    for mut px in out.lanes_mut(Axis(2)) {
        for (b, v) in px.iter_mut().enumerate() {
            *v = (*v - stats.mean[b]) / stats.std[b];
        }
    }
    Ok(out)
}

pub fn denormalize(image: &Array3<f32>, stats: &NormalizationStats) -> Result<Array3<f32>> {
    let c = image.dim().2;
    if c != stats.channels() {
        return Err(Error::ChannelMismatch {
            expected: stats.channels(),
            got: c,
        });
    }
    let mut out = image.clone();
    for mut px in out.lanes_mut(Axis(2)) {
        for (b, v) in px.iter_mut().enumerate() {
            *v = *v * stats.std[b] + stats.mean[b];
        }
    }
    Ok(out)
}

/// One affine photometric draw: per-band gain and offset.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterDraw {
    pub gain: Vec<f32>,
    /// Offset in units of the band standard deviation.
    pub offset: Vec<f32>,
}

impl JitterDraw {
    pub fn sample(channels: usize, strength: f32, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::InvalidArgument(format!(
                "jitter strength {strength} outside [0, 1]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gain = Vec::with_capacity(channels);
        let mut offset = Vec::with_capacity(channels);
        for _ in 0..channels {
            gain.push(1.0 + strength * (2.0 * rng.random::<f32>() - 1.0));
            offset.push(strength * (2.0 * rng.random::<f32>() - 1.0));
        }
        Ok(Self { gain, offset })
    }
}

fn band_std(images: &[&Array3<f32>]) -> Vec<f32> {
    NormalizationStats::from_image_refs(images.iter().copied()).std
}

/// Applies one seeded draw to every image; the offset scale is the per-band
/// standard deviation over all given images.
pub fn jitter_images(images: &[&Array3<f32>], strength: f32, seed: u64) -> Result<Vec<Array3<f32>>> {
    let c = images.first().map(|a| a.dim().2).unwrap_or(0);
    let draw = JitterDraw::sample(c, strength, seed)?;
    if strength == 0.0 {
        return Ok(images.iter().map(|a| (*a).clone()).collect());
    }
    let std = band_std(images);
    Ok(images
        .iter()
        .map(|img| {
            let mut out = (*img).clone();
            for mut px in out.lanes_mut(Axis(2)) {
                for (b, v) in px.iter_mut().enumerate() {
                    *v = *v * draw.gain[b] + draw.offset[b] * std[b];
                }
            }
            out
        })
        .collect())
}

/// Teacher-view augmentation of a pair; anchor and target share one draw.
pub fn color_jitter(pair: &ChangePair, strength: f32, seed: u64) -> Result<ChangePair> {
    let mut out = jitter_images(&[&pair.anchor, &pair.target], strength, seed)?;
    let target = out.pop().expect("two images");
    let anchor = out.pop().expect("two images");
    Ok(ChangePair {
        pair_index: pair.pair_index,
        anchor,
        target,
    })
}
