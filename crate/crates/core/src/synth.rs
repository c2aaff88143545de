//! Deterministic synthetic scenes with seasonal dynamics and abrupt changes.
//!
//! A Voronoi partition assigns land-cover classes; every class has a smooth
//! spectral curve. Each frame adds a class-phased seasonal sinusoid to all
//! bands plus white noise. Change events repaint a region with `class_from`
//! up to `t_change − 1` and `class_to` from `t_change` on, so ground truth
//! follows exactly from the class volume.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Duration, NaiveDate};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, SceneTimeSeries};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, metrics, ConfusionCounts};
use crate::pseudolabel::{change_magnitude, threshold_labels, EmbeddingProvider, PropagationConfig, SpectralProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Rectangle {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// A disc of `radius` around (row, col) with a seeded wobbly outline.
    Blob {
        row: usize,
        col: usize,
        radius: f64,
        seed: u64,
    },
}

impl Region {
    pub fn mask(&self, h: usize, w: usize) -> Array2<bool> {
        match *self {
            Region::Rectangle {
                top,
                left,
                height,
                width,
            } => Array2::from_shape_fn((h, w), |(i, j)| {
                i >= top && i < top + height && j >= left && j < left + width
            }),
            Region::Blob { row, col, radius, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let harmonics: Vec<(f64, f64)> = (1..=3)
                    .map(|_| (rng.random_range(-0.25..0.25), rng.random_range(0.0..2.0 * PI)))
                    .collect();
                Array2::from_shape_fn((h, w), |(i, j)| {
                    let (di, dj) = (i as f64 - row as f64, j as f64 - col as f64);
                    let angle = di.atan2(dj);
                    let wobble: f64 = harmonics
                        .iter()
                        .enumerate()
                        .map(|(k, (a, p))| a * ((k as f64 + 2.0) * angle + p).sin())
                        .sum();
                    (di * di + dj * dj).sqrt() <= radius * (1.0 + wobble)
                })
            }
        }
    }

    fn within(&self, h: usize, w: usize) -> bool {
        match *self {
            Region::Rectangle {
                top,
                left,
                height,
                width,
            } => height > 0 && width > 0 && top + height <= h && left + width <= w,
            Region::Blob { row, col, radius, .. } => row < h && col < w && radius > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChangeEvent {
    pub region: Region,
    pub t_change: usize,
    pub class_from: usize,
    pub class_to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub frames: usize,
    pub n_classes: usize,
    pub seasonal_amplitude: f64,
    /// Period of the seasonal term, in frames.
    pub seasonal_period: f64,
    pub noise_sigma: f64,
    /// Voronoi sites of the base land-cover map.
    pub regions: usize,
    pub change_events: Vec<ChangeEvent>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 4,
            frames: 8,
            n_classes: 4,
            seasonal_amplitude: 0.02,
            seasonal_period: 8.0,
            noise_sigma: 0.01,
            regions: 12,
            change_events: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("height, width and channels must be positive".into());
        }
        if self.frames < 2 {
            return bad("a scene needs at least two frames".into());
        }
        if self.n_classes == 0 || self.regions == 0 {
            return bad("n_classes and regions must be positive".into());
        }
        if !(self.seasonal_amplitude >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("amplitudes must be non-negative".into());
        }
        if !(self.seasonal_period > 0.0) {
            return bad("seasonal_period must be positive".into());
        }
        for (k, e) in self.change_events.iter().enumerate() {
            if e.t_change < 1 || e.t_change > self.frames - 1 {
                return bad(format!("event {k}: t_change {} outside [1, {}]", e.t_change, self.frames - 1));
            }
            if e.class_from >= self.n_classes || e.class_to >= self.n_classes {
                return bad(format!("event {k}: class outside [0, {})", self.n_classes));
            }
            if !e.region.within(self.height, self.width) {
                return bad(format!("event {k}: region out of bounds"));
            }
        }
        Ok(())
    }
}

/// Reflectance of `class` at relative wavelength `x ∈ [0, 1]`.
fn class_curve(class: usize, x: f64, extra: &[(f64, f64)]) -> f64 {
    match class {
        // Water: dark, falling into the infrared.
        0 => 0.08 - 0.06 * x,
        // Vegetation: red edge.
        1 => 0.05 + 0.40 / (1.0 + (-(x - 0.6) * 15.0).exp()),
        // Bare soil: gently rising.
        2 => 0.20 + 0.10 * x,
        // Built-up: bright in the middle bands.
        3 => 0.20 + 0.30 * (PI * x).sin() - 0.10 * x,
        k => {
            let (a, b) = extra[k - 4];
            a + b * x
        }
    }
}

/// C-band signature of every class.
pub fn class_signatures(n_classes: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_5151);
    let extra: Vec<(f64, f64)> = (4..n_classes.max(4))
        .map(|_| (rng.random_range(0.05..0.35), rng.random_range(-0.1..0.25)))
        .collect();
    (0..n_classes)
        .map(|c| {
            (0..channels)
                .map(|b| {
                    let x = if channels == 1 { 0.5 } else { b as f64 / (channels - 1) as f64 };
                    class_curve(c, x, &extra)
                })
                .collect()
        })
        .collect()
}

/// Class of every pixel at every frame, T×H×W.
pub fn class_volume(spec: &SynthSpec) -> Result<Vec<Array2<usize>>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sites: Vec<(f64, f64, usize)> = (0..spec.regions)
        .map(|k| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                if k < spec.n_classes { k } else { rng.random_range(0..spec.n_classes) },
            )
        })
        .collect();
    let base = Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = (f64::INFINITY, 0);
        for &(r, c, class) in &sites {
            let d = (i as f64 - r).powi(2) + (j as f64 - c).powi(2);
            if d < best.0 {
                best = (d, class);
            }
        }
        best.1
    });
    let mut volume = vec![base; spec.frames];
    for e in &spec.change_events {
        let mask = e.region.mask(h, w);
        for (t, frame) in volume.iter_mut().enumerate() {
            let class = if t < e.t_change { e.class_from } else { e.class_to };
            ndarray::Zip::from(frame).and(&mask).for_each(|c, &m| {
                if m {
                    *c = class;
                }
            });
        }
    }
    Ok(volume)
}

/// Maps of `class(t) ≠ class(0)` for t = 1..T−1, and the index with the most
/// changed pixels (smallest on ties).
pub fn truth_from_classes(volume: &[Array2<usize>]) -> GroundTruth {
    let mut maps = BTreeMap::new();
    let mut best = (0usize, 1usize);
    for t in 1..volume.len() {
        let m = ndarray::Zip::from(&volume[t])
            .and(&volume[0])
            .map_collect(|a, b| u8::from(a != b));
        let count = m.iter().filter(|&&v| v == 1).count();
        if count > best.0 {
            best = (count, t);
        }
        maps.insert(t, m);
    }
    GroundTruth {
        maps,
        significant_pair_index: best.1,
    }
}

pub fn generate_scene(spec: &SynthSpec) -> Result<SceneTimeSeries> {
    let volume = class_volume(spec)?;
    let signatures = class_signatures(spec.n_classes, spec.channels, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let images: Vec<Array3<f32>> = volume
        .iter()
        .enumerate()
        .map(|(t, classes)| {
            let season: Vec<f64> = (0..spec.n_classes)
                .map(|k| {
                    let phase = 2.0 * PI * k as f64 / spec.n_classes as f64;
                    spec.seasonal_amplitude * (2.0 * PI * t as f64 / spec.seasonal_period + phase).sin()
                })
                .collect();
            let mut img = Array3::<f32>::zeros((h, w, c));
            for i in 0..h {
                for j in 0..w {
                    let k = classes[[i, j]];
                    for b in 0..c {
                        let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        img[[i, j, b]] = (signatures[k][b] + season[k] + n) as f32;
                    }
                }
            }
            img
        })
        .collect();
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time");
    let timestamps = (0..spec.frames).map(|t| start + Duration::days(30 * t as i64)).collect();
    let band_names = (0..c).map(|b| format!("B{}", b + 1)).collect();
    SceneTimeSeries::new(
        format!("synth_{:04}", spec.seed),
        timestamps,
        images,
        band_names,
        Some(truth_from_classes(&volume)),
    )
}

/// A random event at `t = 1` plus a narrow strip along one of its sides
/// that changes the same way later on. The strip makes a late pair the
/// significant one, so the whole sequence matters.
pub fn tracking_scenario(base: &SynthSpec, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
    let (h, w) = (base.height, base.width);
    let side = (h.min(w) / 4).max(4);
    let strip = (side / 4).clamp(1, 5);
    let top = rng.random_range(strip..h - side - strip + 1);
    let left = rng.random_range(strip..w - side - strip + 1);
    let class_from = rng.random_range(0..base.n_classes);
    let class_to = (class_from + rng.random_range(1..base.n_classes.max(2))) % base.n_classes.max(2);
    let late = rng.random_range((base.frames / 2).max(2)..base.frames);
    let strip_region = match rng.random_range(0..4) {
        0 => Region::Rectangle { top: top - strip, left, height: strip, width: side },
        1 => Region::Rectangle { top: top + side, left, height: strip, width: side },
        2 => Region::Rectangle { top, left: left - strip, height: side, width: strip },
        _ => Region::Rectangle { top, left: left + side, height: side, width: strip },
    };
    let mut spec = base.clone();
    spec.seed = seed;
    spec.change_events = vec![
        ChangeEvent {
            region: Region::Rectangle { top, left, height: side, width: side },
            t_change: 1,
            class_from,
            class_to,
        },
        ChangeEvent {
            region: strip_region,
            t_change: late.min(base.frames - 1),
            class_from,
            class_to,
        },
    ];
    spec
}

/// Confusion counts of thresholded change magnitude at the significant pair.
pub fn baseline_threshold_counts(scene: &SceneTimeSeries, cfg: &PropagationConfig) -> Result<ConfusionCounts> {
    let gt = scene
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::MissingGroundTruth(scene.scene_id.clone()))?;
    let t = gt.significant_pair_index;
    let truth = gt
        .significant_map()
        .ok_or_else(|| Error::MissingGroundTruth(scene.scene_id.clone()))?;
    let frames = SpectralProvider { sigma: cfg.smoothing_sigma }.frame_embeddings(scene)?;
    let scores = change_magnitude(&frames[0], &frames[t])?;
    let labels = threshold_labels(&scores, cfg.threshold)?.labels;
    confusion(&labels.hard, truth, None)
}

/// F1 of thresholded change magnitude at the significant pair.
pub fn baseline_threshold_f1(scene: &SceneTimeSeries, cfg: &PropagationConfig) -> Result<f64> {
    Ok(metrics(&baseline_threshold_counts(scene, cfg)?)?.f1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            height: 32,
            width: 32,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn null_scene_has_empty_truth() {
        let s = generate_scene(&spec()).unwrap();
        let gt = s.ground_truth.unwrap();
        assert_eq!(gt.significant_pair_index, 1);
        assert!(gt.maps.values().all(|m| m.iter().all(|&v| v == 0)));
        assert_eq!(gt.maps.len(), 7);
    }

    #[test]
    fn step_event_appears_from_its_frame() {
        let region = Region::Rectangle {
            top: 4,
            left: 6,
            height: 5,
            width: 7,
        };
        let mut sp = spec();
        sp.change_events = vec![ChangeEvent {
            region: region.clone(),
            t_change: 4,
            class_from: 0,
            class_to: 3,
        }];
        let gt = generate_scene(&sp).unwrap().ground_truth.unwrap();
        let expect = region.mask(32, 32).mapv(u8::from);
        for t in 1..4 {
            assert!(gt.maps[&t].iter().all(|&v| v == 0));
        }
        for t in 4..8 {
            assert_eq!(gt.maps[&t], expect);
        }
        assert_eq!(gt.significant_pair_index, 4);
    }

    #[test]
    fn same_seed_same_scene() {
        let sp = tracking_scenario(&spec(), 9);
        assert_eq!(generate_scene(&sp).unwrap(), generate_scene(&sp).unwrap());
        let other = tracking_scenario(&spec(), 10);
        assert_ne!(generate_scene(&sp).unwrap().images, generate_scene(&other).unwrap().images);
    }

    #[test]
    fn truth_matches_class_trajectories() {
        let sp = tracking_scenario(&spec(), 4);
        let vol = class_volume(&sp).unwrap();
        let gt = generate_scene(&sp).unwrap().ground_truth.unwrap();
        for t in 1..8 {
            for ((i, j), &v) in gt.maps[&t].indexed_iter() {
                assert_eq!(v == 1, vol[t][[i, j]] != vol[0][[i, j]]);
            }
        }
    }

    #[test]
    fn tracking_scenario_is_late_and_valid() {
        for seed in 0..20 {
            let sp = tracking_scenario(&spec(), seed);
            sp.validate().unwrap();
            let gt = generate_scene(&sp).unwrap().ground_truth.unwrap();
            assert!(gt.significant_pair_index >= 4, "seed {seed}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut sp = spec();
        sp.change_events = vec![ChangeEvent {
            region: Region::Rectangle { top: 0, left: 0, height: 2, width: 2 },
            t_change: 8,
            class_from: 0,
            class_to: 1,
        }];
        assert!(generate_scene(&sp).is_err());
        let mut sp = spec();
        sp.noise_sigma = -1.0;
        assert!(generate_scene(&sp).is_err());
    }

    #[test]
    fn noiseless_baseline_is_perfect_and_empty_truth_scores_zero() {
        let mut sp = tracking_scenario(&spec(), 1);
        sp.noise_sigma = 0.0;
        sp.seasonal_amplitude = 0.0;
        let scene = generate_scene(&sp).unwrap();
        let cfg = PropagationConfig { smoothing_sigma: 0.0, ..Default::default() };
        assert_eq!(baseline_threshold_f1(&scene, &cfg).unwrap(), 1.0);
        let null = generate_scene(&spec()).unwrap();
        assert_eq!(baseline_threshold_f1(&null, &cfg).unwrap(), 0.0);
    }
}
