//! Pseudo change labels: change magnitude, Otsu thresholding, and
//! feature-tracking label propagation through the pair sequence.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SceneTimeSeries;
use crate::error::{Error, Result};
use crate::raster;

const NORM_TOLERANCE: f32 = 1e-4;

/// Per-pixel unit-norm embedding of one change pair, h×w×n.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField {
    pub values: Array3<f32>,
    pub pair_index: usize,
}

impl EmbeddingField {
    /// Wraps already-normalized values, rejecting anything off the unit sphere.
    pub fn new(values: Array3<f32>, pair_index: usize) -> Result<Self> {
        let mut worst = 0f32;
        for v in values.lanes(Axis(2)) {
            let n = v.dot(&v).sqrt();
            if !n.is_finite() {
                return Err(Error::NonFinite(format!("embedding of pair {pair_index}")));
            }
            worst = worst.max((n - 1.0).abs());
        }
        if worst > NORM_TOLERANCE {
            return Err(Error::NotNormalized(worst as f64));
        }
        Ok(Self { values, pair_index })
    }

    /// Normalizes each pixel vector. Zero vectors become the first basis vector.
    pub fn normalized(mut values: Array3<f32>, pair_index: usize) -> Result<Self> {
        normalize_pixels(&mut values);
        Self::new(values, pair_index)
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

fn normalize_pixels(values: &mut Array3<f32>) {
    for mut v in values.lanes_mut(Axis(2)) {
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if n > 0.0 {
            v.mapv_inplace(|x| (x as f64 / n) as f32);
        } else if let Some(first) = v.iter_mut().next() {
            *first = 1.0;
        }
    }
}

/// Soft change score, its binarization, and the mask of unreliable pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    pub soft: Array2<f32>,
    pub hard: Array2<u8>,
    pub ignore: Array2<bool>,
}

impl LabelField {
    /// `hard = soft ≥ 0.5`; pixels with soft in `[low, high)` are ignored.
    pub fn from_soft(soft: Array2<f32>, ignore_band: Option<(f32, f32)>) -> Self {
        let hard = soft.mapv(|s| u8::from(s >= 0.5));
        let ignore = match ignore_band {
            Some((lo, hi)) => soft.mapv(|s| s >= lo && s < hi),
            None => Array2::from_elem(soft.dim(), false),
        };
        Self { soft, hard, ignore }
    }

    pub fn from_hard(hard: Array2<u8>) -> Self {
        Self {
            soft: hard.mapv(f32::from),
            ignore: Array2::from_elem(hard.dim(), false),
            hard,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.hard.dim()
    }

    /// Fraction of non-ignored pixels labelled changed (0 when all are ignored).
    pub fn changed_fraction(&self) -> f64 {
        let (mut kept, mut changed) = (0usize, 0usize);
        for (h, i) in self.hard.iter().zip(&self.ignore) {
            if !i {
                kept += 1;
                changed += *h as usize;
            }
        }
        if kept == 0 {
            0.0
        } else {
            changed as f64 / kept as f64
        }
    }

    pub fn with_ignore_band(mut self, band: (f32, f32)) -> Self {
        self.ignore = self.soft.mapv(|s| s >= band.0 && s < band.1);
        self
    }
}

/// How pair scores are binarized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    Otsu,
    /// Otsu, but never below the given score. Keeps pure-noise scenes unchanged.
    OtsuWithFloor(f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationConfig {
    /// Spatial window side.
    #[serde(rename = "P")]
    pub window: usize,
    /// Temporal context size, anchor included.
    #[serde(rename = "N_T")]
    pub context: usize,
    #[serde(rename = "N_k")]
    pub top_k: usize,
    #[serde(rename = "tau_prop")]
    pub temperature: f64,
    pub ignore_band: (f32, f32),
    pub threshold: ThresholdMethod,
    /// Gaussian smoothing of the spectral embedding provider.
    pub smoothing_sigma: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            window: 10,
            context: 3,
            top_k: 10,
            temperature: 0.005,
            ignore_band: (0.4, 0.6),
            threshold: ThresholdMethod::Otsu,
            smoothing_sigma: 1.5,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.context == 0 || self.top_k == 0 {
            return Err(Error::InvalidArgument("P, N_T and N_k must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("tau_prop must be positive".into()));
        }
        if !(self.ignore_band.0 <= self.ignore_band.1) {
            return Err(Error::InvalidArgument("ignore_band must satisfy low <= high".into()));
        }
        if self.smoothing_sigma < 0.0 {
            return Err(Error::InvalidArgument("smoothing_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// `1 − cos` between per-pixel vectors, in [0, 2].
pub fn change_magnitude(anchor: &Array3<f32>, target: &Array3<f32>) -> Result<Array2<f32>> {
    if anchor.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "anchor {:?} vs target {:?}",
            anchor.dim(),
            target.dim()
        )));
    }
    let (h, w, _) = anchor.dim();
    let mut out = Array2::zeros((h, w));
    for ((i, j), o) in out.indexed_iter_mut() {
        let a = anchor.slice(ndarray::s![i, j, ..]);
        let b = target.slice(ndarray::s![i, j, ..]);
        let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
        for (x, y) in a.iter().zip(b.iter()) {
            let (x, y) = (*x as f64, *y as f64);
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        let cos = if aa == 0.0 && bb == 0.0 {
            1.0
        } else if aa == 0.0 || bb == 0.0 {
            0.0
        } else {
            ab / (aa.sqrt() * bb.sqrt())
        };
        *o = (1.0 - cos.clamp(-1.0, 1.0)) as f32;
    }
    Ok(out)
}

const OTSU_BINS: usize = 256;

/// Otsu split of a 256-bin histogram over [min, max].
#[derive(Debug, Clone, Copy, PartialEq)]
struct OtsuSplit {
    min: f64,
    width: f64,
    /// Bins `0..=last_low` form the low class.
    last_low: usize,
}

impl OtsuSplit {
    fn bin(&self, s: f32) -> usize {
        (((s as f64 - self.min) / self.width) as usize).min(OTSU_BINS - 1)
    }

    fn threshold(&self) -> f64 {
        self.min + (self.last_low + 1) as f64 * self.width
    }
}

fn otsu_split(scores: &Array2<f32>) -> Result<Option<OtsuSplit>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to threshold".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("change scores".into()));
    }
    let min = scores.iter().fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
    let max = scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    if max <= min {
        return Ok(None);
    }
    let mut split = OtsuSplit {
        min,
        width: (max - min) / OTSU_BINS as f64,
        last_low: 0,
    };
    let mut hist = [0f64; OTSU_BINS];
    for &s in scores {
        hist[split.bin(s)] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    let centre = |b: usize| b as f64 + 0.5;
    let sum_all: f64 = hist.iter().enumerate().map(|(b, n)| n * centre(b)).sum();
    let (mut w0, mut sum0, mut best) = (0f64, 0f64, -1f64);
    for k in 0..OTSU_BINS - 1 {
        w0 += hist[k];
        sum0 += hist[k] * centre(k);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if between > best {
            best = between;
            split.last_low = k;
        }
    }
    Ok(Some(split))
}

/// Binarized scores plus the threshold that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholded {
    pub labels: LabelField,
    /// `None` when the scores were constant.
    pub threshold: Option<f32>,
}

/// Binarizes change scores. Soft scores map min → 0, threshold → 0.5,
/// max → 1, linearly in between. Constant scores give all-unchanged labels.
pub fn threshold_labels(scores: &Array2<f32>, method: ThresholdMethod) -> Result<Thresholded> {
    let Some(split) = otsu_split(scores)? else {
        return Ok(Thresholded {
            labels: LabelField::from_hard(Array2::zeros(scores.dim())),
            threshold: None,
        });
    };
    let max = scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let otsu = split.threshold();
    let (threshold, hard) = match method {
        ThresholdMethod::OtsuWithFloor(floor) if floor as f64 > otsu => {
            (floor as f64, scores.mapv(|s| u8::from(s >= floor)))
        }
        _ => (otsu, scores.mapv(|s| u8::from(split.bin(s) > split.last_low))),
    };
    let min = split.min;
    let soft = ndarray::Zip::from(scores).and(&hard).map_collect(|&s, &h| {
        let s = s as f64;
        let v = if s < threshold {
            if threshold > min {
                0.5 * (s - min) / (threshold - min)
            } else {
                0.0
            }
        } else if max > threshold {
            0.5 + 0.5 * (s - threshold) / (max - threshold)
        } else {
            1.0
        };
        // Keep soft and hard consistent at the exact threshold.
        let v = v.clamp(0.0, 1.0) as f32;
        match h {
            1 => v.max(0.5),
            _ => v.min(0.5f32.next_down()),
        }
    });
    Ok(Thresholded {
        labels: LabelField {
            soft,
            hard,
            ignore: Array2::from_elem(scores.dim(), false),
        },
        threshold: Some(threshold as f32),
    })
}

/// Anchor entry plus the most recent propagated pairs.
#[derive(Debug, Clone)]
pub struct ContextQueues {
    capacity: usize,
    anchor: (EmbeddingField, Array2<f32>),
    recent: VecDeque<(EmbeddingField, Array2<f32>)>,
}

impl ContextQueues {
    /// `capacity` counts the anchor, so at most `capacity − 1` recent entries are kept.
    pub fn new(anchor: EmbeddingField, anchor_labels: Array2<f32>, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("context capacity must be at least 1".into()));
        }
        let (h, w, _) = anchor.dim();
        if anchor_labels.dim() != (h, w) {
            return Err(Error::ShapeMismatch("anchor labels vs embedding".into()));
        }
        Ok(Self {
            capacity,
            anchor: (anchor, anchor_labels),
            recent: VecDeque::new(),
        })
    }

    pub fn push(&mut self, embedding: EmbeddingField, labels: Array2<f32>) {
        if self.capacity == 1 {
            return;
        }
        if self.recent.len() == self.capacity - 1 {
            self.recent.pop_front();
        }
        self.recent.push_back((embedding, labels));
    }

    pub fn len(&self) -> usize {
        1 + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Entries in order: anchor first, then oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = (&EmbeddingField, &Array2<f32>)> {
        std::iter::once((&self.anchor.0, &self.anchor.1)).chain(self.recent.iter().map(|(e, l)| (e, l)))
    }

    pub fn pair_indices(&self) -> Vec<usize> {
        self.entries().map(|(e, _)| e.pair_index).collect()
    }
}

/// One selected neighbour of a query pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbour {
    pub context: usize,
    pub row: usize,
    pub col: usize,
    pub similarity: f32,
    pub weight: f64,
}

/// The top-`N_k` neighbours of pixel `(i, j)` in the P×P windows of every
/// context entry, with softmax weights at temperature `tau_prop`.
pub fn neighbourhood_weights(
    query: &EmbeddingField,
    context: &ContextQueues,
    i: usize,
    j: usize,
    cfg: &PropagationConfig,
) -> Vec<Neighbour> {
    let (h, w, n) = query.dim();
    let half = cfg.window as isize / 2;
    let lo = -half;
    let hi = cfg.window as isize - half;
    let q = query.values.slice(ndarray::s![i, j, ..]);
    let mut candidates = Vec::with_capacity(context.len() * cfg.window * cfg.window);
    for (c, (emb, _)) in context.entries().enumerate() {
        for di in lo..hi {
            let r = i as isize + di;
            if r < 0 || r >= h as isize {
                continue;
            }
            for dj in lo..hi {
                let s = j as isize + dj;
                if s < 0 || s >= w as isize {
                    continue;
                }
                let (r, s) = (r as usize, s as usize);
                let v = emb.values.slice(ndarray::s![r, s, ..]);
                let mut sim = 0f32;
                for k in 0..n {
                    sim += q[k] * v[k];
                }
                candidates.push(Neighbour {
                    context: c,
                    row: r,
                    col: s,
                    similarity: sim,
                    weight: 0.0,
                });
            }
        }
    }
    // Candidates are already in scan order; a stable sort keeps it for ties.
    candidates.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    candidates.truncate(cfg.top_k);
    let m = candidates[0].similarity as f64;
    let mut z = 0f64;
    for c in candidates.iter_mut() {
        c.weight = ((c.similarity as f64 - m) / cfg.temperature).exp();
        z += c.weight;
    }
    for c in candidates.iter_mut() {
        c.weight /= z;
    }
    candidates
}

/// Propagates labels from the seed pair through the remaining pairs.
///
/// `embeddings[0]` belongs to the seed pair; the result has one field per
/// embedding, the first being the seed itself. Context labels are binarized.
pub fn propagate_labels(
    embeddings: &[EmbeddingField],
    seed: &LabelField,
    cfg: &PropagationConfig,
) -> Result<Vec<LabelField>> {
    cfg.validate()?;
    let first = embeddings
        .first()
        .ok_or_else(|| Error::EmptyInput("no pair embeddings".into()))?;
    let (h, w, n) = first.dim();
    if seed.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!("seed {:?} vs embedding {:?}", seed.dim(), (h, w))));
    }
    for e in embeddings {
        if e.dim() != (h, w, n) {
            return Err(Error::ShapeMismatch(format!(
                "pair {} embedding is {:?}, expected {:?}",
                e.pair_index,
                e.dim(),
                (h, w, n)
            )));
        }
    }
    let seed_labels = seed.hard.mapv(f32::from);
    let mut queues = ContextQueues::new(first.clone(), seed_labels, cfg.context)?;
    let mut out = Vec::with_capacity(embeddings.len());
    out.push(seed.clone());
    for emb in &embeddings[1..] {
        let labels: Vec<Array2<f32>> = queues.entries().map(|(_, l)| l.clone()).collect();
        let mut soft = Array2::<f32>::zeros((h, w));
        for ((i, j), o) in soft.indexed_iter_mut() {
            let l: f64 = neighbourhood_weights(emb, &queues, i, j, cfg)
                .iter()
                .map(|nb| nb.weight * labels[nb.context][[nb.row, nb.col]] as f64)
                .sum();
            *o = l.clamp(0.0, 1.0) as f32;
        }
        let field = LabelField::from_soft(soft, None);
        queues.push(emb.clone(), field.hard.mapv(f32::from));
        out.push(field);
    }
    Ok(out)
}

/// Source of per-frame embeddings, frame 0 first, each h×w×n.
pub trait EmbeddingProvider {
    fn frame_embeddings(&self, scene: &SceneTimeSeries) -> Result<Vec<Array3<f32>>>;
}

/// Gaussian-smoothed band values, L2-normalized per pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralProvider {
    pub sigma: f64,
}

impl Default for SpectralProvider {
    fn default() -> Self {
        Self { sigma: 1.5 }
    }
}

impl EmbeddingProvider for SpectralProvider {
    fn frame_embeddings(&self, scene: &SceneTimeSeries) -> Result<Vec<Array3<f32>>> {
        Ok(scene
            .images
            .iter()
            .map(|img| {
                let mut e = gaussian_smooth(img, self.sigma);
                normalize_pixels(&mut e);
                e
            })
            .collect())
    }
}

/// Separable Gaussian blur per band with clamped borders; radius ⌈3σ⌉.
pub fn gaussian_smooth(image: &Array3<f32>, sigma: f64) -> Array3<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / z).collect();
    let (h, w, c) = image.dim();
    let clamp = |x: isize, n: usize| x.clamp(0, n as isize - 1) as usize;
    let mut rows = Array3::<f32>::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for b in 0..c {
                let mut acc = 0f64;
                for (k, wt) in kernel.iter().enumerate() {
                    acc += wt * image[[i, clamp(j as isize + k as isize - radius, w), b]] as f64;
                }
                rows[[i, j, b]] = acc as f32;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            for b in 0..c {
                let mut acc = 0f64;
                for (k, wt) in kernel.iter().enumerate() {
                    acc += wt * rows[[clamp(i as isize + k as isize - radius, h), j, b]] as f64;
                }
                out[[i, j, b]] = acc as f32;
            }
        }
    }
    out
}

/// Reads externally computed embeddings `<dir>/<scene_id>/embedding_XXX.f32`,
/// one per frame, in the raster format.
#[derive(Debug, Clone, PartialEq)]
pub struct FileProvider {
    pub dir: PathBuf,
}

impl FileProvider {
    pub fn path(&self, scene_id: &str, frame: usize) -> PathBuf {
        self.dir.join(scene_id).join(format!("embedding_{frame:03}.f32"))
    }
}

impl EmbeddingProvider for FileProvider {
    fn frame_embeddings(&self, scene: &SceneTimeSeries) -> Result<Vec<Array3<f32>>> {
        let (h, w, _) = scene.dims();
        (0..scene.len())
            .map(|t| {
                let mut e = raster::read_f32(&self.path(&scene.scene_id, t))?;
                if (e.dim().0, e.dim().1) != (h, w) {
                    return Err(Error::ShapeMismatch(format!(
                        "embedding {t} of {} is {:?}, scene is {h}x{w}",
                        scene.scene_id,
                        e.dim()
                    )));
                }
                normalize_pixels(&mut e);
                Ok(e)
            })
            .collect()
    }
}

/// Pair embedding: the two frame embeddings concatenated and scaled back to unit norm.
pub fn pair_embedding(anchor: &Array3<f32>, target: &Array3<f32>, pair_index: usize) -> Result<EmbeddingField> {
    if anchor.dim() != target.dim() {
        return Err(Error::ShapeMismatch("frame embeddings differ in shape".into()));
    }
    let joined = ndarray::concatenate(Axis(2), &[anchor.view(), target.view()]).expect("same shape");
    EmbeddingField::normalized(joined, pair_index)
}

/// How the per-pair labels of a scene are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Threshold the first pair, then propagate by feature tracking.
    FeatureTracking,
    /// Threshold every pair independently.
    ThresholdOnly,
}

/// Labels for every pair of a scene, pair 1 first.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub scene_id: String,
    pub source: LabelSource,
    pub labels: Vec<LabelField>,
    /// Score threshold per pair; `None` where no score threshold applied.
    pub thresholds: Vec<Option<f32>>,
}

fn pair_scores(frames: &[Array3<f32>]) -> Result<Vec<Array2<f32>>> {
    frames[1..].iter().map(|f| change_magnitude(&frames[0], f)).collect()
}

/// Threshold-seeded, propagation-completed pseudo labels.
pub fn generate_pseudo_labels(
    scene: &SceneTimeSeries,
    provider: &dyn EmbeddingProvider,
    cfg: &PropagationConfig,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    let frames = provider.frame_embeddings(scene)?;
    check_frames(scene, &frames)?;
    let seed_scores = change_magnitude(&frames[0], &frames[1])?;
    let seed = threshold_labels(&seed_scores, cfg.threshold)?;
    let pairs = (1..frames.len())
        .map(|t| pair_embedding(&frames[0], &frames[t], t))
        .collect::<Result<Vec<_>>>()?;
    let labels = propagate_labels(&pairs, &seed.labels, cfg)?
        .into_iter()
        .map(|l| l.with_ignore_band(cfg.ignore_band))
        .collect::<Vec<_>>();
    let mut thresholds = vec![None; labels.len()];
    thresholds[0] = seed.threshold;
    Ok(PseudoLabelSet {
        scene_id: scene.scene_id.clone(),
        source: LabelSource::FeatureTracking,
        labels,
        thresholds,
    })
}

/// Every pair thresholded on its own change magnitude.
pub fn threshold_only_labels(
    scene: &SceneTimeSeries,
    provider: &dyn EmbeddingProvider,
    cfg: &PropagationConfig,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    let frames = provider.frame_embeddings(scene)?;
    check_frames(scene, &frames)?;
    let mut labels = Vec::new();
    let mut thresholds = Vec::new();
    for scores in pair_scores(&frames)? {
        let t = threshold_labels(&scores, cfg.threshold)?;
        labels.push(t.labels.with_ignore_band(cfg.ignore_band));
        thresholds.push(t.threshold);
    }
    Ok(PseudoLabelSet {
        scene_id: scene.scene_id.clone(),
        source: LabelSource::ThresholdOnly,
        labels,
        thresholds,
    })
}

pub fn label_scene(
    scene: &SceneTimeSeries,
    provider: &dyn EmbeddingProvider,
    cfg: &PropagationConfig,
    source: LabelSource,
) -> Result<PseudoLabelSet> {
    match source {
        LabelSource::FeatureTracking => generate_pseudo_labels(scene, provider, cfg),
        LabelSource::ThresholdOnly => threshold_only_labels(scene, provider, cfg),
    }
}

fn check_frames(scene: &SceneTimeSeries, frames: &[Array3<f32>]) -> Result<()> {
    if frames.len() != scene.len() {
        return Err(Error::ShapeMismatch(format!(
            "provider returned {} embeddings for {} frames",
            frames.len(),
            scene.len()
        )));
    }
    if frames.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: frames.len(),
        });
    }
    Ok(())
}

pub const IGNORE_VALUE: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pair_index: usize,
    pub changed_fraction: f64,
    pub threshold: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSummary {
    pub scene_id: String,
    pub source: LabelSource,
    pub pairs: Vec<PairSummary>,
}

impl PseudoLabelSet {
    pub fn summary(&self) -> PseudoLabelSummary {
        PseudoLabelSummary {
            scene_id: self.scene_id.clone(),
            source: self.source,
            pairs: self
                .labels
                .iter()
                .zip(&self.thresholds)
                .enumerate()
                .map(|(k, (l, t))| PairSummary {
                    pair_index: k + 1,
                    changed_fraction: l.changed_fraction(),
                    threshold: *t,
                })
                .collect(),
        }
    }
}

pub fn label_raster_path(dir: &Path, pair_index: usize) -> PathBuf {
    dir.join(format!("label_{pair_index:03}.u8"))
}

/// Writes `label_XXX.u8` rasters ({0, 1, 255 = ignore}) and `summary.json`.
pub fn write_pseudo_labels(dir: &Path, set: &PseudoLabelSet) -> Result<()> {
    for (k, l) in set.labels.iter().enumerate() {
        let codes = ndarray::Zip::from(&l.hard)
            .and(&l.ignore)
            .map_collect(|&h, &i| if i { IGNORE_VALUE } else { h });
        raster::write_u8(&label_raster_path(dir, k + 1), &codes)?;
    }
    let summary = serde_json::to_string_pretty(&set.summary())?;
    raster::write_atomic(&dir.join("summary.json"), summary.as_bytes())
}

/// Reads labels written by [`write_pseudo_labels`]; soft scores become the hard labels.
pub fn read_pseudo_labels(dir: &Path) -> Result<PseudoLabelSet> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: PseudoLabelSummary = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        what: "pseudo-label summary",
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let mut labels = Vec::with_capacity(summary.pairs.len());
    for p in &summary.pairs {
        let codes = raster::read_u8(&label_raster_path(dir, p.pair_index))?;
        let ignore = codes.mapv(|c| c == IGNORE_VALUE);
        let hard = codes.mapv(|c| u8::from(c == 1));
        labels.push(LabelField {
            soft: hard.mapv(f32::from),
            hard,
            ignore,
        });
    }
    Ok(PseudoLabelSet {
        scene_id: summary.scene_id,
        source: summary.source,
        thresholds: summary.pairs.iter().map(|p| p.threshold).collect(),
        labels,
    })
}
