//! Training objectives: InfoNCE, supervised contrastive, contrastive random
//! walk, masked cross-entropy, and the two stage losses built from them.
//!
//! Every function returns a scalar tensor so gradients flow back to the
//! features and, through them, to the model parameters.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, logsumexp_last, softmax_last};
use crate::pseudolabel::LabelField;

/// Rows further than this from unit norm are rejected.
pub const NORM_TOLERANCE: f64 = 1e-3;

/// Keeps the log finite when a walker never returns.
const LOG_EPS: f64 = 1e-30;

/// Added to self-similarities so they vanish from the softmax denominator.
const SELF_MASK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the random-walk term in the feature stage.
    pub lambda_1: f64,
    /// Weight of the contrastive term in the finetuning stage.
    pub lambda_2: f64,
    pub tau_supcon: f64,
    pub tau_crw: f64,
    pub tau_infonce: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_1: 0.1,
            lambda_2: 0.0005,
            tau_supcon: 0.1,
            tau_crw: 0.07,
            tau_infonce: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_supcon", self.tau_supcon),
            ("tau_crw", self.tau_crw),
            ("tau_infonce", self.tau_infonce),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("lambda_1", self.lambda_1), ("lambda_2", self.lambda_2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// Fails unless every row of the 2-D tensor has unit L2 norm.
pub fn check_unit_rows(x: &Tensor) -> Result<()> {
    let norms = x
        .detach()
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(1)?
        .sqrt()?
        .to_vec1::<f64>()?;
    let worst = norms.iter().fold(0f64, |a, n| a.max((n - 1.0).abs()));
    if !worst.is_finite() || worst > NORM_TOLERANCE {
        return Err(Error::NotNormalized(worst));
    }
    Ok(())
}

fn diagonal(m: &Tensor) -> Result<Tensor> {
    let n = m.dim(0)?;
    let eye = Tensor::eye(n, m.dtype(), m.device())?;
    Ok((m * eye)?.sum(1)?)
}

/// Mean over rows of `−log softmax_j(v1ᵢ·v2ⱼ/τ)[i]`.
pub fn info_nce(v1: &Tensor, v2: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    let (n, d) = v1.dims2()?;
    if v2.dims2()? != (n, d) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", v1.dims(), v2.dims())));
    }
    if n == 0 {
        return Err(Error::EmptyInput("info_nce needs at least one row".into()));
    }
    check_unit_rows(v1)?;
    check_unit_rows(v2)?;
    let logits = (v1.matmul(&v2.t()?)? / tau)?;
    let lse = logsumexp_last(&logits)?.squeeze(1)?;
    Ok((lse - diagonal(&logits)?)?.mean_all()?)
}

/// 2N unit-norm features, rows `i` and `i + N` being two views of one pixel.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub features: Tensor,
    pub labels: Vec<u8>,
}

impl SampleBatch {
    pub fn new(features: Tensor, labels: Vec<u8>) -> Result<Self> {
        let (m, _) = features.dims2()?;
        if m != labels.len() {
            return Err(Error::ShapeMismatch(format!("{m} features, {} labels", labels.len())));
        }
        if m % 2 != 0 {
            return Err(Error::InvalidArgument("a sample batch holds two views per pixel".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {{0,1}}")));
        }
        check_unit_rows(&features)?;
        Ok(Self { features, labels })
    }

    /// Stacks the student rows above the teacher rows; both share `labels`.
    pub fn from_views(student: &Tensor, teacher: &Tensor, labels: &[u8]) -> Result<Self> {
        if student.dims() != teacher.dims() {
            return Err(Error::ShapeMismatch(format!(
                "student {:?} vs teacher {:?}",
                student.dims(),
                teacher.dims()
            )));
        }
        let mut all = labels.to_vec();
        all.extend_from_slice(labels);
        Self::new(Tensor::cat(&[student, teacher], 0)?, all)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Index of the other view of sample `i`.
    pub fn partner(&self, i: usize) -> usize {
        let n = self.len() / 2;
        (i + n) % self.len()
    }
}

/// Supervised contrastive loss, summed over anchors:
/// `Σᵢ −1/|P(i)| Σ_{p∈P(i)} log( exp(zᵢ·z_p/τ) / Σ_{b≠i} exp(zᵢ·z_b/τ) )`.
/// Anchors without a same-label partner contribute nothing.
pub fn supervised_contrastive(batch: &SampleBatch, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    let m = batch.len();
    if m < 2 {
        return Err(Error::InvalidArgument(
            "supervised contrastive loss needs at least two samples".into(),
        ));
    }
    let f = &batch.features;
    let (dtype, device) = (f.dtype(), f.device());
    let mut mask = vec![0f64; m * m];
    let mut weights = vec![0f64; m * m];
    for i in 0..m {
        mask[i * m + i] = SELF_MASK;
        let positives = (0..m).filter(|&p| p != i && batch.labels[p] == batch.labels[i]).count();
        if positives == 0 {
            continue;
        }
        for p in 0..m {
            if p != i && batch.labels[p] == batch.labels[i] {
                weights[i * m + p] = 1.0 / positives as f64;
            }
        }
    }
    let mask = Tensor::from_vec(mask, (m, m), device)?.to_dtype(dtype)?;
    let weights = Tensor::from_vec(weights, (m, m), device)?.to_dtype(dtype)?;
    let sim = (f.matmul(&f.t()?)? / tau)?;
    let log_prob = log_softmax_last(&(sim + mask)?)?;
    Ok((log_prob * weights)?.sum_all()?.neg()?)
}

/// Row-stochastic transition matrix between two node sets.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub values: Tensor,
    pub temperature: f64,
}

/// `A(i, j) = softmax_j(q_tᶦ · q_nextʲ / τ)`.
pub fn crw_affinity(q_t: &Tensor, q_next: &Tensor, tau: f64) -> Result<AffinityMatrix> {
    check_temperature(tau)?;
    let (_, d) = q_t.dims2()?;
    let (_, d2) = q_next.dims2()?;
    if d != d2 {
        return Err(Error::ShapeMismatch(format!("feature widths {d} and {d2}")));
    }
    let logits = (q_t.matmul(&q_next.t()?)? / tau)?;
    Ok(AffinityMatrix {
        values: softmax_last(&logits)?,
        temperature: tau,
    })
}

fn check_frames(frames: &[Tensor]) -> Result<usize> {
    if frames.len() < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: frames.len(),
        });
    }
    let (n, _) = frames[0].dims2()?;
    if n == 0 {
        return Err(Error::EmptyInput("no nodes".into()));
    }
    for f in frames {
        if f.dims2()?.0 != n {
            return Err(Error::ShapeMismatch("frames hold different node counts".into()));
        }
    }
    Ok(n)
}

/// Ordered product of the one-step affinities along `frames`.
pub fn crw_walk(frames: &[Tensor], tau: f64) -> Result<Tensor> {
    check_frames(frames)?;
    let mut walk = crw_affinity(&frames[0], &frames[1], tau)?.values;
    for w in frames[1..].windows(2) {
        walk = walk.matmul(&crw_affinity(&w[0], &w[1], tau)?.values)?;
    }
    Ok(walk)
}

/// Walk forward through `frames` and back again along the palindrome.
pub fn crw_round_trip(frames: &[Tensor], tau: f64) -> Result<Tensor> {
    let reversed: Vec<Tensor> = frames.iter().rev().cloned().collect();
    Ok(crw_walk(frames, tau)?.matmul(&crw_walk(&reversed, tau)?)?)
}

/// `−Σᵢ log M(i, i)`: cross-entropy of the round trip against the identity.
pub fn round_trip_loss(round_trip: &Tensor) -> Result<Tensor> {
    let (n, n2) = round_trip.dims2()?;
    if n != n2 || n == 0 {
        return Err(Error::ShapeMismatch(format!("round trip is {n}x{n2}")));
    }
    Ok((diagonal(round_trip)? + LOG_EPS)?.log()?.sum_all()?.neg()?)
}

pub fn crw_cycle_loss(node_features: &[Tensor], tau: f64) -> Result<Tensor> {
    round_trip_loss(&crw_round_trip(node_features, tau)?)
}

/// Mean of `−log softmax(logits)[target]` over rows whose `ignore` flag is false.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[u8], ignore: &[bool]) -> Result<Tensor> {
    let (m, classes) = logits.dims2()?;
    if targets.len() != m || ignore.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{m} logits, {} targets, {} ignore flags",
            targets.len(),
            ignore.len()
        )));
    }
    let keep: Vec<u32> = (0..m as u32).filter(|&i| !ignore[i as usize]).collect();
    if keep.is_empty() {
        return Err(Error::NoEligiblePixels("every pixel is ignored".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= classes) {
        return Err(Error::InvalidArgument(format!("target {bad} with {classes} classes")));
    }
    let device = logits.device();
    let k = keep.len();
    let chosen: Vec<u32> = keep.iter().map(|&i| targets[i as usize] as u32).collect();
    let keep = Tensor::from_vec(keep, k, device)?;
    let chosen = Tensor::from_vec(chosen, (k, 1), device)?;
    let logp = log_softmax_last(&logits.index_select(&keep, 0)?)?;
    Ok(logp.gather(&chosen, D::Minus1)?.mean_all()?.neg()?)
}

/// Cross-entropy of h×w×2 logits against hard labels, skipping ignored pixels.
pub fn cross_entropy(logits: &Tensor, labels: &LabelField) -> Result<Tensor> {
    let (h, w, c) = logits.dims3()?;
    if labels.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "logits {h}x{w}, labels {:?}",
            labels.dim()
        )));
    }
    let targets: Vec<u8> = labels.hard.iter().copied().collect();
    let ignore: Vec<bool> = labels.ignore.iter().copied().collect();
    masked_cross_entropy(&logits.reshape((h * w, c))?, &targets, &ignore)
}

/// A weighted two-term objective with its parts kept for logging.
#[derive(Debug, Clone)]
pub struct StageLoss {
    pub total: Tensor,
    pub primary: Tensor,
    /// Absent when its weight is zero, in which case it was never evaluated.
    pub auxiliary: Option<Tensor>,
}

fn combine(primary: Tensor, weight: f64, auxiliary: impl FnOnce() -> Result<Tensor>) -> Result<StageLoss> {
    if weight == 0.0 {
        return Ok(StageLoss {
            total: primary.clone(),
            primary,
            auxiliary: None,
        });
    }
    let aux = auxiliary()?;
    Ok(StageLoss {
        total: (&primary + (&aux * weight)?)?,
        primary,
        auxiliary: Some(aux),
    })
}

/// `L_sc + λ₁·L_crw`.
pub fn feature_stage_loss(batch: &SampleBatch, node_features: &[Tensor], cfg: &LossConfig) -> Result<StageLoss> {
    let sc = supervised_contrastive(batch, cfg.tau_supcon)?;
    combine(sc, cfg.lambda_1, || crw_cycle_loss(node_features, cfg.tau_crw))
}

/// `L_ce + λ₂·L_sc`.
pub fn finetune_stage_loss(
    logits: &Tensor,
    labels: &LabelField,
    batch: &SampleBatch,
    cfg: &LossConfig,
) -> Result<StageLoss> {
    let ce = cross_entropy(logits, labels)?;
    combine(ce, cfg.lambda_2, || supervised_contrastive(batch, cfg.tau_supcon))
}
