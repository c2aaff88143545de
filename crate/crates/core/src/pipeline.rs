//! End-to-end runs: pseudo labels, both training stages, inference and
//! evaluation over a set of scenes.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::SceneTimeSeries;
use crate::error::Result;
use crate::evaluation::{evaluate_significant_pair, EvaluationSummary};
use crate::losses::LossConfig;
use crate::pseudolabel::{label_scene, EmbeddingProvider, LabelSource, PropagationConfig, PseudoLabelSet, ThresholdMethod};
use crate::synth::{baseline_threshold_counts, tracking_scenario, SynthSpec};
use crate::training::{
    finetune_stage, infer, train_feature_stage, ChangeMapSeries, InferenceNorm, LogRecord, ModelBundle, ModelConfig,
    TrainConfig,
};

/// A model small enough to train on a desktop CPU in minutes.
pub fn desk_model(in_channels: usize) -> ModelConfig {
    ModelConfig {
        in_channels,
        encoder_widths: [8, 8, 16, 16, 32],
        decoder_width: 16,
        hidden_channels: 16,
        lstm_layers: 2,
        projection_dim: 8,
    }
}

/// Everything a run needs besides the scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub propagation: PropagationConfig,
    pub label_source: LabelSource,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub infer_threshold: f64,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            propagation: PropagationConfig::default(),
            label_source: LabelSource::FeatureTracking,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            infer_threshold: 0.5,
        }
    }
}

pub struct PipelineOutcome {
    pub labels: Vec<PseudoLabelSet>,
    pub feature_log: Vec<LogRecord>,
    pub finetune_log: Vec<LogRecord>,
    pub model: ModelBundle,
    pub series: Vec<ChangeMapSeries>,
    /// Present when every scene carries ground truth.
    pub evaluation: Option<EvaluationSummary>,
}

pub fn label_scenes(
    scenes: &[SceneTimeSeries],
    provider: &dyn EmbeddingProvider,
    cfg: &PropagationConfig,
    source: LabelSource,
) -> Result<Vec<PseudoLabelSet>> {
    scenes.iter().map(|s| label_scene(s, provider, cfg, source)).collect()
}

/// Trains from precomputed labels and evaluates on the training scenes,
/// which is the self-supervised protocol: no ground truth enters training.
pub fn run_with_labels(
    scenes: &[SceneTimeSeries],
    labels: Vec<PseudoLabelSet>,
    settings: &PipelineSettings,
) -> Result<PipelineOutcome> {
    let mut train = settings.train.clone();
    train.model.in_channels = scenes.first().map_or(train.model.in_channels, |s| s.dims().2);
    let init = ModelBundle::new(&train.model, train.seed, DType::F32)?;
    let feature = train_feature_stage(scenes, &labels, &train, &settings.loss, init)?;
    let tuned = finetune_stage(scenes, &labels, &train, &settings.loss, feature.model)?;
    let series = scenes
        .iter()
        .map(|s| infer(&tuned.model, s, settings.infer_threshold, train.inference_norm))
        .collect::<Result<Vec<_>>>()?;
    let evaluation = if scenes.iter().all(|s| s.ground_truth.is_some()) {
        let reports = series
            .iter()
            .zip(scenes)
            .map(|(m, s)| evaluate_significant_pair(m, s))
            .collect::<Result<Vec<_>>>()?;
        Some(EvaluationSummary::new(reports)?)
    } else {
        None
    };
    Ok(PipelineOutcome {
        labels,
        feature_log: feature.log,
        finetune_log: tuned.log,
        model: tuned.model,
        series,
        evaluation,
    })
}

pub fn run_pipeline(
    scenes: &[SceneTimeSeries],
    provider: &dyn EmbeddingProvider,
    settings: &PipelineSettings,
) -> Result<PipelineOutcome> {
    let labels = label_scenes(scenes, provider, &settings.propagation, settings.label_source)?;
    run_with_labels(scenes, labels, settings)
}

/// Tracking scenes followed by change-free scenes, all derived from `seed`.
pub fn desk_suite(base: &SynthSpec, seed: u64, changed: usize, unchanged: usize) -> Vec<SynthSpec> {
    let mut specs: Vec<SynthSpec> = (0..changed as u64)
        .map(|k| tracking_scenario(base, seed * 1000 + k))
        .collect();
    for k in 0..unchanged as u64 {
        let mut s = base.clone();
        s.change_events.clear();
        s.seed = seed * 1000 + changed as u64 + k;
        specs.push(s);
    }
    specs
}

/// F1 of thresholding alone, pooled over scenes like the model's metrics.
pub fn pooled_baseline_f1(scenes: &[SceneTimeSeries], cfg: &PropagationConfig) -> Result<f64> {
    let counts = scenes
        .iter()
        .map(|s| baseline_threshold_counts(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::evaluation::metrics(&counts.into_iter().sum())?.f1)
}

/// Settings for desk-sized runs on [`desk_model`].
///
/// Far fewer steps than a full-size run, so the learning rates are larger
/// and every scene is its own step. Pair-1 seeds use an Otsu floor so that
/// seasonal shifts on change-free scenes are not labelled as change.
/// Inference normalises with running statistics: with so few steps the
/// per-scene batch statistics shift scenes with unusual class mixes away
/// from the shared head.
pub fn desk_settings(in_channels: usize, seed: u64) -> PipelineSettings {
    let mut s = PipelineSettings::default();
    s.propagation.threshold = ThresholdMethod::OtsuWithFloor(0.04);
    s.train.model = desk_model(in_channels);
    s.train.seed = seed;
    s.train.feature_epochs = 20;
    s.train.finetune_epochs = 20;
    s.train.feature_batch = 1;
    s.train.feature_lr = 3e-3;
    s.train.finetune_lr = 0.5;
    s.train.inference_norm = InferenceNorm::Running;
    s
}
