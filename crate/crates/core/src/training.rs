//! Two-stage self-training: teacher–student feature learning, head
//! finetuning, inference, and checkpoint I/O.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{images_to_tensor, Unet, UnetConfig};
use crate::data::{jitter_images, normalize, NormalizationStats, SceneTimeSeries};
use crate::error::{Error, Result};
use crate::losses::{crw_cycle_loss, masked_cross_entropy, supervised_contrastive, LossConfig, SampleBatch};
use crate::nn::{copy_vars, l2_normalize, softmax_last, BnMode, Initializer, NamedVar, Parameterized};
use crate::pseudolabel::{LabelField, PseudoLabelSet};
use crate::raster;
use crate::temporal::{head_forward, Head, HeadMode, TemporalEncoder};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Set from the data when the model is built.
    pub in_channels: usize,
    pub encoder_widths: [usize; 5],
    pub decoder_width: usize,
    pub hidden_channels: usize,
    pub lstm_layers: usize,
    pub projection_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let unet = UnetConfig::reference(4);
        Self {
            in_channels: 4,
            encoder_widths: unet.encoder_widths,
            decoder_width: unet.decoder_width,
            hidden_channels: 128,
            lstm_layers: 2,
            projection_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn unet(&self) -> UnetConfig {
        UnetConfig {
            in_channels: self.in_channels,
            encoder_widths: self.encoder_widths,
            decoder_width: self.decoder_width,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn architecture_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Siamese Unet, stacked Bi-ConvLSTM, and both 1×1 heads.
#[derive(Debug, Clone)]
pub struct Network {
    pub unet: Unet,
    pub temporal: TemporalEncoder,
    pub projection: Head,
    pub classifier: Head,
}

/// Intermediate features of one scene, each (T−1, ·, H, W).
pub struct Trunk {
    pub unet: Tensor,
    pub layers: Vec<Tensor>,
}

impl Trunk {
    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }
}

impl Network {
    pub fn new(cfg: &ModelConfig, init: &mut Initializer) -> Result<Self> {
        let unet = Unet::new(&cfg.unet(), init)?;
        let temporal = TemporalEncoder::new(init, unet.output_channels(), cfg.hidden_channels, cfg.lstm_layers)?;
        Ok(Self {
            unet,
            temporal,
            projection: Head::new(init, cfg.hidden_channels, cfg.projection_dim, HeadMode::Projection)?,
            classifier: Head::new(init, cfg.hidden_channels, 2, HeadMode::Logits)?,
        })
    }

    /// `images` is (T, C, H, W) for one scene.
    pub fn trunk(&self, images: &Tensor, mode: BnMode) -> Result<Trunk> {
        let unet = self.unet.forward_scene(images, mode)?;
        let layers = self.temporal.forward(&unet)?.per_layer;
        Ok(Trunk { unet, layers })
    }

    fn vars_of(&self, part: &str) -> Vec<Var> {
        let mut out = Vec::new();
        match part {
            "unet" => self.unet.collect_vars("", &mut out),
            "temporal" => self.temporal.collect_vars("", &mut out),
            "projection" => self.projection.collect_vars("", &mut out),
            _ => self.classifier.collect_vars("", &mut out),
        }
        out.into_iter().filter(|v| v.trainable).map(|v| v.var).collect()
    }
}

impl Parameterized for Network {
    fn collect_vars(&self, prefix: &str, out: &mut Vec<NamedVar>) {
        use crate::nn::join;
        self.unet.collect_vars(&join(prefix, "unet"), out);
        self.temporal.collect_vars(&join(prefix, "temporal"), out);
        self.projection.collect_vars(&join(prefix, "projection"), out);
        self.classifier.collect_vars(&join(prefix, "classifier"), out);
    }
}

/// Student and teacher networks of identical structure.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub student: Network,
    pub teacher: Network,
    pub step: usize,
}

impl ModelBundle {
    /// The teacher starts as an exact copy of the student.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let student = Network::new(config, &mut Initializer::new(seed, dtype))?;
        let teacher = Network::new(config, &mut Initializer::new(seed, dtype))?;
        copy_vars(&teacher.named_vars(), &student.named_vars())?;
        Ok(Self {
            config: config.clone(),
            student,
            teacher,
            step: 0,
        })
    }
}

/// `teacher ← decay·teacher + (1 − decay)·student` for parameters; buffers are copied.
pub fn ema_update(teacher: &[NamedVar], student: &[NamedVar], decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("ema decay {decay} outside [0, 1]")));
    }
    if teacher.len() != student.len() {
        return Err(Error::StructureMismatch(format!(
            "teacher has {} variables, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.name != s.name || t.var.dims() != s.var.dims() || t.trainable != s.trainable {
            return Err(Error::StructureMismatch(format!("{} vs {}", t.name, s.name)));
        }
    }
    for (t, s) in teacher.iter().zip(student) {
        let next = if t.trainable {
            ((t.var.as_tensor() * decay)? + (s.var.as_tensor() * (1.0 - decay))?)?
        } else {
            s.var.as_tensor().clone()
        };
        t.var.set(&next.detach())?;
    }
    Ok(())
}

/// Adam over a fixed variable list.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            t: 0,
            beta1,
            beta2,
            eps,
        })
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            self.m[k] = ((&self.m[k] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            self.v[k] = ((&self.v[k] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&self.v[k] / c2)?.sqrt()? + self.eps)?;
            let update = ((&self.m[k] / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum.
pub struct Sgd {
    vars: Vec<Var>,
    buffers: Vec<Option<Tensor>>,
    momentum: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, momentum: f64) -> Self {
        let buffers = vec![None; vars.len()];
        Self {
            vars,
            buffers,
            momentum,
        }
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for (k, var) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let buf = match &self.buffers[k] {
                Some(b) => ((b * self.momentum)? + g)?,
                None => g.clone(),
            };
            var.set(&(var.as_tensor() - (&buf * lr)?)?)?;
            self.buffers[k] = Some(buf);
        }
        Ok(())
    }
}

/// What the feature stage optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Supervised contrastive plus λ₁ times the cycle loss.
    SupconCrw,
    SupconOnly,
    /// Cross-entropy of the classifier head, trained end to end.
    CrossEntropy,
}

/// Batch-norm statistics used after training. Training forwards one scene at
/// a time, so its batch statistics are per-scene statistics over the frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceNorm {
    /// Statistics over the frames of the scene being processed, as in training.
    Scene,
    /// Running averages accumulated during training.
    Running,
}

impl InferenceNorm {
    pub fn mode(self) -> BnMode {
        match self {
            InferenceNorm::Scene => BnMode::BatchStats,
            InferenceNorm::Running => BnMode::Eval,
        }
    }
}

/// Where the cycle loss reads node features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrwTap {
    AfterUnet,
    AfterLstm1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: Objective,
    pub feature_lr: f64,
    pub feature_batch: usize,
    pub feature_epochs: usize,
    /// Fractions of the epochs after which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub finetune_epochs: usize,
    pub finetune_momentum: f64,
    pub ema_decay: f64,
    pub pixels_per_pair: usize,
    pub jitter_strength: f32,
    pub crw_tap: CrwTap,
    pub crw_crop: usize,
    pub crw_grid: usize,
    pub inference_norm: InferenceNorm,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            objective: Objective::SupconCrw,
            feature_lr: 3e-4,
            feature_batch: 2,
            feature_epochs: 200,
            lr_milestones: vec![0.6, 0.85],
            lr_gamma: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            finetune_lr: 0.01,
            finetune_batch: 10,
            finetune_epochs: 50,
            finetune_momentum: 0.9,
            ema_decay: 0.99,
            pixels_per_pair: 256,
            jitter_strength: 0.2,
            crw_tap: CrwTap::AfterLstm1,
            crw_crop: 64,
            crw_grid: 8,
            inference_norm: InferenceNorm::Scene,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.feature_lr > 0.0) || !(self.finetune_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.feature_batch == 0 || self.finetune_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.pixels_per_pair == 0 {
            return bad("pixels_per_pair must be positive");
        }
        if self.crw_grid == 0 || self.crw_crop < self.crw_grid {
            return bad("crw_crop must be at least crw_grid > 0");
        }
        if self.model.lstm_layers == 0 {
            return bad("lstm_layers must be positive");
        }
        Ok(())
    }

    /// Step-decayed learning rate for `epoch` of `epochs`.
    pub fn feature_lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let progress = epoch as f64 / epochs.max(1) as f64;
        let drops = self.lr_milestones.iter().filter(|&&m| progress >= m).count();
        self.feature_lr * self.lr_gamma.powi(drops as i32)
    }
}

const STREAM_ORDER: u64 = 1;
const STREAM_JITTER: u64 = 2;
const STREAM_PIXELS: u64 = 3;
const STREAM_CRW: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Flat indices of the sampled pixels and their labels.
pub fn sample_locations(labels: &LabelField, n: usize, seed: u64) -> Result<Vec<(usize, u8)>> {
    let mut pools: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (k, (&h, &ign)) in labels.hard.iter().zip(labels.ignore.iter()).enumerate() {
        if !ign {
            pools[(h != 0) as usize].push(k);
        }
    }
    if pools[0].len() + pools[1].len() < 2 {
        return Err(Error::NoEligiblePixels(format!(
            "{} usable pixels",
            pools[0].len() + pools[1].len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quota = if pools[0].is_empty() {
        [0, n]
    } else if pools[1].is_empty() {
        [n, 0]
    } else {
        [n / 2, n - n / 2]
    };
    let mut out = Vec::with_capacity(n);
    for class in 0..2 {
        let pool = &pools[class];
        let want = quota[class];
        if want <= pool.len() {
            for k in rand::seq::index::sample(&mut rng, pool.len(), want) {
                out.push((pool[k], class as u8));
            }
        } else {
            out.extend(pool.iter().map(|&p| (p, class as u8)));
            for _ in pool.len()..want {
                out.push((pool[rng.random_range(0..pool.len())], class as u8));
            }
        }
    }
    Ok(out)
}

fn gather_pixels(features: &Tensor, flat: &[usize]) -> Result<Tensor> {
    let (d, h, w) = features.dims3()?;
    let idx: Vec<u32> = flat.iter().map(|&k| k as u32).collect();
    let idx = Tensor::from_vec(idx, flat.len(), features.device())?;
    Ok(features.reshape((d, h * w))?.t()?.contiguous()?.index_select(&idx, 0)?)
}

/// Student and teacher features (d, H, W) at the same sampled pixels.
pub fn sample_pixels(
    student: &Tensor,
    teacher: &Tensor,
    labels: &LabelField,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    let (_, h, w) = student.dims3()?;
    if teacher.dims() != student.dims() || labels.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "student {:?}, teacher {:?}, labels {:?}",
            student.dims(),
            teacher.dims(),
            labels.dim()
        )));
    }
    let picks = sample_locations(labels, n, seed)?;
    let flat: Vec<usize> = picks.iter().map(|p| p.0).collect();
    let classes: Vec<u8> = picks.iter().map(|p| p.1).collect();
    SampleBatch::from_views(&gather_pixels(student, &flat)?, &gather_pixels(teacher, &flat)?, &classes)
}

/// Per-scene normalized (T, C, H, W) tensors of the original and a jittered view.
fn scene_views(scene: &SceneTimeSeries, jitter: Option<(f32, u64)>, dtype: DType) -> Result<(Tensor, Option<Tensor>)> {
    let stats = NormalizationStats::from_scene(scene);
    let norm = |imgs: &[Array3<f32>]| -> Result<Tensor> {
        let n = imgs.iter().map(|i| normalize(i, &stats)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Array3<f32>> = n.iter().collect();
        images_to_tensor(&refs, dtype)
    };
    let original = norm(&scene.images)?;
    let jittered = match jitter {
        Some((strength, seed)) => {
            let refs: Vec<&Array3<f32>> = scene.images.iter().collect();
            Some(norm(&jitter_images(&refs, strength, seed)?)?)
        }
        None => None,
    };
    Ok((original, jittered))
}

/// (T−1, d, H, W) features → one (g², d) unit-norm node set per pair.
fn crw_nodes(tap: &Tensor, crop: usize, grid: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let (pairs, d, h, w) = tap.dims4()?;
    let ch = crop.min(h);
    let cw = crop.min(w);
    let r0 = rng.random_range(0..=h - ch);
    let c0 = rng.random_range(0..=w - cw);
    let (sr, sc) = ((ch / grid).max(1), (cw / grid).max(1));
    let mut flat = Vec::with_capacity(grid * grid);
    for a in 0..grid {
        for b in 0..grid {
            let r = (r0 + sr / 2 + a * sr).min(h - 1);
            let c = (c0 + sc / 2 + b * sc).min(w - 1);
            flat.push((r * w + c) as u32);
        }
    }
    let idx = Tensor::from_vec(flat, grid * grid, tap.device())?;
    let nodes = tap.reshape((pairs, d, h * w))?.index_select(&idx, 2)?.transpose(1, 2)?;
    let nodes = l2_normalize(&nodes.contiguous()?, 2)?;
    (0..pairs).map(|p| Ok(nodes.get(p)?)).collect()
}

/// One JSON-lines record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_sc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_crw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_ce: Option<f64>,
    pub lr: f64,
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in log {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    raster::write_atomic(path, &bytes)
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn check_labels(scenes: &[SceneTimeSeries], labels: &[PseudoLabelSet]) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("no training scenes".into()));
    }
    if scenes.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scenes, {} label sets", scenes.len(), labels.len())));
    }
    let channels = scenes[0].dims().2;
    for (s, l) in scenes.iter().zip(labels) {
        if s.scene_id != l.scene_id {
            return Err(Error::InvalidArgument(format!("labels of {} given for {}", l.scene_id, s.scene_id)));
        }
        if l.labels.len() != s.num_pairs() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} label maps for {} pairs",
                s.scene_id,
                l.labels.len(),
                s.num_pairs()
            )));
        }
        let (h, w, c) = s.dims();
        if c != channels {
            return Err(Error::ChannelMismatch { expected: channels, got: c });
        }
        if l.labels.iter().any(|f| f.dim() != (h, w)) {
            return Err(Error::ShapeMismatch(format!("{}: label size differs from image size", s.scene_id)));
        }
    }
    Ok(())
}

fn finite(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged { step, loss })
    }
}

/// Outcome of a training stage.
pub struct StageResult {
    pub model: ModelBundle,
    pub log: Vec<LogRecord>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Feature learning. Pairs of each scene go through the student unchanged and
/// through the teacher after a scene-level color jitter; the student follows
/// the gradient, the teacher follows the student by EMA after every step.
pub fn train_feature_stage(
    scenes: &[SceneTimeSeries],
    labels: &[PseudoLabelSet],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    model: ModelBundle,
) -> Result<StageResult> {
    cfg.validate()?;
    loss_cfg.validate()?;
    check_labels(scenes, labels)?;
    let dtype = model.student.unet.conv1.conv.weight.dtype();
    let student = &model.student;
    let trained: Vec<Var> = match cfg.objective {
        Objective::CrossEntropy => [student.vars_of("unet"), student.vars_of("temporal"), student.vars_of("classifier")].concat(),
        _ => [student.vars_of("unet"), student.vars_of("temporal"), student.vars_of("projection")].concat(),
    };
    let mut adam = Adam::new(trained, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)?;
    let mut order_rng = stream(cfg.seed, STREAM_ORDER);
    let mut jitter_rng = stream(cfg.seed, STREAM_JITTER);
    let mut pixel_rng = stream(cfg.seed, STREAM_PIXELS);
    let mut crw_rng = stream(cfg.seed, STREAM_CRW);
    let teacher_vars = model.teacher.named_vars();
    let student_vars = model.student.named_vars();
    let mut model = model;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.feature_epochs {
        let lr = cfg.feature_lr_at(epoch, cfg.feature_epochs);
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.feature_batch) {
            let step = model.step;
            let mut sc_terms = Vec::new();
            let mut crw_terms = Vec::new();
            let mut ce_terms = Vec::new();
            for &s in chunk {
                let scene = &scenes[s];
                let jitter_seed: u64 = jitter_rng.random();
                let (orig, jit) = scene_views(scene, Some((cfg.jitter_strength, jitter_seed)), dtype)?;
                let trunk = model.student.trunk(&orig, BnMode::Train)?;
                let pairs = scene.num_pairs();
                if cfg.objective == Objective::CrossEntropy {
                    let logits = head_forward(trunk.last(), &model.student.classifier, HeadMode::Logits)?;
                    for p in 0..pairs {
                        let l = &labels[s].labels[p];
                        let lg = logits.get(p)?.permute((1, 2, 0))?.flatten_to(1)?.contiguous()?;
                        let targets: Vec<u8> = l.hard.iter().copied().collect();
                        let ignore: Vec<bool> = l.ignore.iter().copied().collect();
                        ce_terms.push(masked_cross_entropy(&lg, &targets, &ignore)?);
                    }
                    continue;
                }
                let z_s = head_forward(trunk.last(), &model.student.projection, HeadMode::Projection)?;
                let jit = jit.expect("jitter requested");
                let teacher_trunk = model.teacher.trunk(&jit, BnMode::BatchStats)?;
                let z_t = head_forward(teacher_trunk.last(), &model.teacher.projection, HeadMode::Projection)?.detach();
                for p in 0..pairs {
                    let seed: u64 = pixel_rng.random();
                    let batch = sample_pixels(&z_s.get(p)?, &z_t.get(p)?, &labels[s].labels[p], cfg.pixels_per_pair, seed)?;
                    sc_terms.push(supervised_contrastive(&batch, loss_cfg.tau_supcon)?);
                }
                if cfg.objective == Objective::SupconCrw && loss_cfg.lambda_1 != 0.0 && pairs >= 2 {
                    let tap = match cfg.crw_tap {
                        CrwTap::AfterUnet => &trunk.unet,
                        CrwTap::AfterLstm1 => &trunk.layers[0],
                    };
                    let nodes = crw_nodes(tap, cfg.crw_crop, cfg.crw_grid, &mut crw_rng)?;
                    crw_terms.push(crw_cycle_loss(&nodes, loss_cfg.tau_crw)?);
                }
            }
            let mean = |v: &[Tensor]| -> Result<Tensor> { Ok((Tensor::stack(v, 0)?.sum_all()? / v.len() as f64)?) };
            let (total, record) = if cfg.objective == Objective::CrossEntropy {
                let ce = mean(&ce_terms)?;
                let v = finite(scalar(&ce)?, step)?;
                (ce, LogRecord { step, epoch, loss_total: v, loss_sc: None, loss_crw: None, loss_ce: Some(v), lr })
            } else {
                let sc = mean(&sc_terms)?;
                let sc_v = scalar(&sc)?;
                if crw_terms.is_empty() {
                    let v = finite(sc_v, step)?;
                    (sc, LogRecord { step, epoch, loss_total: v, loss_sc: Some(v), loss_crw: None, loss_ce: None, lr })
                } else {
                    let crw = mean(&crw_terms)?;
                    let crw_v = scalar(&crw)?;
                    let total = (sc + (crw * loss_cfg.lambda_1)?)?;
                    let v = finite(scalar(&total)?, step)?;
                    (total, LogRecord { step, epoch, loss_total: v, loss_sc: Some(sc_v), loss_crw: Some(crw_v), loss_ce: None, lr })
                }
            };
            let grads = total.backward()?;
            adam.step(&grads, lr)?;
            ema_update(&teacher_vars, &student_vars, cfg.ema_decay)?;
            model.step += 1;
            log.push(record);
        }
    }
    Ok(StageResult { model, log })
}

/// Head finetuning on a frozen trunk: `L_ce + λ₂·L_sc`, the contrastive term
/// taken over unit-normalized logits of the original and jittered views.
pub fn finetune_stage(
    scenes: &[SceneTimeSeries],
    labels: &[PseudoLabelSet],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    model: ModelBundle,
) -> Result<StageResult> {
    cfg.validate()?;
    loss_cfg.validate()?;
    check_labels(scenes, labels)?;
    let dtype = model.student.unet.conv1.conv.weight.dtype();
    let mut jitter_rng = stream(cfg.seed ^ 0xF1E7, STREAM_JITTER);
    // The trunk is frozen, so its outputs are computed once.
    let mut features = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let seed: u64 = jitter_rng.random();
        let (orig, jit) = scene_views(scene, Some((cfg.jitter_strength, seed)), dtype)?;
        let mode = cfg.inference_norm.mode();
        let s = model.student.trunk(&orig, mode)?.last().detach();
        let t = model.teacher.trunk(&jit.expect("jitter requested"), mode)?.last().detach();
        features.push((s, t));
    }
    let log = fit_classifier(&model.student.classifier, &features, labels, cfg, loss_cfg)?;
    Ok(StageResult { model, log })
}

/// Trains `head` alone on frozen per-pair features.
///
/// `features[s]` holds the student and teacher features of scene `s`, each
/// (pairs, K, H, W), matching `labels[s]`.
pub fn fit_classifier(
    head: &Head,
    features: &[(Tensor, Tensor)],
    labels: &[PseudoLabelSet],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<Vec<LogRecord>> {
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature sets for {} label sets",
            features.len(),
            labels.len()
        )));
    }
    for ((f, _), l) in features.iter().zip(labels) {
        if f.dim(0)? != l.labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature pairs for {} labels in {}",
                f.dim(0)?,
                l.labels.len(),
                l.scene_id
            )));
        }
    }
    let mut order_rng = stream(cfg.seed ^ 0xF1E7, STREAM_ORDER);
    let mut pixel_rng = stream(cfg.seed ^ 0xF1E7, STREAM_PIXELS);
    let items: Vec<(usize, usize)> = labels
        .iter()
        .enumerate()
        .flat_map(|(s, l)| (0..l.labels.len()).map(move |p| (s, p)))
        .collect();
    let mut sgd = Sgd::new(head.trainable_vars(), cfg.finetune_momentum);
    let mut order = items.clone();
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.finetune_epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.finetune_batch) {
            let mut ce_terms = Vec::new();
            let mut sc_terms = Vec::new();
            for &(s, p) in chunk {
                let l = &labels[s].labels[p];
                let ys = features[s].0.get(p)?.unsqueeze(0)?;
                let logits = head_forward(&ys, head, HeadMode::Logits)?.squeeze(0)?;
                let flat = logits.permute((1, 2, 0))?.flatten_to(1)?.contiguous()?;
                let targets: Vec<u8> = l.hard.iter().copied().collect();
                let ignore: Vec<bool> = l.ignore.iter().copied().collect();
                ce_terms.push(masked_cross_entropy(&flat, &targets, &ignore)?);
                if loss_cfg.lambda_2 != 0.0 {
                    let yt = features[s].1.get(p)?.unsqueeze(0)?;
                    let lt = head_forward(&yt, head, HeadMode::Logits)?.squeeze(0)?;
                    let seed: u64 = pixel_rng.random();
                    let batch = sample_pixels(&l2_normalize(&logits, 0)?, &l2_normalize(&lt, 0)?, l, cfg.pixels_per_pair, seed)?;
                    sc_terms.push(supervised_contrastive(&batch, loss_cfg.tau_supcon)?);
                }
            }
            let ce = (Tensor::stack(&ce_terms, 0)?.sum_all()? / ce_terms.len() as f64)?;
            let ce_v = scalar(&ce)?;
            let (total, sc_v) = if sc_terms.is_empty() {
                (ce, None)
            } else {
                let sc = (Tensor::stack(&sc_terms, 0)?.sum_all()? / sc_terms.len() as f64)?;
                let v = scalar(&sc)?;
                ((ce + (sc * loss_cfg.lambda_2)?)?, Some(v))
            };
            let v = finite(scalar(&total)?, step)?;
            sgd.step(&total.backward()?, cfg.finetune_lr)?;
            log.push(LogRecord {
                step,
                epoch,
                loss_total: v,
                loss_sc: sc_v,
                loss_crw: None,
                loss_ce: Some(ce_v),
                lr: cfg.finetune_lr,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Per-pair change maps relative to the first image, pair 1 first.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMapSeries {
    pub scene_id: String,
    pub maps: Vec<Array2<u8>>,
    pub probabilities: Vec<Array2<f32>>,
}

impl ChangeMapSeries {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn changed_fraction(&self) -> f64 {
        let total: usize = self.maps.iter().map(|m| m.len()).sum();
        let changed: usize = self.maps.iter().map(|m| m.iter().filter(|&&v| v != 0).count()).sum();
        if total == 0 {
            0.0
        } else {
            changed as f64 / total as f64
        }
    }

    /// `change_XXX.u8` and `prob_XXX.f32` per pair.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (k, (m, p)) in self.maps.iter().zip(&self.probabilities).enumerate() {
            raster::write_u8(&dir.join(format!("change_{:03}.u8", k + 1)), m)?;
            raster::write_f32_2d(&dir.join(format!("prob_{:03}.f32", k + 1)), p)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path, scene_id: &str, pairs: usize) -> Result<Self> {
        let mut maps = Vec::with_capacity(pairs);
        let mut probabilities = Vec::with_capacity(pairs);
        for k in 1..=pairs {
            maps.push(raster::read_u8(&dir.join(format!("change_{k:03}.u8")))?);
            let p = raster::read_f32(&dir.join(format!("prob_{k:03}.f32")))?;
            probabilities.push(p.index_axis_move(ndarray::Axis(2), 0));
        }
        Ok(Self {
            scene_id: scene_id.to_string(),
            maps,
            probabilities,
        })
    }
}

/// Student network, softmax of the classifier head, class 1 at `threshold`.
pub fn infer(model: &ModelBundle, scene: &SceneTimeSeries, threshold: f64, norm: InferenceNorm) -> Result<ChangeMapSeries> {
    if scene.len() < 2 {
        return Err(Error::InsufficientFrames { needed: 2, got: scene.len() });
    }
    let dtype = model.student.unet.conv1.conv.weight.dtype();
    let (orig, _) = scene_views(scene, None, dtype)?;
    let trunk = model.student.trunk(&orig, norm.mode())?;
    let logits = head_forward(trunk.last(), &model.student.classifier, HeadMode::Logits)?;
    let probs = softmax_last(&logits.permute((0, 2, 3, 1))?)?.narrow(3, 1, 1)?.squeeze(3)?;
    let probs = probs.to_dtype(DType::F32)?.to_vec3::<f32>()?;
    let (h, w, _) = scene.dims();
    let mut maps = Vec::with_capacity(probs.len());
    let mut probabilities = Vec::with_capacity(probs.len());
    for p in probs {
        let arr = Array2::from_shape_vec((h, w), p.into_iter().flatten().collect()).expect("h×w values");
        maps.push(arr.mapv(|v| u8::from(v as f64 >= threshold)));
        probabilities.push(arr);
    }
    Ok(ChangeMapSeries {
        scene_id: scene.scene_id.clone(),
        maps,
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture_hash: String,
    pub config: ModelConfig,
    pub step: usize,
    pub stage: String,
}

/// Safetensors archive of student and teacher variables; the header travels
/// in the metadata. Written through a temporary file.
pub fn save_checkpoint(path: &Path, model: &ModelBundle, stage: &str) -> Result<()> {
    let header = CheckpointHeader {
        architecture_hash: model.config.architecture_hash(),
        config: model.config.clone(),
        step: model.step,
        stage: stage.to_string(),
    };
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (prefix, net) in [("student", &model.student), ("teacher", &model.teacher)] {
        for v in net.named_vars() {
            tensors.push((format!("{prefix}.{}", v.name), v.var.as_tensor().contiguous()?));
        }
    }
    let mut meta = HashMap::new();
    meta.insert("header".to_string(), serde_json::to_string(&header)?);
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    raster::write_atomic(path, &bytes)
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    header_of(&bytes)
}

fn header_of(bytes: &[u8]) -> Result<CheckpointHeader> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let text = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("header"))
        .ok_or_else(|| Error::Checkpoint("no header in checkpoint".into()))?;
    Ok(serde_json::from_str(text)?)
}

/// Loads a checkpoint. With `expected`, the stored architecture must match it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>, dtype: DType) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = header_of(&bytes)?;
    if header.architecture_hash != header.config.architecture_hash() {
        return Err(Error::Checkpoint("header hash does not match its own config".into()));
    }
    if let Some(cfg) = expected {
        if cfg.architecture_hash() != header.architecture_hash {
            return Err(Error::ArchitectureMismatch {
                expected: cfg.architecture_hash(),
                found: header.architecture_hash,
            });
        }
    }
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = ModelBundle::new(&header.config, 0, dtype)?;
    model.step = header.step;
    for (prefix, net) in [("student", &model.student), ("teacher", &model.teacher)] {
        for v in net.named_vars() {
            let name = format!("{prefix}.{}", v.name);
            let view = st.tensor(&name).map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
            let t = candle_core::safetensors::Load::load(&view, &Device::Cpu)?.to_dtype(dtype)?;
            if t.dims() != v.var.dims() {
                return Err(Error::StructureMismatch(format!("{name}: {:?} vs {:?}", t.dims(), v.var.dims())));
            }
            v.var.set(&t)?;
        }
    }
    Ok(model)
}

/// Writes the log as JSON lines next to nothing else; convenience for callers.
pub fn append_log(path: &Path, record: &LogRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(&mut f, record)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}
