//! One function per pipeline stage. Every stage reads its inputs from the
//! work directory and writes to its own subdirectory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sitscd::data::{load_scene, save_scene, SceneTimeSeries};
use sitscd::evaluation::{evaluate_significant_pair, EvaluationSummary, MetricsReport};
use sitscd::pseudolabel::{
    label_scene, read_pseudo_labels, write_pseudo_labels, EmbeddingProvider, FileProvider, PseudoLabelSet,
    SpectralProvider,
};
use sitscd::synth::{generate_scene, tracking_scenario, SynthSpec};
use sitscd::training::{
    finetune_stage, infer, load_checkpoint, save_checkpoint, train_feature_stage, write_log, ChangeMapSeries,
    ModelBundle, TrainConfig,
};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::figures;

pub type Result<T> = std::result::Result<T, CliError>;

const FEATURE_CHECKPOINT: &str = "feature.safetensors";
const MODEL_CHECKPOINT: &str = "model.safetensors";
const LOG_FILE: &str = "log.jsonl";

/// Runs stages over scenes on `jobs` threads.
pub struct Context {
    pub cfg: PipelineConfig,
    pool: rayon::ThreadPool,
}

impl Context {
    pub fn new(cfg: PipelineConfig, jobs: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CliError::Other(e.to_string()))?;
        Ok(Self { cfg, pool })
    }

    fn par_map<T: Sync, U: Send>(&self, items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            stage,
            path: path.to_path_buf(),
        })
    }
}

/// Removes a previous run's output so stale scenes never leak into this one.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| CliError::Other(format!("cannot clear {}: {e}", dir.display())))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    sitscd::raster::write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Tracking scenes first, then plain ones; seeds derive from `synth.spec.seed`.
pub fn synth_specs(cfg: &PipelineConfig) -> Vec<SynthSpec> {
    let s = &cfg.synth;
    let base = s.spec.seed.wrapping_mul(1000);
    let mut specs: Vec<SynthSpec> = (0..s.tracking_scenes as u64)
        .map(|k| tracking_scenario(&s.spec, base + k))
        .collect();
    for k in 0..s.plain_scenes as u64 {
        let mut spec = s.spec.clone();
        spec.seed = base + s.tracking_scenes as u64 + k;
        specs.push(spec);
    }
    specs
}

pub fn synth(ctx: &Context) -> Result<String> {
    let dir = ctx.cfg.stage_dir("synth");
    let specs = synth_specs(&ctx.cfg);
    if specs.is_empty() {
        return Err(CliError::Config("synth section asks for no scenes".into()));
    }
    fresh_dir(&dir)?;
    let ids = ctx.par_map(&specs, |spec| {
        let scene = generate_scene(spec)?;
        save_scene(&scene, &dir.join(&scene.scene_id))?;
        Ok(scene.scene_id)
    })?;
    Ok(format!("synth: {} scenes in {}", ids.len(), dir.display()))
}

fn scene_manifests(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    if !cfg.data.scenes.is_empty() {
        for p in &cfg.data.scenes {
            require(p, "synth")?;
        }
        return Ok(cfg.data.scenes.clone());
    }
    let dir = cfg.stage_dir("synth");
    require(&dir, "synth")?;
    let mut manifests: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::Other(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path().join("manifest.json")))
        .filter(|p| p.exists())
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(CliError::MissingArtifact { stage: "synth", path: dir });
    }
    Ok(manifests)
}

fn load_scenes(ctx: &Context) -> Result<Vec<SceneTimeSeries>> {
    let manifests = scene_manifests(&ctx.cfg)?;
    ctx.par_map(&manifests, |p| Ok(load_scene(p)?))
}

enum Provider {
    Spectral(SpectralProvider),
    File(FileProvider),
}

impl Provider {
    fn get(&self) -> &dyn EmbeddingProvider {
        match self {
            Provider::Spectral(p) => p,
            Provider::File(p) => p,
        }
    }
}

pub fn pseudo(ctx: &Context) -> Result<String> {
    let scenes = load_scenes(ctx)?;
    let p = &ctx.cfg.pseudo;
    let provider = match &p.embeddings_dir {
        Some(dir) => {
            require(dir, "external embedding")?;
            Provider::File(FileProvider { dir: dir.clone() })
        }
        None => Provider::Spectral(SpectralProvider {
            sigma: p.propagation.smoothing_sigma,
        }),
    };
    let dir = ctx.cfg.stage_dir("pseudo");
    fresh_dir(&dir)?;
    let fractions = ctx.par_map(&scenes, |scene| {
        let set = label_scene(scene, provider.get(), &p.propagation, p.source)?;
        write_pseudo_labels(&dir.join(&scene.scene_id), &set)?;
        let f = set.labels.iter().map(|l| l.changed_fraction()).sum::<f64>() / set.labels.len() as f64;
        Ok(format!("  {} mean changed fraction {f:.4}", scene.scene_id))
    })?;
    Ok(format!("pseudo: {} scenes in {}\n{}", scenes.len(), dir.display(), fractions.join("\n")))
}

fn load_labels(ctx: &Context, scenes: &[SceneTimeSeries]) -> Result<Vec<PseudoLabelSet>> {
    let dir = ctx.cfg.stage_dir("pseudo");
    ctx.par_map(scenes, |scene| {
        let d = dir.join(&scene.scene_id);
        require(&d.join("summary.json"), "pseudo")?;
        let set = read_pseudo_labels(&d)?;
        if set.labels.len() != scene.num_pairs() {
            return Err(CliError::Other(format!(
                "{}: {} label maps for {} pairs; rerun `pseudo`",
                scene.scene_id,
                set.labels.len(),
                scene.num_pairs()
            )));
        }
        Ok(set)
    })
}

/// The training config with the input width taken from the data.
fn train_config(cfg: &PipelineConfig, scenes: &[SceneTimeSeries]) -> TrainConfig {
    let mut t = cfg.train.clone();
    if let Some(s) = scenes.first() {
        t.model.in_channels = s.dims().2;
    }
    t
}

fn load_model(ctx: &Context, stage: &'static str, file: &str, train: &TrainConfig) -> Result<ModelBundle> {
    let path = ctx.cfg.checkpoint_path(stage, file);
    require(&path, stage)?;
    Ok(load_checkpoint(&path, Some(&train.model), DType::F32)?)
}

fn final_loss(log: &[sitscd::training::LogRecord]) -> String {
    log.last().map_or("no steps".into(), |r| format!("final loss {:.5}", r.loss_total))
}

pub fn train(ctx: &Context) -> Result<String> {
    let scenes = load_scenes(ctx)?;
    let labels = load_labels(ctx, &scenes)?;
    let t = train_config(&ctx.cfg, &scenes);
    let init = ModelBundle::new(&t.model, t.seed, DType::F32)?;
    let out = train_feature_stage(&scenes, &labels, &t, &ctx.cfg.loss, init)?;
    let ckpt = ctx.cfg.checkpoint_path("train", FEATURE_CHECKPOINT);
    save_checkpoint(&ckpt, &out.model, "feature")?;
    write_log(&ctx.cfg.stage_dir("train").join(LOG_FILE), &out.log)?;
    Ok(format!("train: {} steps, {}, checkpoint {}", out.log.len(), final_loss(&out.log), ckpt.display()))
}

pub fn finetune(ctx: &Context) -> Result<String> {
    let scenes = load_scenes(ctx)?;
    let labels = load_labels(ctx, &scenes)?;
    let t = train_config(&ctx.cfg, &scenes);
    let model = load_model(ctx, "train", FEATURE_CHECKPOINT, &t)?;
    let out = finetune_stage(&scenes, &labels, &t, &ctx.cfg.loss, model)?;
    let ckpt = ctx.cfg.checkpoint_path("finetune", MODEL_CHECKPOINT);
    save_checkpoint(&ckpt, &out.model, "finetune")?;
    write_log(&ctx.cfg.stage_dir("finetune").join(LOG_FILE), &out.log)?;
    Ok(format!("finetune: {} steps, {}, checkpoint {}", out.log.len(), final_loss(&out.log), ckpt.display()))
}

pub fn infer_stage(ctx: &Context) -> Result<String> {
    let scenes = load_scenes(ctx)?;
    let t = train_config(&ctx.cfg, &scenes);
    let model = load_model(ctx, "finetune", MODEL_CHECKPOINT, &t)?;
    let dir = ctx.cfg.stage_dir("infer");
    fresh_dir(&dir)?;
    let lines = ctx.par_map(&scenes, |scene| {
        let series = infer(&model, scene, ctx.cfg.eval.threshold, t.inference_norm)?;
        series.write(&dir.join(&scene.scene_id))?;
        Ok(format!("  {} changed fraction {:.4}", scene.scene_id, series.changed_fraction()))
    })?;
    Ok(format!("infer: {} scenes in {}\n{}", scenes.len(), dir.display(), lines.join("\n")))
}

/// Which maps an evaluation looked at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    Infer,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEvaluation {
    pub scene_id: String,
    pub changed_fraction: f64,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub source: MapSource,
    pub scenes: Vec<SceneEvaluation>,
    /// Pooled over the scenes that carry ground truth.
    pub pooled: Option<MetricsReport>,
}

impl EvaluationReport {
    pub fn table(&self) -> String {
        let mut s = format!("maps: {:?}\n", self.source).to_lowercase();
        let with_truth: Vec<MetricsReport> = self.scenes.iter().filter_map(|e| e.metrics.clone()).collect();
        if let Ok(summary) = EvaluationSummary::new(with_truth) {
            s.push_str(&summary.table());
        }
        let _ = writeln!(s, "{:<20} {:>9}", "scene", "changed");
        for e in &self.scenes {
            let _ = writeln!(s, "{:<20} {:>9.4}", e.scene_id, e.changed_fraction);
        }
        s
    }
}

fn pseudo_series(set: &PseudoLabelSet) -> ChangeMapSeries {
    ChangeMapSeries {
        scene_id: set.scene_id.clone(),
        maps: set.labels.iter().map(|l| l.hard.clone()).collect(),
        probabilities: set.labels.iter().map(|l| l.soft.clone()).collect(),
    }
}

fn infer_available(ctx: &Context, scenes: &[SceneTimeSeries]) -> bool {
    let dir = ctx.cfg.stage_dir("infer");
    scenes
        .iter()
        .all(|s| dir.join(&s.scene_id).join(format!("change_{:03}.u8", s.num_pairs())).exists())
}

fn load_series(ctx: &Context, scenes: &[SceneTimeSeries], source: MapSource) -> Result<Vec<ChangeMapSeries>> {
    match source {
        MapSource::Infer => {
            let dir = ctx.cfg.stage_dir("infer");
            ctx.par_map(scenes, |s| {
                let d = dir.join(&s.scene_id);
                require(&d, "infer")?;
                Ok(ChangeMapSeries::read(&d, &s.scene_id, s.num_pairs())?)
            })
        }
        MapSource::Pseudo => Ok(load_labels(ctx, scenes)?.iter().map(pseudo_series).collect()),
    }
}

fn evaluate(scenes: &[SceneTimeSeries], series: &[ChangeMapSeries], source: MapSource) -> Result<EvaluationReport> {
    let mut out = Vec::with_capacity(scenes.len());
    for (scene, s) in scenes.iter().zip(series) {
        let metrics = match &scene.ground_truth {
            Some(_) => Some(evaluate_significant_pair(s, scene)?),
            None => None,
        };
        out.push(SceneEvaluation {
            scene_id: scene.scene_id.clone(),
            changed_fraction: s.changed_fraction(),
            metrics,
        });
    }
    let with_truth: Vec<MetricsReport> = out.iter().filter_map(|e| e.metrics.clone()).collect();
    let pooled = if with_truth.is_empty() {
        None
    } else {
        Some(sitscd::evaluation::pooled(&with_truth)?)
    };
    Ok(EvaluationReport {
        source,
        scenes: out,
        pooled,
    })
}

fn write_report(dir: &Path, report: &EvaluationReport) -> Result<String> {
    let json = serde_json::to_string_pretty(report).map_err(|e| CliError::Other(e.to_string()))?;
    write_text(&dir.join("metrics.json"), &json)?;
    let table = report.table();
    write_text(&dir.join("table.txt"), &table)?;
    Ok(table)
}

/// Evaluates the model's maps when `infer` has run, the pseudo labels otherwise.
pub fn eval(ctx: &Context) -> Result<String> {
    let scenes = load_scenes(ctx)?;
    let source = if infer_available(ctx, &scenes) {
        MapSource::Infer
    } else {
        MapSource::Pseudo
    };
    let series = load_series(ctx, &scenes, source)?;
    let report = evaluate(&scenes, &series, source)?;
    let dir = ctx.cfg.stage_dir("eval");
    fresh_dir(&dir)?;
    let table = write_report(&dir, &report)?;
    Ok(format!("eval: {}\n{table}", dir.join("metrics.json").display()))
}

pub fn report(ctx: &Context) -> Result<String> {
    let scenes = load_scenes(ctx)?;
    let infer_dir = ctx.cfg.stage_dir("infer");
    require(&infer_dir, "infer")?;
    let series = load_series(ctx, &scenes, MapSource::Infer)?;
    let report = evaluate(&scenes, &series, MapSource::Infer)?;
    let dir = ctx.cfg.report_dir();
    let table = write_report(&dir, &report)?;
    let mut figures = 0;
    if ctx.cfg.eval.figures {
        let written = ctx.par_map(&scenes.iter().zip(&series).collect::<Vec<_>>(), |(scene, s)| {
            figures::render_series(s, scene.ground_truth.as_ref())
                .save(dir.join(format!("{}.png", scene.scene_id)))
                .map_err(|e| CliError::Other(format!("cannot write figure: {e}")))
        })?;
        figures = written.len();
    }
    Ok(format!("report: {} ({figures} figures)\n{table}", dir.display()))
}
