//! Optimization loop and evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{epe, flow_metrics, occlusion_accuracy, FlowMetrics};
use crate::model::{forward, loss, predict, LevelPrediction, Model, ModelConfig, SceneGeometry};
use crate::optim::OptState;
use crate::pyramid::PyramidGeometry;
use crate::synth::{downsample_gt, LabeledFramePair, LevelTruth};
use crate::tape::Tape;

/// Threshold separating predicted visible from occluded points.
pub const OCCLUSION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub alpha: f64,
    /// Loss weight per level, finest first.
    pub beta: Vec<f64>,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays; 0 disables decay.
    pub decay_interval: usize,
    pub epochs: usize,
    /// Seeds the per-epoch scene order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: vec![0.02, 0.04, 0.08],
            learning_rate: 1e-3,
            decay_factor: 0.5,
            decay_interval: 80,
            epochs: 150,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            beta: vec![0.02, 0.04, 0.08, 0.16],
            epochs: 400,
            ..Self::default()
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if self.beta.len() != levels {
            return Err(invalid!(
                "{} loss weights given for {} levels",
                self.beta.len(),
                levels
            ));
        }
        if self.beta.iter().any(|b| !(*b >= 0.0)) {
            return Err(invalid!("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// A frame pair with its cached geometry and per-level ground truth.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub geometry: SceneGeometry,
    pub truth: Vec<LevelTruth>,
}

impl TrainingScene {
    pub fn new(config: &ModelConfig, pair: &LabeledFramePair) -> Result<Self> {
        let geometry = SceneGeometry::build(config, &pair.p, &pair.q)?;
        let truth = downsample_gt(pair, &geometry.p)?;
        Ok(Self { geometry, truth })
    }

    pub fn pyramid(&self) -> &PyramidGeometry {
        &self.geometry.p
    }
}

/// Metrics of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneReport {
    pub metrics: FlowMetrics,
    pub occlusion_accuracy: f64,
    /// Output EPE per level, finest first.
    pub level_epe: Vec<f64>,
    /// EPE of the flow entering refinement, per level.
    pub level_upsampled_epe: Vec<f64>,
}

pub fn scene_report(preds: &[LevelPrediction], truth: &[LevelTruth]) -> Result<SceneReport> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "scene_report",
            left: vec![preds.len()],
            right: vec![truth.len()],
        });
    }
    let metrics = flow_metrics(&preds[0].flow, &truth[0].flow)?;
    let occ = occlusion_accuracy(
        &preds[0].occlusion,
        &truth[0].occlusion,
        OCCLUSION_THRESHOLD,
    )?;
    let mut level_epe = Vec::with_capacity(preds.len());
    let mut level_up = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(truth) {
        level_epe.push(epe(&p.flow, &t.flow)?);
        level_up.push(epe(&p.upsampled, &t.flow)?);
    }
    Ok(SceneReport {
        metrics,
        occlusion_accuracy: occ,
        level_epe,
        level_upsampled_epe: level_up,
    })
}

/// Mean of the per-scene reports.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: FlowMetrics,
    pub occlusion_accuracy: f64,
    pub level_epe: Vec<f64>,
    pub level_upsampled_epe: Vec<f64>,
    pub scenes: Vec<SceneReport>,
}

pub fn aggregate(scenes: Vec<SceneReport>) -> Result<EvalReport> {
    let Some(first) = scenes.first() else {
        return Err(Error::Empty { op: "evaluate" });
    };
    let levels = first.level_epe.len();
    let n = scenes.len() as f64;
    let mut m = FlowMetrics::default();
    let mut occ = 0.0;
    let mut lev = vec![0.0; levels];
    let mut up = vec![0.0; levels];
    for s in &scenes {
        if s.level_epe.len() != levels {
            return Err(invalid!("scenes disagree on level count"));
        }
        m.epe += s.metrics.epe;
        m.acc_strict += s.metrics.acc_strict;
        m.acc_relax += s.metrics.acc_relax;
        m.outliers += s.metrics.outliers;
        occ += s.occlusion_accuracy;
        for l in 0..levels {
            lev[l] += s.level_epe[l];
            up[l] += s.level_upsampled_epe[l];
        }
    }
    Ok(EvalReport {
        metrics: FlowMetrics {
            epe: m.epe / n,
            acc_strict: m.acc_strict / n,
            acc_relax: m.acc_relax / n,
            outliers: m.outliers / n,
        },
        occlusion_accuracy: occ / n,
        level_epe: lev.into_iter().map(|v| v / n).collect(),
        level_upsampled_epe: up.into_iter().map(|v| v / n).collect(),
        scenes,
    })
}

/// Anything producing per-level predictions (finest first) for a scene.
pub trait Predictor {
    fn predict(&self, scene: &TrainingScene) -> Result<Vec<LevelPrediction>>;
}

impl Predictor for Model {
    fn predict(&self, scene: &TrainingScene) -> Result<Vec<LevelPrediction>> {
        predict(self, &scene.geometry)
    }
}

/// Returns the ground truth itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerfectPredictor;

impl Predictor for PerfectPredictor {
    fn predict(&self, scene: &TrainingScene) -> Result<Vec<LevelPrediction>> {
        Ok(scene
            .truth
            .iter()
            .enumerate()
            .map(|(level, t)| LevelPrediction {
                level,
                flow: t.flow.clone(),
                occlusion: t.occlusion.clone(),
                upsampled: t.flow.clone(),
            })
            .collect())
    }
}

pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    scenes: &[TrainingScene],
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Empty { op: "evaluate" });
    }
    let reports = scenes
        .iter()
        .map(|s| scene_report(&predictor.predict(s)?, &s.truth))
        .collect::<Result<Vec<_>>>()?;
    aggregate(reports)
}

/// One epoch of the training log. Metrics are averaged over the forward
/// passes of the epoch, each taken before that scene's update.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub flow_loss: f64,
    pub occ_loss: f64,
    pub metrics: FlowMetrics,
    pub occlusion_accuracy: f64,
    pub level_epe: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptState,
    pub config: TrainConfig,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate(model.config.levels)?;
        let optimizer = OptState::new(
            &model.store,
            config.learning_rate,
            config.decay_factor,
            config.decay_interval,
        )?;
        Ok(Self {
            model,
            optimizer,
            config,
            epochs_done: 0,
        })
    }

    /// Continues from saved state. The scene order depends only on the seed
    /// and the epoch number, so no generator state needs saving.
    pub fn resume(
        model: Model,
        optimizer: OptState,
        config: TrainConfig,
        epochs_done: usize,
    ) -> Result<Self> {
        config.validate(model.config.levels)?;
        if optimizer.first_moment.len() != model.store.len() {
            return Err(invalid!(
                "optimizer state holds {} tensors, model has {}",
                optimizer.first_moment.len(),
                model.store.len()
            ));
        }
        Ok(Self {
            model,
            optimizer,
            config,
            epochs_done,
        })
    }

    pub fn finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    /// Scene order for 0-based `epoch`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(&mut self, scenes: &[TrainingScene]) -> Result<EpochLog> {
        if scenes.is_empty() {
            return Err(Error::Empty { op: "train" });
        }
        let epoch = self.epochs_done;
        let order = self.epoch_order(epoch, scenes.len());
        let mut reports = Vec::with_capacity(scenes.len());
        let (mut total, mut flow, mut occ) = (0.0, 0.0, 0.0);
        for (step, &k) in order.iter().enumerate() {
            let scene = &scenes[k];
            let mut tape = Tape::new();
            let out = forward(&mut tape, &self.model, &scene.geometry, None)?;
            let lv = loss(
                &mut tape,
                &out.levels,
                &scene.truth,
                self.config.alpha,
                &self.config.beta,
            )?;
            let value = tape.item(lv.total);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {} step {}",
                    epoch + 1,
                    step
                )));
            }
            let mut preds: Vec<LevelPrediction> = out
                .levels
                .iter()
                .map(|o| LevelPrediction::read(&tape, o))
                .collect();
            preds.reverse();
            reports.push(scene_report(&preds, &scene.truth)?);
            total += value;
            flow += lv.flow_term;
            occ += lv.occlusion_term;

            let grads = tape.backward(lv.total)?;
            self.model.store.zero_grads();
            self.model.store.accumulate(&grads, 1.0);
            self.optimizer
                .step(&mut self.model.store)
                .map_err(|e| match e {
                    Error::NonFiniteGradient(name) => Error::NonFiniteGradient(format!(
                        "{name} at epoch {} step {}",
                        epoch + 1,
                        step
                    )),
                    other => other,
                })?;
        }
        self.epochs_done += 1;
        self.optimizer.end_epoch(self.epochs_done);
        let n = scenes.len() as f64;
        let agg = aggregate(reports)?;
        Ok(EpochLog {
            epoch: self.epochs_done,
            loss: total / n,
            flow_loss: flow / n,
            occ_loss: occ / n,
            metrics: agg.metrics,
            occlusion_accuracy: agg.occlusion_accuracy,
            level_epe: agg.level_epe,
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn train<F>(&mut self, scenes: &[TrainingScene], mut on_epoch: F) -> Result<Vec<EpochLog>>
    where
        F: FnMut(&Self, &EpochLog) -> Result<()>,
    {
        let mut logs = Vec::new();
        while !self.finished() {
            let log = self.run_epoch(scenes)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}
