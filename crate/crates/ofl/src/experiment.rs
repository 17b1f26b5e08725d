//! Dataset generation, training runs, the ablation matrix and the
//! correlation-neighbor sweep.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ofl_core::model::{CostVolumeMode, Model, ModelConfig, Upsampler};
use ofl_core::synth::{generate_scene, LabeledFramePair, SceneConfig};
use ofl_core::train::{evaluate, EpochLog, EvalReport, TrainConfig, Trainer, TrainingScene};

use crate::error::{OflError, Result};
use crate::table::Csv;

/// Scene `i` uses seed `first_seed + i`.
pub fn generate_dataset(
    scene: &SceneConfig,
    count: usize,
    first_seed: u64,
) -> Result<Vec<LabeledFramePair>> {
    (0..count as u64)
        .map(|i| {
            let cfg = SceneConfig {
                seed: first_seed.wrapping_add(i),
                ..scene.clone()
            };
            generate_scene(&cfg).map_err(OflError::from)
        })
        .collect()
}

pub fn prepare(config: &ModelConfig, pairs: &[LabeledFramePair]) -> Result<Vec<TrainingScene>> {
    pairs
        .iter()
        .map(|p| TrainingScene::new(config, p).map_err(OflError::from))
        .collect()
}

pub fn input_dim(pairs: &[LabeledFramePair]) -> Result<usize> {
    let first = pairs
        .first()
        .ok_or_else(|| OflError::Usage("dataset is empty".into()))?;
    let dim = first.p.feature_dim.max(1);
    if pairs.iter().any(|p| p.p.feature_dim.max(1) != dim) {
        return Err(OflError::Usage("scenes disagree on feature width".into()));
    }
    Ok(dim)
}

/// Worker count: `OFL_THREADS` if set, else the available parallelism.
pub fn threads() -> usize {
    std::env::var("OFL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub logs: Vec<EpochLog>,
    pub seconds: f64,
}

pub fn train_model<F>(
    model: &ModelConfig,
    train: &TrainConfig,
    input_dim: usize,
    scenes: &[TrainingScene],
    on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Trainer, &EpochLog) -> ofl_core::Result<()>,
{
    let start = Instant::now();
    let mut trainer = Trainer::new(Model::new(model.clone(), input_dim)?, train.clone())?;
    let logs = trainer.train(scenes, on_epoch)?;
    Ok(TrainOutcome {
        trainer,
        logs,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Neither,
    OcvOnly,
    CmuOnly,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Neither,
        Variant::OcvOnly,
        Variant::CmuOnly,
        Variant::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Neither => "neither",
            Variant::OcvOnly => "ocv_only",
            Variant::CmuOnly => "cmu_only",
            Variant::Both => "both",
        }
    }

    pub fn apply(self, config: &ModelConfig) -> ModelConfig {
        let (up, cv) = match self {
            Variant::Neither => (Upsampler::Trilinear, CostVolumeMode::Plain),
            Variant::OcvOnly => (Upsampler::Trilinear, CostVolumeMode::Ocv),
            Variant::CmuOnly => (Upsampler::Cmu, CostVolumeMode::Plain),
            Variant::Both => (Upsampler::Cmu, CostVolumeMode::Ocv),
        };
        ModelConfig {
            upsampler: up,
            cost_volume: cv,
            ..config.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub logs: Vec<EpochLog>,
    pub eval: EvalReport,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variants: Vec<(Variant, Vec<SeedRun>)>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains every (variant, seed) job with matched seeds and evaluates on
/// `eval_pairs`. Jobs are spread over [`threads`] workers; results do not
/// depend on the worker count.
pub fn run_ablation(
    model: &ModelConfig,
    train: &TrainConfig,
    train_pairs: &[LabeledFramePair],
    eval_pairs: &[LabeledFramePair],
    seeds: &[u64],
    variants: &[Variant],
) -> Result<AblationResult> {
    let dim = input_dim(train_pairs)?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<SeedRun>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads().min(jobs.len()).max(1);
    let work = || -> Result<()> {
        let train_scenes = prepare(model, train_pairs)?;
        let eval_scenes = prepare(model, eval_pairs)?;
        loop {
            let k = next.fetch_add(1, Ordering::SeqCst);
            let Some(&(v, seed)) = jobs.get(k) else {
                return Ok(());
            };
            let run = (|| {
                let cfg = ModelConfig {
                    seed,
                    ..variants[v].apply(model)
                };
                let tc = TrainConfig {
                    seed,
                    ..train.clone()
                };
                let out = train_model(&cfg, &tc, dim, &train_scenes, |_, _| Ok(()))?;
                let eval = evaluate(&out.trainer.model, &eval_scenes)?;
                Ok(SeedRun {
                    seed,
                    logs: out.logs,
                    eval,
                    seconds: out.seconds,
                })
            })();
            results.lock().unwrap()[k] = Some(run);
        }
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = (1..workers).map(|_| s.spawn(work)).collect();
        let mut first = work();
        for h in handles {
            let r = h
                .join()
                .unwrap_or_else(|_| Err(OflError::Usage("worker panicked".into())));
            first = first.and(r);
        }
        first
    })?;
    let mut flat = results.into_inner().unwrap().into_iter();
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let runs = (0..seeds.len())
            .map(|_| flat.next().flatten().expect("every job ran"))
            .collect::<Result<Vec<_>>>()?;
        out.push((v, runs));
    }
    Ok(AblationResult { variants: out })
}

impl AblationResult {
    pub fn runs(&self, v: Variant) -> Option<&[SeedRun]> {
        self.variants
            .iter()
            .find(|(x, _)| *x == v)
            .map(|(_, r)| r.as_slice())
    }

    /// Median over seeds of an evaluation quantity.
    pub fn median_of(&self, v: Variant, f: impl Fn(&EvalReport) -> f64) -> Option<f64> {
        self.runs(v)
            .map(|r| median(&r.iter().map(|s| f(&s.eval)).collect::<Vec<_>>()))
    }

    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(
            ["config", "epe", "as", "ar", "out"]
                .map(String::from)
                .to_vec(),
        );
        for (v, _) in &self.variants {
            let m = |f: fn(&EvalReport) -> f64| format!("{:?}", self.median_of(*v, f).unwrap());
            csv.push(vec![
                v.name().to_string(),
                m(|e| e.metrics.epe),
                m(|e| e.metrics.acc_strict),
                m(|e| e.metrics.acc_relax),
                m(|e| e.metrics.outliers),
            ]);
        }
        csv
    }

    /// Median per-level output and upsampled EPE for each configuration.
    pub fn levels_csv(&self) -> Csv {
        let mut csv = Csv::new(
            ["config", "level", "epe", "upsampled_epe"]
                .map(String::from)
                .to_vec(),
        );
        for (v, runs) in &self.variants {
            let levels = runs.first().map_or(0, |r| r.eval.level_epe.len());
            for l in 0..levels {
                let e = median(&runs.iter().map(|r| r.eval.level_epe[l]).collect::<Vec<_>>());
                let u = median(
                    &runs
                        .iter()
                        .map(|r| r.eval.level_upsampled_epe[l])
                        .collect::<Vec<_>>(),
                );
                csv.push(vec![
                    v.name().to_string(),
                    l.to_string(),
                    format!("{e:?}"),
                    format!("{u:?}"),
                ]);
            }
        }
        csv
    }
}

/// Default correlation-neighbor values of the sweep.
pub const SWEEP_VALUES: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub neighbors: usize,
    pub eval: EvalReport,
    /// Wall-clock seconds of geometry preparation plus training.
    pub seconds: f64,
}

/// One training run per neighbor count, run sequentially so timings are
/// comparable.
pub fn run_sweep(
    model: &ModelConfig,
    train: &TrainConfig,
    train_pairs: &[LabeledFramePair],
    eval_pairs: &[LabeledFramePair],
    values: &[usize],
) -> Result<Vec<SweepRow>> {
    let dim = input_dim(train_pairs)?;
    values
        .iter()
        .map(|&n| {
            let cfg = ModelConfig {
                correlation_neighbors: n,
                ..model.clone()
            };
            let start = Instant::now();
            let scenes = prepare(&cfg, train_pairs)?;
            let out = train_model(&cfg, train, dim, &scenes, |_, _| Ok(()))?;
            let seconds = start.elapsed().as_secs_f64();
            let eval = evaluate(&out.trainer.model, &prepare(&cfg, eval_pairs)?)?;
            Ok(SweepRow {
                neighbors: n,
                eval,
                seconds,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Csv {
    let mut csv = Csv::new(
        ["n", "epe", "as", "ar", "out", "occ_acc", "seconds"]
            .map(String::from)
            .to_vec(),
    );
    for r in rows {
        let m = &r.eval.metrics;
        csv.push(vec![
            r.neighbors.to_string(),
            format!("{:?}", m.epe),
            format!("{:?}", m.acc_strict),
            format!("{:?}", m.acc_relax),
            format!("{:?}", m.outliers),
            format!("{:?}", r.eval.occlusion_accuracy),
            format!("{:.6}", r.seconds),
        ]);
    }
    csv
}

pub fn sweep_levels_csv(rows: &[SweepRow]) -> Csv {
    let mut csv = Csv::new(["n", "level", "epe"].map(String::from).to_vec());
    for r in rows {
        for (l, e) in r.eval.level_epe.iter().enumerate() {
            csv.push(vec![
                r.neighbors.to_string(),
                l.to_string(),
                format!("{e:?}"),
            ]);
        }
    }
    csv
}
