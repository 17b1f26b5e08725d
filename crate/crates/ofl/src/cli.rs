//! Command-line definitions and command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ofl_core::geometry::FlowField;
use ofl_core::gradcheck::{run_suite, GradcheckOptions};
use ofl_core::model::{predict, CostVolumeMode, Model, ModelConfig, Upsampler};
use ofl_core::synth::{check_consistency, Occluder, OccluderKind, SceneConfig};
use ofl_core::train::{evaluate, PerfectPredictor, Predictor, TrainConfig, Trainer, TrainingScene};

use crate::checkpoint;
use crate::error::{OflError, Result};
use crate::experiment::{self, Variant};
use crate::manifest::{ModelCard, RunManifest};
use crate::pairfile;
use crate::render;
use crate::table::{self, Csv};

#[derive(Debug, Parser)]
#[command(
    name = "ofl",
    version,
    about = "Occlusion-aware point cloud scene flow"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Re-check the occlusion labels of a dataset against its geometry.
    Verify(VerifyArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    /// Train the four upsampler/cost-volume combinations over several seeds.
    Ablate(AblateArgs),
    /// Train once per correlation neighbor count.
    SweepN(SweepArgs),
    /// Draw a top-down view of a predicted flow.
    Render(RenderArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OccluderArg {
    HalfSpace,
    Sphere,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpsamplerArg {
    Cmu,
    Trilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CostVolumeArg {
    Ocv,
    Plain,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    #[arg(long, default_value_t = 10.0)]
    pub max_rotation_deg: f64,
    #[arg(long, default_value_t = 0.4)]
    pub max_translation: f64,
    #[arg(long, value_enum, default_value_t = OccluderArg::HalfSpace)]
    pub occluder: OccluderArg,
    #[arg(long, default_value_t = 0.2)]
    pub coverage: f64,
    #[arg(long, default_value_t = 0.002)]
    pub noise: f64,
    /// Omit per-point color features.
    #[arg(long)]
    pub no_features: bool,
    /// Keep the second frame in generation order.
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenArgs {
    pub fn scene_config(&self) -> SceneConfig {
        let kind = match self.occluder {
            OccluderArg::HalfSpace => Some(OccluderKind::HalfSpace),
            OccluderArg::Sphere => Some(OccluderKind::Sphere),
            OccluderArg::None => None,
        };
        SceneConfig {
            points: self.points,
            objects: self.objects,
            max_rotation: self.max_rotation_deg.to_radians(),
            max_translation: self.max_translation,
            occluder: kind.map(|kind| Occluder {
                kind,
                coverage: self.coverage,
            }),
            noise_sigma: self.noise,
            features: !self.no_features,
            shuffle: !self.no_shuffle,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Match radius; defaults to the one implied by the dataset's noise.
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub n_neighbors: Option<usize>,
    #[arg(long, value_enum)]
    pub upsampler: Option<UpsamplerArg>,
    #[arg(long, value_enum)]
    pub cost_volume: Option<CostVolumeArg>,
    #[arg(long)]
    pub radius_base: Option<f64>,
    #[arg(long)]
    pub refine_passes: Option<usize>,
    /// Hard-zero the cost volume of points estimated occluded.
    #[arg(long)]
    pub zero_occluded: bool,
    /// Small widths for fast single-core runs.
    #[arg(long, conflicts_with = "full_scale")]
    pub compact: bool,
    /// Four levels, four loss weights and 400 epochs.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated loss weights, finest level first.
    #[arg(long, value_delimiter = ',')]
    pub beta: Option<Vec<f64>>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub decay_interval: Option<usize>,
}

const DEFAULT_BETA: [f64; 4] = [0.02, 0.04, 0.08, 0.16];

impl ModelArgs {
    pub fn configs(&self) -> Result<(ModelConfig, TrainConfig)> {
        let (mut m, mut t) = if self.full_scale {
            (ModelConfig::full_scale(), TrainConfig::full_scale())
        } else if self.compact {
            (ModelConfig::compact(), TrainConfig::default())
        } else {
            (ModelConfig::default(), TrainConfig::default())
        };
        m.seed = self.seed;
        t.seed = self.seed;
        if let Some(l) = self.levels {
            m.levels = l;
        }
        if let Some(n) = self.n_neighbors {
            m.correlation_neighbors = n;
        }
        if let Some(u) = self.upsampler {
            m.upsampler = match u {
                UpsamplerArg::Cmu => Upsampler::Cmu,
                UpsamplerArg::Trilinear => Upsampler::Trilinear,
            };
        }
        if let Some(c) = self.cost_volume {
            m.cost_volume = match c {
                CostVolumeArg::Ocv => CostVolumeMode::Ocv,
                CostVolumeArg::Plain => CostVolumeMode::Plain,
            };
        }
        if let Some(r) = self.radius_base {
            m.radius_base = r;
        }
        if let Some(p) = self.refine_passes {
            m.refine_passes = p;
        }
        m.zero_occluded = self.zero_occluded;
        t.beta = match &self.beta {
            Some(b) => b.clone(),
            None => DEFAULT_BETA[..m.levels.min(4)].to_vec(),
        };
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(lr) = self.lr {
            t.learning_rate = lr;
        }
        if let Some(a) = self.alpha {
            t.alpha = a;
        }
        if let Some(d) = self.decay_factor {
            t.decay_factor = d;
        }
        if let Some(i) = self.decay_interval {
            t.decay_interval = i;
        }
        m.validate().map_err(|e| OflError::Usage(e.to_string()))?;
        t.validate(m.levels)
            .map_err(|e| OflError::Usage(e.to_string()))?;
        if !(t.learning_rate >= 0.0) {
            return Err(OflError::Usage("learning rate must be non-negative".into()));
        }
        Ok((m, t))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset for the final metrics; the training set when omitted.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint path; defaults to `<out>/model.ofl`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write the checkpoint every this many epochs.
    #[arg(long, default_value_t = 10)]
    pub checkpoint_every: usize,
    /// Continue from the checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "perfect")]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth itself instead of a model.
    #[arg(long)]
    pub perfect: bool,
    /// Levels used to pool ground truth for `--perfect`.
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    /// Metrics CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of seeds; seeds are `seed, seed+1, ...`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_values_t = experiment::SWEEP_VALUES)]
    pub values: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub pair: PathBuf,
    /// Flow CSV with one `x,y,z` row per first-frame point.
    #[arg(long, conflicts_with_all = ["checkpoint", "perfect"])]
    pub flow: Option<PathBuf>,
    #[arg(long, conflicts_with = "perfect")]
    pub checkpoint: Option<PathBuf>,
    /// Draw the ground-truth flow. With no flow source, zero flow is drawn.
    #[arg(long)]
    pub perfect: bool,
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only run checks whose name contains this string.
    #[arg(long)]
    pub filter: Option<String>,
    /// Test hook: perturb the analytic gradient of the named check.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| OflError::io(dir, e))
}

fn load_dataset(dir: &Path) -> Result<Vec<ofl_core::synth::LabeledFramePair>> {
    if !dir.join(pairfile::MANIFEST).exists() {
        return Err(OflError::Usage(format!(
            "{}: no dataset manifest",
            dir.display()
        )));
    }
    let pairs = pairfile::read_dataset(dir)?;
    if pairs.is_empty() {
        return Err(OflError::Usage(format!(
            "{}: dataset is empty",
            dir.display()
        )));
    }
    Ok(pairs)
}

const DATASET_MANIFEST: &str = "dataset.json";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Verify(a) => verify(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::SweepN(a) => sweep(&a),
        Command::Render(a) => render_cmd(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn gen(a: &GenArgs) -> Result<()> {
    if a.count == 0 {
        return Err(OflError::Usage("--count must be at least 1".into()));
    }
    let cfg = a.scene_config();
    cfg.validate().map_err(|e| OflError::Usage(e.to_string()))?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("gen", a.seed);
    manifest.scene = Some(cfg.clone());
    manifest.out_dir = Some(a.out.display().to_string());
    manifest.write(&a.out.join(DATASET_MANIFEST))?;
    let pairs = experiment::generate_dataset(&cfg, a.count, a.seed)?;
    let names = pairfile::write_dataset(&a.out, &pairs)?;
    println!("wrote {} scenes to {}", names.len(), a.out.display());
    Ok(())
}

fn verify(a: &VerifyArgs) -> Result<()> {
    let delta = match a.delta {
        Some(d) => d,
        None => {
            let m = RunManifest::read(&a.data.join(DATASET_MANIFEST))?;
            m.scene
                .ok_or_else(|| {
                    OflError::Usage("dataset manifest has no scene config; pass --delta".into())
                })?
                .match_radius()
        }
    };
    let paths = pairfile::read_manifest(&a.data)?;
    let mut bad = 0;
    for p in &paths {
        let pair = pairfile::read_pair(p)?;
        let v = check_consistency(&pair, delta);
        if !v.is_empty() {
            bad += 1;
            println!("{}: {} inconsistent labels", p.display(), v.len());
        }
    }
    println!("{} scenes checked, {} inconsistent", paths.len(), bad);
    if bad > 0 {
        return Err(OflError::Core(ofl_core::Error::Invalid(format!(
            "{bad} scenes fail the visibility re-check"
        ))));
    }
    Ok(())
}

fn write_log(path: &Path, levels: usize, rows: &[Vec<String>]) -> Result<()> {
    let mut csv = Csv::new(table::log_header(levels));
    for r in rows {
        csv.push(r.clone());
    }
    csv.write(path)
}

fn save_trainer(trainer: &Trainer, path: &Path) -> Result<()> {
    checkpoint::write(path, &checkpoint::trainer_records(trainer))?;
    ModelCard {
        model: trainer.model.config.clone(),
        input_dim: trainer.model.input_dim,
        train: Some(trainer.config.clone()),
    }
    .write(path)
}

fn train(a: &TrainArgs) -> Result<()> {
    let (mut model_cfg, mut train_cfg) = a.model.configs()?;
    let pairs = load_dataset(&a.data)?;
    let eval_pairs = match &a.eval_data {
        Some(d) => load_dataset(d)?,
        None => pairs.clone(),
    };
    create_dir(&a.out)?;
    let ckpt = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| a.out.join("model.ofl"));
    let dim = experiment::input_dim(&pairs)?;

    let mut trainer = if a.resume {
        if !ckpt.exists() {
            return Err(OflError::Usage(format!(
                "{}: checkpoint not found",
                ckpt.display()
            )));
        }
        let card = ModelCard::read(&ckpt)?;
        model_cfg = card.model;
        if let Some(t) = card.train {
            train_cfg = TrainConfig {
                epochs: a.model.epochs.unwrap_or(t.epochs),
                ..t
            };
        }
        let records = checkpoint::read(&ckpt)?;
        checkpoint::load_trainer(
            Model::new(model_cfg.clone(), card.input_dim)?,
            train_cfg.clone(),
            &records,
            &ckpt,
        )?
    } else {
        Trainer::new(Model::new(model_cfg.clone(), dim)?, train_cfg.clone())?
    };

    let mut manifest = RunManifest::new("train", model_cfg.seed);
    manifest.model = Some(model_cfg.clone());
    manifest.train = Some(train_cfg.clone());
    manifest.data = Some(a.data.display().to_string());
    manifest.checkpoint = Some(ckpt.display().to_string());
    manifest.out_dir = Some(a.out.display().to_string());
    manifest.write(&a.out.join("run.json"))?;

    let log_path = a.out.join("train_log.csv");
    let levels = model_cfg.levels;
    let mut rows: Vec<Vec<String>> = if a.resume && log_path.exists() {
        let mut old = Csv::read(&log_path)?.rows;
        old.truncate(trainer.epochs_done);
        old
    } else {
        Vec::new()
    };
    let scenes = experiment::prepare(&model_cfg, &pairs)?;
    let every = a.checkpoint_every;
    let mut failure = None;
    let result = trainer.train(&scenes, |t, log| {
        rows.push(table::log_row(log));
        let step = (|| {
            write_log(&log_path, levels, &rows)?;
            if every > 0 && log.epoch % every == 0 {
                save_trainer(t, &ckpt)?;
            }
            Ok::<_, OflError>(())
        })();
        println!(
            "epoch {:>4}  loss {:.5}  epe {:.4}  as {:.3}  occ {:.3}",
            log.epoch, log.loss, log.metrics.epe, log.metrics.acc_strict, log.occlusion_accuracy
        );
        step.map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            ofl_core::Error::Invalid(msg)
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;
    write_log(&log_path, levels, &rows)?;
    save_trainer(&trainer, &ckpt)?;
    let eval_scenes = experiment::prepare(&model_cfg, &eval_pairs)?;
    let report = evaluate(&trainer.model, &eval_scenes)?;
    let mut csv = Csv::new(table::metrics_header(levels));
    csv.push(table::metrics_row(&report));
    csv.write(&a.out.join("metrics.csv"))?;
    print!("{}", csv.render());
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<Model> {
    if !ckpt.exists() {
        return Err(OflError::Usage(format!(
            "{}: checkpoint not found",
            ckpt.display()
        )));
    }
    let card = ModelCard::read(ckpt).map_err(|e| OflError::Usage(e.to_string()))?;
    let mut model = Model::new(card.model, card.input_dim)?;
    let records = checkpoint::read(ckpt)?;
    checkpoint::load_model(&mut model, &records, ckpt)?;
    Ok(model)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let pairs = load_dataset(&a.data)?;
    let (report, levels) = if a.perfect {
        let cfg = ModelConfig {
            levels: a.levels,
            ..ModelConfig::default()
        };
        cfg.validate().map_err(|e| OflError::Usage(e.to_string()))?;
        let scenes = experiment::prepare(&cfg, &pairs)?;
        (evaluate(&PerfectPredictor, &scenes)?, a.levels)
    } else {
        let ckpt = a.checkpoint.as_ref().expect("required by clap");
        let model = load_model(ckpt)?;
        let scenes = experiment::prepare(&model.config, &pairs)?;
        (evaluate(&model, &scenes)?, model.config.levels)
    };
    let mut csv = Csv::new(table::metrics_header(levels));
    csv.push(table::metrics_row(&report));
    if let Some(out) = &a.out {
        csv.write(out)?;
    }
    print!("{}", csv.render());
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let (model_cfg, train_cfg) = a.model.configs()?;
    if a.seeds == 0 {
        return Err(OflError::Usage("--seeds must be at least 1".into()));
    }
    let pairs = load_dataset(&a.data)?;
    let eval_pairs = match &a.eval_data {
        Some(d) => load_dataset(d)?,
        None => pairs.clone(),
    };
    create_dir(&a.out)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|k| a.model.seed + k).collect();
    let mut manifest = RunManifest::new("ablate", a.model.seed);
    manifest.model = Some(model_cfg.clone());
    manifest.train = Some(train_cfg.clone());
    manifest.data = Some(a.data.display().to_string());
    manifest.out_dir = Some(a.out.display().to_string());
    manifest.write(&a.out.join("run.json"))?;
    let result = experiment::run_ablation(
        &model_cfg,
        &train_cfg,
        &pairs,
        &eval_pairs,
        &seeds,
        &Variant::ALL,
    )?;
    let csv = result.to_csv();
    csv.write(&a.out.join("ablation.csv"))?;
    result
        .levels_csv()
        .write(&a.out.join("ablation_levels.csv"))?;
    print!("{}", csv.render());
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let (model_cfg, train_cfg) = a.model.configs()?;
    if a.values.is_empty() || a.values.contains(&0) {
        return Err(OflError::Usage("--values must be positive integers".into()));
    }
    let pairs = load_dataset(&a.data)?;
    let eval_pairs = match &a.eval_data {
        Some(d) => load_dataset(d)?,
        None => pairs.clone(),
    };
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("sweep-n", a.model.seed);
    manifest.model = Some(model_cfg.clone());
    manifest.train = Some(train_cfg.clone());
    manifest.data = Some(a.data.display().to_string());
    manifest.out_dir = Some(a.out.display().to_string());
    manifest.write(&a.out.join("run.json"))?;
    let rows = experiment::run_sweep(&model_cfg, &train_cfg, &pairs, &eval_pairs, &a.values)?;
    let csv = experiment::sweep_csv(&rows);
    csv.write(&a.out.join("sweep_n.csv"))?;
    experiment::sweep_levels_csv(&rows).write(&a.out.join("sweep_n_levels.csv"))?;
    print!("{}", csv.render());
    Ok(())
}

/// Reads `x,y,z` rows; a header line is skipped if present.
pub fn read_flow_csv(path: &Path) -> Result<FlowField> {
    let text = fs::read_to_string(path).map_err(|e| OflError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match vals {
            Ok(v) if v.len() == 3 => out.push([v[0], v[1], v[2]]),
            _ if i == 0 => continue,
            _ => {
                return Err(OflError::Usage(format!(
                    "{}: line {} is not an x,y,z row",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Ok(FlowField(out))
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let pair = pairfile::read_pair(&a.pair)?;
    let flow = if let Some(f) = &a.flow {
        read_flow_csv(f)?
    } else if let Some(c) = &a.checkpoint {
        let model = load_model(c)?;
        let scene = TrainingScene::new(&model.config, &pair)?;
        predict(&model, &scene.geometry)?.swap_remove(0).flow
    } else if a.perfect {
        let preds = PerfectPredictor.predict(&TrainingScene::new(
            &ModelConfig {
                levels: 2,
                ..ModelConfig::default()
            },
            &pair,
        )?)?;
        preds[0].flow.clone()
    } else {
        FlowField::zeros(pair.p.len())
    };
    let (img, stats) = render::render(&pair, &flow, a.width, a.height)?;
    img.write(&a.out)?;
    println!(
        "{}: {}×{}, {} accurate, {} inaccurate",
        a.out.display(),
        a.width,
        a.height,
        stats.accurate,
        stats.inaccurate
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let opts = GradcheckOptions {
        seed: a.seed,
        corrupt: a.corrupt.clone(),
        filter: a.filter.clone(),
        ..GradcheckOptions::default()
    };
    let results = run_suite(&opts)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<24} checked {:>4}  max_rel_err {:.3e}  tol {:.0e}  worst {}",
            r.name, r.checked, r.max_relative_error, r.tolerance, r.worst
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(OflError::Core(ofl_core::Error::Invalid(format!(
            "gradient check failed: {}",
            failed.join(", ")
        ))))
    }
}
