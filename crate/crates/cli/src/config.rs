//! Experiment config files (TOML).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use ticketforge::data::{
    adapt_channels, load_csv, load_idx, split_halves, synth_task_with, ChannelAdapt, SynthConfig, SynthKind, TaskData,
};
use ticketforge::model::{build_resnet50, build_small_cnn, build_small_mlp, build_vgg19, LayerSpec, ModelSpec};
use ticketforge::optim::{LrSchedule, OptimizerConfig, OptimizerKind};
use ticketforge::pipeline::{EvalCadence, GenerationConfig, LateReset, PruneScope, TrainRunConfig};
use ticketforge::pruning::PermuteMode;
use ticketforge::transfer::Condition;

use crate::CliError;

pub const OUT_ENV: &str = "TICKETFORGE_OUT";
pub const DEFAULT_SEEDS: [u64; 6] = [0, 1, 2, 3, 4, 5];

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub name: String,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub schedule: Option<LrSchedule>,
    pub training: TrainingSection,
    #[serde(default)]
    pub pruning: PruningSection,
    #[serde(default)]
    pub transfer: Option<TransferSection>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ModelSection {
    Mlp {
        widths: Vec<usize>,
    },
    Cnn {
        widths: Vec<usize>,
    },
    Vgg19,
    Resnet50,
    /// Explicit layer list.
    Custom {
        layers: Vec<LayerSpec>,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        synth: SynthKind,
        n_per_class: usize,
        num_classes: usize,
        #[serde(default = "one")]
        channels: usize,
        #[serde(default = "twelve")]
        size: usize,
        #[serde(default)]
        noise: Option<f64>,
        #[serde(default)]
        informative: Option<f64>,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        /// `[C, H, W]`
        shape: [usize; 3],
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

fn one() -> usize {
    1
}
fn twelve() -> usize {
    12
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    A,
    B,
}

#[derive(Clone, Debug, Deserialize)]
pub struct DatasetSection {
    #[serde(flatten)]
    pub source: DataSource,
    /// Keep one balanced half of the training split.
    #[serde(default)]
    pub half: Option<Half>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub channel_adapt: ChannelAdapt,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub betas: Option<(f64, f64)>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub decay_bn: Option<bool>,
}

impl OptimizerSection {
    pub fn resolve(&self) -> OptimizerConfig {
        let base = match self.kind {
            OptimizerKind::SgdMomentum => OptimizerConfig::sgd(),
            OptimizerKind::Adam => OptimizerConfig::adam(),
        };
        OptimizerConfig {
            kind: self.kind,
            lr: self.lr.unwrap_or(base.lr),
            momentum: self.momentum.unwrap_or(base.momentum),
            betas: self.betas.unwrap_or(base.betas),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            decay_bn: self.decay_bn.unwrap_or(base.decay_bn),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub late_reset_epochs: Option<usize>,
    #[serde(default)]
    pub late_reset_steps: Option<usize>,
}

fn default_batch() -> usize {
    512
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSection {
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub eval_cadence: Option<String>,
    #[serde(default)]
    pub scope: PruneScope,
    #[serde(default)]
    pub prune_biases: bool,
    /// Mask handling for the random-ticket baseline.
    #[serde(default = "default_mask_mode")]
    pub mask_mode: PermuteMode,
    /// Seeds the one-time initialization; defaults to the first seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

fn default_rate() -> f64 {
    0.2
}
fn default_iterations() -> usize {
    30
}
fn default_mask_mode() -> PermuteMode {
    PermuteMode::Global
}

impl Default for PruningSection {
    fn default() -> Self {
        PruningSection {
            rate: default_rate(),
            iterations: default_iterations(),
            eval_cadence: None,
            scope: PruneScope::Global,
            prune_biases: false,
            mask_mode: default_mask_mode(),
            init_seed: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    /// Experiment directory holding the source tickets.
    pub source: PathBuf,
    /// Experiment directory with tickets generated on the target.
    #[serde(default)]
    pub same_dataset: Option<PathBuf>,
    #[serde(default)]
    pub conditions: Option<Vec<String>>,
    /// Iterations to evaluate; default follows the eval cadence.
    #[serde(default)]
    pub iterations: Option<Vec<usize>>,
}

fn config_err(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: HarnessConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file.
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DataSource::Csv { train, test, .. } => {
                fix(train);
                fix(test);
            }
            DataSource::Synthetic { .. } => {}
        }
        if let Some(t) = &mut self.transfer {
            fix(&mut t.source);
            if let Some(s) = &mut t.same_dataset {
                fix(s);
            }
        }
        fix(&mut self.output_dir);
    }

    pub fn seeds(&self, cli: Option<&[u64]>) -> Result<Vec<u64>, CliError> {
        let seeds = cli
            .map(<[u64]>::to_vec)
            .or_else(|| self.seeds.clone())
            .unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
        if seeds.is_empty() {
            return Err(config_err("seeds", "must be nonempty"));
        }
        Ok(seeds)
    }

    /// Experiment directory, honoring `TICKETFORGE_OUT`.
    pub fn experiment_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| self.output_dir.clone(), PathBuf::from);
        root.join(&self.name)
    }

    pub fn eval_cadence(&self, cli: Option<&str>) -> Result<Option<EvalCadence>, CliError> {
        match cli.or(self.pruning.eval_cadence.as_deref()).unwrap_or("paper") {
            "none" => Ok(None),
            s => s
                .parse()
                .map(Some)
                .map_err(|e| config_err("pruning.eval_cadence", e)),
        }
    }

    pub fn conditions(&self, cli: Option<&[String]>, default: &[Condition]) -> Result<Vec<Condition>, CliError> {
        let listed = cli
            .map(<[String]>::to_vec)
            .or_else(|| self.transfer.as_ref().and_then(|t| t.conditions.clone()));
        match listed {
            None => Ok(default.to_vec()),
            Some(v) => {
                let mut out: Vec<Condition> = v
                    .iter()
                    .map(|s| s.parse().map_err(|e| config_err("conditions", e)))
                    .collect::<Result<_, _>>()?;
                if !out.contains(&Condition::Transferred) {
                    out.insert(0, Condition::Transferred);
                }
                out.dedup();
                Ok(out)
            }
        }
    }

    pub fn load_task(&self) -> Result<TaskData, CliError> {
        let data = |e: ticketforge::data::DataError| CliError::Data(e.to_string());
        let d = &self.dataset;
        let mut task = match &d.source {
            DataSource::Synthetic {
                synth,
                n_per_class,
                num_classes,
                channels,
                size,
                noise,
                informative,
                seed,
            } => {
                let mut s = SynthConfig::new(*synth, *n_per_class, *num_classes, *seed);
                s.channels = *channels;
                s.size = *size;
                if let Some(n) = noise {
                    s.noise = *n;
                }
                if let Some(i) = informative {
                    s.informative = *i;
                }
                synth_task_with(&s).map_err(|e| config_err("dataset", e))?
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    if !p.exists() {
                        return Err(config_err("dataset", format!("file {} does not exist", p.display())));
                    }
                }
                let train = load_idx(train_images, train_labels).map_err(data)?;
                let mut test = load_idx(test_images, test_labels).map_err(data)?;
                test = reclass(test, train.num_classes())?;
                TaskData::new(reclass(train, test.num_classes())?, test).map_err(data)?
            }
            DataSource::Csv {
                train,
                test,
                shape,
                num_classes,
            } => {
                for p in [train, test] {
                    if !p.exists() {
                        return Err(config_err("dataset", format!("file {} does not exist", p.display())));
                    }
                }
                let tr = load_csv(train, *shape, *num_classes).map_err(data)?;
                let te = load_csv(test, *shape, Some(tr.num_classes())).map_err(data)?;
                TaskData::new(tr, te).map_err(data)?
            }
        };
        if let Some(half) = d.half {
            let (a, b) = split_halves(&task.train, d.split_seed).map_err(data)?;
            let train = if half == Half::A { a } else { b };
            task = TaskData::new(train, task.test).map_err(data)?;
        }
        let want = self.input_channels(&task)?;
        if task.train.channels() != want {
            let train = adapt_channels(&task.train, want, d.channel_adapt).map_err(|e| config_err("dataset.channel_adapt", e))?;
            let test = adapt_channels(&task.test, want, d.channel_adapt).map_err(|e| config_err("dataset.channel_adapt", e))?;
            task = TaskData::new(train, test).map_err(data)?;
        }
        Ok(task)
    }

    fn input_channels(&self, task: &TaskData) -> Result<usize, CliError> {
        Ok(match &self.model {
            ModelSection::Vgg19 | ModelSection::Resnet50 => 3,
            _ => task.train.channels(),
        })
    }

    pub fn model_spec(&self, task: &TaskData) -> Result<ModelSpec, CliError> {
        let classes = task.num_classes();
        let c = task.train.channels();
        let (h, w) = task.train.image_size();
        let spec = match &self.model {
            ModelSection::Mlp { widths } => build_small_mlp([c, h, w], widths, classes),
            ModelSection::Cnn { widths } => build_small_cnn(c, widths, classes),
            ModelSection::Vgg19 => Ok(build_vgg19(classes)),
            ModelSection::Resnet50 => Ok(build_resnet50(classes)),
            ModelSection::Custom { layers } => {
                let flat = layers.iter().any(|l| matches!(l, LayerSpec::Flatten));
                let spec = ModelSpec {
                    input_channels: c,
                    input_size: flat.then_some((h, w)),
                    num_classes: classes,
                    layers: layers.clone(),
                };
                spec.validate().map(|_| spec)
            }
        };
        spec.map_err(|e| config_err("model", e))
    }

    pub fn train_config(&self, model: ModelSpec) -> Result<TrainRunConfig, CliError> {
        let t = &self.training;
        let late_reset = match (t.late_reset_epochs, t.late_reset_steps) {
            (Some(_), Some(_)) => {
                return Err(config_err("training", "set late_reset_epochs or late_reset_steps, not both"));
            }
            (Some(e), None) => LateReset::Epochs(e),
            (None, Some(s)) => LateReset::Steps(s),
            (None, None) => LateReset::Epochs(1),
        };
        let optimizer = self.optimizer.resolve();
        optimizer.validate().map_err(|e| config_err("optimizer", e))?;
        let schedule = self.schedule.clone().unwrap_or_else(LrSchedule::constant);
        schedule.validate().map_err(|e| config_err("schedule", e))?;
        if t.epochs == 0 {
            return Err(config_err("training.epochs", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(config_err("training.batch_size", "must be positive"));
        }
        Ok(TrainRunConfig {
            model,
            optimizer,
            schedule,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: 0,
            late_reset,
        })
    }

    pub fn generation_config(&self, train: TrainRunConfig, seeds: &[u64]) -> Result<GenerationConfig, CliError> {
        let p = &self.pruning;
        if !(p.rate > 0.0 && p.rate < 1.0) {
            return Err(config_err("pruning.rate", "must lie in (0, 1)"));
        }
        if p.iterations == 0 {
            return Err(config_err("pruning.iterations", "must be at least 1"));
        }
        let seed = p.init_seed.unwrap_or(seeds[0]);
        Ok(GenerationConfig {
            train: TrainRunConfig { seed, ..train },
            iterations: p.iterations,
            rate: p.rate,
            init_seed: seed,
            scope: p.scope,
            prune_biases: p.prune_biases,
        })
    }
}

fn reclass(ds: ticketforge::data::Dataset, classes: usize) -> Result<ticketforge::data::Dataset, CliError> {
    if ds.num_classes() >= classes {
        return Ok(ds);
    }
    let id = ds.id.clone();
    let norm = ds.normalization().clone();
    let mut out = ticketforge::data::Dataset::new(id, ds.images().clone(), ds.labels().to_vec(), classes)
        .map_err(|e| CliError::Data(e.to_string()))?;
    out.renormalize(&norm).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(out)
}
