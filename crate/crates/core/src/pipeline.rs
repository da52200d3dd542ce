//! Training runs, the iterative prune-and-rewind loop, and random tickets.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{epoch_order, Dataset, TaskData};
use crate::model::{initialize, ModelError, ModelSpec, ParamStore};
use crate::network::{argmax_rows, backward, forward, Mode};
use crate::optim::{LrSchedule, OptimError, Optimizer, OptimizerConfig, OptimizerKind};
use crate::pruning::{permute_mask, prune_global, prune_layerwise, Mask, PermuteMode, PruneError};
use crate::scalar::Scalar;
use crate::ticket::{Ticket, TicketError, TicketMeta, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("dataset `{dataset}` does not fit the model: {detail}")]
    DataMismatch { dataset: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Ticket(#[from] TicketError),
}

/// Late-reset point, in optimizer steps or whole epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateReset {
    Steps(usize),
    Epochs(usize),
}

impl LateReset {
    pub fn steps(self, steps_per_epoch: usize) -> usize {
        match self {
            LateReset::Steps(k) => k,
            LateReset::Epochs(e) => e * steps_per_epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch data ordering.
    pub seed: u64,
    pub late_reset: LateReset,
}

impl TrainRunConfig {
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn late_reset_steps(&self, n_train: usize) -> usize {
        self.late_reset.steps(self.steps_per_epoch(n_train))
    }

    pub fn validate(&self, n_train: usize) -> Result<(), PipelineError> {
        if self.epochs == 0 {
            return Err(PipelineError::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be positive".into()));
        }
        if n_train == 0 {
            return Err(PipelineError::Config("training set is empty".into()));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        let total = self.epochs * self.steps_per_epoch(n_train);
        let k = self.late_reset_steps(n_train);
        if k > total {
            return Err(PipelineError::Config(format!(
                "late reset at step {k} exceeds the {total} training steps"
            )));
        }
        Ok(())
    }

    pub fn optimizer_name(&self) -> &'static str {
        match self.optimizer.kind {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Running accuracy over the epoch's training batches.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    /// Parameters after `late_reset_steps` steps, when that point was
    /// reached during this run.
    pub snapshot: Option<ParamStore<T>>,
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
    pub test_accuracy: f64,
    pub wall_time: f64,
}

fn check_data(spec: &ModelSpec, ds: &Dataset) -> Result<(), PipelineError> {
    let mismatch = |detail: String| PipelineError::DataMismatch {
        dataset: ds.id.clone(),
        detail,
    };
    if ds.channels() != spec.input_channels {
        return Err(mismatch(format!(
            "{} channels, model expects {}",
            ds.channels(),
            spec.input_channels
        )));
    }
    if let Some(size) = spec.input_size {
        if ds.image_size() != size {
            return Err(mismatch(format!("images are {:?}, model expects {size:?}", ds.image_size())));
        }
    }
    if ds.num_classes() != spec.num_classes {
        return Err(mismatch(format!(
            "{} classes, model has {} outputs",
            ds.num_classes(),
            spec.num_classes
        )));
    }
    Ok(())
}

/// Top-1 accuracy in eval mode.
pub fn evaluate<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamStore<T>,
    mask: &Mask,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64, PipelineError> {
    check_data(spec, ds)?;
    if ds.is_empty() {
        return Err(PipelineError::Config("evaluation set is empty".into()));
    }
    let mut params = params.clone();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch::<T>(chunk);
        let f = forward(spec, &mut params, &x, mask, Mode::Eval)?;
        correct += argmax_rows(f.logits()).iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Trains `init` under `mask` from global step `start_step` to the end of
/// the epoch budget. Masked coordinates stay at their initial values (zero
/// for rewound tickets). The snapshot is taken when the step counter reads
/// `late_reset_steps`, before that step's update.
pub fn train<T: Scalar>(
    cfg: &TrainRunConfig,
    task: &TaskData,
    init: &ParamStore<T>,
    mask: &Mask,
    start_step: usize,
    track_test: bool,
) -> Result<TrainOutcome<T>, PipelineError> {
    let started = Instant::now();
    let spec = &cfg.model;
    let n = task.train.len();
    cfg.validate(n)?;
    check_data(spec, &task.train)?;
    check_data(spec, &task.test)?;
    init.check_against(spec)?;
    mask.check_aligned(init)?;

    let spe = cfg.steps_per_epoch(n);
    let total = cfg.epochs * spe;
    let k = cfg.late_reset_steps(n);
    if start_step > total {
        return Err(PipelineError::Config(format!("start step {start_step} beyond {total} steps")));
    }
    let mut params = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut snapshot = None;
    let mut metrics = Vec::new();
    let mut step = start_step;
    if step == k {
        snapshot = Some(params.clone());
    }
    for epoch in step / spe..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.optimizer.lr, epoch);
        let order = epoch_order(n, cfg.seed, epoch);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let skip = step - epoch * spe;
        for batch in order.chunks(cfg.batch_size).skip(skip) {
            let (x, y) = task.train.batch::<T>(batch);
            let f = forward(spec, &mut params, &x, mask, Mode::Train)?;
            correct += argmax_rows(f.logits()).iter().zip(&y).filter(|(p, l)| p == l).count();
            let mut graph = f.graph;
            let loss = graph.cross_entropy(f.logits, &y).map_err(ModelError::from)?;
            let lv = graph.value(loss).item().expect("scalar loss").to_f64_lossy();
            if !lv.is_finite() {
                return Err(PipelineError::NonFiniteLoss { epoch, step, loss: lv });
            }
            backward(&graph, loss, &mut params)?;
            opt.step(&mut params, mask, lr)?;
            step += 1;
            loss_sum += lv * batch.len() as f64;
            seen += batch.len();
            if step == k {
                snapshot = Some(params.clone());
            }
        }
        let test_accuracy = if track_test || epoch + 1 == cfg.epochs {
            Some(evaluate(spec, &params, mask, &task.test, cfg.batch_size.max(256))?)
        } else {
            None
        };
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_accuracy,
        });
    }
    params.clear_grads();
    if let Some(s) = snapshot.as_mut() {
        s.clear_grads();
    }
    let test_accuracy = match metrics.last().and_then(|m| m.test_accuracy) {
        Some(a) => a,
        None => evaluate(spec, &params, mask, &task.test, cfg.batch_size.max(256))?,
    };
    Ok(TrainOutcome {
        params,
        snapshot,
        metrics,
        steps: step,
        test_accuracy,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    Global,
    Layerwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub train: TrainRunConfig,
    pub iterations: usize,
    pub rate: f64,
    /// Seeds the one-time initialization.
    pub init_seed: u64,
    #[serde(default)]
    pub scope: PruneScope,
    /// Include biases in the mask alongside weights.
    #[serde(default)]
    pub prune_biases: bool,
}

impl GenerationConfig {
    pub fn validate(&self, n_train: usize) -> Result<(), PipelineError> {
        self.train.validate(n_train)?;
        if self.iterations == 0 {
            return Err(PipelineError::Config("iterations must be at least 1".into()));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(PipelineError::Config(format!("rate must lie in (0, 1), got {}", self.rate)));
        }
        Ok(())
    }
}

/// What one prune-and-rewind iteration observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Remaining fraction of the network that was trained this iteration.
    pub trained_remaining_fraction: f64,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub remaining_fraction: f64,
    pub wall_time: f64,
}

/// The generation loop as an explicit state machine so callers can
/// checkpoint between iterations and resume.
pub struct TicketGenerator<'a, T> {
    cfg: GenerationConfig,
    task: &'a TaskData,
    state: Option<Ticket<T>>,
    k: usize,
}

impl<'a, T: Scalar> TicketGenerator<'a, T> {
    pub fn new(cfg: GenerationConfig, task: &'a TaskData) -> Result<Self, PipelineError> {
        cfg.validate(task.train.len())?;
        let k = cfg.train.late_reset_steps(task.train.len());
        Ok(TicketGenerator {
            cfg,
            task,
            state: None,
            k,
        })
    }

    /// Continues after a previously emitted ticket of this same run.
    pub fn resume(cfg: GenerationConfig, task: &'a TaskData, last: Ticket<T>) -> Result<Self, PipelineError> {
        let mut g = Self::new(cfg, task)?;
        last.validate()?;
        if last.meta.model_spec_hash != g.cfg.train.model.topology_hash() || last.meta.seed != g.cfg.init_seed {
            return Err(PipelineError::Config("checkpoint belongs to a different run".into()));
        }
        if last.meta.late_reset_k != g.k {
            return Err(PipelineError::Config(format!(
                "checkpoint was taken with late reset {} steps, config gives {}",
                last.meta.late_reset_k, g.k
            )));
        }
        g.state = Some(last);
        Ok(g)
    }

    pub fn completed(&self) -> usize {
        self.state.as_ref().map_or(0, |t| t.meta.pruning_iteration)
    }

    pub fn is_done(&self) -> bool {
        self.completed() >= self.cfg.iterations
    }

    pub fn late_reset_steps(&self) -> usize {
        self.k
    }

    /// Runs one train, prune, rewind cycle and returns the new ticket.
    pub fn step(&mut self) -> Result<(Ticket<T>, IterationRecord), PipelineError> {
        if self.is_done() {
            return Err(PipelineError::Config("all iterations already completed".into()));
        }
        let spec = &self.cfg.train.model;
        let (start, mask, start_step) = match &self.state {
            None => {
                let p: ParamStore<T> = initialize(spec, self.cfg.init_seed)?;
                let m = Mask::dense_with(&p, self.cfg.prune_biases);
                (p, m, 0)
            }
            Some(t) => (t.rewound()?, t.mask.clone(), self.k),
        };
        let trained_fraction = mask.remaining_fraction();
        let out = train(&self.cfg.train, self.task, &start, &mask, start_step, false)?;
        let snapshot = match &self.state {
            None => out
                .snapshot
                .clone()
                .ok_or_else(|| PipelineError::Config("late-reset snapshot was never reached".into()))?,
            Some(t) => t.snapshot.clone(),
        };
        let (new_mask, _) = match self.cfg.scope {
            PruneScope::Global => prune_global(&out.params, &mask, self.cfg.rate)?,
            PruneScope::Layerwise => prune_layerwise(&out.params, &mask, self.cfg.rate)?,
        };
        let iteration = self.completed() + 1;
        let ticket = Ticket {
            spec: spec.clone(),
            snapshot,
            meta: TicketMeta {
                source_dataset_id: self.task.id().to_string(),
                source_optimizer: self.cfg.train.optimizer_name().to_string(),
                model_spec_hash: spec.topology_hash(),
                pruning_iteration: iteration,
                remaining_fraction: new_mask.remaining_fraction(),
                late_reset_k: self.k,
                seed: self.cfg.init_seed,
                format_version: FORMAT_VERSION,
                extra: BTreeMap::new(),
            },
            mask: new_mask,
        };
        let record = IterationRecord {
            iteration,
            trained_remaining_fraction: trained_fraction,
            test_accuracy: out.test_accuracy,
            train_accuracy: out.metrics.last().map_or(0.0, |m| m.train_accuracy),
            remaining_fraction: ticket.meta.remaining_fraction,
            wall_time: out.wall_time,
        };
        log::info!(
            "iteration {iteration}: trained at {:.4} remaining, test acc {:.4}, pruned to {:.4}",
            trained_fraction,
            out.test_accuracy,
            record.remaining_fraction
        );
        self.state = Some(ticket.clone());
        Ok((ticket, record))
    }
}

/// Tickets emitted before a failure, together with the failure.
#[derive(Debug)]
pub struct GenerationAborted<T> {
    pub completed: Vec<Ticket<T>>,
    pub error: PipelineError,
}

impl<T> fmt::Display for GenerationAborted<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "generation aborted after {} tickets: {}", self.completed.len(), self.error)
    }
}

/// Runs every iteration and returns one ticket per iteration.
pub fn generate_tickets<T: Scalar>(
    cfg: &GenerationConfig,
    task: &TaskData,
) -> Result<(Vec<Ticket<T>>, Vec<IterationRecord>), GenerationAborted<T>> {
    let mut completed = Vec::new();
    let mut records = Vec::new();
    let mut g = match TicketGenerator::new(cfg.clone(), task) {
        Ok(g) => g,
        Err(error) => return Err(GenerationAborted { completed, error }),
    };
    while !g.is_done() {
        match g.step() {
            Ok((t, r)) => {
                completed.push(t);
                records.push(r);
            }
            Err(error) => return Err(GenerationAborted { completed, error }),
        }
    }
    Ok((completed, records))
}

/// Control ticket: weights freshly drawn from the initialization
/// distribution and the mask rearranged per `mode`.
pub fn make_random_ticket<T: Scalar>(ticket: &Ticket<T>, seed: u64, mode: PermuteMode) -> Result<Ticket<T>, PipelineError> {
    let snapshot = initialize(&ticket.spec, seed)?;
    let mask = permute_mask(&ticket.mask, mode, seed);
    let mut meta = ticket.meta.clone();
    meta.extra.insert("random_mode".into(), mode.to_string());
    meta.extra.insert("random_seed".into(), seed.to_string());
    meta.late_reset_k = 0;
    meta.remaining_fraction = mask.remaining_fraction();
    Ok(Ticket {
        spec: ticket.spec.clone(),
        snapshot,
        mask,
        meta,
    })
}

/// Which pruning iterations get evaluated.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum EvalCadence {
    #[default]
    All,
    /// 1 through 6, then every third iteration.
    Paper,
    List(Vec<usize>),
}

impl EvalCadence {
    pub fn includes(&self, iteration: usize) -> bool {
        match self {
            EvalCadence::All => iteration >= 1,
            EvalCadence::Paper => (1..=6).contains(&iteration) || (iteration > 6 && iteration.is_multiple_of(3)),
            EvalCadence::List(v) => v.contains(&iteration),
        }
    }

    pub fn select(&self, up_to: usize) -> Vec<usize> {
        (1..=up_to).filter(|&i| self.includes(i)).collect()
    }
}

impl FromStr for EvalCadence {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "all" => Ok(EvalCadence::All),
            "paper" => Ok(EvalCadence::Paper),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&i| i >= 1)
                        .ok_or_else(|| PipelineError::Config(format!("bad eval cadence entry `{p}`")))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(EvalCadence::List),
        }
    }
}

impl fmt::Display for EvalCadence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalCadence::All => f.write_str("all"),
            EvalCadence::Paper => f.write_str("paper"),
            EvalCadence::List(v) => {
                let parts: Vec<String> = v.iter().map(|i| i.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl Serialize for EvalCadence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EvalCadence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_task, SynthKind};
    use crate::model::build_small_mlp;

    fn tiny() -> (TaskData, TrainRunConfig) {
        let task = synth_task(SynthKind::Blobs, 10, 3, 5).unwrap();
        let cfg = TrainRunConfig {
            model: build_small_mlp([1, 12, 12], &[8], 3).unwrap(),
            optimizer: OptimizerConfig {
                lr: 0.05,
                ..OptimizerConfig::sgd()
            },
            schedule: LrSchedule::constant(),
            epochs: 2,
            batch_size: 8,
            seed: 1,
            late_reset: LateReset::Steps(0),
        };
        (task, cfg)
    }

    #[test]
    fn snapshot_at_zero_is_init() {
        let (task, cfg) = tiny();
        let init: ParamStore<f64> = initialize(&cfg.model, 3).unwrap();
        let out = train(&cfg, &task, &init, &Mask::dense(&init), 0, false).unwrap();
        assert_eq!(out.snapshot.unwrap(), init);
        assert_eq!(out.steps, 2 * 3);
    }

    #[test]
    fn snapshot_at_end_is_final() {
        let (task, mut cfg) = tiny();
        cfg.late_reset = LateReset::Epochs(2);
        let init: ParamStore<f64> = initialize(&cfg.model, 3).unwrap();
        let out = train(&cfg, &task, &init, &Mask::dense(&init), 0, false).unwrap();
        assert_eq!(out.snapshot.unwrap(), out.params);
        cfg.late_reset = LateReset::Epochs(3);
        assert!(train(&cfg, &task, &init, &Mask::dense(&init), 0, false).is_err());
    }

    #[test]
    fn nan_loss_aborts() {
        let (task, cfg) = tiny();
        let mut init: ParamStore<f64> = initialize(&cfg.model, 3).unwrap();
        init.tensor_mut("classifier.bias").unwrap().data_mut()[0] = f64::NAN;
        let err = train(&cfg, &task, &init, &Mask::dense(&init), 0, false).unwrap_err();
        assert!(matches!(err, PipelineError::NonFiniteLoss { epoch: 0, step: 0, .. }));
    }

    #[test]
    fn cadence() {
        assert_eq!(EvalCadence::Paper.select(15), vec![1, 2, 3, 4, 5, 6, 9, 12, 15]);
        assert_eq!("2,4".parse::<EvalCadence>().unwrap().select(5), vec![2, 4]);
        assert!("0".parse::<EvalCadence>().is_err());
        assert_eq!("paper".parse::<EvalCadence>().unwrap(), EvalCadence::Paper);
    }

    #[test]
    fn random_ticket_keeps_fraction() {
        let (task, cfg) = tiny();
        let gen = GenerationConfig {
            train: cfg,
            iterations: 2,
            rate: 0.2,
            init_seed: 9,
            scope: PruneScope::Global,
            prune_biases: false,
        };
        let (tickets, _) = generate_tickets::<f64>(&gen, &task).unwrap();
        let t = &tickets[1];
        for mode in [PermuteMode::Global, PermuteMode::Local, PermuteMode::Preserved] {
            let r = make_random_ticket(t, 77, mode).unwrap();
            assert_eq!(r.mask.total_ones(), t.mask.total_ones());
            r.validate().unwrap();
        }
        let p = make_random_ticket(t, 77, PermuteMode::Preserved).unwrap();
        assert_eq!(p.mask, t.mask);
        assert_eq!(p.snapshot, initialize(&t.spec, 77).unwrap());
    }
}
