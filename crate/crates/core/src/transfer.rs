//! Evaluating tickets in a target configuration against random controls.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TaskData;
use crate::model::{output_layer_names, reinitialize_output_layer};
use crate::pipeline::{make_random_ticket, train, LateReset, PipelineError, TrainRunConfig};
use crate::pruning::{Mask, PermuteMode};
use crate::reporting::{CellFailure, ExperimentResult, RunRecord};
use crate::scalar::Scalar;
use crate::ticket::Ticket;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Transferred,
    RandomGlobal,
    RandomLocal,
    RandomPreserved,
    SameDatasetTicket,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Transferred,
        Condition::RandomGlobal,
        Condition::RandomLocal,
        Condition::RandomPreserved,
        Condition::SameDatasetTicket,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Transferred => "transferred",
            Condition::RandomGlobal => "random_global",
            Condition::RandomLocal => "random_local",
            Condition::RandomPreserved => "random_preserved",
            Condition::SameDatasetTicket => "same_dataset_ticket",
        }
    }

    fn permute_mode(self) -> Option<PermuteMode> {
        match self {
            Condition::RandomGlobal => Some(PermuteMode::Global),
            Condition::RandomLocal => Some(PermuteMode::Local),
            Condition::RandomPreserved => Some(PermuteMode::Preserved),
            _ => None,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| PipelineError::Config(format!("unknown condition `{s}`")))
    }
}

/// Fits a ticket to a target with `num_classes` outputs. With a different
/// class count the classifier is redrawn from `seed` and left unpruned;
/// every other snapshot tensor is kept as is.
pub fn adapt_ticket<T: Scalar>(ticket: &Ticket<T>, num_classes: usize, seed: u64) -> Result<Ticket<T>, PipelineError> {
    if ticket.spec.num_classes == num_classes {
        return Ok(ticket.clone());
    }
    let (spec, snapshot) = reinitialize_output_layer(&ticket.spec, &ticket.snapshot, num_classes, seed)?;
    let mut mask = Mask::from_bits(
        ticket
            .mask
            .iter()
            .map(|(name, m)| {
                let shape = snapshot.tensor(name).map(|t| t.shape().to_vec()).unwrap_or_else(|_| m.shape().to_vec());
                (name.to_string(), shape, m.bits().to_vec())
            })
            .filter(|(name, _, _)| !output_layer_names().contains(name))
            .collect(),
    )?;
    for name in output_layer_names() {
        if ticket.mask.contains(&name) {
            let shape = snapshot.tensor(&name)?.shape().to_vec();
            mask.set_dense(&name, shape);
        }
    }
    let mut meta = ticket.meta.clone();
    meta.remaining_fraction = mask.remaining_fraction();
    meta.extra.insert("output_reinit_seed".into(), seed.to_string());
    Ok(Ticket {
        spec,
        snapshot,
        mask,
        meta,
    })
}

/// Target side of a transfer: how to train and on what.
pub struct Target<'a> {
    pub config: TrainRunConfig,
    pub task: &'a TaskData,
}

fn check_topology<T: Scalar>(ticket: &Ticket<T>, target: &TrainRunConfig) -> Result<(), PipelineError> {
    if ticket.spec.topology_hash() != target.model.topology_hash() {
        return Err(PipelineError::Config(format!(
            "ticket topology {} differs from target topology {}",
            ticket.meta.model_spec_hash,
            target.model.topology_hash()
        )));
    }
    Ok(())
}

/// Trains an already adapted ticket from its rewound snapshot for the full
/// target budget.
pub fn train_ticket<T: Scalar>(
    ticket: &Ticket<T>,
    target: &Target<'_>,
    condition: &str,
    seed: u64,
) -> Result<RunRecord, PipelineError> {
    let mut cfg = target.config.clone();
    cfg.model = ticket.spec.clone();
    cfg.late_reset = LateReset::Steps(0);
    cfg.seed = seed;
    let out = train(&cfg, target.task, &ticket.rewound()?, &ticket.mask, 0, false)?;
    Ok(RunRecord {
        condition: condition.to_string(),
        source_id: ticket.meta.source_dataset_id.clone(),
        target_id: target.task.id().to_string(),
        pruning_iteration: ticket.meta.pruning_iteration,
        remaining_fraction: ticket.meta.remaining_fraction,
        seed,
        test_accuracy: out.test_accuracy,
        train_accuracy: out.metrics.last().map_or(0.0, |m| m.train_accuracy),
        epochs: cfg.epochs,
        wall_time: out.wall_time,
    })
}

/// Seeds derived from a replicate seed.
fn output_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x6F75_7470_7574
}

fn random_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ 0x7261_6E64_6F6D
}

/// Adapts a source ticket to the target and trains it.
pub fn transfer_ticket<T: Scalar>(ticket: &Ticket<T>, target: &Target<'_>, seed: u64) -> Result<RunRecord, PipelineError> {
    check_topology(ticket, &target.config)?;
    let adapted = adapt_ticket(ticket, target.task.num_classes(), output_seed(seed))?;
    train_ticket(&adapted, target, Condition::Transferred.as_str(), seed)
}

/// One cell of the grid: a ticket level, a replicate seed and a condition.
pub fn run_cell<T: Scalar>(
    ticket: &Ticket<T>,
    same: Option<&Ticket<T>>,
    target: &Target<'_>,
    seed: u64,
    condition: Condition,
) -> Result<RunRecord, PipelineError> {
    check_topology(ticket, &target.config)?;
    let adapted = adapt_ticket(ticket, target.task.num_classes(), output_seed(seed))?;
    let run = match condition {
        Condition::Transferred => adapted,
        Condition::SameDatasetTicket => {
            let t = same.ok_or_else(|| {
                PipelineError::Config(format!(
                    "no same-dataset ticket for iteration {}",
                    ticket.meta.pruning_iteration
                ))
            })?;
            check_topology(t, &target.config)?;
            let mut t = adapt_ticket(t, target.task.num_classes(), output_seed(seed))?;
            t.meta.pruning_iteration = ticket.meta.pruning_iteration;
            t
        }
        c => {
            let mode = c.permute_mode().expect("random condition");
            make_random_ticket(&adapted, random_seed(seed), mode)?
        }
    };
    let mut record = train_ticket(&run, target, condition.as_str(), seed)?;
    record.source_id = ticket.meta.source_dataset_id.clone();
    Ok(record)
}

/// A full transfer experiment: every ticket level times every seed times
/// every condition. All conditions of one (level, seed) cell share the
/// target config, epoch budget and data-ordering seed.
pub struct TransferGrid<'a, T> {
    pub tickets: &'a [Ticket<T>],
    /// Tickets generated on the target itself, matched by pruning iteration.
    pub same_dataset: Option<&'a [Ticket<T>]>,
    pub target: Target<'a>,
    pub seeds: Vec<u64>,
    pub conditions: Vec<Condition>,
}

impl<T: Scalar> TransferGrid<'_, T> {
    pub fn cells(&self) -> Vec<(usize, u64, Condition)> {
        let mut out = Vec::new();
        for (i, _) in self.tickets.iter().enumerate() {
            for &seed in &self.seeds {
                for &c in &self.conditions {
                    out.push((i, seed, c));
                }
            }
        }
        out
    }

    fn same_for(&self, iteration: usize) -> Option<&Ticket<T>> {
        self.same_dataset
            .and_then(|s| s.iter().find(|t| t.meta.pruning_iteration == iteration))
    }
}

/// Runs every cell, on `jobs` worker threads when `jobs > 1`. Failed cells
/// are listed in `failures` rather than dropped.
pub fn run_transfer_curve<T: Scalar>(grid: &TransferGrid<'_, T>, jobs: usize) -> ExperimentResult {
    let cells = grid.cells();
    let run = |&(i, seed, c): &(usize, u64, Condition)| {
        let t = &grid.tickets[i];
        (
            (i, seed, c),
            run_cell(t, grid.same_for(t.meta.pruning_iteration), &grid.target, seed, c),
        )
    };
    let outcomes: Vec<_> = if jobs > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| cells.par_iter().map(run).collect()),
            Err(_) => cells.iter().map(run).collect(),
        }
    } else {
        cells.iter().map(run).collect()
    };
    let mut result = ExperimentResult::default();
    for ((i, seed, c), outcome) in outcomes {
        match outcome {
            Ok(r) => result.records.push(r),
            Err(e) => result.failures.push(CellFailure {
                condition: c.as_str().to_string(),
                pruning_iteration: grid.tickets[i].meta.pruning_iteration,
                seed,
                error: e.to_string(),
            }),
        }
    }
    result
}
