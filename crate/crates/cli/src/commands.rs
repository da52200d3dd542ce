use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use ticketforge::pipeline::{EvalCadence, PipelineError, TicketGenerator, TrainRunConfig};
use ticketforge::pruning::{permute_mask, Mask, PermuteMode};
use ticketforge::reporting::{
    aggregate_curves, emit_csv, emit_plotdata, ratio_report, read_records_csv, write_records_csv, CellFailure,
    ExperimentResult, RunRecord,
};
use ticketforge::ticket::{load_checkpoint, load_ticket, save_checkpoint, save_ticket, Ticket, TicketError};
use ticketforge::transfer::{run_cell, Condition, Target};
use ticketforge::Scalar;

use crate::config::{HarnessConfig, Precision};
use crate::manifest::{completed_runs, Entry, Manifest};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.ltck";
pub const GENERATION_CSV: &str = "generation.csv";
pub const RECORDS_CSV: &str = "records.csv";
pub const FAILURES_CSV: &str = "failures.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const PLOTDATA: &str = "curves.dat";
pub const RATIOS_CSV: &str = "ratios.csv";
/// Condition label for a ticket evaluated on the task it was found on.
pub const WINNING: &str = "winning_ticket";

pub fn ticket_file(iteration: usize) -> String {
    format!("ticket_iter{iteration:02}.ltkt")
}

/// Overrides shared by `generate` and `transfer`.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    pub jobs: usize,
    pub conditions: Option<Vec<String>>,
    pub eval_cadence: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub tickets_written: usize,
    pub runs_executed: usize,
    pub runs_skipped: usize,
    pub failures: usize,
    pub records: usize,
}

fn pipeline_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::NonFiniteLoss { .. } => CliError::NonFinite(e.to_string()),
        PipelineError::Config(m) => CliError::Config(m),
        e @ PipelineError::DataMismatch { .. } => CliError::Data(e.to_string()),
        other => CliError::Other(other.into()),
    }
}

fn ticket_err(path: &Path) -> impl FnOnce(TicketError) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn random_condition(mode: PermuteMode) -> Condition {
    match mode {
        PermuteMode::Global => Condition::RandomGlobal,
        PermuteMode::Local => Condition::RandomLocal,
        PermuteMode::Preserved => Condition::RandomPreserved,
    }
}

pub fn cmd_generate(cfg: &HarnessConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    match cfg.precision {
        Precision::F32 => generate::<f32>(cfg, opts),
        Precision::F64 => generate::<f64>(cfg, opts),
    }
}

pub fn cmd_transfer(cfg: &HarnessConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    match cfg.precision {
        Precision::F32 => transfer::<f32>(cfg, opts),
        Precision::F64 => transfer::<f64>(cfg, opts),
    }
}

fn generate<T: Scalar>(cfg: &HarnessConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let seeds = cfg.seeds(opts.seeds.as_deref())?;
    let cadence = cfg.eval_cadence(opts.eval_cadence.as_deref())?;
    let conditions = cfg.conditions(
        opts.conditions.as_deref(),
        &[Condition::Transferred, random_condition(cfg.pruning.mask_mode)],
    )?;
    if conditions.contains(&Condition::SameDatasetTicket) {
        return Err(CliError::Config(
            "same_dataset_ticket only applies to `transfer`".into(),
        ));
    }
    let task = cfg.load_task()?;
    let spec = cfg.model_spec(&task)?;
    let gen = cfg.generation_config(cfg.train_config(spec)?, &seeds)?;
    gen.validate(task.train.len()).map_err(pipeline_err)?;

    let dir = cfg.experiment_dir();
    let manifest = Manifest::open(&dir)?;
    let entries = manifest.start(
        "generate",
        json!({ "generation": gen, "dataset": task.id() }),
    )?;
    let done = entries
        .iter()
        .filter_map(|e| match e {
            Entry::Iteration { iteration, .. } => Some(*iteration),
            _ => None,
        })
        .max()
        .unwrap_or(0);

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut generator = if done == 0 && !ckpt_path.exists() {
        TicketGenerator::<T>::new(gen.clone(), &task).map_err(pipeline_err)?
    } else {
        let last: Ticket<T> = load_checkpoint(&ckpt_path).map_err(ticket_err(&ckpt_path))?;
        let at = last.meta.pruning_iteration;
        // The checkpoint is written before the manifest line, so it may lead by one.
        if at == done + 1 && dir.join(ticket_file(at)).exists() {
            log::warn!("recovering iteration {at} from checkpoint");
            manifest.append(&Entry::Iteration {
                iteration: at,
                ticket: ticket_file(at),
                record: None,
            })?;
        } else if at != done {
            return Err(CliError::Data(format!(
                "{} holds iteration {at}, manifest records {done}",
                ckpt_path.display()
            )));
        }
        log::info!("resuming after iteration {at}");
        TicketGenerator::resume(gen.clone(), &task, last).map_err(pipeline_err)?
    };

    let mut summary = RunSummary {
        dir: dir.clone(),
        ..Default::default()
    };
    while !generator.is_done() {
        let (ticket, record) = generator.step().map_err(pipeline_err)?;
        let n = record.iteration;
        let path = dir.join(ticket_file(n));
        save_ticket(&ticket, &path).map_err(ticket_err(&path))?;
        save_checkpoint(&ticket, &ckpt_path).map_err(ticket_err(&ckpt_path))?;
        manifest.append(&Entry::Iteration {
            iteration: n,
            ticket: ticket_file(n),
            record: Some(record),
        })?;
        summary.tickets_written += 1;
    }
    write_generation_csv(&dir, &manifest.read()?)?;

    let Some(cadence) = cadence else {
        return Ok(summary);
    };
    let iterations = cadence.select(gen.iterations);
    let tickets = load_tickets::<T>(&dir, &iterations)?;
    let target = Target {
        config: TrainRunConfig {
            seed: 0,
            ..gen.train.clone()
        },
        task: &task,
    };
    let label = |c: Condition| match c {
        Condition::Transferred => WINNING.to_string(),
        c => c.as_str().to_string(),
    };
    run_grid(
        &manifest,
        &tickets,
        &BTreeMap::new(),
        &target,
        &seeds,
        &conditions,
        opts.jobs,
        &label,
        &mut summary,
    )?;
    finish(&dir, &manifest, &mut summary)
}

fn transfer<T: Scalar>(cfg: &HarnessConfig, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let section = cfg
        .transfer
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [transfer] section".into()))?;
    let seeds = cfg.seeds(opts.seeds.as_deref())?;
    let conditions = cfg.conditions(
        opts.conditions.as_deref(),
        &[Condition::Transferred, random_condition(cfg.pruning.mask_mode)],
    )?;
    let iterations = match &section.iterations {
        Some(v) => v.clone(),
        None => cfg
            .eval_cadence(opts.eval_cadence.as_deref())?
            .unwrap_or(EvalCadence::Paper)
            .select(cfg.pruning.iterations),
    };
    if iterations.is_empty() {
        return Err(CliError::Config("no pruning iterations selected".into()));
    }
    let same_dir = if conditions.contains(&Condition::SameDatasetTicket) {
        Some(section.same_dataset.as_ref().ok_or_else(|| {
            CliError::Config("same_dataset_ticket needs transfer.same_dataset".into())
        })?)
    } else {
        None
    };
    let mut missing: Vec<String> = Vec::new();
    for d in std::iter::once(&section.source).chain(same_dir) {
        for &i in &iterations {
            let p = d.join(ticket_file(i));
            if !p.exists() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "missing ticket files:\n  {}",
            missing.join("\n  ")
        )));
    }
    let tickets = load_tickets::<T>(&section.source, &iterations)?;
    let same = match same_dir {
        Some(d) => load_tickets::<T>(d, &iterations)?,
        None => BTreeMap::new(),
    };

    let task = cfg.load_task()?;
    let spec = cfg.model_spec(&task)?;
    let first = tickets.values().next().expect("nonempty");
    if first.spec.topology_hash() != spec.topology_hash() {
        return Err(CliError::Config(format!(
            "target model topology {} differs from the source tickets' {}",
            spec.topology_hash(),
            first.spec.topology_hash()
        )));
    }
    let train = cfg.train_config(spec)?;
    train.validate(task.train.len()).map_err(pipeline_err)?;

    let dir = cfg.experiment_dir();
    let manifest = Manifest::open(&dir)?;
    manifest.start(
        "transfer",
        json!({
            "train": train,
            "target": task.id(),
            "source": section.source.display().to_string(),
        }),
    )?;
    let target = Target {
        config: train,
        task: &task,
    };
    let mut summary = RunSummary {
        dir: dir.clone(),
        ..Default::default()
    };
    let label = |c: Condition| c.as_str().to_string();
    run_grid(
        &manifest,
        &tickets,
        &same,
        &target,
        &seeds,
        &conditions,
        opts.jobs,
        &label,
        &mut summary,
    )?;
    finish(&dir, &manifest, &mut summary)
}

fn load_tickets<T: Scalar>(dir: &Path, iterations: &[usize]) -> Result<BTreeMap<usize, Ticket<T>>, CliError> {
    let mut out = BTreeMap::new();
    for &i in iterations {
        let p = dir.join(ticket_file(i));
        if !p.exists() {
            return Err(CliError::Config(format!("missing ticket file {}", p.display())));
        }
        let t: Ticket<T> = load_ticket(&p).map_err(ticket_err(&p))?;
        if t.meta.pruning_iteration != i {
            return Err(CliError::Data(format!(
                "{} holds pruning iteration {}",
                p.display(),
                t.meta.pruning_iteration
            )));
        }
        out.insert(i, t);
    }
    Ok(out)
}

/// Runs every (iteration, seed, condition) cell not already in the manifest.
#[allow(clippy::too_many_arguments)]
fn run_grid<T: Scalar>(
    manifest: &Manifest,
    tickets: &BTreeMap<usize, Ticket<T>>,
    same: &BTreeMap<usize, Ticket<T>>,
    target: &Target<'_>,
    seeds: &[u64],
    conditions: &[Condition],
    jobs: usize,
    label: &(dyn Fn(Condition) -> String + Sync),
    summary: &mut RunSummary,
) -> Result<(), CliError> {
    let done: HashSet<(String, usize, u64)> = completed_runs(&manifest.read()?)
        .into_iter()
        .map(|r| (r.condition, r.pruning_iteration, r.seed))
        .collect();
    let mut cells = Vec::new();
    for &i in tickets.keys() {
        for &seed in seeds {
            for &c in conditions {
                if done.contains(&(label(c), i, seed)) {
                    summary.runs_skipped += 1;
                } else {
                    cells.push((i, seed, c));
                }
            }
        }
    }
    log::info!("{} runs to do, {} already done", cells.len(), summary.runs_skipped);
    let run = |&(i, seed, c): &(usize, u64, Condition)| -> Result<bool, CliError> {
        match run_cell(&tickets[&i], same.get(&i), target, seed, c) {
            Ok(mut record) => {
                record.condition = label(c);
                log::info!(
                    "{} iter {i} seed {seed}: test acc {:.4}",
                    record.condition,
                    record.test_accuracy
                );
                manifest.append(&Entry::Run { record })?;
                Ok(true)
            }
            Err(e) => {
                log::error!("{} iter {i} seed {seed} failed: {e}", label(c));
                let nan = matches!(e, PipelineError::NonFiniteLoss { .. });
                manifest.append(&Entry::Failure {
                    failure: CellFailure {
                        condition: label(c),
                        pruning_iteration: i,
                        seed,
                        error: e.to_string(),
                    },
                })?;
                if nan {
                    Err(CliError::NonFinite(e.to_string()))
                } else {
                    Ok(false)
                }
            }
        }
    };
    let outcomes: Vec<Result<bool, CliError>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Other(e.into()))?;
        pool.install(|| cells.par_iter().map(run).collect())
    } else {
        cells.iter().map(run).collect()
    };
    let mut nan = None;
    for o in outcomes {
        match o {
            Ok(true) => summary.runs_executed += 1,
            Ok(false) => summary.failures += 1,
            Err(e @ CliError::NonFinite(_)) => {
                summary.failures += 1;
                nan.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    match nan {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn write_generation_csv(dir: &Path, entries: &[Entry]) -> Result<(), CliError> {
    let path = dir.join(GENERATION_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Other(e.into()))?;
    for e in entries {
        if let Entry::Iteration { record: Some(r), .. } = e {
            w.serialize(r).map_err(|e| CliError::Other(e.into()))?;
        }
    }
    w.flush().map_err(|e| CliError::Other(e.into()))
}

/// Writes records, curves and plot data from everything the manifest holds.
fn finish(dir: &Path, manifest: &Manifest, summary: &mut RunSummary) -> Result<RunSummary, CliError> {
    let entries = manifest.read()?;
    let mut records = completed_runs(&entries);
    records.sort_by(|a, b| {
        (&a.condition, a.pruning_iteration, a.seed).cmp(&(&b.condition, b.pruning_iteration, b.seed))
    });
    let done: HashSet<(String, usize, u64)> = records
        .iter()
        .map(|r| (r.condition.clone(), r.pruning_iteration, r.seed))
        .collect();
    // Only failures that a later rerun did not make good.
    let failures: Vec<CellFailure> = entries
        .iter()
        .filter_map(|e| match e {
            Entry::Failure { failure } => Some(failure.clone()),
            _ => None,
        })
        .filter(|f| !done.contains(&(f.condition.clone(), f.pruning_iteration, f.seed)))
        .collect();
    summary.records = records.len();
    write_records_csv(&records, &dir.join(RECORDS_CSV)).map_err(|e| CliError::Other(e.into()))?;
    let fpath = dir.join(FAILURES_CSV);
    if failures.is_empty() {
        let _ = std::fs::remove_file(&fpath);
    } else {
        let mut w = csv::Writer::from_path(&fpath).map_err(|e| CliError::Other(e.into()))?;
        for f in &failures {
            w.serialize(f).map_err(|e| CliError::Other(e.into()))?;
        }
        w.flush().map_err(|e| CliError::Other(e.into()))?;
    }
    if !records.is_empty() {
        write_curves(dir, records)?;
    }
    if summary.failures > 0 {
        return Err(CliError::Incomplete(format!(
            "{} of {} runs failed; see {}",
            summary.failures,
            summary.failures + summary.runs_executed,
            fpath.display()
        )));
    }
    Ok(summary.clone())
}

fn write_curves(dir: &Path, records: Vec<RunRecord>) -> Result<usize, CliError> {
    let result = ExperimentResult::new(records);
    result.validate().map_err(|e| CliError::Data(e.to_string()))?;
    let curves = aggregate_curves(&result).map_err(|e| CliError::Data(e.to_string()))?;
    emit_csv(&curves, &dir.join(CURVES_CSV)).map_err(|e| CliError::Other(e.into()))?;
    emit_plotdata(&curves, &dir.join(PLOTDATA)).map_err(|e| CliError::Other(e.into()))?;
    Ok(curves.len())
}

/// Writes a permuted copy of a ticket. The default output sits next to the
/// input as `<stem>.<mode>-s<seed>.ltkt`.
pub fn cmd_permute(input: &Path, mode: PermuteMode, seed: u64, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let mut t: Ticket<f32> = load_ticket(input).map_err(ticket_err(input))?;
    t.mask = permute_mask(&t.mask, mode, seed);
    t.meta.remaining_fraction = t.mask.remaining_fraction();
    t.meta.extra.insert("permute_mode".into(), mode.to_string());
    t.meta.extra.insert("permute_seed".into(), seed.to_string());
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("ticket");
            input.with_file_name(format!("{stem}.{mode}-s{seed}.ltkt"))
        }
    };
    save_ticket(&t, &out).map_err(ticket_err(&out))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub records: usize,
    pub curves: usize,
    pub ratio_levels: usize,
}

/// Rebuilds curves from `records.csv` in `dir` (or in its immediate
/// subdirectories) and a per-layer ratio table from any tickets in `dir`.
pub fn cmd_report(dir: &Path) -> Result<ReportSummary, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    if dir.join(RECORDS_CSV).is_file() {
        files.push(dir.join(RECORDS_CSV));
    } else {
        let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| CliError::Other(e.into()))?
            .filter_map(|e| e.ok().map(|e| e.path().join(RECORDS_CSV)))
            .filter(|p| p.is_file())
            .collect();
        subs.sort();
        files = subs;
    }
    let mut records = Vec::new();
    for f in &files {
        records.extend(read_records_csv(f).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?);
    }
    let tickets = ticket_masks(dir)?;
    if records.is_empty() && tickets.is_empty() {
        return Err(CliError::Data(format!("no records or tickets in {}", dir.display())));
    }
    let curves = if records.is_empty() {
        0
    } else {
        write_curves(dir, records.clone())?
    };
    if !tickets.is_empty() {
        let table = ratio_report(&tickets).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(dir.join(RATIOS_CSV), table.to_csv()).map_err(|e| CliError::Other(e.into()))?;
    }
    Ok(ReportSummary {
        records: records.len(),
        curves,
        ratio_levels: tickets.len(),
    })
}

fn ticket_masks(dir: &Path) -> Result<Vec<Mask>, CliError> {
    let mut found: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Other(e.into()))?
        .filter_map(|e| {
            let p = e.ok()?.path();
            let name = p.file_name()?.to_str()?;
            let n = name.strip_prefix("ticket_iter")?.strip_suffix(".ltkt")?.parse().ok()?;
            Some((n, p))
        })
        .collect();
    found.sort();
    found
        .into_iter()
        .map(|(_, p)| load_ticket::<f32>(&p).map(|t| t.mask).map_err(ticket_err(&p)))
        .collect()
}
