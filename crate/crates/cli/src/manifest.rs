//! Append-only JSON-lines log of completed work in an experiment directory.
//!
//! Every append and every read holds an OS file lock, so concurrent workers
//! (threads or processes) never interleave partial lines.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ticketforge::pipeline::IterationRecord;
use ticketforge::reporting::{CellFailure, RunRecord};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Entry {
    /// First line of a directory; later runs must present the same config.
    Started { command: String, config: serde_json::Value },
    Iteration {
        iteration: usize,
        ticket: String,
        /// Absent when the iteration was recovered from a checkpoint.
        record: Option<IterationRecord>,
    },
    Run { record: RunRecord },
    Failure { failure: CellFailure },
}

pub struct Manifest {
    path: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Other(anyhow::anyhow!("{}: {e}", path.display()))
}

impl Manifest {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        Ok(Manifest {
            path: dir.join(MANIFEST_FILE),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &Entry) -> Result<(), CliError> {
        let mut line = serde_json::to_string(entry).map_err(|e| CliError::Other(e.into()))?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(io(&self.path))?;
        f.lock().map_err(io(&self.path))?;
        f.write_all(line.as_bytes()).map_err(io(&self.path))?;
        f.sync_data().map_err(io(&self.path))?;
        f.unlock().map_err(io(&self.path))
    }

    /// All entries in order. A torn final line (from a killed writer) is
    /// skipped with a warning; a bad line anywhere else is an error.
    pub fn read(&self) -> Result<Vec<Entry>, CliError> {
        let f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io(&self.path)(e)),
        };
        f.lock_shared().map_err(io(&self.path))?;
        let lines: Vec<String> = BufReader::new(&f)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(io(&self.path))?;
        f.unlock().map_err(io(&self.path))?;
        let mut out = Vec::with_capacity(lines.len());
        let n = lines.len();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(e) => out.push(e),
                Err(_) if i + 1 == n => log::warn!("{}: ignoring torn last line", self.path.display()),
                Err(e) => {
                    return Err(CliError::Data(format!("{} line {}: {e}", self.path.display(), i + 1)));
                }
            }
        }
        Ok(out)
    }

    /// Records the run config, or checks it against the one already recorded.
    pub fn start(&self, command: &str, config: serde_json::Value) -> Result<Vec<Entry>, CliError> {
        let entries = self.read()?;
        match entries.iter().find_map(|e| match e {
            Entry::Started { command: c, config } if c == command => Some(config),
            _ => None,
        }) {
            Some(old) if *old != config => Err(CliError::Config(format!(
                "{} already holds a `{command}` run with a different configuration",
                self.path.parent().unwrap_or(Path::new(".")).display()
            ))),
            Some(_) => Ok(entries),
            None => {
                self.append(&Entry::Started {
                    command: command.to_string(),
                    config,
                })?;
                Ok(entries)
            }
        }
    }
}

pub fn completed_runs(entries: &[Entry]) -> Vec<RunRecord> {
    entries
        .iter()
        .filter_map(|e| match e {
            Entry::Run { record } => Some(record.clone()),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_read_round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::open(dir.path()).unwrap();
        let e = Entry::Iteration {
            iteration: 1,
            ticket: "ticket_iter01.ltkt".into(),
            record: None,
        };
        m.append(&e).unwrap();
        let mut f = OpenOptions::new().append(true).open(m.path()).unwrap();
        f.write_all(b"{\"event\":\"itera").unwrap();
        assert_eq!(m.read().unwrap(), vec![e]);
    }

    #[test]
    fn config_change_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::open(dir.path()).unwrap();
        m.start("generate", serde_json::json!({"a": 1})).unwrap();
        m.start("generate", serde_json::json!({"a": 1})).unwrap();
        assert!(matches!(
            m.start("generate", serde_json::json!({"a": 2})),
            Err(CliError::Config(_))
        ));
    }
}
