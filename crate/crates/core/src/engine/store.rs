//! Single-file persistence for the engine: an optional snapshot line
//! followed by an append-only log of events, one JSON object per line.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{EngineEvent, Incident, MessageRecord};
use crate::ids::IncidentId;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt store {path} at line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Snapshot {
    pub incidents: Vec<Incident>,
    pub messages: Vec<MessageRecord>,
    pub lane_seqs: Vec<(IncidentId, String, u64)>,
    pub next_incident: u64,
    pub next_message: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub(crate) enum Record {
    Snapshot(Snapshot),
    Event(EngineEvent),
}

pub(crate) struct Store {
    path: PathBuf,
    file: File,
}

impl Store {
    /// Open (creating if needed) and read back every record.
    pub fn open(path: &Path) -> Result<(Self, Vec<Record>), StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut records = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            let lines: Vec<String> = reader.lines().collect::<Result<_, _>>().map_err(io_err)?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Record>(line) {
                    Ok(r) => records.push(r),
                    // a torn final line is what an interrupted append leaves behind
                    Err(e) if i + 1 == last => {
                        warn!(path = %path.display(), error = %e, "dropping torn final store record");
                    }
                    Err(e) => {
                        return Err(StoreError::Corrupt {
                            path: path.to_path_buf(),
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            records,
        ))
    }

    pub fn append(&mut self, event: &EngineEvent) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(&Record::Event(event.clone())).expect("events serialize");
        line.push(b'\n');
        self.file.write_all(&line).map_err(|source| StoreError::Io {
            path: self.path.clone(),
            source,
        })
    }

    /// Replace the whole file with a single snapshot record.
    pub fn compact(&mut self, snapshot: Snapshot) -> Result<(), StoreError> {
        let io_err = |source| StoreError::Io {
            path: self.path.clone(),
            source,
        };
        let tmp = self.path.with_extension("compact.tmp");
        let mut line = serde_json::to_vec(&Record::Snapshot(snapshot)).expect("snapshot serializes");
        line.push(b'\n');
        {
            let mut f = File::create(&tmp).map_err(io_err)?;
            f.write_all(&line).map_err(io_err)?;
            f.sync_all().map_err(io_err)?;
        }
        fs::rename(&tmp, &self.path).map_err(io_err)?;
        self.file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(io_err)?;
        Ok(())
    }
}
