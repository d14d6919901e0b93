//! Append-only event log: line-delimited JSON plus an optional full-state
//! snapshot.
//!
//! Layout of a data directory:
//!
//! ```text
//! events.jsonl    one Event per line, offsets 1, 2, 3, ...
//! snapshot.json   {"offset": n, "state": {...}}, written via rename
//! ```
//!
//! A torn final line (no trailing newline, unparseable) is the signature of
//! a crash mid-append; it is dropped on open. Corruption anywhere else is an
//! error.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use promptloop_core::batch::{BatchPlan, GenerationOutput, JobState};
use promptloop_core::dataset::Dataset;
use promptloop_core::evaluation::{Assessment, Coverage, Evaluator, Scenario};
use promptloop_core::prompt::{PromptFile, Role};
use promptloop_core::sync::Committed;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StorageError {
    #[error("storage failure: {0}")]
    Io(String),
    #[error("corrupt event log at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("event offsets not gapless: expected {expected}, found {found}")]
    Gap { expected: u64, found: u64 },
}

fn io(e: std::io::Error) -> StorageError {
    StorageError::Io(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub offset: u64,
    pub timestamp: String,
    pub actor: String,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum EventBody {
    PromptCreated {
        doc_id: String,
        title: String,
    },
    PromptImported {
        doc_id: String,
        file: PromptFile,
    },
    BlockAdded {
        doc_id: String,
        block_id: String,
        role: Role,
    },
    BlockRoleSet {
        doc_id: String,
        block_id: String,
        role: Role,
    },
    BlockMoved {
        doc_id: String,
        block_id: String,
        position: usize,
    },
    SampleSet {
        doc_id: String,
        name: String,
        value: String,
    },
    VersionLabelSet {
        doc_id: String,
        label: String,
    },
    /// All revisions produced by one client edit.
    EditCommitted {
        doc_id: String,
        block_id: String,
        committed: Vec<Committed>,
    },
    DatasetImported {
        dataset: Dataset,
    },
    BatchPlanned {
        plan: BatchPlan,
    },
    BatchStateChanged {
        job_id: String,
        state: JobState,
        /// Present when the budget cap changes with the transition.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        budget_cap: Option<Option<u64>>,
    },
    OutputRecorded {
        job_id: String,
        output: GenerationOutput,
    },
    ScenarioCreated {
        scenario: Scenario,
    },
    ScenarioAssigned {
        scenario_id: String,
        evaluators: Vec<Evaluator>,
        coverage: Coverage,
    },
    AssessmentSubmitted {
        assessment: Assessment,
    },
    ScenarioClosed {
        scenario_id: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::PromptCreated { .. } => "prompt_created",
            EventBody::PromptImported { .. } => "prompt_imported",
            EventBody::BlockAdded { .. } => "block_added",
            EventBody::BlockRoleSet { .. } => "block_role_set",
            EventBody::BlockMoved { .. } => "block_moved",
            EventBody::SampleSet { .. } => "sample_set",
            EventBody::VersionLabelSet { .. } => "version_label_set",
            EventBody::EditCommitted { .. } => "edit_committed",
            EventBody::DatasetImported { .. } => "dataset_imported",
            EventBody::BatchPlanned { .. } => "batch_planned",
            EventBody::BatchStateChanged { .. } => "batch_state_changed",
            EventBody::OutputRecorded { .. } => "output_recorded",
            EventBody::ScenarioCreated { .. } => "scenario_created",
            EventBody::ScenarioAssigned { .. } => "scenario_assigned",
            EventBody::AssessmentSubmitted { .. } => "assessment_submitted",
            EventBody::ScenarioClosed { .. } => "scenario_closed",
        }
    }
}

/// Snapshot payload: the state serialized after applying `offset`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredSnapshot {
    pub offset: u64,
    pub state_json: String,
}

pub trait EventLog: Send {
    /// Durably appends `events` as one unit. On error nothing counts as
    /// written.
    fn append(&mut self, events: &[Event]) -> Result<(), StorageError>;
    /// Latest snapshot, if any, and every event after it.
    fn load(&mut self) -> Result<(Option<StoredSnapshot>, Vec<Event>), StorageError>;
    fn write_snapshot(&mut self, snapshot: &StoredSnapshot) -> Result<(), StorageError>;
}

fn check_gapless(prev: u64, events: &[Event]) -> Result<(), StorageError> {
    for (expected, e) in (prev + 1..).zip(events) {
        if e.offset != expected {
            return Err(StorageError::Gap {
                expected,
                found: e.offset,
            });
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct FileLog {
    dir: PathBuf,
    file: File,
    len: u64,
    head: u64,
    fsync: bool,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    offset: u64,
    state: Box<serde_json::value::RawValue>,
}

impl FileLog {
    pub const EVENTS: &'static str = "events.jsonl";
    pub const SNAPSHOT: &'static str = "snapshot.json";

    /// Opens or creates the log in `dir`. With `fsync`, every append is
    /// synced to disk before returning; otherwise it is flushed to the OS.
    pub fn open(dir: impl AsRef<Path>, fsync: bool) -> Result<Self, StorageError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io)?;
        let file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(dir.join(Self::EVENTS))
            .map_err(io)?;
        let len = file.metadata().map_err(io)?.len();
        Ok(FileLog {
            dir,
            file,
            len,
            head: 0,
            fsync,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn read_snapshot(&self) -> Result<Option<StoredSnapshot>, StorageError> {
        let path = self.dir.join(Self::SNAPSHOT);
        if !path.exists() {
            return Ok(None);
        }
        let raw = fs::read_to_string(&path).map_err(io)?;
        let snap: SnapshotFile = serde_json::from_str(&raw).map_err(|e| StorageError::Corrupt {
            line: 0,
            detail: format!("snapshot: {e}"),
        })?;
        Ok(Some(StoredSnapshot {
            offset: snap.offset,
            state_json: snap.state.get().to_string(),
        }))
    }
}

impl EventLog for FileLog {
    fn append(&mut self, events: &[Event]) -> Result<(), StorageError> {
        check_gapless(self.head, events)?;
        let mut buf = Vec::new();
        for e in events {
            serde_json::to_writer(&mut buf, e).map_err(|e| StorageError::Io(e.to_string()))?;
            buf.push(b'\n');
        }
        let result = self
            .file
            .write_all(&buf)
            .and_then(|_| self.file.flush())
            .and_then(|_| if self.fsync { self.file.sync_data() } else { Ok(()) });
        if let Err(e) = result {
            // Drop any partial write so later appends start on a clean line.
            let _ = self.file.set_len(self.len);
            return Err(io(e));
        }
        self.len += buf.len() as u64;
        self.head += events.len() as u64;
        Ok(())
    }

    fn load(&mut self) -> Result<(Option<StoredSnapshot>, Vec<Event>), StorageError> {
        let snapshot = self.read_snapshot()?;
        let after = snapshot.as_ref().map_or(0, |s| s.offset);
        self.file.seek(SeekFrom::Start(0)).map_err(io)?;
        let mut reader = BufReader::new(&self.file);
        let mut events = Vec::new();
        let mut good_len = 0u64;
        let mut line_no = 0;
        let mut head = 0;
        loop {
            let mut line = String::new();
            let n = reader.read_line(&mut line).map_err(io)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let complete = line.ends_with('\n');
            match serde_json::from_str::<Event>(line.trim_end()) {
                Ok(e) if complete => {
                    if e.offset != head + 1 {
                        return Err(StorageError::Gap {
                            expected: head + 1,
                            found: e.offset,
                        });
                    }
                    head = e.offset;
                    good_len += n as u64;
                    if e.offset > after {
                        events.push(e);
                    }
                }
                Err(_) | Ok(_) if !complete => {
                    tracing::warn!(line = line_no, "dropping torn final event line");
                    break;
                }
                Err(e) => {
                    return Err(StorageError::Corrupt {
                        line: line_no,
                        detail: e.to_string(),
                    })
                }
                Ok(_) => unreachable!("complete lines handled above"),
            }
        }
        if good_len < self.len {
            self.file.set_len(good_len).map_err(io)?;
            self.len = good_len;
        }
        if head < after {
            return Err(StorageError::Corrupt {
                line: line_no,
                detail: format!("snapshot at offset {after} is ahead of the log head {head}"),
            });
        }
        self.head = head;
        Ok((snapshot, events))
    }

    fn write_snapshot(&mut self, snapshot: &StoredSnapshot) -> Result<(), StorageError> {
        let tmp = self.dir.join("snapshot.json.tmp");
        let body = format!("{{\"offset\":{},\"state\":{}}}\n", snapshot.offset, snapshot.state_json);
        let mut f = File::create(&tmp).map_err(io)?;
        f.write_all(body.as_bytes()).map_err(io)?;
        if self.fsync {
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, self.dir.join(Self::SNAPSHOT)).map_err(io)
    }
}

/// Fault plan for [`MemoryLog`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Every append fails.
    Always,
    /// Appends fail once the log would pass `offset`.
    After(u64),
}

#[derive(Debug, Default)]
struct MemoryInner {
    events: Vec<Event>,
    snapshot: Option<StoredSnapshot>,
    fault: Fault,
}

/// In-memory log. Clones share storage, so a test can keep a handle,
/// inject faults and reopen a service over the same events.
#[derive(Debug, Clone, Default)]
pub struct MemoryLog {
    inner: Arc<Mutex<MemoryInner>>,
}

impl MemoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_fault(&self, fault: Fault) {
        self.inner.lock().expect("log poisoned").fault = fault;
    }

    pub fn events(&self) -> Vec<Event> {
        self.inner.lock().expect("log poisoned").events.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("log poisoned").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EventLog for MemoryLog {
    fn append(&mut self, events: &[Event]) -> Result<(), StorageError> {
        let mut g = self.inner.lock().expect("log poisoned");
        let head = g.events.last().map_or(0, |e| e.offset);
        check_gapless(head, events)?;
        let fails = match g.fault {
            Fault::None => false,
            Fault::Always => true,
            Fault::After(limit) => head + events.len() as u64 > limit,
        };
        if fails {
            return Err(StorageError::Io("injected fault".into()));
        }
        g.events.extend_from_slice(events);
        Ok(())
    }

    fn load(&mut self) -> Result<(Option<StoredSnapshot>, Vec<Event>), StorageError> {
        let g = self.inner.lock().expect("log poisoned");
        let after = g.snapshot.as_ref().map_or(0, |s| s.offset);
        Ok((
            g.snapshot.clone(),
            g.events.iter().filter(|e| e.offset > after).cloned().collect(),
        ))
    }

    fn write_snapshot(&mut self, snapshot: &StoredSnapshot) -> Result<(), StorageError> {
        self.inner.lock().expect("log poisoned").snapshot = Some(snapshot.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(offset: u64) -> Event {
        Event {
            offset,
            timestamp: "2026-01-01T00:00:00Z".into(),
            actor: "owner".into(),
            body: EventBody::ScenarioClosed {
                scenario_id: format!("sc-{offset}"),
            },
        }
    }

    #[test]
    fn event_wire_shape() {
        let v: serde_json::Value = serde_json::to_value(ev(1)).unwrap();
        assert_eq!(v["offset"], 1);
        assert_eq!(v["kind"], "scenario_closed");
        assert_eq!(v["body"]["scenario_id"], "sc-1");
        let back: Event = serde_json::from_value(v).unwrap();
        assert_eq!(back, ev(1));
    }

    #[test]
    fn file_log_round_trip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = FileLog::open(dir.path(), false).unwrap();
            log.load().unwrap();
            log.append(&[ev(1), ev(2)]).unwrap();
            log.append(&[ev(3)]).unwrap();
            assert!(matches!(log.append(&[ev(5)]), Err(StorageError::Gap { .. })));
        }
        let path = dir.path().join(FileLog::EVENTS);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"offset\":4,\"timest").unwrap();
        drop(f);

        let mut log = FileLog::open(dir.path(), false).unwrap();
        let (snap, events) = log.load().unwrap();
        assert!(snap.is_none());
        assert_eq!(events.iter().map(|e| e.offset).collect::<Vec<_>>(), vec![1, 2, 3]);
        log.append(&[ev(4)]).unwrap();
        let mut log = FileLog::open(dir.path(), false).unwrap();
        assert_eq!(log.load().unwrap().1.len(), 4);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(FileLog::EVENTS),
            format!("{}\nnot json\n{}\n", serde_json::to_string(&ev(1)).unwrap(), serde_json::to_string(&ev(2)).unwrap()),
        )
        .unwrap();
        let mut log = FileLog::open(dir.path(), false).unwrap();
        assert!(matches!(log.load(), Err(StorageError::Corrupt { line: 2, .. })));
    }

    #[test]
    fn snapshot_skips_covered_events() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = FileLog::open(dir.path(), true).unwrap();
        log.load().unwrap();
        log.append(&[ev(1), ev(2), ev(3)]).unwrap();
        log.write_snapshot(&StoredSnapshot {
            offset: 2,
            state_json: "{\"x\":1}".into(),
        })
        .unwrap();
        let mut log = FileLog::open(dir.path(), true).unwrap();
        let (snap, events) = log.load().unwrap();
        assert_eq!(snap.unwrap().state_json, "{\"x\":1}");
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].offset, 3);
    }

    #[test]
    fn memory_log_faults() {
        let mut log = MemoryLog::new();
        log.append(&[ev(1)]).unwrap();
        log.set_fault(Fault::After(2));
        log.append(&[ev(2)]).unwrap();
        assert!(log.append(&[ev(3)]).is_err());
        assert_eq!(log.len(), 2);
    }
}
