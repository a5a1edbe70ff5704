//! On-disk layout under the data directory:
//!
//! ```text
//! sessions/<id>/snapshot.json   full session, rewritten atomically
//! sessions/<id>/events.jsonl    one event per line, append-only
//! artifacts/<id>/artifact.json
//! artifacts/<id>/audio.wav
//! ```
//!
//! A session is recovered from its snapshot plus the events logged after it.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::session::{Event, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedArtifact {
    pub id: String,
    pub session_id: String,
    pub target_id: String,
    /// Committed iterations at save time.
    pub iteration: usize,
    pub epoch: u32,
    pub z: Vec<f64>,
    pub label: usize,
    pub n_freq: usize,
    pub n_time: usize,
    /// Normalized generator output, row-major.
    pub magnitudes: Vec<f64>,
    pub vocoder_iterations: usize,
    pub checkpoint_hash: String,
    pub created_ms: u64,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(ServiceError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(ServiceError::io(path))
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["sessions", "artifacts"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(ServiceError::io(&dir))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    fn artifact_dir(&self, id: &str) -> PathBuf {
        self.root.join("artifacts").join(id)
    }

    pub fn write_snapshot(&self, s: &Session) -> Result<()> {
        let dir = self.session_dir(&s.id);
        fs::create_dir_all(&dir).map_err(ServiceError::io(&dir))?;
        write_atomic(&dir.join("snapshot.json"), &serde_json::to_vec(s)?)
    }

    pub fn append_event(&self, id: &str, e: &Event) -> Result<()> {
        let path = self.session_dir(id).join("events.jsonl");
        let mut line = serde_json::to_vec(e)?;
        line.push(b'\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(ServiceError::io(&path))?;
        f.write_all(&line).map_err(ServiceError::io(&path))?;
        f.sync_data().map_err(ServiceError::io(&path))
    }

    pub fn session_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("sessions");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(ServiceError::io(&dir))? {
            let entry = entry.map_err(ServiceError::io(&dir))?;
            if entry.path().join("snapshot.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Snapshot and the logged events not yet folded into it. A torn final
    /// line (crash mid-append) is dropped; damage elsewhere is an error.
    pub fn read_session(&self, id: &str) -> Result<(Session, Vec<Event>)> {
        let dir = self.session_dir(id);
        let snap_path = dir.join("snapshot.json");
        let bytes = fs::read(&snap_path).map_err(ServiceError::io(&snap_path))?;
        let snapshot: Session =
            serde_json::from_slice(&bytes).map_err(|e| ServiceError::Corrupt(format!("{}: {e}", snap_path.display())))?;
        let log_path = dir.join("events.jsonl");
        let mut events = Vec::new();
        if log_path.is_file() {
            let lines: Vec<String> = BufReader::new(File::open(&log_path).map_err(ServiceError::io(&log_path))?)
                .lines()
                .collect::<std::io::Result<_>>()
                .map_err(ServiceError::io(&log_path))?;
            let n = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Event>(line) {
                    Ok(e) => events.push(e),
                    Err(_) if i + 1 == n => break,
                    Err(e) => return Err(ServiceError::Corrupt(format!("{} line {}: {e}", log_path.display(), i + 1))),
                }
            }
        }
        let done = snapshot.events.len();
        for (i, e) in events.iter().enumerate() {
            if e.seq != i {
                return Err(ServiceError::Corrupt(format!("{}: event {i} has seq {}", log_path.display(), e.seq)));
            }
        }
        if events.len() < done {
            return Err(ServiceError::Corrupt(format!("{}: log is shorter than the snapshot", log_path.display())));
        }
        if events[..done] != snapshot.events[..] {
            return Err(ServiceError::Corrupt(format!("{}: log disagrees with the snapshot", log_path.display())));
        }
        Ok((snapshot, events.split_off(done)))
    }

    pub fn write_artifact(&self, a: &SavedArtifact, wav: &[u8]) -> Result<()> {
        let dir = self.artifact_dir(&a.id);
        fs::create_dir_all(&dir).map_err(ServiceError::io(&dir))?;
        write_atomic(&dir.join("audio.wav"), wav)?;
        write_atomic(&dir.join("artifact.json"), &serde_json::to_vec_pretty(a)?)
    }

    fn artifact_file(&self, id: &str, name: &str) -> Result<PathBuf> {
        let path = self.artifact_dir(id).join(name);
        // Ids are uuids; anything else could escape the directory.
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') || !path.is_file() {
            return Err(ServiceError::NotFound { kind: "artifact", id: id.into() });
        }
        Ok(path)
    }

    pub fn read_artifact(&self, id: &str) -> Result<SavedArtifact> {
        let path = self.artifact_file(id, "artifact.json")?;
        let bytes = fs::read(&path).map_err(ServiceError::io(&path))?;
        serde_json::from_slice(&bytes).map_err(|e| ServiceError::Corrupt(format!("{}: {e}", path.display())))
    }

    pub fn read_artifact_wav(&self, id: &str) -> Result<Vec<u8>> {
        let path = self.artifact_file(id, "audio.wav")?;
        fs::read(&path).map_err(ServiceError::io(&path))
    }
}
