//! Plain-directory run store. Every pipeline run gets
//! `runs/<run_id>/{manifest.json, records/*.json, stage1_report.json,
//! synthesis_nodes.json, stage3_outcomes.json, graph.json, eval/*}`.
//! Artifacts are write-once and written atomically (temp file + rename), so
//! a run directory alone re-derives its graph and reports offline.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ReplayBackend, RunRecord};
use crate::timefmt::{utc_now_compact, utc_now_rfc3339};

/// Identity and inputs of one pipeline run. The manifest carries the
/// wall-clock invocation provenance; derived artifacts carry only
/// deterministic fingerprints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub corpus_fingerprint: String,
    pub reading_fingerprint: String,
    /// stage name -> prompt template content hash
    pub template_hashes: std::collections::BTreeMap<String, String>,
    pub scheme_id: String,
    pub model_ids: Vec<String>,
    pub backend_mode: String,
    pub tool_version: String,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error at {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("run '{run_id}' not found in store")]
    MissingRun { run_id: String },
    #[error("run '{run_id}' contains no model records")]
    EmptyRun { run_id: String },
    #[error("refusing to overwrite existing artifact {path} with different content")]
    Immutable { path: String },
    #[error("could not allocate a unique run id after {attempts} attempts")]
    RunIdExhausted { attempts: u32 },
    #[error("failed to parse {path}: {detail}")]
    Parse { path: String, detail: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::Io { path: path.display().to_string(), detail: e.to_string() }
}

/// Kinds of artifacts a run can record, mapped onto the fixed layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind<'a> {
    ModelRecord { fingerprint: &'a str },
    StageReport { stage: u8 },
    Graph,
    EvalReport { name: &'a str },
}

impl RecordKind<'_> {
    fn relative_path(&self) -> PathBuf {
        match self {
            RecordKind::ModelRecord { fingerprint } => {
                PathBuf::from("records").join(format!("{fingerprint}.json"))
            }
            RecordKind::StageReport { stage: 1 } => PathBuf::from("stage1_report.json"),
            RecordKind::StageReport { stage: 2 } => PathBuf::from("synthesis_nodes.json"),
            RecordKind::StageReport { stage: _ } => PathBuf::from("stage3_outcomes.json"),
            RecordKind::Graph => PathBuf::from("graph.json"),
            RecordKind::EvalReport { name } => PathBuf::from("eval").join(name),
        }
    }
}

/// Root of a run store; runs live under `<root>/runs/`.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunStore { root: root.into() }
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.runs_dir().join(run_id)
    }

    /// Create a run directory and write its manifest first, atomically.
    /// The run id is the manifest's `run_id` if non-empty (replay
    /// copies, tests), otherwise a fresh `<utc compact>-<hex6>` id; on
    /// collision a new suffix is drawn.
    pub fn open_run(&self, mut manifest: RunManifest) -> Result<RunHandle, StoreError> {
        let runs_dir = self.runs_dir();
        std::fs::create_dir_all(&runs_dir).map_err(|e| io_err(&runs_dir, e))?;
        let explicit = !manifest.run_id.is_empty();
        let mut attempts = 0u32;
        let dir = loop {
            attempts += 1;
            if attempts > 16 {
                return Err(StoreError::RunIdExhausted { attempts });
            }
            let candidate = if explicit {
                manifest.run_id.clone()
            } else {
                format!("{}-{:06x}", utc_now_compact(), rand::thread_rng().gen_range(0..0xff_ffffu32))
            };
            let dir = runs_dir.join(&candidate);
            match std::fs::create_dir(&dir) {
                Ok(()) => {
                    manifest.run_id = candidate;
                    break dir;
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && !explicit => continue,
                Err(e) => return Err(io_err(&dir, e)),
            }
        };
        if manifest.created_at.is_empty() {
            manifest.created_at = utc_now_rfc3339();
        }
        let handle = RunHandle { dir: dir.clone(), run_id: manifest.run_id.clone() };
        for sub in ["records", "eval"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serialization cannot fail");
        bytes.push(b'\n');
        write_atomic(&dir.join("manifest.json"), &bytes)?;
        Ok(handle)
    }

    /// Handle onto an existing run directory (for eval artifacts).
    pub fn attach(&self, run_id: &str) -> Result<RunHandle, StoreError> {
        let dir = self.run_dir(run_id);
        if !dir.join("manifest.json").exists() {
            return Err(StoreError::MissingRun { run_id: run_id.to_string() });
        }
        Ok(RunHandle { dir, run_id: run_id.to_string() })
    }

    pub fn read_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.run_dir(run_id).join("manifest.json");
        if !path.exists() {
            return Err(StoreError::MissingRun { run_id: run_id.to_string() });
        }
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| StoreError::Parse { path: path.display().to_string(), detail: e.to_string() })
    }

    pub fn read_artifact(&self, run_id: &str, kind: RecordKind<'_>) -> Result<Vec<u8>, StoreError> {
        let path = self.run_dir(run_id).join(kind.relative_path());
        if !path.exists() {
            return Err(StoreError::MissingRun { run_id: format!("{run_id} ({})", path.display()) });
        }
        std::fs::read(&path).map_err(|e| io_err(&path, e))
    }

    /// All run ids in the store, sorted.
    pub fn list_runs(&self) -> Result<Vec<RunManifest>, StoreError> {
        let runs_dir = self.runs_dir();
        if !runs_dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = std::fs::read_dir(&runs_dir)
            .map_err(|e| io_err(&runs_dir, e))?
            .filter_map(|entry| entry.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        ids.iter().map(|id| self.read_manifest(id)).collect()
    }

    /// Build a replay backend from a recorded run's model records.
    pub fn load_for_replay(&self, run_id: &str) -> Result<ReplayBackend, StoreError> {
        let records_dir = self.run_dir(run_id).join("records");
        if !self.run_dir(run_id).exists() {
            return Err(StoreError::MissingRun { run_id: run_id.to_string() });
        }
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&records_dir)
            .map_err(|e| io_err(&records_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(StoreError::EmptyRun { run_id: run_id.to_string() });
        }
        let mut records = Vec::with_capacity(paths.len());
        for path in paths {
            let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            let record: RunRecord = serde_json::from_slice(&bytes)
                .map_err(|e| StoreError::Parse { path: path.display().to_string(), detail: e.to_string() })?;
            records.push(record);
        }
        Ok(ReplayBackend::from_records(records))
    }
}

/// Writer for one open run directory.
#[derive(Debug, Clone)]
pub struct RunHandle {
    dir: PathBuf,
    run_id: String,
}

impl RunHandle {
    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Store an artifact. Write-once per key: re-recording identical bytes
    /// is a no-op, differing bytes are an immutability error.
    pub fn record(&self, kind: RecordKind<'_>, payload: &[u8]) -> Result<PathBuf, StoreError> {
        let path = self.dir.join(kind.relative_path());
        if path.exists() {
            let existing = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            if existing == payload {
                return Ok(path);
            }
            return Err(StoreError::Immutable { path: path.display().to_string() });
        }
        write_atomic(&path, payload)?;
        Ok(path)
    }

    /// Serialize and store a model invocation record under its fingerprint.
    pub fn record_model_record(&self, record: &RunRecord) -> Result<PathBuf, StoreError> {
        let mut bytes = serde_json::to_vec_pretty(record).expect("record serialization cannot fail");
        bytes.push(b'\n');
        self.record(RecordKind::ModelRecord { fingerprint: &record.request_fingerprint }, &bytes)
    }
}

fn write_atomic(path: &Path, payload: &[u8]) -> Result<(), StoreError> {
    let parent = path.parent().expect("artifact paths always have a parent");
    let tmp = parent.join(format!(
        ".tmp-{:08x}-{}",
        rand::thread_rng().gen::<u32>(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    ));
    std::fs::write(&tmp, payload).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io_err(path, e)
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest {
            run_id: String::new(),
            created_at: String::new(),
            corpus_fingerprint: "c".to_string(),
            reading_fingerprint: "r".to_string(),
            template_hashes: Default::default(),
            scheme_id: "p3".to_string(),
            model_ids: vec!["stub-alpha".to_string()],
            backend_mode: "stub".to_string(),
            tool_version: "test".to_string(),
        }
    }

    #[test]
    fn open_run_writes_manifest_first() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path());
        let run = store.open_run(manifest()).unwrap();
        assert!(run.dir().join("manifest.json").exists());
        assert!(run.dir().join("records").is_dir());
        let read = store.read_manifest(run.run_id()).unwrap();
        assert_eq!(read.run_id, run.run_id());
        assert!(!read.created_at.is_empty());
    }

    #[test]
    fn concurrent_opens_get_distinct_ids() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path());
        let ids: Vec<String> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..4)
                .map(|_| {
                    let store = store.clone();
                    scope.spawn(move || store.open_run(manifest()).unwrap().run_id().to_string())
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let unique: std::collections::BTreeSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len());
    }

    #[test]
    fn record_is_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunStore::new(dir.path()).open_run(manifest()).unwrap();
        run.record(RecordKind::Graph, b"{}\n").unwrap();
        run.record(RecordKind::Graph, b"{}\n").unwrap(); // identical: no-op
        let err = run.record(RecordKind::Graph, b"{\"x\":1}\n").unwrap_err();
        assert!(matches!(err, StoreError::Immutable { .. }));
    }

    #[test]
    fn unwritable_root_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file_as_root = dir.path().join("not-a-dir");
        std::fs::write(&file_as_root, b"plain file").unwrap();
        let store = RunStore::new(&file_as_root);
        assert!(matches!(store.open_run(manifest()), Err(StoreError::Io { .. })));
    }

    #[test]
    fn replay_loading_requires_records() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::new(dir.path());
        assert!(matches!(store.load_for_replay("nope"), Err(StoreError::MissingRun { .. })));
        let run = store.open_run(manifest()).unwrap();
        assert!(matches!(
            store.load_for_replay(run.run_id()),
            Err(StoreError::EmptyRun { .. })
        ));
    }

    #[test]
    fn eval_reports_land_in_eval_dir() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunStore::new(dir.path()).open_run(manifest()).unwrap();
        let path = run.record(RecordKind::EvalReport { name: "agreement.json" }, b"{}\n").unwrap();
        assert!(path.ends_with("eval/agreement.json"));
        assert!(path.exists());
    }
}
