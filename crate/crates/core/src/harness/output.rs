use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::fsl::EpochLog;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "EVOFA_THREADS";

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}-{}",
        name.to_string_lossy(),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// An output directory that deletes everything it wrote unless committed.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            written: Vec::new(),
            committed: false,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        write_atomic(&path, bytes)?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Registers a file produced by other means for cleanup.
    pub fn track(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    /// Relative paths of everything written so far.
    pub fn written(&self) -> Vec<String> {
        self.written
            .iter()
            .map(|p| p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/"))
            .collect()
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

/// `v<crate version>` with the current commit appended when available.
pub fn version_string() -> String {
    let base = format!("v{}", env!("CARGO_PKG_VERSION"));
    let described = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("{base}-g{d}"),
        None => base,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            version: version_string(),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            outputs: Vec::new(),
        })
    }

    /// Records the outputs written so far and writes `run-manifest.json`.
    pub fn write(mut self, out: &mut OutputDir) -> Result<()> {
        self.outputs = out.written();
        let bytes = serde_json::to_vec_pretty(&self)?;
        out.write("run-manifest.json", &bytes)?;
        Ok(())
    }
}

/// Sizes the global worker pool from `EVOFA_THREADS`; returns the thread count in use.
pub fn configure_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // A pool built earlier in the process stays in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,mean_loss,val_accuracy\n");
    for e in log {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.mean_loss, e.val_accuracy);
    }
    s
}

/// Adapted embeddings of `pool` in pool order, one row per sample.
pub fn embeddings_csv(model: &Model, pool: &[&LabeledSample]) -> Result<String> {
    let emb = Model::apply_adapter(&model.phi, &model.embed(pool)?)?;
    let dim = model.config.embedding_dim;
    let mut s = String::from("subject,session,trial,time_index,label");
    for j in 1..=dim {
        let _ = write!(s, ",e{j}");
    }
    s.push('\n');
    for (i, sample) in pool.iter().enumerate() {
        let _ = write!(
            s,
            "{},{},{},{},{}",
            sample.subject_id, sample.session_id, sample.trial_id, sample.time_index, sample.label
        );
        for v in emb.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_embeddings(model: &Model, pool: &[&LabeledSample], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), embeddings_csv(model, pool)?.as_bytes())
}
