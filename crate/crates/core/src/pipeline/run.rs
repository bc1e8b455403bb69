//! Run directory layout: config snapshot, per-phase checkpoints, a
//! deterministic metrics log, a separate timing log and the frozen digest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::PhaseResult;
use crate::diffengine::{checkpoint, ParamStore};
use crate::error::{Error, Result};

/// Environment variable naming the directory under which relative run names resolve.
pub const RUN_ROOT_ENV: &str = "STPROMPT_RUN_ROOT";

#[derive(Clone, Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Opens (creating if needed) `name`, resolved against `$STPROMPT_RUN_ROOT`
    /// when it is relative and the variable is set.
    pub fn open(name: &Path) -> Result<Self> {
        let path = match std::env::var_os(RUN_ROOT_ENV) {
            Some(root) if name.is_relative() => PathBuf::from(root).join(name),
            _ => name.to_path_buf(),
        };
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunDir { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn read_to_string(&self, name: &str) -> Result<String> {
        let p = self.file(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    pub fn exists(&self, name: &str) -> bool {
        self.file(name).exists()
    }

    pub fn save_checkpoint(&self, phase: &str, store: &ParamStore) -> Result<PathBuf> {
        let p = self.file(&format!("{phase}.ckpt"));
        checkpoint::save(store, &p)?;
        Ok(p)
    }

    pub fn load_checkpoint(&self, phase: &str) -> Result<ParamStore> {
        checkpoint::load(&self.file(&format!("{phase}.ckpt")))
    }

    pub fn write_digest(&self, digest: &str) -> Result<()> {
        self.write("frozen_digest.txt", format!("{digest}\n")).map(|_| ())
    }

    pub fn read_digest(&self) -> Result<String> {
        Ok(self.read_to_string("frozen_digest.txt")?.trim().to_string())
    }

    /// Appends one phase's per-epoch records: values to `metrics.csv`,
    /// wall-clock to `timing.csv` (kept apart so the metrics log is reproducible).
    pub fn log_phase(&self, phase: &str, result: &PhaseResult) -> Result<()> {
        let mut log = MetricsLog::open(self)?;
        log.push_phase(phase, result);
        log.save(self)
    }
}

/// Accumulated per-epoch records across phases.
#[derive(Clone, Debug, Default)]
pub struct MetricsLog {
    metrics: String,
    timing: String,
}

const METRICS_HEADER: &str = "phase,epoch,split,steps,mae,rmse,mape\n";
const TIMING_HEADER: &str = "phase,epoch,seconds\n";

impl MetricsLog {
    pub fn open(dir: &RunDir) -> Result<Self> {
        let read = |name: &str, header: &str| -> Result<String> {
            if dir.exists(name) {
                dir.read_to_string(name)
            } else {
                Ok(header.to_string())
            }
        };
        Ok(MetricsLog {
            metrics: read("metrics.csv", METRICS_HEADER)?,
            timing: read("timing.csv", TIMING_HEADER)?,
        })
    }

    pub fn push_phase(&mut self, phase: &str, result: &PhaseResult) {
        for e in &result.epochs {
            let _ = writeln!(self.metrics, "{phase},{},train,{},{:.17e},,", e.epoch, e.steps, e.train_loss);
            let _ = writeln!(
                self.metrics,
                "{phase},{},val,{},{:.17e},{:.17e},{:.17e}",
                e.epoch, e.steps, e.val_mae, e.val_rmse, e.val_mape
            );
            let _ = writeln!(self.timing, "{phase},{},{:.6}", e.epoch, e.elapsed);
        }
    }

    pub fn metrics_csv(&self) -> &str {
        &self.metrics
    }

    pub fn save(&self, dir: &RunDir) -> Result<()> {
        dir.write("metrics.csv", &self.metrics)?;
        dir.write("timing.csv", &self.timing)?;
        Ok(())
    }
}
