//! Running a configured experiment and writing its artifacts.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::encode_checkpoint;
use crate::config::{Runner, SimConfig};
use crate::error::{Error, Result};
use crate::server::GateRecord;
use crate::sim::{run_fedavg_full, run_protocol_full, run_single_device_full, MetricsLog};

/// Environment variable that, when set, is prepended to relative output
/// directories.
pub const OUTPUT_ROOT_ENV: &str = "KSHARE_OUTPUT_ROOT";

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const SUMMARY_JSON: &str = "summary.json";
pub const GATE_LOG_JSONL: &str = "gate_log.jsonl";
pub const CHECKPOINT_BIN: &str = "checkpoint.bin";
const LOCK_FILE: &str = ".kshare.lock";

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub log: MetricsLog,
}

pub fn resolve_output_dir(cfg: &SimConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if cfg.output_dir.is_relative() => PathBuf::from(root).join(&cfg.output_dir),
        _ => cfg.output_dir.clone(),
    }
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(
                format!("output directory {} is locked by another run", dir.display()),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn gate_log_jsonl(log: &[GateRecord]) -> Result<String> {
    let mut out = String::new();
    for g in log {
        out.push_str(&serde_json::to_string(g).map_err(|e| Error::Serialization(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Stage every file under a temporary name, then rename them all.
fn write_atomically(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    let mut staged = Vec::new();
    let result = (|| {
        for (name, bytes) in files {
            let tmp = dir.join(format!(".{name}.tmp"));
            staged.push(tmp.clone());
            let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        let mut out = Vec::new();
        for (name, _) in files {
            let tmp = dir.join(format!(".{name}.tmp"));
            let dest = dir.join(name);
            fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
            out.push(dest);
        }
        Ok(out)
    })();
    if result.is_err() {
        for tmp in staged {
            let _ = fs::remove_file(tmp);
        }
    }
    result
}

/// Execute the configured runner and write its outputs. Nothing is written
/// if data loading or the run itself fails.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let seed = cfg.seed()?;
    let data = cfg.build_data()?;
    let pcfg = cfg.protocol_config(data.test.classes, data.test.feature_dim());

    let (log, gate_log, server) = match cfg.runner {
        Runner::Protocol => {
            let out = run_protocol_full(&pcfg, &cfg.schedule, &data, seed)?;
            (out.log, out.gate_log, out.server)
        }
        Runner::Single => {
            let out = run_single_device_full(&pcfg, cfg.schedule.rounds, &data, seed)?;
            (out.log, out.gate_log, None)
        }
        Runner::Fedavg => (run_fedavg_full(&pcfg, &cfg.schedule, &data, seed)?.log, Vec::new(), None),
    };
    if let Some(reason) = &log.summary.aborted {
        return Err(Error::Diverged(format!(
            "run aborted after {} rounds: {reason}",
            log.summary.rounds_completed
        )));
    }

    let dir = resolve_output_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let _lock = DirLock::acquire(&dir)?;
    let mut files = vec![
        (METRICS_CSV, log.to_csv().into_bytes()),
        (METRICS_JSONL, log.to_jsonl()?.into_bytes()),
        (SUMMARY_JSON, log.summary_json()?.into_bytes()),
        (GATE_LOG_JSONL, gate_log_jsonl(&gate_log)?.into_bytes()),
    ];
    if let Some(server) = &server {
        files.push((CHECKPOINT_BIN, encode_checkpoint(server)));
    }
    let files = write_atomically(&dir, &files)?;
    Ok(ExperimentReport {
        output_dir: dir,
        files,
        log,
    })
}
