//! Run manifests: the resolved settings of a run, written next to its outputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use despeckle::{Error, NoiseSchedule, Result};
use sha2::{Digest, Sha256};

use crate::config::RUN_PREFIX;

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// `sha256:<hex>` of a file's bytes.
pub fn file_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok(format!("sha256:{hex}"))
}

/// `<output>.manifest`, also for directory outputs.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    while s.to_string_lossy().ends_with('/') && s.len() > 1 {
        let t = s.to_string_lossy().trim_end_matches('/').to_string();
        s = t.into();
    }
    s.push(".manifest");
    PathBuf::from(s)
}

pub struct RunManifest {
    pub subcommand: &'static str,
    pub settings: Vec<(String, String)>,
    pub schedule: Option<NoiseSchedule>,
    pub checkpoint_id: Option<String>,
    pub started: u64,
    pub finished: u64,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: &str| {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        };
        line(&format!("{RUN_PREFIX}subcommand"), self.subcommand);
        line(&format!("{RUN_PREFIX}version"), env!("CARGO_PKG_VERSION"));
        if let Some(s) = &self.schedule {
            line(&format!("{RUN_PREFIX}schedule_steps"), &s.steps().to_string());
            let eps = s.eta_per_step().map(|v| v.to_string()).unwrap_or_else(|| "table".into());
            line(&format!("{RUN_PREFIX}schedule_eta_per_step"), &eps);
        }
        if let Some(id) = &self.checkpoint_id {
            line(&format!("{RUN_PREFIX}checkpoint_id"), id);
        }
        line(&format!("{RUN_PREFIX}started_unix"), &self.started.to_string());
        line(&format!("{RUN_PREFIX}finished_unix"), &self.finished.to_string());
        for (k, v) in &self.settings {
            line(k, v);
        }
        out
    }

    pub fn write_next_to(&self, output: &Path) -> Result<PathBuf> {
        let path = manifest_path(output);
        std::fs::write(&path, self.render()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_path_for_files_and_dirs() {
        assert_eq!(manifest_path(Path::new("a/b.pgm")), PathBuf::from("a/b.pgm.manifest"));
        assert_eq!(manifest_path(Path::new("out/")), PathBuf::from("out.manifest"));
    }

    #[test]
    fn render_has_run_keys_then_settings() {
        let m = RunManifest {
            subcommand: "corrupt",
            settings: vec![("seed".into(), "3".into())],
            schedule: Some(NoiseSchedule::default()),
            checkpoint_id: None,
            started: 1,
            finished: 2,
        };
        let text = m.render();
        assert!(text.starts_with("run.subcommand=corrupt\n"));
        assert!(text.contains("run.schedule_steps=500\n"));
        assert!(text.contains("run.schedule_eta_per_step=0.0004\n"));
        assert!(text.ends_with("seed=3\n"));
    }
}
