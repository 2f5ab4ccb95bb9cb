//! Run directories: every artifact lives at `<run dir>/<name>`, writes are guarded
//! by a lock file, and each command snapshots its effective configuration first.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const ENV_OUT: &str = "ACDC_OUT";
pub const LOCK: &str = ".lock";

/// Resolves the run directory: `--out`, then the config's `out_dir`, then
/// `$ACDC_OUT/run-<id>`, then `runs/run-<id>`.
pub fn resolve(out: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = out {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.out_dir {
        return p.clone();
    }
    let root = std::env::var_os(ENV_OUT).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("run-{}", cfg.run_id()))
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory if needed and takes its lock.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(CliError::io(root))?;
        let lock = root.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(Self { root: root.to_path_buf() }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(root.to_path_buf())),
            Err(e) => Err(CliError::Io { path: lock, source: e }),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        }
        fs::write(&path, contents).map_err(CliError::io(&path))?;
        Ok(path)
    }

    pub fn read_to_string(&self, name: &str) -> Result<String> {
        let path = self.path(name);
        fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::NotFound(path.display().to_string()),
            _ => CliError::Io { path: path.clone(), source: e },
        })
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    /// Writes `<dir>/config.toml` (and a copy under `subdir`, if given).
    pub fn snapshot(&self, cfg: &RunConfig, subdir: Option<&str>) -> Result<()> {
        let text = cfg.to_toml();
        self.write("config.toml", &text)?;
        if let Some(d) = subdir {
            self.write(&format!("{d}/config.toml"), &text)?;
        }
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_writer_is_refused_until_the_first_is_dropped() {
        let tmp = tempfile::tempdir().unwrap();
        let a = RunDir::open(tmp.path()).unwrap();
        assert!(matches!(RunDir::open(tmp.path()), Err(CliError::Locked(_))));
        drop(a);
        assert!(RunDir::open(tmp.path()).is_ok());
    }

    #[test]
    fn explicit_out_wins() {
        let cfg = RunConfig {
            out_dir: Some("cfg".into()),
            ..Default::default()
        };
        assert_eq!(resolve(Some(Path::new("flag")), &cfg), PathBuf::from("flag"));
        assert_eq!(resolve(None, &cfg), PathBuf::from("cfg"));
    }
}
