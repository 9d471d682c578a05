//! Command implementations behind the `u2traj` binary.

pub mod commands;
pub mod config;
pub mod plot;

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<u2traj::Error> for CliError {
    fn from(e: u2traj::Error) -> Self {
        use u2traj::Error as E;
        let msg = e.to_string();
        match e {
            E::Parameter { .. } | E::Config(_) | E::StepRange { .. } => CliError::Config(msg),
            E::NonFinite(_) | E::Domain(_) | E::UndefinedCorrelation => CliError::Numeric(msg),
            E::Dimension(_) | E::Parse { .. } | E::Version { .. } | E::Truncated { .. } | E::Checkpoint(_) | E::Io(_) => {
                CliError::Io(msg)
            }
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

pub const LOCK_NAME: &str = ".u2traj.lock";

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOCK_NAME);
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Io(format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ))
            } else {
                io_err(&path, e)
            }
        })?;
        Ok(DirLock { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Caps the worker pool from `U2TRAJ_THREADS`; ignored if the global pool
/// already exists.
pub fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("U2TRAJ_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("U2TRAJ_THREADS must be a positive integer, got `{v}`")))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
