//! Output-directory lock: concurrent invocations on one run directory are
//! rejected rather than interleaved.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Creates `<dir>/.tqn-lock` exclusively; the lock is released on drop.
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        let path = dir.join(".tqn-lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Data(format!(
                "output directory {} is in use by another invocation (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Data(format!(
                "cannot lock {}: {e}",
                dir.display()
            ))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_acquire_fails_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }
}
