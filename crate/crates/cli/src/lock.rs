//! One process per run directory, enforced by a lock file holding the
//! owner's pid.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

pub const LOCK_NAME: &str = ".padme.lock";

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    /// Creates `dir` if needed and takes its lock. A lock left by a
    /// process that no longer exists is taken over.
    pub fn acquire(dir: &Path) -> Result<Self, String> {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let path = dir.join(LOCK_NAME);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id()).map_err(|e| format!("{}: {e}", path.display()))?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match owner {
                        Some(pid) if !alive(pid) => {
                            log::warn!("removing stale lock of exited process {pid}");
                            let _ = fs::remove_file(&path);
                        }
                        _ => {
                            let who = owner.map_or("another process".to_string(), |p| format!("process {p}"));
                            return Err(format!(
                                "{} is in use by {who} (lock file {})",
                                dir.display(),
                                path.display()
                            ));
                        }
                    }
                }
                Err(e) => return Err(format!("{}: {e}", path.display())),
            }
        }
        Err(format!("could not take {}", path.display()))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Whether `pid` is a running process; assumed so where `/proc` is absent.
fn alive(pid: u32) -> bool {
    let proc = Path::new("/proc");
    !proc.is_dir() || proc.join(pid.to_string()).exists()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_fails_until_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(!dir.path().join(LOCK_NAME).exists());
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn stale_lock_is_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        // pid beyond the kernel's pid_max
        fs::write(dir.path().join(LOCK_NAME), "4294967295\n").unwrap();
        if Path::new("/proc").is_dir() {
            RunLock::acquire(dir.path()).unwrap();
        }
    }
}
