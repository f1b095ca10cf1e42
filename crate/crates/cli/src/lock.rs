use std::fs::{File, OpenOptions, TryLockError};
use std::path::Path;

use al_core::rounds::LoopError;

const LOCK_FILE: &str = "al.lock";

/// Advisory lock held for the life of a mutating command. The OS releases
/// it when the file handle closes, including on a crash.
#[derive(Debug)]
pub struct StoreLock {
    _file: File,
}

impl StoreLock {
    pub fn acquire(dir: &Path) -> Result<Self, LoopError> {
        std::fs::create_dir_all(dir).map_err(|source| LoopError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|source| LoopError::Io {
                path: path.display().to_string(),
                source,
            })?;
        match file.try_lock() {
            Ok(()) => Ok(StoreLock { _file: file }),
            Err(TryLockError::WouldBlock) => Err(LoopError::Locked(path.display().to_string())),
            Err(TryLockError::Error(source)) => Err(LoopError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }
}
