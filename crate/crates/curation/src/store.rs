//! Task locking on top of an atomic create-if-absent primitive.
//!
//! Work items are keyed by task id; whoever creates the claim object first
//! owns the task, everyone else sees it as taken. Failures to reach the
//! store surface as a retryable error, distinct from "already held".

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Mutex;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("task id {0:?} is not a plain name")]
    InvalidId(String),
    #[error("store unavailable: {0}")]
    Unavailable(#[from] std::io::Error),
}

pub trait TaskStore: Sync {
    /// True exactly once per id across all callers; false when already held.
    fn try_claim(&self, task_id: &str) -> Result<bool, StoreError>;
}

/// Claim set guarded by a mutex; the lock makes insert atomic.
#[derive(Default)]
pub struct InMemoryStore {
    claimed: Mutex<HashSet<String>>,
}

impl InMemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TaskStore for InMemoryStore {
    fn try_claim(&self, task_id: &str) -> Result<bool, StoreError> {
        let mut claimed = self.claimed.lock().expect("claim set poisoned");
        Ok(claimed.insert(task_id.to_string()))
    }
}

/// One marker file per task id; `create_new` is the atomic primitive.
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn claim_path(&self, task_id: &str) -> Result<PathBuf, StoreError> {
        let plain = !task_id.is_empty()
            && task_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.');
        if !plain || task_id.starts_with('.') {
            return Err(StoreError::InvalidId(task_id.to_string()));
        }
        Ok(self.root.join(format!("{task_id}.lock")))
    }
}

impl TaskStore for DirStore {
    fn try_claim(&self, task_id: &str) -> Result<bool, StoreError> {
        let path = self.claim_path(task_id)?;
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(false),
            Err(e) => Err(StoreError::Unavailable(e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn exercise_basic(store: &dyn TaskStore) {
        assert!(store.try_claim("task-1").unwrap());
        assert!(!store.try_claim("task-1").unwrap());
        assert!(store.try_claim("task-2").unwrap());
        assert!(store.try_claim("task-3").unwrap());
        assert!(!store.try_claim("task-2").unwrap());
    }

    #[test]
    fn memory_store_grants_each_id_once() {
        exercise_basic(&InMemoryStore::new());
    }

    #[test]
    fn dir_store_grants_each_id_once() {
        let dir = tempfile::tempdir().unwrap();
        exercise_basic(&DirStore::new(dir.path()));
    }

    #[test]
    fn dir_store_reports_outage_as_retryable() {
        let store = DirStore::new("/nonexistent-root/claims");
        assert!(matches!(
            store.try_claim("task-1"),
            Err(StoreError::Unavailable(_))
        ));
    }

    #[test]
    fn dir_store_rejects_path_like_ids() {
        let dir = tempfile::tempdir().unwrap();
        let store = DirStore::new(dir.path());
        assert!(matches!(
            store.try_claim("../escape"),
            Err(StoreError::InvalidId(_))
        ));
        assert!(matches!(store.try_claim(""), Err(StoreError::InvalidId(_))));
        assert!(matches!(
            store.try_claim(".hidden"),
            Err(StoreError::InvalidId(_))
        ));
    }

    fn stress(store: Arc<dyn TaskStore + Send + Sync>, workers: usize, ids: usize) {
        let mut handles = Vec::new();
        for _ in 0..workers {
            let store = Arc::clone(&store);
            handles.push(std::thread::spawn(move || {
                let mut grants = Vec::new();
                for id in 0..ids {
                    if store.try_claim(&format!("task-{id}")).unwrap() {
                        grants.push(id);
                    }
                }
                grants
            }));
        }
        let mut counts = vec![0usize; ids];
        for h in handles {
            for id in h.join().unwrap() {
                counts[id] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 1), "grant counts {counts:?}");
    }

    #[test]
    fn concurrent_claims_grant_exactly_once() {
        stress(Arc::new(InMemoryStore::new()), 16, 50);
        let dir = tempfile::tempdir().unwrap();
        stress(Arc::new(DirStore::new(dir.path())), 16, 50);
    }
}
