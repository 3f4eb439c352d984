//! Persistent LLM response cache stored as JSON lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::util::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub model: String,
    pub request_hash: String,
    pub response: String,
    pub created_at: String,
}

#[derive(Default)]
struct State {
    records: Vec<CacheRecord>,
    by_key: BTreeMap<String, usize>,
}

/// Response log keyed by request. Every insert rewrites the file through a
/// temp file and rename, so readers never observe a torn line. The file
/// holds the latest record per key in key order, independent of the order
/// in which concurrent requests finished.
pub struct ResponseCache {
    path: Option<PathBuf>,
    state: Mutex<State>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            state: Mutex::new(State::default()),
        }
    }

    /// Opens (or starts) a cache file. Unparseable lines are skipped with a
    /// warning; for repeated keys the latest record wins.
    pub fn open(path: impl Into<PathBuf>) -> std::io::Result<Self> {
        let path = path.into();
        let mut state = State::default();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    match serde_json::from_str::<CacheRecord>(line) {
                        Ok(rec) => push(&mut state, rec),
                        Err(e) => log::warn!("{}:{}: skipping cache line: {e}", path.display(), i + 1),
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
        Ok(Self {
            path: Some(path),
            state: Mutex::new(state),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let state = self.state.lock().expect("cache lock");
        state.by_key.get(key).map(|&i| state.records[i].response.clone())
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, record: CacheRecord) -> std::io::Result<()> {
        let mut state = self.state.lock().expect("cache lock");
        push(&mut state, record);
        if let Some(path) = &self.path {
            let mut out = Vec::new();
            for &i in state.by_key.values() {
                serde_json::to_writer(&mut out, &state.records[i])?;
                out.push(b'\n');
            }
            write_atomic(path, &out)?;
        }
        Ok(())
    }
}

fn push(state: &mut State, record: CacheRecord) {
    let idx = state.records.len();
    state.by_key.insert(record.key.clone(), idx);
    state.records.push(record);
}
