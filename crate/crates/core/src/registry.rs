//! Revisioned key-value store with prefix watches.
//!
//! The store keeps one live entry per key and a single store-wide revision
//! counter. Revisions are gap-free: the first successful mutation gets
//! revision 1 and every later mutation gets exactly the previous revision
//! plus one. Failed operations (malformed keys, deletes of absent keys) never
//! consume a revision.
//!
//! Watches are delivered over unbounded channels so a slow consumer never
//! blocks a mutator. The full mutation history is retained, which lets a
//! watch replay everything after an arbitrary starting revision.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::mpsc::{self, Receiver, Sender};

use thiserror::Error;

/// Store-wide mutation counter.
pub type Revision = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("malformed key {0:?}: keys are non-empty `/`-separated paths without whitespace")]
    MalformedKey(String),
    #[error("malformed prefix {0:?}: prefixes must not contain whitespace")]
    MalformedPrefix(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub key: String,
    pub value: Vec<u8>,
    /// Revision of the mutation that last wrote this key.
    pub revision: Revision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WatchKind {
    Put,
    Delete,
}

impl fmt::Display for WatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WatchKind::Put => f.write_str("PUT"),
            WatchKind::Delete => f.write_str("DEL"),
        }
    }
}

/// One mutation as seen by a watcher. For deletes, `entry.value` holds the
/// value the key had before it was removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchEvent {
    pub kind: WatchKind,
    pub entry: RegistryEntry,
    pub revision: Revision,
}

struct Watcher {
    prefix: String,
    tx: Sender<WatchEvent>,
}

/// Receiving half of a prefix watch.
pub struct WatchStream {
    rx: Receiver<WatchEvent>,
}

impl WatchStream {
    /// Returns every event delivered so far without blocking.
    pub fn drain(&self) -> Vec<WatchEvent> {
        self.rx.try_iter().collect()
    }

    pub fn try_next(&self) -> Option<WatchEvent> {
        self.rx.try_recv().ok()
    }

    /// Blocks until the next event arrives. Returns `None` once the store
    /// has been dropped.
    pub fn recv(&self) -> Option<WatchEvent> {
        self.rx.recv().ok()
    }
}

#[derive(Default)]
pub struct Registry {
    entries: BTreeMap<String, RegistryEntry>,
    revision: Revision,
    history: Vec<WatchEvent>,
    watchers: Vec<Watcher>,
}

/// Validates a registry key: non-empty, no whitespace, no empty path segments.
pub fn validate_key(key: &str) -> Result<(), RegistryError> {
    if key.is_empty() || key.chars().any(char::is_whitespace) || key.split('/').any(str::is_empty) {
        return Err(RegistryError::MalformedKey(key.to_owned()));
    }
    Ok(())
}

/// Validates a watch prefix. The empty prefix is allowed and matches every key.
pub fn validate_prefix(prefix: &str) -> Result<(), RegistryError> {
    if prefix.chars().any(char::is_whitespace) {
        return Err(RegistryError::MalformedPrefix(prefix.to_owned()));
    }
    Ok(())
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Latest revision handed out, 0 for a fresh store.
    pub fn current_revision(&self) -> Revision {
        self.revision
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn put(&mut self, key: &str, value: impl Into<Vec<u8>>) -> Result<Revision, RegistryError> {
        validate_key(key)?;
        self.revision += 1;
        let entry = RegistryEntry {
            key: key.to_owned(),
            value: value.into(),
            revision: self.revision,
        };
        self.entries.insert(key.to_owned(), entry.clone());
        self.publish(WatchEvent {
            kind: WatchKind::Put,
            entry,
            revision: self.revision,
        });
        Ok(self.revision)
    }

    pub fn get(&self, key: &str) -> Result<Option<&[u8]>, RegistryError> {
        Ok(self.get_entry(key)?.map(|e| e.value.as_slice()))
    }

    pub fn get_entry(&self, key: &str) -> Result<Option<&RegistryEntry>, RegistryError> {
        validate_key(key)?;
        Ok(self.entries.get(key))
    }

    /// Removes `key`. Returns the deletion's revision, or `None` when the key
    /// was absent (in which case the store revision does not move).
    pub fn delete(&mut self, key: &str) -> Result<Option<Revision>, RegistryError> {
        validate_key(key)?;
        let Some(mut entry) = self.entries.remove(key) else {
            return Ok(None);
        };
        self.revision += 1;
        entry.revision = self.revision;
        self.publish(WatchEvent {
            kind: WatchKind::Delete,
            entry,
            revision: self.revision,
        });
        Ok(Some(self.revision))
    }

    /// Live entries whose key starts with `prefix`, in key order.
    pub fn range(&self, prefix: &str) -> Result<Vec<&RegistryEntry>, RegistryError> {
        validate_prefix(prefix)?;
        Ok(self
            .entries
            .range(prefix.to_owned()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e)
            .collect())
    }

    /// Opens a watch on `prefix`. Historical events with revision greater
    /// than `from_revision` are queued immediately, then every future
    /// mutation under the prefix follows in revision order.
    pub fn watch(
        &mut self,
        prefix: &str,
        from_revision: Revision,
    ) -> Result<WatchStream, RegistryError> {
        validate_prefix(prefix)?;
        let (tx, rx) = mpsc::channel();
        // history is sorted by revision and revisions are gap-free from 1
        let start = usize::try_from(from_revision)
            .unwrap_or(usize::MAX)
            .min(self.history.len());
        for ev in &self.history[start..] {
            if ev.entry.key.starts_with(prefix) {
                // the receiver is still in scope, send cannot fail
                let _ = tx.send(ev.clone());
            }
        }
        self.watchers.push(Watcher {
            prefix: prefix.to_owned(),
            tx,
        });
        Ok(WatchStream { rx })
    }

    /// Every mutation applied so far, in revision order.
    pub fn history(&self) -> &[WatchEvent] {
        &self.history
    }

    fn publish(&mut self, event: WatchEvent) {
        self.watchers.retain(|w| {
            if !event.entry.key.starts_with(&w.prefix) {
                return true;
            }
            // drop watchers whose stream has gone away
            w.tx.send(event.clone()).is_ok()
        });
        self.history.push(event);
    }
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("revision", &self.revision)
            .field("entries", &self.entries.len())
            .field("watchers", &self.watchers.len())
            .finish()
    }
}
