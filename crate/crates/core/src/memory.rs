//! Per-household dialogue history with time-window retrieval.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueTurn, Timestamp};
use crate::store::{HouseholdFiles, StoreError};

pub const DEFAULT_HISTORY_CAPACITY: usize = 1000;

/// Which stored turns are eligible for prompt injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPolicy {
    /// Maximum turn age in seconds; `u64::MAX` disables the age cut.
    pub max_age_secs: u64,
    pub max_turns: usize,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        Self {
            max_age_secs: 24 * 60 * 60,
            max_turns: 10,
        }
    }
}

impl WindowPolicy {
    pub fn unbounded_age(max_turns: usize) -> Self {
        Self {
            max_age_secs: u64::MAX,
            max_turns,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_age_secs == 0 {
            return Err("window max_age must be positive".into());
        }
        if self.max_turns == 0 {
            return Err("window max_turns must be at least 1".into());
        }
        Ok(())
    }

    fn cutoff(&self, now: Timestamp) -> Timestamp {
        let age = i64::try_from(self.max_age_secs).unwrap_or(i64::MAX);
        now.saturating_sub(age)
    }
}

#[derive(Debug, Clone)]
struct StoredTurn {
    timestamp: Timestamp,
    turn: DialogueTurn,
}

/// Time-ordered turns of one household. Equal timestamps keep arrival order.
#[derive(Debug, Clone, Default)]
pub struct HouseholdHistory {
    turns: Vec<StoredTurn>,
}

impl HouseholdHistory {
    fn insert(&mut self, timestamp: Timestamp, turn: DialogueTurn, capacity: usize) {
        let stored = StoredTurn { timestamp, turn };
        // After every turn with timestamp <= this one, so ties keep arrival order.
        let pos = self.turns.partition_point(|t| t.timestamp <= timestamp);
        self.turns.insert(pos, stored);
        if self.turns.len() > capacity {
            let excess = self.turns.len() - capacity;
            self.turns.drain(..excess);
        }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn turns(&self) -> impl Iterator<Item = &DialogueTurn> {
        self.turns.iter().map(|t| &t.turn)
    }

    pub fn recent(&self, now: Timestamp, policy: &WindowPolicy) -> Vec<DialogueTurn> {
        let cutoff = policy.cutoff(now);
        let start = self.turns.partition_point(|t| t.timestamp < cutoff);
        let window = &self.turns[start..];
        let skip = window.len().saturating_sub(policy.max_turns);
        window[skip..].iter().map(|t| t.turn.clone()).collect()
    }
}

#[derive(Debug, Default)]
struct Slot {
    history: HouseholdHistory,
    file_lines: usize,
}

/// Dialogue memory for all households, optionally backed by append-only files.
#[derive(Debug)]
pub struct MemoryStore {
    capacity: usize,
    files: Option<HouseholdFiles>,
    households: RwLock<HashMap<String, Arc<Mutex<Slot>>>>,
}

impl Default for MemoryStore {
    fn default() -> Self {
        Self::in_memory(DEFAULT_HISTORY_CAPACITY)
    }
}

impl MemoryStore {
    pub fn in_memory(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            files: None,
            households: RwLock::new(HashMap::new()),
        }
    }

    pub fn open(dir: impl Into<PathBuf>, capacity: usize) -> Result<Self, StoreError> {
        let files = HouseholdFiles::open(dir)?;
        let store = Self::in_memory(capacity);
        for (household, lines) in files.read_all()? {
            let slot = store.slot(&household);
            let mut slot = slot.lock();
            for (line_no, line) in &lines {
                let turn: DialogueTurn = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                    path: files.display_path(&household),
                    line: *line_no,
                    message: e.to_string(),
                })?;
                let ts = turn.timestamp.ok_or_else(|| StoreError::Corrupt {
                    path: files.display_path(&household),
                    line: *line_no,
                    message: "turn without timestamp".into(),
                })?;
                slot.history.insert(ts, turn, store.capacity);
            }
            slot.file_lines = lines.len();
        }
        Ok(Self {
            files: Some(files),
            ..store
        })
    }

    fn slot(&self, household_id: &str) -> Arc<Mutex<Slot>> {
        if let Some(s) = self.households.read().get(household_id) {
            return s.clone();
        }
        self.households
            .write()
            .entry(household_id.to_string())
            .or_default()
            .clone()
    }

    fn existing(&self, household_id: &str) -> Option<Arc<Mutex<Slot>>> {
        self.households.read().get(household_id).cloned()
    }

    /// Stores a timestamped turn and returns the household's resulting size.
    pub fn append_turn(&self, household_id: &str, turn: DialogueTurn) -> Result<usize, StoreError> {
        let ts = turn
            .timestamp
            .ok_or_else(|| StoreError::Invalid("turn has no timestamp".into()))?;
        if turn.text.trim().is_empty() {
            return Err(StoreError::Invalid("turn text is empty".into()));
        }
        let line = serde_json::to_string(&turn).expect("turn serializes");
        let slot = self.slot(household_id);
        let mut slot = slot.lock();
        slot.history.insert(ts, turn, self.capacity);
        if let Some(files) = &self.files {
            files.append(household_id, &line)?;
            slot.file_lines += 1;
            if slot.file_lines > 2 * self.capacity {
                let lines: Vec<String> = slot
                    .history
                    .turns()
                    .map(|t| serde_json::to_string(t).expect("turn serializes"))
                    .collect();
                files.rewrite(household_id, lines.iter().map(String::as_str))?;
                slot.file_lines = lines.len();
            }
        }
        Ok(slot.history.len())
    }

    /// Turns with `timestamp >= now - max_age`, keeping the newest `max_turns`
    /// in chronological order.
    pub fn recent_history(&self, household_id: &str, now: Timestamp, policy: &WindowPolicy) -> Vec<DialogueTurn> {
        self.existing(household_id)
            .map(|s| s.lock().history.recent(now, policy))
            .unwrap_or_default()
    }

    /// The newest `limit` turns regardless of age.
    pub fn last_turns(&self, household_id: &str, limit: usize) -> Vec<DialogueTurn> {
        self.existing(household_id)
            .map(|s| {
                let slot = s.lock();
                let skip = slot.history.len().saturating_sub(limit);
                slot.history.turns().skip(skip).cloned().collect()
            })
            .unwrap_or_default()
    }

    pub fn len(&self, household_id: &str) -> usize {
        self.existing(household_id).map(|s| s.lock().history.len()).unwrap_or(0)
    }

    pub fn contains_household(&self, household_id: &str) -> bool {
        self.len(household_id) > 0
    }
}
