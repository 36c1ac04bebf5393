//! One labeling session: the loop state plus batch bookkeeping and
//! persistence.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use curare_core::active::{IterationRecord, LoopConfig, LoopError, LoopState, Phase};
use curare_core::index::VectorIndex;
use curare_core::labels::{Label, LabelRecord, LabelSource};
use curare_core::store::EmbeddingSet;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub const SNAPSHOT_FILE: &str = "session.json";
pub const LABEL_LOG_FILE: &str = "labels.tsv";

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Random 128-bit token as 32 hex digits.
pub fn new_token() -> String {
    format!("{:032x}", rand::random::<u128>())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    session_id: String,
    share_token: String,
    created_at: u64,
    seed_size: usize,
    state: LoopState,
    closed: BTreeMap<u64, BTreeMap<String, Label>>,
    issued_at: BTreeMap<u64, u64>,
    overwritten: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize, Serialize)]
pub struct LabelEntry {
    pub item_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubmitOutcome {
    pub accepted: usize,
    pub rejected: Vec<String>,
    /// The outstanding batch became complete with this submission.
    pub completed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchItem {
    pub item_id: String,
    pub uri: String,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchView {
    pub batch_id: u64,
    pub iteration: u32,
    pub phase: Phase,
    pub issued_at: u64,
    pub remaining: usize,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Progress {
    pub phase: Phase,
    pub iteration: u32,
    pub labels_used: usize,
    pub budget: usize,
    pub batch_remaining: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatusView {
    pub session_id: String,
    pub starter_id: String,
    pub phase: Phase,
    pub iteration: u32,
    pub labels_used: usize,
    pub budget: usize,
    pub training: bool,
    pub history: Vec<IterationRecord>,
    pub curated_count: usize,
    /// Labels replaced by a later, different label for the same item.
    pub overwritten: usize,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CuratedEntry {
    pub item_id: String,
    pub uri: String,
    pub score: f64,
    pub provenance: LabelSource,
}

pub struct Session {
    pub id: String,
    pub share_token: String,
    pub created_at: u64,
    seed_size: usize,
    state: LoopState,
    closed: BTreeMap<u64, BTreeMap<String, Label>>,
    issued_at: BTreeMap<u64, u64>,
    overwritten: usize,
    training: bool,
    last_error: Option<String>,
    dir: Option<PathBuf>,
}

impl Session {
    /// Starts a session and issues its seed batch. `state_root`, when given,
    /// receives `{session_id}/session.json` and `{session_id}/labels.tsv`.
    pub fn create(
        index: &VectorIndex,
        starter_id: &str,
        config: LoopConfig,
        state_root: Option<&Path>,
    ) -> Result<Self, ApiError> {
        let state = LoopState::start(index, starter_id, config)?;
        let id = new_token();
        let mut share_token = new_token();
        while share_token == id {
            share_token = new_token();
        }
        let now = now_ms();
        let pending = state.pending().expect("a fresh run has a seed batch");
        let session = Self {
            dir: state_root.map(|r| r.join(&id)),
            id,
            share_token,
            created_at: now,
            seed_size: pending.rows.len(),
            issued_at: BTreeMap::from([(pending.id, now)]),
            state,
            closed: BTreeMap::new(),
            overwritten: 0,
            training: false,
            last_error: None,
        };
        if let Some(dir) = &session.dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(LABEL_LOG_FILE), "")?;
        }
        session.persist()?;
        Ok(session)
    }

    /// Reloads a persisted session, replays labels logged after the last
    /// snapshot and finishes an interrupted retraining step.
    pub fn load(dir: &Path, index: &VectorIndex) -> Result<Self, ApiError> {
        let text = fs::read_to_string(dir.join(SNAPSHOT_FILE))?;
        let snap: Snapshot = serde_json::from_str(&text)
            .map_err(|e| ApiError::Internal(format!("{}: {e}", dir.display())))?;
        let mut state = snap.state;
        let set = index.set().clone();
        state.restore(&set)?;
        let logged = match fs::read_to_string(dir.join(LABEL_LOG_FILE)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let records: Vec<LabelRecord> = logged
            .lines()
            .filter(|l| !l.is_empty())
            .map(LabelRecord::from_tsv)
            .collect::<Result<_, _>>()
            .map_err(ApiError::Internal)?;
        for r in records.iter().skip(state.labels.len()) {
            state.record(&set, &r.item_id, r.label, r.timestamp)?;
        }
        let mut session = Self {
            id: snap.session_id,
            share_token: snap.share_token,
            created_at: snap.created_at,
            seed_size: snap.seed_size,
            state,
            closed: snap.closed,
            issued_at: snap.issued_at,
            overwritten: snap.overwritten,
            training: false,
            last_error: None,
            dir: Some(dir.to_path_buf()),
        };
        if session.state.pending().is_some_and(|p| p.is_complete()) {
            let next = session.begin_training();
            session.finish_training(&set, advance(next, index))?;
        }
        Ok(session)
    }

    pub fn state(&self) -> &LoopState {
        &self.state
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn budget(&self, n: usize) -> usize {
        self.seed_size + self.state.budget(n)
    }

    pub fn labels_used(&self) -> usize {
        self.state.counts.total() + self.state.pending().map_or(0, |p| p.answered.len())
    }

    pub fn progress(&self, n: usize) -> Progress {
        Progress {
            phase: self.state.phase,
            iteration: self.state.iteration,
            labels_used: self.labels_used(),
            budget: self.budget(n),
            batch_remaining: self.state.pending().map_or(0, |p| p.remaining()),
        }
    }

    /// The outstanding batch, or `None` while retraining or when done.
    pub fn batch(&self, set: &EmbeddingSet) -> Option<BatchView> {
        if self.training {
            return None;
        }
        let p = self.state.pending()?;
        Some(BatchView {
            batch_id: p.id,
            iteration: p.iteration,
            phase: p.phase,
            issued_at: self
                .issued_at
                .get(&p.id)
                .copied()
                .unwrap_or(self.created_at),
            remaining: p.remaining(),
            items: p
                .rows
                .iter()
                .map(|&r| BatchItem {
                    item_id: set.meta(r).item_id.clone(),
                    uri: set.meta(r).uri.clone(),
                    label: p.answered.get(&r).copied(),
                })
                .collect(),
        })
    }

    /// Applies labels for the outstanding batch. Repeating labels already
    /// recorded changes nothing; a different label for an answered item
    /// replaces it.
    pub fn submit(
        &mut self,
        set: &EmbeddingSet,
        batch_id: u64,
        labels: &[LabelEntry],
    ) -> Result<SubmitOutcome, ApiError> {
        let mut merged: Vec<(String, Label)> = Vec::new();
        for e in labels {
            merged.retain(|(id, _)| id != &e.item_id);
            merged.push((e.item_id.clone(), e.label));
        }
        let unchanged = SubmitOutcome {
            accepted: 0,
            rejected: Vec::new(),
            completed: false,
        };
        let current = self.state.pending().filter(|p| p.id == batch_id);
        let Some(pending) = current else {
            return match self.closed.get(&batch_id) {
                Some(done) if merged.iter().all(|(id, l)| done.get(id) == Some(l)) => Ok(unchanged),
                Some(_) => Err(ApiError::Conflict(format!("batch {batch_id} is closed"))),
                None => Err(ApiError::Conflict(format!(
                    "batch {batch_id} is not the outstanding batch"
                ))),
            };
        };
        let answered_by_id: BTreeMap<String, Label> = pending
            .answered
            .iter()
            .map(|(&r, &l)| (set.meta(r).item_id.clone(), l))
            .collect();
        if self.training {
            return if merged
                .iter()
                .all(|(id, l)| answered_by_id.get(id) == Some(l))
            {
                Ok(unchanged)
            } else {
                Err(ApiError::Conflict(format!(
                    "batch {batch_id} is complete and retraining"
                )))
            };
        }
        let in_batch: std::collections::HashSet<usize> = pending.rows.iter().copied().collect();
        let mut outcome = unchanged;
        let ts = now_ms();
        for (item_id, label) in merged {
            if !set.row_of(&item_id).is_some_and(|r| in_batch.contains(&r)) {
                outcome.rejected.push(item_id);
                continue;
            }
            match answered_by_id.get(&item_id) {
                Some(&prev) if prev == label => continue,
                Some(_) => self.overwritten += 1,
                None => {}
            }
            self.state.record(set, &item_id, label, ts)?;
            self.append_log(self.state.labels.log().last().expect("just recorded"))?;
            outcome.accepted += 1;
        }
        outcome.completed =
            outcome.accepted > 0 && self.state.pending().is_some_and(|p| p.is_complete());
        Ok(outcome)
    }

    /// Marks the session as retraining and returns the state to advance.
    pub fn begin_training(&mut self) -> LoopState {
        self.training = true;
        self.state.clone()
    }

    /// Installs the advanced state and persists a snapshot.
    pub fn finish_training(
        &mut self,
        set: &EmbeddingSet,
        result: Result<LoopState, LoopError>,
    ) -> Result<(), ApiError> {
        self.training = false;
        let next = match result {
            Ok(s) => s,
            Err(e) => {
                self.last_error = Some(e.to_string());
                return Err(e.into());
            }
        };
        if let Some(old) = self.state.pending() {
            let set_labels: BTreeMap<String, Label> = old
                .answered
                .iter()
                .map(|(&r, &l)| (set.meta(r).item_id.clone(), l))
                .collect();
            self.closed.insert(old.id, set_labels);
        }
        if let Some(p) = next.pending() {
            self.issued_at.insert(p.id, now_ms());
        }
        self.state = next;
        self.last_error = None;
        self.persist()
    }

    pub fn status(&self, set: &EmbeddingSet) -> StatusView {
        StatusView {
            session_id: self.id.clone(),
            starter_id: self.state.starter_id.clone(),
            phase: self.state.phase,
            iteration: self.state.iteration,
            labels_used: self.labels_used(),
            budget: self.budget(set.len()),
            training: self.training,
            history: self.state.history.clone(),
            curated_count: self.state.curated().map_or(0, |c| c.len()),
            overwritten: self.overwritten,
            last_error: self.last_error.clone(),
        }
    }

    pub fn curated(&self, set: &EmbeddingSet) -> Vec<CuratedEntry> {
        self.state
            .curated()
            .map(|c| {
                c.items
                    .iter()
                    .map(|i| CuratedEntry {
                        item_id: i.item_id.clone(),
                        uri: set.meta(i.row).uri.clone(),
                        score: i.score,
                        provenance: i.provenance,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    fn append_log(&self, record: &LabelRecord) -> Result<(), ApiError> {
        if let Some(dir) = &self.dir {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(LABEL_LOG_FILE))?;
            writeln!(f, "{}", record.to_tsv())?;
        }
        Ok(())
    }

    fn persist(&self) -> Result<(), ApiError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        fs::create_dir_all(dir)?;
        let snap = Snapshot {
            session_id: self.id.clone(),
            share_token: self.share_token.clone(),
            created_at: self.created_at,
            seed_size: self.seed_size,
            state: self.state.clone(),
            closed: self.closed.clone(),
            issued_at: self.issued_at.clone(),
            overwritten: self.overwritten,
        };
        let text = serde_json::to_string(&snap).map_err(|e| ApiError::Internal(e.to_string()))?;
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }
}

/// Closes the complete batch of `state` and issues the next one.
pub fn advance(mut state: LoopState, index: &VectorIndex) -> Result<LoopState, LoopError> {
    state.advance(index)?;
    Ok(state)
}
