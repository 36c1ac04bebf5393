//! Append-only log of binary relevance labels.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Relevant,
    NotRelevant,
}

impl Label {
    pub fn is_relevant(self) -> bool {
        self == Label::Relevant
    }

    pub fn from_bool(relevant: bool) -> Self {
        if relevant {
            Label::Relevant
        } else {
            Label::NotRelevant
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Relevant => "relevant",
            Label::NotRelevant => "not_relevant",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relevant" | "1" => Ok(Label::Relevant),
            "not_relevant" | "0" => Ok(Label::NotRelevant),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Seed,
    Human,
    Weak,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Seed => "seed",
            LabelSource::Human => "human",
            LabelSource::Weak => "weak",
        }
    }
}

impl FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seed" => Ok(LabelSource::Seed),
            "human" => Ok(LabelSource::Human),
            "weak" => Ok(LabelSource::Weak),
            other => Err(format!("unknown label source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub item_id: String,
    pub label: Label,
    pub source: LabelSource,
    pub iteration: u32,
    pub timestamp: u64,
}

impl LabelRecord {
    /// One TSV line: item_id, label, source, iteration, timestamp.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.item_id,
            self.label,
            self.source.as_str(),
            self.iteration,
            self.timestamp
        )
    }

    /// Parses a log line. Only `item_id` and `label` are required; the rest
    /// default to a human label at iteration 0.
    pub fn from_tsv(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields[0].is_empty() {
            return Err(format!("malformed label line {line:?}"));
        }
        let source = match fields.get(2) {
            Some(s) => s.parse()?,
            None => LabelSource::Human,
        };
        let iteration = match fields.get(3) {
            Some(s) => s.parse().map_err(|_| format!("bad iteration {s:?}"))?,
            None => 0,
        };
        let timestamp = match fields.get(4) {
            Some(s) => s.parse().map_err(|_| format!("bad timestamp {s:?}"))?,
            None => 0,
        };
        Ok(Self {
            item_id: fields[0].to_string(),
            label: fields[1].parse()?,
            source,
            iteration,
            timestamp,
        })
    }
}

/// Full label history plus an index of the effective (latest) label per item.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelStore {
    log: Vec<LabelRecord>,
    #[serde(skip)]
    latest: HashMap<String, usize>,
}

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_log(log: Vec<LabelRecord>) -> Self {
        let mut store = Self::new();
        for r in log {
            store.append(r);
        }
        store
    }

    pub fn append(&mut self, record: LabelRecord) {
        self.latest.insert(record.item_id.clone(), self.log.len());
        self.log.push(record);
    }

    /// Rebuilds the effective-label index, e.g. after deserialization.
    pub fn reindex(&mut self) {
        self.latest = self
            .log
            .iter()
            .enumerate()
            .map(|(i, r)| (r.item_id.clone(), i))
            .collect();
    }

    pub fn effective(&self, item_id: &str) -> Option<&LabelRecord> {
        self.latest.get(item_id).map(|&i| &self.log[i])
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.latest.contains_key(item_id)
    }

    /// Number of distinct labeled items.
    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }

    pub fn log(&self) -> &[LabelRecord] {
        &self.log
    }

    /// Effective records in first-labeled order.
    pub fn effective_records(&self) -> impl Iterator<Item = &LabelRecord> {
        let mut idx: Vec<usize> = self.latest.values().copied().collect();
        idx.sort_unstable();
        idx.into_iter().map(move |i| &self.log[i])
    }
}
