#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use curare_core::bench::{make_synthetic, SyntheticSpec};
use curare_core::index::{IndexConfig, VectorIndex};
use curare_core::store::{EmbeddingSet, ItemMeta};
use curare_service::{AppState, BackgroundServer, ServiceConfig};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

/// 10 classes x 200 items; even rows are product "A", odd rows "B".
pub fn fixture_index() -> Arc<VectorIndex> {
    let spec = SyntheticSpec {
        separation: 2.5,
        ..SyntheticSpec::default()
    };
    let base = make_synthetic(&spec).unwrap();
    let day = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
    let meta: Vec<ItemMeta> = base
        .metas()
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut out = ItemMeta::new(m.item_id.clone(), format!("img/{}.png", m.item_id))
                .with_product(if i % 2 == 0 { "A" } else { "B" })
                .with_date(day + chrono::Days::new((i % 30) as u64));
            out.true_label = m.true_label;
            out
        })
        .collect();
    let set = EmbeddingSet::new(base.dim(), base.vectors().to_vec(), meta).unwrap();
    Arc::new(VectorIndex::build(Arc::new(set), &IndexConfig::default()).unwrap())
}

pub fn start(index: Arc<VectorIndex>, config: ServiceConfig) -> BackgroundServer {
    let state = Arc::new(AppState::new(index, config).unwrap());
    BackgroundServer::start(state, "127.0.0.1:0".parse().unwrap()).unwrap()
}

pub struct Api {
    pub client: Client,
    pub base: String,
}

impl Api {
    pub fn new(server: &BackgroundServer) -> Self {
        Self {
            client: Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .unwrap(),
            base: server.url(""),
        }
    }

    pub fn create(&self, starter: &str, config: Value) -> (StatusCode, Value) {
        let r = self
            .client
            .post(format!("{}/sessions", self.base))
            .json(&json!({ "starter_id": starter, "config": config }))
            .send()
            .unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    pub fn batch(&self, id: &str, token: &str) -> (StatusCode, Value) {
        let r = self
            .client
            .get(format!("{}/sessions/{id}/batch", self.base))
            .bearer_auth(token)
            .send()
            .unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    pub fn labels(
        &self,
        id: &str,
        token: &str,
        batch_id: u64,
        labels: &[(String, &str)],
    ) -> (StatusCode, Value) {
        let body = json!({
            "batch_id": batch_id,
            "labels": labels.iter().map(|(i, l)| json!({"item_id": i, "label": l})).collect::<Vec<_>>(),
        });
        let r = self
            .client
            .post(format!("{}/sessions/{id}/labels", self.base))
            .bearer_auth(token)
            .json(&body)
            .send()
            .unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    pub fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self
            .client
            .get(format!("{}{path}", self.base))
            .send()
            .unwrap();
        let status = r.status();
        (status, r.json().unwrap_or(Value::Null))
    }

    /// Polls until a batch is available (200) or the session is done (204
    /// with phase done).
    pub fn next_batch(&self, id: &str, token: &str) -> Option<Value> {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let (status, body) = self.batch(id, token);
            match status {
                StatusCode::OK => return Some(body),
                StatusCode::NO_CONTENT => {
                    let (_, st) = self.get(&format!("/sessions/{id}/status"));
                    if st["phase"] == "done" && st["training"] == false {
                        return None;
                    }
                }
                other => panic!("unexpected batch status {other}"),
            }
            assert!(Instant::now() < deadline, "session did not progress");
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

pub fn truth_label(index: &VectorIndex, item_id: &str, class: i64) -> &'static str {
    let set = index.set();
    let row = set.row_of(item_id).unwrap();
    if set.meta(row).true_label == Some(class) {
        "relevant"
    } else {
        "not_relevant"
    }
}

/// Answers every batch from the true labels, `chunk` labels per request,
/// stopping after `max_batches` batches when given. Returns the item ids
/// issued per batch.
pub fn drive(
    api: &Api,
    index: &VectorIndex,
    id: &str,
    token: &str,
    class: i64,
    chunk: usize,
    max_batches: Option<usize>,
) -> Vec<Vec<String>> {
    let mut issued = Vec::new();
    while max_batches.is_none_or(|m| issued.len() < m) {
        let Some(batch) = api.next_batch(id, token) else {
            break;
        };
        let batch_id = batch["batch_id"].as_u64().unwrap();
        let items: Vec<String> = batch["items"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| i["item_id"].as_str().unwrap().to_string())
            .collect();
        let open: Vec<(String, &str)> = batch["items"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|i| i["label"].is_null())
            .map(|i| {
                let item = i["item_id"].as_str().unwrap().to_string();
                let l = truth_label(index, &item, class);
                (item, l)
            })
            .collect();
        for part in open.chunks(chunk.max(1)) {
            let (status, body) = api.labels(id, token, batch_id, part);
            assert_eq!(status, StatusCode::OK, "{body}");
        }
        issued.push(items);
    }
    issued
}

pub fn assert_disjoint(batches: &[Vec<String>]) {
    let mut seen = HashSet::new();
    for b in batches {
        for i in b {
            assert!(seen.insert(i.clone()), "item {i} issued twice");
        }
    }
}

pub fn write_images(root: &Path, index: &VectorIndex, count: usize) {
    std::fs::create_dir_all(root.join("img")).unwrap();
    for m in index.set().metas().iter().take(count) {
        std::fs::write(root.join(&m.uri), format!("bytes of {}", m.item_id)).unwrap();
    }
}
