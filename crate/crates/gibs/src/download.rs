use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use crate::grid::{bbox_to_tiles, BBox, TileId, MAX_ZOOM};
use crate::GibsError;

pub const ENDPOINT_ENV: &str = "CURARE_GIBS_ENDPOINT";
pub const DEFAULT_ENDPOINT: &str =
    "https://gibs.earthdata.nasa.gov/wmts/epsg4326/best/{product}/default/{date}/{matrix_set}/{zoom}/{row}/{col}.{ext}";
pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "date\tzoom\tcol\trow\tbytes\tsha256\tretries\tstatus\terror";

pub fn default_endpoint() -> &'static str {
    DEFAULT_ENDPOINT
}

/// The endpoint template from the environment, else the default.
pub fn endpoint_from_env() -> String {
    std::env::var(ENDPOINT_ENV)
        .ok()
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| DEFAULT_ENDPOINT.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownloadRequest {
    pub product_id: String,
    pub date_from: NaiveDate,
    pub date_to: NaiveDate,
    pub bbox: BBox,
    pub zoom: u32,
    pub out_dir: PathBuf,
}

impl DownloadRequest {
    pub fn validate(&self) -> Result<(), GibsError> {
        if self.date_from > self.date_to {
            return Err(GibsError::Request(format!(
                "{} is after {}",
                self.date_from, self.date_to
            )));
        }
        if self.zoom > MAX_ZOOM {
            return Err(GibsError::Zoom {
                zoom: self.zoom,
                max: MAX_ZOOM,
            });
        }
        let id = &self.product_id;
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(GibsError::Request(format!("unusable product id {id:?}")));
        }
        self.bbox.validate()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.date_from
            .iter_days()
            .take_while(|d| *d <= self.date_to)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownloadConfig {
    /// URL template with `{product}`, `{date}`, `{zoom}`, `{row}`, `{col}` and
    /// optionally `{matrix_set}` and `{ext}` placeholders.
    pub endpoint: String,
    pub concurrency: usize,
    pub retries: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
    pub extension: String,
    pub matrix_set: String,
}

impl Default for DownloadConfig {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_ENDPOINT.to_string(),
            concurrency: 4,
            retries: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(30),
            extension: "jpg".to_string(),
            matrix_set: "250m".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TileStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub date: NaiveDate,
    pub zoom: u32,
    pub tile: TileId,
    pub bytes: Option<u64>,
    pub sha256: Option<String>,
    pub retries: u32,
    pub status: TileStatus,
}

impl ManifestRow {
    fn key(&self) -> (NaiveDate, u32, u32, u32) {
        (self.date, self.zoom, self.tile.row, self.tile.col)
    }

    fn to_tsv(&self) -> String {
        let (status, error) = match &self.status {
            TileStatus::Ok => ("ok", "-".to_string()),
            TileStatus::Failed(e) => ("failed", e.replace(['\t', '\n', '\r'], " ")),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.date,
            self.zoom,
            self.tile.col,
            self.tile.row,
            self.bytes.map_or("-".to_string(), |b| b.to_string()),
            self.sha256.as_deref().unwrap_or("-"),
            self.retries,
            status,
            error
        )
    }

    fn parse(line: &str, n: usize) -> Result<Self, GibsError> {
        let bad = |reason: String| GibsError::Manifest { line: n, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(bad(format!("expected 9 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<u32>().map_err(|e| bad(format!("{s:?}: {e}")));
        let opt = |s: &str| (s != "-").then(|| s.to_string());
        Ok(Self {
            date: f[0].parse().map_err(|e| bad(format!("{:?}: {e}", f[0])))?,
            zoom: num(f[1])?,
            tile: TileId {
                col: num(f[2])?,
                row: num(f[3])?,
            },
            bytes: opt(f[4])
                .map(|s| s.parse::<u64>().map_err(|e| bad(format!("{s:?}: {e}"))))
                .transpose()?,
            sha256: opt(f[5]),
            retries: num(f[6])?,
            status: match f[7] {
                "ok" => TileStatus::Ok,
                "failed" => TileStatus::Failed(f[8].to_string()),
                other => return Err(bad(format!("unknown status {other:?}"))),
            },
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, GibsError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => {
            return Err(GibsError::Manifest {
                line: 1,
                reason: "missing header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| ManifestRow::parse(l, i + 1))
        .collect()
}

fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), GibsError> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_tsv());
        text.push('\n');
    }
    let tmp = path.with_extension("tsv.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownloadReport {
    pub manifest_path: PathBuf,
    /// Rows for this request, ordered by date, row, column.
    pub rows: Vec<ManifestRow>,
    pub fetched: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// `{out_dir}/{product}/{date}/{zoom}_{row}_{col}.{ext}`.
pub fn tile_path(
    out_dir: &Path,
    product: &str,
    date: NaiveDate,
    zoom: u32,
    tile: TileId,
    ext: &str,
) -> PathBuf {
    out_dir
        .join(product)
        .join(date.to_string())
        .join(format!("{zoom}_{}_{}.{ext}", tile.row, tile.col))
}

fn render(
    template: &str,
    req: &DownloadRequest,
    cfg: &DownloadConfig,
    date: NaiveDate,
    tile: TileId,
) -> String {
    template
        .replace("{product}", &req.product_id)
        .replace("{date}", &date.to_string())
        .replace("{zoom}", &req.zoom.to_string())
        .replace("{row}", &tile.row.to_string())
        .replace("{col}", &tile.col.to_string())
        .replace("{matrix_set}", &cfg.matrix_set)
        .replace("{ext}", &cfg.extension)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Job {
    date: NaiveDate,
    tile: TileId,
    url: String,
    path: PathBuf,
}

/// Fetches with exponential backoff. Returns the body or the last error,
/// plus the number of retries spent.
fn fetch(
    client: &reqwest::blocking::Client,
    url: &str,
    cfg: &DownloadConfig,
) -> (Result<Vec<u8>, String>, u32) {
    let mut last = String::new();
    for attempt in 0..=cfg.retries {
        if attempt > 0 {
            std::thread::sleep(cfg.backoff_base * (1u32 << (attempt - 1).min(20)));
        }
        match client.get(url).send() {
            Ok(resp) if resp.status().is_success() => match resp.bytes() {
                Ok(b) => return (Ok(b.to_vec()), attempt),
                Err(e) => last = e.to_string(),
            },
            Ok(resp) => last = format!("HTTP {}", resp.status()),
            Err(e) => last = e.to_string(),
        }
        log::debug!("attempt {} for {url} failed: {last}", attempt + 1);
    }
    (Err(last), cfg.retries)
}

fn store(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("part");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Downloads every (date, tile) pair of the request with at most
/// `cfg.concurrency` requests in flight. Tiles already recorded in the
/// manifest whose file checksum still matches are skipped. Failed tiles are
/// recorded, not fatal, unless every tile failed.
pub fn download(req: &DownloadRequest, cfg: &DownloadConfig) -> Result<DownloadReport, GibsError> {
    req.validate()?;
    if cfg.concurrency == 0 {
        return Err(GibsError::Request("concurrency must be at least 1".into()));
    }
    let tiles = bbox_to_tiles(&req.bbox, req.zoom)?;
    let product_dir = req.out_dir.join(&req.product_id);
    fs::create_dir_all(&product_dir)?;
    let manifest_path = product_dir.join(MANIFEST_NAME);
    let mut book: BTreeMap<(NaiveDate, u32, u32, u32), ManifestRow> = if manifest_path.exists() {
        read_manifest(&manifest_path)?
            .into_iter()
            .map(|r| (r.key(), r))
            .collect()
    } else {
        BTreeMap::new()
    };

    let mut rows = Vec::new();
    let mut jobs = Vec::new();
    for date in req.dates() {
        for &tile in &tiles {
            let path = tile_path(
                &req.out_dir,
                &req.product_id,
                date,
                req.zoom,
                tile,
                &cfg.extension,
            );
            let cached = book
                .get(&(date, req.zoom, tile.row, tile.col))
                .filter(|r| r.status == TileStatus::Ok)
                .filter(|r| {
                    fs::read(&path)
                        .is_ok_and(|b| r.sha256.as_deref() == Some(sha256_hex(&b).as_str()))
                });
            match cached {
                Some(r) => rows.push(r.clone()),
                None => jobs.push(Job {
                    date,
                    tile,
                    url: render(&cfg.endpoint, req, cfg, date, tile),
                    path,
                }),
            }
        }
    }
    let skipped = rows.len();

    if !jobs.is_empty() {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()?;
        let next = AtomicUsize::new(0);
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|s| {
            for _ in 0..cfg.concurrency.min(jobs.len()) {
                let tx = tx.clone();
                let (client, jobs, next) = (&client, &jobs, &next);
                s.spawn(move || loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(job) = jobs.get(i) else { break };
                    let (body, retries) = fetch(client, &job.url, cfg);
                    let row = ManifestRow {
                        date: job.date,
                        zoom: req.zoom,
                        tile: job.tile,
                        bytes: None,
                        sha256: None,
                        retries,
                        status: TileStatus::Ok,
                    };
                    let row = match body
                        .and_then(|b| store(&job.path, &b).map(|_| b).map_err(|e| e.to_string()))
                    {
                        Ok(b) => ManifestRow {
                            bytes: Some(b.len() as u64),
                            sha256: Some(sha256_hex(&b)),
                            ..row
                        },
                        Err(e) => ManifestRow {
                            status: TileStatus::Failed(e),
                            ..row
                        },
                    };
                    if tx.send(row).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            rows.extend(rx);
        });
    }

    rows.sort_by_key(|r| r.key());
    let failed = rows.iter().filter(|r| r.status != TileStatus::Ok).count();
    let fetched = rows.len() - skipped - failed;
    for r in &rows {
        book.insert(r.key(), r.clone());
    }
    write_manifest(&manifest_path, &book.into_values().collect::<Vec<_>>())?;
    log::info!("{fetched} fetched, {skipped} skipped, {failed} failed");
    if failed > 0 && failed == rows.len() {
        return Err(GibsError::AllFailed(failed));
    }
    Ok(DownloadReport {
        manifest_path,
        rows,
        fetched,
        skipped,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_rows_round_trip() {
        let rows = vec![
            ManifestRow {
                date: NaiveDate::from_ymd_opt(2021, 1, 2).unwrap(),
                zoom: 3,
                tile: TileId { col: 4, row: 1 },
                bytes: Some(12),
                sha256: Some("ab".repeat(32)),
                retries: 2,
                status: TileStatus::Ok,
            },
            ManifestRow {
                date: NaiveDate::from_ymd_opt(2021, 1, 3).unwrap(),
                zoom: 3,
                tile: TileId { col: 5, row: 1 },
                bytes: None,
                sha256: None,
                retries: 3,
                status: TileStatus::Failed("HTTP 500\tInternal".into()),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_NAME);
        write_manifest(&p, &rows).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back[0], rows[0]);
        assert_eq!(
            back[1].status,
            TileStatus::Failed("HTTP 500 Internal".into())
        );
    }

    #[test]
    fn template_and_paths() {
        let req = DownloadRequest {
            product_id: "P".into(),
            date_from: NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
            date_to: NaiveDate::from_ymd_opt(2021, 1, 3).unwrap(),
            bbox: BBox::whole_globe(),
            zoom: 2,
            out_dir: PathBuf::from("out"),
        };
        assert_eq!(req.dates().len(), 3);
        let cfg = DownloadConfig::default();
        let url = render(
            DEFAULT_ENDPOINT,
            &req,
            &cfg,
            req.date_from,
            TileId { col: 6, row: 1 },
        );
        assert!(
            url.ends_with("/P/default/2021-01-01/250m/2/1/6.jpg"),
            "{url}"
        );
        let p = tile_path(
            Path::new("out"),
            "P",
            req.date_from,
            2,
            TileId { col: 6, row: 1 },
            "jpg",
        );
        assert_eq!(p, Path::new("out/P/2021-01-01/2_1_6.jpg"));
        let bad = DownloadRequest {
            product_id: "../x".into(),
            ..req.clone()
        };
        assert!(bad.validate().is_err());
        let reversed = DownloadRequest {
            date_from: req.date_to,
            date_to: req.date_from,
            ..req
        };
        assert!(reversed.validate().is_err());
    }
}
