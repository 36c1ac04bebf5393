//! On-disk embedding matrix and metadata sidecar.
//!
//! ```text
//! <path>            magic b"CUR1" | count: u32 LE | dim: u32 LE | count*dim f32 LE, row-major
//! <path>.meta.tsv   item_id \t uri \t date \t resolution_level \t product \t true_label
//! ```
//!
//! Absent optional fields are written as `-`. Tabs and newlines are not
//! allowed inside any field.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CUR1";
pub const HEADER_LEN: usize = 12;
pub const ABSENT: &str = "-";
const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:02x?}, expected \"CUR1\"")]
    BadMagic([u8; 4]),
    #[error("file shorter than the {HEADER_LEN}-byte header")]
    ShortHeader,
    #[error("payload is {actual} bytes, header requires {expected}")]
    Truncated { expected: u64, actual: u64 },
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("vector buffer holds {actual} floats, expected {expected}")]
    Shape { expected: usize, actual: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("sidecar has {actual} rows, embedding file has {expected}")]
    SidecarRows { expected: usize, actual: usize },
    #[error("duplicate item_id {0:?}")]
    DuplicateItem(String),
    #[error("metadata row {row}: {reason}")]
    Field { row: usize, reason: String },
}

/// Per-row metadata. `row_id` is assigned by [`EmbeddingSet::new`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ItemMeta {
    pub row_id: usize,
    pub item_id: String,
    pub uri: String,
    pub date: Option<NaiveDate>,
    pub resolution_level: Option<u32>,
    pub product: Option<String>,
    pub true_label: Option<i64>,
}

impl ItemMeta {
    pub fn new(item_id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            item_id: item_id.into(),
            uri: uri.into(),
            ..Default::default()
        }
    }

    pub fn with_product(mut self, product: impl Into<String>) -> Self {
        self.product = Some(product.into());
        self
    }

    pub fn with_date(mut self, date: NaiveDate) -> Self {
        self.date = Some(date);
        self
    }

    pub fn with_resolution(mut self, level: u32) -> Self {
        self.resolution_level = Some(level);
        self
    }

    pub fn with_label(mut self, label: i64) -> Self {
        self.true_label = Some(label);
        self
    }

    fn validate(&self, row: usize) -> Result<(), StoreError> {
        let bad = |reason: String| Err(StoreError::Field { row, reason });
        if self.item_id.is_empty() {
            return bad("empty item_id".into());
        }
        for (name, value) in [
            ("item_id", Some(self.item_id.as_str())),
            ("uri", Some(self.uri.as_str())),
            ("product", self.product.as_deref()),
        ] {
            if let Some(v) = value {
                if v.contains(['\t', '\n', '\r']) {
                    return bad(format!("{name} contains a tab or newline"));
                }
            }
        }
        if self.product.as_deref() == Some(ABSENT) || self.product.as_deref() == Some("") {
            return bad(format!("product may not be empty or {ABSENT:?}"));
        }
        Ok(())
    }
}

/// Immutable N x D matrix of embeddings with aligned metadata.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: Vec<f32>,
    meta: Vec<ItemMeta>,
    by_item: HashMap<String, usize>,
}

impl PartialEq for EmbeddingSet {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.meta == other.meta && self.vectors == other.vectors
    }
}

impl EmbeddingSet {
    pub fn new(dim: usize, vectors: Vec<f32>, mut meta: Vec<ItemMeta>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::ZeroDim);
        }
        let expected = meta.len() * dim;
        if vectors.len() != expected {
            return Err(StoreError::Shape {
                expected,
                actual: vectors.len(),
            });
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut by_item = HashMap::with_capacity(meta.len());
        for (row, m) in meta.iter_mut().enumerate() {
            m.row_id = row;
            m.validate(row)?;
            if by_item.insert(m.item_id.clone(), row).is_some() {
                return Err(StoreError::DuplicateItem(m.item_id.clone()));
            }
        }
        Ok(Self {
            dim,
            vectors,
            meta,
            by_item,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn meta(&self, row: usize) -> &ItemMeta {
        &self.meta[row]
    }

    pub fn metas(&self) -> &[ItemMeta] {
        &self.meta
    }

    pub fn row_of(&self, item_id: &str) -> Option<usize> {
        self.by_item.get(item_id).copied()
    }

    /// Same metadata, new vectors (possibly of another dimension).
    pub fn with_vectors(&self, dim: usize, vectors: Vec<f32>) -> Result<Self, StoreError> {
        Self::new(dim, vectors, self.meta.clone())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.tsv");
    PathBuf::from(os)
}

/// Writes the vector file and its `.meta.tsv` sidecar. Returns the size of
/// the vector file in bytes.
pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<u64, StoreError> {
    let count = u32::try_from(set.len()).map_err(|_| StoreError::Field {
        row: set.len(),
        reason: "row count exceeds u32".into(),
    })?;
    let dim = u32::try_from(set.dim()).map_err(|_| StoreError::ZeroDim)?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    out.write_all(&count.to_le_bytes())?;
    out.write_all(&dim.to_le_bytes())?;
    for v in set.vectors() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;

    let mut side = BufWriter::new(File::create(sidecar_path(path))?);
    for m in set.metas() {
        writeln!(side, "{}", format_meta_line(m))?;
    }
    side.flush()?;

    Ok((HEADER_LEN + set.vectors().len() * 4) as u64)
}

fn format_meta_line(m: &ItemMeta) -> String {
    fn opt<T: ToString>(v: &Option<T>) -> String {
        v.as_ref().map_or_else(|| ABSENT.to_string(), T::to_string)
    }
    let date = m
        .date
        .map_or_else(|| ABSENT.to_string(), |d| d.format(DATE_FORMAT).to_string());
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        m.item_id,
        m.uri,
        date,
        opt(&m.resolution_level),
        opt(&m.product),
        opt(&m.true_label)
    )
}

/// Loads `path` with its default sidecar at `path.meta.tsv`.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet, StoreError> {
    load_embeddings_with_meta(path, &sidecar_path(path))
}

pub fn load_embeddings_with_meta(
    path: &Path,
    meta_path: &Path,
) -> Result<EmbeddingSet, StoreError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let (dim, vectors) = decode_vectors(&bytes)?;
    let count = vectors.len() / dim;

    let mut text = String::new();
    File::open(meta_path)?.read_to_string(&mut text)?;
    let meta = parse_sidecar(&text)?;
    if meta.len() != count {
        return Err(StoreError::SidecarRows {
            expected: count,
            actual: meta.len(),
        });
    }
    EmbeddingSet::new(dim, vectors, meta)
}

/// Parses the binary vector file. Returns `(dim, vectors)`.
pub fn decode_vectors(bytes: &[u8]) -> Result<(usize, Vec<f32>), StoreError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(StoreError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(StoreError::ShortHeader);
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = count * dim * 4;
    if payload.len() as u64 != expected {
        return Err(StoreError::Truncated {
            expected,
            actual: payload.len() as u64,
        });
    }
    let vectors: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
        return Err(StoreError::NonFinite {
            row: pos / dim as usize,
            col: pos % dim as usize,
        });
    }
    Ok((dim as usize, vectors))
}

pub fn parse_sidecar(text: &str) -> Result<Vec<ItemMeta>, StoreError> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(row, line)| parse_meta_line(row, line))
        .collect()
}

fn parse_meta_line(row: usize, line: &str) -> Result<ItemMeta, StoreError> {
    let bad = |reason: String| StoreError::Field { row, reason };
    if line.contains('\r') {
        return Err(bad("carriage return inside a field".into()));
    }
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(bad(format!(
            "expected 6 tab-separated fields, found {}",
            fields.len()
        )));
    }
    let optional = |s: &str| (s != ABSENT).then(|| s.to_string());

    let date = match optional(fields[2]) {
        None => None,
        Some(s) => Some(
            NaiveDate::parse_from_str(&s, DATE_FORMAT)
                .map_err(|e| bad(format!("invalid date {s:?}: {e}")))?,
        ),
    };
    let resolution_level = match optional(fields[3]) {
        None => None,
        Some(s) => Some(
            s.parse()
                .map_err(|_| bad(format!("invalid resolution_level {s:?}")))?,
        ),
    };
    let true_label = match optional(fields[5]) {
        None => None,
        Some(s) => Some(
            s.parse()
                .map_err(|_| bad(format!("invalid true_label {s:?}")))?,
        ),
    };
    Ok(ItemMeta {
        row_id: row,
        item_id: fields[0].to_string(),
        uri: fields[1].to_string(),
        date,
        resolution_level,
        product: optional(fields[4]),
        true_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_set(count: usize, dim: usize) -> EmbeddingSet {
        let vectors = (0..count * dim).map(|i| i as f32 * 0.5 - 3.0).collect();
        let meta = (0..count)
            .map(|i| ItemMeta::new(format!("item-{i}"), format!("tiles/{i}.png")))
            .collect();
        EmbeddingSet::new(dim, vectors, meta).unwrap()
    }

    #[test]
    fn empty_set_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.cur");
        let set = EmbeddingSet::new(8, vec![], vec![]).unwrap();
        assert_eq!(write_embeddings(&set, &path).unwrap(), 12);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 12);
        assert_eq!(std::fs::read_to_string(sidecar_path(&path)).unwrap(), "");
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn two_by_three_is_36_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.cur");
        assert_eq!(write_embeddings(&small_set(2, 3), &path).unwrap(), 36);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 36);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = b"XXXX".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1.0f32.to_le_bytes());
        assert!(matches!(decode_vectors(&bytes), Err(StoreError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend(5u32.to_le_bytes());
        bytes.extend(4u32.to_le_bytes());
        bytes.extend(vec![0u8; 79]);
        assert!(matches!(
            decode_vectors(&bytes),
            Err(StoreError::Truncated {
                expected: 80,
                actual: 79
            })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(1.0f32.to_le_bytes());
        bytes.extend(f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_vectors(&bytes),
            Err(StoreError::NonFinite { row: 0, col: 1 })
        ));
        let meta = vec![ItemMeta::new("a", "a")];
        assert!(EmbeddingSet::new(1, vec![f32::INFINITY], meta).is_err());
    }

    #[test]
    fn rejects_sidecar_mismatch_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.cur");
        write_embeddings(&small_set(3, 2), &path).unwrap();
        let side = sidecar_path(&path);
        let text = std::fs::read_to_string(&side).unwrap();
        let two_lines: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        std::fs::write(&side, two_lines).unwrap();
        assert!(matches!(
            load_embeddings(&path),
            Err(StoreError::SidecarRows {
                expected: 3,
                actual: 2
            })
        ));

        let dup = "a\tu\t-\t-\t-\t-\na\tu\t-\t-\t-\t-\nb\tu\t-\t-\t-\t-\n";
        std::fs::write(&side, dup).unwrap();
        assert!(matches!(load_embeddings(&path), Err(StoreError::DuplicateItem(id)) if id == "a"));
    }

    #[test]
    fn sidecar_fields_round_trip() {
        let m = ItemMeta::new("viirs-0001", "2021/01/05/3_4_7.jpg")
            .with_date(NaiveDate::from_ymd_opt(2021, 1, 5).unwrap())
            .with_resolution(3)
            .with_product("VIIRS_SNPP_CorrectedReflectance_TrueColor")
            .with_label(-2);
        let line = format_meta_line(&m);
        assert_eq!(
            line,
            "viirs-0001\t2021/01/05/3_4_7.jpg\t2021-01-05\t3\tVIIRS_SNPP_CorrectedReflectance_TrueColor\t-2"
        );
        assert_eq!(parse_meta_line(0, &line).unwrap(), m);
        assert!(parse_meta_line(0, "a\tb\t2021-02-30\t-\t-\t-").is_err());
        assert!(parse_meta_line(0, "a\tb\t-\t-\t-").is_err());
    }

    #[test]
    fn rejects_tabs_inside_fields() {
        let meta = vec![ItemMeta::new("a\tb", "u")];
        assert!(matches!(
            EmbeddingSet::new(1, vec![0.0], meta),
            Err(StoreError::Field { row: 0, .. })
        ));
        let meta = vec![ItemMeta::new("a", "u").with_product("-")];
        assert!(EmbeddingSet::new(1, vec![0.0], meta).is_err());
    }
}
