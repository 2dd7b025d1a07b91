//! Reading and writing of caption shards, embedding shards, class
//! specifications, labeled example sets and corpus manifests.
//!
//! Formats:
//!
//! * caption shard: UTF-8, one JSON object per line, `{"id", "caption", "uri"?}`
//! * embedding shard: `NPEMB001`, `dim: u32 LE`, `count: u64 LE`, then
//!   `count * dim` f32 LE values, row-major
//! * class spec file: `{"classes": [{"class_index", "name", "aliases", "text_embedding"}]}`
//! * labels file: one unsigned class index per line
//! * corpus manifest: `{"dim", "shards": [{"captions", "embeddings"}]}`, shard
//!   paths relative to the manifest's directory

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"NPEMB001";
const EMBEDDING_HEADER_LEN: usize = 8 + 4 + 8;

pub const DEFAULT_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: u64,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
}

impl CaptionRecord {
    pub fn new(id: u64, caption: impl Into<String>) -> Self {
        Self {
            id,
            caption: caption.into(),
            uri: None,
        }
    }
}

/// Dense row-major matrix of f32 embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ShapeMismatch("dim must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut m = Self::new(dim, Vec::with_capacity(rows.len() * dim))?;
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn extend(&mut self, other: &EmbeddingMatrix) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    /// Largest deviation of a row norm from 1.
    pub fn max_norm_deviation(&self) -> f64 {
        self.rows()
            .map(|r| (linalg::norm(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Rescales every row to unit L2 norm.
pub fn normalize_embeddings(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (row, r) in m.rows().enumerate() {
        let n = linalg::normalized(r).ok_or(Error::ZeroVector { row })?;
        data.extend_from_slice(&n);
    }
    Ok(EmbeddingMatrix { dim: m.dim, data })
}

fn parse_caption_line(line: &str, lineno: usize) -> Result<CaptionRecord> {
    serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
        line: lineno,
        message: e.to_string(),
    })
}

/// Reads a caption shard in file order. Blank lines are skipped.
pub fn read_caption_shard(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::MalformedRecord {
                line: i + 1,
                message: "invalid UTF-8".into(),
            },
            _ => Error::io(path, e),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_caption_line(&line, i + 1)?;
        if !seen.insert(rec.id) {
            return Err(Error::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_caption_shard(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("caption record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Decodes an embedding shard from its on-disk bytes.
pub fn decode_embedding_shard(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < EMBEDDING_HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, header needs {EMBEDDING_HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(Error::MalformedHeader("dim is zero".into()));
    }
    let expected = count
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::MalformedHeader("count * dim overflows".into()))?;
    let payload = &bytes[EMBEDDING_HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len() as u64,
        });
    }
    let mut data = Vec::with_capacity(payload.len() / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                row: i / dim,
                col: i % dim,
            });
        }
        data.push(v);
    }
    Ok(EmbeddingMatrix { dim, data })
}

pub fn encode_embedding_shard(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + m.data.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    out.extend_from_slice(&(m.count() as u64).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_embedding_shard(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding_shard(&bytes)
}

pub fn write_embedding_shard(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embedding_shard(m)).map_err(|e| Error::io(path, e))
}

/// Captions paired row-for-row with their embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedShard {
    pub captions: Vec<CaptionRecord>,
    pub embeddings: EmbeddingMatrix,
}

pub fn validate_shard_pair(
    captions: Vec<CaptionRecord>,
    embeddings: EmbeddingMatrix,
) -> Result<PairedShard> {
    if captions.len() != embeddings.count() {
        return Err(Error::CountMismatch {
            captions: captions.len(),
            embeddings: embeddings.count(),
        });
    }
    Ok(PairedShard {
        captions,
        embeddings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub class_index: usize,
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub text_embedding: Vec<f32>,
}

impl ClassSpec {
    /// Name followed by aliases.
    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.name.as_str()).chain(self.aliases.iter().map(String::as_str))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassSpecFile {
    classes: Vec<ClassSpec>,
}

/// Checks names, index contiguity and dimensions, and normalizes the text
/// embeddings in place.
pub fn validate_class_specs(
    mut specs: Vec<ClassSpec>,
    expected_dim: Option<usize>,
) -> Result<Vec<ClassSpec>> {
    let dim = expected_dim.or_else(|| specs.first().map(|s| s.text_embedding.len()));
    for (i, spec) in specs.iter_mut().enumerate() {
        if spec.class_index != i {
            return Err(Error::NonContiguousIndices {
                expected: i,
                found: spec.class_index,
            });
        }
        if spec.name.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line: i,
                message: "class name is empty".into(),
            });
        }
        let dim = dim.unwrap_or(0);
        if spec.text_embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: spec.text_embedding.len(),
            });
        }
        if let Some(col) = spec.text_embedding.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row: i, col });
        }
        spec.text_embedding =
            linalg::normalized(&spec.text_embedding).ok_or(Error::ZeroVector { row: i })?;
    }
    Ok(specs)
}

pub fn parse_class_specs(text: &str, expected_dim: Option<usize>) -> Result<Vec<ClassSpec>> {
    let file: ClassSpecFile = serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut specs = file.classes;
    // accept any listing order; contiguity is checked after sorting
    specs.sort_by_key(|s| s.class_index);
    validate_class_specs(specs, expected_dim)
}

pub fn load_class_specs(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<Vec<ClassSpec>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_class_specs(&text, expected_dim)
}

pub fn write_class_specs(path: impl AsRef<Path>, specs: &[ClassSpec]) -> Result<()> {
    let path = path.as_ref();
    let file = ClassSpecFile {
        classes: specs.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).expect("class specs serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub embedding: Vec<f32>,
    pub class_index: usize,
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|e| Error::MalformedRecord {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pairs an embedding matrix with a label list into labeled examples,
/// normalizing the embeddings and checking labels against `n_classes`.
pub fn labeled_examples(
    embeddings: &EmbeddingMatrix,
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<LabeledExample>> {
    if embeddings.count() != labels.len() {
        return Err(Error::CountMismatch {
            captions: labels.len(),
            embeddings: embeddings.count(),
        });
    }
    let normed = normalize_embeddings(embeddings)?;
    normed
        .rows()
        .zip(labels)
        .enumerate()
        .map(|(i, (row, &label))| {
            if label >= n_classes {
                return Err(Error::LabelOutOfRange {
                    sample: i,
                    label,
                    n_classes,
                });
            }
            Ok(LabeledExample {
                embedding: row.to_vec(),
                class_index: label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardPaths {
    pub captions: PathBuf,
    pub embeddings: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub shards: Vec<ShardPaths>,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl CorpusManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::MalformedRecord {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// A corpus loaded into memory: paired shards with normalized embeddings.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dim: usize,
    pub shards: Vec<PairedShard>,
}

impl Corpus {
    /// Validates dimensions, normalizes embeddings and checks ids are unique
    /// across shards.
    pub fn from_shards(dim: usize, shards: Vec<PairedShard>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(shards.len());
        for shard in shards {
            if shard.embeddings.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: shard.embeddings.dim(),
                });
            }
            for r in &shard.captions {
                if !seen.insert(r.id) {
                    return Err(Error::DuplicateId(r.id));
                }
            }
            let embeddings = normalize_embeddings(&shard.embeddings)?;
            out.push(PairedShard {
                captions: shard.captions,
                embeddings,
            });
        }
        Ok(Self { dim, shards: out })
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = CorpusManifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut shards = Vec::with_capacity(manifest.shards.len());
        for s in &manifest.shards {
            let captions = read_caption_shard(base.join(&s.captions))?;
            let embeddings = read_embedding_shard(base.join(&s.embeddings))?;
            shards.push(validate_shard_pair(captions, embeddings)?);
        }
        Self::from_shards(manifest.dim, shards)
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.captions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &CaptionRecord> {
        self.shards.iter().flat_map(|s| s.captions.iter())
    }

    pub fn embedding_store(&self) -> EmbeddingStore {
        let mut ids = Vec::with_capacity(self.len());
        let mut matrix = EmbeddingMatrix::empty(self.dim);
        for s in &self.shards {
            ids.extend(s.captions.iter().map(|r| r.id));
            matrix
                .extend(&s.embeddings)
                .expect("dims checked on construction");
        }
        EmbeddingStore::new(ids, matrix).expect("ids checked on construction")
    }
}

/// Id-addressed access to normalized corpus embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    ids: Vec<u64>,
    rows: HashMap<u64, usize>,
    matrix: EmbeddingMatrix,
}

impl EmbeddingStore {
    pub fn new(ids: Vec<u64>, matrix: EmbeddingMatrix) -> Result<Self> {
        if ids.len() != matrix.count() {
            return Err(Error::CountMismatch {
                captions: ids.len(),
                embeddings: matrix.count(),
            });
        }
        let mut rows = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if rows.insert(id, i).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(Self { ids, rows, matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.rows.get(&id).map(|&r| self.matrix.row(r))
    }

    pub fn require(&self, id: u64) -> Result<&[f32]> {
        self.get(id).ok_or(Error::MissingEmbedding(id))
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }
}
