//! Priming pool construction: phrase-search clusters per class, zero-shot
//! consistency filtering, per-class capping and id exclusion.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{ClassSpec, EmbeddingStore};
use crate::error::{Error, Result};
use crate::head::ClassifierHead;
use crate::linalg;
use crate::text_index::InvertedIndex;

/// Default per-class cap applied before transduction.
pub const DEFAULT_CAP: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub record_id: u64,
    pub class_index: usize,
    /// Cosine of the entry's embedding with its class's zero-shot column.
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStage {
    Raw,
    ConsistencyFiltered,
    Transduced,
}

impl fmt::Display for PoolStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolStage::Raw => "raw",
            PoolStage::ConsistencyFiltered => "consistency_filtered",
            PoolStage::Transduced => "transduced",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimingPool {
    pub stage: PoolStage,
    pub clusters: Vec<Vec<PoolEntry>>,
}

impl PrimingPool {
    pub fn empty(n_classes: usize, stage: PoolStage) -> Self {
        Self {
            stage,
            clusters: vec![Vec::new(); n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.clusters.len()
    }

    /// Total entries over all clusters.
    pub fn len(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &PoolEntry> {
        self.clusters.iter().flatten()
    }

    pub fn record_ids(&self) -> BTreeSet<u64> {
        self.entries().map(|e| e.record_id).collect()
    }

    fn require_stage(&self, accepted: &[PoolStage]) -> Result<()> {
        if accepted.contains(&self.stage) {
            return Ok(());
        }
        Err(Error::StageMismatch {
            expected: accepted
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(" or "),
            found: self.stage.to_string(),
        })
    }
}

/// Zero-shot head: column `c` is the normalized text embedding of class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotHead(pub ClassifierHead);

impl std::ops::Deref for ZeroShotHead {
    type Target = ClassifierHead;

    fn deref(&self) -> &ClassifierHead {
        &self.0
    }
}

pub fn build_zero_shot_head(specs: &[ClassSpec]) -> Result<ZeroShotHead> {
    let dim = specs.first().map_or(0, |s| s.text_embedding.len());
    let mut columns = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        if s.text_embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: s.text_embedding.len(),
            });
        }
        columns.push(linalg::normalized(&s.text_embedding).ok_or(Error::ZeroVector { row: i })?);
    }
    Ok(ZeroShotHead(ClassifierHead::from_columns(dim, &columns)?))
}

/// A phrase that could not be searched while building a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseIssue {
    pub class_index: usize,
    pub phrase: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolBuild {
    pub pool: PrimingPool,
    pub issues: Vec<PhraseIssue>,
}

/// Builds the raw pool: cluster `c` is the union of phrase-search hits for
/// the class name and each alias, in ascending record id order. A record
/// matching several classes lands in each of their clusters.
pub fn build_pool(
    index: &InvertedIndex,
    specs: &[ClassSpec],
    head: &ZeroShotHead,
    store: &EmbeddingStore,
) -> Result<PoolBuild> {
    if head.n_classes() != specs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} class specs, head has {} columns",
            specs.len(),
            head.n_classes()
        )));
    }
    if head.dim() != store.dim() {
        return Err(Error::DimensionMismatch {
            expected: store.dim(),
            found: head.dim(),
        });
    }
    let per_class: Vec<Result<(Vec<PoolEntry>, Vec<PhraseIssue>)>> = specs
        .par_iter()
        .enumerate()
        .map(|(c, spec)| {
            let mut ids = BTreeSet::new();
            let mut issues = Vec::new();
            for phrase in spec.phrases() {
                match index.phrase_search(phrase) {
                    Ok(hits) => ids.extend(hits),
                    Err(e) => issues.push(PhraseIssue {
                        class_index: c,
                        phrase: phrase.to_owned(),
                        error: e.kind().to_owned(),
                    }),
                }
            }
            let column = head.column(c);
            let entries = ids
                .into_iter()
                .map(|id| {
                    let v = store.require(id)?;
                    Ok(PoolEntry {
                        record_id: id,
                        class_index: c,
                        score: linalg::dot(v, column),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((entries, issues))
        })
        .collect();

    let mut clusters = Vec::with_capacity(specs.len());
    let mut issues = Vec::new();
    for r in per_class {
        let (entries, iss) = r?;
        clusters.push(entries);
        issues.extend(iss);
    }
    Ok(PoolBuild {
        pool: PrimingPool {
            stage: PoolStage::Raw,
            clusters,
        },
        issues,
    })
}

/// Keeps entry `(x, c)` iff the zero-shot argmax for `x` is `c` (ties to
/// the lowest class index), so each record survives in at most one cluster.
pub fn consistency_filter(
    pool: &PrimingPool,
    head: &ZeroShotHead,
    store: &EmbeddingStore,
) -> Result<PrimingPool> {
    pool.require_stage(&[PoolStage::Raw, PoolStage::ConsistencyFiltered])?;
    if head.n_classes() != pool.n_classes() {
        return Err(Error::ShapeMismatch(format!(
            "pool has {} classes, head has {}",
            pool.n_classes(),
            head.n_classes()
        )));
    }
    let clusters = pool
        .clusters
        .par_iter()
        .enumerate()
        .map(|(c, cluster)| {
            let mut kept = Vec::with_capacity(cluster.len());
            for e in cluster {
                let v = store.require(e.record_id)?;
                if head.predict(v)? == c {
                    kept.push(*e);
                }
            }
            Ok(kept)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PrimingPool {
        stage: PoolStage::ConsistencyFiltered,
        clusters,
    })
}

/// Keeps the `m` highest-scoring entries per cluster (ties to the lower
/// record id). Kept entries stay in their original relative order.
pub fn cap_per_class(pool: &PrimingPool, m: usize) -> PrimingPool {
    let clusters = pool
        .clusters
        .iter()
        .map(|cluster| {
            if cluster.len() <= m {
                return cluster.clone();
            }
            let mut order: Vec<usize> = (0..cluster.len()).collect();
            order.sort_by(|&a, &b| {
                let (ea, eb) = (&cluster[a], &cluster[b]);
                eb.score
                    .total_cmp(&ea.score)
                    .then(ea.record_id.cmp(&eb.record_id))
            });
            let mut keep = vec![false; cluster.len()];
            for &i in &order[..m] {
                keep[i] = true;
            }
            cluster
                .iter()
                .zip(keep)
                .filter_map(|(e, k)| k.then_some(*e))
                .collect()
        })
        .collect();
    PrimingPool {
        stage: pool.stage,
        clusters,
    }
}

pub fn exclude_ids(pool: &PrimingPool, excluded: &HashSet<u64>) -> PrimingPool {
    PrimingPool {
        stage: pool.stage,
        clusters: pool
            .clusters
            .iter()
            .map(|c| {
                c.iter()
                    .filter(|e| !excluded.contains(&e.record_id))
                    .copied()
                    .collect()
            })
            .collect(),
    }
}

/// First line of a pool file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolHeader {
    pub stage: PoolStage,
    pub n_classes: usize,
    pub dim: usize,
    pub created_from: String,
}

pub fn write_pool(
    path: impl AsRef<Path>,
    pool: &PrimingPool,
    dim: usize,
    created_from: &str,
) -> Result<()> {
    let path = path.as_ref();
    let header = PoolHeader {
        stage: pool.stage,
        n_classes: pool.n_classes(),
        dim,
        created_from: created_from.to_owned(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io)?;
    for e in pool.entries() {
        writeln!(w, "{}", serde_json::to_string(e).unwrap()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_pool(path: impl AsRef<Path>) -> Result<(PoolHeader, PrimingPool)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let malformed = |line: usize, message: String| Error::MalformedRecord { line, message };

    let header: PoolHeader = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?;
            }
            None => return Err(malformed(1, "missing pool header".into())),
        }
    };
    let mut pool = PrimingPool::empty(header.n_classes, header.stage);
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: PoolEntry =
            serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?;
        if e.class_index >= header.n_classes {
            return Err(Error::UnknownClass {
                class: e.class_index,
                n_classes: header.n_classes,
            });
        }
        if !seen.insert((e.class_index, e.record_id)) {
            return Err(Error::DuplicateId(e.record_id));
        }
        pool.clusters[e.class_index].push(e);
    }
    Ok((header, pool))
}
