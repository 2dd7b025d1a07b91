//! Transductive pool refinement: exact top-k cosine retrieval of pool
//! entries for every test embedding, unioned and de-duplicated.
//!
//! The scan is brute force over fixed-size row chunks. Each chunk keeps its
//! own top k and the chunk winners are merged under the total order
//! (score descending, record id ascending), so the result does not depend on
//! the chunk size or on how many threads scanned the chunks.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{EmbeddingMatrix, EmbeddingStore};
use crate::error::{Error, Result};
use crate::linalg;
use crate::pool::{PoolEntry, PoolStage, PrimingPool};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_CHUNK_ROWS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborHit {
    pub record_id: u64,
    pub score: f32,
    pub rank: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    score: f32,
    id: u64,
}

/// Better candidates sort first.
fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.id.cmp(&b.id))
}

/// Pool embeddings laid out for scanning, rows addressed by record id.
#[derive(Debug, Clone)]
pub struct PoolMatrix {
    ids: Vec<u64>,
    matrix: EmbeddingMatrix,
    chunk_rows: usize,
}

impl PoolMatrix {
    pub fn new(ids: Vec<u64>, matrix: EmbeddingMatrix) -> Result<Self> {
        if ids.len() != matrix.count() {
            return Err(Error::CountMismatch {
                captions: ids.len(),
                embeddings: matrix.count(),
            });
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::DuplicateId(*dup));
        }
        Ok(Self {
            ids,
            matrix,
            chunk_rows: DEFAULT_CHUNK_ROWS,
        })
    }

    /// Gathers the embeddings of every distinct record in `pool`, ascending by id.
    pub fn from_pool(pool: &PrimingPool, store: &EmbeddingStore) -> Result<Self> {
        let ids: Vec<u64> = pool.record_ids().into_iter().collect();
        let mut matrix = EmbeddingMatrix::empty(store.dim());
        for &id in &ids {
            matrix.push_row(store.require(id)?)?;
        }
        Self::new(ids, matrix)
    }

    pub fn with_chunk_rows(mut self, rows: usize) -> Self {
        self.chunk_rows = rows.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyPool);
        }
        if k == 0 {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: query.len(),
            });
        }
        Ok(())
    }

    fn chunk_topk(&self, chunk: usize, query: &[f32], k: usize) -> Vec<Candidate> {
        let start = chunk * self.chunk_rows;
        let end = (start + self.chunk_rows).min(self.len());
        let mut cands: Vec<Candidate> = (start..end)
            .map(|r| Candidate {
                score: linalg::dot(self.matrix.row(r), query),
                id: self.ids[r],
            })
            .collect();
        if cands.len() > k {
            cands.select_nth_unstable_by(k - 1, rank_order);
            cands.truncate(k);
        }
        cands
    }

    fn n_chunks(&self) -> usize {
        self.len().div_ceil(self.chunk_rows)
    }

    fn merge(mut cands: Vec<Candidate>, k: usize) -> Vec<NeighborHit> {
        cands.sort_unstable_by(rank_order);
        cands.truncate(k);
        cands
            .into_iter()
            .enumerate()
            .map(|(rank, c)| NeighborHit {
                record_id: c.id,
                score: c.score,
                rank,
            })
            .collect()
    }

    /// The `min(k, len)` best rows for `query`; chunks are scanned in parallel.
    pub fn topk(&self, query: &[f32], k: usize) -> Result<Vec<NeighborHit>> {
        self.check_query(query, k)?;
        let cands: Vec<Candidate> = (0..self.n_chunks())
            .into_par_iter()
            .flat_map_iter(|c| self.chunk_topk(c, query, k))
            .collect();
        Ok(Self::merge(cands, k))
    }

    fn topk_sequential(&self, query: &[f32], k: usize) -> Vec<NeighborHit> {
        let cands = (0..self.n_chunks())
            .flat_map(|c| self.chunk_topk(c, query, k))
            .collect();
        Self::merge(cands, k)
    }

    /// Top-k for every row of `queries`; queries are processed in parallel.
    pub fn topk_batch(&self, queries: &EmbeddingMatrix, k: usize) -> Result<Vec<Vec<NeighborHit>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        self.check_query(queries.row(0), k)?;
        Ok((0..queries.count())
            .into_par_iter()
            .map(|q| self.topk_sequential(queries.row(q), k))
            .collect())
    }
}

pub fn topk_neighbors(pool: &PoolMatrix, query: &[f32], k: usize) -> Result<Vec<NeighborHit>> {
    pool.topk(query, k)
}

/// Restricts `pool` to the records in `hits`, keeping class and score and
/// ordering each cluster by score descending then id ascending.
fn pool_from_hits(pool: &PrimingPool, hits: &[Vec<NeighborHit>]) -> PrimingPool {
    let retrieved: BTreeSet<u64> = hits.iter().flatten().map(|h| h.record_id).collect();
    let mut clusters: Vec<Vec<PoolEntry>> = pool
        .clusters
        .iter()
        .map(|c| {
            // one entry per record id within a cluster
            let uniq: BTreeMap<u64, PoolEntry> = c
                .iter()
                .filter(|e| retrieved.contains(&e.record_id))
                .map(|e| (e.record_id, *e))
                .collect();
            uniq.into_values().collect()
        })
        .collect();
    for c in &mut clusters {
        c.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.record_id.cmp(&b.record_id))
        });
    }
    PrimingPool {
        stage: PoolStage::Transduced,
        clusters,
    }
}

fn check_transduct_input(pool: &PrimingPool) -> Result<()> {
    if pool.stage != PoolStage::ConsistencyFiltered {
        return Err(Error::StageMismatch {
            expected: PoolStage::ConsistencyFiltered.to_string(),
            found: pool.stage.to_string(),
        });
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(())
}

/// Union over test queries of each query's top-k pool entries.
pub fn transductive_filter(
    pool: &PrimingPool,
    store: &EmbeddingStore,
    test: &EmbeddingMatrix,
    k: usize,
) -> Result<PrimingPool> {
    check_transduct_input(pool)?;
    let matrix = PoolMatrix::from_pool(pool, store)?;
    let hits = matrix.topk_batch(test, k)?;
    Ok(pool_from_hits(pool, &hits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub queries: usize,
    pub pool_size: usize,
    pub k: usize,
    pub total_micros: f64,
    pub mean_micros_per_query: f64,
}

/// Times the full transductive retrieval (pool gather, scan, union) and
/// returns the same pool `transductive_filter` produces.
pub fn retrieval_bench(
    pool: &PrimingPool,
    store: &EmbeddingStore,
    test: &EmbeddingMatrix,
    k: usize,
) -> Result<(TimingReport, PrimingPool)> {
    check_transduct_input(pool)?;
    let start = Instant::now();
    let matrix = PoolMatrix::from_pool(pool, store)?;
    let hits = matrix.topk_batch(test, k)?;
    let out = pool_from_hits(pool, &hits);
    let total_micros = start.elapsed().as_nanos() as f64 / 1_000.0;
    let queries = test.count();
    Ok((
        TimingReport {
            queries,
            pool_size: matrix.len(),
            k,
            total_micros,
            mean_micros_per_query: if queries == 0 {
                0.0
            } else {
                total_micros / queries as f64
            },
        },
        out,
    ))
}
