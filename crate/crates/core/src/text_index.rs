//! Positional inverted index over caption tokens with exact phrase search.
//!
//! Tokens are maximal runs of alphanumeric code points, lowercased with the
//! simple (single code point) Unicode mapping. A phrase matches a record when
//! the phrase's tokens occur consecutively and in order in the record's token
//! sequence. Matching is whole-token only: "cat" never hits "category".

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{CaptionRecord, PairedShard};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 8] = b"NPIDX001";

fn simple_lowercase(c: char) -> char {
    if c.is_ascii() {
        return c.to_ascii_lowercase();
    }
    // `to_lowercase` applies the full mapping; its first code point is the
    // simple mapping for every character whose full mapping expands.
    c.to_lowercase().next().unwrap_or(c)
}

/// Calls `f(position, token)` for each token of `text`.
pub fn for_each_token(text: &str, mut f: impl FnMut(u32, &str)) {
    let mut buf = String::new();
    let mut pos = 0u32;
    for c in text.chars() {
        if c.is_alphanumeric() {
            buf.push(simple_lowercase(c));
        } else if !buf.is_empty() {
            f(pos, &buf);
            pos += 1;
            buf.clear();
        }
    }
    if !buf.is_empty() {
        f(pos, &buf);
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for_each_token(text, |_, t| out.push(t.to_owned()));
    out
}

/// One occurrence of a token: dense record ordinal and token offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Posting {
    pub doc: u32,
    pub position: u32,
}

/// Bijective token text <-> dense id mapping. Ids follow lexicographic token
/// order so they do not depend on how the build was partitioned.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenTable {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl TokenTable {
    fn from_sorted(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertedIndex {
    table: TokenTable,
    postings: Vec<Vec<Posting>>,
    /// Record ids in ascending order; a posting's `doc` indexes this.
    record_ids: Vec<u64>,
}

type ChunkPostings = HashMap<String, Vec<Posting>>;

fn index_chunk(base: usize, docs: &[(u64, &str)]) -> ChunkPostings {
    let mut map: ChunkPostings = HashMap::new();
    for (offset, (_, text)) in docs.iter().enumerate() {
        let doc = (base + offset) as u32;
        for_each_token(text, |position, tok| {
            let p = Posting { doc, position };
            match map.get_mut(tok) {
                Some(list) => list.push(p),
                None => {
                    map.insert(tok.to_owned(), vec![p]);
                }
            }
        });
    }
    map
}

impl InvertedIndex {
    /// Indexes the given records. Ids must be unique.
    ///
    /// Records are partitioned across the current rayon pool; the merge
    /// walks partitions in record-id order so the result is identical for
    /// any worker count.
    pub fn build<'a, I>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a CaptionRecord>,
    {
        let mut docs: Vec<(u64, &str)> = records
            .into_iter()
            .map(|r| (r.id, r.caption.as_str()))
            .collect();
        docs.sort_unstable_by_key(|d| d.0);
        if let Some(w) = docs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateId(w[0].0));
        }
        if docs.len() > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "{} records exceed the index capacity",
                docs.len()
            )));
        }

        let n_chunks = (rayon::current_num_threads() * 4).max(1);
        let chunk_len = docs.len().div_ceil(n_chunks).max(1024);
        let chunks: Vec<ChunkPostings> = docs
            .par_chunks(chunk_len)
            .enumerate()
            .map(|(i, chunk)| index_chunk(i * chunk_len, chunk))
            .collect();

        let vocab: BTreeSet<&str> = chunks
            .iter()
            .flat_map(|c| c.keys().map(String::as_str))
            .collect();
        let tokens: Vec<String> = vocab.into_iter().map(str::to_owned).collect();
        let postings: Vec<Vec<Posting>> = tokens
            .par_iter()
            .map(|t| {
                let mut list = Vec::new();
                for c in &chunks {
                    if let Some(part) = c.get(t) {
                        list.extend_from_slice(part);
                    }
                }
                list
            })
            .collect();

        Ok(Self {
            table: TokenTable::from_sorted(tokens),
            postings,
            record_ids: docs.into_iter().map(|d| d.0).collect(),
        })
    }

    pub fn build_from_shards(shards: &[PairedShard]) -> Result<Self> {
        Self::build(shards.iter().flat_map(|s| s.captions.iter()))
    }

    pub fn record_count(&self) -> usize {
        self.record_ids.len()
    }

    pub fn token_table(&self) -> &TokenTable {
        &self.table
    }

    pub fn record_ids(&self) -> &[u64] {
        &self.record_ids
    }

    /// Occurrences of `token` as `(record id, position)` pairs, ascending.
    pub fn postings(&self, token: &str) -> Vec<(u64, u32)> {
        self.table
            .id(token)
            .map(|id| {
                self.postings[id as usize]
                    .iter()
                    .map(|p| (self.record_ids[p.doc as usize], p.position))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn posting_len(&self, token: &str) -> usize {
        self.table
            .id(token)
            .map_or(0, |id| self.postings[id as usize].len())
    }

    fn query_lists(&self, phrase: &str) -> Result<Option<Vec<&[Posting]>>> {
        let tokens = tokenize(phrase);
        if tokens.is_empty() {
            return Err(Error::EmptyQuery(phrase.to_owned()));
        }
        let mut lists = Vec::with_capacity(tokens.len());
        for t in &tokens {
            match self.table.id(t) {
                Some(id) => lists.push(self.postings[id as usize].as_slice()),
                None => return Ok(None),
            }
        }
        Ok(Some(lists))
    }

    fn matching_docs(lists: &[&[Posting]]) -> Vec<u32> {
        // drive from the shortest list, verify the other offsets by binary search
        let (anchor, driver) = lists
            .iter()
            .enumerate()
            .min_by_key(|(i, l)| (l.len(), *i))
            .map(|(i, l)| (i as u32, *l))
            .expect("phrase has at least one token");
        let mut docs: Vec<u32> = Vec::new();
        for p in driver {
            if docs.last() == Some(&p.doc) || p.position < anchor {
                continue;
            }
            let start = p.position - anchor;
            let hit = lists.iter().enumerate().all(|(j, list)| {
                j as u32 == anchor
                    || list
                        .binary_search(&Posting {
                            doc: p.doc,
                            position: start + j as u32,
                        })
                        .is_ok()
            });
            if hit {
                docs.push(p.doc);
            }
        }
        docs
    }

    /// Ids of records containing the phrase's tokens consecutively, ascending.
    pub fn phrase_search(&self, phrase: &str) -> Result<Vec<u64>> {
        Ok(match self.query_lists(phrase)? {
            Some(lists) => Self::matching_docs(&lists)
                .into_iter()
                .map(|d| self.record_ids[d as usize])
                .collect(),
            None => Vec::new(),
        })
    }

    pub fn count_matches(&self, phrase: &str) -> Result<usize> {
        Ok(match self.query_lists(phrase)? {
            Some(lists) => Self::matching_docs(&lists).len(),
            None => 0,
        })
    }

    /// Shortest posting list among the phrase's tokens (0 if any is absent).
    pub fn min_posting(&self, phrase: &str) -> Result<usize> {
        let tokens = tokenize(phrase);
        if tokens.is_empty() {
            return Err(Error::EmptyQuery(phrase.to_owned()));
        }
        Ok(tokens
            .iter()
            .map(|t| self.posting_len(t))
            .min()
            .unwrap_or(0))
    }

    /// Per-phrase match count, shortest posting list and search latency.
    /// Only the phrase search itself is inside the timed region.
    pub fn query_stats<S: AsRef<str>>(&self, phrases: &[S]) -> Vec<QueryStat> {
        phrases
            .iter()
            .map(|phrase| {
                let phrase = phrase.as_ref();
                let start = Instant::now();
                let res = self.phrase_search(phrase);
                let elapsed = start.elapsed();
                let micros = elapsed.as_nanos() as f64 / 1_000.0;
                match res {
                    Ok(ids) => QueryStat {
                        phrase: phrase.to_owned(),
                        count: ids.len(),
                        min_posting: self.min_posting(phrase).unwrap_or(0),
                        micros,
                        error: None,
                    },
                    Err(e) => QueryStat {
                        phrase: phrase.to_owned(),
                        count: 0,
                        min_posting: 0,
                        micros,
                        error: Some(e.kind().to_owned()),
                    },
                }
            })
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.record_ids.len() as u64).to_le_bytes());
        for id in &self.record_ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&(self.table.len() as u32).to_le_bytes());
        for (tok, list) in self.table.tokens.iter().zip(&self.postings) {
            out.extend_from_slice(&(tok.len() as u32).to_le_bytes());
            out.extend_from_slice(tok.as_bytes());
            out.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for p in list {
                out.extend_from_slice(&p.doc.to_le_bytes());
                out.extend_from_slice(&p.position.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != INDEX_MAGIC {
            return Err(Error::MalformedHeader(
                "not an index file or unsupported index version".into(),
            ));
        }
        let mut r = ByteReader { bytes, offset: 8 };
        let n_records = r.u64()? as usize;
        let mut record_ids = Vec::with_capacity(n_records.min(bytes.len() / 8));
        for _ in 0..n_records {
            record_ids.push(r.u64()?);
        }
        if record_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::MalformedHeader(
                "record ids not strictly ascending".into(),
            ));
        }
        let n_tokens = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n_tokens.min(bytes.len()));
        let mut postings = Vec::with_capacity(n_tokens.min(bytes.len()));
        for _ in 0..n_tokens {
            let len = r.u32()? as usize;
            let tok = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::MalformedHeader("token is not UTF-8".into()))?
                .to_owned();
            if tokens.last().is_some_and(|prev: &String| prev >= &tok) {
                return Err(Error::MalformedHeader("token table not sorted".into()));
            }
            let n = r.u64()? as usize;
            let mut list = Vec::with_capacity(n.min(bytes.len() / 8));
            for _ in 0..n {
                let doc = r.u32()?;
                let position = r.u32()?;
                if doc as usize >= n_records {
                    return Err(Error::MalformedHeader(format!(
                        "posting references record ordinal {doc} of {n_records}"
                    )));
                }
                list.push(Posting { doc, position });
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::MalformedHeader(format!(
                    "postings of {tok:?} not sorted"
                )));
            }
            tokens.push(tok);
            postings.push(list);
        }
        if r.offset != bytes.len() {
            return Err(Error::MalformedHeader("trailing bytes after index".into()));
        }
        Ok(Self {
            table: TokenTable::from_sorted(tokens),
            postings,
            record_ids,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(Error::TruncatedPayload {
                expected: (self.offset + n) as u64,
                found: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// One row of a query latency report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStat {
    pub phrase: String,
    pub count: usize,
    pub min_posting: usize,
    pub micros: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}
