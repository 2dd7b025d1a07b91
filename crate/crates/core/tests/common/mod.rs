//! Reference implementations used as test oracles, plus random fixtures.
//! Nothing here calls into the code under test except for types.

#![allow(dead_code)]

use priming_core::corpus_io::{CaptionRecord, EmbeddingMatrix};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Lowercased alphanumeric runs, written independently of the index tokenizer.
pub fn naive_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sorted ids of records whose token sequence contains the phrase tokens contiguously.
pub fn naive_phrase_scan(records: &[CaptionRecord], phrase: &str) -> Vec<u64> {
    let q = naive_tokens(phrase);
    assert!(!q.is_empty());
    let mut out: Vec<u64> = records
        .iter()
        .filter(|r| {
            naive_tokens(&r.caption)
                .windows(q.len())
                .any(|w| w == q.as_slice())
        })
        .map(|r| r.id)
        .collect();
    out.sort_unstable();
    out
}

const SEPARATORS: &[&str] = &[" ", "  ", ", ", "-", ". ", "!", "/", "\t"];

/// Captions over a small vocabulary so phrases repeat often. Words mix case
/// and some carry accented letters.
pub fn random_corpus(
    r: &mut impl Rng,
    n_docs: usize,
    vocab: usize,
) -> (Vec<String>, Vec<CaptionRecord>) {
    let words: Vec<String> = (0..vocab)
        .map(|i| {
            let base = format!("w{i}");
            match i % 5 {
                0 => base.to_uppercase(),
                1 => format!("{base}é"),
                2 => format!("É{base}"),
                _ => base,
            }
        })
        .collect();
    let mut ids: Vec<u64> = (0..n_docs as u64)
        .map(|i| i * 3 + r.random_range(0..3))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    // shuffle so the index cannot rely on input order
    for i in (1..ids.len()).rev() {
        let j = r.random_range(0..=i);
        ids.swap(i, j);
    }
    let records = ids
        .into_iter()
        .map(|id| {
            let len = r.random_range(0..10);
            let mut caption = String::new();
            for k in 0..len {
                if k > 0 || r.random_bool(0.2) {
                    caption.push_str(SEPARATORS.choose(r).unwrap());
                }
                caption.push_str(words.choose(r).unwrap());
            }
            CaptionRecord::new(id, caption)
        })
        .collect();
    (words, records)
}

/// A 1-3 word phrase, usually taken from an existing caption so it hits.
pub fn random_phrase(r: &mut impl Rng, words: &[String], records: &[CaptionRecord]) -> String {
    let n = r.random_range(1..=3);
    if r.random_bool(0.7) && !records.is_empty() {
        let toks = naive_tokens(&records.choose(r).unwrap().caption);
        if toks.len() >= n {
            let s = r.random_range(0..=toks.len() - n);
            return toks[s..s + n].join(" ");
        }
    }
    (0..n)
        .map(|_| words.choose(r).unwrap().clone())
        .collect::<Vec<_>>()
        .join(if r.random_bool(0.5) { " " } else { ", " })
}

/// Sequential f32 dot product, the documented scoring arithmetic.
pub fn ref_dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |s, (x, y)| s + x * y)
}

/// Full sort by score descending then id ascending; first `min(k, n)` as (id, score).
pub fn brute_topk(ids: &[u64], m: &EmbeddingMatrix, q: &[f32], k: usize) -> Vec<(u64, f32)> {
    let mut all: Vec<(u64, f32)> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, ref_dot(m.row(i), q)))
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Rows on a coarse grid so many dot products tie exactly; some rows duplicated.
pub fn tie_heavy_rows(r: &mut impl Rng, n: usize, dim: usize) -> EmbeddingMatrix {
    let mut data: Vec<f32> = Vec::with_capacity(n * dim);
    for i in 0..n {
        if i > 0 && r.random_bool(0.1) {
            let j = r.random_range(0..i);
            let row = data[j * dim..(j + 1) * dim].to_vec();
            data.extend_from_slice(&row);
        } else {
            data.extend((0..dim).map(|_| r.random_range(-2i32..=2) as f32 * 0.25));
        }
    }
    EmbeddingMatrix::new(dim, data).unwrap()
}

pub fn gaussian_rows(r: &mut impl Rng, n: usize, dim: usize) -> EmbeddingMatrix {
    let data = (0..n * dim)
        .map(|_| r.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    EmbeddingMatrix::new(dim, data).unwrap()
}

pub fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    v.iter().map(|&x| (x as f64 / n) as f32).collect()
}

pub fn random_unit(r: &mut impl Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..dim)
        .map(|_| r.sample::<f32, _>(rand_distr::StandardNormal))
        .collect();
    unit(&v)
}

/// Unique ids in random order.
pub fn shuffled_ids(r: &mut impl Rng, n: usize) -> Vec<u64> {
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 1).collect();
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        ids.swap(i, j);
    }
    ids
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
