//! Deterministic synthetic corpora for exercising the whole pipeline.
//!
//! Every class has a unit mean direction `m_c = normalize(b + s * u_c)` where
//! `b` is a shared base direction and `u_c` a random unit vector, so `s`
//! controls how far apart the classes sit (`s = 0` makes them identical).
//! Image embeddings are `normalize(center + image_noise * g / sqrt(d))` with
//! `g` standard normal. Text embeddings are `normalize(m_c + tau * g / sqrt(d))`.
//!
//! The test distribution can be shifted: its class centers are
//! `t_c = normalize(m_c + test_shift * w_c)` for random unit `w_c`, and a
//! `shifted_fraction` of each class's corpus images is drawn around `t_c`
//! instead of `m_c`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{
    validate_shard_pair, write_caption_shard, write_class_specs, write_embedding_shard,
    write_labels, CaptionRecord, ClassSpec, CorpusManifest, EmbeddingMatrix, PairedShard,
    ShardPaths,
};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub dim: usize,
    /// Corpus records per class.
    pub per_class: usize,
    /// Class separation `s`.
    pub separation: f64,
    /// Probability that a caption names a class other than the image's.
    pub caption_noise: f64,
    /// Text-embedding noise `tau`.
    pub text_noise: f64,
    pub image_noise: f64,
    pub test_per_class: usize,
    /// Labeled in-distribution examples per class for few-shot runs.
    pub train_per_class: usize,
    pub test_shift: f64,
    pub shifted_fraction: f64,
    /// Records whose captions name no class.
    pub distractors: usize,
    /// Probability that a class-naming caption uses the alias instead.
    pub alias_rate: f64,
    pub shards: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 20,
            dim: 64,
            per_class: 200,
            separation: 1.0,
            caption_noise: 0.1,
            text_noise: 1.0,
            image_noise: 1.0,
            test_per_class: 50,
            train_per_class: 16,
            test_shift: 0.0,
            shifted_fraction: 0.0,
            distractors: 500,
            alias_rate: 0.2,
            shards: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if self.n_classes == 0 || self.dim == 0 || self.per_class == 0 || self.test_per_class == 0 {
            return bad("n_classes, dim, per_class and test_per_class must be positive");
        }
        if self.shards == 0 {
            return bad("shards must be positive");
        }
        if self.n_classes > 4096 {
            return bad("at most 4096 classes");
        }
        for (name, v) in [
            ("caption_noise", self.caption_noise),
            ("shifted_fraction", self.shifted_fraction),
            ("alias_rate", self.alias_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, v) in [
            ("separation", self.separation),
            ("text_noise", self.text_noise),
            ("image_noise", self.image_noise),
            ("test_shift", self.test_shift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if self.caption_noise > 0.0 && self.n_classes < 2 {
            return bad("caption noise needs at least two classes");
        }
        Ok(())
    }
}

/// Ground truth for one corpus record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub record_id: u64,
    /// Class whose distribution produced the image; `None` for distractors.
    pub true_class: Option<usize>,
    /// Class named in the caption, if any.
    pub named_class: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub shards: Vec<PairedShard>,
    pub specs: Vec<ClassSpec>,
    pub test: EmbeddingMatrix,
    pub test_labels: Vec<usize>,
    pub train: EmbeddingMatrix,
    pub train_labels: Vec<usize>,
    pub truth: Vec<TruthRow>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "ze", "bi", "do", "fa", "gu", "ho", "ja",
];

const TEMPLATES: [&str; 6] = [
    "a photo of a {} in the wild",
    "{} on a leash walking",
    "close up shot of the {} at dusk",
    "my favorite {} picture",
    "stock image {} isolated on white",
    "blurry {} near the old barn",
];

const BACKGROUND: [&str; 5] = [
    "sunset over the city skyline",
    "a photo of an empty road in the wild",
    "stock image abstract texture isolated on white",
    "my favorite coffee mug",
    "close up shot of wet leaves at dusk",
];

/// Two-token class name; the first token is unique per class.
pub fn class_name(c: usize) -> String {
    let first = format!(
        "{}{}{}n",
        SYLLABLES[c % 16],
        SYLLABLES[(c / 16) % 16],
        SYLLABLES[(c / 256) % 16]
    );
    let second = format!("{}ret", SYLLABLES[(c * 7 + 3) % 16]);
    format!("{first} {second}")
}

/// Single-token alias: the name with its space removed.
pub fn class_alias(c: usize) -> String {
    class_name(c).replace(' ', "")
}

struct Sampler {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Sampler {
    fn gaussian(&mut self) -> Vec<f64> {
        (0..self.dim)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn unit(&mut self) -> Vec<f64> {
        loop {
            let g = self.gaussian();
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                return g.into_iter().map(|x| x / n).collect();
            }
        }
    }

    /// `normalize(center + scale * g / sqrt(d))` as f32.
    fn perturb(&mut self, center: &[f64], scale: f64) -> Vec<f32> {
        let k = scale / (self.dim as f64).sqrt();
        let v: Vec<f32> = center
            .iter()
            .zip(self.gaussian())
            .map(|(c, g)| (c + k * g) as f32)
            .collect();
        linalg::normalized(&v).unwrap_or_else(|| {
            // measure-zero event; fall back to the center itself
            center.iter().map(|&x| x as f32).collect()
        })
    }

    fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    fn chance(&mut self, p: f64) -> bool {
        p > 0.0 && self.rng.random::<f64>() < p
    }
}

fn unit_f64(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Generates the corpus, class specs, test and train sets. Pure function of `cfg`.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        dim: d,
    };

    let base = s.unit();
    let mut means = Vec::with_capacity(cfg.n_classes);
    let mut test_means = Vec::with_capacity(cfg.n_classes);
    for _ in 0..cfg.n_classes {
        let u = s.unit();
        let m = unit_f64(
            base.iter()
                .zip(&u)
                .map(|(b, u)| b + cfg.separation * u)
                .collect(),
        );
        let w = s.unit();
        let t = unit_f64(
            m.iter()
                .zip(&w)
                .map(|(m, w)| m + cfg.test_shift * w)
                .collect(),
        );
        means.push(m);
        test_means.push(t);
    }

    let specs: Vec<ClassSpec> = (0..cfg.n_classes)
        .map(|c| ClassSpec {
            class_index: c,
            name: class_name(c),
            aliases: vec![class_alias(c)],
            text_embedding: s.perturb(&means[c], cfg.text_noise),
        })
        .collect();

    let mut captions = Vec::with_capacity(cfg.n_classes * cfg.per_class + cfg.distractors);
    let mut embeddings = Vec::with_capacity(captions.capacity() * d);
    let mut truth = Vec::with_capacity(captions.capacity());
    let mut next_id = 0u64;
    for c in 0..cfg.n_classes {
        let n_shifted = (cfg.per_class as f64 * cfg.shifted_fraction).round() as usize;
        for i in 0..cfg.per_class {
            let center = if i < n_shifted {
                &test_means[c]
            } else {
                &means[c]
            };
            let emb = s.perturb(center, cfg.image_noise);
            let named = if s.chance(cfg.caption_noise) {
                let other = s.index(cfg.n_classes - 1);
                if other >= c {
                    other + 1
                } else {
                    other
                }
            } else {
                c
            };
            let label = if s.chance(cfg.alias_rate) {
                class_alias(named)
            } else {
                class_name(named)
            };
            let template = TEMPLATES[s.index(TEMPLATES.len())];
            captions.push(CaptionRecord {
                id: next_id,
                caption: template.replace("{}", &label),
                uri: Some(format!("synth://{}/{next_id}", cfg.seed)),
            });
            embeddings.extend_from_slice(&emb);
            truth.push(TruthRow {
                record_id: next_id,
                true_class: Some(c),
                named_class: Some(named),
            });
            next_id += 1;
        }
    }
    for _ in 0..cfg.distractors {
        let u = s.unit();
        let center = unit_f64(
            base.iter()
                .zip(&u)
                .map(|(b, u)| b + cfg.separation * u)
                .collect(),
        );
        let emb = s.perturb(&center, cfg.image_noise);
        captions.push(CaptionRecord {
            id: next_id,
            caption: BACKGROUND[s.index(BACKGROUND.len())].to_owned(),
            uri: None,
        });
        embeddings.extend_from_slice(&emb);
        truth.push(TruthRow {
            record_id: next_id,
            true_class: None,
            named_class: None,
        });
        next_id += 1;
    }

    let total = captions.len();
    let per_shard = total.div_ceil(cfg.shards).max(1);
    let mut shards = Vec::with_capacity(cfg.shards);
    let mut caps = captions.into_iter();
    for k in 0..cfg.shards {
        let start = (k * per_shard).min(total);
        let end = ((k + 1) * per_shard).min(total);
        let part: Vec<CaptionRecord> = caps.by_ref().take(end - start).collect();
        let m = EmbeddingMatrix::new(d, embeddings[start * d..end * d].to_vec())?;
        shards.push(validate_shard_pair(part, m)?);
    }

    let mut draw_set = |per_class: usize| -> Result<(EmbeddingMatrix, Vec<usize>)> {
        let mut m = EmbeddingMatrix::empty(d);
        let mut labels = Vec::with_capacity(per_class * cfg.n_classes);
        for (c, t) in test_means.iter().enumerate() {
            for _ in 0..per_class {
                m.push_row(&s.perturb(t, cfg.image_noise))?;
                labels.push(c);
            }
        }
        Ok((m, labels))
    };
    let (test, test_labels) = draw_set(cfg.test_per_class)?;
    let (train, train_labels) = draw_set(cfg.train_per_class)?;

    Ok(SynthData {
        shards,
        specs,
        test,
        test_labels,
        train,
        train_labels,
        truth,
    })
}

/// File names written by [`SynthData::write_to_dir`].
pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const CLASSES: &str = "classes.json";
    pub const TEST_EMBEDDINGS: &str = "test.npemb";
    pub const TEST_LABELS: &str = "test_labels.txt";
    pub const TRAIN_EMBEDDINGS: &str = "train.npemb";
    pub const TRAIN_LABELS: &str = "train_labels.txt";
    pub const TRUTH: &str = "truth.jsonl";
}

impl SynthData {
    pub fn dim(&self) -> usize {
        self.test.dim()
    }

    /// Writes shards, manifest, class specs, test/train sets and the truth
    /// table in the corpus file formats.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::with_capacity(self.shards.len());
        for (i, shard) in self.shards.iter().enumerate() {
            let captions = format!("shard_{i:03}.jsonl");
            let embeddings = format!("shard_{i:03}.npemb");
            write_caption_shard(dir.join(&captions), &shard.captions)?;
            write_embedding_shard(dir.join(&embeddings), &shard.embeddings)?;
            paths.push(ShardPaths {
                captions: captions.into(),
                embeddings: embeddings.into(),
            });
        }
        CorpusManifest {
            dim: self.dim(),
            shards: paths,
        }
        .write(dir.join(files::MANIFEST))?;
        write_class_specs(dir.join(files::CLASSES), &self.specs)?;
        write_embedding_shard(dir.join(files::TEST_EMBEDDINGS), &self.test)?;
        write_labels(dir.join(files::TEST_LABELS), &self.test_labels)?;
        write_embedding_shard(dir.join(files::TRAIN_EMBEDDINGS), &self.train)?;
        write_labels(dir.join(files::TRAIN_LABELS), &self.train_labels)?;
        let mut truth = String::new();
        for row in &self.truth {
            truth.push_str(&serde_json::to_string(row).expect("truth row serializes"));
            truth.push('\n');
        }
        let p = dir.join(files::TRUTH);
        fs::write(&p, truth).map_err(|e| Error::io(&p, e))
    }
}
