//! End-to-end run: index, pool, filter, exclude, cap, attune, transduct,
//! attune again, evaluate.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attune::{
    build_centroid_head, ensemble_heads, mix_shots, AlphaSchedule, CentroidHead, EnsembleHead,
};
use crate::corpus_io::{ClassSpec, Corpus, EmbeddingMatrix, LabeledExample};
use crate::error::Result;
use crate::eval::{sample_shots, top1_accuracy, EvalReport};
use crate::pool::{
    build_pool, build_zero_shot_head, cap_per_class, consistency_filter, exclude_ids, PhraseIssue,
    PrimingPool, ZeroShotHead, DEFAULT_CAP,
};
use crate::synthbench::{generate_corpus, SynthConfig, SynthData, TruthRow};
use crate::text_index::InvertedIndex;
use crate::transduct::{transductive_filter, DEFAULT_K};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub cap: usize,
    pub k: usize,
    pub alpha: AlphaSchedule,
    /// Shots per class mixed into the clusters (0 = zero-shot setting).
    pub shots: usize,
    pub shot_seed: u64,
    /// Whether to run the transductive stage.
    pub transduct: bool,
    pub exclude: Vec<u64>,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            k: DEFAULT_K,
            alpha: AlphaSchedule::default(),
            shots: 0,
            shot_seed: 0,
            transduct: true,
            exclude: Vec::new(),
        }
    }
}

/// Everything a pipeline needs besides the corpus.
pub struct PipelineInputs<'a> {
    pub corpus: &'a Corpus,
    pub specs: &'a [ClassSpec],
    pub test: &'a EmbeddingMatrix,
    pub test_labels: &'a [usize],
    pub train: &'a [LabeledExample],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub raw: usize,
    pub filtered: usize,
    pub excluded: usize,
    pub capped: usize,
    pub transduced: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub zero_shot_accuracy: f64,
    pub primed_accuracy: f64,
    pub transduced_accuracy: Option<f64>,
    pub pool_sizes: PoolSizes,
    /// Fraction of pool entries whose generating class matches their cluster,
    /// per stage; only available for synthetic corpora.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<StagePrecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePrecision {
    pub raw: Option<f64>,
    pub filtered: Option<f64>,
    pub capped: Option<f64>,
    pub transduced: Option<f64>,
}

/// Wall-clock per stage in microseconds. Kept apart from [`Summary`] since
/// it is the only non-reproducible output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub index_build_micros: f64,
    pub pool_build_micros: f64,
    pub filter_micros: f64,
    pub attune_micros: f64,
    pub transduct_micros: f64,
    pub eval_micros: f64,
}

pub struct PipelineOutput {
    pub summary: Summary,
    pub timings: Timings,
    pub phrase_issues: Vec<PhraseIssue>,
    pub raw_pool: PrimingPool,
    pub filtered_pool: PrimingPool,
    pub capped_pool: PrimingPool,
    pub transduced_pool: Option<PrimingPool>,
    pub zero_shot: ZeroShotHead,
    pub primed_centroids: CentroidHead,
    pub primed: EnsembleHead,
    pub transduced_centroids: Option<CentroidHead>,
    pub transduced: Option<EnsembleHead>,
    pub zero_shot_report: EvalReport,
    pub primed_report: EvalReport,
    pub transduced_report: Option<EvalReport>,
}

fn micros_since(t: Instant) -> f64 {
    t.elapsed().as_nanos() as f64 / 1_000.0
}

pub fn run_pipeline(
    inputs: &PipelineInputs<'_>,
    params: &PipelineParams,
) -> Result<PipelineOutput> {
    params.alpha.validate()?;
    let mut timings = Timings::default();
    let store = inputs.corpus.embedding_store();

    let t = Instant::now();
    let index = InvertedIndex::build_from_shards(&inputs.corpus.shards)?;
    timings.index_build_micros = micros_since(t);

    let zero_shot = build_zero_shot_head(inputs.specs)?;

    let t = Instant::now();
    let built = build_pool(&index, inputs.specs, &zero_shot, &store)?;
    timings.pool_build_micros = micros_since(t);

    let t = Instant::now();
    let filtered = consistency_filter(&built.pool, &zero_shot, &store)?;
    timings.filter_micros = micros_since(t);
    let excluded: HashSet<u64> = params.exclude.iter().copied().collect();
    let kept = exclude_ids(&filtered, &excluded);
    let capped = cap_per_class(&kept, params.cap);

    let shots = if params.shots > 0 {
        sample_shots(
            inputs.train,
            inputs.specs.len(),
            params.shots,
            params.shot_seed,
        )?
    } else {
        Vec::new()
    };

    let t = Instant::now();
    let clusters = mix_shots(&capped, &store, &shots, 1)?;
    let primed_centroids = build_centroid_head(&clusters)?;
    let primed = ensemble_heads(&primed_centroids, &zero_shot, &params.alpha, false)?;
    timings.attune_micros = micros_since(t);

    let mut transduced_pool = None;
    let mut transduced_centroids = None;
    let mut transduced = None;
    if params.transduct && !capped.is_empty() {
        let t = Instant::now();
        let pool = transductive_filter(&capped, &store, inputs.test, params.k)?;
        let clusters = mix_shots(&pool, &store, &shots, 1)?;
        let centroids = build_centroid_head(&clusters)?;
        let head = ensemble_heads(&centroids, &zero_shot, &params.alpha, false)?;
        timings.transduct_micros = micros_since(t);
        transduced_pool = Some(pool);
        transduced_centroids = Some(centroids);
        transduced = Some(head);
    }

    let t = Instant::now();
    let zero_shot_report = top1_accuracy(&zero_shot, inputs.test, inputs.test_labels)?;
    let primed_report = top1_accuracy(&primed.head, inputs.test, inputs.test_labels)?;
    let transduced_report = transduced
        .as_ref()
        .map(|h| top1_accuracy(&h.head, inputs.test, inputs.test_labels))
        .transpose()?;
    timings.eval_micros = micros_since(t);

    let summary = Summary {
        zero_shot_accuracy: zero_shot_report.accuracy,
        primed_accuracy: primed_report.accuracy,
        transduced_accuracy: transduced_report.as_ref().map(|r| r.accuracy),
        pool_sizes: PoolSizes {
            raw: built.pool.len(),
            filtered: filtered.len(),
            excluded: kept.len(),
            capped: capped.len(),
            transduced: transduced_pool.as_ref().map(PrimingPool::len),
        },
        precision: None,
    };

    Ok(PipelineOutput {
        summary,
        timings,
        phrase_issues: built.issues,
        raw_pool: built.pool,
        filtered_pool: filtered,
        capped_pool: capped,
        transduced_pool,
        zero_shot,
        primed_centroids,
        primed,
        transduced_centroids,
        transduced,
        zero_shot_report,
        primed_report,
        transduced_report,
    })
}

/// Fraction of entries whose generating class equals their cluster.
pub fn pool_precision(pool: &PrimingPool, truth: &[TruthRow]) -> Option<f64> {
    if pool.is_empty() {
        return None;
    }
    let by_id: std::collections::HashMap<u64, Option<usize>> =
        truth.iter().map(|t| (t.record_id, t.true_class)).collect();
    let correct = pool
        .entries()
        .filter(|e| by_id.get(&e.record_id).copied().flatten() == Some(e.class_index))
        .count();
    Some(correct as f64 / pool.len() as f64)
}

/// Runs the pipeline on already generated synthetic data.
pub fn run_on_synth(data: &SynthData, params: &PipelineParams) -> Result<PipelineOutput> {
    let corpus = Corpus::from_shards(data.dim(), data.shards.clone())?;
    let train =
        crate::corpus_io::labeled_examples(&data.train, &data.train_labels, data.specs.len())?;
    let inputs = PipelineInputs {
        corpus: &corpus,
        specs: &data.specs,
        test: &data.test,
        test_labels: &data.test_labels,
        train: &train,
    };
    let mut out = run_pipeline(&inputs, params)?;
    out.summary.precision = Some(StagePrecision {
        raw: pool_precision(&out.raw_pool, &data.truth),
        filtered: pool_precision(&out.filtered_pool, &data.truth),
        capped: pool_precision(&out.capped_pool, &data.truth),
        transduced: out
            .transduced_pool
            .as_ref()
            .and_then(|p| pool_precision(p, &data.truth)),
    });
    Ok(out)
}

/// Generates a synthetic corpus from `cfg` and runs the full pipeline on it.
pub fn run_end_to_end(cfg: &SynthConfig, params: &PipelineParams) -> Result<PipelineOutput> {
    let data = generate_corpus(cfg)?;
    run_on_synth(&data, params)
}
