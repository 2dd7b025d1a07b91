//! Stage commands behind the `priming` executable.

pub mod config;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use priming_core::attune::{build_centroid_head, ensemble_heads, mix_shots, pool_clusters};
use priming_core::corpus_io::{
    labeled_examples, load_class_specs, normalize_embeddings, read_embedding_shard, read_labels,
    ClassSpec, Corpus, EmbeddingMatrix, LabeledExample,
};
use priming_core::eval::{compare_heads, fewshot_trials, top1_accuracy, FewShotSetup};
use priming_core::head::{ClassifierHead, HeadFile, HeadRole};
use priming_core::pipeline::{
    run_on_synth, run_pipeline, PipelineInputs, PipelineOutput, PipelineParams,
};
use priming_core::pool::{
    build_pool, build_zero_shot_head, cap_per_class, consistency_filter, exclude_ids, read_pool,
    write_pool, PrimingPool,
};
use priming_core::synthbench::{generate_corpus, SynthData};
use priming_core::text_index::InvertedIndex;
use priming_core::transduct::{retrieval_bench, transductive_filter};
use serde::Serialize;
use thiserror::Error;

use crate::config::{parse_config, ConfigError, ConfigFlags, RunConfig, CONFIG_ECHO};

pub const TOOL: &str = "priming";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Artifact file names inside the output directory.
pub mod artifacts {
    pub const INDEX: &str = "index.npidx";
    pub const QUERY_STATS: &str = "query_stats.jsonl";
    pub const PHRASE_ISSUES: &str = "phrase_issues.jsonl";
    pub const POOL_RAW: &str = "pool_raw.jsonl";
    pub const POOL_FILTERED: &str = "pool_filtered.jsonl";
    pub const POOL_CAPPED: &str = "pool_capped.jsonl";
    pub const POOL_EXCLUDED: &str = "pool_excluded.jsonl";
    pub const POOL_TRANSDUCED: &str = "pool_transduced.jsonl";
    pub const HEAD_ZERO_SHOT: &str = "head_zero_shot.nphead";
    pub const HEAD_CENTROID: &str = "head_centroid.nphead";
    pub const HEAD_ENSEMBLE: &str = "head_ensemble.nphead";
    pub const HEAD_TRANSDUCED_CENTROID: &str = "head_transduced_centroid.nphead";
    pub const HEAD_TRANSDUCED_ENSEMBLE: &str = "head_transduced_ensemble.nphead";
    pub const EVAL: &str = "eval.json";
    pub const EVAL_ZERO_SHOT: &str = "eval_zero_shot.json";
    pub const EVAL_PRIMED: &str = "eval_primed.json";
    pub const EVAL_TRANSDUCED: &str = "eval_transduced.json";
    pub const COMPARE: &str = "compare.json";
    pub const FEWSHOT: &str = "fewshot.json";
    pub const BENCH: &str = "bench.jsonl";
    pub const SUMMARY: &str = "summary.jsonl";
    pub const TIMINGS: &str = "timings.jsonl";
    pub const PROVENANCE: &str = "provenance.json";
    pub const SYNTH_DIR: &str = "data";
}

#[derive(Debug, Parser)]
#[command(
    name = "priming",
    version,
    about = "Caption-retrieval priming pools and head ensembling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build the caption index from the corpus
    IndexBuild,
    /// Per-phrase match counts and search latency
    IndexStats,
    /// Raw pool from class-name phrase search
    PoolBuild,
    /// Zero-shot consistency filter
    PoolFilter,
    /// Keep the top `cap` entries per class
    PoolCap,
    /// Drop excluded record ids
    PoolExclude,
    /// Transductive top-k refinement against the test set
    Transduct,
    /// Build zero-shot, centroid and ensemble heads
    Attune,
    /// Evaluate heads (and few-shot trials when shots are configured)
    Eval,
    /// Time transductive retrieval
    Bench,
    /// Generate a synthetic corpus
    Synth,
    /// Full pipeline
    Run,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::IndexBuild => "index-build",
            Command::IndexStats => "index-stats",
            Command::PoolBuild => "pool-build",
            Command::PoolFilter => "pool-filter",
            Command::PoolCap => "pool-cap",
            Command::PoolExclude => "pool-exclude",
            Command::Transduct => "transduct",
            Command::Attune => "attune",
            Command::Eval => "eval",
            Command::Bench => "bench",
            Command::Synth => "synth",
            Command::Run => "run",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] priming_core::Error),
    #[error("cannot build worker pool: {0}")]
    Workers(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(e) => e.kind(),
            CliError::Core(e) => e.kind(),
            CliError::Workers(_) => "Workers",
        }
    }
}

/// One-line machine-readable error for stderr.
pub fn error_line(stage: &str, err: &CliError) -> String {
    serde_json::json!({
        "error": {
            "stage": stage,
            "kind": err.kind(),
            "message": err.to_string(),
        }
    })
    .to_string()
}

type CliResult<T> = Result<T, CliError>;

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    provenance: String,
    written: Vec<String>,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn note(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_owned());
        }
    }

    fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        self.note(name);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
        self.write_text(name, &text)
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r).expect("row serializes"));
            text.push('\n');
        }
        self.write_text(name, &text)
    }

    fn write_pool(&mut self, name: &str, pool: &PrimingPool, dim: usize) -> CliResult<()> {
        write_pool(self.path(name), pool, dim, &self.provenance)?;
        self.note(name);
        Ok(())
    }

    fn write_head(
        &mut self,
        name: &str,
        role: HeadRole,
        head: &ClassifierHead,
        alphas: &[f64],
    ) -> CliResult<()> {
        HeadFile {
            role,
            head: head.clone(),
            alphas: alphas.iter().map(|&a| a as f32).collect(),
        }
        .save(self.path(name))?;
        self.note(name);
        Ok(())
    }

    fn corpus(&self) -> CliResult<Corpus> {
        Ok(Corpus::load(self.cfg.require_corpus()?)?)
    }

    fn specs(&self, dim: Option<usize>) -> CliResult<Vec<ClassSpec>> {
        Ok(load_class_specs(self.cfg.require_classes()?, dim)?)
    }

    fn pool(&self) -> CliResult<(usize, PrimingPool)> {
        let (header, pool) = read_pool(self.cfg.require_pool()?)?;
        Ok((header.dim, pool))
    }

    fn test_set(&self) -> CliResult<(EmbeddingMatrix, Vec<usize>)> {
        let test = normalize_embeddings(&read_embedding_shard(self.cfg.require_test()?)?)?;
        let labels = match &self.cfg.test_labels {
            Some(p) => read_labels(p)?,
            None => Vec::new(),
        };
        Ok((test, labels))
    }

    fn train_set(&self, n_classes: usize) -> CliResult<Vec<LabeledExample>> {
        match (&self.cfg.train, &self.cfg.train_labels) {
            (Some(e), Some(l)) => Ok(labeled_examples(
                &read_embedding_shard(e)?,
                &read_labels(l)?,
                n_classes,
            )?),
            (None, None) if self.cfg.shots == 0 => Ok(Vec::new()),
            (None, _) => Err(ConfigError::MissingRequired("train".into()).into()),
            (_, None) => Err(ConfigError::MissingRequired("train_labels".into()).into()),
        }
    }

    fn index(&self, corpus: Option<&Corpus>) -> CliResult<InvertedIndex> {
        match (&self.cfg.index, corpus) {
            (Some(p), _) => Ok(InvertedIndex::load(p)?),
            (None, Some(c)) => Ok(InvertedIndex::build_from_shards(&c.shards)?),
            (None, None) => Ok(InvertedIndex::build_from_shards(&self.corpus()?.shards)?),
        }
    }

    fn params(&self) -> CliResult<PipelineParams> {
        let exclude = match &self.cfg.exclude {
            Some(p) => read_ids(p)?,
            None => Vec::new(),
        };
        Ok(PipelineParams {
            cap: self.cfg.cap,
            k: self.cfg.k,
            alpha: self.cfg.alpha,
            shots: self.cfg.shots,
            shot_seed: self.cfg.seeds[0],
            transduct: self.cfg.transduct,
            exclude,
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(priming_core::Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

/// Reads one unsigned record id per line; blank lines and `#` comments are skipped.
pub fn read_ids(path: &Path) -> CliResult<Vec<u64>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.parse::<u64>().map_err(|e| {
                CliError::Core(priming_core::Error::MalformedRecord {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
        })
        .collect()
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    config_hash: String,
    artifacts: &'a [String],
}

/// Parses the config, runs `command` and writes its artifacts.
pub fn dispatch(command: Command, flags: &ConfigFlags) -> CliResult<()> {
    let cfg = parse_config(flags)?;
    let out = cfg.require_out()?.to_owned();
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let provenance = format!("{TOOL} {VERSION} config:{}", cfg.content_hash());
    let mut ctx = Ctx {
        cfg,
        out,
        provenance,
        written: Vec::new(),
    };
    let echo = ctx.cfg.to_pretty_json();
    ctx.write_text(CONFIG_ECHO, &echo)?;

    let workers = ctx.cfg.workers;
    let run = |ctx: &mut Ctx| execute(command, ctx);
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Workers(e.to_string()))?
            .install(|| run(&mut ctx))?,
        None => run(&mut ctx)?,
    }

    let written = ctx.written.clone();
    let prov = Provenance {
        tool: TOOL,
        version: VERSION,
        command: command.name(),
        config_hash: ctx.cfg.content_hash(),
        artifacts: &written,
    };
    ctx.write_json(artifacts::PROVENANCE, &prov)
}

fn execute(command: Command, ctx: &mut Ctx) -> CliResult<()> {
    match command {
        Command::IndexBuild => {
            let index = ctx.index(None)?;
            index.save(ctx.path(artifacts::INDEX))?;
            ctx.note(artifacts::INDEX);
        }
        Command::IndexStats => {
            let index = ctx.index(None)?;
            let phrases: Vec<String> = match &ctx.cfg.phrases {
                Some(p) => read_lines(p)?,
                None => ctx
                    .specs(None)?
                    .iter()
                    .flat_map(|s| s.phrases().map(str::to_owned).collect::<Vec<_>>())
                    .collect(),
            };
            let stats = index.query_stats(&phrases);
            ctx.write_jsonl(artifacts::QUERY_STATS, &stats)?;
        }
        Command::PoolBuild => {
            let corpus = ctx.corpus()?;
            let specs = ctx.specs(Some(corpus.dim))?;
            let index = ctx.index(Some(&corpus))?;
            let head = build_zero_shot_head(&specs)?;
            let built = build_pool(&index, &specs, &head, &corpus.embedding_store())?;
            ctx.write_pool(artifacts::POOL_RAW, &built.pool, corpus.dim)?;
            if !built.issues.is_empty() {
                ctx.write_jsonl(artifacts::PHRASE_ISSUES, &built.issues)?;
            }
        }
        Command::PoolFilter => {
            let (dim, pool) = ctx.pool()?;
            let corpus = ctx.corpus()?;
            let specs = ctx.specs(Some(corpus.dim))?;
            let head = build_zero_shot_head(&specs)?;
            let filtered = consistency_filter(&pool, &head, &corpus.embedding_store())?;
            ctx.write_pool(artifacts::POOL_FILTERED, &filtered, dim)?;
        }
        Command::PoolCap => {
            let (dim, pool) = ctx.pool()?;
            let capped = cap_per_class(&pool, ctx.cfg.cap);
            ctx.write_pool(artifacts::POOL_CAPPED, &capped, dim)?;
        }
        Command::PoolExclude => {
            let (dim, pool) = ctx.pool()?;
            let ids: HashSet<u64> = read_ids(ctx.cfg.require_exclude()?)?.into_iter().collect();
            ctx.write_pool(artifacts::POOL_EXCLUDED, &exclude_ids(&pool, &ids), dim)?;
        }
        Command::Transduct => {
            let (dim, pool) = ctx.pool()?;
            let corpus = ctx.corpus()?;
            let (test, _) = ctx.test_set()?;
            let out = transductive_filter(&pool, &corpus.embedding_store(), &test, ctx.cfg.k)?;
            ctx.write_pool(artifacts::POOL_TRANSDUCED, &out, dim)?;
        }
        Command::Attune => {
            let (_, pool) = ctx.pool()?;
            let corpus = ctx.corpus()?;
            let specs = ctx.specs(Some(corpus.dim))?;
            let wz = build_zero_shot_head(&specs)?;
            let train = ctx.train_set(specs.len())?;
            let shots = if ctx.cfg.shots > 0 {
                priming_core::eval::sample_shots(
                    &train,
                    specs.len(),
                    ctx.cfg.shots,
                    ctx.cfg.seeds[0],
                )?
            } else {
                Vec::new()
            };
            let clusters = mix_shots(&pool, &corpus.embedding_store(), &shots, 1)?;
            let wft = build_centroid_head(&clusters)?;
            let walpha = ensemble_heads(&wft, &wz, &ctx.cfg.alpha, false)?;
            ctx.write_head(artifacts::HEAD_ZERO_SHOT, HeadRole::ZeroShot, &wz, &[])?;
            ctx.write_head(artifacts::HEAD_CENTROID, HeadRole::Centroid, &wft.head, &[])?;
            ctx.write_head(
                artifacts::HEAD_ENSEMBLE,
                HeadRole::Ensemble,
                &walpha.head,
                &walpha.alphas,
            )?;
        }
        Command::Eval => eval_command(ctx)?,
        Command::Bench => {
            let (_, pool) = ctx.pool()?;
            let corpus = ctx.corpus()?;
            let (test, _) = ctx.test_set()?;
            let (report, _) = retrieval_bench(&pool, &corpus.embedding_store(), &test, ctx.cfg.k)?;
            ctx.write_jsonl(artifacts::BENCH, &[report])?;
        }
        Command::Synth => {
            let synth = ctx
                .cfg
                .synth
                .clone()
                .ok_or_else(|| ConfigError::MissingRequired("synth".into()))?;
            let data = generate_corpus(&synth)?;
            data.write_to_dir(&ctx.out)?;
            ctx.note(priming_core::synthbench::files::MANIFEST);
        }
        Command::Run => run_command(ctx)?,
    }
    Ok(())
}

fn eval_command(ctx: &mut Ctx) -> CliResult<()> {
    let (test, labels) = ctx.test_set()?;
    if ctx.cfg.test_labels.is_none() {
        return Err(ConfigError::MissingRequired("test_labels".into()).into());
    }
    let mut did_something = false;
    if let Some(path) = ctx.cfg.head.clone() {
        let a = HeadFile::load(&path)?.head;
        let report = top1_accuracy(&a, &test, &labels)?;
        ctx.write_json(artifacts::EVAL, &report)?;
        if let Some(pb) = ctx.cfg.head_b.clone() {
            let b = HeadFile::load(&pb)?.head;
            ctx.write_json(artifacts::COMPARE, &compare_heads(&a, &b, &test, &labels)?)?;
        }
        did_something = true;
    }
    if ctx.cfg.shots > 0 {
        let (_, pool) = ctx.pool()?;
        let corpus = ctx.corpus()?;
        let specs = ctx.specs(Some(corpus.dim))?;
        let wz = build_zero_shot_head(&specs)?;
        let train = ctx.train_set(specs.len())?;
        let clusters = pool_clusters(&pool, &corpus.embedding_store())?;
        let setup = FewShotSetup {
            pool: &clusters,
            train: &train,
            shots_per_class: ctx.cfg.shots,
            sched: &ctx.cfg.alpha,
            wz: &wz,
            test: &test,
            labels: &labels,
        };
        let seeds = ctx.cfg.seeds.clone();
        ctx.write_json(artifacts::FEWSHOT, &fewshot_trials(&setup, &seeds)?)?;
        did_something = true;
    }
    if !did_something {
        ctx.cfg.require_head()?;
    }
    Ok(())
}

fn write_outputs(ctx: &mut Ctx, out: &PipelineOutput, dim: usize) -> CliResult<()> {
    ctx.write_pool(artifacts::POOL_RAW, &out.raw_pool, dim)?;
    ctx.write_pool(artifacts::POOL_FILTERED, &out.filtered_pool, dim)?;
    ctx.write_pool(artifacts::POOL_CAPPED, &out.capped_pool, dim)?;
    if let Some(p) = &out.transduced_pool {
        ctx.write_pool(artifacts::POOL_TRANSDUCED, p, dim)?;
    }
    if !out.phrase_issues.is_empty() {
        ctx.write_jsonl(artifacts::PHRASE_ISSUES, &out.phrase_issues)?;
    }
    ctx.write_head(
        artifacts::HEAD_ZERO_SHOT,
        HeadRole::ZeroShot,
        &out.zero_shot,
        &[],
    )?;
    ctx.write_head(
        artifacts::HEAD_CENTROID,
        HeadRole::Centroid,
        &out.primed_centroids.head,
        &[],
    )?;
    ctx.write_head(
        artifacts::HEAD_ENSEMBLE,
        HeadRole::Ensemble,
        &out.primed.head,
        &out.primed.alphas,
    )?;
    if let (Some(c), Some(e)) = (&out.transduced_centroids, &out.transduced) {
        ctx.write_head(
            artifacts::HEAD_TRANSDUCED_CENTROID,
            HeadRole::Centroid,
            &c.head,
            &[],
        )?;
        ctx.write_head(
            artifacts::HEAD_TRANSDUCED_ENSEMBLE,
            HeadRole::Ensemble,
            &e.head,
            &e.alphas,
        )?;
    }
    ctx.write_json(artifacts::EVAL_ZERO_SHOT, &out.zero_shot_report)?;
    ctx.write_json(artifacts::EVAL_PRIMED, &out.primed_report)?;
    if let Some(r) = &out.transduced_report {
        ctx.write_json(artifacts::EVAL_TRANSDUCED, r)?;
    }
    ctx.write_jsonl(artifacts::SUMMARY, &[&out.summary])?;
    ctx.write_jsonl(artifacts::TIMINGS, &[&out.timings])
}

fn fewshot_from_run(
    ctx: &mut Ctx,
    out: &PipelineOutput,
    corpus: &Corpus,
    train: &[LabeledExample],
    test: &EmbeddingMatrix,
    labels: &[usize],
) -> CliResult<()> {
    if ctx.cfg.shots == 0 {
        return Ok(());
    }
    let clusters = pool_clusters(&out.capped_pool, &corpus.embedding_store())?;
    let setup = FewShotSetup {
        pool: &clusters,
        train,
        shots_per_class: ctx.cfg.shots,
        sched: &ctx.cfg.alpha,
        wz: &out.zero_shot,
        test,
        labels,
    };
    let seeds = ctx.cfg.seeds.clone();
    ctx.write_json(artifacts::FEWSHOT, &fewshot_trials(&setup, &seeds)?)
}

fn run_command(ctx: &mut Ctx) -> CliResult<()> {
    let params = ctx.params()?;
    if let Some(synth) = ctx.cfg.synth.clone() {
        let data: SynthData = generate_corpus(&synth)?;
        let data_dir = ctx.path(artifacts::SYNTH_DIR);
        data.write_to_dir(&data_dir)?;
        let out = run_on_synth(&data, &params)?;
        write_outputs(ctx, &out, data.dim())?;
        let corpus = Corpus::from_shards(data.dim(), data.shards.clone())?;
        let train = labeled_examples(&data.train, &data.train_labels, data.specs.len())?;
        return fewshot_from_run(ctx, &out, &corpus, &train, &data.test, &data.test_labels);
    }
    let corpus = ctx.corpus()?;
    let specs = ctx.specs(Some(corpus.dim))?;
    let (test, labels) = ctx.test_set()?;
    ctx.cfg.require_test_labels()?;
    let train = ctx.train_set(specs.len())?;
    let inputs = PipelineInputs {
        corpus: &corpus,
        specs: &specs,
        test: &test,
        test_labels: &labels,
        train: &train,
    };
    let out = run_pipeline(&inputs, &params)?;
    write_outputs(ctx, &out, corpus.dim)?;
    fewshot_from_run(ctx, &out, &corpus, &train, &test, &labels)
}
