//! Python bindings: the caption index, pool stages, head building and the
//! synthetic end-to-end run. Vectors cross the boundary as lists of floats,
//! reports as plain dicts.

use std::collections::HashSet;

use priming_core::attune::{self, AlphaMode, AlphaSchedule, ClassClusters};
use priming_core::corpus_io::{self, CaptionRecord, EmbeddingMatrix, EmbeddingStore};
use priming_core::eval;
use priming_core::head::ClassifierHead;
use priming_core::pipeline::{run_end_to_end, PipelineParams};
use priming_core::pool::{self as core_pool, PoolEntry, PoolStage, PrimingPool, ZeroShotHead};
use priming_core::synthbench::SynthConfig;
use priming_core::text_index::{self, InvertedIndex};
use priming_core::transduct::{self, PoolMatrix};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(priming, PrimingError, PyException);

fn err(e: priming_core::Error) -> PyErr {
    PrimingError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_json<T: serde::de::DeserializeOwned>(
    py: Python<'_>,
    obj: &Bound<'_, PyAny>,
) -> PyResult<T> {
    let text: String = py
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn matrix(rows: &[Vec<f32>]) -> PyResult<EmbeddingMatrix> {
    let dim = rows.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(PyValueError::new_err("need at least one non-empty row"));
    }
    EmbeddingMatrix::from_rows(dim, rows).map_err(err)
}

fn head(columns: &[Vec<f32>]) -> PyResult<ClassifierHead> {
    let dim = columns.first().map_or(0, Vec::len);
    ClassifierHead::from_columns(dim, columns).map_err(err)
}

fn schedule(n0: f64, p: f64, mode: &str, fixed: Option<f64>) -> PyResult<AlphaSchedule> {
    let mode = match mode {
        "per_class" => AlphaMode::PerClass,
        "global" => AlphaMode::Global,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown alpha mode {other:?}"
            )))
        }
    };
    let s = AlphaSchedule { n0, p, mode, fixed };
    s.validate().map_err(err)?;
    Ok(s)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    text_index::tokenize(text)
}

/// Positional caption index built from `(id, caption)` pairs.
#[pyclass(frozen)]
struct TextIndex {
    inner: InvertedIndex,
}

#[pymethods]
impl TextIndex {
    #[new]
    fn new(py: Python<'_>, records: Vec<(u64, String)>) -> PyResult<Self> {
        let recs: Vec<CaptionRecord> = records
            .into_iter()
            .map(|(id, c)| CaptionRecord::new(id, c))
            .collect();
        let inner = py.detach(|| InvertedIndex::build(&recs)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: InvertedIndex::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn record_count(&self) -> usize {
        self.inner.record_count()
    }

    fn phrase_search(&self, phrase: &str) -> PyResult<Vec<u64>> {
        self.inner.phrase_search(phrase).map_err(err)
    }

    fn count_matches(&self, phrase: &str) -> PyResult<usize> {
        self.inner.count_matches(phrase).map_err(err)
    }

    fn postings(&self, token: &str) -> Vec<(u64, u32)> {
        self.inner.postings(token)
    }

    fn query_stats(&self, py: Python<'_>, phrases: Vec<String>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.query_stats(&phrases))
    }
}

#[pyfunction]
#[pyo3(signature = (n, n0=10.0, p=2.0))]
fn compute_alpha(n: usize, n0: f64, p: f64) -> PyResult<f64> {
    let s = schedule(n0, p, "per_class", None)?;
    Ok(attune::compute_alpha(n, &s))
}

#[pyfunction]
fn normalize(rows: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
    let m = corpus_io::normalize_embeddings(&matrix(&rows)?).map_err(err)?;
    Ok(m.rows().map(<[f32]>::to_vec).collect())
}

#[pyfunction]
fn class_centroid(rows: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
    attune::class_centroid(rows.iter().map(Vec::as_slice)).map_err(err)
}

type CentroidParts = (Vec<Vec<f32>>, Vec<usize>, Vec<bool>);

/// Centroid head from per-class row lists; empty lists are flagged.
/// Returns `(columns, support, empty)`.
#[pyfunction]
fn centroid_head(
    dim: usize,
    clusters: Vec<Vec<Vec<f32>>>,
) -> PyResult<CentroidParts> {
    let mut cc = ClassClusters::new(dim, clusters.len());
    for (c, rows) in clusters.iter().enumerate() {
        for r in rows {
            cc.push(c, r).map_err(err)?;
        }
    }
    let h = attune::build_centroid_head(&cc).map_err(err)?;
    Ok((
        h.head.columns().map(<[f32]>::to_vec).collect(),
        h.support,
        h.empty,
    ))
}

/// Ensembles centroid and zero-shot columns. Returns `(columns, alphas)`.
#[pyfunction]
#[pyo3(signature = (centroids, support, zero_shot, n0=10.0, p=2.0, mode="per_class", fixed=None, renormalize=false))]
#[allow(clippy::too_many_arguments)]
fn ensemble(
    centroids: Vec<Vec<f32>>,
    support: Vec<usize>,
    zero_shot: Vec<Vec<f32>>,
    n0: f64,
    p: f64,
    mode: &str,
    fixed: Option<f64>,
    renormalize: bool,
) -> PyResult<(Vec<Vec<f32>>, Vec<f64>)> {
    let wz = ZeroShotHead(head(&zero_shot)?);
    let wft_head = head(&centroids)?;
    if support.len() != wft_head.n_classes() {
        return Err(PyValueError::new_err(
            "support length must equal the number of columns",
        ));
    }
    let wft = attune::CentroidHead {
        empty: support.iter().map(|&s| s == 0).collect(),
        support,
        head: wft_head,
    };
    let e = attune::ensemble_heads(&wft, &wz, &schedule(n0, p, mode, fixed)?, renormalize)
        .map_err(err)?;
    Ok((e.head.columns().map(<[f32]>::to_vec).collect(), e.alphas))
}

#[pyfunction]
fn predict(columns: Vec<Vec<f32>>, query: Vec<f32>) -> PyResult<usize> {
    eval::predict(&head(&columns)?, &query).map_err(err)
}

#[pyfunction]
fn top1_accuracy(
    py: Python<'_>,
    columns: Vec<Vec<f32>>,
    test: Vec<Vec<f32>>,
    labels: Vec<usize>,
) -> PyResult<Py<PyAny>> {
    if test.is_empty() {
        return Err(err(priming_core::Error::EmptyTestSet));
    }
    let r = eval::top1_accuracy(&head(&columns)?, &matrix(&test)?, &labels).map_err(err)?;
    to_py(py, &r)
}

/// Top-k rows of `rows` (addressed by `ids`) for `query`, as `(id, score, rank)`.
#[pyfunction]
fn topk_neighbors(
    ids: Vec<u64>,
    rows: Vec<Vec<f32>>,
    query: Vec<f32>,
    k: usize,
) -> PyResult<Vec<(u64, f32, usize)>> {
    let pm = PoolMatrix::new(ids, matrix(&rows)?).map_err(err)?;
    let hits = transduct::topk_neighbors(&pm, &query, k).map_err(err)?;
    Ok(hits
        .into_iter()
        .map(|h| (h.record_id, h.score, h.rank))
        .collect())
}

/// In-memory corpus (ids + embeddings) plus class text embeddings; runs the
/// pool stages and returns pools as lists of `(record_id, class_index, score)`
/// per class.
#[pyclass(frozen)]
struct Corpus {
    store: EmbeddingStore,
    index: InvertedIndex,
}

type PyPool = Vec<Vec<(u64, usize, f32)>>;

fn pool_to_py(pool: &PrimingPool) -> PyPool {
    pool.clusters
        .iter()
        .map(|c| {
            c.iter()
                .map(|e| (e.record_id, e.class_index, e.score))
                .collect()
        })
        .collect()
}

fn pool_from_py(clusters: PyPool, stage: PoolStage) -> PrimingPool {
    PrimingPool {
        stage,
        clusters: clusters
            .into_iter()
            .map(|c| {
                c.into_iter()
                    .map(|(record_id, class_index, score)| PoolEntry {
                        record_id,
                        class_index,
                        score,
                    })
                    .collect()
            })
            .collect(),
    }
}

fn specs_from(names: &[Vec<String>], text: &[Vec<f32>]) -> PyResult<Vec<corpus_io::ClassSpec>> {
    if names.len() != text.len() {
        return Err(PyValueError::new_err("one phrase list per text embedding"));
    }
    let specs = names
        .iter()
        .zip(text)
        .enumerate()
        .map(|(i, (phrases, emb))| corpus_io::ClassSpec {
            class_index: i,
            name: phrases.first().cloned().unwrap_or_default(),
            aliases: phrases.iter().skip(1).cloned().collect(),
            text_embedding: emb.clone(),
        })
        .collect();
    corpus_io::validate_class_specs(specs, text.first().map(Vec::len)).map_err(err)
}

#[pymethods]
impl Corpus {
    #[new]
    fn new(
        py: Python<'_>,
        records: Vec<(u64, String)>,
        embeddings: Vec<Vec<f32>>,
    ) -> PyResult<Self> {
        let m = corpus_io::normalize_embeddings(&matrix(&embeddings)?).map_err(err)?;
        let recs: Vec<CaptionRecord> = records
            .into_iter()
            .map(|(id, c)| CaptionRecord::new(id, c))
            .collect();
        let ids = recs.iter().map(|r| r.id).collect();
        let store = EmbeddingStore::new(ids, m).map_err(err)?;
        let index = py.detach(|| InvertedIndex::build(&recs)).map_err(err)?;
        Ok(Self { store, index })
    }

    /// `classes[c]` is the name followed by aliases of class `c`.
    fn build_pool(
        &self,
        classes: Vec<Vec<String>>,
        text_embeddings: Vec<Vec<f32>>,
    ) -> PyResult<PyPool> {
        let specs = specs_from(&classes, &text_embeddings)?;
        let wz = core_pool::build_zero_shot_head(&specs).map_err(err)?;
        let built = core_pool::build_pool(&self.index, &specs, &wz, &self.store).map_err(err)?;
        Ok(pool_to_py(&built.pool))
    }

    fn consistency_filter(&self, pool: PyPool, text_embeddings: Vec<Vec<f32>>) -> PyResult<PyPool> {
        let wz = ZeroShotHead(head(&text_embeddings)?);
        let wz = ZeroShotHead(
            ClassifierHead::from_columns(
                wz.dim(),
                &wz.columns()
                    .map(|c| priming_core::linalg::normalized(c).unwrap_or_else(|| c.to_vec()))
                    .collect::<Vec<_>>(),
            )
            .map_err(err)?,
        );
        let p = pool_from_py(pool, PoolStage::Raw);
        Ok(pool_to_py(
            &core_pool::consistency_filter(&p, &wz, &self.store).map_err(err)?,
        ))
    }

    fn transductive_filter(&self, pool: PyPool, test: Vec<Vec<f32>>, k: usize) -> PyResult<PyPool> {
        let p = pool_from_py(pool, PoolStage::ConsistencyFiltered);
        let t = corpus_io::normalize_embeddings(&matrix(&test)?).map_err(err)?;
        Ok(pool_to_py(
            &transduct::transductive_filter(&p, &self.store, &t, k).map_err(err)?,
        ))
    }

    /// Per-class embedding rows of a pool, ready for `centroid_head`.
    fn pool_embeddings(&self, pool: PyPool) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let p = pool_from_py(pool, PoolStage::ConsistencyFiltered);
        let cc = attune::pool_clusters(&p, &self.store).map_err(err)?;
        Ok((0..cc.n_classes())
            .map(|c| cc.rows(c).map(<[f32]>::to_vec).collect())
            .collect())
    }
}

#[pyfunction]
fn cap_per_class(pool: PyPool, m: usize) -> PyPool {
    pool_to_py(&core_pool::cap_per_class(
        &pool_from_py(pool, PoolStage::ConsistencyFiltered),
        m,
    ))
}

#[pyfunction]
fn exclude_ids(pool: PyPool, excluded: HashSet<u64>) -> PyPool {
    pool_to_py(&core_pool::exclude_ids(
        &pool_from_py(pool, PoolStage::ConsistencyFiltered),
        &excluded,
    ))
}

/// Generates a synthetic corpus from `config` (a dict of synth settings) and
/// runs the full pipeline. Returns the summary dict.
#[pyfunction]
#[pyo3(signature = (config=None, cap=100, k=10, n0=10.0, p=2.0, mode="per_class", fixed=None, shots=0, shot_seed=0))]
#[allow(clippy::too_many_arguments)]
fn run_synthetic(
    py: Python<'_>,
    config: Option<Bound<'_, PyAny>>,
    cap: usize,
    k: usize,
    n0: f64,
    p: f64,
    mode: &str,
    fixed: Option<f64>,
    shots: usize,
    shot_seed: u64,
) -> PyResult<Py<PyAny>> {
    let cfg: SynthConfig = match config {
        Some(c) => from_json(py, &c)?,
        None => SynthConfig::default(),
    };
    let params = PipelineParams {
        cap,
        k,
        alpha: schedule(n0, p, mode, fixed)?,
        shots,
        shot_seed,
        ..PipelineParams::default()
    };
    let out = py.detach(|| run_end_to_end(&cfg, &params)).map_err(err)?;
    to_py(py, &out.summary)
}

#[pymodule]
fn priming(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PrimingError", m.py().get_type::<PrimingError>())?;
    m.add_class::<TextIndex>()?;
    m.add_class::<Corpus>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(compute_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(class_centroid, m)?)?;
    m.add_function(wrap_pyfunction!(centroid_head, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(top1_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(topk_neighbors, m)?)?;
    m.add_function(wrap_pyfunction!(cap_per_class, m)?)?;
    m.add_function(wrap_pyfunction!(exclude_ids, m)?)?;
    m.add_function(wrap_pyfunction!(run_synthetic, m)?)?;
    Ok(())
}
