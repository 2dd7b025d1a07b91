//! Nearest-class-mean centroid head, the alpha schedule and the ensembled
//! head `(1 - alpha) * centroid + alpha * zero_shot`, built column by column.

use serde::{Deserialize, Serialize};

use crate::corpus_io::{EmbeddingStore, LabeledExample};
use crate::error::{Error, Result};
use crate::head::ClassifierHead;
use crate::linalg;
use crate::pool::{PrimingPool, ZeroShotHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// One alpha from the total support over all classes.
    Global,
    /// `alpha_c` from the support of class `c` alone.
    PerClass,
}

/// `alpha(n) = exp(-(n / n0)^p)`, or a fixed value when `fixed` is set.
///
/// `n0 = 10, p = 2` gives `exp(-n^2 / 100)`; `p = 1` gives the
/// `exp(-n / n0)` shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSchedule {
    pub n0: f64,
    pub p: f64,
    pub mode: AlphaMode,
    #[serde(default)]
    pub fixed: Option<f64>,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            n0: 10.0,
            p: 2.0,
            mode: AlphaMode::PerClass,
            fixed: None,
        }
    }
}

impl AlphaSchedule {
    pub fn fixed(alpha: f64) -> Self {
        Self {
            fixed: Some(alpha),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n0.is_finite() && self.n0 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha n0 must be positive, got {}",
                self.n0
            )));
        }
        if !(self.p.is_finite() && self.p > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha p must be positive, got {}",
                self.p
            )));
        }
        if let Some(a) = self.fixed {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidConfig(format!(
                    "fixed alpha {a} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Alpha for support `n`, honoring the fixed override.
    pub fn alpha_for(&self, n: usize) -> f64 {
        self.fixed.unwrap_or_else(|| compute_alpha(n, self))
    }
}

/// Schedule value at support `n`; the fixed override is ignored here.
///
/// Clamped below at the smallest positive normal f64 so the value stays in
/// `(0, 1]` after `exp` underflows.
pub fn compute_alpha(n: usize, sched: &AlphaSchedule) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let x = (n as f64 / sched.n0).powf(sched.p);
    (-x).exp().max(f64::MIN_POSITIVE)
}

/// Per-class embedding sequences, each stored as flattened rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassClusters {
    dim: usize,
    clusters: Vec<Vec<f32>>,
}

impl ClassClusters {
    pub fn new(dim: usize, n_classes: usize) -> Self {
        Self {
            dim,
            clusters: vec![Vec::new(); n_classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.clusters.len()
    }

    pub fn len(&self, class: usize) -> usize {
        self.clusters[class].len() / self.dim
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.n_classes()).map(|c| self.len(c)).collect()
    }

    pub fn rows(&self, class: usize) -> impl Iterator<Item = &[f32]> {
        self.clusters[class].chunks_exact(self.dim)
    }

    pub fn push(&mut self, class: usize, row: &[f32]) -> Result<()> {
        if class >= self.n_classes() {
            return Err(Error::UnknownClass {
                class,
                n_classes: self.n_classes(),
            });
        }
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: row.len(),
            });
        }
        self.clusters[class].extend_from_slice(row);
        Ok(())
    }
}

/// Embeddings of each pool cluster, in cluster order.
pub fn pool_clusters(pool: &PrimingPool, store: &EmbeddingStore) -> Result<ClassClusters> {
    let mut out = ClassClusters::new(store.dim(), pool.n_classes());
    for (c, cluster) in pool.clusters.iter().enumerate() {
        for e in cluster {
            out.push(c, store.require(e.record_id)?)?;
        }
    }
    Ok(out)
}

/// Pool clusters with each labeled shot appended `repeat` times to its class.
pub fn mix_shots(
    pool: &PrimingPool,
    store: &EmbeddingStore,
    shots: &[LabeledExample],
    repeat: usize,
) -> Result<ClassClusters> {
    let mut out = pool_clusters(pool, store)?;
    for shot in shots {
        for _ in 0..repeat {
            out.push(shot.class_index, &shot.embedding)?;
        }
    }
    Ok(out)
}

/// Mean of the rows rescaled to unit norm.
pub fn class_centroid<'a, I>(rows: I) -> Result<Vec<f32>>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        } else if r.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                found: r.len(),
            });
        }
        for (s, &x) in sum.iter_mut().zip(r) {
            *s += x as f64;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyCluster);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n.is_nan() || n < 1e-12 {
        return Err(Error::DegenerateCentroid { class: None });
    }
    Ok(mean.iter().map(|x| (x / n) as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidHead {
    /// Columns of empty classes are all zero.
    pub head: ClassifierHead,
    pub support: Vec<usize>,
    pub empty: Vec<bool>,
}

pub fn build_centroid_head(clusters: &ClassClusters) -> Result<CentroidHead> {
    let dim = clusters.dim();
    let mut columns = Vec::with_capacity(clusters.n_classes());
    let mut empty = Vec::with_capacity(clusters.n_classes());
    for c in 0..clusters.n_classes() {
        if clusters.len(c) == 0 {
            columns.push(vec![0.0; dim]);
            empty.push(true);
            continue;
        }
        let col = class_centroid(clusters.rows(c)).map_err(|e| match e {
            Error::DegenerateCentroid { .. } => Error::DegenerateCentroid { class: Some(c) },
            other => other,
        })?;
        columns.push(col);
        empty.push(false);
    }
    Ok(CentroidHead {
        head: ClassifierHead::from_columns(dim, &columns)?,
        support: clusters.sizes(),
        empty,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleHead {
    pub head: ClassifierHead,
    pub alphas: Vec<f64>,
}

/// Column `c` is `(1 - alpha_c) * y_c + alpha_c * z_c`. Empty classes always
/// use `alpha_c = 1`. Columns are left unnormalized unless `renormalize`.
pub fn ensemble_heads(
    wft: &CentroidHead,
    wz: &ZeroShotHead,
    sched: &AlphaSchedule,
    renormalize: bool,
) -> Result<EnsembleHead> {
    sched.validate()?;
    wft.head.same_shape(wz)?;
    let total: usize = wft.support.iter().sum();
    let alphas: Vec<f64> = (0..wz.n_classes())
        .map(|c| {
            if wft.empty[c] {
                1.0
            } else {
                match sched.mode {
                    AlphaMode::PerClass => sched.alpha_for(wft.support[c]),
                    AlphaMode::Global => sched.alpha_for(total),
                }
            }
        })
        .collect();
    let mut columns = Vec::with_capacity(wz.n_classes());
    for (c, &a) in alphas.iter().enumerate() {
        let mut col: Vec<f32> = wft
            .head
            .column(c)
            .iter()
            .zip(wz.column(c))
            .map(|(&y, &z)| ((1.0 - a) * y as f64 + a * z as f64) as f32)
            .collect();
        if renormalize {
            col = linalg::normalized(&col).unwrap_or(col);
        }
        columns.push(col);
    }
    Ok(EnsembleHead {
        head: ClassifierHead::from_columns(wz.dim(), &columns)?,
        alphas,
    })
}
