//! Top-1 evaluation, head comparison and seeded few-shot trials.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attune::{build_centroid_head, ensemble_heads, AlphaSchedule, ClassClusters};
use crate::corpus_io::{EmbeddingMatrix, LabeledExample};
use crate::error::{Error, Result};
use crate::head::ClassifierHead;
use crate::pool::ZeroShotHead;

pub fn predict(head: &ClassifierHead, query: &[f32]) -> Result<usize> {
    head.predict(query)
}

fn check_inputs(head: &ClassifierHead, test: &EmbeddingMatrix, labels: &[usize]) -> Result<()> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if test.count() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} test embeddings, {} labels",
            test.count(),
            labels.len()
        )));
    }
    if test.dim() != head.dim() {
        return Err(Error::ShapeMismatch(format!(
            "test dim {}, head dim {}",
            test.dim(),
            head.dim()
        )));
    }
    let n = head.n_classes();
    if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n) {
        return Err(Error::LabelOutOfRange {
            sample,
            label,
            n_classes: n,
        });
    }
    Ok(())
}

/// Predictions for every test row, in row order.
pub fn predict_all(head: &ClassifierHead, test: &EmbeddingMatrix) -> Result<Vec<usize>> {
    (0..test.count())
        .into_par_iter()
        .map(|i| head.predict(test.row(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` for classes without test samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[label][prediction]`.
    pub confusion: Vec<Vec<u64>>,
    pub n_test: usize,
    #[serde(skip)]
    pub predictions: Vec<usize>,
}

fn report_from(n_classes: usize, labels: &[usize], predictions: Vec<usize>) -> EvalReport {
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&l, &p) in labels.iter().zip(&predictions) {
        confusion[l][p] += 1;
    }
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    EvalReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_class,
        confusion,
        n_test: labels.len(),
        predictions,
    }
}

pub fn top1_accuracy(
    head: &ClassifierHead,
    test: &EmbeddingMatrix,
    labels: &[usize],
) -> Result<EvalReport> {
    check_inputs(head, test, labels)?;
    let predictions = predict_all(head, test)?;
    Ok(report_from(head.n_classes(), labels, predictions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    /// `accuracy_b - accuracy_a`.
    pub delta: f64,
    pub per_class_delta: Vec<Option<f64>>,
    pub disagreements: usize,
    pub n_test: usize,
}

pub fn compare_heads(
    a: &ClassifierHead,
    b: &ClassifierHead,
    test: &EmbeddingMatrix,
    labels: &[usize],
) -> Result<DeltaReport> {
    a.same_shape(b)?;
    let ra = top1_accuracy(a, test, labels)?;
    let rb = top1_accuracy(b, test, labels)?;
    let disagreements = ra
        .predictions
        .iter()
        .zip(&rb.predictions)
        .filter(|(x, y)| x != y)
        .count();
    let per_class_delta = ra
        .per_class
        .iter()
        .zip(&rb.per_class)
        .map(|(x, y)| Some(y.as_ref()? - x.as_ref()?))
        .collect();
    Ok(DeltaReport {
        accuracy_a: ra.accuracy,
        accuracy_b: rb.accuracy,
        delta: rb.accuracy - ra.accuracy,
        per_class_delta,
        disagreements,
        n_test: labels.len(),
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the ChaCha8 stream used to draw shots of `class` under `seed`.
pub fn shot_stream_seed(seed: u64, class: usize) -> u64 {
    splitmix64(seed ^ splitmix64(class as u64))
}

/// Draws `k` examples of each class without replacement.
///
/// For class `c`, the candidates are the indices of `train` labeled `c` in
/// ascending order. A ChaCha8 stream seeded with `shot_stream_seed(seed, c)`
/// drives a partial Fisher-Yates shuffle: step `i` swaps position `i` with
/// `i + floor(u * (len - i) / 2^64)` where `u` is the next 64-bit output.
/// The first `k` positions are the sample.
pub fn sample_shots(
    train: &[LabeledExample],
    n_classes: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, ex) in train.iter().enumerate() {
        if ex.class_index >= n_classes {
            return Err(Error::UnknownClass {
                class: ex.class_index,
                n_classes,
            });
        }
        by_class[ex.class_index].push(i);
    }
    let mut out = Vec::with_capacity(k * n_classes);
    for (c, mut cands) in by_class.into_iter().enumerate() {
        if cands.len() < k {
            return Err(Error::InsufficientShots {
                class: c,
                available: cands.len(),
                requested: k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(shot_stream_seed(seed, c));
        let len = cands.len();
        for i in 0..k {
            let span = (len - i) as u128;
            let j = i + ((rng.next_u64() as u128 * span) >> 64) as usize;
            cands.swap(i, j);
        }
        out.extend(cands[..k].iter().map(|&i| train[i].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub shots_per_class: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Inputs shared by every seed of a few-shot run.
pub struct FewShotSetup<'a> {
    pub pool: &'a ClassClusters,
    pub train: &'a [LabeledExample],
    pub shots_per_class: usize,
    pub sched: &'a AlphaSchedule,
    pub wz: &'a ZeroShotHead,
    pub test: &'a EmbeddingMatrix,
    pub labels: &'a [usize],
}

/// For each seed: sample shots, mix into the pool clusters, build the
/// centroid and ensemble heads and measure top-1 accuracy.
pub fn fewshot_trials(setup: &FewShotSetup<'_>, seeds: &[u64]) -> Result<FewShotReport> {
    let n = setup.wz.n_classes();
    if setup.pool.n_classes() != n {
        return Err(Error::ShapeMismatch(format!(
            "pool has {} classes, head has {n}",
            setup.pool.n_classes()
        )));
    }
    let accuracies = seeds
        .iter()
        .map(|&seed| {
            let shots = sample_shots(setup.train, n, setup.shots_per_class, seed)?;
            let mut clusters = setup.pool.clone();
            for s in &shots {
                clusters.push(s.class_index, &s.embedding)?;
            }
            let wft = build_centroid_head(&clusters)?;
            let head = ensemble_heads(&wft, setup.wz, setup.sched, false)?;
            Ok(top1_accuracy(&head.head, setup.test, setup.labels)?.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&accuracies);
    Ok(FewShotReport {
        shots_per_class: setup.shots_per_class,
        seeds: seeds.to_vec(),
        accuracies,
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_head(n: usize) -> ClassifierHead {
        let cols: Vec<Vec<f32>> = (0..n)
            .map(|c| (0..n).map(|i| if i == c { 1.0 } else { 0.0 }).collect())
            .collect();
        ClassifierHead::from_columns(n, &cols).unwrap()
    }

    #[test]
    fn predict_identity() {
        let h = identity_head(3);
        assert_eq!(predict(&h, &[1.0, 0.0, 0.0]).unwrap(), 0);
        assert_eq!(predict(&h, &[0.0, 0.2, 0.9]).unwrap(), 2);
    }

    #[test]
    fn perfect_separation_and_report_shape() {
        let h = identity_head(2);
        let test = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0], [0.0, 1.0], [0.9, 0.1]]).unwrap();
        let r = top1_accuracy(&h, &test, &[0, 1, 0]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![0, 1]]);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        let r = top1_accuracy(&h, &test, &[1, 1, 0]).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.confusion[1], vec![1, 1]);
    }

    #[test]
    fn eval_errors() {
        let h = identity_head(2);
        let empty = EmbeddingMatrix::empty(2);
        assert!(matches!(
            top1_accuracy(&h, &empty, &[]),
            Err(Error::EmptyTestSet)
        ));
        let test = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0]]).unwrap();
        assert!(matches!(
            top1_accuracy(&h, &test, &[5]),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
        assert!(matches!(
            top1_accuracy(&h, &test, &[0, 1]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn compare_examples() {
        let a = identity_head(2);
        let test = EmbeddingMatrix::from_rows(2, &[[1.0, 0.0], [0.6, 0.8], [0.8, 0.6]]).unwrap();
        let labels = [0, 1, 0];
        let same = compare_heads(&a, &a, &test, &labels).unwrap();
        assert_eq!(same.delta, 0.0);
        assert_eq!(same.disagreements, 0);

        // b flips the middle sample to class 0
        let b = ClassifierHead::from_columns(2, &[[1.0, 0.0], [0.0, 0.7]]).unwrap();
        let d = compare_heads(&b, &a, &test, &labels).unwrap();
        assert_eq!(d.disagreements, 1);
        assert!((d.delta - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shot_sampling_is_deterministic_and_complete() {
        let train: Vec<LabeledExample> = (0..12)
            .map(|i| LabeledExample {
                embedding: vec![i as f32, 1.0],
                class_index: i % 3,
            })
            .collect();
        let a = sample_shots(&train, 3, 2, 7).unwrap();
        let b = sample_shots(&train, 3, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        let full = sample_shots(&train, 3, 4, 1).unwrap();
        let mut firsts: Vec<f32> = full.iter().map(|e| e.embedding[0]).collect();
        firsts.sort_by(f32::total_cmp);
        assert_eq!(firsts, (0..12).map(|i| i as f32).collect::<Vec<_>>());
        assert!(matches!(
            sample_shots(&train, 3, 5, 1),
            Err(Error::InsufficientShots { requested: 5, .. })
        ));
    }

    #[test]
    fn mean_std_small() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }
}
