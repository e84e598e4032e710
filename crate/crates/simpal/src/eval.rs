//! Diagnostics: accuracy and its split by classifier agreement,
//! curriculum precision at confidence percentiles, the correct-in-
//! agreement migration series, proxy A-distance between feature sets,
//! and pre-classifier feature export.
//!
//! Metrics over the unlabeled target only touch ground truth through
//! the [`EvalLabels`] channel, named explicitly at each call site.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::data::{DomainDataset, EvalLabels};
use crate::model::{
    agreement, agreement_rate, extract_features, forward_batch, margin, predict, MarginMode, ModelError,
    ModelParams,
};
use crate::numeric::Matrix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset {0} is unlabeled")]
    Unlabeled(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Fraction of samples whose ensemble prediction matches the label.
pub fn accuracy(params: &ModelParams, dataset: &DomainDataset) -> Result<f64, EvalError> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| EvalError::Unlabeled(dataset.domain_id.clone()))?;
    Ok(accuracy_against(params, &dataset.features, labels)?)
}

/// Pseudo-label accuracy of the unlabeled target, measured through the
/// evaluation-only channel.
pub fn target_accuracy(params: &ModelParams, target: &DomainDataset, truth: &EvalLabels) -> Result<f64, ModelError> {
    accuracy_against(params, &target.features, truth.for_evaluation())
}

fn accuracy_against(params: &ModelParams, features: &Matrix, labels: &[usize]) -> Result<f64, ModelError> {
    let mats = forward_batch(params, features)?;
    let correct = mats.iter().zip(labels).filter(|(m, &y)| predict(m) == y).count();
    Ok(correct as f64 / mats.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct SplitAccuracy {
    /// Absent (not zero) when the subset is empty.
    pub acc_agree: Option<f64>,
    pub acc_disagree: Option<f64>,
    pub n_agree: usize,
    pub n_disagree: usize,
}

/// Pseudo-label accuracy separately over the agreement and disagreement
/// subsets of the target.
pub fn accuracy_split_by_agreement(
    params: &ModelParams,
    target: &DomainDataset,
    truth: &EvalLabels,
) -> Result<SplitAccuracy, ModelError> {
    let mats = forward_batch(params, &target.features)?;
    let labels = truth.for_evaluation();
    let (mut n_agree, mut n_disagree) = (0usize, 0usize);
    let (mut correct_agree, mut correct_disagree) = (0usize, 0usize);
    for (m, &y) in mats.iter().zip(labels) {
        let correct = predict(m) == y;
        if agreement(m) {
            n_agree += 1;
            correct_agree += usize::from(correct);
        } else {
            n_disagree += 1;
            correct_disagree += usize::from(correct);
        }
    }
    let frac = |c: usize, n: usize| (n > 0).then(|| c as f64 / n as f64);
    Ok(SplitAccuracy {
        acc_agree: frac(correct_agree, n_agree),
        acc_disagree: frac(correct_disagree, n_disagree),
        n_agree,
        n_disagree,
    })
}

/// Pseudo-label precision over cumulative confidence percentiles:
/// agreement samples sorted by margin descending, bin k covering the
/// top k/n_bins fraction. Bins are merged down when there are fewer
/// agreement samples than bins.
pub fn curriculum_precision(
    params: &ModelParams,
    target: &DomainDataset,
    truth: &EvalLabels,
    n_bins: usize,
    margin_mode: MarginMode,
) -> Result<Vec<(f64, f64)>, ModelError> {
    assert!(n_bins >= 2);
    let mats = forward_batch(params, &target.features)?;
    let labels = truth.for_evaluation();
    let mut agreed: Vec<(f64, bool)> = mats
        .iter()
        .zip(labels)
        .filter(|(m, _)| agreement(m))
        .map(|(m, &y)| (margin(m, margin_mode), predict(m) == y))
        .collect();
    agreed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    if agreed.is_empty() {
        return Ok(Vec::new());
    }
    let n = agreed.len();
    let bins = n_bins.min(n);
    let mut out = Vec::with_capacity(bins);
    for k in 1..=bins {
        let count = if k == bins { n } else { (k * n) / bins };
        let count = count.max(1);
        let correct = agreed[..count].iter().filter(|(_, c)| *c).count();
        out.push((100.0 * k as f64 / bins as f64, correct as f64 / count as f64));
    }
    Ok(out)
}

/// Fraction of all target samples that are simultaneously in agreement
/// and correctly pseudo-labeled, per parameter snapshot.
pub fn correct_agreement_migration(
    snapshots: &[&ModelParams],
    target: &DomainDataset,
    truth: &EvalLabels,
) -> Result<Vec<f64>, ModelError> {
    assert!(snapshots.len() >= 2, "need at least two snapshots");
    snapshots
        .iter()
        .map(|params| correct_in_agreement_fraction(params, target, truth))
        .collect()
}

pub fn correct_in_agreement_fraction(
    params: &ModelParams,
    target: &DomainDataset,
    truth: &EvalLabels,
) -> Result<f64, ModelError> {
    let mats = forward_batch(params, &target.features)?;
    let labels = truth.for_evaluation();
    let hits = mats
        .iter()
        .zip(labels)
        .filter(|(m, &y)| agreement(m) && predict(m) == y)
        .count();
    Ok(hits as f64 / mats.len() as f64)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// Content hash of a feature set, so the train/test split depends on the
// data and seed but not on argument order.
fn content_seed(features: &Matrix, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for v in features.data() {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct SplitHalves {
    train: Vec<usize>,
    test: Vec<usize>,
}

fn half_split(features: &Matrix, seed: u64) -> SplitHalves {
    let mut rng = crate::data::substream(content_seed(features, seed), 0xa_d157);
    let order = crate::data::shuffled_indices(features.rows(), &mut rng);
    let mid = order.len() / 2;
    SplitHalves {
        train: order[..mid].to_vec(),
        test: order[mid..].to_vec(),
    }
}

/// Proxy A-distance between two feature sets: 2(1 - 2e) with e the
/// balanced test error of a logistic domain discriminator trained from
/// zero initialization for a fixed 500-update budget, clamped at 0.5.
pub fn proxy_a_distance(features_a: &Matrix, features_b: &Matrix, seed: u64) -> Result<f64, EvalError> {
    if features_a.cols() != features_b.cols() {
        return Err(EvalError::Dimension(format!(
            "{} vs {} feature dimensions",
            features_a.cols(),
            features_b.cols()
        )));
    }
    let d = features_a.cols();
    let split_a = half_split(features_a, seed);
    let split_b = half_split(features_b, seed);

    // logistic discriminator, label a=0 / b=1, full-batch Adam
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut m = vec![0.0f64; d + 1];
    let mut v = vec![0.0f64; d + 1];
    let (beta1, beta2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.05);
    let n_train = (split_a.train.len() + split_b.train.len()) as f64;
    for t in 1..=500u32 {
        let mut gw = vec![0.0f64; d];
        let mut gb = 0.0f64;
        let mut acc_grad = |row: &[f64], y: f64| {
            let z = row.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            let err = sigmoid(z) - y;
            for (g, x) in gw.iter_mut().zip(row) {
                *g += err * x / n_train;
            }
            gb += err / n_train;
        };
        for &i in &split_a.train {
            acc_grad(features_a.row(i), 0.0);
        }
        for &i in &split_b.train {
            acc_grad(features_b.row(i), 1.0);
        }
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (k, g) in gw.iter().chain(std::iter::once(&gb)).enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let step = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            if k < d {
                w[k] -= step;
            } else {
                b -= step;
            }
        }
    }

    // balanced error over the held-out halves; z == 0 counts half an
    // error for either class so the metric is exactly label-symmetric
    let error_on = |features: &Matrix, idx: &[usize], y: f64| -> f64 {
        let mut err = 0.0;
        for &i in idx {
            let z = features.row(i).iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + b;
            err += if z == 0.0 {
                0.5
            } else if (z > 0.0) == (y > 0.5) {
                0.0
            } else {
                1.0
            };
        }
        err / idx.len() as f64
    };
    let eps_err = 0.5 * (error_on(features_a, &split_a.test, 0.0) + error_on(features_b, &split_b.test, 1.0));
    let eps_err = eps_err.min(0.5);
    Ok(2.0 * (1.0 - 2.0 * eps_err))
}

/// Spearman rank correlation with average ranks for ties. Returns 0
/// when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Writes the pre-classifier features of every sample in every dataset:
/// `domain_id,label,agreement,z0..z{L-1}`.
pub fn export_features(params: &ModelParams, datasets: &[&DomainDataset], path: &Path) -> Result<(), EvalError> {
    let latent = params.latent_dim();
    let mut out = String::from("domain_id,label,agreement");
    for j in 0..latent {
        let _ = write!(out, ",z{j}");
    }
    out.push('\n');
    for ds in datasets {
        let z = extract_features(params, &ds.features)?;
        let mats = forward_batch(params, &ds.features)?;
        for i in 0..ds.len() {
            out.push_str(&ds.domain_id);
            out.push(',');
            if let Some(labels) = &ds.labels {
                let _ = write!(out, "{}", labels[i]);
            }
            let _ = write!(out, ",{}", u8::from(agreement(&mats[i])));
            for v in z.row(i) {
                let _ = write!(out, ",{:.16e}", v);
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Proxy A-distance for one named domain pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PairDistance {
    pub pair: String,
    pub dist: f64,
}

/// Flat evaluation report; accuracy fields are absent without the
/// target evaluation channel.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub agreement_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_accuracy_overall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_accuracy_agree: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_accuracy_disagree: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct_in_agreement_fraction: Option<f64>,
    /// (cumulative percentile, precision); empty without ground truth.
    pub curriculum_precision: Vec<(f64, f64)>,
    pub proxy_a_source_target: Vec<PairDistance>,
    /// True when ground-truth metrics above used the evaluation-only
    /// label channel.
    pub used_evaluation_channel: bool,
}

/// Full diagnostic report for one parameter snapshot.
pub fn evaluate(
    params: &ModelParams,
    sources: &[DomainDataset],
    target: &DomainDataset,
    truth: Option<&EvalLabels>,
    n_bins: usize,
    margin_mode: MarginMode,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let a = agreement_rate(params, target)?;
    let target_z = extract_features(params, &target.features)?;
    let mut proxy = Vec::new();
    for src in sources {
        let src_z = extract_features(params, &src.features)?;
        proxy.push(PairDistance {
            pair: format!("{}->{}", src.domain_id, target.domain_id),
            dist: proxy_a_distance(&src_z, &target_z, seed)?,
        });
    }
    let mut report = EvalReport {
        agreement_rate: a,
        target_accuracy: None,
        pseudo_label_accuracy_overall: None,
        pseudo_label_accuracy_agree: None,
        pseudo_label_accuracy_disagree: None,
        correct_in_agreement_fraction: None,
        curriculum_precision: Vec::new(),
        proxy_a_source_target: proxy,
        used_evaluation_channel: false,
    };
    if let Some(truth) = truth {
        let acc = target_accuracy(params, target, truth)?;
        let split = accuracy_split_by_agreement(params, target, truth)?;
        report.target_accuracy = Some(acc);
        report.pseudo_label_accuracy_overall = Some(acc);
        report.pseudo_label_accuracy_agree = split.acc_agree;
        report.pseudo_label_accuracy_disagree = split.acc_disagree;
        report.correct_in_agreement_fraction = Some(correct_in_agreement_fraction(params, target, truth)?);
        report.curriculum_precision = curriculum_precision(params, target, truth, n_bins, margin_mode)?;
        report.used_evaluation_channel = true;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domains, hide_labels, ShiftConfig};
    use crate::model::init_params;
    use rand::Rng;

    fn labeled_cluster(id: &str, mean: f64, n: usize, seed: u64) -> DomainDataset {
        let mut rng = crate::data::substream(seed, 0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![mean + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        DomainDataset {
            domain_id: id.into(),
            features: Matrix::from_rows(&rows).unwrap(),
            labels: Some(vec![0; n]),
            label_set: [0].into_iter().collect(),
        }
    }

    #[test]
    fn accuracy_rejects_unlabeled() {
        let params = init_params(2, &[], 3, 1, 2, 0);
        let mut ds = labeled_cluster("x", 0.0, 4, 1);
        ds.labels = None;
        assert!(matches!(accuracy(&params, &ds), Err(EvalError::Unlabeled(_))));
    }

    #[test]
    fn accuracy_duplication_invariant() {
        let params = init_params(2, &[4], 3, 2, 3, 3);
        let mut ds = labeled_cluster("x", 0.5, 6, 2);
        ds.labels = Some(vec![0, 1, 2, 0, 1, 2]);
        ds.label_set = (0..3).collect();
        let a1 = accuracy(&params, &ds).unwrap();
        let mut doubled_rows: Vec<Vec<f64>> = (0..6).map(|i| ds.features.row(i).to_vec()).collect();
        doubled_rows.extend(doubled_rows.clone());
        let doubled = DomainDataset {
            domain_id: "x".into(),
            features: Matrix::from_rows(&doubled_rows).unwrap(),
            labels: Some([ds.labels.clone().unwrap(), ds.labels.clone().unwrap()].concat()),
            label_set: ds.label_set.clone(),
        };
        assert!((accuracy(&params, &doubled).unwrap() - a1).abs() < 1e-12);
    }

    #[test]
    fn split_recombination_is_exact() {
        let cfg = ShiftConfig {
            n_source_domains: 1,
            n_classes: 3,
            d_in: 2,
            samples_per_class_per_domain: 30,
            rotation_per_domain: vec![0.0, 0.4],
            translation_per_domain: vec![vec![0.0; 2]; 2],
            scale_per_domain: vec![1.0; 2],
            cluster_noise_std: 0.4,
            seed: 5,
        };
        let mut domains = generate_domains(&cfg).unwrap();
        let (target, truth) = hide_labels(domains.pop().unwrap());
        let truth = truth.unwrap();
        let params = init_params(2, &[6], 4, 2, 3, 9);
        let split = accuracy_split_by_agreement(&params, &target, &truth).unwrap();
        let overall = target_accuracy(&params, &target, &truth).unwrap();
        let n = (split.n_agree + split.n_disagree) as f64;
        let recombined = (split.n_agree as f64 * split.acc_agree.unwrap_or(0.0)
            + split.n_disagree as f64 * split.acc_disagree.unwrap_or(0.0))
            / n;
        assert!((recombined - overall).abs() < 1e-12);
    }

    #[test]
    fn single_head_disagreement_subset_absent() {
        let params = init_params(2, &[], 3, 1, 2, 0);
        let ds = labeled_cluster("t", 0.0, 5, 3);
        let (target, truth) = hide_labels(ds);
        let split = accuracy_split_by_agreement(&params, &target, &truth.unwrap()).unwrap();
        assert_eq!(split.n_disagree, 0);
        assert!(split.acc_disagree.is_none());
        assert_eq!(split.n_agree, 5);
    }

    #[test]
    fn identical_heads_agree_everywhere() {
        let mut params = init_params(2, &[4], 3, 2, 3, 7);
        params.heads[1] = params.heads[0].clone();
        let mut ds = labeled_cluster("t", 0.3, 8, 4);
        ds.labels = Some((0..8).map(|i| i % 3).collect());
        let (target, truth) = hide_labels(ds);
        let truth = truth.unwrap();
        let split = accuracy_split_by_agreement(&params, &target, &truth).unwrap();
        assert_eq!(split.n_agree, 8);
        let overall = target_accuracy(&params, &target, &truth).unwrap();
        assert!((split.acc_agree.unwrap() - overall).abs() < 1e-12);
    }

    #[test]
    fn curriculum_precision_counting() {
        // Single-head model agrees everywhere; rig labels so the top
        // half (by margin) is correct and the bottom half wrong.
        let params = init_params(2, &[], 4, 1, 2, 1);
        let mut rng = crate::data::substream(8, 3);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let features = Matrix::from_rows(&rows).unwrap();
        let mats = forward_batch(&params, &features).unwrap();
        let mut by_margin: Vec<(usize, f64)> = mats
            .iter()
            .enumerate()
            .map(|(i, m)| (i, margin(m, MarginMode::Ensemble)))
            .collect();
        by_margin.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut labels = vec![0usize; 10];
        for (rank, (i, _)) in by_margin.iter().enumerate() {
            labels[*i] = if rank < 5 {
                predict(&mats[*i])
            } else {
                1 - predict(&mats[*i])
            };
        }
        let ds = DomainDataset {
            domain_id: "t".into(),
            features,
            labels: Some(labels),
            label_set: (0..2).collect(),
        };
        let (target, truth) = hide_labels(ds);
        let curve = curriculum_precision(&params, &target, &truth.unwrap(), 2, MarginMode::Ensemble).unwrap();
        assert_eq!(curve, vec![(50.0, 1.0), (100.0, 0.5)]);
    }

    #[test]
    fn curriculum_all_correct_is_flat() {
        let params = init_params(2, &[], 4, 1, 2, 1);
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -(i as f64)]).collect();
        let features = Matrix::from_rows(&rows).unwrap();
        let mats = forward_batch(&params, &features).unwrap();
        let labels: Vec<usize> = mats.iter().map(predict).collect();
        let ds = DomainDataset {
            domain_id: "t".into(),
            features,
            labels: Some(labels),
            label_set: (0..2).collect(),
        };
        let (target, truth) = hide_labels(ds);
        let curve = curriculum_precision(&params, &target, &truth.unwrap(), 4, MarginMode::Ensemble).unwrap();
        assert!(curve.iter().all(|&(_, p)| p == 1.0));
        // percentiles strictly increasing, last covers everything
        assert!(curve.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(curve.last().unwrap().0, 100.0);
    }

    #[test]
    fn curriculum_merges_bins_when_few_samples() {
        let params = init_params(2, &[], 4, 1, 2, 1);
        let ds = labeled_cluster("t", 0.0, 3, 9);
        let (target, truth) = hide_labels(ds);
        let curve = curriculum_precision(&params, &target, &truth.unwrap(), 10, MarginMode::Ensemble).unwrap();
        assert_eq!(curve.len(), 3);
    }

    #[test]
    fn migration_constant_for_identical_snapshots() {
        let params = init_params(2, &[4], 3, 2, 3, 5);
        let mut ds = labeled_cluster("t", 0.2, 9, 6);
        ds.labels = Some((0..9).map(|i| i % 3).collect());
        let (target, truth) = hide_labels(ds);
        let truth = truth.unwrap();
        let series = correct_agreement_migration(&[&params, &params, &params], &target, &truth).unwrap();
        assert!(series.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn proxy_a_identical_sets_near_zero() {
        let a = labeled_cluster("a", 0.0, 200, 11).features;
        let d = proxy_a_distance(&a, &a, 3).unwrap();
        assert!(d.abs() <= 0.2, "dist = {d}");
    }

    #[test]
    fn proxy_a_far_clusters_near_two() {
        let a = labeled_cluster("a", 0.0, 200, 12).features;
        let b = labeled_cluster("b", 20.0, 200, 13).features;
        let d = proxy_a_distance(&a, &b, 3).unwrap();
        assert!((d - 2.0).abs() <= 0.1, "dist = {d}");
    }

    #[test]
    fn proxy_a_symmetric_under_swap() {
        let a = labeled_cluster("a", 0.0, 120, 14).features;
        let b = labeled_cluster("b", 1.0, 120, 15).features;
        let d1 = proxy_a_distance(&a, &b, 7).unwrap();
        let d2 = proxy_a_distance(&b, &a, 7).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn proxy_a_dimension_mismatch_rejected() {
        let a = Matrix::zeros(4, 2);
        let b = Matrix::zeros(4, 3);
        assert!(proxy_a_distance(&a, &b, 0).is_err());
    }

    #[test]
    fn spearman_basic() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn export_features_schema() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(2, &[4], 5, 2, 3, 2);
        let ds = labeled_cluster("src", 0.0, 4, 17);
        let (unlabeled, _) = hide_labels(labeled_cluster("tgt", 1.0, 3, 18));
        let path = dir.path().join("feat.csv");
        export_features(&params, &[&ds, &unlabeled], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 3);
        // column count == latent + 3
        assert_eq!(lines[0].split(',').count(), 5 + 3);
        assert!(lines[1].starts_with("src,0,"));
        assert!(lines[5].starts_with("tgt,,"));
        // deterministic re-export
        let path2 = dir.path().join("feat2.csv");
        export_features(&params, &[&ds, &unlabeled], &path2).unwrap();
        assert_eq!(text, std::fs::read_to_string(&path2).unwrap());
    }

    #[test]
    fn evaluate_report_serializes() {
        let cfg = ShiftConfig {
            n_source_domains: 2,
            n_classes: 3,
            d_in: 2,
            samples_per_class_per_domain: 10,
            rotation_per_domain: vec![-0.2, 0.2, 0.5],
            translation_per_domain: vec![vec![0.0; 2]; 3],
            scale_per_domain: vec![1.0; 3],
            cluster_noise_std: 0.3,
            seed: 3,
        };
        let mut domains = generate_domains(&cfg).unwrap();
        let (target, truth) = hide_labels(domains.pop().unwrap());
        let params = init_params(2, &[6], 4, 2, 3, 4);
        let report = evaluate(
            &params,
            &domains,
            &target,
            truth.as_ref(),
            5,
            MarginMode::Ensemble,
            1,
        )
        .unwrap();
        assert_eq!(report.proxy_a_source_target.len(), 2);
        assert!(report.used_evaluation_channel);
        let json = serde_json::to_string_pretty(&report).unwrap();
        let parsed: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.proxy_a_source_target.len(), 2);

        // without the channel the accuracy fields drop out
        let blind = evaluate(&params, &domains, &target, None, 5, MarginMode::Ensemble, 1).unwrap();
        assert!(blind.target_accuracy.is_none());
        let json = serde_json::to_string(&blind).unwrap();
        assert!(!json.contains("target_accuracy"));
        assert!(json.contains("agreement_rate"));
    }
}
