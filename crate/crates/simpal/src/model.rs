//! Shared feature extractor plus a bank of per-source classifier heads,
//! and the ensemble statistics derived from the stacked logit matrix:
//! ensemble probabilities, prediction, classifier agreement, agreement
//! rate, and the average classifier margin used as a curriculum weight.

use rand::Rng;
use thiserror::Error;

use crate::data::{substream, DomainDataset};
use crate::numeric::{softmax, Matrix, NumericError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("empty dataset")]
    EmptyDataset,
}

/// One affine layer: `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weights: Matrix,
    pub bias: Matrix,
}

impl Affine {
    fn random(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        // scaled uniform fan-in initialization
        let bound = (1.0 / d_in as f64).sqrt();
        let data: Vec<f64> = (0..d_in * d_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Affine {
            weights: Matrix::new(d_in, d_out, data).unwrap(),
            bias: Matrix::zeros(1, d_out),
        }
    }
}

/// Weights of the shared extractor (affine + ReLU stack ending in an
/// affine to the latent dimension, no final nonlinearity) and the
/// `n_d` classifier heads mapping latent -> n_c logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<Affine>,
    pub heads: Vec<Affine>,
}

impl ModelParams {
    pub fn d_in(&self) -> usize {
        self.extractor[0].weights.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.extractor.last().unwrap().weights.cols()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn n_classes(&self) -> usize {
        self.heads[0].weights.cols()
    }

    /// Stable flat ordering of every parameter tensor, extractor layers
    /// first (weights then bias per layer), then heads.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.extractor
            .iter()
            .chain(self.heads.iter())
            .flat_map(|a| [&a.weights, &a.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.extractor
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|a| [&mut a.weights, &mut a.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// The n_d x n_c stacked logit matrix; row i holds classifier i's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix(pub Matrix);

impl LogitMatrix {
    pub fn n_heads(&self) -> usize {
        self.0.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.cols()
    }
}

/// Which logit gap the margin averages over: the top-2 classes of the
/// ensemble probability vector (default), or each classifier's own
/// top-2 logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    #[default]
    Ensemble,
    PerRow,
}

/// Each head draws from an independent sub-stream of the seed, so the
/// heads start pairwise distinct while the run stays reproducible.
pub fn init_params(
    d_in: usize,
    hidden_dims: &[usize],
    latent_dim: usize,
    n_heads: usize,
    n_classes: usize,
    seed: u64,
) -> ModelParams {
    assert!(d_in >= 1 && latent_dim >= 1 && n_heads >= 1 && n_classes >= 2);
    let mut extractor = Vec::new();
    let mut rng = substream(seed, 0x1417_0000);
    let mut prev = d_in;
    for &h in hidden_dims {
        extractor.push(Affine::random(prev, h, &mut rng));
        prev = h;
    }
    extractor.push(Affine::random(prev, latent_dim, &mut rng));
    let heads = (0..n_heads)
        .map(|i| {
            let mut head_rng = substream(seed, 0x1417_1000 + i as u64);
            Affine::random(latent_dim, n_classes, &mut head_rng)
        })
        .collect();
    ModelParams { extractor, heads }
}

/// Latent features f(x) for a batch, one row per sample.
pub fn extract_features(params: &ModelParams, x: &Matrix) -> Result<Matrix, ModelError> {
    if x.cols() != params.d_in() {
        return Err(ModelError::Dimension(format!(
            "input dim {} but model expects {}",
            x.cols(),
            params.d_in()
        )));
    }
    let mut z = x.clone();
    let last = params.extractor.len() - 1;
    for (i, layer) in params.extractor.iter().enumerate() {
        let mut h = z.matmul(&layer.weights)?;
        for r in 0..h.rows() {
            for c in 0..h.cols() {
                let v = h.get(r, c) + layer.bias.get(0, c);
                h.set(r, c, if i < last && v < 0.0 { 0.0 } else { v });
            }
        }
        z = h;
    }
    Ok(z)
}

/// M = h . f(x) for a single sample (given as a 1 x d_in matrix row).
pub fn forward(params: &ModelParams, x: &Matrix) -> Result<LogitMatrix, ModelError> {
    let z = extract_features(params, x)?;
    let mut m = Matrix::zeros(params.n_heads(), params.n_classes());
    for (i, head) in params.heads.iter().enumerate() {
        let logits = z.matmul(&head.weights)?;
        for c in 0..params.n_classes() {
            m.set(i, c, logits.get(0, c) + head.bias.get(0, c));
        }
    }
    Ok(LogitMatrix(m))
}

/// Batched forward: one LogitMatrix per input row.
pub fn forward_batch(params: &ModelParams, x: &Matrix) -> Result<Vec<LogitMatrix>, ModelError> {
    let z = extract_features(params, x)?;
    let n = x.rows();
    let mut out = vec![Matrix::zeros(params.n_heads(), params.n_classes()); n];
    for (i, head) in params.heads.iter().enumerate() {
        let mut logits = z.matmul(&head.weights)?;
        for r in 0..n {
            for c in 0..params.n_classes() {
                let v = logits.get(r, c) + head.bias.get(0, c);
                logits.set(r, c, v);
                out[r].set(i, c, v);
            }
        }
    }
    Ok(out.into_iter().map(LogitMatrix).collect())
}

/// Convex combination of the per-classifier softmax rows.
pub fn ensemble_probs(m: &LogitMatrix) -> Vec<f64> {
    let n_d = m.n_heads();
    let mut p = vec![0.0; m.n_classes()];
    for i in 0..n_d {
        for (pj, sj) in p.iter_mut().zip(softmax(m.0.row(i))) {
            *pj += sj / n_d as f64;
        }
    }
    p
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Second-highest index with lowest-index tie-break, excluding `top`.
fn runner_up(v: &[f64], top: usize) -> usize {
    let mut best = None;
    for (i, &x) in v.iter().enumerate() {
        if i == top {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if x > v[b] => best = Some(i),
            _ => {}
        }
    }
    best.expect("n_c >= 2")
}

/// Ensemble argmax; ties break toward the lowest class index.
pub fn predict(m: &LogitMatrix) -> usize {
    argmax(&ensemble_probs(m))
}

/// 1 iff every classifier's per-row argmax coincides.
pub fn agreement(m: &LogitMatrix) -> bool {
    let first = argmax(m.0.row(0));
    (1..m.n_heads()).all(|i| argmax(m.0.row(i)) == first)
}

/// Fraction of target samples on which the classifiers agree.
pub fn agreement_rate(params: &ModelParams, target: &DomainDataset) -> Result<f64, ModelError> {
    if target.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mats = forward_batch(params, &target.features)?;
    let agreed = mats.iter().filter(|m| agreement(m)).count();
    Ok(agreed as f64 / mats.len() as f64)
}

/// Average classifier margin: the per-classifier logit gap between the
/// top-2 indices, averaged over classifiers. With `MarginMode::Ensemble`
/// the indices are fixed from the ensemble probability vector, so the
/// margin can be negative when classifiers disagree.
pub fn margin(m: &LogitMatrix, mode: MarginMode) -> f64 {
    let n_d = m.n_heads() as f64;
    match mode {
        MarginMode::Ensemble => {
            let p = ensemble_probs(m);
            let j = argmax(&p);
            let j2 = runner_up(&p, j);
            (0..m.n_heads()).map(|i| m.0.get(i, j) - m.0.get(i, j2)).sum::<f64>() / n_d
        }
        MarginMode::PerRow => (0..m.n_heads())
            .map(|i| {
                let row = m.0.row(i);
                let j = argmax(row);
                row[j] - row[runner_up(row, j)]
            })
            .sum::<f64>()
            / n_d,
    }
}
