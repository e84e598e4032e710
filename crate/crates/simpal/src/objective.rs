//! The ensemble cross-entropy, its Jensen upper bound, and gradients of
//! the source/target objectives. The optimized quantity is always the
//! bound (the per-classifier average of cross-entropies); the ensemble
//! cross-entropy is kept for diagnostics.

use thiserror::Error;

use crate::data::Batch;
use crate::model::{LogitMatrix, ModelParams};
use crate::numeric::{log_softmax, Matrix, NumericError, Tape};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("head count {heads} does not match source count {sources}")]
    HeadMismatch { heads: usize, sources: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Batch loss value plus per-classifier components.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub value: f64,
    pub per_classifier: Vec<f64>,
    pub sample_count: usize,
}

/// Gradients aligned with `ModelParams::tensors()` ordering.
pub type Gradients = Vec<Matrix>;

fn check_label(y: usize, n_classes: usize) -> Result<(), ObjectiveError> {
    if y >= n_classes {
        return Err(ObjectiveError::LabelOutOfRange { label: y, n_classes });
    }
    Ok(())
}

/// -log of the ensemble probability of class `y`, via log-sum-exp on
/// the per-row log-probabilities (never log of a softmax output).
pub fn ensemble_ce(m: &LogitMatrix, y: usize) -> Result<f64, ObjectiveError> {
    check_label(y, m.n_classes())?;
    let logps: Vec<f64> = (0..m.n_heads()).map(|i| log_softmax(m.0.row(i))[y]).collect();
    let max = logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logps.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(-(lse - (m.n_heads() as f64).ln()))
}

/// Jensen upper bound: the per-classifier average cross-entropy. This is
/// the per-sample loss of both the source and the target objectives.
pub fn bound_ce(m: &LogitMatrix, y: usize) -> Result<f64, ObjectiveError> {
    check_label(y, m.n_classes())?;
    let n_d = m.n_heads() as f64;
    Ok((0..m.n_heads()).map(|i| -log_softmax(m.0.row(i))[y]).sum::<f64>() / n_d)
}

struct TapedForward {
    tape: Tape,
    param_ids: Vec<usize>,
    latent: usize,
}

/// Records extractor forward on the tape; returns per-parameter leaf ids
/// in `ModelParams::tensors()` order and the latent node.
fn taped_extractor(params: &ModelParams, features: &Matrix) -> Result<TapedForward, ObjectiveError> {
    let mut tape = Tape::new();
    let mut param_ids = Vec::new();
    for layer in &params.extractor {
        param_ids.push(tape.leaf(layer.weights.clone()));
        param_ids.push(tape.leaf(layer.bias.clone()));
    }
    for head in &params.heads {
        param_ids.push(tape.leaf(head.weights.clone()));
        param_ids.push(tape.leaf(head.bias.clone()));
    }
    let mut z = tape.leaf(features.clone());
    let last = params.extractor.len() - 1;
    for (i, _) in params.extractor.iter().enumerate() {
        let w = param_ids[2 * i];
        let b = param_ids[2 * i + 1];
        z = tape.matmul(z, w)?;
        z = tape.add_row_broadcast(z, b)?;
        if i < last {
            z = tape.relu(z);
        }
    }
    Ok(TapedForward {
        tape,
        param_ids,
        latent: z,
    })
}

fn finish(
    tape: Tape,
    param_ids: &[usize],
    head_scalars: &[usize],
    sample_count: usize,
) -> Result<(LossReport, Gradients), ObjectiveError> {
    let mut tape = tape;
    let root = tape.mean_of_scalars(head_scalars);
    let per_classifier: Vec<f64> = head_scalars.iter().map(|&id| tape.scalar(id)).collect();
    let value = tape.scalar(root);
    let grads = tape.backward(root)?;
    let grads = param_ids.iter().map(|&id| grads[id].clone()).collect();
    Ok((
        LossReport {
            value,
            per_classifier,
            sample_count,
        },
        grads,
    ))
}

/// Mean bound loss over a labeled batch, with gradients for every
/// parameter of the extractor and all heads. Every head sees every
/// sample.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
) -> Result<(LossReport, Gradients), ObjectiveError> {
    if labels.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    for &y in labels {
        check_label(y, params.n_classes())?;
    }
    let TapedForward {
        mut tape,
        param_ids,
        latent,
    } = taped_extractor(params, features)?;
    let n_layers = params.extractor.len();
    let mut head_scalars = Vec::with_capacity(params.n_heads());
    for i in 0..params.n_heads() {
        let w = param_ids[2 * (n_layers + i)];
        let b = param_ids[2 * (n_layers + i) + 1];
        let logits = tape.matmul(latent, w)?;
        let logits = tape.add_row_broadcast(logits, b)?;
        let logp = tape.log_softmax_rows(logits);
        head_scalars.push(tape.nll_mean(logp, labels)?);
    }
    finish(tape, &param_ids, &head_scalars, labels.len())
}

/// Source objective: mean bound loss over a balanced labeled batch.
pub fn source_loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(LossReport, Gradients), ObjectiveError> {
    batch_loss_and_grad(params, &batch.features, &batch.labels)
}

/// Target objective: identical functional form with pseudo-labels in
/// place of ground truth.
pub fn target_loss_and_grad(
    params: &ModelParams,
    features: &Matrix,
    pseudo_labels: &[usize],
) -> Result<(LossReport, Gradients), ObjectiveError> {
    batch_loss_and_grad(params, features, pseudo_labels)
}

/// Domain-specific baseline objective: head `i` receives loss only from
/// the rows tagged with source `i`; the extractor is shared.
pub fn domain_specific_loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
) -> Result<(LossReport, Gradients), ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let n_heads = params.n_heads();
    let max_tag = batch.source_tags.iter().copied().max().unwrap_or(0);
    if max_tag >= n_heads {
        return Err(ObjectiveError::HeadMismatch {
            heads: n_heads,
            sources: max_tag + 1,
        });
    }
    for &y in &batch.labels {
        check_label(y, params.n_classes())?;
    }
    let TapedForward {
        mut tape,
        param_ids,
        latent,
    } = taped_extractor(params, &batch.features)?;
    let n_layers = params.extractor.len();
    let mut head_scalars = Vec::new();
    for i in 0..n_heads {
        let rows: Vec<usize> = batch
            .source_tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == i)
            .map(|(r, _)| r)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let labels: Vec<usize> = rows.iter().map(|&r| batch.labels[r]).collect();
        let w = param_ids[2 * (n_layers + i)];
        let b = param_ids[2 * (n_layers + i) + 1];
        let sub = tape.select_rows(latent, &rows)?;
        let logits = tape.matmul(sub, w)?;
        let logits = tape.add_row_broadcast(logits, b)?;
        let logp = tape.log_softmax_rows(logits);
        head_scalars.push(tape.nll_mean(logp, &labels)?);
    }
    if head_scalars.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    finish(tape, &param_ids, &head_scalars, batch.len())
}
