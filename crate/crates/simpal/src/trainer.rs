//! The training loop: warm-start on the source domains, agreement-gated
//! pseudo-label set construction with a margin curriculum, alternating
//! source/target updates with periodic pseudo-label refresh, and
//! agreement-rate convergence detection. Also the domain-specific
//! classifier baseline and the oracle adaptation mode.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::data::{Batch, DomainDataset, EvalLabels, SourceBatcher};
use crate::eval::{accuracy_split_by_agreement, target_accuracy};
use crate::model::{agreement, forward_batch, margin, predict, MarginMode, ModelParams};
use crate::numeric::Matrix;
use crate::objective::{
    domain_specific_loss_and_grad, source_loss_and_grad, target_loss_and_grad, Gradients, ObjectiveError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training aborted at iteration {iteration}: {reason}")]
    Aborted {
        iteration: usize,
        reason: String,
        state: Box<TrainingState>,
    },
    #[error("head count {heads} does not match source count {sources}")]
    HeadMismatch { heads: usize, sources: usize },
    #[error("oracle mode requires the target evaluation channel")]
    MissingOracleLabels,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("snapshot error on {path}: {message}")]
    Snapshot { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Simpal,
    DomainSpecificBaseline,
    Oracle,
}

impl std::str::FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "simpal" => Ok(Self::Simpal),
            "domain_specific_baseline" => Ok(Self::DomainSpecificBaseline),
            "oracle" => Ok(Self::Oracle),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub per_domain_batch: usize,
    pub target_batch: usize,
    /// Epochs over the pseudo-label set between refreshes.
    pub n_e: usize,
    /// Iterations between agreement-rate checkpoints.
    pub eval_every: usize,
    /// Checkpoints in the convergence window.
    pub convergence_window: usize,
    pub convergence_tol: f64,
    /// Per-phase update budget.
    pub max_iterations: usize,
    /// Optional margin threshold on pseudo-label admission.
    pub margin_threshold: Option<f64>,
    pub margin_mode: MarginMode,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            per_domain_batch: 16,
            target_batch: 32,
            n_e: 15,
            eval_every: 200,
            convergence_window: 5,
            convergence_tol: 0.005,
            max_iterations: 10_000,
            margin_threshold: None,
            margin_mode: MarginMode::Ensemble,
            mode: TrainMode::Simpal,
            seed: 0,
        }
    }
}

impl TrainOptions {
    fn validate(&self) {
        assert!(self.learning_rate > 0.0);
        assert!(self.n_e >= 1);
        assert!(self.convergence_window >= 2);
        assert!(self.eval_every >= 1);
        assert!(self.per_domain_batch >= 1 && self.target_batch >= 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmStart,
    Adaptation,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::WarmStart => "warm_start",
            Phase::Adaptation => "adaptation",
            Phase::Done => "done",
        }
    }
}

/// One metrics checkpoint row. Accuracy columns are absent when target
/// ground truth is unavailable.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub iteration: usize,
    pub phase: Phase,
    pub agreement_rate: f64,
    pub source_loss: Option<f64>,
    pub target_loss: Option<f64>,
    pub dtprime_size: Option<usize>,
    pub target_acc: Option<f64>,
    pub pl_acc_agree: Option<f64>,
    pub pl_acc_disagree: Option<f64>,
}

/// Agreement-filtered, margin-sorted pseudo-labeled target subset.
#[derive(Debug, Clone)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoEntry>,
    pub built_at_iteration: usize,
}

#[derive(Debug, Clone)]
pub struct PseudoEntry {
    /// Index into the target dataset.
    pub index: usize,
    pub label: usize,
    pub weight: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data().len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Adam step with decoupled weight decay (decay applied to the
    /// parameters at the update, never folded into the loss).
    fn step(&mut self, params: &mut ModelParams, grads: &Gradients, opts: &TrainOptions) {
        self.t += 1;
        let b1 = opts.adam_beta1;
        let b2 = opts.adam_beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((tensor, grad), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= opts.learning_rate * mhat / (vhat.sqrt() + opts.adam_eps);
                *p -= opts.learning_rate * opts.weight_decay * *p;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingState {
    pub iteration: usize,
    /// (iteration, A) over the full run.
    pub agreement_history: Vec<(usize, f64)>,
    pub loss_history: Vec<(usize, f64)>,
    pub converged: bool,
    pub phase: Phase,
    pub params: ModelParams,
    pub metrics: Vec<MetricRow>,
    // optimizer state carried across phases; Algorithm 1 is one
    // continuous optimization, so moments are never reset
    adam: Adam,
    phase_history: Vec<f64>,
    last_source_loss: Option<f64>,
    last_target_loss: Option<f64>,
    dtprime_size: Option<usize>,
}

impl TrainingState {
    /// Fresh state around an existing parameter snapshot, used when
    /// resuming past the warm-start phase. Optimizer moments start at
    /// zero; the snapshot format does not carry them.
    pub fn resume(params: ModelParams) -> Self {
        Self::new(params)
    }

    fn new(params: ModelParams) -> Self {
        let adam = Adam::new(&params);
        Self {
            iteration: 0,
            agreement_history: Vec::new(),
            loss_history: Vec::new(),
            converged: false,
            phase: Phase::WarmStart,
            params,
            metrics: Vec::new(),
            adam,
            phase_history: Vec::new(),
            last_source_loss: None,
            last_target_loss: None,
            dtprime_size: None,
        }
    }
}

/// Plateau test over the last `window` checkpoints: converged when the
/// maximum absolute successive difference stays below `tol`.
pub fn has_converged(history: &[f64], window: usize, tol: f64) -> bool {
    assert!(window >= 2);
    if history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    tail.windows(2).all(|w| (w[1] - w[0]).abs() < tol)
}

/// Builds the pseudo-label set: keep agreement samples (and, when a
/// threshold is set, those with weight >= threshold), label with the
/// ensemble prediction, sort by weight descending with sample-index
/// tie-break. In oracle mode the label comes from the hidden ground
/// truth instead of the prediction.
pub fn build_pseudo_set(
    params: &ModelParams,
    target: &DomainDataset,
    opts: &TrainOptions,
    oracle: Option<&EvalLabels>,
    iteration: usize,
) -> Result<PseudoLabelSet, TrainError> {
    let mats = forward_batch(params, &target.features)?;
    let mut entries = Vec::new();
    for (index, m) in mats.iter().enumerate() {
        if !agreement(m) {
            continue;
        }
        let weight = margin(m, opts.margin_mode);
        if let Some(tau) = opts.margin_threshold {
            if weight < tau {
                continue;
            }
        }
        let label = match oracle {
            Some(truth) => truth.for_evaluation()[index],
            None => predict(m),
        };
        entries.push(PseudoEntry { index, label, weight });
    }
    entries.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap().then(a.index.cmp(&b.index)));
    Ok(PseudoLabelSet {
        entries,
        built_at_iteration: iteration,
    })
}

fn checkpoint(
    state: &mut TrainingState,
    target: &DomainDataset,
    eval_labels: Option<&EvalLabels>,
    opts: &TrainOptions,
) -> Result<bool, TrainError> {
    let a = crate::model::agreement_rate(&state.params, target)?;
    state.agreement_history.push((state.iteration, a));
    state.phase_history.push(a);
    let (target_acc, pl_agree, pl_disagree) = match eval_labels {
        Some(truth) => {
            let acc = target_accuracy(&state.params, target, truth)?;
            let split = accuracy_split_by_agreement(&state.params, target, truth)?;
            (Some(acc), split.acc_agree, split.acc_disagree)
        }
        None => (None, None, None),
    };
    state.metrics.push(MetricRow {
        iteration: state.iteration,
        phase: state.phase,
        agreement_rate: a,
        source_loss: state.last_source_loss,
        target_loss: state.last_target_loss,
        dtprime_size: state.dtprime_size,
        target_acc,
        pl_acc_agree: pl_agree,
        pl_acc_disagree: pl_disagree,
    });
    Ok(has_converged(
        &state.phase_history,
        opts.convergence_window,
        opts.convergence_tol,
    ))
}

fn abort(state: TrainingState, reason: String) -> TrainError {
    TrainError::Aborted {
        iteration: state.iteration,
        reason,
        state: Box::new(state),
    }
}

fn apply_update(
    state: &mut TrainingState,
    loss: f64,
    grads: &Gradients,
    opts: &TrainOptions,
) -> Result<(), String> {
    if !loss.is_finite() {
        return Err(format!("non-finite loss {loss}"));
    }
    state.adam.step(&mut state.params, grads, opts);
    if !state.params.is_finite() {
        return Err("non-finite parameters after update".into());
    }
    state.iteration += 1;
    state.loss_history.push((state.iteration, loss));
    Ok(())
}

/// Warm-start: balanced source mini-batch updates until the target
/// agreement rate plateaus or the budget runs out.
pub fn warm_start(
    params: ModelParams,
    sources: &[DomainDataset],
    target: &DomainDataset,
    eval_labels: Option<&EvalLabels>,
    opts: &TrainOptions,
) -> Result<TrainingState, TrainError> {
    opts.validate();
    let mut state = TrainingState::new(params);
    let mut batcher = SourceBatcher::new(sources, opts.per_domain_batch, opts.seed)?;
    run_source_phase(&mut state, &mut batcher, sources, target, eval_labels, opts, false)?;
    Ok(state)
}

/// The domain-specific classifier baseline: head `i` is trained only on
/// domain `i`'s samples, the extractor stays shared, and no adaptation
/// phase follows.
pub fn train_domain_specific_baseline(
    params: ModelParams,
    sources: &[DomainDataset],
    target: &DomainDataset,
    eval_labels: Option<&EvalLabels>,
    opts: &TrainOptions,
) -> Result<TrainingState, TrainError> {
    opts.validate();
    if params.n_heads() != sources.len() {
        return Err(TrainError::HeadMismatch {
            heads: params.n_heads(),
            sources: sources.len(),
        });
    }
    let mut state = TrainingState::new(params);
    let mut batcher = SourceBatcher::new(sources, opts.per_domain_batch, opts.seed)?;
    run_source_phase(&mut state, &mut batcher, sources, target, eval_labels, opts, true)?;
    state.phase = Phase::Done;
    Ok(state)
}

fn run_source_phase(
    state: &mut TrainingState,
    batcher: &mut SourceBatcher,
    sources: &[DomainDataset],
    target: &DomainDataset,
    eval_labels: Option<&EvalLabels>,
    opts: &TrainOptions,
    domain_specific: bool,
) -> Result<(), TrainError> {
    for _ in 0..opts.max_iterations {
        let batch = batcher.next_batch(sources);
        let result = if domain_specific {
            domain_specific_loss_and_grad(&state.params, &batch)
        } else {
            source_loss_and_grad(&state.params, &batch)
        };
        let (report, grads) = match result {
            Ok(v) => v,
            Err(e) => return Err(abort(state.clone(), e.to_string())),
        };
        state.last_source_loss = Some(report.value);
        if let Err(reason) = apply_update(state, report.value, &grads, opts) {
            return Err(abort(state.clone(), reason));
        }
        if state.iteration % opts.eval_every == 0 && checkpoint(state, target, eval_labels, opts)? {
            state.converged = true;
            break;
        }
    }
    Ok(())
}

struct CurriculumCursor {
    position: usize,
    consumed_since_refresh: usize,
}

fn next_target_batch(set: &PseudoLabelSet, target: &DomainDataset, cursor: &mut CurriculumCursor, size: usize) -> Batch {
    // Curriculum order: traverse the sorted entries without shuffling,
    // wrapping to the easiest samples at each epoch boundary.
    let mut rows = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for _ in 0..size {
        if cursor.position >= set.len() {
            cursor.position = 0;
        }
        let entry = &set.entries[cursor.position];
        rows.push(target.features.row(entry.index).to_vec());
        labels.push(entry.label);
        cursor.position += 1;
        cursor.consumed_since_refresh += 1;
    }
    Batch {
        features: Matrix::from_rows(&rows).expect("rows rectangular"),
        labels,
        source_tags: vec![0; size],
    }
}

/// Adaptation: strictly alternating source/target updates starting with
/// source, pseudo-labels refreshed after every `n_e` epochs over the
/// pseudo-label set, until the agreement rate plateaus again (the
/// convergence window restarts at phase entry).
pub fn adapt(
    mut state: TrainingState,
    sources: &[DomainDataset],
    target: &DomainDataset,
    eval_labels: Option<&EvalLabels>,
    opts: &TrainOptions,
) -> Result<TrainingState, TrainError> {
    opts.validate();
    state.phase = Phase::Adaptation;
    state.phase_history.clear();
    state.converged = false;
    let oracle = match opts.mode {
        TrainMode::Oracle => Some(eval_labels.ok_or(TrainError::MissingOracleLabels)?),
        _ => None,
    };
    if opts.max_iterations == 0 {
        return Ok(state);
    }
    let mut batcher = SourceBatcher::new(sources, opts.per_domain_batch, opts.seed.wrapping_add(1))?;

    let mut pseudo = build_pseudo_set(&state.params, target, opts, oracle, state.iteration)?;
    if pseudo.is_empty() {
        // Empty-set policy: source-only updates for one extra
        // convergence window, one retry, then abort.
        let extra = opts.convergence_window * opts.eval_every;
        for _ in 0..extra {
            let batch = batcher.next_batch(sources);
            let (report, grads) = match source_loss_and_grad(&state.params, &batch) {
                Ok(v) => v,
                Err(e) => return Err(abort(state, e.to_string())),
            };
            state.last_source_loss = Some(report.value);
            if let Err(reason) = apply_update(&mut state, report.value, &grads, opts) {
                return Err(abort(state, reason));
            }
            if state.iteration % opts.eval_every == 0 {
                checkpoint(&mut state, target, eval_labels, opts)?;
            }
        }
        pseudo = build_pseudo_set(&state.params, target, opts, oracle, state.iteration)?;
        if pseudo.is_empty() {
            return Err(abort(state, "pseudo-label set empty after retry window".into()));
        }
    }
    state.dtprime_size = Some(pseudo.len());

    let mut cursor = CurriculumCursor {
        position: 0,
        consumed_since_refresh: 0,
    };
    let mut updates = 0usize;
    'outer: while updates < opts.max_iterations {
        // source update
        let batch = batcher.next_batch(sources);
        let (report, grads) = match source_loss_and_grad(&state.params, &batch) {
            Ok(v) => v,
            Err(e) => return Err(abort(state, e.to_string())),
        };
        state.last_source_loss = Some(report.value);
        if let Err(reason) = apply_update(&mut state, report.value, &grads, opts) {
            return Err(abort(state, reason));
        }
        updates += 1;
        if state.iteration % opts.eval_every == 0 && checkpoint(&mut state, target, eval_labels, opts)? {
            state.converged = true;
            break 'outer;
        }
        if updates >= opts.max_iterations {
            break;
        }

        // target update
        let tbatch = next_target_batch(&pseudo, target, &mut cursor, opts.target_batch);
        let (report, grads) = match target_loss_and_grad(&state.params, &tbatch.features, &tbatch.labels) {
            Ok(v) => v,
            Err(e) => return Err(abort(state, e.to_string())),
        };
        state.last_target_loss = Some(report.value);
        if let Err(reason) = apply_update(&mut state, report.value, &grads, opts) {
            return Err(abort(state, reason));
        }
        updates += 1;
        if state.iteration % opts.eval_every == 0 && checkpoint(&mut state, target, eval_labels, opts)? {
            state.converged = true;
            break 'outer;
        }

        // periodic pseudo-label refresh at exact n_e epoch multiples
        if cursor.consumed_since_refresh >= opts.n_e * pseudo.len() {
            pseudo = build_pseudo_set(&state.params, target, opts, oracle, state.iteration)?;
            if pseudo.is_empty() {
                return Err(abort(state, "pseudo-label set empty at refresh".into()));
            }
            state.dtprime_size = Some(pseudo.len());
            cursor.position = 0;
            cursor.consumed_since_refresh = 0;
        }
    }
    state.phase = Phase::Done;
    Ok(state)
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics CSV with one row per checkpoint.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("iteration,phase,A,source_loss,target_loss,dtprime_size,target_acc,pl_acc_agree,pl_acc_disagree\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.phase.as_str(),
            r.agreement_rate,
            fmt_opt_f64(r.source_loss),
            fmt_opt_f64(r.target_loss),
            r.dtprime_size.map(|x| x.to_string()).unwrap_or_default(),
            fmt_opt_f64(r.target_acc),
            fmt_opt_f64(r.pl_acc_agree),
            fmt_opt_f64(r.pl_acc_disagree),
        );
    }
    out
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"SIMPAL01";

/// Serializes parameters to the flat binary snapshot layout: magic
/// bytes, extractor/head layer counts, then each tensor as u64 rows,
/// u64 cols, and row-major little-endian doubles.
pub fn save_snapshot(params: &ModelParams, path: &Path) -> Result<(), TrainError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&(params.extractor.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(params.heads.len() as u64).to_le_bytes());
    for tensor in params.tensors() {
        buf.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| TrainError::Snapshot {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_snapshot(path: &Path) -> Result<ModelParams, TrainError> {
    let snap_err = |message: String| TrainError::Snapshot {
        path: path.display().to_string(),
        message,
    };
    let buf = std::fs::read(path).map_err(|e| snap_err(e.to_string()))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], TrainError> {
        if *pos + n > buf.len() {
            return Err(TrainError::Snapshot {
                path: path.display().to_string(),
                message: "truncated snapshot".into(),
            });
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != SNAPSHOT_MAGIC {
        return Err(snap_err("bad magic bytes".into()));
    }
    let read_u64 = |pos: &mut usize| -> Result<u64, TrainError> {
        let b = take(pos, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    };
    let n_extractor = read_u64(&mut pos)? as usize;
    let n_heads = read_u64(&mut pos)? as usize;
    if n_extractor == 0 || n_heads == 0 {
        return Err(snap_err("zero layer counts".into()));
    }
    let read_affine = |pos: &mut usize| -> Result<crate::model::Affine, TrainError> {
        let mut tensors = Vec::with_capacity(2);
        for _ in 0..2 {
            let rows = read_u64(pos)? as usize;
            let cols = read_u64(pos)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let b = take(pos, 8)?;
                data.push(f64::from_le_bytes(b.try_into().unwrap()));
            }
            tensors.push(Matrix::new(rows, cols, data).map_err(|e| TrainError::Snapshot {
                path: path.display().to_string(),
                message: e.to_string(),
            })?);
        }
        let bias = tensors.pop().unwrap();
        let weights = tensors.pop().unwrap();
        Ok(crate::model::Affine { weights, bias })
    };
    let extractor: Vec<_> = (0..n_extractor)
        .map(|_| read_affine(&mut pos))
        .collect::<Result<_, _>>()?;
    let heads: Vec<_> = (0..n_heads).map(|_| read_affine(&mut pos)).collect::<Result<_, _>>()?;
    if pos != buf.len() {
        return Err(snap_err("trailing bytes in snapshot".into()));
    }
    Ok(ModelParams { extractor, heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domains, hide_labels, ShiftConfig};
    use crate::model::init_params;

    fn tiny_config(seed: u64) -> ShiftConfig {
        ShiftConfig {
            n_source_domains: 2,
            n_classes: 3,
            d_in: 2,
            samples_per_class_per_domain: 20,
            rotation_per_domain: vec![-0.3, 0.3, 0.6],
            translation_per_domain: vec![vec![0.0; 2]; 3],
            scale_per_domain: vec![1.0; 3],
            cluster_noise_std: 0.2,
            seed,
        }
    }

    fn tiny_opts() -> TrainOptions {
        TrainOptions {
            learning_rate: 1e-3,
            per_domain_batch: 8,
            target_batch: 16,
            eval_every: 25,
            max_iterations: 400,
            ..TrainOptions::default()
        }
    }

    fn tiny_setup(seed: u64) -> (Vec<DomainDataset>, DomainDataset, EvalLabels) {
        let mut domains = generate_domains(&tiny_config(seed)).unwrap();
        let target_full = domains.pop().unwrap();
        let (target, eval) = hide_labels(target_full);
        (domains, target, eval.unwrap())
    }

    #[test]
    fn has_converged_examples() {
        let h = [0.2, 0.5, 0.8, 0.801, 0.802, 0.801, 0.802];
        assert!(has_converged(&h, 5, 0.005));
        let rising: Vec<f64> = (0..10).map(|i| i as f64 * 0.01).collect();
        assert!(!has_converged(&rising, 5, 0.005));
        assert!(!has_converged(&[0.1, 0.1], 5, 0.005));
    }

    #[test]
    fn single_head_converges_at_first_window() {
        let (sources, target, _) = tiny_setup(3);
        let merged = vec![sources[0].clone()];
        let params = init_params(2, &[8], 8, 1, 3, 0);
        let opts = TrainOptions {
            eval_every: 5,
            max_iterations: 200,
            ..tiny_opts()
        };
        let state = warm_start(params, &merged, &target, None, &opts).unwrap();
        assert!(state.converged);
        // A == 1 for a single head at every checkpoint
        assert!(state.agreement_history.iter().all(|&(_, a)| a == 1.0));
        assert_eq!(state.agreement_history.len(), opts.convergence_window);
    }

    #[test]
    fn warm_start_is_deterministic() {
        let (sources, target, _) = tiny_setup(4);
        let opts = tiny_opts();
        let run = || {
            let params = init_params(2, &[8], 8, 2, 3, 1);
            warm_start(params, &sources, &target, None, &opts).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.agreement_history, b.agreement_history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn pseudo_set_sorted_and_filtered() {
        let (_, target, _) = tiny_setup(5);
        let params = init_params(2, &[8], 8, 2, 3, 1);
        let opts = tiny_opts();
        let set = build_pseudo_set(&params, &target, &opts, None, 0).unwrap();
        for w in set.entries.windows(2) {
            assert!(w[0].weight >= w[1].weight);
        }
        // every admitted sample had agreement at construction
        let mats = forward_batch(&params, &target.features).unwrap();
        for e in &set.entries {
            assert!(agreement(&mats[e.index]));
            assert_eq!(e.label, predict(&mats[e.index]));
        }
        // +inf threshold rejects everything
        let strict = TrainOptions {
            margin_threshold: Some(f64::INFINITY),
            ..opts
        };
        assert!(build_pseudo_set(&params, &target, &strict, None, 0).unwrap().is_empty());
    }

    #[test]
    fn identical_heads_admit_all_samples() {
        let (_, target, _) = tiny_setup(6);
        let mut params = init_params(2, &[8], 8, 2, 3, 1);
        params.heads[1] = params.heads[0].clone();
        let set = build_pseudo_set(&params, &target, &tiny_opts(), None, 0).unwrap();
        assert_eq!(set.len(), target.len());
    }

    #[test]
    fn adapt_zero_budget_is_noop_except_phase() {
        let (sources, target, _) = tiny_setup(7);
        let params = init_params(2, &[8], 8, 2, 3, 1);
        let opts = tiny_opts();
        let state = warm_start(params, &sources, &target, None, &opts).unwrap();
        let before = state.params.clone();
        let iter = state.iteration;
        let zero = TrainOptions {
            max_iterations: 0,
            ..opts
        };
        let after = adapt(state, &sources, &target, None, &zero).unwrap();
        assert_eq!(after.params, before);
        assert_eq!(after.iteration, iter);
        assert_eq!(after.phase, Phase::Adaptation);
    }

    #[test]
    fn adapt_runs_and_logs_dtprime() {
        let (sources, target, eval) = tiny_setup(8);
        let params = init_params(2, &[8], 8, 2, 3, 1);
        let opts = tiny_opts();
        let state = warm_start(params, &sources, &target, Some(&eval), &opts).unwrap();
        let state = adapt(state, &sources, &target, Some(&eval), &opts).unwrap();
        assert_eq!(state.phase, Phase::Done);
        let adaptation_rows: Vec<_> = state
            .metrics
            .iter()
            .filter(|r| r.phase == Phase::Adaptation)
            .collect();
        assert!(!adaptation_rows.is_empty());
        assert!(adaptation_rows.iter().all(|r| r.dtprime_size.is_some()));
        assert!(adaptation_rows.iter().all(|r| r.target_acc.is_some()));
    }

    #[test]
    fn oracle_mode_requires_eval_channel() {
        let (sources, target, _) = tiny_setup(9);
        let params = init_params(2, &[8], 8, 2, 3, 1);
        let opts = tiny_opts();
        let state = warm_start(params, &sources, &target, None, &opts).unwrap();
        let oracle_opts = TrainOptions {
            mode: TrainMode::Oracle,
            ..opts
        };
        assert!(matches!(
            adapt(state, &sources, &target, None, &oracle_opts),
            Err(TrainError::MissingOracleLabels)
        ));
    }

    #[test]
    fn baseline_rejects_head_mismatch() {
        let (sources, target, _) = tiny_setup(10);
        let params = init_params(2, &[8], 8, 3, 3, 1);
        assert!(matches!(
            train_domain_specific_baseline(params, &sources, &target, None, &tiny_opts()),
            Err(TrainError::HeadMismatch { .. })
        ));
    }

    #[test]
    fn baseline_runs() {
        let (sources, target, _) = tiny_setup(11);
        let params = init_params(2, &[8], 8, 2, 3, 1);
        let state = train_domain_specific_baseline(params, &sources, &target, None, &tiny_opts()).unwrap();
        assert_eq!(state.phase, Phase::Done);
        assert!(state.iteration > 0);
    }

    #[test]
    fn metrics_csv_has_empty_fields_without_ground_truth() {
        let (sources, target, _) = tiny_setup(12);
        let params = init_params(2, &[8], 8, 2, 3, 1);
        let opts = TrainOptions {
            max_iterations: 50,
            eval_every: 25,
            ..tiny_opts()
        };
        let state = warm_start(params, &sources, &target, None, &opts).unwrap();
        let csv = metrics_csv(&state.metrics);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,phase,A,source_loss,target_loss,dtprime_size,target_acc,pl_acc_agree,pl_acc_disagree"
        );
        let first = lines.next().unwrap();
        assert!(first.ends_with(",,,"), "expected trailing empty columns: {first}");
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(3, &[5, 4], 6, 2, 4, 77);
        let path = dir.path().join("p.snap");
        save_snapshot(&params, &path).unwrap();
        let loaded = load_snapshot(&path).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn snapshot_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.snap");
        std::fs::write(&path, b"NOTSNAP0rest").unwrap();
        assert!(matches!(load_snapshot(&path), Err(TrainError::Snapshot { .. })));
    }
}
