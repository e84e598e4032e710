//! Synthetic multi-source domain generation, category-shift
//! configuration, CSV ingestion, and balanced mini-batch assembly.
//!
//! Domains are Gaussian clusters around per-class means on the unit
//! circle (embedded in the first two feature dimensions). Each domain
//! applies its own rigid rotation, translation, and isotropic scale to
//! the class means, which makes the shift magnitude an interpretable
//! knob and the oracle alignment analytically known.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numeric::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("empty dataset: {0}")]
    Empty(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Labeled or unlabeled feature-vector dataset with a domain identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: String,
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub label_set: BTreeSet<usize>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Ground-truth target labels held in an evaluation-only channel.
/// The trainer never reads these except through the explicit oracle
/// path; all other consumers are in the eval module.
#[derive(Debug, Clone)]
pub struct EvalLabels {
    labels: Vec<usize>,
}

impl EvalLabels {
    /// The only way in: callers must name evaluation (or oracle mode)
    /// at the call site.
    pub fn for_evaluation(&self) -> &[usize] {
        &self.labels
    }
}

/// Strips the label channel off a labeled target dataset, returning the
/// unlabeled dataset the trainer sees plus the hidden evaluation channel.
pub fn hide_labels(dataset: DomainDataset) -> (DomainDataset, Option<EvalLabels>) {
    let eval = dataset.labels.clone().map(|labels| EvalLabels { labels });
    let mut unlabeled = dataset;
    unlabeled.labels = None;
    (unlabeled, eval)
}

/// Synthetic shift configuration. Per-domain lists have
/// `n_source_domains + 1` entries; the last entry is the target.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ShiftConfig {
    pub n_source_domains: usize,
    pub n_classes: usize,
    pub d_in: usize,
    pub samples_per_class_per_domain: usize,
    pub rotation_per_domain: Vec<f64>,
    pub translation_per_domain: Vec<Vec<f64>>,
    pub scale_per_domain: Vec<f64>,
    pub cluster_noise_std: f64,
    pub seed: u64,
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.n_source_domains + 1;
        if self.n_source_domains < 1 {
            return Err(DataError::Config("need at least one source domain".into()));
        }
        if self.n_classes < 2 {
            return Err(DataError::Config("need at least two classes".into()));
        }
        if self.d_in < 2 {
            return Err(DataError::Config("d_in must be >= 2".into()));
        }
        if self.samples_per_class_per_domain < 1 {
            return Err(DataError::Config("samples_per_class_per_domain must be >= 1".into()));
        }
        if self.rotation_per_domain.len() != n
            || self.translation_per_domain.len() != n
            || self.scale_per_domain.len() != n
        {
            return Err(DataError::Config(format!(
                "per-domain lists must have {} entries (sources + target)",
                n
            )));
        }
        if self.translation_per_domain.iter().any(|t| t.len() != self.d_in) {
            return Err(DataError::Config("translation vectors must have d_in entries".into()));
        }
        if self.scale_per_domain.iter().any(|s| *s <= 0.0) {
            return Err(DataError::Config("scales must be positive".into()));
        }
        if self.cluster_noise_std < 0.0 {
            return Err(DataError::Config("noise std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Category-shift scenarios: every source keeps all classes, sources
/// share a partial overlap, or sources hold pairwise disjoint sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryShift {
    Shared,
    Overlap,
    Disjoint,
}

/// Mini-batch with per-sample source tags. Source batches carry an
/// equal number of samples from each source domain.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub source_tags: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn rotate2(x: f64, y: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Angle of class `j`'s base mean on the unit circle. Classes are laid
/// out with a mild stagger (each gap is `2*pi/n_classes` plus a small
/// constant, with the remainder absorbed by the closing gap) rather
/// than perfectly uniformly: with uniform spacing, a domain rotation of
/// exactly half the class gap parks every rotated cluster on a
/// reflection-symmetric decision boundary, and every downstream
/// accuracy becomes a coin flip. The stagger keeps inter-class gaps
/// incommensurate with typical rotations.
pub fn class_mean_angle(class: usize, n_classes: usize) -> f64 {
    use std::f64::consts::PI;
    let stagger = 2.0 * PI / (n_classes as f64 * 12.0f64.max(n_classes as f64 + 1.0));
    class as f64 * (2.0 * PI / n_classes as f64 + stagger)
}

/// Generates `n_source_domains` labeled sources plus one labeled target
/// (callers hide the target labels via [`hide_labels`]). Class `j`'s
/// base mean sits at [`class_mean_angle`] on the unit circle in the
/// first two dimensions; domain transforms act on the means, then
/// isotropic Gaussian noise is added per sample.
pub fn generate_domains(config: &ShiftConfig) -> Result<Vec<DomainDataset>, DataError> {
    config.validate()?;
    let n_domains = config.n_source_domains + 1;
    let mut out = Vec::with_capacity(n_domains);
    for d in 0..n_domains {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0x0da7a_0000 + d as u64);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..config.n_classes {
            let angle = class_mean_angle(class, config.n_classes);
            let (mx, my) = rotate2(angle.cos(), angle.sin(), config.rotation_per_domain[d]);
            let scale = config.scale_per_domain[d];
            let mut mean = vec![0.0; config.d_in];
            mean[0] = mx * scale;
            mean[1] = my * scale;
            for (m, t) in mean.iter_mut().zip(&config.translation_per_domain[d]) {
                *m += t;
            }
            for _ in 0..config.samples_per_class_per_domain {
                let row: Vec<f64> = mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + config.cluster_noise_std * z
                    })
                    .collect();
                rows.push(row);
                labels.push(class);
            }
        }
        let domain_id = if d < config.n_source_domains {
            format!("source_{d}")
        } else {
            "target".to_string()
        };
        out.push(DomainDataset {
            domain_id,
            features: Matrix::from_rows(&rows).expect("generated rows are rectangular"),
            labels: Some(labels),
            label_set: (0..config.n_classes).collect(),
        });
    }
    Ok(out)
}

/// Restricts source label sets per the category-shift scenario, dropping
/// samples outside each source's label set. The target (not passed here)
/// keeps the full class set; the union of source label sets always
/// covers every class.
///
/// Overlap construction: a contiguous shared block of `overlap_count`
/// classes kept by every source, remaining classes dealt round-robin.
/// Disjoint construction: contiguous blocks split by class index.
pub fn apply_category_shift(
    sources: Vec<DomainDataset>,
    mode: CategoryShift,
    overlap_count: usize,
) -> Result<Vec<DomainDataset>, DataError> {
    let n_sources = sources.len();
    let all_classes: BTreeSet<usize> = sources.iter().flat_map(|s| s.label_set.iter().copied()).collect();
    let n_classes = all_classes.len();
    let keep_sets: Vec<BTreeSet<usize>> = match mode {
        CategoryShift::Shared => return Ok(sources),
        CategoryShift::Overlap => {
            if overlap_count == 0 || overlap_count >= n_classes {
                return Err(DataError::Config(format!(
                    "overlap_count must be in (0, {n_classes})"
                )));
            }
            if n_classes - overlap_count < 1 {
                return Err(DataError::Config("no classes left outside the overlap".into()));
            }
            let classes: Vec<usize> = all_classes.iter().copied().collect();
            let shared: BTreeSet<usize> = classes[..overlap_count].iter().copied().collect();
            let mut sets = vec![shared; n_sources];
            for (k, &class) in classes[overlap_count..].iter().enumerate() {
                sets[k % n_sources].insert(class);
            }
            sets
        }
        CategoryShift::Disjoint => {
            if n_classes < n_sources {
                return Err(DataError::Config(format!(
                    "disjoint needs at least {n_sources} classes, have {n_classes}"
                )));
            }
            let classes: Vec<usize> = all_classes.iter().copied().collect();
            let base = n_classes / n_sources;
            let extra = n_classes % n_sources;
            let mut sets = Vec::with_capacity(n_sources);
            let mut cursor = 0;
            for i in 0..n_sources {
                let take = base + usize::from(i < extra);
                sets.push(classes[cursor..cursor + take].iter().copied().collect());
                cursor += take;
            }
            sets
        }
    };

    sources
        .into_iter()
        .zip(keep_sets)
        .map(|(src, keep)| restrict_to_label_set(src, keep))
        .collect()
}

fn restrict_to_label_set(src: DomainDataset, keep: BTreeSet<usize>) -> Result<DomainDataset, DataError> {
    let labels = src
        .labels
        .as_ref()
        .ok_or_else(|| DataError::Config(format!("source {} must be labeled", src.domain_id)))?;
    let kept: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, y)| keep.contains(y))
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(DataError::Empty(src.domain_id));
    }
    let rows: Vec<Vec<f64>> = kept.iter().map(|&i| src.features.row(i).to_vec()).collect();
    let labels: Vec<usize> = kept.iter().map(|&i| labels[i]).collect();
    Ok(DomainDataset {
        domain_id: src.domain_id,
        features: Matrix::from_rows(&rows).expect("rows rectangular"),
        labels: Some(labels),
        label_set: keep,
    })
}

/// Draws balanced source mini-batches: `per_domain` samples from each
/// source, walking a per-source shuffled permutation that reshuffles at
/// each epoch boundary. Owns its rng; confine to one consumer.
pub struct SourceBatcher {
    rng: ChaCha8Rng,
    per_domain: usize,
    // (shuffled index order, cursor) per source
    queues: Vec<(Vec<usize>, usize)>,
}

impl SourceBatcher {
    pub fn new(sources: &[DomainDataset], per_domain: usize, seed: u64) -> Result<Self, DataError> {
        if per_domain == 0 {
            return Err(DataError::Config("per_domain must be >= 1".into()));
        }
        if let Some(empty) = sources.iter().find(|s| s.is_empty()) {
            return Err(DataError::Empty(empty.domain_id.clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xba7c4);
        let mut queues = Vec::with_capacity(sources.len());
        for s in sources {
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.shuffle(&mut rng);
            queues.push((order, 0));
        }
        Ok(Self { rng, per_domain, queues })
    }

    pub fn next_batch(&mut self, sources: &[DomainDataset]) -> Batch {
        let mut rows = Vec::with_capacity(self.per_domain * sources.len());
        let mut labels = Vec::new();
        let mut tags = Vec::new();
        for (tag, src) in sources.iter().enumerate() {
            let src_labels = src.labels.as_ref().expect("source datasets are labeled");
            for _ in 0..self.per_domain {
                let (order, cursor) = &mut self.queues[tag];
                if *cursor >= order.len() {
                    order.shuffle(&mut self.rng);
                    *cursor = 0;
                }
                let idx = order[*cursor];
                *cursor += 1;
                rows.push(src.features.row(idx).to_vec());
                labels.push(src_labels[idx]);
                tags.push(tag);
            }
        }
        Batch {
            features: Matrix::from_rows(&rows).expect("rows rectangular"),
            labels,
            source_tags: tags,
        }
    }
}

fn format_f64(x: f64) -> String {
    // 17 significant digits round-trips f64 exactly.
    format!("{:.16e}", x)
}

/// Writes the dataset CSV: header `domain_id,label,f0,...`, label column
/// empty for unlabeled rows.
pub fn save_dataset(dataset: &DomainDataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str("domain_id,label");
    for j in 0..dataset.dim() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in 0..dataset.len() {
        out.push_str(&dataset.domain_id);
        out.push(',');
        if let Some(labels) = &dataset.labels {
            let _ = write!(out, "{}", labels[i]);
        }
        for v in dataset.features.row(i) {
            out.push(',');
            out.push_str(&format_f64(*v));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a dataset CSV, validating dimensions and labels row by row.
/// Either every row is labeled or none is.
pub fn load_dataset(path: &Path) -> Result<DomainDataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Malformed {
        row: 0,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "domain_id" || cols[1] != "label" {
        return Err(DataError::Malformed {
            row: 0,
            message: "header must start with domain_id,label,f0,...".into(),
        });
    }
    let d_in = cols.len() - 2;
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(DataError::Malformed {
                row: 0,
                message: format!("feature column {} named {:?}, expected f{}", j + 2, c, j),
            });
        }
    }

    let mut domain_id: Option<String> = None;
    let mut rows = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let row = lineno + 1; // 1-based, counting the header as row 1
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d_in + 2 {
            return Err(DataError::Malformed {
                row,
                message: format!("expected {} fields, got {}", d_in + 2, fields.len()),
            });
        }
        match &domain_id {
            None => domain_id = Some(fields[0].to_string()),
            Some(id) if id != fields[0] => {
                return Err(DataError::Malformed {
                    row,
                    message: format!("domain_id {:?} differs from {:?}", fields[0], id),
                })
            }
            _ => {}
        }
        let label = if fields[1].is_empty() {
            None
        } else {
            Some(fields[1].parse::<usize>().map_err(|_| DataError::Malformed {
                row,
                message: format!("unknown label {:?}", fields[1]),
            })?)
        };
        labels.push(label);
        let mut feats = Vec::with_capacity(d_in);
        for f in &fields[2..] {
            feats.push(f.parse::<f64>().map_err(|_| DataError::Malformed {
                row,
                message: format!("bad feature value {:?}", f),
            })?);
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(DataError::Empty(path.display().to_string()));
    }
    let labeled_count = labels.iter().filter(|l| l.is_some()).count();
    let labels = if labeled_count == 0 {
        None
    } else if labeled_count == labels.len() {
        Some(labels.into_iter().map(|l| l.unwrap()).collect::<Vec<_>>())
    } else {
        let row = labels.iter().position(|l| l.is_none()).unwrap() + 2;
        return Err(DataError::Malformed {
            row,
            message: "mixed labeled and unlabeled rows".into(),
        });
    };
    let label_set = labels
        .as_ref()
        .map(|ls| ls.iter().copied().collect::<BTreeSet<_>>())
        .unwrap_or_default();
    Ok(DomainDataset {
        domain_id: domain_id.unwrap(),
        features: Matrix::from_rows(&rows).expect("validated rectangular"),
        labels,
        label_set,
    })
}

/// Deterministic sub-stream rng for a named component of a run.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shuffle helper used where only a permutation is needed.
pub fn shuffled_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
