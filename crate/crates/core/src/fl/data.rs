use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Parameter(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            dim: self.dim,
            labels,
            class_count: self.class_count,
        }
    }
}

/// Parameters of the synthetic Gaussian-blob task.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    /// Class centres are drawn uniformly from `[-spread, spread]^dim`.
    pub spread: f64,
    pub noise: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 16,
            train: 2000,
            test: 500,
            spread: 1.0,
            noise: 1.0,
        }
    }
}

/// Balanced Gaussian blobs: sample `i` belongs to class `i mod classes`.
pub fn synthetic_blobs(spec: &BlobSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.dim == 0 || spec.train == 0 || spec.test == 0 {
        return Err(Error::Parameter(format!("degenerate blob spec {spec:?}")));
    }
    let mut rng = seed::stream(seed, "blobs-centres", &[]);
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| rng.gen_range(-spec.spread..=spec.spread))
                .collect()
        })
        .collect();
    let draw = |count: usize, label: &str| {
        let mut rng = seed::stream(seed, label, &[]);
        let mut features = Vec::with_capacity(count * spec.dim);
        let labels: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
        for &l in &labels {
            for c in &centres[l] {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + spec.noise * z);
            }
        }
        Dataset::new(features, spec.dim, labels, spec.classes)
    };
    Ok((draw(spec.train, "blobs-train")?, draw(spec.test, "blobs-test")?))
}

/// Loads a CSV with a header row, decimal feature columns and a final `label`
/// column holding integers in `[0, class_count)`.
pub fn load_csv(path: &Path, class_count: usize) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.len() < 2 || headers.get(headers.len() - 1) != Some("label") {
        return Err(Error::Format("last CSV column must be named `label`".into()));
    }
    let dim = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        for field in record.iter().take(dim) {
            features.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Format(format!("row {}: bad feature `{field}`", line + 1))
            })?);
        }
        let label = &record[dim];
        labels.push(label.trim().parse::<usize>().map_err(|_| {
            Error::Format(format!("row {}: bad label `{label}`", line + 1))
        })?);
    }
    Dataset::new(features, dim, labels, class_count)
}

/// Assignment of training-sample indices to local nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub assignment: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

/// Draws per-class node proportions from Dirichlet(alpha). Redraws (up to a
/// bounded number of attempts) until every node holds a minimum sample count.
pub fn dirichlet_partition(data: &Dataset, nodes: usize, alpha: f64, seed: u64) -> Result<PartitionSpec> {
    if data.is_empty() {
        return Err(Error::Parameter("cannot partition an empty dataset".into()));
    }
    if nodes == 0 || !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!(
            "partition needs nodes >= 1 and alpha > 0 (got {nodes}, {alpha})"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let min_size = (data.len() / nodes).min(10);
    let mut rng = seed::stream(seed, "dirichlet-partition", &[nodes as u64]);
    let mut best: Option<Vec<Vec<usize>>> = None;
    for _ in 0..1000 {
        let mut assignment = vec![Vec::new(); nodes];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let props: Vec<f64> = if nodes == 1 {
                vec![1.0]
            } else {
                Dirichlet::new_with_size(alpha, nodes)
                    .map_err(|e| Error::Parameter(e.to_string()))?
                    .sample(&mut rng)
            };
            let mut start = 0usize;
            let mut cum = 0.0;
            for (node, p) in props.iter().enumerate() {
                cum += p;
                let end = if node + 1 == nodes {
                    members.len()
                } else {
                    ((cum * members.len() as f64).round() as usize).clamp(start, members.len())
                };
                assignment[node].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        let smallest = assignment.iter().map(Vec::len).min().unwrap_or(0);
        if smallest >= min_size {
            best = Some(assignment);
            break;
        }
        if best.as_ref().is_none_or(|b| b.iter().map(Vec::len).min().unwrap_or(0) < smallest) {
            best = Some(assignment);
        }
    }
    let mut assignment = best.expect("at least one draw");
    for a in &mut assignment {
        a.sort_unstable();
    }
    Ok(PartitionSpec {
        assignment,
        alpha,
        seed,
    })
}
