use rand::seq::SliceRandom;
use rand::Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// Fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

/// Multi-layer perceptron: tanh hidden layers, softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
}

impl ModelParams {
    /// `dims = [input, hidden..., classes]`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Parameter(format!("bad layer sizes {dims:?}")));
        }
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    /// Uniform initialisation in `[-0.1, 0.1]`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        let mut rng = seed::stream(seed, "model-init", &[]);
        for layer in &mut model.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.gen_range(-0.1..=0.1);
            }
        }
        Ok(model)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Layer order: layer 0 weights (row-major), layer 0 bias, layer 1 weights, ...
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        if flat.len() != model.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a model with {} parameters",
                flat.len(),
                model.param_count()
            )));
        }
        let mut rest = flat;
        for l in &mut model.layers {
            let (w, r) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(model)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.forward(&a, &mut z);
            if i < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut a, &mut z);
        }
        a
    }

    /// Index of the largest logit; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Mean cross-entropy over `indices` and its gradient.
    pub fn loss_and_gradient(&self, data: &Dataset, indices: &[usize]) -> (f64, ModelParams) {
        let mut grad = ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        };
        let scale = 1.0 / indices.len() as f64;
        let last = self.layers.len() - 1;
        let mut total = 0.0;
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len() + 1];
        for &i in indices {
            acts[0].clear();
            acts[0].extend_from_slice(data.row(i));
            for (k, l) in self.layers.iter().enumerate() {
                let (before, after) = acts.split_at_mut(k + 1);
                l.forward(&before[k], &mut after[0]);
                if k < last {
                    after[0].iter_mut().for_each(|v| *v = v.tanh());
                }
            }
            let logits = &acts[last + 1];
            let lse = log_sum_exp(logits);
            let y = data.label(i);
            total += lse - logits[y];
            // dL/dz for softmax + cross-entropy
            let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp() * scale).collect();
            delta[y] -= scale;
            for k in (0..self.layers.len()).rev() {
                let layer = &self.layers[k];
                let input = &acts[k];
                let g = &mut grad.layers[k];
                for (o, d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(input).for_each(|(gw, a)| *gw += d * a);
                }
                if k > 0 {
                    let mut next = vec![0.0; layer.inputs];
                    for (o, d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        next.iter_mut().zip(row).for_each(|(n, w)| *n += w * d);
                    }
                    // tanh' = 1 - tanh²
                    next.iter_mut()
                        .zip(input)
                        .for_each(|(n, a)| *n *= 1.0 - a * a);
                    delta = next;
                }
            }
        }
        (total * scale, grad)
    }

    fn axpy(&mut self, alpha: f64, other: &ModelParams) {
        for (l, g) in self.layers.iter_mut().zip(&other.layers) {
            l.weights
                .iter_mut()
                .zip(&g.weights)
                .for_each(|(w, d)| *w += alpha * d);
            l.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b += alpha * d);
        }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.001,
            batch_size: 64,
        }
    }
}

/// Mini-batch SGD on mean cross-entropy: `params -= lr · ∇L`.
pub fn local_train(
    model: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    if cfg.epochs == 0 {
        return Ok(model.clone());
    }
    if !(cfg.lr > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Parameter(format!(
            "need lr > 0 and batch_size > 0, got {} and {}",
            cfg.lr, cfg.batch_size
        )));
    }
    if data.is_empty() {
        return Err(Error::Parameter("local dataset is empty".into()));
    }
    let mut rng = seed::stream(seed, "local-train", &[]);
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = model.loss_and_gradient(data, batch);
            if !loss.is_finite() {
                return Err(Error::NumericalDivergence(format!(
                    "loss became {loss} in epoch {epoch}"
                )));
            }
            model.axpy(-cfg.lr, &grad);
        }
    }
    if !model.is_finite() {
        return Err(Error::NumericalDivergence("non-finite parameters".into()));
    }
    Ok(model)
}

/// Returns `(accuracy, mean cross-entropy)`.
pub fn evaluate(model: &ModelParams, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Parameter("test set is empty".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..data.len() {
        let z = model.logits(data.row(i));
        if argmax(&z) == data.label(i) {
            correct += 1;
        }
        loss += log_sum_exp(&z) - z[data.label(i)];
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss / n))
}
