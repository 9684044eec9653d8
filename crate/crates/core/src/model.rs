//! A tanh multilayer perceptron with a softmax head, trained on the mean
//! per-sample Euclidean distance between the probability output and the
//! one-hot label. Gradients are derived by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("parameter vector has {got} entries, architecture needs {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("malformed parameter blob: {0}")]
    Format(String),
}

/// Flat model parameters: for each layer the row-major weight matrix
/// (outputs x inputs) followed by the bias vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector::from_vec(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// self += a * x
    pub fn axpy(&mut self, a: f64, x: &ParamVector) {
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Little-endian f64 values behind an 8-byte little-endian count.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.values.len());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let header: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| ModelError::Format("missing length header".into()))?;
        let n = u64::from_le_bytes(header) as usize;
        let body = &bytes[8..];
        if body.len() != n.saturating_mul(8) {
            return Err(ModelError::Format(format!(
                "header says {n} values but body has {} bytes",
                body.len()
            )));
        }
        Ok(Self::from_vec(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl ModelArch {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
            num_classes,
        }
    }

    /// (inputs, outputs) per layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.num_classes);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|&(i, o)| i * o + o).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.num_params());
        for (fan_in, fan_out) in self.layers() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector::from_vec(values)
    }

    fn check_params(&self, w: &ParamVector) -> Result<(), ModelError> {
        let expected = self.num_params();
        if w.len() != expected {
            return Err(ModelError::ParamLength {
                expected,
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check_dataset(&self, d: &Dataset) -> Result<(), ModelError> {
        if d.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        if d.dim() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim,
                got: d.dim(),
            });
        }
        if d.num_classes() != self.num_classes {
            return Err(ModelError::DimensionMismatch {
                expected: self.num_classes,
                got: d.num_classes(),
            });
        }
        Ok(())
    }

    /// Layer activations; the last entry holds softmax probabilities.
    fn activations(&self, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        let mut offset = 0;
        for (l, &(n_in, n_out)) in layers.iter().enumerate() {
            let weights = &w[offset..offset + n_in * n_out];
            let bias = &w[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let input = acts.last().unwrap();
            let mut z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < layers.len() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            } else {
                softmax_in_place(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, w: &ParamVector, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_params(w)?;
        if x.len() != self.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(self.activations(&w.values, x).pop().unwrap())
    }

    pub fn rmse_loss(&self, w: &ParamVector, d: &Dataset) -> Result<f64, ModelError> {
        self.check_params(w)?;
        self.check_dataset(d)?;
        let total: f64 = d
            .iter()
            .map(|(x, label)| {
                let p = self.activations(&w.values, x).pop().unwrap();
                sample_distance(&p, label)
            })
            .sum();
        Ok(total / d.len() as f64)
    }

    pub fn grad(&self, w: &ParamVector, batch: &Dataset) -> Result<ParamVector, ModelError> {
        let all: Vec<usize> = (0..batch.len()).collect();
        self.grad_on(w, batch, &all)
    }

    /// Gradient of the mean loss over the rows `indices` of `d`.
    pub fn grad_on(&self, w: &ParamVector, d: &Dataset, indices: &[usize]) -> Result<ParamVector, ModelError> {
        self.check_params(w)?;
        self.check_dataset(d)?;
        if indices.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut g = vec![0.0; w.len()];
        for &i in indices {
            self.accumulate_sample_grad(&w.values, d.features(i), d.label(i), &mut g);
        }
        let inv = 1.0 / indices.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Ok(ParamVector::from_vec(g))
    }

    fn accumulate_sample_grad(&self, w: &[f64], x: &[f64], label: usize, g: &mut [f64]) {
        let layers = self.layers();
        let acts = self.activations(w, x);
        let p = acts.last().unwrap();
        let r = sample_distance(p, label);
        if r == 0.0 {
            return;
        }
        // d r / d p
        let dp: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(c, &pc)| (pc - f64::from(u8::from(c == label))) / r)
            .collect();
        // softmax Jacobian-vector product
        let mean: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
        let mut delta: Vec<f64> = p.iter().zip(&dp).map(|(pc, d)| pc * (d - mean)).collect();

        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &(n_in, n_out) in &layers {
            offsets.push(off);
            off += n_in * n_out + n_out;
        }
        for l in (0..layers.len()).rev() {
            let (n_in, n_out) = layers[l];
            let off = offsets[l];
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut g[off + o * n_in..off + (o + 1) * n_in];
                    for (gi, a) in row.iter_mut().zip(input) {
                        *gi += d * a;
                    }
                }
                g[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &w[off..off + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|o| weights[o * n_in + i] * delta[o]).sum();
                        back * (1.0 - input[i] * input[i])
                    })
                    .collect();
            }
        }
    }

    /// Fraction of samples whose argmax (lowest index on ties) is the label.
    pub fn accuracy(&self, w: &ParamVector, d: &Dataset) -> Result<f64, ModelError> {
        self.check_params(w)?;
        self.check_dataset(d)?;
        let correct = d
            .iter()
            .filter(|&(x, label)| argmax(&self.activations(&w.values, x).pop().unwrap()) == label)
            .count();
        Ok(correct as f64 / d.len() as f64)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn sample_distance(p: &[f64], label: usize) -> f64 {
    p.iter()
        .enumerate()
        .map(|(c, &pc)| {
            let t = if c == label { 1.0 } else { 0.0 };
            (pc - t) * (pc - t)
        })
        .sum::<f64>()
        .sqrt()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
