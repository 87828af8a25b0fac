use rand::Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Per-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Fully connected network stored as one flat weight vector.
///
/// Each layer `(n_in, n_out)` occupies `n_out·n_in` row-major matrix entries
/// followed by `n_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    shapes: Vec<(usize, usize)>,
    activations: Vec<Activation>,
    weights: Vec<f64>,
}

impl MlpModel {
    pub fn weight_count(shapes: &[(usize, usize)]) -> usize {
        shapes.iter().map(|&(i, o)| o * i + o).sum()
    }

    pub fn new(
        shapes: Vec<(usize, usize)>,
        activations: Vec<Activation>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        validate_layout(&shapes, &activations)?;
        let expected = Self::weight_count(&shapes);
        if weights.len() != expected {
            return Err(Error::Shape(format!(
                "weight vector has {} entries, layer shapes need {expected}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Param("non-finite network weight".into()));
        }
        Ok(Self {
            shapes,
            activations,
            weights,
        })
    }

    pub fn zeros(shapes: Vec<(usize, usize)>, activations: Vec<Activation>) -> Result<Self> {
        let n = Self::weight_count(&shapes);
        Self::new(shapes, activations, vec![0.0; n])
    }

    /// Glorot-uniform matrices and zero biases.
    pub fn glorot<R: Rng>(
        shapes: Vec<(usize, usize)>,
        activations: Vec<Activation>,
        rng: &mut R,
    ) -> Result<Self> {
        validate_layout(&shapes, &activations)?;
        let weights = glorot_weights(&shapes, rng);
        Self::new(shapes, activations, weights)
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn input_size(&self) -> usize {
        self.shapes[0].0
    }

    pub fn output_size(&self) -> usize {
        self.shapes[self.shapes.len() - 1].1
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        forward_flat(&self.shapes, &self.activations, &self.weights, input)
    }
}

fn validate_layout(shapes: &[(usize, usize)], activations: &[Activation]) -> Result<()> {
    if shapes.is_empty() {
        return Err(Error::Shape("network needs at least one layer".into()));
    }
    if shapes.len() != activations.len() {
        return Err(Error::Shape(format!(
            "{} layers but {} activations",
            shapes.len(),
            activations.len()
        )));
    }
    for (k, w) in shapes.windows(2).enumerate() {
        if w[0].1 != w[1].0 {
            return Err(Error::Shape(format!(
                "layer {k} outputs {} values but layer {} expects {}",
                w[0].1,
                k + 1,
                w[1].0
            )));
        }
    }
    if shapes.iter().any(|&(i, o)| i == 0 || o == 0) {
        return Err(Error::Shape("layer with zero width".into()));
    }
    Ok(())
}

pub(crate) fn glorot_weights<R: Rng>(shapes: &[(usize, usize)], rng: &mut R) -> Vec<f64> {
    let mut w = Vec::with_capacity(MlpModel::weight_count(shapes));
    for &(n_in, n_out) in shapes {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        for _ in 0..n_in * n_out {
            w.push(rng.gen_range(-limit..limit));
        }
        w.extend(std::iter::repeat_n(0.0, n_out));
    }
    w
}

pub(crate) fn forward_flat(
    shapes: &[(usize, usize)],
    activations: &[Activation],
    weights: &[f64],
    input: &[f64],
) -> Vec<f64> {
    let mut x = input.to_vec();
    let mut off = 0;
    for (&(n_in, n_out), &act) in shapes.iter().zip(activations) {
        let (mat, rest) = weights[off..].split_at(n_in * n_out);
        let bias = &rest[..n_out];
        let y = (0..n_out)
            .map(|o| {
                let row = &mat[o * n_in..(o + 1) * n_in];
                let mut acc = bias[o];
                for (w, xi) in row.iter().zip(&x) {
                    acc += w * xi;
                }
                act.apply(acc)
            })
            .collect();
        x = y;
        off += n_in * n_out + n_out;
    }
    x
}

/// Record the network's forward pass with the weights given as tape nodes.
pub(crate) fn forward_tape(
    tape: &mut Tape,
    shapes: &[(usize, usize)],
    activations: &[Activation],
    weights: &[Var],
    input: &[Var],
) -> Vec<Var> {
    let mut x = input.to_vec();
    let mut off = 0;
    for (&(n_in, n_out), &act) in shapes.iter().zip(activations) {
        let mat = &weights[off..off + n_in * n_out];
        let bias = &weights[off + n_in * n_out..off + n_in * n_out + n_out];
        let mut y = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let row = &mat[o * n_in..(o + 1) * n_in];
            let pre = tape.affine(bias[o], row.iter().copied().zip(x.iter().copied()));
            y.push(match act {
                Activation::Tanh => tape.tanh(pre),
                Activation::Identity => pre,
            });
        }
        x = y;
        off += n_in * n_out + n_out;
    }
    x
}
