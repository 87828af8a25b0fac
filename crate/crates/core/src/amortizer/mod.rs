//! Hypernetwork amortization of registration over the elasticity parameters.
//!
//! A small hypernetwork maps `(λ_α, μ_α)` to the weight vector of a
//! coordinate MLP, which in turn maps normalized voxel coordinates to a
//! displacement. Both are trained jointly on the absorbed-weight objective
//! with parameters sampled from the feasible triangle at every step.

pub mod checkpoint;
pub mod mlp;
pub mod tape;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::energy::{ElasticityParams, Objective, DEFAULT_NCC_WINDOW};
use crate::error::{Error, Result};
use crate::grid::{DisplacementField, GridDomain, ScalarGrid};
use crate::registration::{fit_window, AdamState, OptimizerConfig};

pub use mlp::{Activation, MlpModel};
pub use tape::{backprop, Gradients, Tape, Var};

pub const DEFAULT_MAX_DISPLACEMENT: f64 = 5.0;
pub const HIDDEN_WIDTH: usize = 32;

const VOXEL_CHUNK: usize = 256;

/// Hypernetwork together with the layout of the network it parameterizes.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet {
    net: MlpModel,
    target_shapes: Vec<(usize, usize)>,
    target_activations: Vec<Activation>,
    max_displacement: f64,
    seed: u64,
}

/// `D → 32 → 32 → D` with tanh hidden layers.
pub fn target_layout(ndim: usize) -> (Vec<(usize, usize)>, Vec<Activation>) {
    (
        vec![
            (ndim, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, ndim),
        ],
        vec![Activation::Tanh, Activation::Tanh, Activation::Identity],
    )
}

/// `2 → 32 → n_out` with a tanh hidden layer.
pub fn hyper_layout(n_out: usize) -> (Vec<(usize, usize)>, Vec<Activation>) {
    (
        vec![(2, HIDDEN_WIDTH), (HIDDEN_WIDTH, n_out)],
        vec![Activation::Tanh, Activation::Identity],
    )
}

impl HyperNet {
    /// Fresh network whose initial prediction is the zero field for every
    /// parameter setting.
    ///
    /// The output matrix is zero, and the output bias holds a Glorot draw of
    /// the target weights with the last target layer zeroed. The target net
    /// therefore starts from a generic hidden representation, and gradients
    /// reach the output matrix from the first step.
    pub fn new(ndim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t_shapes, t_acts) = target_layout(ndim);
        let n_target = MlpModel::weight_count(&t_shapes);
        let (h_shapes, h_acts) = hyper_layout(n_target);

        let mut bias = mlp::glorot_weights(&t_shapes, &mut rng);
        let last = t_shapes[t_shapes.len() - 1];
        let last_len = last.0 * last.1 + last.1;
        for w in &mut bias[n_target - last_len..] {
            *w = 0.0;
        }
        let hidden = mlp::glorot_weights(&h_shapes[..1], &mut rng);
        let mut weights = hidden;
        weights.extend(std::iter::repeat_n(0.0, HIDDEN_WIDTH * n_target));
        weights.extend(bias);
        let net = MlpModel::new(h_shapes, h_acts, weights)?;
        Self::from_parts(net, t_shapes, t_acts, DEFAULT_MAX_DISPLACEMENT, seed)
    }

    /// Every weight drawn at random, scaled by `output_scale` in the output
    /// layer, so the initial prediction is a nonzero field.
    pub fn random(ndim: usize, seed: u64, output_scale: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t_shapes, t_acts) = target_layout(ndim);
        let n_target = MlpModel::weight_count(&t_shapes);
        let (h_shapes, h_acts) = hyper_layout(n_target);
        let mut weights = mlp::glorot_weights(&h_shapes, &mut rng);
        let out_start = MlpModel::weight_count(&h_shapes[..1]);
        let bias_start = out_start + HIDDEN_WIDTH * n_target;
        let bias = mlp::glorot_weights(&t_shapes, &mut rng);
        for w in &mut weights[out_start..bias_start] {
            *w *= output_scale;
        }
        for (dst, b) in weights[bias_start..].iter_mut().zip(bias) {
            *dst = b + rng.gen_range(-0.1..0.1);
        }
        let net = MlpModel::new(h_shapes, h_acts, weights)?;
        Self::from_parts(net, t_shapes, t_acts, DEFAULT_MAX_DISPLACEMENT, seed)
    }

    pub fn from_parts(
        net: MlpModel,
        target_shapes: Vec<(usize, usize)>,
        target_activations: Vec<Activation>,
        max_displacement: f64,
        seed: u64,
    ) -> Result<Self> {
        let target = MlpModel::zeros(target_shapes.clone(), target_activations.clone())?;
        if net.input_size() != 2 {
            return Err(Error::Shape(format!(
                "hypernetwork takes 2 inputs, layout has {}",
                net.input_size()
            )));
        }
        let n_target = MlpModel::weight_count(&target_shapes);
        if net.output_size() != n_target {
            return Err(Error::Shape(format!(
                "hypernetwork emits {} weights but the target network has {n_target}",
                net.output_size()
            )));
        }
        if target.input_size() != target.output_size() {
            return Err(Error::Shape(format!(
                "target network maps {} coordinates to {} components",
                target.input_size(),
                target.output_size()
            )));
        }
        if !(max_displacement.is_finite() && max_displacement > 0.0) {
            return Err(Error::Param(format!(
                "max displacement must be positive, got {max_displacement}"
            )));
        }
        Ok(Self {
            net,
            target_shapes,
            target_activations,
            max_displacement,
            seed,
        })
    }

    pub fn net(&self) -> &MlpModel {
        &self.net
    }

    pub fn target_shapes(&self) -> &[(usize, usize)] {
        &self.target_shapes
    }

    pub fn target_activations(&self) -> &[Activation] {
        &self.target_activations
    }

    pub fn max_displacement(&self) -> f64 {
        self.max_displacement
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ndim(&self) -> usize {
        self.target_shapes[0].0
    }

    pub fn with_max_displacement(mut self, s: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Param(format!(
                "max displacement must be positive, got {s}"
            )));
        }
        self.max_displacement = s;
        Ok(self)
    }

    /// Copy with every weight set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.net.weights_mut().fill(0.0);
        out
    }

    /// Weights of the target network for one parameter setting.
    pub fn target_weights(&self, params: ElasticityParams) -> Vec<f64> {
        self.net.forward(&[params.lambda(), params.mu()])
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        self.net.weights_mut()
    }
}

/// Voxel coordinates mapped to `[−1, 1]` per axis (0 on singleton axes).
fn normalized_coords(domain: &GridDomain) -> Vec<[f64; 3]> {
    let dims = domain.dims3();
    let norm = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    domain
        .iter_coords()
        .map(|c| {
            [
                norm(c[0], dims[0]),
                norm(c[1], dims[1]),
                norm(c[2], dims[2]),
            ]
        })
        .collect()
}

fn check_domain(hyper: &HyperNet, domain: &GridDomain) -> Result<()> {
    if domain.ndim() != hyper.ndim() {
        return Err(Error::Shape(format!(
            "model predicts {}-D fields, domain is {}-D",
            hyper.ndim(),
            domain.ndim()
        )));
    }
    Ok(())
}

fn field_from_weights(
    hyper: &HyperNet,
    target: &[f64],
    domain: &GridDomain,
) -> Result<DisplacementField> {
    let nd = domain.ndim();
    let n = domain.len();
    let coords = normalized_coords(domain);
    let outputs: Vec<Vec<f64>> = coords
        .par_iter()
        .map(|c| {
            mlp::forward_flat(
                &hyper.target_shapes,
                &hyper.target_activations,
                target,
                &c[..nd],
            )
        })
        .collect();
    let mut data = vec![0.0; nd * n];
    for (k, out) in outputs.iter().enumerate() {
        for j in 0..nd {
            data[j * n + k] = hyper.max_displacement * out[j];
        }
    }
    DisplacementField::new(domain.clone(), data)
}

/// Displacement predicted for `params` at every voxel of `domain`.
pub fn predict_field(
    hyper: &HyperNet,
    params: ElasticityParams,
    domain: &GridDomain,
) -> Result<DisplacementField> {
    check_domain(hyper, domain)?;
    field_from_weights(hyper, &hyper.target_weights(params), domain)
}

/// Uniform draw from the triangle `λ_α + μ_α ≤ 1` by rejection from the unit
/// square.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R) -> ElasticityParams {
    loop {
        let lambda: f64 = rng.gen();
        let mu: f64 = rng.gen();
        if lambda + mu <= 1.0 {
            return ElasticityParams::new(lambda, mu).expect("sample lies in the triangle");
        }
    }
}

/// One training pair; all pairs in a corpus share a domain.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub fixed: ScalarGrid,
    pub moving: ScalarGrid,
}

/// Trained model plus the per-step loss.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub hyper: HyperNet,
    pub loss_trace: Vec<f64>,
}

fn corpus_domain(pairs: &[TrainingPair]) -> Result<&GridDomain> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Param("training corpus is empty".into()))?;
    let domain = first.fixed.domain();
    for p in pairs {
        domain.ensure_same(p.fixed.domain(), "training corpus")?;
        domain.ensure_same(p.moving.domain(), "training corpus")?;
    }
    Ok(domain)
}

fn pair_objective(params: ElasticityParams, domain: &GridDomain) -> Objective {
    Objective::absorbed(params).with_window(fit_window(DEFAULT_NCC_WINDOW, domain))
}

/// Mean absorbed-weight loss of the model's prediction over `pairs`.
pub fn amortized_loss(
    hyper: &HyperNet,
    pairs: &[TrainingPair],
    params: ElasticityParams,
) -> Result<f64> {
    let domain = corpus_domain(pairs)?;
    check_domain(hyper, domain)?;
    let field = predict_field(hyper, params, domain)?;
    let obj = pair_objective(params, domain);
    let mut total = 0.0;
    for p in pairs {
        total += obj.evaluate(&p.fixed, &p.moving, &field)?.value;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean loss over `pairs` and its gradient with respect to every hypernetwork
/// weight.
pub fn amortized_gradient(
    hyper: &HyperNet,
    pairs: &[TrainingPair],
    params: ElasticityParams,
) -> Result<(f64, Vec<f64>)> {
    let domain = corpus_domain(pairs)?;
    check_domain(hyper, domain)?;
    let nd = domain.ndim();
    let n = domain.len();

    // Hypernetwork pass on its own tape.
    let mut htape = Tape::with_capacity(hyper.net.weights().len() + 4096, 0);
    let hw: Vec<Var> = hyper.net.weights().iter().map(|&w| htape.leaf(w)).collect();
    let inputs = [htape.leaf(params.lambda()), htape.leaf(params.mu())];
    let target_vars = mlp::forward_tape(
        &mut htape,
        hyper.net.shapes(),
        hyper.net.activations(),
        &hw,
        &inputs,
    );
    let target: Vec<f64> = target_vars.iter().map(|&v| htape.value(v)).collect();

    // Loss and ∂L/∂u on the predicted field.
    let field = field_from_weights(hyper, &target, domain)?;
    let obj = pair_objective(params, domain);
    let mut loss = 0.0;
    let mut du = vec![0.0; nd * n];
    let inv = 1.0 / pairs.len() as f64;
    for p in pairs {
        let terms = obj.evaluate(&p.fixed, &p.moving, &field)?;
        loss += terms.value * inv;
        for (d, g) in du.iter_mut().zip(terms.gradient.data()) {
            *d += g * inv;
        }
    }

    // Target network adjoints, one tape per voxel chunk, reduced in order.
    let coords = normalized_coords(domain);
    let scale = hyper.max_displacement;
    let chunk_grads: Vec<Result<Vec<f64>>> = coords
        .par_chunks(VOXEL_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut tape = Tape::new();
            let tw: Vec<Var> = target.iter().map(|&w| tape.leaf(w)).collect();
            for (off, c) in chunk.iter().enumerate() {
                let k = ci * VOXEL_CHUNK + off;
                let xs: Vec<Var> = c[..nd].iter().map(|&x| tape.leaf(x)).collect();
                let out = mlp::forward_tape(
                    &mut tape,
                    &hyper.target_shapes,
                    &hyper.target_activations,
                    &tw,
                    &xs,
                );
                for (j, &o) in out.iter().enumerate() {
                    tape.seed(o, scale * du[j * n + k]);
                }
            }
            let g = backprop(&tape)?;
            Ok(tw.iter().map(|&v| g.wrt(v)).collect())
        })
        .collect();
    let mut target_adj = vec![0.0; target.len()];
    for g in chunk_grads {
        for (a, b) in target_adj.iter_mut().zip(g?) {
            *a += b;
        }
    }

    for (&v, &a) in target_vars.iter().zip(&target_adj) {
        htape.seed(v, a);
    }
    let g = backprop(&htape)?;
    Ok((loss, hw.iter().map(|&v| g.wrt(v)).collect()))
}

/// Jointly train the hypernetwork and the target network on `pairs`.
///
/// Each step draws one `(λ_α, μ_α)` from the triangle and takes an Adam step
/// on the mean loss over all pairs.
pub fn train_amortized<R: Rng + ?Sized>(
    pairs: &[TrainingPair],
    hyper: &HyperNet,
    config: &OptimizerConfig,
    rng: &mut R,
) -> Result<TrainingRun> {
    config.validate()?;
    let domain = corpus_domain(pairs)?;
    check_domain(hyper, domain)?;
    let mut model = hyper.clone();
    let mut state = AdamState::new(model.net.weights().len());
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let params = sample_params(rng);
        let (loss, grad) = amortized_gradient(&model, pairs, params)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step,
                what: format!("training loss is {loss}"),
            });
        }
        trace.push(loss);
        state
            .update(model.weights_mut(), &grad, config)
            .map_err(|e| match e {
                Error::Numeric { what, .. } => Error::Numeric { step, what },
                other => other,
            })?;
        if model.net.weights().iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric {
                step,
                what: "hypernetwork weights diverged".into(),
            });
        }
    }
    Ok(TrainingRun {
        hyper: model,
        loss_trace: trace,
    })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}
