//! Per-pair instance optimization of the registration objective.

use serde::{Deserialize, Serialize};

use crate::energy::{ElasticityParams, Objective};
use crate::error::{Error, Result};
use crate::grid::{sample_field, DisplacementField, GridDomain, ScalarGrid};

/// Optimizer settings shared by instance registration and amortizer training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of resolution levels; 1 means single resolution.
    pub pyramid_levels: usize,
    /// Stop early once the relative loss change drops to this; 0 runs every step.
    pub convergence_tol: f64,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

/// Learning-rate schedule over the `steps` of one optimization run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero.
    Cosine,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            steps: 250,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pyramid_levels: 1,
            convergence_tol: 0.0,
            seed: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimizerConfig {
    /// Settings that actually move a dense field in a few hundred steps:
    /// displacements live in voxel units, so the step size is a fraction of
    /// a voxel.
    pub fn instance() -> Self {
        Self {
            learning_rate: 0.1,
            ..Self::default()
        }
    }

    /// Learning rate for the zero-based update `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = (step as f64 / self.steps.max(1) as f64).min(1.0);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.steps >= 1
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.pyramid_levels >= 1
            && self.convergence_tol >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        config: &OptimizerConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} gradients, state for {}",
                params.len(),
                grad.len(),
                self.m.len()
            )));
        }
        let lr = config.learning_rate_at(self.t);
        let step = self.t + 1;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                step: step as usize,
                what: format!("gradient component {i} is {}", grad[i]),
            });
        }
        self.t = step;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
        Ok(())
    }
}

/// Functional form of one Adam step on a displacement field.
pub fn adam_step(
    field: &DisplacementField,
    gradient: &DisplacementField,
    state: &AdamState,
    config: &OptimizerConfig,
) -> Result<(DisplacementField, AdamState)> {
    field.domain().ensure_same(gradient.domain(), "adam_step")?;
    let mut data = field.data().to_vec();
    let mut next = state.clone();
    next.update(&mut data, gradient.data(), config)?;
    Ok((DisplacementField::new(field.domain().clone(), data)?, next))
}

/// Objective terms at the returned field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalTerms {
    pub loss: f64,
    pub dissimilarity: f64,
    pub regularization: f64,
    pub similarity_weight: f64,
    pub regularization_weight: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub field: DisplacementField,
    /// Loss before each executed update, across all pyramid levels.
    pub loss_trace: Vec<f64>,
    pub final_terms: FinalTerms,
}

/// Register `moving` onto `fixed` under the absorbed-weight elastic objective.
pub fn register_pair(
    fixed: &ScalarGrid,
    moving: &ScalarGrid,
    params: ElasticityParams,
    config: &OptimizerConfig,
) -> Result<RegistrationResult> {
    register(fixed, moving, &Objective::absorbed(params), config)
}

/// Largest valid odd NCC window not exceeding `window` for this domain.
pub(crate) fn fit_window(window: usize, domain: &GridDomain) -> usize {
    let smallest = *domain.dims().iter().min().expect("non-empty dims");
    let mut w = window.min(smallest);
    if w.is_multiple_of(2) {
        w -= 1;
    }
    w.max(3)
}

/// Minimize `objective` over a dense field, starting from zero, optionally
/// coarse to fine.
pub fn register(
    fixed: &ScalarGrid,
    moving: &ScalarGrid,
    objective: &Objective,
    config: &OptimizerConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    fixed.domain().ensure_same(moving.domain(), "register")?;
    let fixed_levels = build_pyramid(fixed, config.pyramid_levels)?;
    let moving_levels = build_pyramid(moving, config.pyramid_levels)?;

    let mut trace = Vec::new();
    let mut field: Option<DisplacementField> = None;
    for (f, m) in fixed_levels.iter().zip(&moving_levels).rev() {
        let domain = f.domain();
        let mut u = match field.take() {
            None => DisplacementField::zeros(domain.clone()),
            Some(coarse) => upsample_field(&coarse, domain)?,
        };
        let obj = objective.with_window(fit_window(objective.window, domain));
        optimize_level(f, m, &obj, config, &mut u, &mut trace)?;
        field = Some(u);
    }
    let field = field.expect("at least one level");
    let terms = objective.evaluate(fixed, moving, &field)?;
    Ok(RegistrationResult {
        field,
        loss_trace: trace,
        final_terms: FinalTerms {
            loss: terms.value,
            dissimilarity: terms.dissimilarity,
            regularization: terms.regularization,
            similarity_weight: terms.similarity_weight,
            regularization_weight: terms.regularization_weight,
        },
    })
}

fn optimize_level(
    fixed: &ScalarGrid,
    moving: &ScalarGrid,
    objective: &Objective,
    config: &OptimizerConfig,
    field: &mut DisplacementField,
    trace: &mut Vec<f64>,
) -> Result<()> {
    let mut state = AdamState::new(field.data().len());
    let mut previous: Option<f64> = None;
    for _ in 0..config.steps {
        let step = trace.len();
        let terms = objective.evaluate(fixed, moving, field)?;
        if !terms.value.is_finite() {
            return Err(Error::Numeric {
                step,
                what: format!("loss is {}", terms.value),
            });
        }
        trace.push(terms.value);
        if let Some(prev) = previous {
            if config.convergence_tol > 0.0
                && (prev - terms.value).abs() <= config.convergence_tol * prev.abs()
            {
                break;
            }
        }
        previous = Some(terms.value);
        state
            .update(field.data_mut(), terms.gradient.data(), config)
            .map_err(|e| match e {
                Error::Numeric { what, .. } => Error::Numeric { step, what },
                other => other,
            })?;
        if let Some(i) = field.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step,
                what: format!("displacement component {i} diverged"),
            });
        }
    }
    Ok(())
}

/// Downsampled copies of `grid`, finest first. Each level halves every
/// active axis (rounding up) by averaging 2×2(×2) blocks and doubles the
/// spacing.
pub fn build_pyramid(grid: &ScalarGrid, levels: usize) -> Result<Vec<ScalarGrid>> {
    if levels == 0 {
        return Err(Error::Param("pyramid needs at least one level".into()));
    }
    let need = 1usize << (levels - 1);
    if grid.domain().dims().iter().any(|&d| d < need) {
        return Err(Error::Param(format!(
            "{levels} pyramid levels need every dim ≥ {need}, got {:?}",
            grid.domain().dims()
        )));
    }
    let mut out = vec![grid.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

fn downsample(grid: &ScalarGrid) -> Result<ScalarGrid> {
    let src = grid.domain();
    let nd = src.ndim();
    let dims: Vec<usize> = src.dims().iter().map(|d| d.div_ceil(2)).collect();
    let spacing: Vec<f64> = src.spacing().iter().map(|s| s * 2.0).collect();
    let dst = GridDomain::new(&dims, &spacing)?;
    let sd = src.dims3();
    let values = dst
        .iter_coords()
        .map(|c| {
            let mut sum = 0.0;
            let mut count = 0usize;
            let zs = if nd == 3 { 2 } else { 1 };
            for dz in 0..zs {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let p = [2 * c[0] + dx, 2 * c[1] + dy, 2 * c[2] + dz];
                        if p[0] < sd[0] && p[1] < sd[1] && p[2] < sd[2] {
                            sum += grid.get(p);
                            count += 1;
                        }
                    }
                }
            }
            sum / count as f64
        })
        .collect();
    ScalarGrid::new(dst, values)
}

/// Interpolate a coarse-level field onto a finer lattice. Voxel centers are
/// aligned with the block averaging of [`build_pyramid`], and displacements
/// are rescaled by the spacing ratio to stay in voxel units.
pub fn upsample_field(coarse: &DisplacementField, fine: &GridDomain) -> Result<DisplacementField> {
    let cd = coarse.domain();
    if cd.ndim() != fine.ndim() {
        return Err(Error::Shape("upsample: dimensionality differs".into()));
    }
    let nd = fine.ndim();
    let (cs, fs) = (cd.spacing3(), fine.spacing3());
    let ratio: Vec<f64> = (0..3).map(|a| cs[a] / fs[a]).collect();
    let field = DisplacementField::from_fn(fine.clone(), |c| {
        let mut p = [0.0; 3];
        for a in 0..nd {
            p[a] = (c[a] as f64 + 0.5) / ratio[a] - 0.5;
        }
        let mut v = sample_field(coarse, p);
        for a in 0..nd {
            v[a] *= ratio[a];
        }
        v
    });
    Ok(field)
}
