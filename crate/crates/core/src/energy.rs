//! Similarity and regularization energies with closed-form gradients.
//!
//! Every integral energy is a mean over voxels, so weights stay comparable
//! across grid sizes. Derivatives are forward differences scaled by the
//! physical spacing; the last slice along each axis contributes zero.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    forward_diff_adjoint, forward_diff_raw, warp_with_gradient, DisplacementField, GridDomain,
    ScalarGrid,
};

/// Default local-NCC window edge length.
pub const DEFAULT_NCC_WINDOW: usize = 9;

/// Windows whose variance product falls at or below this are treated as
/// uncorrelated (contribute 0).
pub const NCC_VARIANCE_GUARD: f64 = 1e-5;

/// An energy value and, optionally, its gradient with respect to the field.
#[derive(Debug, Clone)]
pub struct EnergyValue {
    pub value: f64,
    pub gradient: Option<DisplacementField>,
}

/// Absorbed-weight elasticity parameters `(λ_α, μ_α)` with `λ_α + μ_α ≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticityParams {
    lambda: f64,
    mu: f64,
}

/// Slack allowed on the simplex bound, so lattice points such as 0.7 + 0.3
/// are not rejected over rounding.
const SIMPLEX_SLACK: f64 = 1e-12;

impl ElasticityParams {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        if !(lambda.is_finite() && mu.is_finite()) || lambda < 0.0 || mu < 0.0 {
            return Err(Error::Param(format!(
                "elasticity parameters must be finite and non-negative, got λ={lambda}, μ={mu}"
            )));
        }
        if lambda + mu > 1.0 + SIMPLEX_SLACK {
            return Err(Error::Param(format!(
                "constraint λ+μ ≤ 1 violated: λ={lambda}, μ={mu}"
            )));
        }
        Ok(Self { lambda, mu })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn total(&self) -> f64 {
        self.lambda + self.mu
    }

    /// Weight on the similarity term, `1 − λ_α − μ_α`, exactly zero on the
    /// `λ_α + μ_α = 1` edge.
    pub fn similarity_weight(&self) -> f64 {
        let s = self.total();
        if s >= 1.0 - SIMPLEX_SLACK {
            0.0
        } else {
            1.0 - s
        }
    }

    pub fn as_raw(&self) -> RawElasticity {
        RawElasticity {
            lambda: self.lambda,
            mu: self.mu,
        }
    }
}

/// Unconstrained Lamé parameters, as reported in the tissue literature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawElasticity {
    pub lambda: f64,
    pub mu: f64,
}

impl RawElasticity {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        if !(lambda.is_finite() && mu.is_finite()) || lambda < 0.0 || mu < 0.0 {
            return Err(Error::Param(format!(
                "Lamé parameters must be finite and non-negative, got λ={lambda}, μ={mu}"
            )));
        }
        Ok(Self { lambda, mu })
    }

    /// `λ/μ`, only defined for `μ > 0`.
    pub fn ratio(&self) -> Option<f64> {
        (self.mu > 0.0).then(|| self.lambda / self.mu)
    }

    /// Both parameters multiplied by `factor`; the ratio is unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lambda: self.lambda * factor,
            mu: self.mu * factor,
        }
    }
}

/// Published tissue estimates of `(λ, μ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TissuePreset {
    BrainHartmann,
    BrainKumaresan,
    LungLaiFook,
    LungBrock,
}

impl TissuePreset {
    pub const ALL: [TissuePreset; 4] = [
        TissuePreset::BrainHartmann,
        TissuePreset::BrainKumaresan,
        TissuePreset::LungLaiFook,
        TissuePreset::LungBrock,
    ];

    pub fn params(self) -> RawElasticity {
        let (lambda, mu) = match self {
            TissuePreset::BrainHartmann => (12483.3, 25.0),
            TissuePreset::BrainKumaresan => (540.8, 22.5),
            TissuePreset::LungLaiFook => (45.33, 8.0),
            TissuePreset::LungBrock => (15.51, 1.72),
        };
        RawElasticity { lambda, mu }
    }

    pub fn name(self) -> &'static str {
        match self {
            TissuePreset::BrainHartmann => "brain-hartmann",
            TissuePreset::BrainKumaresan => "brain-kumaresan",
            TissuePreset::LungLaiFook => "lung-laifook",
            TissuePreset::LungBrock => "lung-brock",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Local NCC value and its gradient with respect to the second image.
#[derive(Debug, Clone)]
pub struct NccValue {
    /// Mean squared local correlation, in `[0, 1]`.
    pub value: f64,
    /// `∂ value / ∂ moving_warped`.
    pub gradient: ScalarGrid,
}

/// Sum of `values` over the (truncated) cubic window of the given radius
/// around every voxel, plus the number of voxels in each window.
fn box_sum(values: &[f64], domain: &GridDomain, radius: usize) -> Vec<f64> {
    let dims = domain.dims3();
    let mut cur = values.to_vec();
    let mut prefix = Vec::new();
    for axis in 0..domain.ndim() {
        let n = dims[axis];
        let stride = domain.stride(axis);
        let mut next = vec![0.0; cur.len()];
        // every line along `axis` starts at a voxel whose coordinate on that axis is 0
        for start in 0..cur.len() {
            if domain.coords(start)[axis] != 0 {
                continue;
            }
            prefix.clear();
            prefix.push(0.0);
            let mut acc = 0.0;
            for k in 0..n {
                acc += cur[start + k * stride];
                prefix.push(acc);
            }
            for k in 0..n {
                let lo = k.saturating_sub(radius);
                let hi = (k + radius).min(n - 1);
                next[start + k * stride] = prefix[hi + 1] - prefix[lo];
            }
        }
        cur = next;
    }
    cur
}

fn window_counts(domain: &GridDomain, radius: usize) -> Vec<f64> {
    let dims = domain.dims3();
    let per_axis = |k: usize, n: usize| -> f64 {
        let lo = k.saturating_sub(radius);
        let hi = (k + radius).min(n - 1);
        (hi - lo + 1) as f64
    };
    domain
        .iter_coords()
        .map(|c| {
            (0..domain.ndim())
                .map(|a| per_axis(c[a], dims[a]))
                .product()
        })
        .collect()
}

fn check_window(domain: &GridDomain, window: usize) -> Result<()> {
    let smallest = *domain.dims().iter().min().expect("non-empty dims");
    if window < 3 || window.is_multiple_of(2) || window > smallest {
        return Err(Error::Param(format!(
            "NCC window must be odd, ≥ 3 and ≤ the smallest dim ({smallest}); got {window}"
        )));
    }
    Ok(())
}

/// Mean over voxels of the squared local correlation coefficient between
/// `fixed` and `moving_warped` in a `window^D` neighborhood. Windows are
/// truncated at the border. Windows with `var(F)·var(M) ≤ 1e-5` (sums of
/// squared deviations) count as 0.
pub fn ncc_local(
    fixed: &ScalarGrid,
    moving_warped: &ScalarGrid,
    window: usize,
) -> Result<NccValue> {
    let domain = fixed.domain();
    domain.ensure_same(moving_warped.domain(), "ncc_local")?;
    check_window(domain, window)?;
    let r = window / 2;
    let i = fixed.values();
    let j = moving_warped.values();
    let n_vox = i.len();

    let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..n_vox).map(f).collect() };
    let s_i = box_sum(i, domain, r);
    let s_j = box_sum(j, domain, r);
    let s_ii = box_sum(&prod(&|k| i[k] * i[k]), domain, r);
    let s_jj = box_sum(&prod(&|k| j[k] * j[k]), domain, r);
    let s_ij = box_sum(&prod(&|k| i[k] * j[k]), domain, r);
    let counts = window_counts(domain, r);

    let inv_n = 1.0 / n_vox as f64;
    let mut total = 0.0;
    let mut alpha = vec![0.0; n_vox];
    let mut alpha_mean_i = vec![0.0; n_vox];
    let mut beta = vec![0.0; n_vox];
    let mut beta_mean_j = vec![0.0; n_vox];
    for k in 0..n_vox {
        let cnt = counts[k];
        let mean_i = s_i[k] / cnt;
        let mean_j = s_j[k] / cnt;
        let cross = s_ij[k] - s_i[k] * mean_j;
        let var_i = s_ii[k] - s_i[k] * mean_i;
        let var_j = s_jj[k] - s_j[k] * mean_j;
        let denom = var_i * var_j;
        if var_i <= 0.0 || var_j <= 0.0 || denom <= NCC_VARIANCE_GUARD {
            continue;
        }
        let cc = cross * cross / denom;
        total += cc;
        let a = 2.0 * cross / denom * inv_n;
        let b = 2.0 * cc / var_j * inv_n;
        alpha[k] = a;
        alpha_mean_i[k] = a * mean_i;
        beta[k] = b;
        beta_mean_j[k] = b * mean_j;
    }

    let s_alpha = box_sum(&alpha, domain, r);
    let s_alpha_mi = box_sum(&alpha_mean_i, domain, r);
    let s_beta = box_sum(&beta, domain, r);
    let s_beta_mj = box_sum(&beta_mean_j, domain, r);
    let grad: Vec<f64> = (0..n_vox)
        .map(|k| i[k] * s_alpha[k] - s_alpha_mi[k] - j[k] * s_beta[k] + s_beta_mj[k])
        .collect();

    Ok(NccValue {
        value: total * inv_n,
        gradient: ScalarGrid::new(domain.clone(), grad)?,
    })
}

/// All forward differences `∂_{x_i} u_j` (divided by spacing), indexed `[i][j]`.
fn derivatives(field: &DisplacementField) -> Vec<Vec<Vec<f64>>> {
    let domain = field.domain();
    let h = domain.spacing3();
    (0..field.ndim())
        .map(|i| {
            (0..field.ndim())
                .map(|j| {
                    let mut d = forward_diff_raw(field.component(j), domain, i);
                    d.iter_mut().for_each(|v| *v /= h[i]);
                    d
                })
                .collect()
        })
        .collect()
}

/// Push a per-voxel adjoint `∂E/∂(∂_{x_i} u_j)` back onto `u_j`.
fn accumulate_adjoint(
    grad: &mut DisplacementField,
    adj: &[f64],
    component: usize,
    direction: usize,
) {
    let domain = grad.domain().clone();
    let h = domain.spacing3()[direction];
    let scaled: Vec<f64> = adj.iter().map(|v| v / h).collect();
    forward_diff_adjoint(&scaled, &domain, direction, grad.component_mut(component));
}

/// Per-voxel diffusion density `Σ_{i,j} (∂_{x_i} u_j)²`.
pub fn diffusion_density(field: &DisplacementField) -> ScalarGrid {
    let d = derivatives(field);
    let n = field.domain().len();
    let mut out = vec![0.0; n];
    for di in &d {
        for dij in di {
            for (o, v) in out.iter_mut().zip(dij) {
                *o += v * v;
            }
        }
    }
    ScalarGrid::from_raw(field.domain().clone(), out)
}

/// Diffusion regularizer: voxel mean of `Σ_{i,j} (∂_{x_i} u_j)²`.
pub fn diffusion_energy(field: &DisplacementField) -> EnergyValue {
    let d = derivatives(field);
    let n = field.domain().len();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = DisplacementField::zeros(field.domain().clone());
    for (i, di) in d.iter().enumerate() {
        for (j, dij) in di.iter().enumerate() {
            value += dij.iter().map(|v| v * v).sum::<f64>();
            let adj: Vec<f64> = dij.iter().map(|v| 2.0 * v * inv_n).collect();
            accumulate_adjoint(&mut grad, &adj, j, i);
        }
    }
    EnergyValue {
        value: value * inv_n,
        gradient: Some(grad),
    }
}

/// Per-voxel linear-elastic density
/// `μ/4 Σ_{i,j} (∂_{x_i}u_j + ∂_{x_j}u_i)² + λ/2 (div u)²`.
pub fn elastic_density(field: &DisplacementField, params: RawElasticity) -> ScalarGrid {
    let d = derivatives(field);
    let nd = field.ndim();
    let n = field.domain().len();
    let values = (0..n)
        .map(|k| {
            let mut shear = 0.0;
            let mut div = 0.0;
            for i in 0..nd {
                div += d[i][i][k];
                for j in 0..nd {
                    let s = d[i][j][k] + d[j][i][k];
                    shear += s * s;
                }
            }
            0.25 * params.mu * shear + 0.5 * params.lambda * div * div
        })
        .collect();
    ScalarGrid::from_raw(field.domain().clone(), values)
}

/// Linear-elastic regularizer: voxel mean of [`elastic_density`].
pub fn elastic_energy(field: &DisplacementField, params: RawElasticity) -> EnergyValue {
    let d = derivatives(field);
    let nd = field.ndim();
    let n = field.domain().len();
    let inv_n = 1.0 / n as f64;
    let (lambda, mu) = (params.lambda, params.mu);

    let mut value = 0.0;
    // adj[i][j][k] = ∂E/∂(∂_{x_i}u_j) at voxel k
    let mut adj = vec![vec![vec![0.0; n]; nd]; nd];
    for k in 0..n {
        let div: f64 = (0..nd).map(|i| d[i][i][k]).sum();
        let mut shear = 0.0;
        for i in 0..nd {
            for j in 0..nd {
                let s = d[i][j][k] + d[j][i][k];
                shear += s * s;
                adj[i][j][k] = mu * s * inv_n;
            }
            adj[i][i][k] += lambda * div * inv_n;
        }
        value += 0.25 * mu * shear + 0.5 * lambda * div * div;
    }
    let mut grad = DisplacementField::zeros(field.domain().clone());
    for (i, adj_i) in adj.iter().enumerate() {
        for (j, adj_ij) in adj_i.iter().enumerate() {
            accumulate_adjoint(&mut grad, adj_ij, j, i);
        }
    }
    EnergyValue {
        value: value * inv_n,
        gradient: Some(grad),
    }
}

/// Which regularizer the registration objective uses and how it is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularization {
    /// `(1−λ_α−μ_α)(1−NCC) + E_el(λ_α, μ_α)`.
    AbsorbedElastic { params: ElasticityParams },
    /// `(1−α)(1−NCC) + α·E_el(λ, μ)`.
    WeightedElastic { alpha: f64, params: RawElasticity },
    /// `(1−α)(1−NCC) + α·E_diff`.
    Diffusion { alpha: f64 },
}

/// The full registration objective as a function of the displacement field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub regularization: Regularization,
    pub window: usize,
}

/// Objective value split into its parts, with the total gradient.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub value: f64,
    /// `1 − NCC`.
    pub dissimilarity: f64,
    /// Unweighted regularizer energy (for the absorbed form, the energy at
    /// `(λ_α, μ_α)`, which is already weighted).
    pub regularization: f64,
    pub similarity_weight: f64,
    pub regularization_weight: f64,
    pub gradient: DisplacementField,
}

impl LossTerms {
    pub fn into_energy(self) -> EnergyValue {
        EnergyValue {
            value: self.value,
            gradient: Some(self.gradient),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Param(format!("α must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

impl Objective {
    pub fn absorbed(params: ElasticityParams) -> Self {
        Self {
            regularization: Regularization::AbsorbedElastic { params },
            window: DEFAULT_NCC_WINDOW,
        }
    }

    pub fn weighted_elastic(alpha: f64, params: RawElasticity) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            regularization: Regularization::WeightedElastic { alpha, params },
            window: DEFAULT_NCC_WINDOW,
        })
    }

    pub fn diffusion(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            regularization: Regularization::Diffusion { alpha },
            window: DEFAULT_NCC_WINDOW,
        })
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    fn weights(&self) -> (f64, f64) {
        match self.regularization {
            Regularization::AbsorbedElastic { params } => (params.similarity_weight(), 1.0),
            Regularization::WeightedElastic { alpha, .. } | Regularization::Diffusion { alpha } => {
                (1.0 - alpha, alpha)
            }
        }
    }

    fn regularizer(&self, field: &DisplacementField) -> EnergyValue {
        match self.regularization {
            Regularization::AbsorbedElastic { params } => elastic_energy(field, params.as_raw()),
            Regularization::WeightedElastic { params, .. } => elastic_energy(field, params),
            Regularization::Diffusion { .. } => diffusion_energy(field),
        }
    }

    /// Evaluate the objective and its gradient with respect to `field`.
    pub fn evaluate(
        &self,
        fixed: &ScalarGrid,
        moving: &ScalarGrid,
        field: &DisplacementField,
    ) -> Result<LossTerms> {
        fixed
            .domain()
            .ensure_same(moving.domain(), "fixed/moving")?;
        fixed.domain().ensure_same(field.domain(), "image/field")?;
        let (w_sim, w_reg) = self.weights();
        let (warped, img_grad) = warp_with_gradient(moving, field)?;
        let ncc = ncc_local(fixed, &warped, self.window)?;
        let reg = self.regularizer(field);

        let n = field.domain().len();
        let nd = field.ndim();
        let mut grad = reg.gradient.expect("regularizers return gradients");
        let dj = ncc.gradient.values();
        for (g, sg) in grad
            .data_mut()
            .chunks_mut(n)
            .zip(img_grad.data().chunks(n))
            .take(nd)
        {
            for k in 0..n {
                g[k] = w_reg * g[k] - w_sim * dj[k] * sg[k];
            }
        }
        let dissimilarity = 1.0 - ncc.value;
        Ok(LossTerms {
            value: w_sim * dissimilarity + w_reg * reg.value,
            dissimilarity,
            regularization: reg.value,
            similarity_weight: w_sim,
            regularization_weight: w_reg,
            gradient: grad,
        })
    }
}

/// `(1−α)(1 − NCC(F, M∘φ)) + α·E_el(λ, μ)`.
pub fn composite_loss_eq4(
    fixed: &ScalarGrid,
    moving: &ScalarGrid,
    field: &DisplacementField,
    alpha: f64,
    params: RawElasticity,
) -> Result<EnergyValue> {
    Ok(Objective::weighted_elastic(alpha, params)?
        .evaluate(fixed, moving, field)?
        .into_energy())
}

/// `(1−λ_α−μ_α)(1 − NCC(F, M∘φ)) + E_el(λ_α, μ_α)`.
pub fn composite_loss_eq5(
    fixed: &ScalarGrid,
    moving: &ScalarGrid,
    field: &DisplacementField,
    params: ElasticityParams,
) -> Result<EnergyValue> {
    Ok(Objective::absorbed(params)
        .evaluate(fixed, moving, field)?
        .into_energy())
}

/// Compare an energy's analytic gradient against central differences at
/// `samples` randomly chosen field components. Returns the maximum of
/// `|analytic − numeric| / (|analytic| + 1e-12)`.
pub fn grad_check<F>(
    energy: F,
    field: &DisplacementField,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&DisplacementField) -> Result<EnergyValue>,
{
    if !(h > 0.0) {
        return Err(Error::Param(format!(
            "perturbation must be positive, got {h}"
        )));
    }
    let analytic = energy(field)?
        .gradient
        .ok_or_else(|| Error::Param("energy did not return a gradient".into()))?;
    let total = field.data().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, total, samples.min(total));
    let mut worst = 0.0f64;
    let mut probe = field.clone();
    for idx in picks.iter() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = energy(&probe)?.value;
        probe.data_mut()[idx] = orig - h;
        let down = energy(&probe)?.value;
        probe.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[idx];
        worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::warp;
    use rand::Rng;

    fn noise(domain: &GridDomain, seed: u64) -> ScalarGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarGrid::from_fn(domain.clone(), |_| rng.gen::<f64>())
    }

    fn rotation(domain: &GridDomain, eps: f64) -> DisplacementField {
        DisplacementField::from_fn(domain.clone(), |c| {
            [-eps * c[1] as f64, eps * c[0] as f64, 0.0]
        })
    }

    /// Direct per-window evaluation of the squared correlation, with the same
    /// guard convention; independent of the box-filter path.
    fn ncc_oracle(a: &ScalarGrid, b: &ScalarGrid, window: usize) -> f64 {
        let d = a.domain();
        let r = window as isize / 2;
        let dims = d.dims3();
        let mut total = 0.0;
        for c in d.iter_coords() {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let zr = if d.ndim() == 3 { r } else { 0 };
            for dz in -zr..=zr {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let p = [c[0] as isize + dx, c[1] as isize + dy, c[2] as isize + dz];
                        if (0..3).all(|k| p[k] >= 0 && (p[k] as usize) < dims[k]) {
                            let q = [p[0] as usize, p[1] as usize, p[2] as usize];
                            xs.push(a.get(q));
                            ys.push(b.get(q));
                        }
                    }
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
            if vx * vy > NCC_VARIANCE_GUARD {
                total += cov * cov / (vx * vy);
            }
        }
        total / d.len() as f64
    }

    #[test]
    fn ncc_matches_direct_window_oracle() {
        let d = GridDomain::with_unit_spacing(&[11, 9]).unwrap();
        let a = noise(&d, 1);
        let b = noise(&d, 2);
        let v = ncc_local(&a, &b, 5).unwrap().value;
        assert!((v - ncc_oracle(&a, &b, 5)).abs() < 1e-12);
        let d3 = GridDomain::with_unit_spacing(&[6, 5, 7]).unwrap();
        let a = noise(&d3, 3);
        let b = noise(&d3, 4);
        let v = ncc_local(&a, &b, 3).unwrap().value;
        assert!((v - ncc_oracle(&a, &b, 3)).abs() < 1e-12);
    }

    #[test]
    fn ncc_identical_images_is_one() {
        let d = GridDomain::with_unit_spacing(&[20, 20]).unwrap();
        let a = noise(&d, 5);
        let v = ncc_local(&a, &a, 9).unwrap();
        assert!((v.value - 1.0).abs() < 1e-9);
        assert!(v.gradient.values().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ncc_invariant_to_affine_intensity() {
        let d = GridDomain::with_unit_spacing(&[16, 14]).unwrap();
        let a = noise(&d, 6);
        let b = a.map(|v| 2.0 * v + 5.0).unwrap();
        assert!((ncc_local(&a, &b, 9).unwrap().value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ncc_constant_image_is_zero() {
        let d = GridDomain::with_unit_spacing(&[12, 12]).unwrap();
        let a = noise(&d, 7);
        let flat = ScalarGrid::filled(d, 0.3);
        let v = ncc_local(&a, &flat, 5).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(ncc_oracle(&a, &flat, 5), 0.0);
    }

    #[test]
    fn ncc_window_validation() {
        let d = GridDomain::with_unit_spacing(&[12, 8]).unwrap();
        let a = noise(&d, 8);
        for bad in [1, 4, 9, 11] {
            assert!(
                matches!(ncc_local(&a, &a, bad), Err(Error::Param(_))),
                "window {bad}"
            );
        }
        assert!(ncc_local(&a, &a, 7).is_ok());
    }

    #[test]
    fn ncc_gradient_wrt_intensities() {
        let d = GridDomain::with_unit_spacing(&[10, 9]).unwrap();
        let a = noise(&d, 9);
        let b = noise(&d, 10);
        let g = ncc_local(&a, &b, 5).unwrap().gradient;
        let h = 1e-6;
        for k in [0, 17, 44, 89] {
            let mut up = b.values().to_vec();
            up[k] += h;
            let mut dn = b.values().to_vec();
            dn[k] -= h;
            let fu = ncc_local(&a, &ScalarGrid::new(d.clone(), up).unwrap(), 5)
                .unwrap()
                .value;
            let fd = ncc_local(&a, &ScalarGrid::new(d.clone(), dn).unwrap(), 5)
                .unwrap()
                .value;
            let num = (fu - fd) / (2.0 * h);
            let an = g.values()[k];
            assert!(
                (an - num).abs() <= 1e-6 * an.abs().max(1e-3),
                "voxel {k}: {an} vs {num}"
            );
        }
    }

    #[test]
    fn diffusion_of_rotation() {
        let d = GridDomain::with_unit_spacing(&[8, 8]).unwrap();
        let dens = diffusion_density(&rotation(&d, 0.1));
        for v in dens.interior_values() {
            assert!((v - 0.02).abs() < 1e-15);
        }
        assert_eq!(diffusion_energy(&DisplacementField::zeros(d)).value, 0.0);
    }

    #[test]
    fn elastic_of_rotation_vanishes_in_interior() {
        let d = GridDomain::with_unit_spacing(&[8, 8]).unwrap();
        let dens = elastic_density(
            &rotation(&d, 0.1),
            RawElasticity {
                lambda: 1.0,
                mu: 1.0,
            },
        );
        for v in dens.interior_values() {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn elastic_of_dilation() {
        let d = GridDomain::with_unit_spacing(&[6, 6, 6]).unwrap();
        let c = 0.1;
        let u =
            DisplacementField::from_fn(d, |p| [c * p[0] as f64, c * p[1] as f64, c * p[2] as f64]);
        let dens = elastic_density(
            &u,
            RawElasticity {
                lambda: 1.0,
                mu: 1.0,
            },
        );
        for v in dens.interior_values() {
            assert!((v - 0.075).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn energies_ignore_translation() {
        let d = GridDomain::with_unit_spacing(&[5, 6, 4]).unwrap();
        let u = DisplacementField::from_fn(d, |_| [1.5, -2.0, 0.25]);
        assert_eq!(diffusion_energy(&u).value, 0.0);
        assert_eq!(
            elastic_energy(
                &u,
                RawElasticity {
                    lambda: 2.0,
                    mu: 3.0
                }
            )
            .value,
            0.0
        );
    }

    #[test]
    fn zero_field_gradients_are_exactly_zero() {
        let d = GridDomain::with_unit_spacing(&[6, 6, 6]).unwrap();
        let z = DisplacementField::zeros(d);
        let params = RawElasticity {
            lambda: 0.7,
            mu: 0.3,
        };
        assert!(diffusion_energy(&z)
            .gradient
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 0.0));
        assert!(elastic_energy(&z, params)
            .gradient
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn params_enforce_simplex() {
        assert!(ElasticityParams::new(0.5, 0.5).is_ok());
        assert!(ElasticityParams::new(0.7, 0.3).is_ok());
        assert!(ElasticityParams::new(0.6, 0.5).is_err());
        assert!(ElasticityParams::new(-0.1, 0.5).is_err());
        assert!(ElasticityParams::new(f64::NAN, 0.0).is_err());
        assert_eq!(
            ElasticityParams::new(0.7, 0.3).unwrap().similarity_weight(),
            0.0
        );
        assert!(RawElasticity::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn preset_ratios() {
        let r = |p: TissuePreset| p.params().ratio().unwrap();
        assert!((r(TissuePreset::BrainKumaresan) - 24.035).abs() < 1e-3);
        assert!((r(TissuePreset::LungLaiFook) - 5.667).abs() < 1e-3);
        assert!((r(TissuePreset::LungBrock) - 9.017).abs() < 1e-3);
        // 12483.3 / 25 = 499.332; the commonly quoted 499.322 is a transposition.
        assert!((r(TissuePreset::BrainHartmann) - 499.332).abs() < 1e-9);
        let brock = TissuePreset::LungBrock.params().scaled(0.01);
        assert!((brock.lambda - 0.1551).abs() < 1e-12 && (brock.mu - 0.0172).abs() < 1e-12);
        assert_eq!(
            RawElasticity {
                lambda: 1.0,
                mu: 0.0
            }
            .ratio(),
            None
        );
    }

    #[test]
    fn weighted_loss_endpoints() {
        let d = GridDomain::with_unit_spacing(&[16, 16]).unwrap();
        let fixed = noise(&d, 11);
        let moving = noise(&d, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let u = DisplacementField::from_fn(d.clone(), |_| {
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0]
        });
        let p = RawElasticity {
            lambda: 0.4,
            mu: 0.9,
        };
        let at0 = composite_loss_eq4(&fixed, &moving, &u, 0.0, p)
            .unwrap()
            .value;
        let ncc = ncc_local(&fixed, &warp(&moving, &u).unwrap(), 9)
            .unwrap()
            .value;
        assert!((at0 - (1.0 - ncc)).abs() < 1e-14);
        let at1 = composite_loss_eq4(&fixed, &moving, &u, 1.0, p)
            .unwrap()
            .value;
        assert!((at1 - elastic_energy(&u, p).value).abs() < 1e-14);
        assert!(composite_loss_eq4(&fixed, &moving, &u, 1.2, p).is_err());
        assert!(composite_loss_eq4(&fixed, &moving, &u, -0.1, p).is_err());
    }

    #[test]
    fn absorbed_loss_identity_and_edge() {
        let d = GridDomain::with_unit_spacing(&[16, 16]).unwrap();
        let img = noise(&d, 14);
        let zero = DisplacementField::zeros(d.clone());
        let none = ElasticityParams::new(0.0, 0.0).unwrap();
        assert!(
            composite_loss_eq5(&img, &img, &zero, none)
                .unwrap()
                .value
                .abs()
                < 1e-9
        );

        let other = noise(&d, 15);
        let u = rotation(&d, 0.05);
        let edge = ElasticityParams::new(0.25, 0.75).unwrap();
        let v = composite_loss_eq5(&img, &other, &u, edge).unwrap().value;
        assert_eq!(v, elastic_energy(&u, edge.as_raw()).value);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let d = GridDomain::with_unit_spacing(&[4, 4]).unwrap();
        let z = DisplacementField::zeros(d);
        assert!(grad_check(|f| Ok(diffusion_energy(f)), &z, 0.0, 4, 0).is_err());
    }
}
