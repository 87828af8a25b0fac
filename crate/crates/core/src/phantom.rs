//! Synthetic image pairs with known ground truth.
//!
//! The moving image is drawn analytically; the fixed image is the moving
//! image resampled through the ground-truth field, so `warp(moving, truth)`
//! reproduces `fixed` exactly and the truth is the field a registration
//! should recover. Keypoints are chosen in the fixed frame and mapped through
//! the analytic field to obtain their moving-frame partners.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{jacobian_determinant, warp, DisplacementField, GridDomain, ScalarGrid};
use crate::metrics::{warp_labels, KeypointSet, LabelGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Pattern {
    /// Random gaussian blobs over a faint sinusoidal texture.
    GaussianBlobs { count: usize },
    /// Smooth sinusoidal checkerboard with the given period in voxels.
    CheckerSmooth { period: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldFamily {
    /// `u(x) = L (x − center) + t` with `center` the domain midpoint.
    Affine {
        linear: [[f64; 3]; 3],
        translation: [f64; 3],
    },
    /// `u(x) = amplitude · dir · exp(−|x − c|² / 2σ²)`, voxel units.
    GaussianBump {
        amplitude: f64,
        sigma: f64,
        /// Defaults to the domain midpoint.
        center: Option<[f64; 3]>,
        direction: [f64; 3],
    },
    /// Rigid in-plane rotation about the domain midpoint, `R(θ)(x − c) − (x − c)`.
    Rotation { angle_deg: f64 },
}

impl FieldFamily {
    pub fn identity() -> Self {
        FieldFamily::Affine {
            linear: [[0.0; 3]; 3],
            translation: [0.0; 3],
        }
    }

    pub fn bump(amplitude: f64, sigma: f64) -> Self {
        FieldFamily::GaussianBump {
            amplitude,
            sigma,
            center: None,
            direction: [1.0, 1.0, 0.0],
        }
    }

    fn eval(&self, p: [f64; 3], mid: [f64; 3], nd: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        match self {
            FieldFamily::Affine {
                linear,
                translation,
            } => {
                for i in 0..nd {
                    out[i] = translation[i]
                        + (0..nd).map(|j| linear[i][j] * (p[j] - mid[j])).sum::<f64>();
                }
            }
            FieldFamily::GaussianBump {
                amplitude,
                sigma,
                center,
                direction,
            } => {
                let c = center.unwrap_or(mid);
                let norm = (0..nd).map(|i| direction[i].powi(2)).sum::<f64>().sqrt();
                let r2: f64 = (0..nd).map(|i| (p[i] - c[i]).powi(2)).sum();
                let w = amplitude * (-r2 / (2.0 * sigma * sigma)).exp();
                if norm > 0.0 {
                    for i in 0..nd {
                        out[i] = w * direction[i] / norm;
                    }
                }
            }
            FieldFamily::Rotation { angle_deg } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                let dx = p[0] - mid[0];
                let dy = p[1] - mid[1];
                out[0] = c * dx - s * dy - dx;
                out[1] = s * dx + c * dy - dy;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub pattern: Pattern,
    pub field: FieldFamily,
    pub seed: u64,
    /// Skip the `min det > 0` check on the ground-truth field.
    pub allow_folding: bool,
}

impl PhantomSpec {
    pub fn new_2d(n: usize, field: FieldFamily, seed: u64) -> Self {
        Self {
            dims: vec![n, n],
            spacing: vec![1.0, 1.0],
            pattern: Pattern::GaussianBlobs { count: 8 },
            field,
            seed,
            allow_folding: false,
        }
    }
}

/// A generated case with its ground truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub fixed: ScalarGrid,
    pub moving: ScalarGrid,
    pub true_field: DisplacementField,
    pub fixed_labels: LabelGrid,
    pub moving_labels: LabelGrid,
    pub fixed_keypoints: KeypointSet,
    pub moving_keypoints: KeypointSet,
}

impl Phantom {
    pub fn eval_data(&self) -> crate::metrics::EvalData {
        crate::metrics::EvalData {
            fixed_labels: Some(self.fixed_labels.clone()),
            moving_labels: Some(self.moving_labels.clone()),
            fixed_keypoints: Some(self.fixed_keypoints.clone()),
            moving_keypoints: Some(self.moving_keypoints.clone()),
        }
    }
}

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

/// Analytic moving image: value, label and feature points.
struct Scene {
    blobs: Vec<Blob>,
    texture: [f64; 3],
    pattern: Pattern,
    nd: usize,
}

impl Scene {
    fn value(&self, p: [f64; 3]) -> f64 {
        match &self.pattern {
            Pattern::GaussianBlobs { .. } => {
                let t = &self.texture;
                let mut v = 0.1
                    + 0.04 * (p[0] / t[0]).sin() * (p[1] / t[1]).cos()
                    + if self.nd == 3 {
                        0.02 * (p[2] / t[2]).sin()
                    } else {
                        0.0
                    };
                for b in &self.blobs {
                    let r2: f64 = (0..self.nd).map(|i| (p[i] - b.center[i]).powi(2)).sum();
                    v += b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                v
            }
            Pattern::CheckerSmooth { period } => {
                let k = std::f64::consts::PI / period;
                let mut s = (k * p[0]).sin() * (k * p[1]).sin();
                if self.nd == 3 {
                    s *= (k * p[2]).sin();
                }
                0.5 + 0.5 * s
            }
        }
    }

    fn label(&self, p: [f64; 3]) -> u32 {
        match &self.pattern {
            Pattern::GaussianBlobs { .. } => {
                let mut best = (0u32, 0.0f64);
                for (k, b) in self.blobs.iter().enumerate() {
                    let r2: f64 = (0..self.nd).map(|i| (p[i] - b.center[i]).powi(2)).sum();
                    let r = r2.sqrt() / b.sigma;
                    if r <= 1.5 {
                        let w = b.amplitude * (-0.5 * r * r).exp();
                        if w > best.1 {
                            best = (k as u32 + 1, w);
                        }
                    }
                }
                best.0
            }
            Pattern::CheckerSmooth { .. } => {
                if self.value(p) >= 0.5 {
                    1
                } else {
                    2
                }
            }
        }
    }

    fn features(&self, dims: [usize; 3]) -> Vec<[f64; 3]> {
        match &self.pattern {
            Pattern::GaussianBlobs { .. } => self.blobs.iter().map(|b| b.center).collect(),
            Pattern::CheckerSmooth { period } => {
                let cells = |n: usize| -> Vec<f64> {
                    let mut v = Vec::new();
                    let mut x = period / 2.0;
                    while x < (n - 1) as f64 {
                        v.push(x);
                        x += period;
                    }
                    v
                };
                let (xs, ys) = (cells(dims[0]), cells(dims[1]));
                let zs = if self.nd == 3 {
                    cells(dims[2])
                } else {
                    vec![0.0]
                };
                let mut out = Vec::new();
                for &z in &zs {
                    for &y in &ys {
                        for &x in &xs {
                            out.push([x, y, z]);
                        }
                    }
                }
                out
            }
        }
    }
}

fn build_scene(spec: &PhantomSpec, domain: &GridDomain, rng: &mut ChaCha8Rng) -> Scene {
    let nd = domain.ndim();
    let dims = domain.dims3();
    let min_dim = *domain.dims().iter().min().expect("dims") as f64;
    let texture = [
        rng.gen_range(3.0..6.0),
        rng.gen_range(3.0..6.0),
        rng.gen_range(3.0..6.0),
    ];
    let blobs = match spec.pattern {
        Pattern::GaussianBlobs { count } => (0..count)
            .map(|_| {
                let mut center = [0.0; 3];
                for a in 0..nd {
                    let n = (dims[a] - 1) as f64;
                    center[a] = rng.gen_range(0.2 * n..0.8 * n);
                }
                Blob {
                    center,
                    sigma: rng.gen_range(0.05..0.09) * min_dim,
                    amplitude: rng.gen_range(0.5..1.0),
                }
            })
            .collect(),
        Pattern::CheckerSmooth { .. } => Vec::new(),
    };
    Scene {
        blobs,
        texture,
        pattern: spec.pattern.clone(),
        nd,
    }
}

fn validate_spec(spec: &PhantomSpec) -> Result<()> {
    match spec.pattern {
        Pattern::GaussianBlobs { count: 0 } => {
            return Err(Error::Param("phantom needs at least one blob".into()))
        }
        Pattern::CheckerSmooth { period } if !(period > 1.0) => {
            return Err(Error::Param(format!(
                "checker period must exceed 1, got {period}"
            )))
        }
        _ => {}
    }
    match spec.field {
        FieldFamily::GaussianBump {
            sigma, amplitude, ..
        } if !(sigma > 0.0 && amplitude.is_finite()) => Err(Error::Param(
            "bump needs σ > 0 and a finite amplitude".into(),
        )),
        _ => Ok(()),
    }
}

/// Generate a phantom case. Deterministic in `spec.seed`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    validate_spec(spec)?;
    let domain = GridDomain::new(&spec.dims, &spec.spacing)?;
    let nd = domain.ndim();
    let dims = domain.dims3();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = build_scene(spec, &domain, &mut rng);

    let mut mid = [0.0; 3];
    for a in 0..nd {
        mid[a] = (dims[a] - 1) as f64 / 2.0;
    }
    let vox = |c: [usize; 3]| [c[0] as f64, c[1] as f64, c[2] as f64];
    let truth = |p: [f64; 3]| spec.field.eval(p, mid, nd);

    let true_field = DisplacementField::from_fn(domain.clone(), |c| truth(vox(c)));
    if !spec.allow_folding {
        let det = jacobian_determinant(&true_field);
        let min = det
            .interior_values()
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if !(min > 0.0) {
            return Err(Error::Param(format!(
                "ground-truth field folds (min det {min:.4}); set allow_folding to permit it"
            )));
        }
    }

    let moving = ScalarGrid::from_fn(domain.clone(), |c| scene.value(vox(c)));
    let moving_labels = LabelGrid::from_fn(domain.clone(), |c| scene.label(vox(c)));
    let fixed = warp(&moving, &true_field)?;
    let fixed_labels = warp_labels(&moving_labels, &true_field)?;

    // Fixed keypoint p solves p + g(p) = m for each moving-frame feature m;
    // its partner is then p + g(p) evaluated exactly.
    let h = domain.spacing3();
    let upper: Vec<f64> = (0..3).map(|a| (dims[a] - 1) as f64).collect();
    let mut fixed_pts = Vec::new();
    let mut moving_pts = Vec::new();
    for m in scene.features(dims) {
        let mut p = m;
        let mut converged = false;
        for _ in 0..200 {
            let g = truth(p);
            let mut next = m;
            for a in 0..nd {
                next[a] = m[a] - g[a];
            }
            let delta = (0..nd).map(|a| (next[a] - p[a]).abs()).fold(0.0, f64::max);
            p = next;
            if delta < 1e-12 {
                converged = true;
                break;
            }
        }
        if !converged || (0..nd).any(|a| p[a] < 0.0 || p[a] > upper[a]) {
            continue;
        }
        let g = truth(p);
        let mut pf = [0.0; 3];
        let mut pm = [0.0; 3];
        for a in 0..nd {
            pf[a] = p[a] * h[a];
            pm[a] = (p[a] + g[a]) * h[a];
        }
        fixed_pts.push(pf);
        moving_pts.push(pm);
    }
    if fixed_pts.is_empty() {
        return Err(Error::Param(
            "no keypoint could be placed inside the domain".into(),
        ));
    }

    Ok(Phantom {
        fixed,
        moving,
        true_field,
        fixed_labels,
        moving_labels,
        fixed_keypoints: KeypointSet::new(fixed_pts)?,
        moving_keypoints: KeypointSet::new(moving_pts)?,
    })
}
