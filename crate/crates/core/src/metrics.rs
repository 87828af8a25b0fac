//! Registration quality metrics: Dice overlap, target registration error and
//! the fraction of folded voxels.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{jacobian_determinant, sample_field, DisplacementField, GridDomain};

/// Integer label per voxel, 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    domain: GridDomain,
    labels: Vec<u32>,
}

impl LabelGrid {
    pub fn new(domain: GridDomain, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != domain.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} voxels",
                labels.len(),
                domain.len()
            )));
        }
        Ok(Self { domain, labels })
    }

    pub fn from_fn(domain: GridDomain, f: impl FnMut([usize; 3]) -> u32) -> Self {
        let labels = domain.iter_coords().map(f).collect();
        Self { domain, labels }
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, c: [usize; 3]) -> u32 {
        self.labels[self.domain.index(c)]
    }

    /// Distinct non-zero labels, ascending.
    pub fn foreground_labels(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }
}

/// `2|A∩B| / (|A|+|B|)` for one label value. Both empty gives 1.
pub fn dice(a: &LabelGrid, b: &LabelGrid, label: u32) -> Result<f64> {
    if a.domain.dims() != b.domain.dims() {
        return Err(Error::Shape(format!(
            "dice: dims {:?} vs {:?}",
            a.domain.dims(),
            b.domain.dims()
        )));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Nearest-neighbor resampling of labels at `x + u(x)`. Positions are
/// rounded half away from zero, then clamped to the lattice.
pub fn warp_labels(labels: &LabelGrid, field: &DisplacementField) -> Result<LabelGrid> {
    labels.domain.ensure_same(field.domain(), "warp_labels")?;
    let domain = &labels.domain;
    let dims = domain.dims3();
    let nd = domain.ndim();
    let out = domain
        .iter_coords()
        .map(|c| {
            let u = field.at(c);
            let mut q = [0usize; 3];
            for a in 0..nd {
                let p = (c[a] as f64 + u[a]).round();
                q[a] = p.clamp(0.0, (dims[a] - 1) as f64) as usize;
            }
            labels.get(q)
        })
        .collect();
    Ok(LabelGrid {
        domain: domain.clone(),
        labels: out,
    })
}

/// Landmarks in physical (mm) coordinates; voxel `(0,0,0)` sits at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    points: Vec<[f64; 3]>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Param("keypoint set is empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Param("keypoint coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every point must lie within the physical extent of `domain`.
    pub fn check_in_domain(&self, domain: &GridDomain) -> Result<()> {
        let ext = domain.extent_mm();
        let tol = 1e-9;
        for (k, p) in self.points.iter().enumerate() {
            for a in 0..3 {
                let limit = if a < domain.ndim() { ext[a] } else { 0.0 };
                if p[a] < -tol || p[a] > limit + tol {
                    return Err(Error::Param(format!(
                        "keypoint {k} {p:?} lies outside the domain extent {ext:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean and (population) standard deviation, in mm, of the distance between
/// fixed keypoints mapped through `x + u(x)` and the moving keypoints.
pub fn tre(
    fixed_pts: &KeypointSet,
    moving_pts: &KeypointSet,
    field: &DisplacementField,
) -> Result<(f64, f64)> {
    if fixed_pts.len() != moving_pts.len() {
        return Err(Error::Param(format!(
            "keypoint count mismatch: {} fixed vs {} moving",
            fixed_pts.len(),
            moving_pts.len()
        )));
    }
    let domain = field.domain();
    fixed_pts.check_in_domain(domain)?;
    let h = domain.spacing3();
    let nd = domain.ndim();
    let dists: Vec<f64> = fixed_pts
        .points
        .iter()
        .zip(&moving_pts.points)
        .map(|(pf, pm)| {
            let mut vox = [0.0; 3];
            for a in 0..nd {
                vox[a] = pf[a] / h[a];
            }
            let u = sample_field(field, vox);
            (0..3)
                .map(|a| {
                    let mapped = if a < nd {
                        (vox[a] + u[a]) * h[a]
                    } else {
                        pf[a]
                    };
                    (mapped - pm[a]).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let n = dists.len() as f64;
    let mean = dists.iter().sum::<f64>() / n;
    let var = dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Fraction of interior voxels (restricted to `mask > 0` when given) whose
/// Jacobian determinant is negative.
pub fn neg_jac_fraction(field: &DisplacementField, mask: Option<&LabelGrid>) -> Result<f64> {
    let domain = field.domain();
    if let Some(m) = mask {
        if m.domain.dims() != domain.dims() {
            return Err(Error::Shape(format!(
                "mask dims {:?} vs field dims {:?}",
                m.domain.dims(),
                domain.dims()
            )));
        }
    }
    let det = jacobian_determinant(field);
    let (mut total, mut negative) = (0usize, 0usize);
    for (i, c) in domain.iter_coords().enumerate() {
        if !domain.is_interior(c) || mask.is_some_and(|m| m.labels[i] == 0) {
            continue;
        }
        total += 1;
        negative += (det.values()[i] < 0.0) as usize;
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(negative as f64 / total as f64)
}

/// Labels and keypoints needed to score a registration.
#[derive(Debug, Clone, Default)]
pub struct EvalData {
    pub fixed_labels: Option<LabelGrid>,
    pub moving_labels: Option<LabelGrid>,
    pub fixed_keypoints: Option<KeypointSet>,
    pub moving_keypoints: Option<KeypointSet>,
}

impl EvalData {
    pub fn has_labels(&self) -> bool {
        self.fixed_labels.is_some() && self.moving_labels.is_some()
    }

    pub fn has_keypoints(&self) -> bool {
        self.fixed_keypoints.is_some() && self.moving_keypoints.is_some()
    }
}

/// Metric triple for one registration (or a mean over several).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice_mean: Option<f64>,
    pub dice_per_label: BTreeMap<u32, f64>,
    pub tre_mean_mm: Option<f64>,
    pub tre_std_mm: Option<f64>,
    pub neg_jac_fraction: f64,
}

impl MetricsReport {
    /// Unweighted mean over reports. Per-label Dice averages over the reports
    /// that contain the label.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Param("cannot average zero reports".into()));
        }
        let avg = |vals: Vec<f64>| -> Option<f64> {
            (vals.len() == reports.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mut per_label: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for r in reports {
            for (&l, &d) in &r.dice_per_label {
                let e = per_label.entry(l).or_insert((0.0, 0));
                e.0 += d;
                e.1 += 1;
            }
        }
        Ok(MetricsReport {
            dice_mean: avg(reports.iter().filter_map(|r| r.dice_mean).collect()),
            dice_per_label: per_label
                .into_iter()
                .map(|(l, (s, n))| (l, s / n as f64))
                .collect(),
            tre_mean_mm: avg(reports.iter().filter_map(|r| r.tre_mean_mm).collect()),
            tre_std_mm: avg(reports.iter().filter_map(|r| r.tre_std_mm).collect()),
            neg_jac_fraction: reports.iter().map(|r| r.neg_jac_fraction).sum::<f64>()
                / reports.len() as f64,
        })
    }
}

/// Score `field` against whatever evaluation data is available.
pub fn evaluate(field: &DisplacementField, data: &EvalData) -> Result<MetricsReport> {
    let mut dice_per_label = BTreeMap::new();
    let mut dice_mean = None;
    if let (Some(fixed), Some(moving)) = (&data.fixed_labels, &data.moving_labels) {
        let warped = warp_labels(moving, field)?;
        let labels: BTreeSet<u32> = fixed
            .foreground_labels()
            .union(&moving.foreground_labels())
            .copied()
            .collect();
        for &l in &labels {
            dice_per_label.insert(l, dice(&warped, fixed, l)?);
        }
        dice_mean = Some(if labels.is_empty() {
            1.0
        } else {
            dice_per_label.values().sum::<f64>() / labels.len() as f64
        });
    }
    let (mut tre_mean_mm, mut tre_std_mm) = (None, None);
    if let (Some(fp), Some(mp)) = (&data.fixed_keypoints, &data.moving_keypoints) {
        let (m, s) = tre(fp, mp, field)?;
        tre_mean_mm = Some(m);
        tre_std_mm = Some(s);
    }
    Ok(MetricsReport {
        dice_mean,
        dice_per_label,
        tre_mean_mm,
        tre_std_mm,
        neg_jac_fraction: neg_jac_fraction(field, None)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dom(d: &[usize]) -> GridDomain {
        GridDomain::with_unit_spacing(d).unwrap()
    }

    #[test]
    fn dice_counts() {
        let d = dom(&[4, 4]);
        // A: first 8 voxels; B: voxels 4..12 -> overlap 4
        let a = LabelGrid::from_fn(d.clone(), |c| (d.index(c) < 8) as u32);
        let b = LabelGrid::from_fn(d.clone(), |c| (4..12).contains(&d.index(c)) as u32);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let c = LabelGrid::from_fn(d.clone(), |c| (d.index(c) >= 8) as u32);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, 7).unwrap(), 1.0);
        let bg = LabelGrid::from_fn(d.clone(), |_| 0);
        assert_eq!(dice(&a, &bg, 1).unwrap(), 0.0);
        assert!(dice(&a, &LabelGrid::from_fn(dom(&[4, 5]), |_| 0), 1).is_err());
    }

    #[test]
    fn label_warp_shifts_and_rounds() {
        let d = dom(&[5, 1]);
        let l = LabelGrid::new(d.clone(), vec![1, 2, 3, 4, 5]).unwrap();
        let zero = DisplacementField::zeros(d.clone());
        assert_eq!(warp_labels(&l, &zero).unwrap(), l);
        let one = DisplacementField::from_fn(d.clone(), |_| [1.0, 0.0, 0.0]);
        assert_eq!(warp_labels(&l, &one).unwrap().labels(), &[2, 3, 4, 5, 5]);
        // x + 0.5 rounds away from zero: 0.5 -> 1, 1.5 -> 2, ...
        let half = DisplacementField::from_fn(d.clone(), |_| [0.5, 0.0, 0.0]);
        assert_eq!(warp_labels(&l, &half).unwrap().labels(), &[2, 3, 4, 5, 5]);
        // x - 0.5: -0.5 -> -1 (clamped to 0), 0.5 -> 1, 1.5 -> 2, ...
        let neg = DisplacementField::from_fn(d, |_| [-0.5, 0.0, 0.0]);
        assert_eq!(warp_labels(&l, &neg).unwrap().labels(), &[1, 2, 3, 4, 5]);
    }

    #[test]
    fn tre_examples() {
        let d = GridDomain::new(&[10, 10, 10], &[1.5, 1.5, 1.5]).unwrap();
        let fixed = KeypointSet::new(vec![[3.0, 3.0, 3.0], [6.0, 1.5, 9.0]]).unwrap();
        let zero = DisplacementField::zeros(d.clone());
        assert_eq!(tre(&fixed, &fixed, &zero).unwrap(), (0.0, 0.0));

        let shift = |v: [f64; 3]| {
            KeypointSet::new(
                fixed
                    .points()
                    .iter()
                    .map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
                    .collect(),
            )
            .unwrap()
        };
        let (m, s) = tre(&fixed, &shift([3.0, 4.0, 0.0]), &zero).unwrap();
        assert!((m - 5.0).abs() < 1e-12 && s.abs() < 1e-12);

        let u = DisplacementField::from_fn(d, |_| [3.0 / 1.5, 0.0, 0.0]);
        let (m, _) = tre(&fixed, &shift([3.0, 0.0, 0.0]), &u).unwrap();
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn tre_errors() {
        let d = dom(&[4, 4]);
        let zero = DisplacementField::zeros(d);
        let a = KeypointSet::new(vec![[1.0, 1.0, 0.0]]).unwrap();
        let b = KeypointSet::new(vec![[1.0, 1.0, 0.0], [2.0, 2.0, 0.0]]).unwrap();
        assert!(tre(&a, &b, &zero).is_err());
        let out = KeypointSet::new(vec![[5.0, 1.0, 0.0]]).unwrap();
        assert!(tre(&out, &out, &zero).is_err());
        assert!(KeypointSet::new(vec![]).is_err());
    }

    #[test]
    fn folding_fraction() {
        let d = dom(&[6, 6, 6]);
        assert_eq!(
            neg_jac_fraction(&DisplacementField::zeros(d.clone()), None).unwrap(),
            0.0
        );
        let fold = DisplacementField::from_fn(d.clone(), |c| [-2.0 * c[0] as f64, 0.0, 0.0]);
        assert_eq!(neg_jac_fraction(&fold, None).unwrap(), 1.0);
        let mask = LabelGrid::from_fn(d.clone(), |c| (c[2] < 2) as u32);
        assert_eq!(neg_jac_fraction(&fold, Some(&mask)).unwrap(), 1.0);
        assert!(neg_jac_fraction(&fold, Some(&LabelGrid::from_fn(dom(&[6, 6]), |_| 1))).is_err());
    }

    #[test]
    fn folding_in_one_octant() {
        // Fold along x only inside the octant x,y,z < 4 of an 8³ grid. The
        // displacement -2x is applied for x ≤ 4 so differences inside the
        // octant see the fold, and is continued as a constant beyond.
        let d = dom(&[8, 8, 8]);
        let u = DisplacementField::from_fn(d.clone(), |c| {
            if c[1] < 4 && c[2] < 4 {
                [-2.0 * (c[0].min(4)) as f64, 0.0, 0.0]
            } else {
                [0.0, 0.0, 0.0]
            }
        });
        // oracle: count interior voxels with det < 0 directly from the 3×3 matrices
        let mut neg = 0;
        let mut total = 0;
        for c in d.iter_coords().filter(|c| d.is_interior(*c)) {
            total += 1;
            let g = |i: usize, j: usize| {
                let mut n = c;
                n[j] += 1;
                u.at(n)[i] - u.at(c)[i] + if i == j { 1.0 } else { 0.0 }
            };
            let det = g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1))
                - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
                + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0));
            neg += (det < 0.0) as usize;
        }
        assert_eq!(total, 343);
        assert_eq!(neg, 64);
        assert_eq!(
            neg_jac_fraction(&u, None).unwrap(),
            neg as f64 / total as f64
        );
    }

    #[test]
    fn report_mean() {
        let r = |d: f64, t: f64, n: f64| MetricsReport {
            dice_mean: Some(d),
            dice_per_label: BTreeMap::from([(1, d)]),
            tre_mean_mm: Some(t),
            tre_std_mm: Some(0.0),
            neg_jac_fraction: n,
        };
        let m = MetricsReport::mean(&[r(1.0, 2.0, 0.0), r(0.5, 4.0, 0.2)]).unwrap();
        assert_eq!(m.dice_mean, Some(0.75));
        assert_eq!(m.tre_mean_mm, Some(3.0));
        assert!((m.neg_jac_fraction - 0.1).abs() < 1e-15);
        assert!(MetricsReport::mean(&[]).is_err());
    }
}
