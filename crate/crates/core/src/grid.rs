//! Dense voxel containers and the differential operators built on them.
//!
//! Storage is a single contiguous buffer with x varying fastest, then y,
//! then z. 2D grids are stored as 3D grids with a z extent of one, so every
//! loop in the crate can use the same `[x, y, z]` index arithmetic.
//!
//! Displacements are kept in voxel units. Forward differences divide by the
//! physical spacing; the Jacobian determinant does not (it stays scale-free).

use crate::error::{Error, Result};

/// Shape and physical spacing shared by every grid combined in an operation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDomain {
    dims: [usize; 3],
    spacing: [f64; 3],
    ndim: usize,
}

impl GridDomain {
    /// `dims` and `spacing` must both have length 2 or 3.
    pub fn new(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        let ndim = dims.len();
        if !(ndim == 2 || ndim == 3) {
            return Err(Error::Param(format!(
                "grids must be 2D or 3D, got {ndim} axes"
            )));
        }
        if spacing.len() != ndim {
            return Err(Error::Param(format!(
                "{ndim} dims but {} spacing entries",
                spacing.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Param(format!("zero-length axis in dims {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Param(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        let mut d = [1usize; 3];
        let mut s = [1.0f64; 3];
        d[..ndim].copy_from_slice(dims);
        s[..ndim].copy_from_slice(spacing);
        Ok(Self {
            dims: d,
            spacing: s,
            ndim,
        })
    }

    /// Unit-spacing domain.
    pub fn with_unit_spacing(dims: &[usize]) -> Result<Self> {
        Self::new(dims, &vec![1.0; dims.len()])
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.ndim]
    }

    /// Dims padded to three axes (z = 1 for 2D).
    pub fn dims3(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing3(&self) -> [f64; 3] {
        self.spacing
    }

    /// Voxel count.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// True when the voxel is not on the last slice of any active axis, i.e.
    /// every forward difference at this voxel uses a real neighbor.
    #[inline]
    pub fn is_interior(&self, c: [usize; 3]) -> bool {
        (0..self.ndim).all(|a| c[a] + 1 < self.dims[a])
    }

    /// Physical extent (mm) of the voxel-center lattice along each axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        let mut e = [0.0; 3];
        for a in 0..3 {
            e[a] = (self.dims[a] - 1) as f64 * self.spacing[a];
        }
        e
    }

    /// Same lattice, different spacing.
    pub fn with_spacing(&self, spacing: &[f64]) -> Result<Self> {
        Self::new(self.dims(), spacing)
    }

    pub(crate) fn ensure_same(&self, other: &GridDomain, what: &str) -> Result<()> {
        if self.dims != other.dims || self.ndim != other.ndim {
            return Err(Error::Shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        if self.spacing != other.spacing {
            return Err(Error::Shape(format!(
                "{what}: spacing {:?} vs {:?}",
                self.spacing(),
                other.spacing()
            )));
        }
        Ok(())
    }

    /// Iterate voxel coordinates in storage order.
    pub fn iter_coords(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| [x, y, z])))
    }
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Param(format!(
            "{what}: non-finite value at index {i}"
        )));
    }
    Ok(())
}

/// A scalar voxel array: images, masks, determinant maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    domain: GridDomain,
    values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(domain: GridDomain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::Shape(format!(
                "{} values for {} voxels",
                values.len(),
                domain.len()
            )));
        }
        ensure_finite(&values, "scalar grid")?;
        Ok(Self { domain, values })
    }

    pub fn zeros(domain: GridDomain) -> Self {
        Self::filled(domain, 0.0)
    }

    pub fn filled(domain: GridDomain, value: f64) -> Self {
        assert!(value.is_finite());
        let n = domain.len();
        Self {
            domain,
            values: vec![value; n],
        }
    }

    /// Build from a function of voxel coordinates. Panics on non-finite output.
    pub fn from_fn(domain: GridDomain, mut f: impl FnMut([usize; 3]) -> f64) -> Self {
        let values: Vec<f64> = domain.iter_coords().map(&mut f).collect();
        assert!(
            values.iter().all(|v| v.is_finite()),
            "from_fn produced a non-finite value"
        );
        Self { domain, values }
    }

    pub(crate) fn from_raw(domain: GridDomain, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), domain.len());
        Self { domain, values }
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, c: [usize; 3]) -> f64 {
        self.values[self.domain.index(c)]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        Self::new(
            self.domain.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Values at interior voxels only (see [`GridDomain::is_interior`]).
    pub fn interior_values(&self) -> Vec<f64> {
        self.domain
            .iter_coords()
            .zip(&self.values)
            .filter(|(c, _)| self.domain.is_interior(*c))
            .map(|(_, &v)| v)
            .collect()
    }
}

/// Per-voxel displacement vectors in voxel units. Components are stored
/// planar: all x-components, then all y-components, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    domain: GridDomain,
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn new(domain: GridDomain, data: Vec<f64>) -> Result<Self> {
        let expected = domain.len() * domain.ndim();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} displacement components for {} expected",
                data.len(),
                expected
            )));
        }
        ensure_finite(&data, "displacement field")?;
        Ok(Self { domain, data })
    }

    pub fn zeros(domain: GridDomain) -> Self {
        let n = domain.len() * domain.ndim();
        Self {
            domain,
            data: vec![0.0; n],
        }
    }

    /// Build from a function returning the displacement at each voxel; only
    /// the first `ndim` entries of the returned array are used.
    pub fn from_fn(domain: GridDomain, mut f: impl FnMut([usize; 3]) -> [f64; 3]) -> Self {
        let n = domain.len();
        let nd = domain.ndim();
        let mut data = vec![0.0; n * nd];
        for (i, c) in domain.iter_coords().enumerate() {
            let v = f(c);
            for j in 0..nd {
                assert!(
                    v[j].is_finite(),
                    "from_fn produced a non-finite displacement"
                );
                data[j * n + i] = v[j];
            }
        }
        Self { domain, data }
    }

    pub(crate) fn from_raw(domain: GridDomain, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), domain.len() * domain.ndim());
        Self { domain, data }
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    pub fn ndim(&self) -> usize {
        self.domain.ndim()
    }

    /// All components, planar.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, j: usize) -> &[f64] {
        let n = self.domain.len();
        &self.data[j * n..(j + 1) * n]
    }

    pub(crate) fn component_mut(&mut self, j: usize) -> &mut [f64] {
        let n = self.domain.len();
        &mut self.data[j * n..(j + 1) * n]
    }

    /// Displacement at a voxel, zero-padded to three components.
    pub fn at(&self, c: [usize; 3]) -> [f64; 3] {
        let i = self.domain.index(c);
        let n = self.domain.len();
        let mut v = [0.0; 3];
        for (j, vj) in v.iter_mut().enumerate().take(self.ndim()) {
            *vj = self.data[j * n + i];
        }
        v
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_raw(
            self.domain.clone(),
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    /// `a·self + b·other`.
    pub fn lin_comb(&self, a: f64, other: &DisplacementField, b: f64) -> Result<Self> {
        self.domain.ensure_same(&other.domain, "lin_comb")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Self::new(self.domain.clone(), data)
    }

    /// Mean Euclidean length of the displacement vectors, voxel units.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.domain.len();
        let nd = self.ndim();
        let total: f64 = (0..n)
            .map(|i| {
                (0..nd)
                    .map(|j| self.data[j * n + i].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total / n as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Per-axis linear interpolation stencil: lower index, upper index, fraction,
/// and whether the sample lies inside the lattice (derivative defined).
#[derive(Clone, Copy)]
struct AxisStencil {
    lo: usize,
    hi: usize,
    t: f64,
    inside: bool,
}

#[inline]
fn axis_stencil(p: f64, n: usize) -> AxisStencil {
    if n == 1 {
        return AxisStencil {
            lo: 0,
            hi: 0,
            t: 0.0,
            inside: false,
        };
    }
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&p);
    let q = p.clamp(0.0, max);
    let lo = (q.floor() as usize).min(n - 2);
    AxisStencil {
        lo,
        hi: lo + 1,
        t: q - lo as f64,
        inside,
    }
}

/// Multilinear sample of `values` at continuous voxel position `p`, with
/// coordinates clamped to the lattice. Optionally returns the spatial
/// derivative of the interpolant (zero along clamped axes).
#[inline]
fn sample(values: &[f64], domain: &GridDomain, p: [f64; 3], want_grad: bool) -> (f64, [f64; 3]) {
    let dims = domain.dims3();
    let s = [
        axis_stencil(p[0], dims[0]),
        axis_stencil(p[1], dims[1]),
        axis_stencil(p[2], dims[2]),
    ];
    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let at = |x: usize, y: usize, z: usize| values[x + nx * y + nxy * z];

    if domain.ndim() == 2 {
        let (x0, x1, tx) = (s[0].lo, s[0].hi, s[0].t);
        let (y0, y1, ty) = (s[1].lo, s[1].hi, s[1].t);
        let v00 = at(x0, y0, 0);
        let v10 = at(x1, y0, 0);
        let v01 = at(x0, y1, 0);
        let v11 = at(x1, y1, 0);
        let a = v00 + tx * (v10 - v00);
        let b = v01 + tx * (v11 - v01);
        // Exact identity at lattice points: t = 0 or t = 1 picks a value through.
        let a = if tx == 0.0 {
            v00
        } else if tx == 1.0 {
            v10
        } else {
            a
        };
        let b = if tx == 0.0 {
            v01
        } else if tx == 1.0 {
            v11
        } else {
            b
        };
        let v = if ty == 0.0 {
            a
        } else if ty == 1.0 {
            b
        } else {
            a + ty * (b - a)
        };
        let mut g = [0.0; 3];
        if want_grad {
            if s[0].inside {
                g[0] = (1.0 - ty) * (v10 - v00) + ty * (v11 - v01);
            }
            if s[1].inside {
                g[1] = b - a;
            }
        }
        return (v, g);
    }

    let mut v = 0.0;
    let mut g = [0.0; 3];
    for (dz, wz) in [(s[2].lo, 1.0 - s[2].t), (s[2].hi, s[2].t)] {
        for (dy, wy) in [(s[1].lo, 1.0 - s[1].t), (s[1].hi, s[1].t)] {
            for (dx, wx) in [(s[0].lo, 1.0 - s[0].t), (s[0].hi, s[0].t)] {
                let w = wx * wy * wz;
                if w != 0.0 {
                    v += w * at(dx, dy, dz);
                }
            }
        }
    }
    if want_grad {
        for axis in 0..3 {
            if !s[axis].inside {
                continue;
            }
            let mut acc = 0.0;
            for (iz, dz) in [s[2].lo, s[2].hi].into_iter().enumerate() {
                for (iy, dy) in [s[1].lo, s[1].hi].into_iter().enumerate() {
                    for (ix, dx) in [s[0].lo, s[0].hi].into_iter().enumerate() {
                        let sel = [ix, iy, iz];
                        let mut w = 1.0;
                        for a in 0..3 {
                            w *= if a == axis {
                                if sel[a] == 0 {
                                    -1.0
                                } else {
                                    1.0
                                }
                            } else if sel[a] == 0 {
                                1.0 - s[a].t
                            } else {
                                s[a].t
                            };
                        }
                        if w != 0.0 {
                            acc += w * at(dx, dy, dz);
                        }
                    }
                }
            }
            g[axis] = acc;
        }
    }
    (v, g)
}

/// Interpolated value of a grid at a continuous voxel position (clamped).
pub fn sample_scalar(grid: &ScalarGrid, p: [f64; 3]) -> f64 {
    sample(grid.values(), grid.domain(), p, false).0
}

/// Interpolated displacement at a continuous voxel position (clamped).
pub fn sample_field(field: &DisplacementField, p: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate().take(field.ndim()) {
        *o = sample(field.component(j), field.domain(), p, false).0;
    }
    out
}

/// Resample `image` at `x + u(x)`: the moving image pulled into the fixed frame.
pub fn warp(image: &ScalarGrid, field: &DisplacementField) -> Result<ScalarGrid> {
    image.domain().ensure_same(field.domain(), "warp")?;
    Ok(warp_impl(image, field, false).0)
}

/// Like [`warp`], also returning the spatial derivative of the interpolated
/// image at every sample point (voxel units), which is `∂(M∘φ)/∂u`.
pub fn warp_with_gradient(
    image: &ScalarGrid,
    field: &DisplacementField,
) -> Result<(ScalarGrid, DisplacementField)> {
    image.domain().ensure_same(field.domain(), "warp")?;
    let (w, g) = warp_impl(image, field, true);
    Ok((w, g.expect("gradient requested")))
}

fn warp_impl(
    image: &ScalarGrid,
    field: &DisplacementField,
    want_grad: bool,
) -> (ScalarGrid, Option<DisplacementField>) {
    let domain = image.domain();
    let n = domain.len();
    let nd = domain.ndim();
    let mut out = vec![0.0; n];
    let mut grad = if want_grad {
        vec![0.0; n * nd]
    } else {
        Vec::new()
    };
    for (i, c) in domain.iter_coords().enumerate() {
        let mut p = [c[0] as f64, c[1] as f64, c[2] as f64];
        for (j, pj) in p.iter_mut().enumerate().take(nd) {
            *pj += field.data[j * n + i];
        }
        let (v, g) = sample(image.values(), domain, p, want_grad);
        out[i] = v;
        if want_grad {
            for j in 0..nd {
                grad[j * n + i] = g[j];
            }
        }
    }
    let warped = ScalarGrid::from_raw(domain.clone(), out);
    let grad = want_grad.then(|| DisplacementField::from_raw(domain.clone(), grad));
    (warped, grad)
}

/// Unscaled forward difference of one planar component along `axis`; zero on
/// the last slice.
pub(crate) fn forward_diff_raw(values: &[f64], domain: &GridDomain, axis: usize) -> Vec<f64> {
    let stride = domain.stride(axis);
    let dims = domain.dims3();
    let mut out = vec![0.0; values.len()];
    for (i, c) in domain.iter_coords().enumerate() {
        if c[axis] + 1 < dims[axis] {
            out[i] = values[i + stride] - values[i];
        }
    }
    out
}

/// Accumulate the adjoint of [`forward_diff_raw`] applied to `g` into `out`.
pub(crate) fn forward_diff_adjoint(g: &[f64], domain: &GridDomain, axis: usize, out: &mut [f64]) {
    let stride = domain.stride(axis);
    let dims = domain.dims3();
    for (i, c) in domain.iter_coords().enumerate() {
        if c[axis] + 1 < dims[axis] {
            out[i + stride] += g[i];
            out[i] -= g[i];
        }
    }
}

/// `∂u_component / ∂x_direction` by forward differences, in voxel units per mm.
/// The last slice along `direction` is zero.
pub fn forward_diff(
    field: &DisplacementField,
    component: usize,
    direction: usize,
) -> Result<ScalarGrid> {
    let nd = field.ndim();
    if component >= nd || direction >= nd {
        return Err(Error::Param(format!(
            "axis out of range: component {component}, direction {direction}, ndim {nd}"
        )));
    }
    let domain = field.domain();
    let h = domain.spacing3()[direction];
    let mut d = forward_diff_raw(field.component(component), domain, direction);
    for v in &mut d {
        *v /= h;
    }
    Ok(ScalarGrid::from_raw(domain.clone(), d))
}

/// Per-voxel `det(I + ∇u)` with forward differences in voxel units.
pub fn jacobian_determinant(field: &DisplacementField) -> ScalarGrid {
    let domain = field.domain();
    let nd = field.ndim();
    // grads[i][j] = ∂u_i/∂x_j
    let grads: Vec<Vec<Vec<f64>>> = (0..nd)
        .map(|i| {
            (0..nd)
                .map(|j| forward_diff_raw(field.component(i), domain, j))
                .collect()
        })
        .collect();
    let n = domain.len();
    let mut det = vec![0.0; n];
    for (k, d) in det.iter_mut().enumerate() {
        let m = |i: usize, j: usize| grads[i][j][k] + if i == j { 1.0 } else { 0.0 };
        *d = if nd == 2 {
            m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0)
        } else {
            m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
        };
    }
    ScalarGrid::from_raw(domain.clone(), det)
}
