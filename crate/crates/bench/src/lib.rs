//! Shared inputs for the benchmarks.

use elastireg_core::phantom::{make_phantom, FieldFamily, Phantom, PhantomSpec};
use elastireg_core::{DisplacementField, GridDomain};

/// Square 2-D phantom with a moderate bump deformation.
pub fn phantom_2d(n: usize) -> Phantom {
    make_phantom(&PhantomSpec::new_2d(
        n,
        FieldFamily::bump(2.0, n as f64 / 8.0),
        1,
    ))
    .expect("valid phantom spec")
}

/// Smooth, non-trivial field on a cube.
pub fn smooth_field_3d(n: usize) -> DisplacementField {
    let d = GridDomain::with_unit_spacing(&[n, n, n]).expect("valid dims");
    let s = std::f64::consts::TAU / n as f64;
    DisplacementField::from_fn(d, |c| {
        let (x, y, z) = (c[0] as f64 * s, c[1] as f64 * s, c[2] as f64 * s);
        [0.3 * y.sin(), 0.2 * (x + z).cos(), 0.1 * x.sin() * y.cos()]
    })
}
