//! Minimal reverse-mode automatic differentiation over scalars.
//!
//! Nodes are appended in evaluation order, so a single backward sweep in
//! reverse index order visits every node after all of its consumers.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    /// `a + t·(b − a)`
    Lerp {
        a: Var,
        b: Var,
        t: Var,
    },
    /// `bias + Σ w_k·x_k`, with the `(w_k, x_k)` pairs stored in the tape's
    /// operand arena.
    Affine {
        bias: Var,
        start: u32,
        len: u32,
    },
}

/// Recorded scalar computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    pairs: Vec<(Var, Var)>,
    seeds: Vec<(Var, f64)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, pairs: usize) -> Self {
        Self {
            ops: Vec::with_capacity(nodes),
            values: Vec::with_capacity(nodes),
            pairs: Vec::with_capacity(pairs),
            seeds: Vec::new(),
        }
    }

    /// Forget all nodes but keep the allocations.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.values.clear();
        self.pairs.clear();
        self.seeds.clear();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        let v = Var(self.ops.len() as u32);
        self.ops.push(op);
        self.values.push(value);
        v
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    /// An input (or constant) node.
    pub fn leaf(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(a), v)
    }

    pub fn lerp(&mut self, a: Var, b: Var, t: Var) -> Var {
        let (va, vb, vt) = (self.value(a), self.value(b), self.value(t));
        self.push(Op::Lerp { a, b, t }, va + vt * (vb - va))
    }

    /// `bias + Σ w·x` over `(w, x)` pairs.
    pub fn affine(&mut self, bias: Var, terms: impl IntoIterator<Item = (Var, Var)>) -> Var {
        let start = self.pairs.len();
        let mut acc = self.value(bias);
        for (w, x) in terms {
            acc += self.values[w.index()] * self.values[x.index()];
            self.pairs.push((w, x));
        }
        let len = self.pairs.len() - start;
        self.push(
            Op::Affine {
                bias,
                start: start as u32,
                len: len as u32,
            },
            acc,
        )
    }

    /// Set the output adjoint `∂L/∂v` for a subsequent [`backprop`].
    pub fn seed(&mut self, v: Var, adjoint: f64) {
        self.seeds.push((v, adjoint));
    }

    /// Re-run the recorded computation with new leaf values (in the order the
    /// leaves were created) and return every node's value.
    pub fn replay(&self, leaf_values: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.ops.len()];
        let mut leaves = leaf_values.iter();
        for (i, op) in self.ops.iter().enumerate() {
            let val = |v: Var| out[v.index()];
            out[i] = match *op {
                Op::Leaf => *leaves
                    .next()
                    .ok_or_else(|| Error::Autodiff("replay: too few leaf values".into()))?,
                Op::Add(a, b) => val(a) + val(b),
                Op::Sub(a, b) => val(a) - val(b),
                Op::Mul(a, b) => val(a) * val(b),
                Op::Scale(a, c) => val(a) * c,
                Op::Tanh(a) => val(a).tanh(),
                Op::Lerp { a, b, t } => val(a) + val(t) * (val(b) - val(a)),
                Op::Affine { bias, start, len } => {
                    let mut acc = val(bias);
                    for &(w, x) in &self.pairs[start as usize..(start + len) as usize] {
                        acc += val(w) * val(x);
                    }
                    acc
                }
            };
        }
        if leaves.next().is_some() {
            return Err(Error::Autodiff("replay: too many leaf values".into()));
        }
        Ok(out)
    }

    /// Values of all nodes as recorded.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Adjoints `∂L/∂node` for every node on a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints[v.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.adjoints
    }
}

/// Reverse sweep from the seeded outputs.
pub fn backprop(tape: &Tape) -> Result<Gradients> {
    if tape.seeds.is_empty() {
        return Err(Error::Autodiff(
            "backprop called without a seeded output".into(),
        ));
    }
    let mut adj = vec![0.0; tape.ops.len()];
    for &(v, g) in &tape.seeds {
        adj[v.index()] += g;
    }
    let vals = &tape.values;
    for i in (0..tape.ops.len()).rev() {
        let g = adj[i];
        if g == 0.0 {
            continue;
        }
        match tape.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                adj[a.index()] += g;
                adj[b.index()] += g;
            }
            Op::Sub(a, b) => {
                adj[a.index()] += g;
                adj[b.index()] -= g;
            }
            Op::Mul(a, b) => {
                adj[a.index()] += g * vals[b.index()];
                adj[b.index()] += g * vals[a.index()];
            }
            Op::Scale(a, c) => adj[a.index()] += g * c,
            Op::Tanh(a) => {
                let y = vals[i];
                adj[a.index()] += g * (1.0 - y * y);
            }
            Op::Lerp { a, b, t } => {
                let vt = vals[t.index()];
                adj[a.index()] += g * (1.0 - vt);
                adj[b.index()] += g * vt;
                adj[t.index()] += g * (vals[b.index()] - vals[a.index()]);
            }
            Op::Affine { bias, start, len } => {
                adj[bias.index()] += g;
                for &(w, x) in &tape.pairs[start as usize..(start + len) as usize] {
                    adj[w.index()] += g * vals[x.index()];
                    adj[x.index()] += g * vals[w.index()];
                }
            }
        }
    }
    Ok(Gradients { adjoints: adj })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let mut t = Tape::new();
        let w = t.leaf(3.0);
        let y = t.mul(w, w);
        t.seed(y, 1.0);
        assert_eq!(backprop(&t).unwrap().wrt(w), 6.0);
    }

    #[test]
    fn tanh_chain() {
        let mut t = Tape::new();
        let w = t.leaf(0.0);
        let s = t.scale(w, 2.0);
        let y = t.tanh(s);
        t.seed(y, 1.0);
        assert_eq!(backprop(&t).unwrap().wrt(w), 2.0);
    }

    #[test]
    fn unseeded_is_an_error() {
        let mut t = Tape::new();
        let w = t.leaf(1.0);
        t.tanh(w);
        assert!(matches!(backprop(&t), Err(Error::Autodiff(_))));
    }

    /// Each primitive in isolation against a central difference computed by
    /// replaying the tape.
    #[test]
    fn primitives_match_finite_differences() {
        type Build = fn(&mut Tape, &[Var]) -> Var;
        let cases: Vec<(&str, Vec<f64>, Build)> = vec![
            ("add", vec![0.3, -1.2], |t, v| t.add(v[0], v[1])),
            ("sub", vec![0.3, -1.2], |t, v| t.sub(v[0], v[1])),
            ("mul", vec![0.7, -1.9], |t, v| t.mul(v[0], v[1])),
            ("scale", vec![0.7], |t, v| t.scale(v[0], -3.5)),
            ("tanh", vec![0.4], |t, v| t.tanh(v[0])),
            ("lerp", vec![1.5, -0.5, 0.3], |t, v| {
                t.lerp(v[0], v[1], v[2])
            }),
            ("affine", vec![0.1, 0.5, -2.0, 1.5, 0.25], |t, v| {
                t.affine(v[0], [(v[1], v[2]), (v[3], v[4])])
            }),
        ];
        for (name, inputs, build) in cases {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|&x| t.leaf(x)).collect();
            let out = build(&mut t, &vars);
            t.seed(out, 1.0);
            let g = backprop(&t).unwrap();
            let h = 1e-6;
            for (k, &v) in vars.iter().enumerate() {
                let mut up = inputs.clone();
                up[k] += h;
                let mut dn = inputs.clone();
                dn[k] -= h;
                let fu = t.replay(&up).unwrap()[out.index()];
                let fd = t.replay(&dn).unwrap()[out.index()];
                let num = (fu - fd) / (2.0 * h);
                let an = g.wrt(v);
                let rel = (an - num).abs() / an.abs().max(1e-12);
                assert!(rel < 1e-6, "{name} input {k}: {an} vs {num}");
            }
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut t = Tape::new();
        let a = t.leaf(0.123456789);
        let b = t.leaf(-2.5);
        let c = t.mul(a, b);
        let d = t.tanh(c);
        let e = t.affine(d, [(a, b), (c, d)]);
        let _ = t.lerp(a, e, d);
        let replayed = t.replay(&[0.123456789, -2.5]).unwrap();
        assert_eq!(replayed.as_slice(), t.values());
        assert!(t.replay(&[1.0]).is_err());
        assert!(t.replay(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn adjoints_accumulate_over_fan_out() {
        // f = a*b + a  ->  df/da = b + 1
        let mut t = Tape::new();
        let a = t.leaf(2.0);
        let b = t.leaf(5.0);
        let ab = t.mul(a, b);
        let f = t.add(ab, a);
        t.seed(f, 1.0);
        let g = backprop(&t).unwrap();
        assert_eq!(g.wrt(a), 6.0);
        assert_eq!(g.wrt(b), 2.0);
    }
}
