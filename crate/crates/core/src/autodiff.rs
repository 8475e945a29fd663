//! Scalar reverse-mode tape.
//!
//! The per-Gaussian geometry and colour chain is written once, generically
//! over [`Real`], and evaluated either on plain `f64` (rendering) or on
//! [`Var`] handles recorded into a [`Tape`] (gradients). Dense layers and
//! the compositor have hand-written adjoints elsewhere; the tape only sees
//! short chains of a few hundred nodes, so it is rebuilt per (Gaussian, view)
//! pair instead of being kept alive across a whole forward pass.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

const NONE: u32 = u32::MAX;

/// Scalar interface shared by `f64` and tape variables.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn lift(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sigmoid(self) -> Self;
    /// `max(self, 0)` with subgradient 0 at the kink.
    fn relu(self) -> Self;
    /// Clamp into `[lo, hi]`; derivative is 1 strictly inside, 0 outside.
    fn clamp_to(self, lo: f64, hi: f64) -> Self;
    /// `max(self, lo)`.
    fn floor_at(self, lo: f64) -> Self {
        self.clamp_to(lo, f64::INFINITY)
    }
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lift(self, c: f64) -> Self {
        c
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline]
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        self.max(lo).min(hi)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Wengert list of binary/unary nodes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A new independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [NONE, NONE],
            partials: [0.0, 0.0],
        });
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            idx: NONE,
            val: value,
        }
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(node);
        idx
    }

    fn unary(&self, val: f64, a: u32, da: f64) -> Var<'_> {
        if a == NONE {
            return self.constant(val);
        }
        let idx = self.push(Node {
            parents: [a, NONE],
            partials: [da, 0.0],
        });
        Var {
            tape: self,
            idx,
            val,
        }
    }

    fn binary(&self, val: f64, a: u32, da: f64, b: u32, db: f64) -> Var<'_> {
        match (a == NONE, b == NONE) {
            (true, true) => self.constant(val),
            (false, true) => self.unary(val, a, da),
            (true, false) => self.unary(val, b, db),
            (false, false) => {
                let idx = self.push(Node {
                    parents: [a, b],
                    partials: [da, db],
                });
                Var {
                    tape: self,
                    idx,
                    val,
                }
            }
        }
    }

    /// Fresh adjoint buffer sized to the current tape.
    pub fn adjoints(&self) -> Adjoints {
        Adjoints {
            values: vec![0.0; self.len()],
        }
    }

    /// Propagate adjoints of nodes in `[stop, end)` to their parents, from
    /// the back. Splitting the sweep lets a caller inject adjoints computed
    /// by a hand-written block between two recorded segments.
    pub fn sweep(&self, adj: &mut Adjoints, stop: usize, end: usize) {
        let nodes = self.nodes.borrow();
        if adj.values.len() < nodes.len() {
            adj.values.resize(nodes.len(), 0.0);
        }
        for i in (stop..end.min(nodes.len())).rev() {
            let a = adj.values[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            for k in 0..2 {
                let p = n.parents[k];
                if p != NONE {
                    adj.values[p as usize] += a * n.partials[k];
                }
            }
        }
    }

    /// Full reverse sweep.
    pub fn sweep_all(&self, adj: &mut Adjoints) {
        let end = self.len();
        self.sweep(adj, 0, end);
    }
}

pub struct Adjoints {
    values: Vec<f64>,
}

impl Adjoints {
    pub fn get(&self, v: Var<'_>) -> f64 {
        if v.idx == NONE {
            0.0
        } else {
            self.values.get(v.idx as usize).copied().unwrap_or(0.0)
        }
    }

    pub fn seed(&mut self, v: Var<'_>, adjoint: f64) {
        if v.idx != NONE {
            let i = v.idx as usize;
            if i >= self.values.len() {
                self.values.resize(i + 1, 0.0);
            }
            self.values[i] += adjoint;
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, #{})", self.val, self.idx)
    }
}

impl<'t> Var<'t> {
    /// Position of this node on the tape, or `None` for a constant.
    pub fn index(self) -> Option<usize> {
        (self.idx != NONE).then_some(self.idx as usize)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Self) -> Self {
        self.tape.binary(self.val + o.val, self.idx, 1.0, o.idx, 1.0)
    }
}
impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Self) -> Self {
        self.tape.binary(self.val - o.val, self.idx, 1.0, o.idx, -1.0)
    }
}
impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Self) -> Self {
        self.tape
            .binary(self.val * o.val, self.idx, o.val, o.idx, self.val)
    }
}
impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.tape
            .binary(q, self.idx, 1.0 / o.val, o.idx, -q / o.val)
    }
}
impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.tape.unary(-self.val, self.idx, -1.0)
    }
}
impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Self {
        self.tape.unary(self.val + c, self.idx, 1.0)
    }
}
impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Self {
        self.tape.unary(self.val - c, self.idx, 1.0)
    }
}
impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Self {
        self.tape.unary(self.val * c, self.idx, c)
    }
}
impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Self {
        self.tape.unary(self.val / c, self.idx, 1.0 / c)
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }
    fn lift(self, c: f64) -> Self {
        self.tape.constant(c)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.tape.unary(e, self.idx, e)
    }
    fn ln(self) -> Self {
        self.tape.unary(self.val.ln(), self.idx, 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.tape.unary(s, self.idx, 0.5 / s)
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid(self.val);
        self.tape.unary(s, self.idx, s * (1.0 - s))
    }
    fn relu(self) -> Self {
        if self.val > 0.0 {
            self
        } else {
            self.tape.constant(0.0)
        }
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        if self.val > lo && self.val < hi {
            self
        } else {
            self.tape.constant(self.val.max(lo).min(hi))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad1(f: impl for<'a> Fn(Var<'a>) -> Var<'a>, x: f64) -> (f64, f64) {
        let tape = Tape::new();
        let v = tape.var(x);
        let y = f(v);
        let mut adj = tape.adjoints();
        adj.seed(y, 1.0);
        tape.sweep_all(&mut adj);
        (y.value(), adj.get(v))
    }

    #[test]
    fn linear_leaf_gradient_is_the_coefficient() {
        let (_, g) = grad1(|p| p * 2.5, 7.0);
        assert_eq!(g, 2.5);
    }

    #[test]
    fn elementary_derivatives() {
        let x = 0.7;
        let cases: Vec<(Box<dyn for<'a> Fn(Var<'a>) -> Var<'a>>, f64)> = vec![
            (Box::new(|v| v.exp()), x.exp()),
            (Box::new(|v| v.ln()), 1.0 / x),
            (Box::new(|v| v.sqrt()), 0.5 / x.sqrt()),
            (Box::new(|v| v.sigmoid()), sigmoid(x) * (1.0 - sigmoid(x))),
            (Box::new(|v| v * v * v), 3.0 * x * x),
            (Box::new(|v| v.lift(1.0) / v), -1.0 / (x * x)),
            (Box::new(|v| (v - 0.2) * (v + 0.3)), 2.0 * x + 0.1),
        ];
        for (f, expected) in cases {
            let (_, g) = grad1(f, x);
            assert!((g - expected).abs() < 1e-12, "{g} vs {expected}");
        }
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x => dy/dx = 2x + 1
        let (_, g) = grad1(|v| v * v + v, 3.0);
        assert_eq!(g, 7.0);
    }

    #[test]
    fn clamp_and_relu_kinks_have_zero_subgradient() {
        assert_eq!(grad1(|v| v.relu(), 0.0).1, 0.0);
        assert_eq!(grad1(|v| v.relu(), 1.0).1, 1.0);
        assert_eq!(grad1(|v| v.clamp_to(0.0, 1.0), 1.0).1, 0.0);
        assert_eq!(grad1(|v| v.clamp_to(0.0, 1.0), 0.5).1, 1.0);
    }

    #[test]
    fn constants_do_not_grow_the_tape() {
        let tape = Tape::new();
        let c = tape.constant(2.0);
        let d = (c * c + 1.0).exp();
        assert!(tape.is_empty());
        assert_eq!(d.value(), 5f64.exp());
    }

    #[test]
    fn split_sweep_matches_full_sweep() {
        // f(x) = exp(g(x)) with g(x) = x^2; run g's adjoint by hand between segments.
        let tape = Tape::new();
        let x = tape.var(0.4);
        let g = x * x;
        let mark = tape.len();
        let g_in = tape.var(g.value());
        let y = g_in.exp();
        let mut adj = tape.adjoints();
        adj.seed(y, 1.0);
        let end = tape.len();
        tape.sweep(&mut adj, mark, end);
        let dg = adj.get(g_in);
        adj.seed(g, dg);
        tape.sweep(&mut adj, 0, mark);
        let expected = 2.0 * 0.4 * (0.16f64).exp();
        assert!((adj.get(x) - expected).abs() < 1e-14);
    }
}
