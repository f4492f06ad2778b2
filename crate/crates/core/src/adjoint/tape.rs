//! Scalar reverse-mode tape.
//!
//! Simulators are written once against [`Real`]. Running them with `f64`
//! gives the plain forward step; running them with [`Var`] records every
//! operation on a [`Tape`] so the step's vector-Jacobian product can be
//! swept backward. Both paths execute the same IEEE operations in the same
//! order, so recorded values equal the plain forward values bit for bit.

use std::cell::RefCell;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

/// Arithmetic needed by the built-in simulators.
pub trait Real:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
{
    fn cst(v: f64) -> Self;
    fn val(&self) -> f64;
    fn sqrt(self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    /// Clamp by value; the derivative is zero on the clamped side.
    fn clamp_val(self, lo: f64, hi: f64) -> Self {
        let v = self.val();
        if v < lo {
            Self::cst(lo)
        } else if v > hi {
            Self::cst(hi)
        } else {
            self
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    lhs: u32,
    d_lhs: f64,
    rhs: u32,
    d_rhs: f64,
}

/// Append-only record of the operations performed on [`Var`]s.
#[derive(Debug, Default)]
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

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A new independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            lhs: NONE,
            d_lhs: 0.0,
            rhs: NONE,
            d_rhs: 0.0,
        });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NONE as usize, "tape overflow");
        nodes.push(node);
        idx as u32
    }

    /// Sweep backward from `seeds` (output, adjoint) and return the adjoint
    /// of every node, indexable with [`Var::grad_in`].
    pub fn backward(&self, seeds: &[(Var<'_>, f64)]) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        for (v, a) in seeds {
            if v.idx != NONE {
                adj[v.idx as usize] += a;
            }
        }
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            if n.lhs != NONE {
                adj[n.lhs as usize] += a * n.d_lhs;
            }
            if n.rhs != NONE {
                adj[n.rhs as usize] += a * n.d_rhs;
            }
        }
        Gradients(adj)
    }
}

#[derive(Debug, Clone)]
pub struct Gradients(Vec<f64>);

impl Gradients {
    pub fn of(&self, v: &Var<'_>) -> f64 {
        v.grad_in(self)
    }
}

/// A value that may be tracked on a tape. Constants carry no tape and cost
/// no nodes.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Self {
            tape: None,
            idx: NONE,
            val,
        }
    }

    pub fn value(&self) -> f64 {
        self.val
    }

    pub fn is_constant(&self) -> bool {
        self.idx == NONE
    }

    pub fn grad_in(&self, grads: &Gradients) -> f64 {
        if self.idx == NONE {
            0.0
        } else {
            grads.0[self.idx as usize]
        }
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            Some(t) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    lhs: self.idx,
                    d_lhs: d,
                    rhs: NONE,
                    d_rhs: 0.0,
                }),
                val,
            },
            None => Var::constant(val),
        }
    }

    #[inline]
    fn binary(self, other: Self, val: f64, d_self: f64, d_other: f64) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Var::constant(val),
            (Some(_), None) => self.unary(val, d_self),
            (None, Some(_)) => other.unary(val, d_other),
            (Some(t), Some(_)) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    lhs: self.idx,
                    d_lhs: d_self,
                    rhs: other.idx,
                    d_rhs: d_other,
                }),
                val,
            },
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.binary(o, q, 1.0 / o.val, -q / o.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, o: f64) -> Self {
        self.unary(self.val + o, 1.0)
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, o: f64) -> Self {
        self.unary(self.val - o, 1.0)
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        self.unary(self.val * o, o)
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        self.unary(self.val / o, 1.0 / o)
    }
}

impl AddAssign for Var<'_> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl SubAssign for Var<'_> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl Real for Var<'_> {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn val(&self) -> f64 {
        self.val
    }
    #[inline]
    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        self.unary(r, 0.5 / r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly<R: Real>(x: R, y: R) -> R {
        // x^2 y + sqrt(x) / y - 3 x + 2
        x * x * y + x.sqrt() / y - x * 3.0 + 2.0
    }

    #[test]
    fn matches_hand_derivatives() {
        let tape = Tape::new();
        let (x0, y0) = (1.7, -0.4);
        let x = tape.var(x0);
        let y = tape.var(y0);
        let z = poly(x, y);
        assert_eq!(z.value(), poly(x0, y0));
        let g = tape.backward(&[(z, 1.0)]);
        let dx = 2.0 * x0 * y0 + 0.5 / (x0.sqrt() * y0) - 3.0;
        let dy = x0 * x0 - x0.sqrt() / (y0 * y0);
        assert!((g.of(&x) - dx).abs() < 1e-14);
        assert!((g.of(&y) - dy).abs() < 1e-14);
    }

    #[test]
    fn constants_record_nothing() {
        let tape = Tape::new();
        let a = Var::constant(2.0);
        let b = Var::constant(3.0);
        let c = a * b + a / b - b.sqrt();
        assert!(c.is_constant());
        assert!(tape.is_empty());
        let x = tape.var(1.0);
        let _ = x * a + b;
        assert_eq!(tape.len(), 3);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let mut acc = Var::constant(0.0);
        for _ in 0..5 {
            acc += x * x;
        }
        let g = tape.backward(&[(acc, 2.0)]);
        assert_eq!(g.of(&x), 2.0 * 5.0 * 6.0);
    }

    #[test]
    fn clamp_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.var(5.0);
        let y = (x * 2.0).clamp_val(0.0, 4.0);
        assert!(y.is_constant());
        let inside = (x * 0.5).clamp_val(0.0, 4.0);
        let g = tape.backward(&[(inside, 1.0)]);
        assert_eq!(g.of(&x), 0.5);
    }
}
