//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Losses are recorded eagerly onto a [`Tape`] using a small fixed set of scalar
//! primitives (add/sub/mul/div, exp/ln/tanh/sqrt, sums and inner products); a reverse
//! sweep then yields exact first derivatives in double precision. Second-order
//! quantities never materialize a Hessian: the meta-gradient of a loss evaluated after
//! an inner SGD step needs only a Hessian-vector product, which is obtained by running
//! the identical tape in dual-number arithmetic (forward-over-reverse).

use serde::{Deserialize, Serialize};
use std::ops::{Add, Div, Mul, Neg, Sub};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("loss value is not finite ({value})")]
    NonFiniteLoss { value: f64 },
    #[error("gradient entry {index} (parameter block `{block}`) is not finite")]
    NonFiniteGradient { block: String, index: usize },
    #[error("parameter layout mismatch: expected {expected} values, got {got}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("loss construction failed: {0}")]
    Build(String),
}

// ── Scalar arithmetic ───────────────────────────────────────────────────────

/// Arithmetic the tape is generic over: plain `f64` for values and gradients,
/// [`Dual`] for forward-over-reverse Hessian-vector products.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    /// Value part (the primal for duals).
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn mul_f64(self, c: f64) -> Self;
    fn add_f64(self, c: f64) -> Self;
    fn is_finite_all(self) -> bool;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn mul_f64(self, c: f64) -> Self {
        self * c
    }
    fn add_f64(self, c: f64) -> Self {
        self + c
    }
    fn is_finite_all(self) -> bool {
        self.is_finite()
    }
}

/// Dual number `re + du * eps` with `eps^2 = 0`; propagates one tangent direction
/// exactly through every primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(
            self.re / o.re,
            (self.du * o.re - self.re * o.du) / (o.re * o.re),
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.du / (2.0 * s))
    }
    fn mul_f64(self, c: f64) -> Self {
        Dual::new(self.re * c, self.du * c)
    }
    fn add_f64(self, c: f64) -> Self {
        Dual::new(self.re + c, self.du)
    }
    fn is_finite_all(self) -> bool {
        self.re.is_finite() && self.du.is_finite()
    }
}

// ── Tape ────────────────────────────────────────────────────────────────────

/// Handle to a recorded tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Clone, Copy, Debug)]
enum Op {
    Input,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    Tanh(u32),
    Sqrt(u32),
    /// `c * x` with a plain constant factor.
    Scale(u32, f64),
    /// `x + c`; the constant is folded into the value, the adjoint passes through.
    Offset(u32),
    /// Sum of the vars at `args[start .. start+len]`.
    Sum { start: u32, len: u32 },
    /// Inner product of the var slices at `args[a..a+len]` and `args[b..b+len]`.
    Dot { a: u32, b: u32, len: u32 },
    /// Inner product of vars at `args[a..a+len]` with constants at `consts[c..c+len]`.
    DotConst { a: u32, c: u32, len: u32 },
}

/// Eagerly-evaluated operation tape; values are computed as nodes are recorded so a
/// reverse sweep only has to distribute adjoints.
pub struct Tape<S> {
    ops: Vec<Op>,
    vals: Vec<S>,
    args: Vec<u32>,
    consts: Vec<f64>,
    inputs: Vec<u32>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
            args: Vec::new(),
            consts: Vec::new(),
            inputs: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, val: S) -> Var {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.vals.push(val);
        Var(id)
    }

    /// Records a differentiable input; gradients are reported per input in
    /// registration order.
    pub fn input(&mut self, v: S) -> Var {
        let var = self.push(Op::Input, v);
        self.inputs.push(var.0);
        var
    }

    pub fn constant(&mut self, c: f64) -> Var {
        self.push(Op::Const, S::from_f64(c))
    }

    pub fn value(&self, v: Var) -> S {
        self.vals[v.0 as usize]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0 as usize] + self.vals[b.0 as usize];
        self.push(Op::Add(a.0, b.0), val)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0 as usize] - self.vals[b.0 as usize];
        self.push(Op::Sub(a.0, b.0), val)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0 as usize] * self.vals[b.0 as usize];
        self.push(Op::Mul(a.0, b.0), val)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let val = self.vals[a.0 as usize] / self.vals[b.0 as usize];
        self.push(Op::Div(a.0, b.0), val)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let val = -self.vals[a.0 as usize];
        self.push(Op::Neg(a.0), val)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let val = self.vals[a.0 as usize].exp();
        self.push(Op::Exp(a.0), val)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let val = self.vals[a.0 as usize].ln();
        self.push(Op::Ln(a.0), val)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let val = self.vals[a.0 as usize].tanh();
        self.push(Op::Tanh(a.0), val)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let val = self.vals[a.0 as usize].sqrt();
        self.push(Op::Sqrt(a.0), val)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let val = self.vals[a.0 as usize].mul_f64(c);
        self.push(Op::Scale(a.0, c), val)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let val = self.vals[a.0 as usize].add_f64(c);
        self.push(Op::Offset(a.0), val)
    }

    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let start = self.args.len() as u32;
        let mut val = S::zero();
        for v in vars {
            self.args.push(v.0);
            val = val + self.vals[v.0 as usize];
        }
        self.push(
            Op::Sum {
                start,
                len: vars.len() as u32,
            },
            val,
        )
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len(), "dot operands must have equal length");
        let astart = self.args.len() as u32;
        for v in a {
            self.args.push(v.0);
        }
        let bstart = self.args.len() as u32;
        for v in b {
            self.args.push(v.0);
        }
        let mut val = S::zero();
        for (x, y) in a.iter().zip(b) {
            val = val + self.vals[x.0 as usize] * self.vals[y.0 as usize];
        }
        self.push(
            Op::Dot {
                a: astart,
                b: bstart,
                len: a.len() as u32,
            },
            val,
        )
    }

    pub fn dot_const(&mut self, a: &[Var], c: &[f64]) -> Var {
        assert_eq!(a.len(), c.len(), "dot operands must have equal length");
        let astart = self.args.len() as u32;
        for v in a {
            self.args.push(v.0);
        }
        let cstart = self.consts.len() as u32;
        self.consts.extend_from_slice(c);
        let mut val = S::zero();
        for (x, &y) in a.iter().zip(c) {
            val = val + self.vals[x.0 as usize].mul_f64(y);
        }
        self.push(
            Op::DotConst {
                a: astart,
                c: cstart,
                len: a.len() as u32,
            },
            val,
        )
    }

    /// Reverse sweep from `output`; returns one adjoint per registered input, in
    /// registration order. Accumulation order is fixed by the tape, so identical
    /// recordings give bit-identical gradients.
    pub fn gradient(&self, output: Var) -> Vec<S> {
        let mut adj = vec![S::zero(); self.ops.len()];
        adj[output.0 as usize] = S::one();
        for i in (0..self.ops.len()).rev() {
            let w = adj[i];
            match self.ops[i] {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    adj[a as usize] = adj[a as usize] + w;
                    adj[b as usize] = adj[b as usize] + w;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] = adj[a as usize] + w;
                    adj[b as usize] = adj[b as usize] - w;
                }
                Op::Mul(a, b) => {
                    adj[a as usize] = adj[a as usize] + w * self.vals[b as usize];
                    adj[b as usize] = adj[b as usize] + w * self.vals[a as usize];
                }
                Op::Div(a, b) => {
                    adj[a as usize] = adj[a as usize] + w / self.vals[b as usize];
                    adj[b as usize] =
                        adj[b as usize] - w * self.vals[i] / self.vals[b as usize];
                }
                Op::Neg(a) => {
                    adj[a as usize] = adj[a as usize] - w;
                }
                Op::Exp(a) => {
                    adj[a as usize] = adj[a as usize] + w * self.vals[i];
                }
                Op::Ln(a) => {
                    adj[a as usize] = adj[a as usize] + w / self.vals[a as usize];
                }
                Op::Tanh(a) => {
                    let t = self.vals[i];
                    adj[a as usize] = adj[a as usize] + w * (S::one() - t * t);
                }
                Op::Sqrt(a) => {
                    adj[a as usize] = adj[a as usize] + w / self.vals[i].mul_f64(2.0);
                }
                Op::Scale(a, c) => {
                    adj[a as usize] = adj[a as usize] + w.mul_f64(c);
                }
                Op::Offset(a) => {
                    adj[a as usize] = adj[a as usize] + w;
                }
                Op::Sum { start, len } => {
                    for k in start..start + len {
                        let a = self.args[k as usize] as usize;
                        adj[a] = adj[a] + w;
                    }
                }
                Op::Dot { a, b, len } => {
                    for k in 0..len {
                        let x = self.args[(a + k) as usize] as usize;
                        let y = self.args[(b + k) as usize] as usize;
                        adj[x] = adj[x] + w * self.vals[y];
                        adj[y] = adj[y] + w * self.vals[x];
                    }
                }
                Op::DotConst { a, c, len } => {
                    for k in 0..len {
                        let x = self.args[(a + k) as usize] as usize;
                        adj[x] = adj[x] + w.mul_f64(self.consts[(c + k) as usize]);
                    }
                }
            }
        }
        self.inputs.iter().map(|&i| adj[i as usize]).collect()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

// ── Parameter vectors ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub len: usize,
}

/// Named-block layout of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
}

impl ParamLayout {
    pub fn new(segments: Vec<(String, usize)>) -> Self {
        ParamLayout {
            segments: segments
                .into_iter()
                .map(|(name, len)| Segment { name, len })
                .collect(),
        }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn offset_of(&self, name: &str) -> Option<usize> {
        let mut offset = 0;
        for seg in &self.segments {
            if seg.name == name {
                return Some(offset);
            }
            offset += seg.len;
        }
        None
    }

    /// Name of the block containing flat index `index`.
    pub fn block_at(&self, index: usize) -> &str {
        let mut offset = 0;
        for seg in &self.segments {
            if index < offset + seg.len {
                return &seg.name;
            }
            offset += seg.len;
        }
        "<out of range>"
    }
}

/// Flat `f64` parameter vector with a named-block layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: ParamLayout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self, AdError> {
        if layout.total_len() != values.len() {
            return Err(AdError::LayoutMismatch {
                expected: layout.total_len(),
                got: values.len(),
            });
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let n = layout.total_len();
        ParamVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let offset = self.layout.offset_of(name)?;
        let len = self
            .layout
            .segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.len)?;
        Some(&self.values[offset..offset + len])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let offset = self.layout.offset_of(name)?;
        let len = self
            .layout
            .segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.len)?;
        Some(&mut self.values[offset..offset + len])
    }

    /// In-place `self += c * other`; layouts must match.
    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) -> Result<(), AdError> {
        if self.layout != other.layout {
            return Err(AdError::LayoutMismatch {
                expected: self.values.len(),
                got: other.values.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }
}

// ── Gradient drivers ────────────────────────────────────────────────────────

/// A scalar loss expressible on the tape as a function of the parameter vector.
/// Implementations must record the same operations for every scalar type so that
/// the dual-number pass differentiates exactly the computation the value pass ran.
pub trait TapeLoss {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, theta: &[Var]) -> Result<Var, AdError>;
}

#[derive(Clone, Debug)]
pub struct GradResult {
    pub loss: f64,
    pub gradient: ParamVector,
}

#[derive(Clone, Debug)]
pub struct HvpResult {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Hessian-vector product `H v` for the direction the duals were seeded with.
    pub hvp: Vec<f64>,
}

/// Meta-gradient of `L_mtr(theta) + L_mte(theta')` where
/// `theta' = theta - inner_rate * grad L_mtr(theta)`.
#[derive(Clone, Debug)]
pub struct MetaGradResult {
    pub loss_mtr: f64,
    pub loss_mte: f64,
    pub gradient: ParamVector,
    pub theta_prime: ParamVector,
}

impl MetaGradResult {
    pub fn total_loss(&self) -> f64 {
        self.loss_mtr + self.loss_mte
    }
}

/// Whether the update-differentiation keeps the exact curvature term or drops it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SecondOrder {
    Exact,
    FirstOrder,
}

pub fn loss_value<L: TapeLoss>(loss: &L, theta: &ParamVector) -> Result<f64, AdError> {
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = theta.values().iter().map(|&v| tape.input(v)).collect();
    let out = loss.build(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_finite() {
        return Err(AdError::NonFiniteLoss { value });
    }
    Ok(value)
}

/// Loss value and exact gradient at `theta`.
pub fn grad<L: TapeLoss>(loss: &L, theta: &ParamVector) -> Result<GradResult, AdError> {
    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = theta.values().iter().map(|&v| tape.input(v)).collect();
    let out = loss.build(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_finite() {
        return Err(AdError::NonFiniteLoss { value });
    }
    let g = tape.gradient(out);
    for (i, gi) in g.iter().enumerate() {
        if !gi.is_finite() {
            return Err(AdError::NonFiniteGradient {
                block: theta.layout().block_at(i).to_string(),
                index: i,
            });
        }
    }
    Ok(GradResult {
        loss: value,
        gradient: ParamVector::new(theta.layout().clone(), g)?,
    })
}

/// Loss, gradient, and Hessian-vector product `H v` at `theta`, computed by seeding
/// the tape inputs with dual numbers `(theta_i, v_i)` and reading the tangents of the
/// reverse-sweep adjoints.
pub fn hessian_vector_product<L: TapeLoss>(
    loss: &L,
    theta: &ParamVector,
    v: &[f64],
) -> Result<HvpResult, AdError> {
    if v.len() != theta.len() {
        return Err(AdError::LayoutMismatch {
            expected: theta.len(),
            got: v.len(),
        });
    }
    let mut tape: Tape<Dual> = Tape::new();
    let vars: Vec<Var> = theta
        .values()
        .iter()
        .zip(v)
        .map(|(&x, &t)| tape.input(Dual::new(x, t)))
        .collect();
    let out = loss.build(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_finite_all() {
        return Err(AdError::NonFiniteLoss { value: value.re });
    }
    let g = tape.gradient(out);
    for (i, gi) in g.iter().enumerate() {
        if !gi.is_finite_all() {
            return Err(AdError::NonFiniteGradient {
                block: theta.layout().block_at(i).to_string(),
                index: i,
            });
        }
    }
    Ok(HvpResult {
        loss: value.re,
        gradient: g.iter().map(|d| d.re).collect(),
        hvp: g.iter().map(|d| d.du).collect(),
    })
}

/// Plain SGD step `theta - rate * gradient`.
pub fn apply_update(
    theta: &ParamVector,
    gradient: &ParamVector,
    rate: f64,
) -> Result<ParamVector, AdError> {
    let mut out = theta.clone();
    out.add_scaled(gradient, -rate)?;
    Ok(out)
}

/// Gradient of the meta objective `L_mtr(theta) + L_mte(theta')` with
/// `theta' = theta - inner_rate * grad L_mtr(theta)`.
///
/// In `Exact` mode the chain rule through the inner update contributes
/// `(I - inner_rate * H_mtr) grad L_mte(theta')`, realized as a single
/// Hessian-vector product; `FirstOrder` drops the curvature term.
pub fn grad_through_update<A: TapeLoss, B: TapeLoss>(
    loss_mtr: &A,
    loss_mte: &B,
    theta: &ParamVector,
    inner_rate: f64,
    mode: SecondOrder,
) -> Result<MetaGradResult, AdError> {
    let mtr = grad(loss_mtr, theta)?;
    let theta_prime = apply_update(theta, &mtr.gradient, inner_rate)?;
    let mte = grad(loss_mte, &theta_prime)?;

    let mut total = mtr.gradient;
    total.add_scaled(&mte.gradient, 1.0)?;
    if mode == SecondOrder::Exact && inner_rate != 0.0 {
        let curv = hessian_vector_product(loss_mtr, theta, mte.gradient.values())?;
        for (t, hv) in total.values_mut().iter_mut().zip(&curv.hvp) {
            *t -= inner_rate * hv;
        }
    }
    Ok(MetaGradResult {
        loss_mtr: mtr.loss,
        loss_mte: mte.loss,
        gradient: total,
        theta_prime,
    })
}
