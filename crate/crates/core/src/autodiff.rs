//! A small eager reverse-mode differentiation tape over dense matrices.
//!
//! Every forward operation is evaluated immediately and recorded on the
//! [`Tape`]. Calling [`Tape::backward`] walks the record in reverse and
//! accumulates adjoints for every node that depends on a parameter leaf.
//! Nodes that only depend on constants are never differentiated.
//!
//! Kinks follow a single convention: at a hinge, rectifier or clamp
//! boundary the derivative is the one-sided value `0`.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};

type Shared<T> = Rc<Array2<T>>;

enum Op<T: Scalar> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    SumRows(usize),
    NormalizeRows {
        input: usize,
        norms: Vec<T>,
    },
    Sigmoid(usize),
    Recip(usize),
    LeakyRelu(usize, T),
    Softplus(usize),
    Clamp(usize, T, T),
    Bce {
        p: usize,
        y: Shared<T>,
        eps: T,
    },
    Focal {
        p: usize,
        y: Shared<T>,
        gamma: T,
        alpha: T,
        eps: T,
    },
    BceWithLogits {
        x: usize,
        y: Shared<T>,
    },
    SoftHistogram {
        values: usize,
        centers: usize,
        bandwidth: T,
        assign: Array2<T>,
    },
}

struct Node<T: Scalar> {
    value: Shared<T>,
    op: Op<T>,
    tracked: bool,
}

/// Record of a forward computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Array2<T> {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[var.id]),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(256)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Array2<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, false)
    }

    /// A constant leaf sharing storage with the caller.
    pub fn constant_shared(&self, value: Rc<Array2<T>>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A constant 1×1 leaf.
    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Array2<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, true)
    }

    fn push(&self, value: Shared<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Shared<T> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Hash of every branch taken so far: rectifier signs, clamp sides and
    /// probability clamps. Two evaluations with equal signatures lie on the
    /// same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let nodes = self.nodes.borrow();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (id, node) in nodes.iter().enumerate() {
            let input = |i: usize| &nodes[i].value;
            let mut mark = |bits: &mut dyn Iterator<Item = u8>| {
                id.hash(&mut h);
                for b in bits {
                    b.hash(&mut h);
                }
            };
            match &node.op {
                Op::LeakyRelu(a, _) => {
                    mark(&mut input(*a).iter().map(|&x| u8::from(x <= T::zero())));
                }
                Op::Clamp(a, lo, hi) => {
                    mark(
                        &mut input(*a)
                            .iter()
                            .map(|&x| u8::from(x <= *lo) | (u8::from(x >= *hi) << 1)),
                    );
                }
                Op::Bce { p, eps, .. } | Op::Focal { p, eps, .. } => {
                    mark(&mut input(*p).iter().map(|&x| u8::from(clamp_prob(x, *eps).1)));
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep seeded with ones at `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<T>>> = vec![None; nodes.len()];
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.dim()).collect();
        grads[loss.id] = Some(Array2::from_elem(nodes[loss.id].value.dim(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut deltas: Vec<(usize, Array2<T>)> = Vec::with_capacity(2);
            let mut emit = |parent: usize, delta: Array2<T>| {
                if nodes[parent].tracked {
                    deltas.push((parent, delta));
                }
            };
            let val = |i: usize| -> &Array2<T> { &nodes[i].value };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].tracked {
                        emit(*a, g.dot(&val(*b).t()));
                    }
                    if nodes[*b].tracked {
                        emit(*b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::Sub(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].tracked {
                        emit(*a, &g * val(*b));
                    }
                    if nodes[*b].tracked {
                        emit(*b, &g * val(*a));
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    emit(*a, g.mapv(|x| x * k));
                }
                Op::Offset(a) => emit(*a, g),
                Op::Transpose(a) => emit(*a, g.t().to_owned()),
                Op::Reshape(a) => emit(*a, reshaped(&g, shapes[*a])),
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    emit(*a, Array2::from_elem(shapes[*a], s));
                }
                Op::SumRows(a) => {
                    let full = g.broadcast(shapes[*a]).expect("row broadcast").to_owned();
                    emit(*a, full);
                }
                Op::NormalizeRows { input, norms } => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(shapes[*input]);
                    for (r, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = yr.dot(&gr);
                        let inv = T::one() / norms[r];
                        Zip::from(&mut row)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|d, &yv, &gv| *d = (gv - yv * proj) * inv);
                    }
                    emit(*input, dx);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&**y)
                        .for_each(|d, &s| *d = *d * s * (T::one() - s));
                    emit(*a, d);
                }
                Op::Recip(a) => {
                    let y = &node.value;
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&**y)
                        .for_each(|d, &r| *d = -*d * r * r);
                    emit(*a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = *d * slope;
                        }
                    });
                    emit(*a, d);
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| *d = *d * sigmoid(x));
                    emit(*a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let mut d = g;
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        if x <= lo || x >= hi {
                            *d = T::zero();
                        }
                    });
                    emit(*a, d);
                }
                Op::Bce { p, y, eps } => {
                    let eps = *eps;
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*p))
                        .and(&**y)
                        .for_each(|d, &p, &y| {
                            *d = *d * bce_derivative(p, y, eps);
                        });
                    emit(*p, d);
                }
                Op::Focal {
                    p,
                    y,
                    gamma,
                    alpha,
                    eps,
                } => {
                    let (gamma, alpha, eps) = (*gamma, *alpha, *eps);
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*p))
                        .and(&**y)
                        .for_each(|d, &p, &y| {
                            *d = *d * focal_derivative(p, y, gamma, alpha, eps);
                        });
                    emit(*p, d);
                }
                Op::BceWithLogits { x, y } => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*x))
                        .and(&**y)
                        .for_each(|d, &x, &y| *d = *d * (sigmoid(x) - y));
                    emit(*x, d);
                }
                Op::SoftHistogram {
                    values,
                    centers,
                    bandwidth,
                    assign,
                } => {
                    let v = val(*values);
                    let c = val(*centers);
                    let n = T::from_usize(v.nrows()).expect("pixel count");
                    let inv_h2 = T::one() / (*bandwidth * *bandwidth);
                    let mut dv = Array2::<T>::zeros(v.dim());
                    let mut dc = Array2::<T>::zeros(c.dim());
                    let ga: Vec<T> = g.row(0).iter().map(|&gb| gb / n).collect();
                    for (p, arow) in assign.axis_iter(Axis(0)).enumerate() {
                        let vp = v[[p, 0]];
                        // adjoint of the pixel's softmax logits
                        let mean_ga = arow
                            .iter()
                            .zip(&ga)
                            .fold(T::zero(), |acc, (&a, &gb)| acc + a * gb);
                        let mut acc_v = T::zero();
                        for (b, &a) in arow.iter().enumerate() {
                            let dz = a * (ga[b] - mean_ga);
                            let diff = (vp - c[[0, b]]) * inv_h2;
                            acc_v = acc_v - dz * diff;
                            dc[[0, b]] = dc[[0, b]] + dz * diff;
                        }
                        dv[[p, 0]] = acc_v;
                    }
                    if nodes[*values].tracked {
                        emit(*values, dv);
                    }
                    if nodes[*centers].tracked {
                        emit(*centers, dc);
                    }
                }
            }
            for (parent, delta) in deltas {
                let delta = unbroadcast(delta, shapes[parent]);
                match &mut grads[parent] {
                    Some(acc) => acc.zip_mut_with(&delta, |a, &b| *a = *a + b),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Gradients { grads, shapes }
    }
}

fn reshaped<T: Scalar>(m: &Array2<T>, shape: (usize, usize)) -> Array2<T> {
    Array2::from_shape_vec(shape, m.iter().copied().collect()).expect("same element count")
}

fn unbroadcast<T: Scalar>(g: Array2<T>, shape: (usize, usize)) -> Array2<T> {
    if g.dim() == shape {
        return g;
    }
    let mut out = g;
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn broadcast_compatible(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

#[inline]
fn clamp_prob<T: Scalar>(p: T, eps: T) -> (T, bool) {
    let lo = eps;
    let hi = T::one() - eps;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

#[inline]
pub(crate) fn bce_value<T: Scalar>(p: T, y: T, eps: T) -> T {
    let (pc, _) = clamp_prob(p, eps);
    -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
}

#[inline]
fn bce_derivative<T: Scalar>(p: T, y: T, eps: T) -> T {
    let (pc, inside) = clamp_prob(p, eps);
    if !inside {
        return T::zero();
    }
    -y / pc + (T::one() - y) / (T::one() - pc)
}

/// Focal term `-alpha_t (1 - p_t)^gamma ln p_t` for a binary target.
#[inline]
pub(crate) fn focal_value<T: Scalar>(p: T, y: T, gamma: T, alpha: T, eps: T) -> T {
    let (pc, _) = clamp_prob(p, eps);
    let positive = y > T::lit(0.5);
    let pt = if positive { pc } else { T::one() - pc };
    let alpha_t = if positive { alpha } else { T::one() - alpha };
    alpha_t * (T::one() - pt).powf(gamma) * (-pt.ln())
}

#[inline]
fn focal_derivative<T: Scalar>(p: T, y: T, gamma: T, alpha: T, eps: T) -> T {
    let (pc, inside) = clamp_prob(p, eps);
    if !inside {
        return T::zero();
    }
    let positive = y > T::lit(0.5);
    let pt = if positive { pc } else { T::one() - pc };
    let alpha_t = if positive { alpha } else { T::one() - alpha };
    let q = T::one() - pt;
    let focus = if gamma == T::zero() {
        T::zero()
    } else {
        gamma * q.powf(gamma - T::one()) * pt.ln()
    };
    let d_pt = alpha_t * (focus - q.powf(gamma) / pt);
    if positive {
        d_pt
    } else {
        -d_pt
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Array2<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn item(&self) -> T {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn unary(&self, value: Array2<T>, op: Op<T>) -> Var<'t, T> {
        self.tape
            .push(Rc::new(value), op, self.tape.tracked(self.id))
    }

    fn binary(&self, other: Var<'t, T>, value: Array2<T>, op: Op<T>) -> Var<'t, T> {
        let tracked = self.tape.tracked(self.id) || self.tape.tracked(other.id);
        self.tape.push(Rc::new(value), op, tracked)
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.ncols() != b.nrows() {
            return Err(Error::shape(format!(
                "matmul {:?} x {:?}",
                a.dim(),
                b.dim()
            )));
        }
        Ok(self.binary(other, a.dot(&*b), Op::MatMul(self.id, other.id)))
    }

    fn check_broadcast(&self, other: &Var<'t, T>, what: &str) -> Result<()> {
        if !broadcast_compatible(self.shape(), other.shape()) {
            return Err(Error::shape(format!(
                "{what} {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise sum; `other` may broadcast along rows, columns or both.
    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_broadcast(&other, "add")?;
        let v = &*self.value() + &*other.value();
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_broadcast(&other, "sub")?;
        let v = &*self.value() - &*other.value();
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise (Hadamard) product with broadcasting of `other`.
    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_broadcast(&other, "mul")?;
        let v = &*self.value() * &*other.value();
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, k: T) -> Var<'t, T> {
        let v = self.value().mapv(|x| x * k);
        self.unary(v, Op::Scale(self.id, k))
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let v = self.value().mapv(|x| x + c);
        self.unary(v, Op::Offset(self.id))
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: T) -> Var<'t, T> {
        self.scale(-T::one()).add_scalar(c)
    }

    pub fn t(&self) -> Var<'t, T> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.id))
    }

    /// Sum of all entries as a 1×1 node.
    /// Row-major reshape to `(rows, cols)`.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t, T>> {
        let (r, c) = self.shape();
        if r * c != rows * cols {
            return Err(Error::shape(format!(
                "cannot reshape {r}x{c} into {rows}x{cols}"
            )));
        }
        let v = reshaped(&self.value(), (rows, cols));
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.unary(Array2::from_elem((1, 1), s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum()
            .scale(T::one() / T::from_usize(n).expect("count"))
    }

    /// Column sums as a 1×c row.
    pub fn sum_rows(&self) -> Var<'t, T> {
        let v = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(v, Op::SumRows(self.id))
    }

    /// Column means as a 1×c row.
    pub fn mean_rows(&self) -> Var<'t, T> {
        let r = self.shape().0;
        self.sum_rows()
            .scale(T::one() / T::from_usize(r).expect("count"))
    }

    /// Scales every row to unit L2 norm. Rows of zero norm are rejected.
    pub fn normalize_rows(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut out = (*x).clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::DegenerateEmbedding(format!("row {r} has norm {n}")));
            }
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        Ok(self.unary(
            out,
            Op::NormalizeRows {
                input: self.id,
                norms,
            },
        ))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let v = self.value().mapv(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Leaky rectifier; `slope` applies for non-positive inputs. `slope = 1`
    /// gives the identity, `slope = 0` the plain rectifier.
    /// Elementwise `1 / x`; zero entries are rejected.
    pub fn recip(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.iter().any(|&v| v == T::zero()) {
            return Err(Error::validation("reciprocal of zero"));
        }
        let v = x.mapv(|v| T::one() / v);
        Ok(self.unary(v, Op::Recip(self.id)))
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        let v = self
            .value()
            .mapv(|x| if x > T::zero() { x } else { x * slope });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.leaky_relu(T::zero())
    }

    pub fn softplus(&self) -> Var<'t, T> {
        let v = self.value().mapv(softplus);
        self.unary(v, Op::Softplus(self.id))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.max(lo).min(hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    /// Elementwise binary cross-entropy of probabilities against targets,
    /// with probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&self, targets: Rc<Array2<T>>, eps: T) -> Result<Var<'t, T>> {
        self.check_same(&targets, "bce")?;
        let mut v = (*self.value()).clone();
        Zip::from(&mut v)
            .and(&*targets)
            .for_each(|p, &y| *p = bce_value(*p, y, eps));
        Ok(self.unary(
            v,
            Op::Bce {
                p: self.id,
                y: targets,
                eps,
            },
        ))
    }

    /// Elementwise focal loss of probabilities against binary targets.
    pub fn focal(&self, targets: Rc<Array2<T>>, gamma: T, alpha: T, eps: T) -> Result<Var<'t, T>> {
        self.check_same(&targets, "focal")?;
        let mut v = (*self.value()).clone();
        Zip::from(&mut v)
            .and(&*targets)
            .for_each(|p, &y| *p = focal_value(*p, y, gamma, alpha, eps));
        Ok(self.unary(
            v,
            Op::Focal {
                p: self.id,
                y: targets,
                gamma,
                alpha,
                eps,
            },
        ))
    }

    /// Elementwise binary cross-entropy applied to logits.
    pub fn bce_with_logits(&self, targets: Rc<Array2<T>>) -> Result<Var<'t, T>> {
        self.check_same(&targets, "bce_with_logits")?;
        let mut v = (*self.value()).clone();
        Zip::from(&mut v)
            .and(&*targets)
            .for_each(|x, &y| *x = softplus(*x) - *x * y);
        Ok(self.unary(
            v,
            Op::BceWithLogits {
                x: self.id,
                y: targets,
            },
        ))
    }

    /// Soft histogram of a P×1 column of values over bins at `centers` (1×B).
    ///
    /// Each value is assigned to bins with Gaussian-kernel weights normalized
    /// across bins; the result (1×B) is the mean assignment over values.
    pub fn soft_histogram(&self, centers: Var<'t, T>, bandwidth: T) -> Result<Var<'t, T>> {
        let v = self.value();
        let c = centers.value();
        if v.ncols() != 1 || c.nrows() != 1 || c.ncols() == 0 || v.nrows() == 0 {
            return Err(Error::shape(format!(
                "soft_histogram values {:?} centers {:?}",
                v.dim(),
                c.dim()
            )));
        }
        let bins = c.ncols();
        let scale = -T::one() / (T::lit(2.0) * bandwidth * bandwidth);
        let mut assign = Array2::<T>::zeros((v.nrows(), bins));
        for (p, mut row) in assign.axis_iter_mut(Axis(0)).enumerate() {
            let vp = v[[p, 0]];
            let mut zmax = T::neg_infinity();
            for b in 0..bins {
                let d = vp - c[[0, b]];
                let z = d * d * scale;
                row[b] = z;
                zmax = zmax.max(z);
            }
            let mut total = T::zero();
            row.mapv_inplace(|z| {
                let e = (z - zmax).exp();
                total = total + e;
                e
            });
            row.mapv_inplace(|e| e / total);
        }
        let hist = assign
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        Ok(self.binary(
            centers,
            hist,
            Op::SoftHistogram {
                values: self.id,
                centers: centers.id,
                bandwidth,
                assign,
            },
        ))
    }

    fn check_same(&self, targets: &Array2<T>, what: &str) -> Result<()> {
        if self.shape() != targets.dim() {
            return Err(Error::shape(format!(
                "{what} input {:?} targets {:?}",
                self.shape(),
                targets.dim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd<F: Fn(&Array2<f64>) -> f64>(f: F, x: &Array2<f64>) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            g.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / denom < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_and_broadcast_gradients() {
        let x0 = array![[0.3, -1.2, 0.5], [0.9, 0.1, -0.4]];
        let w = array![[1.0, 0.5], [-0.3, 0.2], [0.7, -0.8]];
        let bias = array![[0.1, -0.2]];
        let f = |x: &Array2<f64>| {
            let tape = Tape::new();
            let xv = tape.param(x.clone());
            let y = xv
                .matmul(tape.constant(w.clone()))
                .unwrap()
                .add(tape.constant(bias.clone()))
                .unwrap()
                .sigmoid();
            y.sum().item()
        };
        let tape = Tape::new();
        let xv = tape.param(x0.clone());
        let y = xv
            .matmul(tape.constant(w.clone()))
            .unwrap()
            .add(tape.constant(bias.clone()))
            .unwrap()
            .sigmoid()
            .sum();
        let g = tape.backward(y).wrt(xv);
        assert_close(&g, &fd(f, &x0), 1e-6);
    }

    #[test]
    fn broadcast_operand_gradient_is_reduced() {
        let tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let r = tape.param(array![[0.5, -1.0]]);
        let loss = a.mul(r).unwrap().sum();
        let g = tape.backward(loss).wrt(r);
        assert_eq!(g, array![[4.0, 6.0]]);
    }

    #[test]
    fn normalize_rows_gradient() {
        let x0 = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]];
        let probe = array![[1.0, 2.0, -1.0], [0.5, 0.3, 0.2]];
        let f = |x: &Array2<f64>| {
            let tape = Tape::new();
            let y = tape.param(x.clone()).normalize_rows().unwrap();
            y.mul(tape.constant(probe.clone())).unwrap().sum().item()
        };
        let tape = Tape::new();
        let xv = tape.param(x0.clone());
        let loss = xv
            .normalize_rows()
            .unwrap()
            .mul(tape.constant(probe.clone()))
            .unwrap()
            .sum();
        assert_close(&tape.backward(loss).wrt(xv), &fd(f, &x0), 1e-6);
    }

    #[test]
    fn zero_row_is_degenerate() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(array![[0.0, 0.0]]);
        assert!(matches!(
            x.normalize_rows(),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn pointwise_losses_gradients() {
        let p0 = array![[0.2], [0.7], [0.95], [0.4]];
        let y = Rc::new(array![[0.0], [1.0], [1.0], [0.0]]);
        for kind in 0..3 {
            let f = |p: &Array2<f64>| {
                let tape = Tape::new();
                let v = tape.param(p.clone());
                let l = match kind {
                    0 => v.bce(y.clone(), 1e-7).unwrap(),
                    1 => v.focal(y.clone(), 2.0, 0.25, 1e-7).unwrap(),
                    _ => v.bce_with_logits(y.clone()).unwrap(),
                };
                l.sum().item()
            };
            let tape = Tape::new();
            let v = tape.param(p0.clone());
            let l = match kind {
                0 => v.bce(y.clone(), 1e-7).unwrap(),
                1 => v.focal(y.clone(), 2.0, 0.25, 1e-7).unwrap(),
                _ => v.bce_with_logits(y.clone()).unwrap(),
            };
            let loss = l.sum();
            assert_close(&tape.backward(loss).wrt(v), &fd(f, &p0), 1e-6);
        }
    }

    #[test]
    fn soft_histogram_gradients() {
        let v0 = array![[0.1], [0.45], [0.8], [0.52]];
        let c0 = array![[0.0, 0.33, 0.66, 1.0]];
        let probe = array![[1.0, -2.0, 0.5, 3.0]];
        let eval = |v: &Array2<f64>, c: &Array2<f64>| {
            let tape = Tape::new();
            let h = tape
                .param(v.clone())
                .soft_histogram(tape.param(c.clone()), 0.2)
                .unwrap();
            h.mul(tape.constant(probe.clone())).unwrap().sum().item()
        };
        let tape = Tape::new();
        let vv = tape.param(v0.clone());
        let cv = tape.param(c0.clone());
        let loss = vv
            .soft_histogram(cv, 0.2)
            .unwrap()
            .mul(tape.constant(probe.clone()))
            .unwrap()
            .sum();
        let grads = tape.backward(loss);
        assert_close(&grads.wrt(vv), &fd(|v| eval(v, &c0), &v0), 1e-6);
        assert_close(&grads.wrt(cv), &fd(|c| eval(&v0, c), &c0), 1e-6);
    }

    #[test]
    fn clamp_kills_gradient_outside() {
        let tape = Tape::new();
        let x = tape.param(array![[-0.5, 0.5, 1.5]]);
        let loss = x.clamp(0.0, 1.0).sum();
        assert_eq!(tape.backward(loss).wrt(x), array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn constants_are_not_differentiated() {
        let tape = Tape::new();
        let c = tape.constant(array![[1.0, 2.0]]);
        let p = tape.param(array![[3.0, 4.0]]);
        let loss = c.mul(p).unwrap().sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(c), Array2::<f64>::zeros((1, 2)));
        assert_eq!(grads.wrt(p), array![[1.0, 2.0]]);
    }

    #[test]
    fn reshape_round_trips_gradients() {
        let x0 = array![[0.3], [-1.2], [0.5], [0.9]];
        let m = array![[1.0, 2.0], [-0.5, 0.25]];
        let f = |x: &Array2<f64>| {
            let tape = Tape::new();
            let g = tape.param(x.clone()).reshape(2, 2).unwrap();
            tape.constant(m.clone())
                .matmul(g)
                .unwrap()
                .sigmoid()
                .sum()
                .item()
        };
        let tape = Tape::new();
        let xv = tape.param(x0.clone());
        let grid = xv.reshape(2, 2).unwrap();
        assert_eq!(*grid.value(), array![[0.3, -1.2], [0.5, 0.9]]);
        let y = tape
            .constant(m.clone())
            .matmul(grid)
            .unwrap()
            .sigmoid()
            .sum();
        assert_close(&tape.backward(y).wrt(xv), &fd(f, &x0), 1e-6);
        assert!(xv.reshape(3, 1).is_err());
    }

    #[test]
    fn recip_gradient() {
        let x0 = array![[0.5, -2.0], [3.0, 0.25]];
        let f = |x: &Array2<f64>| {
            let tape = Tape::new();
            tape.param(x.clone()).recip().unwrap().sum().item()
        };
        let tape = Tape::new();
        let xv = tape.param(x0.clone());
        let y = xv.recip().unwrap().sum();
        assert_close(&tape.backward(y).wrt(xv), &fd(f, &x0), 1e-6);
        assert!(tape.constant(array![[0.0]]).recip().is_err());
    }
}
