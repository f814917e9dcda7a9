//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Gradients are recorded as ordinary nodes on the same tape, so a gradient
//! can itself be differentiated. The gradient penalty relies on this: it
//! differentiates the norm of an input gradient with respect to the critic
//! weights.
//!
//! A node is *tracked* when it depends on at least one [`Graph::param`]
//! leaf. Untracked subgraphs are plain forward computation and are never
//! visited by [`Graph::grad`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{self, Shape, Tensor, SCALAR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Sqrt(Var),
    Tanh(Var),
    Relu(Var),
    MaskMul(Var, Rc<Tensor>),
    SumTo(Var),
    BroadcastTo(Var),
    Conv(Var, Var, ConvGeom),
    ConvInputGrad(Var, Var, ConvGeom),
    ConvWeightGrad(Var, Var, ConvGeom),
}

impl Op {
    fn inputs(&self) -> ([Option<Var>; 2], usize) {
        use Op::*;
        match *self {
            Leaf => ([None, None], 0),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => ([Some(a), Some(b)], 2),
            Conv(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => {
                ([Some(a), Some(b)], 2)
            }
            Neg(a) | Scale(a, _) | Offset(a) | Sqrt(a) | Tanh(a) | Relu(a) | SumTo(a)
            | BroadcastTo(a) => ([Some(a), None], 1),
            MaskMul(a, _) => ([Some(a), None], 1),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// A differentiation tape. Cheap to create; drop it to free every
/// intermediate.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Untracked leaf: no gradient flows into it.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Tracked leaf: a differentiation target.
    pub fn param(&self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn push_raw(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let (ins, k) = op.inputs();
        let tracked = ins[..k].iter().flatten().any(|v| self.is_tracked(*v));
        self.push_raw(value, op, tracked)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let out = tensor::broadcast_zip(&va, &vb, f)?;
        Ok(self.push(out, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn offset(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::Offset(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    fn mask_mul(&self, a: Var, mask: Rc<Tensor>) -> Result<Var> {
        let out = self.value(a).zip_map(&mask, |x, m| x * m)?;
        Ok(self.push(out, Op::MaskMul(a, mask)))
    }

    /// Sum over the axes where `shape` is 1.
    pub fn sum_to(&self, a: Var, shape: Shape) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let out = tensor::sum_to(&self.value(a), shape)?;
        Ok(self.push(out, Op::SumTo(a)))
    }

    pub fn broadcast_to(&self, a: Var, shape: Shape) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let out = tensor::broadcast_to(&self.value(a), shape)?;
        Ok(self.push(out, Op::BroadcastTo(a)))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.sum_to(a, SCALAR)
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn conv2d(&self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv2d(&self.value(x), &self.value(w), geom)?;
        Ok(self.push(out, Op::Conv(x, w, geom)))
    }

    fn conv_input_grad(&self, g: Var, w: Var, in_shape: Shape, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv2d_input_grad(&self.value(g), &self.value(w), in_shape, geom)?;
        Ok(self.push(out, Op::ConvInputGrad(g, w, geom)))
    }

    fn conv_weight_grad(&self, x: Var, g: Var, w_shape: Shape, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv2d_weight_grad(&self.value(x), &self.value(g), w_shape, geom)?;
        Ok(self.push(out, Op::ConvWeightGrad(x, g, geom)))
    }

    /// Gradients of the single-element node `y` with respect to each of
    /// `wrt`. Targets that `y` does not depend on get a zero constant.
    ///
    /// The returned nodes are tracked whenever they depend on other params,
    /// so they can be differentiated again.
    pub fn grad(&self, y: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(y).len() != 1 {
            return Err(Error::invalid("grad needs a single-element output"));
        }
        let end = y.0 + 1;

        // Only nodes lying on a path from some target to `y` need a gradient.
        let mut relevant = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for v in wrt {
                if v.0 < end {
                    relevant[v.0] = true;
                }
            }
            for i in 0..end {
                if relevant[i] || !nodes[i].tracked {
                    continue;
                }
                let (ins, k) = nodes[i].op.inputs();
                relevant[i] = ins[..k].iter().flatten().any(|v| relevant[v.0]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; end];
        if relevant[y.0] {
            grads[y.0] = Some(self.constant(Tensor::full(self.shape(y), 1.0)));
        }
        for i in (0..end).rev() {
            let Some(gy) = grads[i] else { continue };
            let (op, out_var) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), Var(i))
            };
            self.backprop(&op, out_var, gy, &relevant, &mut grads)?;
        }

        wrt.iter()
            .map(|v| match grads.get(v.0).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(self.shape(*v)))),
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Var>], target: Var, g: Var) -> Result<()> {
        grads[target.0] = Some(match grads[target.0] {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }

    fn backprop(
        &self,
        op: &Op,
        out: Var,
        gy: Var,
        relevant: &[bool],
        grads: &mut [Option<Var>],
    ) -> Result<()> {
        let want = |v: Var| relevant[v.0];
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(a) {
                    let g = self.sum_to(gy, self.shape(a))?;
                    self.accumulate(grads, a, g)?;
                }
                if want(b) {
                    let g = self.sum_to(gy, self.shape(b))?;
                    self.accumulate(grads, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    let g = self.sum_to(gy, self.shape(a))?;
                    self.accumulate(grads, a, g)?;
                }
                if want(b) {
                    let n = self.neg(gy);
                    let g = self.sum_to(n, self.shape(b))?;
                    self.accumulate(grads, b, g)?;
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let p = self.mul(gy, b)?;
                    let g = self.sum_to(p, self.shape(a))?;
                    self.accumulate(grads, a, g)?;
                }
                if want(b) {
                    let p = self.mul(gy, a)?;
                    let g = self.sum_to(p, self.shape(b))?;
                    self.accumulate(grads, b, g)?;
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    let p = self.div(gy, b)?;
                    let g = self.sum_to(p, self.shape(a))?;
                    self.accumulate(grads, a, g)?;
                }
                if want(b) {
                    // d(a/b)/db = -(a/b)/b
                    let p = self.mul(gy, out)?;
                    let q = self.div(p, b)?;
                    let n = self.neg(q);
                    let g = self.sum_to(n, self.shape(b))?;
                    self.accumulate(grads, b, g)?;
                }
            }
            Op::Neg(a) => {
                if want(a) {
                    let g = self.neg(gy);
                    self.accumulate(grads, a, g)?;
                }
            }
            Op::Scale(a, s) => {
                if want(a) {
                    let g = self.scale(gy, s);
                    self.accumulate(grads, a, g)?;
                }
            }
            Op::Offset(a) => {
                if want(a) {
                    self.accumulate(grads, a, gy)?;
                }
            }
            Op::Sqrt(a) => {
                if want(a) {
                    let two_y = self.scale(out, 2.0);
                    let g = self.div(gy, two_y)?;
                    self.accumulate(grads, a, g)?;
                }
            }
            Op::Tanh(a) => {
                if want(a) {
                    let y2 = self.mul(out, out)?;
                    let n = self.neg(y2);
                    let d = self.offset(n, 1.0);
                    let g = self.mul(gy, d)?;
                    self.accumulate(grads, a, g)?;
                }
            }
            Op::Relu(a) => {
                if want(a) {
                    let mask = Rc::new(self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                    let g = self.mask_mul(gy, mask)?;
                    self.accumulate(grads, a, g)?;
                }
            }
            Op::MaskMul(a, ref mask) => {
                if want(a) {
                    let g = self.mask_mul(gy, mask.clone())?;
                    self.accumulate(grads, a, g)?;
                }
            }
            Op::SumTo(a) => {
                if want(a) {
                    let g = self.broadcast_to(gy, self.shape(a))?;
                    self.accumulate(grads, a, g)?;
                }
            }
            Op::BroadcastTo(a) => {
                if want(a) {
                    let g = self.sum_to(gy, self.shape(a))?;
                    self.accumulate(grads, a, g)?;
                }
            }
            Op::Conv(x, w, geom) => {
                if want(x) {
                    let g = self.conv_input_grad(gy, w, self.shape(x), geom)?;
                    self.accumulate(grads, x, g)?;
                }
                if want(w) {
                    let g = self.conv_weight_grad(x, gy, self.shape(w), geom)?;
                    self.accumulate(grads, w, g)?;
                }
            }
            Op::ConvInputGrad(g_in, w, geom) => {
                // out = Aᵀ(w) g_in, linear in both arguments.
                if want(g_in) {
                    let g = self.conv2d(gy, w, geom)?;
                    self.accumulate(grads, g_in, g)?;
                }
                if want(w) {
                    let g = self.conv_weight_grad(gy, g_in, self.shape(w), geom)?;
                    self.accumulate(grads, w, g)?;
                }
            }
            Op::ConvWeightGrad(x, g_in, geom) => {
                if want(x) {
                    let g = self.conv_input_grad(g_in, gy, self.shape(x), geom)?;
                    self.accumulate(grads, x, g)?;
                }
                if want(g_in) {
                    let g = self.conv2d(x, gy, geom)?;
                    self.accumulate(grads, g_in, g)?;
                }
            }
        }
        Ok(())
    }
}
