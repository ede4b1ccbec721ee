//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] records every forward op in execution order, so the record
//! list is topologically sorted by construction. [`Tape::backward`] walks it
//! once in reverse, accumulating adjoints, and scatters parameter adjoints
//! into a [`GradStore`] keyed by [`ParamId`].
//!
//! Layer ops (convolutions, norms, activations, loss) live in [`crate::nn`];
//! this module owns the record format, the parameter registry and the
//! elementwise primitives.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{self, ActivationKind, NormSaved};
use crate::tensor::{Element, Shape4, Tensor4};

/// Stable index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor4<T>,
    /// Whether decoupled weight decay applies (false for biases and norm affine terms).
    pub decay: bool,
}

/// Registry of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor4<T>, decay: bool) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.into(),
            value,
            decay,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct GradStore<T> {
    params: Vec<Tensor4<T>>,
    leaves: HashMap<usize, Tensor4<T>>,
}

impl<T: Element> GradStore<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            params: store.iter().map(|(_, p)| Tensor4::zeros(p.value.shape())).collect(),
            leaves: HashMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0]
    }

    /// Adjoint of a leaf input, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&Tensor4<T>> {
        self.leaves.get(&v.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor4<T>)> {
        self.params.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor4<T>)> {
        self.params.iter_mut().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Global L2 norm over all parameter adjoints.
    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Sum(Var),
    PatchEmbed { x: Var, w: Var, b: Var, patch: usize },
    Depthwise { x: Var, w: Var, b: Var },
    PointwiseSlice { x: Var, w: Var, b: Var, start: usize },
    Strided3d { x: Var, w: Var, b: Var },
    Permute { x: Var, perm: Vec<usize> },
    Norm { x: Var, gamma: Var, beta: Var, saved: NormSaved<T> },
    Activation { x: Var, kind: ActivationKind },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddChannel(a, b) | Op::MulChannel(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Sum(a) | Op::GlobalAvgPool(a) => vec![*a],
            Op::Permute { x, .. } | Op::Activation { x, .. } => vec![*x],
            Op::PatchEmbed { x, w, b, .. }
            | Op::Depthwise { x, w, b }
            | Op::PointwiseSlice { x, w, b, .. }
            | Op::Strided3d { x, w, b }
            | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
}

/// Ordered record of forward ops. Single writer; not shared across steps.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        // Inputs beyond 1e6 may overflow legitimately; those surface as a non-finite loss.
        #[cfg(debug_assertions)]
        {
            let moderate = op
                .inputs()
                .iter()
                .all(|v| self.nodes[v.0].value.data().iter().all(|x| x.as_f64().abs() <= 1e6));
            if moderate && !matches!(op, Op::Leaf | Op::Param(_)) {
                assert!(value.all_finite(), "non-finite output from moderate finite inputs");
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var(id)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a read of a parameter; its adjoint flows back to `id`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa} vs {sb}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor4<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor4::from_vec(va.shape(), data).expect("shapes checked")
    }

    fn channel_operand(&self, x: Var, c: Var, what: &str) -> Result<()> {
        let (sx, sc) = (self.shape(x), self.shape(c));
        if sc != (Shape4 { n: 1, c: sx.c, h: 1, w: 1 }) {
            return Err(Error::Shape(format!("{what}: channel operand {sc} does not broadcast over {sx}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// `x + b[c]` with `b` shaped `(1, c, 1, 1)`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        self.channel_operand(x, b, "add_channel")?;
        let v = self.channel_map(x, b, |v, c| v + c);
        Ok(self.push(v, Op::AddChannel(x, b)))
    }

    /// `x * g[c]` with `g` shaped `(1, c, 1, 1)`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        self.channel_operand(x, g, "mul_channel")?;
        let v = self.channel_map(x, g, |v, c| v * c);
        Ok(self.push(v, Op::MulChannel(x, g)))
    }

    fn channel_map(&self, x: Var, c: Var, f: impl Fn(T, T) -> T) -> Tensor4<T> {
        let xv = self.value(x);
        let cv = self.value(c).data();
        let s = xv.shape();
        let plane = s.plane();
        let mut out = xv.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let k = cv[i % s.c];
            for v in chunk {
                *v = f(*v, k);
            }
        }
        out
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor4::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Reverse pass from a scalar node.
    ///
    /// Every parameter in `store` gets an adjoint of its own shape; parameters
    /// the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<GradStore<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {ls}")));
        }
        let mut out = GradStore::zeros_like(store);
        let mut adj: Vec<Option<Tensor4<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor4::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, grad: Tensor4<T>| match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => {
                    if id.0 >= out.params.len() {
                        return Err(Error::Contract(format!(
                            "tape references parameter {} not present in the store",
                            id.0
                        )));
                    }
                    out.params[id.0].add_assign(&g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = zip(&g, vb, |x, y| x * y);
                    let gb = zip(&g, va, |x, y| x * y);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    send(*a, g.map(|v| v * s));
                }
                Op::AddChannel(x, b) => {
                    let gb = channel_reduce(&g, None);
                    send(*b, gb);
                    send(*x, g);
                }
                Op::MulChannel(x, c) => {
                    let xv = self.value(*x);
                    let cv = self.value(*c);
                    let gc = channel_reduce(&g, Some(xv));
                    let mut gx = g;
                    let s = gx.shape();
                    let plane = s.plane();
                    for (k, chunk) in gx.data_mut().chunks_mut(plane).enumerate() {
                        let m = cv.data()[k % s.c];
                        chunk.iter_mut().for_each(|v| *v *= m);
                    }
                    send(*c, gc);
                    send(*x, gx);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let shape = self.shape(*a);
                    send(*a, Tensor4::from_vec(shape, vec![s; shape.numel()]).expect("shape"));
                }
                Op::PatchEmbed { x, w, b, patch } => {
                    let gr = kernels::patch_embed_backward(self.value(*x), self.value(*w), *patch, &g);
                    send(*x, gr.input);
                    send(*w, gr.weight);
                    send(*b, gr.bias);
                }
                Op::Depthwise { x, w, b } => {
                    let gr = kernels::depthwise_backward(self.value(*x), self.value(*w), &g);
                    send(*x, gr.input);
                    send(*w, gr.weight);
                    send(*b, gr.bias);
                }
                Op::PointwiseSlice { x, w, b, start } => {
                    let gr = kernels::pointwise_slice_backward(self.value(*x), self.value(*w), *start, &g);
                    send(*x, gr.input);
                    send(*w, gr.weight);
                    send(*b, gr.bias);
                }
                Op::Strided3d { x, w, b } => {
                    let gr = kernels::strided3d_backward(self.value(*x), self.value(*w), &g);
                    send(*x, gr.input);
                    send(*w, gr.weight);
                    send(*b, gr.bias);
                }
                Op::Permute { x, perm } => {
                    send(*x, nn::permute_channels_inverse(&g, perm));
                }
                Op::Norm { x, gamma, beta, saved } => {
                    let (gx, gg, gb) = nn::norm_backward(self.value(*x), self.value(*gamma), saved, &g);
                    send(*x, gx);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::Activation { x, kind } => {
                    send(*x, nn::activation_backward(self.value(*x), *kind, &g));
                }
                Op::GlobalAvgPool(x) => {
                    send(*x, nn::global_avg_pool_backward(self.shape(*x), &g));
                }
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = nn::linear_backward(self.value(*x), self.value(*w), &g);
                    send(*x, gx);
                    send(*w, gw);
                    send(*b, gb);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let gl = nn::cross_entropy_backward(self.shape(*logits), labels, probs, g.data()[0]);
                    send(*logits, gl);
                }
            }
        }
        Ok(out)
    }
}

fn zip<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>, f: impl Fn(T, T) -> T) -> Tensor4<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::from_vec(a.shape(), data).expect("shape")
}

/// Per-channel sum of `g` (optionally weighted elementwise by `w`) as `(1,c,1,1)`.
fn channel_reduce<T: Element>(g: &Tensor4<T>, w: Option<&Tensor4<T>>) -> Tensor4<T> {
    let s = g.shape();
    let plane = s.plane();
    let mut acc = vec![T::zero(); s.c];
    for (k, chunk) in g.data().chunks(plane).enumerate() {
        let part: T = match w {
            None => chunk.iter().copied().sum(),
            Some(w) => chunk
                .iter()
                .zip(&w.data()[k * plane..(k + 1) * plane])
                .map(|(&a, &b)| a * b)
                .sum(),
        };
        acc[k % s.c] += part;
    }
    Tensor4::from_vec(Shape4 { n: 1, c: s.c, h: 1, w: 1 }, acc).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], v: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_dims(dims, v).unwrap()
    }

    #[test]
    fn linear_function_gradient_is_the_input() {
        let mut store = ParamStore::new();
        let w = store.register("w", t([1, 1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]), true);
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let wv = tape.param(&store, w);
        let prod = tape.mul(wv, x).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.param(w).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut store = ParamStore::new();
        let w = store.register("w", t([1, 1, 1, 1], vec![3.0]), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        let sq = tape.mul(a, b).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.param(w).data(), &[6.0]);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut store = ParamStore::new();
        let used = store.register("used", t([1, 1, 1, 2], vec![1.0, 2.0]), true);
        let unused = store.register("unused", t([1, 2, 1, 1], vec![5.0, 6.0]), true);
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let loss = tape.sum(u);
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.param(unused).data(), &[0.0, 0.0]);
        assert_eq!(grads.param(unused).shape(), store.value(unused).shape());
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x, &store), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let xv = t([1, 2, 1, 2], vec![1.0, -2.0, 3.5, 0.25]);
        let x = tape.leaf(xv.clone());
        let z = tape.leaf(Tensor4::zeros(xv.shape()));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), &xv);
        let one = tape.scale(x, 1.0);
        assert_eq!(tape.value(one), &xv);
    }

    #[test]
    fn mul_backward_is_the_other_operand() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let a = tape.leaf(t([1, 1, 1, 3], vec![1.0, 2.0, 3.0]));
        let b = tape.leaf(t([1, 1, 1, 3], vec![-4.0, 5.0, 0.5]));
        let m = tape.mul(a, b).unwrap();
        let loss = tape.sum(m);
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[-4.0, 5.0, 0.5]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor4::zeros(Shape4::new(1, 1, 2, 2).unwrap()));
        let b = tape.leaf(Tensor4::zeros(Shape4::new(1, 1, 2, 3).unwrap()));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut store = ParamStore::new();
        let w = store.register("w", t([1, 2, 1, 2], vec![0.3, -0.7, 1.1, 0.2]), true);
        let xv = t([1, 2, 1, 2], vec![1.5, 2.5, -0.5, 4.0]);

        let run = |which: u8| {
            let mut tape = Tape::new();
            let wv = tape.param(&store, w);
            let x = tape.leaf(xv.clone());
            let l1 = {
                let p = tape.mul(wv, x).unwrap();
                tape.sum(p)
            };
            let l2 = {
                let sq = tape.mul(wv, wv).unwrap();
                tape.sum(sq)
            };
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(loss, &store).unwrap().param(w).clone()
        };
        let (g1, g2, g12) = (run(0), run(1), run(2));
        for i in 0..4 {
            assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-12);
        }
    }
}
