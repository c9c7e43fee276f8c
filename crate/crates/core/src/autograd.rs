//! Graph construction and reverse-mode differentiation.
//!
//! Network code is written once against the [`Graph`] trait and runs on
//! either of two implementations:
//!
//! * [`Eval`] computes values eagerly and keeps nothing (inference).
//! * [`Tape`] records every op so [`Tape::backward`] can propagate gradients
//!   from a scalar loss back to the parameters that produced it.
//!
//! Parameters live in a [`ParamStore`]; graphs refer to them by [`ParamId`].
//! Gradients returned by `backward` are added into the owning store with
//! [`ParamStore::accumulate`]. A store can be frozen on a particular tape, in
//! which case its parameters enter that graph as constants.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::tensor::{Scalar, Shape, Tensor};

pub type ParamId = usize;

static NEXT_STORE_KEY: AtomicU64 = AtomicU64::new(1);

fn fresh_key() -> u64 {
    NEXT_STORE_KEY.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    name: String,
    dims: Vec<usize>,
    value: Tensor<T>,
    grad: Vec<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Logical shape, e.g. `[c_out]` for a bias even though the tensor is 4-D.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> Tensor<T> {
        Tensor::from_vec(self.value.shape(), self.grad.clone()).expect("grad shape")
    }

    pub fn grad_slice(&self) -> &[T] {
        &self.grad
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore<T> {
    key: u64,
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    /// The copy gets its own identity: gradients recorded against the
    /// original never flow into the clone.
    fn clone(&self) -> Self {
        ParamStore {
            key: fresh_key(),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            key: fresh_key(),
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, dims: &[usize], value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        if dims.iter().product::<usize>() != value.numel() {
            return Err(Error::shape(format!(
                "parameter `{name}`: dims {dims:?} do not match {} elements",
                value.numel()
            )));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            dims: dims.to_vec(),
            grad: vec![T::zero(); value.numel()],
            value,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id];
        if value.shape() != p.value.shape() {
            return Err(Error::shape(format!(
                "parameter `{}`: new value {} vs {}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Mutable access to a parameter's value and gradient buffers.
    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [T], &mut [T]) {
        let p = &mut self.params[id];
        (p.value.data_mut(), &mut p.grad)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds every gradient in `grads` that belongs to this store into the
    /// parameters' gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (&(key, id), g) in &grads.entries {
            if key != self.key {
                continue;
            }
            for (acc, &v) in self.params[id].grad.iter_mut().zip(g.data()) {
                *acc = *acc + v;
            }
        }
    }

    /// Copies values (not gradients) of every parameter, keyed by name.
    pub fn named_values(&self) -> BTreeMap<String, Tensor<T>> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

/// Operations available to network code. `Value` is whatever handle the
/// implementation uses for an intermediate result.
pub trait Graph<T: Scalar> {
    type Value: Clone;

    fn param(&self, store: &ParamStore<T>, id: ParamId) -> Self::Value;
    fn constant(&self, t: Tensor<T>) -> Self::Value;
    fn tensor(&self, v: &Self::Value) -> Tensor<T>;
    fn shape(&self, v: &Self::Value) -> Shape;

    fn conv2d(
        &self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
        spec: &ConvSpec,
    ) -> Result<Self::Value>;
    fn leaky_relu(&self, x: &Self::Value, alpha: f64) -> Self::Value;
    fn sigmoid(&self, x: &Self::Value) -> Self::Value;
    fn add(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `x - s` with `s` a single-element value broadcast over `x`.
    fn sub_scalar(&self, x: &Self::Value, s: &Self::Value) -> Result<Self::Value>;
    /// `a * x + b`.
    fn affine(&self, x: &Self::Value, a: f64, b: f64) -> Self::Value;
    fn concat_channels(&self, xs: &[Self::Value]) -> Result<Self::Value>;
    fn mean_all(&self, x: &Self::Value) -> Self::Value;
    fn mean_spatial(&self, x: &Self::Value) -> Self::Value;
    fn l1(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn log(&self, x: &Self::Value) -> Self::Value;
    fn nearest_upsample(&self, x: &Self::Value, r: usize) -> Result<Self::Value>;
    fn pixel_shuffle(&self, x: &Self::Value, r: usize) -> Result<Self::Value>;
    fn pixel_unshuffle(&self, x: &Self::Value, r: usize) -> Result<Self::Value>;
    fn max_pool2(&self, x: &Self::Value) -> Result<Self::Value>;

    fn relu(&self, x: &Self::Value) -> Self::Value {
        self.leaky_relu(x, 0.0)
    }

    fn scale(&self, x: &Self::Value, s: f64) -> Self::Value {
        self.affine(x, s, 0.0)
    }
}

/// Eager, non-recording evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl<T: Scalar> Graph<T> for Eval {
    type Value = Tensor<T>;

    fn param(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        store.value(id).clone()
    }

    fn constant(&self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn tensor(&self, v: &Tensor<T>) -> Tensor<T> {
        v.clone()
    }

    fn shape(&self, v: &Tensor<T>) -> Shape {
        v.shape()
    }

    fn conv2d(
        &self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: &ConvSpec,
    ) -> Result<Tensor<T>> {
        ops::conv2d(x, weight, bias, spec)
    }

    fn leaky_relu(&self, x: &Tensor<T>, alpha: f64) -> Tensor<T> {
        ops::leaky_relu(x, T::of_f64(alpha))
    }

    fn sigmoid(&self, x: &Tensor<T>) -> Tensor<T> {
        ops::sigmoid(x)
    }

    fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }

    fn sub_scalar(&self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        ops::sub_scalar(x, s)
    }

    fn affine(&self, x: &Tensor<T>, a: f64, b: f64) -> Tensor<T> {
        ops::affine(x, T::of_f64(a), T::of_f64(b))
    }

    fn concat_channels(&self, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = xs.iter().collect();
        ops::concat_channels(&refs)
    }

    fn mean_all(&self, x: &Tensor<T>) -> Tensor<T> {
        ops::mean_all(x)
    }

    fn mean_spatial(&self, x: &Tensor<T>) -> Tensor<T> {
        ops::mean_spatial(x)
    }

    fn l1(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::l1(a, b)
    }

    fn log(&self, x: &Tensor<T>) -> Tensor<T> {
        ops::log(x)
    }

    fn nearest_upsample(&self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        ops::nearest_upsample(x, r)
    }

    fn pixel_shuffle(&self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        ops::pixel_shuffle(x, r)
    }

    fn pixel_unshuffle(&self, x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
        ops::pixel_unshuffle(x, r)
    }

    fn max_pool2(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::max_pool2(x)?.0)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param {
        store: u64,
        id: ParamId,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    LeakyRelu {
        x: usize,
        alpha: T,
    },
    Sigmoid {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    SubScalar {
        x: usize,
        s: usize,
    },
    Affine {
        x: usize,
        a: T,
    },
    Concat {
        xs: Vec<usize>,
        widths: Vec<usize>,
    },
    MeanAll {
        x: usize,
    },
    MeanSpatial {
        x: usize,
    },
    L1 {
        a: usize,
        b: usize,
    },
    Log {
        x: usize,
    },
    NearestUp {
        x: usize,
        r: usize,
    },
    PixelShuffle {
        x: usize,
        r: usize,
    },
    PixelUnshuffle {
        x: usize,
        r: usize,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording graph for one forward/backward pass. Single use: a second call
/// to [`Tape::backward`] fails with [`Error::TapeConsumed`].
#[derive(Debug)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    frozen: RefCell<Vec<u64>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, keyed by (store, parameter).
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    entries: BTreeMap<(u64, ParamId), Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.get(&(store.key(), id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            frozen: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Parameters of `store` bound on this tape after this call are constants.
    pub fn freeze(&self, store: &ParamStore<T>) {
        self.frozen.borrow_mut().push(store.key());
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: &Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn rg(&self, v: &Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Smallest distance of any recorded non-differentiable point (activation
    /// kink, L1 tie, max-pool tie) from the value where it was evaluated.
    /// Finite-difference checks use this to reject instances that sit on a kink.
    pub fn kink_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        let mut margin = f64::INFINITY;
        for node in nodes.iter() {
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::LeakyRelu { x, .. } => {
                    for v in nodes[*x].value.data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::L1 { a, b } => {
                    for (p, q) in nodes[*a].value.data().iter().zip(nodes[*b].value.data()) {
                        margin = margin.min((*p - *q).as_f64().abs());
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let input = &nodes[*x].value;
                    let s = input.shape();
                    let (oh, ow) = (s.h / 2, s.w / 2);
                    for (o, &best) in argmax.iter().enumerate() {
                        let nc = o / (oh * ow);
                        let (i, j) = ((o / ow) % oh, o % ow);
                        let top = input.data()[best].as_f64();
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let k = (nc * s.h + 2 * i + di) * s.w + 2 * j + dj;
                            if k != best {
                                margin = margin.min(top - input.data()[k].as_f64());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Hash of which side of every recorded non-differentiable point the
    /// evaluation landed on. Two evaluations with equal patterns lie in the
    /// same smooth piece of the graph.
    pub fn kink_pattern(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut hasher = std::hash::DefaultHasher::new();
        for node in nodes.iter() {
            match &node.op {
                Op::LeakyRelu { x, .. } => {
                    nodes[*x]
                        .value
                        .data()
                        .iter()
                        .for_each(|v| (*v > T::zero()).hash(&mut hasher));
                }
                Op::L1 { a, b } => {
                    for (p, q) in nodes[*a].value.data().iter().zip(nodes[*b].value.data()) {
                        p.partial_cmp(q).hash(&mut hasher);
                    }
                }
                Op::Log { x } => {
                    let eps = T::of_f64(ops::LOG_EPS);
                    nodes[*x].value.data().iter().for_each(|v| (*v < eps).hash(&mut hasher));
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut hasher),
                _ => {}
            }
        }
        hasher.finish()
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let numel = nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        let mut out = Gradients::default();

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], i: usize, g: Tensor<T>) {
            if !nodes[i].requires_grad {
                return;
            }
            grads[i] = Some(match grads[i].take() {
                None => g,
                Some(prev) => ops::add(&prev, &g).expect("gradient shapes agree"),
            });
        }

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param { store, id } => {
                    let key = (*store, *id);
                    let g = match out.entries.remove(&key) {
                        None => dy,
                        Some(prev) => ops::add(&prev, &dy)?,
                    };
                    out.entries.insert(key, g);
                }
                Op::Conv { x, w, b, spec } => {
                    let cg = ops::conv2d_backward(
                        &nodes[*x].value,
                        &nodes[*w].value,
                        &dy,
                        spec,
                        nodes[*x].requires_grad,
                        nodes[*w].requires_grad,
                        b.is_some_and(|b| nodes[b].requires_grad),
                    )?;
                    if let Some(dx) = cg.dx {
                        acc(&mut grads, &nodes, *x, dx);
                    }
                    if let Some(dw) = cg.dw {
                        acc(&mut grads, &nodes, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        let db = db.reshape(nodes[*b].value.shape())?;
                        acc(&mut grads, &nodes, *b, db);
                    }
                }
                Op::LeakyRelu { x, alpha } => {
                    let g = ops::leaky_relu_backward(&nodes[*x].value, &dy, *alpha);
                    acc(&mut grads, &nodes, *x, g);
                }
                Op::Sigmoid { x } => {
                    let g = ops::sigmoid_backward(&node.value, &dy);
                    acc(&mut grads, &nodes, *x, g);
                }
                Op::Add { a, b } => {
                    acc(&mut grads, &nodes, *a, dy.clone());
                    acc(&mut grads, &nodes, *b, dy);
                }
                Op::SubScalar { x, s } => {
                    let total = dy.data().iter().fold(0.0f64, |a, v| a + v.as_f64());
                    let ds = Tensor::full(nodes[*s].value.shape(), T::of_f64(-total));
                    acc(&mut grads, &nodes, *x, dy);
                    acc(&mut grads, &nodes, *s, ds);
                }
                Op::Affine { x, a } => {
                    let a = *a;
                    acc(&mut grads, &nodes, *x, dy.map(|g| g * a));
                }
                Op::Concat { xs, widths } => {
                    let parts = ops::split_channels(&dy, widths)?;
                    for (x, g) in xs.iter().zip(parts) {
                        acc(&mut grads, &nodes, *x, g);
                    }
                }
                Op::MeanAll { x } => {
                    let s = nodes[*x].value.shape();
                    let g = dy.item() / T::of_f64(s.numel() as f64);
                    acc(&mut grads, &nodes, *x, Tensor::full(s, g));
                }
                Op::MeanSpatial { x } => {
                    let g = ops::mean_spatial_backward(nodes[*x].value.shape(), &dy);
                    acc(&mut grads, &nodes, *x, g);
                }
                Op::L1 { a, b } => {
                    let ga = ops::l1_backward(&nodes[*a].value, &nodes[*b].value, dy.item());
                    if nodes[*b].requires_grad {
                        acc(&mut grads, &nodes, *b, ga.map(|v| -v));
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Log { x } => {
                    let g = ops::log_backward(&nodes[*x].value, &dy);
                    acc(&mut grads, &nodes, *x, g);
                }
                Op::NearestUp { x, r } => {
                    acc(&mut grads, &nodes, *x, ops::nearest_upsample_backward(&dy, *r));
                }
                Op::PixelShuffle { x, r } => {
                    acc(&mut grads, &nodes, *x, ops::pixel_unshuffle(&dy, *r)?);
                }
                Op::PixelUnshuffle { x, r } => {
                    acc(&mut grads, &nodes, *x, ops::pixel_shuffle(&dy, *r)?);
                }
                Op::MaxPool2 { x, argmax } => {
                    let g = ops::max_pool2_backward(nodes[*x].value.shape(), argmax, &dy);
                    acc(&mut grads, &nodes, *x, g);
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Value = Var;

    fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        if self.frozen.borrow().contains(&store.key()) {
            self.push(value, Op::Leaf, false)
        } else {
            self.push(value, Op::Param { store: store.key(), id }, true)
        }
    }

    fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn tensor(&self, v: &Var) -> Tensor<T> {
        self.val(v)
    }

    fn shape(&self, v: &Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    fn conv2d(&self, x: &Var, weight: &Var, bias: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
        let bt = bias.map(|b| self.val(b));
        let y = ops::conv2d(&self.val(x), &self.val(weight), bt.as_ref(), spec)?;
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            y,
            Op::Conv {
                x: x.0,
                w: weight.0,
                b: bias.map(|b| b.0),
                spec: *spec,
            },
            rg,
        ))
    }

    fn leaky_relu(&self, x: &Var, alpha: f64) -> Var {
        let alpha = T::of_f64(alpha);
        let y = ops::leaky_relu(&self.val(x), alpha);
        self.push(y, Op::LeakyRelu { x: x.0, alpha }, self.rg(x))
    }

    fn sigmoid(&self, x: &Var) -> Var {
        let y = ops::sigmoid(&self.val(x));
        self.push(y, Op::Sigmoid { x: x.0 }, self.rg(x))
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::add(&self.val(a), &self.val(b))?;
        Ok(self.push(y, Op::Add { a: a.0, b: b.0 }, self.rg(a) || self.rg(b)))
    }

    fn sub_scalar(&self, x: &Var, s: &Var) -> Result<Var> {
        let y = ops::sub_scalar(&self.val(x), &self.val(s))?;
        Ok(self.push(y, Op::SubScalar { x: x.0, s: s.0 }, self.rg(x) || self.rg(s)))
    }

    fn affine(&self, x: &Var, a: f64, b: f64) -> Var {
        let (a, b) = (T::of_f64(a), T::of_f64(b));
        let y = ops::affine(&self.val(x), a, b);
        self.push(y, Op::Affine { x: x.0, a }, self.rg(x))
    }

    fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        let ts: Vec<Tensor<T>> = xs.iter().map(|v| self.val(v)).collect();
        let refs: Vec<&Tensor<T>> = ts.iter().collect();
        let y = ops::concat_channels(&refs)?;
        let widths = ts.iter().map(|t| t.shape().c).collect();
        let rg = xs.iter().any(|v| self.rg(v));
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.iter().map(|v| v.0).collect(),
                widths,
            },
            rg,
        ))
    }

    fn mean_all(&self, x: &Var) -> Var {
        let y = ops::mean_all(&self.val(x));
        self.push(y, Op::MeanAll { x: x.0 }, self.rg(x))
    }

    fn mean_spatial(&self, x: &Var) -> Var {
        let y = ops::mean_spatial(&self.val(x));
        self.push(y, Op::MeanSpatial { x: x.0 }, self.rg(x))
    }

    fn l1(&self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::l1(&self.val(a), &self.val(b))?;
        Ok(self.push(y, Op::L1 { a: a.0, b: b.0 }, self.rg(a) || self.rg(b)))
    }

    fn log(&self, x: &Var) -> Var {
        let y = ops::log(&self.val(x));
        self.push(y, Op::Log { x: x.0 }, self.rg(x))
    }

    fn nearest_upsample(&self, x: &Var, r: usize) -> Result<Var> {
        let y = ops::nearest_upsample(&self.val(x), r)?;
        Ok(self.push(y, Op::NearestUp { x: x.0, r }, self.rg(x)))
    }

    fn pixel_shuffle(&self, x: &Var, r: usize) -> Result<Var> {
        let y = ops::pixel_shuffle(&self.val(x), r)?;
        Ok(self.push(y, Op::PixelShuffle { x: x.0, r }, self.rg(x)))
    }

    fn pixel_unshuffle(&self, x: &Var, r: usize) -> Result<Var> {
        let y = ops::pixel_unshuffle(&self.val(x), r)?;
        Ok(self.push(y, Op::PixelUnshuffle { x: x.0, r }, self.rg(x)))
    }

    fn max_pool2(&self, x: &Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool2(&self.val(x))?;
        Ok(self.push(y, Op::MaxPool2 { x: x.0, argmax }, self.rg(x)))
    }
}

/// Central-difference gradient `(f(p + h) - f(p - h)) / 2h` of `f` with
/// respect to the listed elements of parameter `id` (all elements when
/// `elements` is `None`). Runs in 64-bit. The parameter is restored exactly.
pub fn finite_diff_grad(
    mut f: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    store: &mut ParamStore<f64>,
    id: ParamId,
    h: f64,
    elements: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let original = store.value(id).clone();
    let all: Vec<usize>;
    let idx = match elements {
        Some(e) => e,
        None => {
            all = (0..original.numel()).collect();
            &all
        }
    };
    let mut out = Vec::with_capacity(idx.len());
    for &k in idx {
        let mut plus = original.data().to_vec();
        plus[k] += h;
        store.set_value(id, Tensor::from_vec(original.shape(), plus)?)?;
        let fp = f(store)?;
        let mut minus = original.data().to_vec();
        minus[k] -= h;
        store.set_value(id, Tensor::from_vec(original.shape(), minus)?)?;
        let fm = f(store)?;
        out.push((fp - fm) / (2.0 * h));
    }
    store.set_value(id, original)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_all_gradient_is_uniform() {
        let mut store = ParamStore::<f64>::new();
        let x = Tensor::from_fn([1, 2, 3, 4], |_, c, h, w| (c + h * w) as f64);
        let id = store.add("x", &[1, 2, 3, 4], x).unwrap();
        let tape = Tape::new();
        let v = tape.param(&store, id);
        let loss = tape.mean_all(&v);
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&grads);
        assert!(store.get(id).grad_slice().iter().all(|&g| g == 1.0 / 24.0));
    }

    #[test]
    fn backward_twice_fails_and_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", &[1], Tensor::scalar(2.0)).unwrap();
        let tape = Tape::new();
        let v = tape.param(&store, id);
        let y = tape.scale(&v, 3.0);
        let grads = tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
        store.accumulate(&grads);
        store.accumulate(&grads);
        assert_eq!(store.get(id).grad_slice(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss { numel: 4 })));
    }

    #[test]
    fn frozen_store_gets_no_gradient() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let ia = a.add("a", &[1], Tensor::scalar(1.5)).unwrap();
        let ib = b.add("b", &[1], Tensor::scalar(-0.5)).unwrap();
        let tape = Tape::new();
        tape.freeze(&b);
        let s = tape.add(&tape.param(&a, ia), &tape.param(&b, ib)).unwrap();
        let grads = tape.backward(s).unwrap();
        a.accumulate(&grads);
        b.accumulate(&grads);
        assert_eq!(a.get(ia).grad_slice(), &[1.0]);
        assert_eq!(b.get(ib).grad_slice(), &[0.0]);
        assert!(grads.get(&b, ib).is_none());
    }

    #[test]
    fn shared_parameter_gradients_sum() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", &[1], Tensor::scalar(2.0)).unwrap();
        let tape = Tape::new();
        let p1 = tape.param(&store, id);
        let p2 = tape.param(&store, id);
        let y = tape.add(&tape.scale(&p1, 2.0), &tape.scale(&p2, 5.0)).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(&store, id).unwrap().item(), 7.0);
    }

    #[test]
    fn clone_gets_new_identity() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", &[1], Tensor::scalar(1.0)).unwrap();
        let copy = store.clone();
        assert_ne!(copy.key(), store.key());
        assert!(store.add("w", &[1], Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn finite_difference_restores_parameter() {
        let mut store = ParamStore::<f64>::new();
        let x = Tensor::from_fn([1, 1, 2, 2], |_, _, h, w| 0.3 + (h * 2 + w) as f64);
        let id = store.add("x", &[1, 1, 2, 2], x.clone()).unwrap();
        let g = finite_diff_grad(
            |s| Ok(s.value(id).data().iter().map(|v| v * v).sum()),
            &mut store,
            id,
            1e-5,
            None,
        )
        .unwrap();
        for (gi, xi) in g.iter().zip(x.data()) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
        assert!(store.value(id).bitwise_eq(&x));
    }
}
