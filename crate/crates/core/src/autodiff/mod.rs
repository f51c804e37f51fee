//! Tape-based reverse-mode differentiation over real tensors.
//!
//! Nodes are whole tensors, not scalars: each recorded operation keeps its
//! output value and a closure that maps the output cotangent to cotangents of
//! its parents. Layers with heavy internals (the GRU, the physics layers)
//! register as a single fused node. Complex intermediates never appear on the
//! tape; custom nodes carry them as real/imaginary pairs internally.

mod checkpoint;
mod layers;
mod optim;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};

pub use checkpoint::{load_tensors, save_tensors, NamedTensor};
pub use layers::{gru_forward, linear_timedistributed, scaled_tanh, GruWeights};
pub use optim::{LrSchedule, Rmsprop, RmspropConfig};

pub type Tensor = ArrayD<f64>;

type Backward = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Append-only record of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// A named learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered parameter collection; a parameter's index is its identity on
/// the tape and in optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|x| x.is_finite()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(i) = self.index_of(name) {
            self.params[i].trainable = trainable;
        }
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Cotangents of the trainable parameters, indexed like the [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, idx: usize) -> Option<&Tensor> {
        self.grads.get(idx).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<Backward>,
        param: Option<usize>,
        leaf_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = leaf_grad || parents.iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            param,
        });
        Var { tape: self, id }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None, None, false)
    }

    /// A leaf that receives gradients but belongs to no parameter, used to
    /// differentiate with respect to inputs.
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None, None, true)
    }

    /// Leaf for parameter `idx`. Frozen parameters enter as constants.
    pub fn param(&self, params: &ParamSet, idx: usize) -> Var<'_> {
        let p = params.get(idx);
        self.push(p.value.clone(), vec![], None, Some(idx), p.trainable)
    }

    /// Records a custom operation. `backward` receives the output cotangent
    /// and returns one optional cotangent per parent, in order.
    pub fn custom<F>(&self, parents: &[Var<'_>], value: Tensor, backward: F) -> Var<'_>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        self.push(
            value,
            parents.iter().map(|p| p.id).collect(),
            Some(Box::new(backward)),
            None,
            false,
        )
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient of scalar `loss` with respect to every trainable parameter
    /// leaf, and to every [`Tape::input`] leaf.
    pub fn backward(
        &self,
        loss: Var<'_>,
        n_params: usize,
    ) -> Result<(Gradients, Vec<(usize, Tensor)>)> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut cot: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        cot[loss.id] = Some(ArrayD::from_elem(nodes[loss.id].value.raw_dim(), 1.0));
        let mut grads = vec![None; n_params];
        let mut inputs = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = cot[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.parents.iter().any(|&p| p >= id) {
                return Err(Error::Contract(format!(
                    "node {id} depends on a later node"
                )));
            }
            match &node.backward {
                Some(bw) => {
                    let parts = bw(&g);
                    debug_assert_eq!(parts.len(), node.parents.len());
                    for (&p, part) in node.parents.iter().zip(parts) {
                        if let Some(part) = part {
                            if !nodes[p].requires_grad {
                                continue;
                            }
                            match &mut cot[p] {
                                Some(acc) => *acc += &part,
                                slot => *slot = Some(part),
                            }
                        }
                    }
                }
                None => match node.param {
                    Some(pi) => match &mut grads[pi] {
                        Some(acc) => *acc += &g,
                        slot => *slot = Some(g),
                    },
                    None => inputs.push((id, g)),
                },
            }
        }
        Ok((Gradients { grads }, inputs))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn check_same_shape(&self, other: &Var<'_>, op: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{op}: shape mismatch");
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.check_same_shape(other, "add");
        let v = &*self.value() + &*other.value();
        self.tape.custom(&[*self, *other], v, |g| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.check_same_shape(other, "sub");
        let v = &*self.value() - &*other.value();
        self.tape
            .custom(&[*self, *other], v, |g| vec![Some(g.clone()), Some(-g)])
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.check_same_shape(other, "mul");
        let (a, b) = (self.value(), other.value());
        let v = &*a * &*b;
        self.tape.custom(&[*self, *other], v, move |g| {
            vec![Some(g * &*b), Some(g * &*a)]
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = &*self.value() * s;
        self.tape.custom(&[*self], v, move |g| vec![Some(g * s)])
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let y = Rc::new(self.value().mapv(sigmoid));
        let yc = y.clone();
        self.tape.custom(&[*self], (*y).clone(), move |g| {
            vec![Some(
                ndarray::Zip::from(g)
                    .and(&*yc)
                    .map_collect(|&g, &y| g * y * (1.0 - y)),
            )]
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        let y = Rc::new(self.value().mapv(f64::tanh));
        let yc = y.clone();
        self.tape.custom(&[*self], (*y).clone(), move |g| {
            vec![Some(
                ndarray::Zip::from(g)
                    .and(&*yc)
                    .map_collect(|&g, &y| g * (1.0 - y * y)),
            )]
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.raw_dim();
        let v = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.tape.custom(&[*self], v, move |g| {
            let s = g.iter().next().copied().unwrap_or(0.0);
            vec![Some(ArrayD::from_elem(shape.clone(), s))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let v = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: size mismatch");
        self.tape.custom(&[*self], v, move |g| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("size"),
            )]
        })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&self, target: &Tensor) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "mse: shape mismatch");
        let diff = Rc::new(&*x - target);
        let n = x.len() as f64;
        let v = ArrayD::from_elem(IxDyn(&[]), diff.iter().map(|d| d * d).sum::<f64>() / n);
        self.tape.custom(&[*self], v, move |g| {
            let s = g.iter().next().copied().unwrap_or(0.0);
            vec![Some(diff.mapv(|d| 2.0 * d * s / n))]
        })
    }

    /// The scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> f64 {
        *self.value().iter().next().expect("non-empty")
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Entries drawn uniformly from `(-bound, bound)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound))
}

/// Central finite-difference check of `f` at `x`: returns the relative error
/// `||g_fd - g|| / max(||g_fd||, tiny)` against the supplied analytic gradient.
pub fn finite_difference_error<F>(x: &Tensor, analytic: &Tensor, step: f64, mut f: F) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    let mut xp = x.clone();
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xp.as_slice_mut().expect("contiguous")[i];
        xp.as_slice_mut().expect("contiguous")[i] = orig + step;
        let fp = f(&xp);
        xp.as_slice_mut().expect("contiguous")[i] = orig - step;
        let fm = f(&xp);
        xp.as_slice_mut().expect("contiguous")[i] = orig;
        num.push((fp - fm) / (2.0 * step));
    }
    let a = analytic.as_standard_layout();
    let diff: f64 = num
        .iter()
        .zip(a.iter())
        .map(|(n, a)| (n - a) * (n - a))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}
