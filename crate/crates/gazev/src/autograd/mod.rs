//! Minimal reverse-mode autodiff over flat f32 buffers.
//!
//! Feature maps use NHWC layout (batch, height, width, channel) so that a
//! convolution lowers to one im2col copy plus one gemm call with no
//! transposes. The tape is a DAG of reference-counted nodes; node ids are
//! allocated monotonically, so walking ids in descending order is a
//! topological order and backward needs no explicit sort beyond that.
//! Everything is single-threaded and allocation order is fixed, which makes
//! whole training runs bit-reproducible.

mod adam;
pub mod linalg;
mod ops;
mod param;

pub use adam::Adam;
pub use param::{Init, Param, ParamSet};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording the tape; forward passes inside are pure data.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

pub(crate) fn grad_disabled() -> bool {
    NO_GRAD.with(|c| c.get())
}

type BackwardFn = Box<dyn Fn(&Node, &[f32]) -> Vec<Option<Vec<f32>>>>;

pub struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param_id: Option<u64>,
}

/// A value on the tape.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl Tensor {
    pub(crate) fn from_node(node: Node) -> Self {
        Tensor(Rc::new(node))
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(data: Vec<f32>, shape: &[usize]) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        Tensor::from_node(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param_id: None,
        })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::constant(vec![v], &[])
    }

    pub(crate) fn op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let track = !grad_disabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Tensor::from_node(Node {
                id: next_id(),
                shape,
                data,
                parents,
                backward: Some(backward),
                requires_grad: true,
                param_id: None,
            })
        } else {
            Tensor::from_node(Node {
                id: next_id(),
                shape,
                data,
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
                param_id: None,
            })
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    /// Cut the tape: same data, new constant leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.data.clone(), &self.0.shape)
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    pub(crate) fn param_id(&self) -> Option<u64> {
        self.0.param_id
    }

    pub(crate) fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn leaf_for_param(param_id: u64, data: Vec<f32>, shape: Vec<usize>) -> Tensor {
        let track = !grad_disabled();
        Tensor::from_node(Node {
            id: next_id(),
            shape,
            data,
            parents: Vec::new(),
            backward: None,
            requires_grad: track,
            param_id: if track { Some(param_id) } else { None },
        })
    }
}

impl Node {
    pub(crate) fn parent_data(&self, i: usize) -> &[f32] {
        self.parents[i].data()
    }
    pub(crate) fn parent_shape(&self, i: usize) -> &[usize] {
        self.parents[i].shape()
    }
    pub(crate) fn out_data(&self) -> &[f32] {
        &self.data
    }
}

/// Gradients keyed by parameter id after a backward pass.
#[derive(Default)]
pub struct GradStore {
    by_param: HashMap<u64, Vec<f32>>,
}

impl GradStore {
    pub fn get(&self, param: &Param) -> Option<&[f32]> {
        self.by_param.get(&param.id()).map(|v| v.as_slice())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.by_param.keys().copied()
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate per node in
/// descending id order, which is a topological order by construction.
pub fn backward(loss: &Tensor) -> GradStore {
    assert_eq!(loss.len(), 1, "backward() expects a scalar loss");

    // Gather the reachable subgraph that requires grad.
    let mut nodes: HashMap<u64, Tensor> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if !t.requires_grad() || nodes.contains_key(&t.id()) {
            continue;
        }
        for p in &t.0.parents {
            stack.push(p.clone());
        }
        nodes.insert(t.id(), t);
    }

    let mut order: Vec<u64> = nodes.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let grads: RefCell<HashMap<u64, Vec<f32>>> = RefCell::new(HashMap::new());
    grads.borrow_mut().insert(loss.id(), vec![1.0]);

    let mut store = GradStore::default();
    for id in order {
        let node = &nodes[&id];
        let Some(grad) = grads.borrow_mut().remove(&id) else {
            continue; // reachable but received no gradient (e.g. clamp cut it)
        };
        if let Some(pid) = node.param_id() {
            store.by_param.insert(pid, grad);
            continue;
        }
        let Some(bw) = node.0.backward.as_ref() else {
            continue;
        };
        let contribs = bw(&node.0, &grad);
        debug_assert_eq!(contribs.len(), node.0.parents.len());
        for (parent, contrib) in node.0.parents.iter().zip(contribs) {
            let Some(contrib) = contrib else { continue };
            if !parent.requires_grad() {
                continue;
            }
            let mut g = grads.borrow_mut();
            match g.get_mut(&parent.id()) {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                None => {
                    g.insert(parent.id(), contrib);
                }
            }
        }
    }
    store
}
