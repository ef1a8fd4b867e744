//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable op pushes a node holding a backward closure that maps the
//! gradient of its output to gradients of its inputs. Values live behind `Rc` so
//! closures can keep their inputs alive without copying.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// A value produced inside a [`Graph`]. Constants carry no node id.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn constant(value: Tensor) -> Self {
        Self {
            id: None,
            value: Rc::new(value),
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

type BackwardFn = Box<dyn FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Records ops for one forward pass and replays them backwards.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    record: bool,
    training: bool,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// A recording graph bound to `params`; trainable parameters become gradient leaves.
    pub fn new(params: &'p ParamStore) -> Self {
        Self::build(Some(params), true)
    }

    /// A non-recording graph for inference: no tape, no gradients, dropout disabled.
    pub fn inference(params: &'p ParamStore) -> Self {
        let mut g = Self::build(Some(params), false);
        g.training = false;
        g
    }

    /// A recording graph with no parameter store, for exercising ops directly.
    pub fn detached() -> Self {
        Self::build(None, true)
    }

    fn build(params: Option<&'p ParamStore>, record: bool) -> Self {
        Self {
            params,
            record,
            training: record,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    /// Seeds the generator used by stochastic ops (dropout).
    pub fn with_seed(self, seed: u64) -> Self {
        *self.rng.borrow_mut() = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// Toggles training behaviour (dropout) without changing recording.
    pub fn with_training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub(crate) fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var {
        if !self.record {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    /// Binds the named parameter, creating its leaf on first use so that shared
    /// parameters accumulate gradient from every use site.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let store = self
            .params
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let param = store
            .entry(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let var = if param.trainable && self.record {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            Var {
                id: Some(nodes.len() - 1),
                value: param.shared(),
            }
        } else {
            Var {
                id: None,
                value: param.shared(),
            }
        };
        self.bound.borrow_mut().insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Records a differentiable op. `backward` receives the output gradient and a
    /// flag per parent telling whether that parent needs a gradient; it returns one
    /// optional gradient per parent, shaped like the parent.
    pub fn op<F>(&self, value: Tensor, parents: &[&Var], backward: F) -> Var
    where
        F: FnOnce(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        if !self.record || parents.iter().all(|p| p.id.is_none()) {
            return Var::constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    /// Back-propagates from a one-element `root`. The tape is consumed.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        let root_id = root
            .id
            .ok_or_else(|| Error::Validation("backward from a constant".into()))?;
        if root.value.numel() != 1 {
            return Err(Error::Shape(alloc::format!(
                "backward needs a scalar root, got {:?}",
                root.value.shape()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root_id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=root_id).rev() {
            let node = &mut nodes[id];
            let Some(backward) = node.backward.take() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let (Some(pid), Some(pg)) = (parent, pg) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        let params = self
            .bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| v.id.map(|id| (k.clone(), id)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients of a scalar with respect to every leaf of the graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        var.id.and_then(|id| self.grads[id].as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&id| self.grads[id].as_ref())
    }

    /// Parameter gradients keyed by parameter name.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(k, &id)| self.grads[id].as_ref().map(|g| (k.as_str(), g)))
    }

    pub fn into_params(mut self) -> BTreeMap<String, Tensor> {
        let ids = core::mem::take(&mut self.params);
        ids.into_iter()
            .filter_map(|(k, id)| self.grads[id].take().map(|g| (k, g)))
            .collect()
    }
}
