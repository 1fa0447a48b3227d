//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every differentiable op records a backward closure that is itself built
//! from differentiable ops. Running [`grad`] with `create_graph = true`
//! therefore yields gradients that can be differentiated again, which the
//! gradient-penalty term needs.
//!
//! Graphs are reference counted and thread-local: a [`Var`] is `!Send`.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Var, &Var, &[Var]) -> Vec<Option<Var>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// A tensor-valued node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording switched on or off.
pub fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A leaf that gradients are taken with respect to.
    pub fn leaf(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    pub(crate) fn from_op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&Var, &Var, &[Var]) -> Vec<Option<Var>> + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            parents,
            backward: Some(Box::new(backward)),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

/// Gradients of a scalar `output` with respect to each of `inputs`.
///
/// `None` means the input does not influence the output. With
/// `create_graph` the returned gradients are themselves differentiable.
pub fn grad(output: &Var, inputs: &[Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(
        output.value().numel(),
        1,
        "grad() needs a scalar output, got shape {:?}",
        output.shape()
    );
    let seed = Var::constant(Tensor::ones(output.shape()));
    grad_with_seed(output, seed, inputs, create_graph)
}

/// Vector-Jacobian product: gradients of `⟨seed, output⟩`.
pub fn grad_with_seed(
    output: &Var,
    seed: Var,
    inputs: &[Var],
    create_graph: bool,
) -> Vec<Option<Var>> {
    if !output.requires_grad() {
        return vec![None; inputs.len()];
    }
    let order = topo_order(output);
    let keep: HashSet<usize> = inputs.iter().map(Var::id).collect();
    let mut grads: HashMap<usize, Var> = HashMap::new();
    let mut kept: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.id(), seed);

    with_grad_mode(create_graph, || {
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if keep.contains(&node.id()) {
                kept.insert(node.id(), g.clone());
            }
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let parent_grads = backward(node, &g, &node.0.parents);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                let entry = grads.remove(&p.id());
                let acc = match entry {
                    Some(prev) => crate::ops::add(&prev, &pg),
                    None => pg,
                };
                grads.insert(p.id(), acc);
            }
        }
    });
    inputs.iter().map(|v| kept.get(&v.id()).cloned()).collect()
}

/// Plain tensor gradients, zero-filled where an input is unused.
pub fn grad_tensors(output: &Var, inputs: &[Var]) -> Vec<Tensor> {
    grad(output, inputs, false)
        .into_iter()
        .zip(inputs)
        .map(|(g, v)| match g {
            Some(g) => g.value().clone(),
            None => Tensor::zeros(v.shape()),
        })
        .collect()
}

fn topo_order(output: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}
