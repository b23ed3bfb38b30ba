//! Dense rank-1..3 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are value-semantic handles over a shared node. Operations never
//! mutate their inputs; the only in-place writes are gradient accumulation
//! on `requires_grad` leaves during [`backward`] and parameter updates by
//! the optimizer. Each op records its parents and a VJP closure; `backward`
//! walks the recorded graph in reverse topological order.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 3;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with graph recording disabled; every op inside produces plain
/// leaves. Used for inference and validation passes where gradients are
/// never wanted.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    out
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

pub(crate) struct BackwardArgs<'a, S: Scalar> {
    /// Forward output of the node being differentiated.
    pub out: &'a [S],
    /// Upstream gradient, same length as `out`.
    pub gout: &'a [S],
    pub parents: &'a [DenseTensor<S>],
}

/// Returns one gradient contribution per parent; `None` for parents that
/// do not track gradients.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&BackwardArgs<'_, S>) -> Vec<Option<Vec<S>>>>;

struct Node<S: Scalar> {
    id: usize,
    dims: Vec<usize>,
    data: RefCell<Vec<S>>,
    requires_grad: bool,
    /// Present iff `requires_grad`; accumulated across backward calls.
    grad: RefCell<Option<Vec<S>>>,
    /// requires_grad, or any parent tracked.
    tracked: bool,
    parents: Vec<DenseTensor<S>>,
    backward: Option<BackwardFn<S>>,
    op_name: &'static str,
}

pub struct DenseTensor<S: Scalar>(Rc<Node<S>>);

impl<S: Scalar> Clone for DenseTensor<S> {
    fn clone(&self) -> Self {
        DenseTensor(Rc::clone(&self.0))
    }
}

fn check_dims(dims: &[usize], len: usize) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::dimension(
            "tensor",
            format!("rank must be 1..={MAX_RANK}, got {}", dims.len()),
        ));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::dimension("tensor", format!("zero extent in {dims:?}")));
    }
    let numel: usize = dims.iter().product();
    if numel != len {
        return Err(Error::dimension(
            "tensor",
            format!("dims {dims:?} imply {numel} elements, data has {len}"),
        ));
    }
    Ok(())
}

impl<S: Scalar> DenseTensor<S> {
    /// Constant leaf tensor (no gradient tracking).
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        check_dims(&dims, data.len())?;
        Ok(Self::leaf(dims, data, false))
    }

    /// Trainable leaf: `requires_grad` with a zeroed gradient slot.
    pub fn parameter(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        check_dims(&dims, data.len())?;
        Ok(Self::leaf(dims, data, true))
    }

    pub fn scalar(v: S) -> Self {
        Self::leaf(vec![1], vec![v], false)
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        Self::new(dims, vec![S::zero(); numel])
    }

    pub fn from_f64_slice(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    fn leaf(dims: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        let grad = if requires_grad {
            Some(vec![S::zero(); data.len()])
        } else {
            None
        };
        DenseTensor(Rc::new(Node {
            id: next_id(),
            dims,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(grad),
            tracked: requires_grad,
            parents: Vec::new(),
            backward: None,
            op_name: "leaf",
        }))
    }

    /// Graph-internal constructor. Falls back to an untracked leaf when
    /// recording is off or no parent is tracked, so eval passes stay cheap.
    pub(crate) fn from_op(
        dims: Vec<usize>,
        data: Vec<S>,
        parents: Vec<DenseTensor<S>>,
        backward: BackwardFn<S>,
        op_name: &'static str,
    ) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        let tracked = grad_enabled() && parents.iter().any(|p| p.0.tracked);
        if !tracked {
            let mut t = Self::leaf(dims, data, false);
            Rc::get_mut(&mut t.0).expect("fresh leaf").op_name = op_name;
            return t;
        }
        DenseTensor(Rc::new(Node {
            id: next_id(),
            dims,
            data: RefCell::new(data),
            requires_grad: false,
            grad: RefCell::new(None),
            tracked: true,
            parents,
            backward: Some(backward),
            op_name,
        }))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0.dims
    }

    pub fn rank(&self) -> usize {
        self.0.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data().len()
    }

    pub fn last_dim(&self) -> usize {
        *self.0.dims.last().expect("rank >= 1")
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn tracked(&self) -> bool {
        self.0.tracked
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op_name
    }

    pub(crate) fn id(&self) -> usize {
        self.0.id
    }

    /// Two handles over the same underlying node.
    pub fn same_identity(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn data(&self) -> Ref<'_, [S]> {
        Ref::map(self.0.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        let data = self.data();
        if data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor with {} elements",
                data.len()
            )));
        }
        Ok(data[0])
    }

    pub fn is_all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Copy of the accumulated gradient, if this tensor has a grad slot.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Replaces the stored values. Shape must be preserved; intended for
    /// optimizer updates and checkpoint restores on leaf parameters.
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::dimension(
                "set_data",
                format!("expected {} elements, got {}", self.numel(), data.len()),
            ));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    /// In-place update of the stored values through `f`.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(self.0.data.borrow_mut().as_mut_slice());
    }

    /// Adds `delta` to one entry; finite-difference probing.
    pub fn nudge(&self, index: usize, delta: S) {
        self.0.data.borrow_mut()[index] += delta;
    }

    fn accumulate_grad_slot(&self, g: &[S]) {
        let mut slot = self.0.grad.borrow_mut();
        let slot = slot.get_or_insert_with(|| vec![S::zero(); g.len()]);
        for (s, &v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }
}

impl<S: Scalar> fmt::Debug for DenseTensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseTensor")
            .field("dims", &self.0.dims)
            .field("op", &self.0.op_name)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Nodes in reverse-usable order: every node appears after all of its
/// (tracked) parents.
fn topo_order<S: Scalar>(root: &DenseTensor<S>) -> Vec<DenseTensor<S>> {
    enum Visit<S: Scalar> {
        Enter(DenseTensor<S>),
        Exit(DenseTensor<S>),
    }
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack = vec![Visit::Enter(root.clone())];
    while let Some(step) = stack.pop() {
        match step {
            Visit::Enter(node) => {
                if !visited.insert(node.id()) {
                    continue;
                }
                stack.push(Visit::Exit(node.clone()));
                for p in &node.0.parents {
                    if p.0.tracked {
                        stack.push(Visit::Enter(p.clone()));
                    }
                }
            }
            Visit::Exit(node) => order.push(node),
        }
    }
    order
}

/// Reverse-mode sweep from a scalar `root`. Fills the grad slot of every
/// reachable `requires_grad` tensor with d(root)/d(tensor); repeated calls
/// keep accumulating.
pub fn backward<S: Scalar>(root: &DenseTensor<S>) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward root must be scalar, got dims {:?}",
            root.dims()
        )));
    }
    let order = topo_order(root);
    let mut grads: HashMap<usize, Vec<S>> = HashMap::new();
    grads.insert(root.id(), vec![S::one()]);
    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if let Some(back) = &node.0.backward {
            let out = node.data();
            let contribs = back(&BackwardArgs {
                out: &out,
                gout: &g,
                parents: &node.0.parents,
            });
            debug_assert_eq!(contribs.len(), node.0.parents.len());
            for (parent, contrib) in node.0.parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), parent.numel());
                match grads.entry(parent.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (acc, v) in e.get_mut().iter_mut().zip(&c) {
                            *acc += *v;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(c);
                    }
                }
            }
        }
        if node.0.requires_grad {
            node.accumulate_grad_slot(&g);
        }
    }
    Ok(())
}

/// Forward-topological scan for the first non-finite intermediate; used to
/// produce a useful diagnostic when a loss turns NaN.
pub fn first_non_finite<S: Scalar>(root: &DenseTensor<S>) -> Option<(String, Vec<usize>)> {
    let order = topo_order(root);
    order
        .iter()
        .find(|n| !n.is_all_finite())
        .map(|n| (n.op_name().to_string(), n.dims().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn rejects_bad_shapes() {
        assert!(DenseTensor::<f64>::new(vec![], vec![]).is_err());
        assert!(DenseTensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(DenseTensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(DenseTensor::<f64>::new(vec![2, 2, 2, 2], vec![1.0; 16]).is_err());
    }

    #[test]
    fn product_rule_scalars() {
        let x = DenseTensor::parameter(vec![1], vec![3.0f64]).unwrap();
        let y = DenseTensor::parameter(vec![1], vec![4.0f64]).unwrap();
        let z = ops::mul(&x, &y).unwrap();
        backward(&z).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
        assert_eq!(y.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = DenseTensor::parameter(vec![1], vec![2.0f64]).unwrap();
        let y = ops::scale(&x, 3.0).unwrap();
        backward(&y).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn constant_root_leaves_grads_zero() {
        let x = DenseTensor::parameter(vec![1], vec![2.0f64]).unwrap();
        let c = DenseTensor::scalar(5.0f64);
        backward(&c).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let x = DenseTensor::<f64>::zeros(vec![2]).unwrap();
        assert!(matches!(backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // z = x*x: grad 2x through two uses of the same parent.
        let x = DenseTensor::parameter(vec![1], vec![5.0f64]).unwrap();
        let z = ops::mul(&x, &x).unwrap();
        backward(&z).unwrap();
        assert_eq!(x.grad().unwrap(), vec![10.0]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = DenseTensor::parameter(vec![1], vec![2.0f64]).unwrap();
        let y = no_grad(|| ops::scale(&x, 3.0).unwrap());
        assert!(!y.tracked());
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }
}
