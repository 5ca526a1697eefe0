//! Define-by-run reverse-mode differentiation over flat `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated. Handles ([`Var`])
//! are plain indices, so expressions read like ordinary arithmetic on the
//! tape:
//!
//! ```
//! use covmol::autodiff::Tape;
//! let tape = Tape::new();
//! let x = tape.leaf(vec![3.0], 1, 1);
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

mod nn;
mod ops;

pub use nn::{
    clip_global_norm, global_norm, gmm_log_density, masked_softmax, semi_orthogonal, Activation,
    Adam, AdamConfig, Mlp, MlpSpec, Param, ParamId, ParamStore, ParamVars,
};

use std::cell::RefCell;

use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient buffers handed to a backward rule, one per parent. A parent that
/// does not need a gradient has an empty buffer.
pub struct ParentGrads<'a> {
    bufs: &'a mut [Vec<f64>],
}

impl ParentGrads<'_> {
    /// Mutable gradient of parent `k`, or `None` when it is not needed.
    pub fn get(&mut self, k: usize) -> Option<&mut [f64]> {
        let b = &mut self.bufs[k];
        if b.is_empty() {
            None
        } else {
            Some(b.as_mut_slice())
        }
    }
}

/// `(grad_out, parent_values, out_value, parent_grads)`; rules must add into
/// the parent gradients.
pub type BackwardFn = Box<dyn Fn(&[f64], &[&[f64]], &[f64], &mut ParentGrads)>;

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, `None` if `v` does not
    /// influence the root or is a constant.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "leaf shape mismatch");
        self.push_node(Node {
            value,
            rows,
            cols,
            parents: Vec::new(),
            needs_grad: true,
            backward: None,
        })
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(value.len(), rows * cols, "constant shape mismatch");
        self.push_node(Node {
            value,
            rows,
            cols,
            parents: Vec::new(),
            needs_grad: false,
            backward: None,
        })
    }

    pub fn scalar_constant(&self, v: f64) -> Var {
        self.constant(vec![v], 1, 1)
    }

    /// Record a custom operation. `backward` is skipped entirely when none of
    /// the parents needs a gradient.
    pub fn push(
        &self,
        value: Vec<f64>,
        rows: usize,
        cols: usize,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Var {
        assert_eq!(value.len(), rows * cols, "op output shape mismatch");
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push_node(Node {
            value,
            rows,
            cols,
            parents: parents.iter().map(|p| p.0).collect(),
            needs_grad,
            backward: needs_grad.then_some(backward),
        })
    }

    /// `(rows, cols)` of `v`.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes.borrow()[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Run `f` on the stored value without copying it.
    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&[f64]) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Single entry of a one-element value.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    /// Reverse sweep from a one-element root; gradients start at zero on
    /// every call.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, has {} entries",
                nodes[root.0].value.len()
            )));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); nodes.len()];
        grads[root.0] = vec![1.0];
        let mut bufs: Vec<Vec<f64>> = Vec::new();
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            if grads[i].is_empty() {
                continue;
            }
            let g_out = std::mem::take(&mut grads[i]);
            bufs.clear();
            for (k, &p) in node.parents.iter().enumerate() {
                let pn = &nodes[p];
                if !pn.needs_grad {
                    bufs.push(Vec::new());
                } else if node.parents[..k].contains(&p) {
                    bufs.push(vec![0.0; pn.value.len()]);
                } else {
                    let mut b = std::mem::take(&mut grads[p]);
                    if b.is_empty() {
                        b = vec![0.0; pn.value.len()];
                    }
                    bufs.push(b);
                }
            }
            let parent_vals: Vec<&[f64]> =
                node.parents.iter().map(|&p| nodes[p].value.as_slice()).collect();
            back(&g_out, &parent_vals, &node.value, &mut ParentGrads { bufs: &mut bufs });
            grads[i] = g_out;
            for (k, &p) in node.parents.iter().enumerate() {
                let b = std::mem::take(&mut bufs[k]);
                if b.is_empty() {
                    continue;
                }
                if node.parents[..k].contains(&p) {
                    for (a, v) in grads[p].iter_mut().zip(&b) {
                        *a += v;
                    }
                } else {
                    grads[p] = b;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error used by gradient checks: `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
