//! Named parameter storage, independent of any single computation graph.
//!
//! Parameters live here between steps; each forward pass binds them into a
//! fresh [`Graph`] as differentiable leaves and remembers the pairing so the
//! optimizer can read gradients back out after `backward`.

use crate::error::{PadError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// Stable handle to one parameter tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Per-position trainability: `1.0` updates, `0.0` freezes. `None`
    /// means fully trainable. Length always matches the value.
    pub update_mask: Option<Vec<Float>>,
}

/// All parameters of a model, in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), value, update_mask: None });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Replace the tensor behind `id` (used by compaction, which shrinks
    /// shapes). Clears any update mask, which no longer lines up.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        self.params[id.0].value = value;
        self.params[id.0].update_mask = None;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn update_mask(&self, id: ParamId) -> Option<&[Float]> {
        self.params[id.0].update_mask.as_deref()
    }

    /// Set which positions of `id` the optimizer may touch.
    pub fn set_update_mask(&mut self, id: ParamId, mask: Option<Vec<Float>>) -> Result<()> {
        if let Some(m) = &mask {
            if m.len() != self.params[id.0].value.numel() {
                return Err(PadError::ShapeMismatch {
                    op: "set_update_mask",
                    detail: format!(
                        "mask length {} vs parameter `{}` with {} elements",
                        m.len(),
                        self.params[id.0].name,
                        self.params[id.0].value.numel()
                    ),
                });
            }
        }
        self.params[id.0].update_mask = mask;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Records which graph leaf each parameter was bound to for one pass.
#[derive(Debug, Default)]
pub struct Binding {
    pairs: Vec<(ParamId, Var)>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind `id` into `g` as a differentiable leaf, reusing the existing
    /// leaf if this pass already bound it.
    pub fn bind(&mut self, g: &mut Graph, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.pairs.iter().find(|(pid, _)| *pid == id) {
            return v;
        }
        let v = g.leaf_grad(params.get(id).clone());
        self.pairs.push((id, v));
        v
    }

    /// Gradients present after `backward`, in binding order. Parameters
    /// that no gradient reached are omitted.
    pub fn grads<'g>(&self, g: &'g Graph) -> Vec<(ParamId, &'g [Float])> {
        self.pairs
            .iter()
            .filter_map(|&(id, v)| g.grad(v).map(|gr| (id, gr)))
            .collect()
    }

    pub fn var_of(&self, id: ParamId) -> Option<Var> {
        self.pairs.iter().find(|(pid, _)| *pid == id).map(|&(_, v)| v)
    }
}
