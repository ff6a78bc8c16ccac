use std::collections::HashMap;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Named parameters in registration order.
///
/// Iteration order is the order in which parameters were added, which the
/// model fixes by construction; checkpoints and flattening rely on it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Adds `grad` into the accumulated gradient of parameter `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.tensor.shape() {
            return Err(Error::dim(
                "accumulate_grad",
                format!("gradient {} for {} of shape {}", grad.shape(), p.name, p.tensor.shape()),
            ));
        }
        match &mut p.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(a, g)| *a += g),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// All trainable values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    /// Accumulated gradients in the same layout as [`flatten`](Self::flatten);
    /// parameters without a gradient contribute zeros.
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in self.params.iter().filter(|p| p.trainable) {
            match &p.grad {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(p.tensor.numel())),
            }
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::dim(
                "assign_flat",
                format!("expected {} values, got {}", self.num_scalars(), values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "assign_flat" });
        }
        let mut offset = 0;
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Shapes in parameter order, used to compare architectures.
    pub fn shapes(&self) -> Vec<(String, Shape)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape()))
            .collect()
    }
}
