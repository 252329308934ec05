//! Named parameter registry and plain SGD.

use std::collections::HashMap;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Param<T> {
    name: String,
    value: Tensor<T>,
    grad: Option<Vec<T>>,
}

/// Ordered set of named parameters. Registration order is the canonical
/// order for initialization, checkpoints and updates.
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name '{name}'")));
        }
        self.params.push(Param { name: name.to_string(), value, grad: None });
        let id = ParamId(self.params.len() - 1);
        self.by_name.insert(name.to_string(), id.0);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(Error::Shape(format!(
                "parameter '{}' shape {:?} cannot be replaced by {:?}",
                self.params[id.0].name,
                self.params[id.0].value.shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if g.len() != p.value.numel() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match parameter '{}' ({} elements)",
                g.len(),
                p.name,
                p.value.numel()
            )));
        }
        let buf = p.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (d, &s) in buf.iter_mut().zip(g.iter()) {
            *d += s;
        }
        Ok(())
    }

    /// Give every parameter without a gradient an all-zero one. Heads that a
    /// step never exercised then take a zero update instead of erroring.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(vec![T::zero(); p.value.numel()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// p <- p - lr * grad for every parameter, then zero the gradients.
    /// A registered parameter without a populated gradient is an error.
    pub fn sgd_step(&mut self, lr: T) -> Result<()> {
        for p in &self.params {
            if p.grad.is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        for p in &mut self.params {
            let g = p.grad.as_ref().unwrap();
            let data = p.value.data_mut();
            for (v, &gv) in data.iter_mut().zip(g.iter()) {
                *v = *v - lr * gv;
            }
            p.grad = None;
        }
        Ok(())
    }

    pub fn grads_are_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.grad.as_ref().map_or(true, |g| g.iter().all(|v| v.is_finite())))
    }
}

/// Tracks which tape leaf each parameter was bound to during one forward
/// pass, so gradients can be harvested back after `backward`.
pub struct Bindings {
    pairs: Vec<(ParamId, Var)>,
}

impl Default for Bindings {
    fn default() -> Self {
        Self::new()
    }
}

impl Bindings {
    pub fn new() -> Self {
        Self { pairs: Vec::new() }
    }

    /// Bind a parameter value onto the tape as a leaf.
    pub fn bind<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        id: ParamId,
        trainable: bool,
    ) -> Var {
        let v = tape.leaf(params.value(id).clone(), trainable);
        if trainable {
            self.pairs.push((id, v));
        }
        v
    }

    /// Copy tape gradients back into the parameter set (additive).
    pub fn harvest<T: Scalar>(&self, tape: &Tape<T>, params: &mut ParamSet<T>) -> Result<()> {
        for &(id, var) in &self.pairs {
            if let Some(g) = tape.grad(var) {
                params.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }
}
