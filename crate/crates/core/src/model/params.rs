use std::collections::HashMap;

use indexmap::IndexMap;

use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Role of a named parameter, derived from its name suffix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or GRU kernel (`*.weight`).
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Batch-norm running mean/variance. Not trained.
    RunningStat,
    /// Learned initial recurrent state (`gru.h0`).
    InitialState,
}

impl ParamKind {
    pub fn of(name: &str) -> Self {
        if name.ends_with(".weight") {
            ParamKind::Weight
        } else if name.ends_with(".gamma") {
            ParamKind::BnScale
        } else if name.ends_with(".beta") {
            ParamKind::BnShift
        } else if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            ParamKind::RunningStat
        } else if name.ends_with(".h0") {
            ParamKind::InitialState
        } else {
            ParamKind::Bias
        }
    }

    pub fn trainable(self) -> bool {
        self != ParamKind::RunningStat
    }

    /// Whether L2 weight decay applies. Kernels and h0 only.
    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::InitialState)
    }
}

/// Ordered name -> tensor map holding every learnable parameter and the
/// batch-norm running statistics of a network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet<T: Scalar = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Adds a parameter. Panics on a duplicate name, which is a construction bug.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter name {name}");
        self.entries.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| ParamKind::of(k).trainable())
            .cloned()
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| ParamKind::of(k).trainable())
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Places every trainable parameter on the tape. With `track` the leaves
    /// receive gradients; otherwise they are constants.
    pub fn bind(&self, tape: &mut Tape<T>, track: bool) -> HashMap<String, Var> {
        self.entries
            .iter()
            .filter(|(k, _)| ParamKind::of(k).trainable())
            .map(|(k, v)| {
                let var = if track {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }

    /// Copies gradients of bound parameters from the tape into each tensor's
    /// gradient slot. Parameters the loss did not reach get zero gradients.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &HashMap<String, Var>) {
        for (name, tensor) in self.entries.iter_mut() {
            if let Some(&var) = bound.get(name) {
                let grad = tape
                    .grad(var)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); tensor.len()]);
                tensor.set_grad(grad).expect("tape value has the parameter's shape");
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.clear_grad();
        }
    }
}
