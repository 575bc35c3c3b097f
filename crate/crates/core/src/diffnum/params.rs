use std::collections::BTreeMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors of one model, keyed by slash-separated path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters placed on a graph, either as trainable leaves or as constants.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// A copy in which every name bound in `other` takes `other`'s variable.
    pub fn overridden_by(&self, other: &Bound) -> Bound {
        let mut vars = self.vars.clone();
        vars.extend(other.vars.iter().map(|(k, v)| (k.clone(), *v)));
        Bound { vars }
    }
}

pub type GradMap = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Collects per-parameter gradients; unused parameters get zeros.
    pub fn grads(&self, bound: &Bound, grads: &Gradients) -> GradMap {
        bound.vars.iter().map(|(k, &v)| (k.clone(), grads.wrt(v))).collect()
    }

    /// Copies every tensor from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Invalid(format!(
                "parameter count mismatch: expected {}, got {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in self.tensors.iter_mut() {
            let src = other
                .tensors
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: expected {:?}, got {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Prefixes every key with `prefix/`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (k, t) in other.tensors {
            self.tensors.insert(format!("{prefix}/{k}"), t);
        }
    }

    /// Order-sensitive 64-bit FNV-1a hash over names, shapes and exact bit
    /// patterns. Any mutation of any value changes it.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (k, t) in &self.tensors {
            eat(k.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    #[allow(dead_code)]
    pub(crate) fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub(crate) fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}
