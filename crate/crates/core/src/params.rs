//! Named parameter collections and the trainable mask.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// A collection of tensors addressable by stable dotted names.
///
/// `named` and `named_mut` must list the same names in the same order.
pub trait Parameters<T: Real> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    fn param_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Record every tensor as a tape leaf; trainable iff its name is in `mask`.
    fn bind(&self, tape: &mut Tape<T>, mask: &TrainableMask) -> Vec<(String, Var)> {
        self.named()
            .into_iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.clone(), mask.contains(&name));
                (name, v)
            })
            .collect()
    }
}

/// The exact set of parameter names an optimizer may update.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainableMask {
    names: BTreeSet<String>,
}

impl TrainableMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    /// Every name of `params`.
    pub fn all<T: Real>(params: &dyn Parameters<T>) -> Self {
        Self::from_names(params.named().into_iter().map(|(n, _)| n))
    }

    pub fn insert(&mut self, name: impl Into<String>) {
        self.names.insert(name.into());
    }

    pub fn extend(&mut self, other: &TrainableMask) {
        self.names.extend(other.names.iter().cloned());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }
}

/// Pick the `Var` bound under `name`.
pub(crate) fn var_of(bound: &[(String, Var)], name: &str) -> Var {
    bound
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, v)| *v)
        .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
}
