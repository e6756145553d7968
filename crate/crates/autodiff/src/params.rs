use serde::{Deserialize, Serialize};

use crate::graph::{Grads, Graph, Var};
use crate::mat::Mat;
use crate::scalar::{Dual, Scalar};

/// Named, ordered collection of parameter matrices.
///
/// Models keep `usize` handles into the set and bind the whole set onto a
/// graph at the start of every forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub entries: Vec<NamedMat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMat {
    pub name: String,
    pub value: Mat<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its handle.
    pub fn add(&mut self, name: impl Into<String>, value: Mat<f64>) -> usize {
        let name = name.into();
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter name {name}");
        self.entries.push(NamedMat { name, value });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Mat<f64> {
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Mat<f64> {
        &mut self.entries[idx].value
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Total number of scalars across all entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend_from_slice(&e.value.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length");
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Binds every entry as a leaf with the same numeric values.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries.iter().map(|e| g.leaf(e.value.lift())).collect()
    }

    /// Binds every entry as a dual-number leaf whose tangent is the matching
    /// slice of `tangent` (flat layout, see [`ParamSet::flat`]).
    pub fn bind_dual(&self, g: &mut Graph<Dual>, tangent: &[f64]) -> Vec<Var> {
        assert_eq!(tangent.len(), self.num_scalars(), "tangent length");
        let mut off = 0;
        self.entries
            .iter()
            .map(|e| {
                let n = e.value.len();
                let data = e.value.data.iter().zip(&tangent[off..off + n]).map(|(&x, &t)| Dual::new(x, t)).collect();
                off += n;
                g.leaf(Mat::from_vec(e.value.rows, e.value.cols, data))
            })
            .collect()
    }

    /// Gathers the gradients of `vars` (bound from this set) into flat layout.
    pub fn flat_grad<T: Scalar>(&self, grads: &Grads<T>, vars: &[Var]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (e, &v) in self.entries.iter().zip(vars) {
            match grads.get(v) {
                Some(g) => out.extend_from_slice(&g.data),
                None => out.extend(std::iter::repeat(T::zero()).take(e.value.len())),
            }
        }
        out
    }
}
