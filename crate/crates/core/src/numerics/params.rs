use num_traits::Zero;

use super::tensor::{Scalar, Tensor};

/// A structured set of trainable tensors, addressable by path.
///
/// Optimisers and the finite-difference checker only see the flat view this
/// trait exposes, so every parameter container must list its tensors in one
/// fixed order in both methods.
pub trait ParamTree: Clone {
    type Elem: Scalar;

    fn tensors(&self) -> Vec<(String, &Tensor<Self::Elem>)>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<Self::Elem>>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn paths(&self) -> Vec<String> {
        self.tensors().into_iter().map(|(p, _)| p).collect()
    }

    fn flatten(&self) -> Vec<Self::Elem> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Same structure with every value set to zero; used as a gradient accumulator.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = Self::Elem::zero());
        }
        z
    }

    /// `self += other` element-wise. Both trees must share a structure.
    fn accumulate(&mut self, other: &Self) {
        let src = other.tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.data_mut()
                .iter_mut()
                .zip(s.data())
                .for_each(|(a, &b)| *a = *a + b);
        }
    }

    fn scale_all(&mut self, k: Self::Elem) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }

    /// Mutable access to the `index`-th scalar in flat order.
    fn scalar_mut(&mut self, mut index: usize) -> Option<&mut Self::Elem> {
        for t in self.tensors_mut() {
            if index < t.len() {
                return Some(&mut t.data_mut()[index]);
            }
            index -= t.len();
        }
        None
    }
}

/// Prefixes child paths, e.g. `p1` + `layers.0.weight`.
pub fn nested<'a, S: Scalar>(
    prefix: &str,
    children: Vec<(String, &'a Tensor<S>)>,
) -> Vec<(String, &'a Tensor<S>)> {
    children
        .into_iter()
        .map(|(p, t)| (format!("{prefix}.{p}"), t))
        .collect()
}

