//! Named trainable parameters and their binding into a compute graph.

use std::ops::Index;

use phnet_tensor::{Element, Gradients, Graph, Tensor, Var};
use rand::Rng;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    /// Same shape as `value`; zero after [`ParamStore::zero_grad`].
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Parameter<T>>,
}

/// Graph handles of every parameter for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Swaps in a different node for one parameter (used by gradient checks).
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return invalid(format!("{}: shape {:?} does not match {:?}", p.name, value.shape(), p.value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Adds every parameter to `g` as a leaf. With `trainable == false` the
    /// leaves are constants and backward skips them.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p.value.clone()) } else { g.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of bound parameters into each `grad`.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                p.grad = p.grad.add(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast() })
                .collect(),
        }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn same_values(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data().iter()).all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
            })
    }
}

/// Fan-in scaled uniform initialization: `U(-bound, bound)` with
/// `bound = gain / sqrt(fan_in)`.
pub fn fan_in_uniform<T: Element, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grad_shape_matches_and_resets() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::ones(&[2, 3]));
        assert_eq!(store.get(id).grad.shape(), &[2, 3]);
        let mut g = Graph::new();
        let b = store.bind(&mut g, true);
        let l = g.sum_all(b[id]).unwrap();
        let grads = g.backward(l).unwrap();
        store.accumulate_grads(&grads, &b).unwrap();
        assert_eq!(store.get(id).grad.to_vec(), vec![1.0; 6]);
        store.zero_grad();
        assert_eq!(store.get(id).grad.to_vec(), vec![0.0; 6]);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let ta: Tensor<f32> = fan_in_uniform(&mut a, &[4, 9], 9, 6f64.sqrt());
        let tb: Tensor<f32> = fan_in_uniform(&mut b, &[4, 9], 9, 6f64.sqrt());
        assert_eq!(ta, tb);
        let bound = (6.0f64 / 9.0).sqrt() as f32;
        assert!(ta.to_vec().iter().all(|v| v.abs() <= bound));
    }
}
