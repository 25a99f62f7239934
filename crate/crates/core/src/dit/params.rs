use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, shape_err, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf; `trainable` decides whether they
    /// collect gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }

    /// Splits a flat `[numel]` variable into per-parameter variables.
    pub fn bind_flat<'t>(&self, flat: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        if flat.numel() != self.numel() {
            return Err(shape_err!("flat vector of {} for {} parameters", flat.numel(), self.numel()));
        }
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|t| {
                let v = flat.slice_rows(offset, t.numel())?.reshape(t.dims())?;
                offset += t.numel();
                Ok(v)
            })
            .collect()
    }

    pub fn flatten(&self) -> Tensor<T> {
        let data: Vec<T> = self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::new(&[n], data).expect("flat dims")
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Replaces tensors by name; every stored name must be supplied with
    /// matching dims.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name).ok_or_else(|| contract_err!("checkpoint lacks parameter {name}"))?;
            if t.dims() != slot.dims() {
                return Err(shape_err!("parameter {name}: {:?} vs expected {:?}", t.dims(), slot.dims()));
            }
            *slot = t;
        }
        Ok(())
    }
}

/// How freshly created weights are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Xavier-uniform weights, zero biases.
    Xavier,
    /// Xavier-uniform scaled by 0.1.
    Small,
    /// All zeros (modulation heads: gated residuals start closed).
    Zero,
}

/// Dense layer `x @ w + b`, `w: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
    ) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let scale = match init {
            Init::Xavier => 1.0,
            Init::Small => 0.1,
            Init::Zero => 0.0,
        };
        let w = Tensor::from_fn(&[inputs, outputs], |_| {
            let u: f64 = rng.random_range(-bound..bound);
            T::of(u * scale)
        });
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Self { w, b }
    }

    pub fn forward<'t, T: Real>(&self, x: Var<'t, T>, p: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        x.linear(p[self.w.0], p[self.b.0])
    }
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_binding_matches_direct_binding() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(1);
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 2, Init::Xavier);
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);

        let tape = Tape::new();
        let direct = store.bind(&tape, false);
        let a = lin.forward(tape.constant(x.clone()), &direct).unwrap().value().clone();
        let flat = store.bind_flat(tape.constant(store.flatten())).unwrap();
        let b = lin.forward(tape.constant(x), &flat).unwrap().value().clone();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn load_named_checks_dims() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[2]));
        assert!(store.load_named(|_| Some(Tensor::zeros(&[3]))).is_err());
        assert!(store.load_named(|_| None).is_err());
        store.load_named(|_| Some(Tensor::full(&[2], 1.0))).unwrap();
        assert_eq!(store.find("a").unwrap().data(), &[1.0, 1.0]);
    }
}
