//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use qsattn_tensor::{Gradients, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{QsError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// An ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian-initialised parameter.
    pub fn add_normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut R) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(QsError::config(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Records every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect(),
        }
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter; zero where the loss does not reach.
    pub fn gradients<T: Scalar>(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.values.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), store.values.len(), "gradient count mismatch");
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let c1 = one - T::lit(self.beta1.powi(self.step as i32));
        let c2 = one - T::lit(self.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (i, g) in grads.iter().enumerate() {
            let m: Vec<T> = self.m[i].data().iter().zip(g.data()).map(|(&m, &g)| b1 * m + (one - b1) * g).collect();
            let v: Vec<T> = self.v[i].data().iter().zip(g.data()).map(|(&v, &g)| b2 * v + (one - b2) * g * g).collect();
            let p: Vec<T> = store.values[i]
                .data()
                .iter()
                .zip(m.iter().zip(&v))
                .map(|(&p, (&m, &v))| p - lr * (m / c1) / ((v / c2).sqrt() + eps))
                .collect();
            let shape = g.shape().to_vec();
            self.m[i] = Tensor::new(shape.clone(), m).expect("shape");
            self.v[i] = Tensor::new(shape.clone(), v).expect("shape");
            store.values[i] = Tensor::new(shape, p).expect("shape");
        }
    }

    /// Moment buffers as `(name, m, v)` triples for checkpointing.
    pub fn state<'a>(&'a self, store: &'a ParamStore<T>) -> impl Iterator<Item = (&'a str, &'a Tensor<T>, &'a Tensor<T>)> {
        store.names.iter().map(String::as_str).zip(&self.m).zip(&self.v).map(|((n, m), v)| (n, m, v))
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(QsError::config("optimizer state does not match parameter count"));
        }
        for (new, old) in m.iter().chain(&v).zip(self.m.iter().chain(&self.v)) {
            if new.shape() != old.shape() {
                return Err(QsError::config("optimizer state shape mismatch"));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam recurrence written out by hand.
    fn reference_adam(mut p: f64, grad: impl Fn(f64) -> f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.5, 0.999, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = grad(p);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn adam_matches_reference_on_quadratic() {
        // f(p) = (p - 3)^2, gradient 2(p - 3)
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::scalar(0.5));
        let mut adam = Adam::new(&store, 0.5, 0.999);
        let expected = reference_adam(0.5, |p| 2.0 * (p - 3.0), 0.1, 3);
        for want in expected {
            let p = store.get(id).item();
            adam.update(&mut store, &[Tensor::scalar(2.0 * (p - 3.0))], 0.1);
            assert!((store.get(id).item() - want).abs() < 1e-15);
        }
        // first Adam step moves by exactly lr (up to eps) toward the minimum
        assert!((reference_adam(0.5, |p| 2.0 * (p - 3.0), 0.1, 1)[0] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::scalar(2.0));
        store.add("b", Tensor::scalar(5.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let sq = tape.square(bound.var(a));
        let grads = tape.backward(sq).unwrap();
        let g = bound.gradients(&store, &grads);
        assert_eq!(g[0].item(), 4.0);
        assert_eq!(g[1].item(), 0.0);
    }
}
