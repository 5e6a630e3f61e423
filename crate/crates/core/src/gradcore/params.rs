use std::collections::HashMap;

use super::Array;
use crate::error::{Error, Result};

/// Named parameter arrays, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn by_index(&self, i: usize) -> &Array {
        &self.values[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Array {
        &mut self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Array::is_finite)
    }

    /// Bitwise equality of every parameter, names included.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    values: Vec<Array>,
}

impl Grads {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            values: params.values.iter().map(|p| Array::zeros(p.shape())).collect(),
        }
    }

    pub(crate) fn from_vec(values: Vec<Array>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Array {
        &self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array> {
        self.values.iter()
    }

    /// Named lookup through the store the gradients belong to.
    pub fn of<'a>(&'a self, params: &ParamStore, name: &str) -> Option<&'a Array> {
        params.index_of(name).map(|i| &self.values[i])
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        if self.values.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                self.values.len(),
                params.len()
            )));
        }
        for (i, g) in self.values.iter().enumerate() {
            if g.shape() != params.values[i].shape() {
                return Err(Error::Dimension(format!(
                    "gradient for `{}` has shape {:?}, parameter has {:?}",
                    params.names[i],
                    g.shape(),
                    params.values[i].shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter `{}`",
                    params.names[i]
                )));
            }
        }
        Ok(())
    }
}

/// One plain gradient-descent update: `p <- p - lr * g`.
pub fn sgd_step(params: &mut ParamStore, grads: &Grads, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0) {
        return Err(Error::Domain(format!("learning rate must be positive, got {learning_rate}")));
    }
    grads.check(params)?;
    for (p, g) in params.values.iter_mut().zip(&grads.values) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= learning_rate * d;
        }
    }
    Ok(())
}

/// Stochastic gradient descent with optional heavy-ball momentum.
///
/// With `momentum = 0` this is [`sgd_step`]. Otherwise the velocity
/// `v <- momentum * v + g` is kept per coordinate and `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Vec<Array>>,
}

impl Sgd {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;

    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::Domain(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Domain(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: None,
        })
    }

    pub fn plain(learning_rate: f64) -> Result<Self> {
        Self::new(learning_rate, 0.0)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, self.learning_rate);
        }
        grads.check(params)?;
        let velocity = self
            .velocity
            .get_or_insert_with(|| params.values.iter().map(|p| Array::zeros(p.shape())).collect());
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((p, v), g) in params.values.iter_mut().zip(velocity.iter_mut()).zip(&grads.values) {
            for ((x, vel), d) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vel = mu * *vel + d;
                *x -= lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Array::new(vec![v.len()], v.to_vec()).unwrap()).unwrap();
        s
    }

    fn grads(v: &[f64]) -> Grads {
        Grads::from_vec(vec![Array::new(vec![v.len()], v.to_vec()).unwrap()])
    }

    #[test]
    fn one_unit_step() {
        let mut s = store(&[1.0]);
        sgd_step(&mut s, &grads(&[1.0]), 1.0).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[0.0]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = store(&[1.5, -2.0]);
        let before = s.clone();
        sgd_step(&mut s, &grads(&[0.0, 0.0]), 0.3).unwrap();
        assert!(s.bit_identical(&before));
    }

    #[test]
    fn small_step_arithmetic() {
        let mut s = store(&[2.0]);
        sgd_step(&mut s, &grads(&[0.5]), 0.1).unwrap();
        assert!((s.get("p").unwrap().data()[0] - 1.95).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_rate() {
        let mut s = store(&[2.0]);
        assert!(matches!(sgd_step(&mut s, &grads(&[0.5]), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(&[2.0]);
        let g = Grads::from_vec(vec![Array::from_parts(vec![1], vec![f64::NAN])]);
        match sgd_step(&mut s, &g, 0.1) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("`p`")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut s = store(&[0.0]);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut s, &grads(&[1.0])).unwrap();
        opt.step(&mut s, &grads(&[1.0])).unwrap();
        // v1 = 1, v2 = 1.9; p = -0.1 - 0.19
        assert!((s.get("p").unwrap().data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store(&[1.0]);
        assert!(s.insert("p", Array::scalar(0.0)).is_err());
    }
}
