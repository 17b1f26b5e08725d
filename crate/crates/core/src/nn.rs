//! Named parameter storage and shared-weight MLPs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Slope used by the leaky rectifier on hidden layers.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Ordered collection of named parameters, each with a same-shape gradient slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Adds `scale ×` the tape gradients into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            if let Some(g) = g {
                for (d, s) in self.grads[id.0].data_mut().iter_mut().zip(g) {
                    *d += scale * s;
                }
            }
        }
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                left: self.values[id.0].shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Copies values from another store holding the same names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| Error::Invalid(alloc::format!("missing parameter `{name}`")))?;
            if other.values[j.0].shape() != self.values[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load params",
                    left: self.values[i].shape().to_vec(),
                    right: other.values[j.0].shape().to_vec(),
                });
            }
            self.values[i] = other.values[j.0].clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    LeakyRelu,
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// A weight-shared MLP whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Mlp {
    /// Builds `in -> widths[0] -> ... -> widths[last]` with leaky hidden
    /// layers and a linear output, Glorot-uniform weights and zero biases.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(!widths.is_empty(), "mlp needs at least one layer");
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = in_dim;
        for (k, &out) in widths.iter().enumerate() {
            let limit = libm::sqrt(6.0 / (fan_in + out) as f64);
            let w: Vec<f64> = (0..out * fan_in)
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            let weight = store.add(
                alloc::format!("{prefix}.{k}.weight"),
                Tensor::new(&[out, fan_in], w).unwrap(),
            );
            let bias = store.add(alloc::format!("{prefix}.{k}.bias"), Tensor::zeros(&[out]));
            let activation = if k + 1 == widths.len() {
                Activation::Linear
            } else {
                Activation::LeakyRelu
            };
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
            fan_in = out;
        }
        Self {
            layers,
            in_dim,
            out_dim: fan_in,
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    /// Sets every weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.value_mut(id).fill(0.0);
        }
    }
}

/// Applies `mlp` row-wise to `input: batch × in`.
pub fn mlp_forward(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, input: Var) -> Result<Var> {
    let (rows, cols) = tape.dims(input);
    if cols != mlp.in_dim {
        return Err(Error::ShapeMismatch {
            op: "mlp_forward",
            left: vec![rows, cols],
            right: vec![rows, mlp.in_dim],
        });
    }
    let mut h = input;
    for layer in &mlp.layers {
        let w = tape.param(store, layer.weight);
        let b = tape.param(store, layer.bias);
        h = tape.linear(h, w, Some(b))?;
        if layer.activation == Activation::LeakyRelu {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    Ok(h)
}

impl core::fmt::Display for ParamId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(
        store: &mut ParamStore,
        w: Vec<f64>,
        b: Vec<f64>,
        out: usize,
        inp: usize,
    ) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(store, "m", inp, &[out], &mut rng);
        store
            .set(mlp.layers[0].weight, Tensor::new(&[out, inp], w).unwrap())
            .unwrap();
        store
            .set(mlp.layers[0].bias, Tensor::new(&[out], b).unwrap())
            .unwrap();
        mlp
    }

    #[test]
    fn identity_layer() {
        let mut store = ParamStore::new();
        let mlp = single_layer(&mut store, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, vec![3.0, 4.0]).unwrap();
        let y = mlp_forward(&mut tape, &store, &mlp, x).unwrap();
        assert_eq!(tape.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn constant_layer() {
        let mut store = ParamStore::new();
        let mlp = single_layer(&mut store, vec![0.0; 4], vec![1.0, 1.0], 2, 2);
        let mut tape = Tape::new();
        let x = tape.constant(2, 2, vec![-7.0, 2.5, 1e6, 3.0]).unwrap();
        let y = mlp_forward(&mut tape, &store, &mlp, x).unwrap();
        assert_eq!(tape.value(y), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn width_mismatch_reports_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, "m", 3, &[4, 2], &mut rng);
        let mut tape = Tape::new();
        let x = tape.zeros(5, 2);
        let err = mlp_forward(&mut tape, &store, &mlp, x).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "mlp_forward",
                left: vec![5, 2],
                right: vec![5, 3]
            }
        );
    }

    /// Straight-line re-evaluation of a two-layer MLP.
    fn reference_mlp(store: &ParamStore, mlp: &Mlp, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h: Vec<f64> = x.to_vec();
        let mut width = mlp.in_dim;
        for layer in &mlp.layers {
            let w = store.value(layer.weight);
            let b = store.value(layer.bias).data();
            let out = w.shape()[0];
            let mut next = vec![0.0; rows * out];
            for r in 0..rows {
                for o in 0..out {
                    let mut s = 0.0;
                    for k in 0..width {
                        s += h[r * width + k] * w.data()[o * width + k];
                    }
                    s += b[o];
                    if layer.activation == Activation::LeakyRelu && s <= 0.0 {
                        s *= LEAKY_SLOPE;
                    }
                    next[r * out + o] = s;
                }
            }
            h = next;
            width = out;
        }
        h
    }

    #[test]
    fn two_layer_matches_reference() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mlp = Mlp::new(&mut store, "m", 5, &[7, 3], &mut rng);
        for id in mlp.param_ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let x: Vec<f64> = (0..4 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(4, 5, x.clone()).unwrap();
        let y = mlp_forward(&mut tape, &store, &mlp, xv).unwrap();
        let expect = reference_mlp(&store, &mlp, &x, 4);
        for (a, b) in tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn init_within_glorot_bounds() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&mut store, "m", 10, &[6], &mut rng);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(store
            .value(mlp.layers[0].weight)
            .data()
            .iter()
            .all(|w| w.abs() <= limit));
        assert!(store
            .value(mlp.layers[0].bias)
            .data()
            .iter()
            .all(|b| *b == 0.0));
    }
}
