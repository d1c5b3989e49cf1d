use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Dense layer computing `x W + b` for row-vector inputs; `weight` is
/// `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Fully connected network. Hidden layers share one activation; the last
/// layer has its own (identity for regression heads).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    hidden: Activation,
    output: Activation,
}

/// Post-activation values of every layer, input first.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input at least")
    }
}

impl MlpModel {
    pub fn from_layers(layers: Vec<Layer>, hidden: Activation, output: Activation) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Shape("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(NnError::Shape(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(NnError::Shape("bias length differs from layer width".into()));
            }
        }
        Ok(Self { layers, hidden, output })
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self::from_layers(layers, hidden, output)
    }

    /// Uniform fan-in initialisation: weights in `±gain * sqrt(3 / fan_in)`
    /// with gain `sqrt(2)` for ReLU hidden units, biases zero.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self, NnError> {
        let mut model = Self::zeros(sizes, hidden, output)?;
        let gain = match hidden {
            Activation::Relu => 2f64.sqrt(),
            _ => 1.0,
        };
        for layer in &mut model.layers {
            let bound = gain * (3.0 / layer.fan_in() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].fan_in()];
        sizes.extend(self.layers.iter().map(Layer::fan_out));
        sizes
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        if x.len() != self.input_size() {
            return Err(NnError::Dimension {
                expected: self.input_size(),
                got: x.len(),
            });
        }
        let mut current = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let act = self.activation_of(idx);
            let mut next = layer.bias.to_vec();
            for (xi, row) in current.iter().zip(layer.weight.rows()) {
                for (n, w) in next.iter_mut().zip(row.iter()) {
                    *n += xi * w;
                }
            }
            for v in &mut next {
                *v = act.apply(*v);
            }
            current = next;
        }
        Ok(current)
    }

    /// Batched forward pass, one sample per row.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        Ok(self.forward_cached(x)?.activations.pop().expect("non-empty"))
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache, NnError> {
        if x.ncols() != self.input_size() {
            return Err(NnError::Dimension {
                expected: self.input_size(),
                got: x.ncols(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for (idx, layer) in self.layers.iter().enumerate() {
            let act = self.activation_of(idx);
            let mut z = activations[idx].dot(&layer.weight);
            z += &layer.bias;
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Back-propagates `grad_output` (dLoss/dOutput, same shape as the
    /// cached output). Returns parameter gradients and dLoss/dInput.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<f64>) -> (Gradients, Array2<f64>) {
        let mut delta = grad_output.to_owned();
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for idx in (0..self.layers.len()).rev() {
            let act = self.activation_of(idx);
            if act != Activation::Identity {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.activations[idx + 1])
                    .for_each(|d, &y| *d *= act.derivative_from_output(y));
            }
            let input = &cache.activations[idx];
            let weight = input.t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            let next_delta = delta.dot(&self.layers[idx].weight.t());
            grads.push(Layer { weight, bias });
            delta = next_delta;
        }
        grads.reverse();
        (Gradients { layers: grads }, delta)
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    /// Inverse of [`flat_params`](Self::flat_params); returns the number of
    /// values consumed.
    pub fn read_flat(&mut self, values: &[f64]) -> Result<usize, NnError> {
        if values.len() < self.param_count() {
            return Err(NnError::Dimension {
                expected: self.param_count(),
                got: values.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = values[offset];
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b = values[offset];
                offset += 1;
            }
        }
        Ok(offset)
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Per-layer parameter gradients, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let model = MlpModel::zeros(&[6, 16, 16, 15], Activation::Relu, Activation::Identity).unwrap();
        let y = model.forward(&[1.0, -2.0, 3.0, 1.0, -1.0, 1.0]).unwrap();
        assert_eq!(y, vec![0.0; 15]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let layer = Layer {
            weight: array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]],
            bias: array![0.5, -0.5],
        };
        let model = MlpModel::from_layers(vec![layer], Activation::Relu, Activation::Identity).unwrap();
        let y = model.forward(&[1.0, -1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0 - 3.0 + 10.0 + 0.5, 2.0 - 4.0 + 12.0 - 0.5]);
    }

    /// Matrix-chain evaluation through nalgebra, independent of the ndarray
    /// code path.
    fn oracle_forward(model: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut v = DVector::from_column_slice(x);
        for (idx, l) in model.layers().iter().enumerate() {
            let w = DMatrix::from_fn(l.fan_out(), l.fan_in(), |r, c| l.weight[[c, r]]);
            let b = DVector::from_iterator(l.fan_out(), l.bias.iter().copied());
            v = w * v + b;
            let act = if idx + 1 == model.layers().len() {
                model.output_activation()
            } else {
                model.hidden_activation()
            };
            v.apply(|e| *e = act.apply(*e));
        }
        v.iter().copied().collect()
    }

    #[test]
    fn forward_matches_matrix_chain_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for hidden in [Activation::Relu, Activation::Tanh] {
            let mut model = MlpModel::init(&[6, 128, 128, 128, 128, 15], hidden, Activation::Identity, &mut rng).unwrap();
            for l in model.layers_mut() {
                l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
            for _ in 0..10 {
                let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y = model.forward(&x).unwrap();
                let oracle = oracle_forward(&model, &x);
                let batch = model
                    .forward_batch(ndarray::ArrayView2::from_shape((1, 6), &x).unwrap())
                    .unwrap();
                for i in 0..15 {
                    let scale = oracle[i].abs().max(1.0);
                    assert!((y[i] - oracle[i]).abs() <= 1e-12 * scale);
                    assert!((batch[[0, i]] - oracle[i]).abs() <= 1e-12 * scale);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = MlpModel::zeros(&[3, 4, 2], Activation::Tanh, Activation::Identity).unwrap();
        assert!(matches!(model.forward(&[1.0, 2.0]), Err(NnError::Dimension { expected: 3, got: 2 })));
        assert!(MlpModel::from_layers(vec![Layer::zeros(3, 4), Layer::zeros(5, 2)], Activation::Relu, Activation::Identity).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = MlpModel::init(&[4, 8, 3], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let flat = model.flat_params();
        assert_eq!(flat.len(), model.param_count());
        let mut other = MlpModel::zeros(&[4, 8, 3], Activation::Tanh, Activation::Identity).unwrap();
        assert_eq!(other.read_flat(&flat).unwrap(), flat.len());
        assert_eq!(other, model);
    }
}
