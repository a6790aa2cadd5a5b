//! Dense multi-layer perceptron with an explicit reverse pass.
//!
//! Each layer computes `z = h W + b` followed by an element-wise activation.
//! Weights are stored as `(fan_in, fan_out)` so a batch of row vectors can be
//! pushed through with a single matrix product.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    SiLU,
    ReLU,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::SiLU => z / (1.0 + (-z).exp()),
            Activation::ReLU => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation `z`; `y` is `apply(z)`.
    #[inline]
    pub fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::SiLU => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub hidden_activations: Vec<Activation>,
    pub output_activation: Activation,
}

impl MlpSpec {
    /// Uniform hidden activation across all hidden layers.
    pub fn new(layer_widths: Vec<usize>, hidden: Activation, output: Activation) -> Result<Self> {
        let n_hidden = layer_widths.len().saturating_sub(2);
        let spec = Self {
            layer_widths,
            hidden_activations: vec![hidden; n_hidden],
            output_activation: output,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output widths"));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.hidden_activations.len() != self.layer_widths.len() - 2 {
            return Err(Error::shape(
                "hidden activations",
                self.layer_widths.len() - 2,
                self.hidden_activations.len(),
            ));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activations[layer]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape `(fan_in, fan_out)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameters of every layer. The same container doubles as a gradient set
/// and as Adam moment storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases alike.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng));
                let bias = Array1::from_shape_simple_fn(fan_out, || dist.sample(rng));
                Dense { weights, bias }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn check_matches(&self, spec: &MlpSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers() {
            return Err(Error::shape("layer count", spec.num_layers(), self.layers.len()));
        }
        for (i, (layer, w)) in self.layers.iter().zip(spec.layer_widths.windows(2)).enumerate() {
            let expected = (w[0], w[1]);
            if layer.weights.dim() != expected || layer.bias.len() != w[1] {
                return Err(Error::shape(
                    format!("layer {i}"),
                    format!("{expected:?}"),
                    format!("{:?} + bias {}", layer.weights.dim(), layer.bias.len()),
                ));
            }
        }
        Ok(())
    }

    pub(crate) fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Flattened view of every parameter, layer by layer, weights before bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn max_abs_diff(&self, other: &MlpParams) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Intermediate values kept by a training forward pass.
struct Trace {
    /// Layer inputs, `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        spec.validate()?;
        params.check_matches(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        let params = MlpParams::init(&spec, rng)?;
        Ok(Self { spec, params })
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass over a batch of row vectors.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs)?;
        let mut h: Option<Array2<f64>> = None;
        for (i, layer) in self.params.layers.iter().enumerate() {
            let act = self.spec.activation(i);
            let mut z = match &h {
                None => inputs.dot(&layer.weights),
                Some(prev) => prev.dot(&layer.weights),
            };
            z += &layer.bias;
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            h = Some(z);
        }
        Ok(h.expect("at least one layer"))
    }

    fn check_input(&self, inputs: ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_width() {
            return Err(Error::shape("MLP input width", self.input_width(), inputs.ncols()));
        }
        Ok(())
    }

    fn forward_trace(&self, inputs: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(inputs)?;
        let n = self.params.layers.len();
        let mut layer_inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = inputs.to_owned();
        for (i, layer) in self.params.layers.iter().enumerate() {
            let act = self.spec.activation(i);
            let mut z = h.dot(&layer.weights);
            z += &layer.bias;
            let y = if act == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| act.apply(v))
            };
            layer_inputs.push(h);
            pre.push(z);
            h = y;
        }
        Ok(Trace {
            inputs: layer_inputs,
            pre,
            output: h,
        })
    }

    /// Reverse-mode gradients of a scalar loss.
    ///
    /// `loss` receives the network outputs and returns the loss value together
    /// with its derivative with respect to those outputs. Averaging over the
    /// batch is the loss closure's job.
    pub fn gradients<F>(&self, inputs: ArrayView2<f64>, loss: F) -> Result<(f64, MlpParams)>
    where
        F: FnOnce(ArrayView2<f64>) -> Result<(f64, Array2<f64>)>,
    {
        let trace = self.forward_trace(inputs)?;
        let (value, d_out) = loss(trace.output.view())?;
        if d_out.dim() != trace.output.dim() {
            return Err(Error::shape(
                "loss gradient",
                format!("{:?}", trace.output.dim()),
                format!("{:?}", d_out.dim()),
            ));
        }

        let mut grads = self.params.zeros_like();
        let mut upstream = d_out;
        for i in (0..self.params.layers.len()).rev() {
            let act = self.spec.activation(i);
            let dz = if act == Activation::Identity {
                upstream
            } else {
                let post = if i + 1 == self.params.layers.len() {
                    &trace.output
                } else {
                    &trace.inputs[i + 1]
                };
                let mut dz = upstream;
                ndarray::Zip::from(&mut dz)
                    .and(&trace.pre[i])
                    .and(post)
                    .for_each(|g, &z, &y| *g *= act.derivative(z, y));
                dz
            };
            grads.layers[i].weights = trace.inputs[i].t().dot(&dz);
            grads.layers[i].bias = dz.sum_axis(Axis(0));
            if i > 0 {
                upstream = dz.dot(&self.params.layers[i].weights.t());
            } else {
                break;
            }
        }
        Ok((value, grads))
    }
}

/// Mean squared error over a batch of scalar outputs.
pub fn mse_loss(targets: &[f64]) -> impl FnOnce(ArrayView2<f64>) -> Result<(f64, Array2<f64>)> + '_ {
    move |out| {
        if out.ncols() != 1 || out.nrows() != targets.len() {
            return Err(Error::shape(
                "mse targets",
                format!("({}, 1)", targets.len()),
                format!("{:?}", out.dim()),
            ));
        }
        let n = targets.len() as f64;
        let mut grad = Array2::zeros(out.raw_dim());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let r = out[[i, 0]] - t;
            total += r * r;
            grad[[i, 0]] = 2.0 * r / n;
        }
        Ok((total / n, grad))
    }
}
