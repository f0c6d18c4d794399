//! The allocation network `x(b, g)`: a fully connected rectifier network on
//! the concatenated contexts `[b, g]`, followed by a softplus so every
//! allocation is strictly positive.
//!
//! Parameters live in one flat vector. Layer `l` stores its weights row-major
//! as a `fan_in x fan_out` matrix followed by `fan_out` biases; layers are
//! stored input to output.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::softplus;
use crate::rng::{substream, Stream};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Input width, number of hidden layers and hidden width. The output is a
/// single unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub depth: usize,
    pub width: usize,
}

impl Architecture {
    /// Network on pairs of `k`-dimensional contexts.
    pub fn for_contexts(k: usize, depth: usize, width: usize) -> Self {
        Architecture { input: 2 * k, depth, width }
    }

    /// `(fan_in, fan_out)` of each affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        if self.depth == 0 {
            return vec![(self.input, 1)];
        }
        let mut dims = vec![(self.input, self.width)];
        dims.extend(std::iter::repeat_n((self.width, self.width), self.depth - 1));
        dims.push((self.width, 1));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || (self.depth > 0 && self.width == 0) {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationNet {
    arch: Architecture,
    params: Vec<f64>,
}

/// Intermediate values of a batched forward pass, kept for the backward pass.
pub struct Tape {
    /// Layer inputs: the batch itself, then each hidden activation.
    activations: Vec<Array2<f64>>,
    /// Output-layer pre-activations.
    logits: Array1<f64>,
    outputs: Array1<f64>,
}

impl Tape {
    pub fn outputs(&self) -> ArrayView1<'_, f64> {
        self.outputs.view()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn ensure_finite<'a>(layer: usize, values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFailure { layer, detail: format!("non-finite {what}") })
    }
}

/// Rows `[b_i, g_j]` in order `i * m + j`.
pub fn pair_inputs(buyers: ArrayView2<'_, f64>, goods: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (n, k) = buyers.dim();
    let (m, kg) = goods.dim();
    if k != kg {
        return Err(Error::shape(format!("buyer dimension {k} differs from good dimension {kg}")));
    }
    let mut inputs = Array2::zeros((n * m, 2 * k));
    for i in 0..n {
        for j in 0..m {
            let mut row = inputs.row_mut(i * m + j);
            row.slice_mut(ndarray::s![..k]).assign(&buyers.row(i));
            row.slice_mut(ndarray::s![k..]).assign(&goods.row(j));
        }
    }
    Ok(inputs)
}

impl AllocationNet {
    /// Weights drawn from `N(0, 2 / fan_in)`, biases zero.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = substream(seed, Stream::NetInit);
        let mut params = Vec::with_capacity(arch.parameter_count());
        for (fan_in, fan_out) in arch.layer_dims() {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(AllocationNet { arch, params })
    }

    pub fn from_parameters(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.parameter_count() {
            return Err(Error::shape(format!(
                "{} parameters for an architecture needing {}",
                params.len(),
                arch.parameter_count()
            )));
        }
        Ok(AllocationNet { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes the output layer so every input maps to `softplus(0) = ln 2`.
    pub fn zero_final_layer(&mut self) {
        let (fan_in, fan_out) = *self.arch.layer_dims().last().expect("at least one layer");
        let len = self.params.len();
        self.params[len - (fan_in * fan_out + fan_out)..].fill(0.0);
    }

    fn layers(&self) -> impl Iterator<Item = (ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        let mut offset = 0;
        self.arch.layer_dims().into_iter().map(move |(fan_in, fan_out)| {
            let w = ArrayView2::from_shape((fan_in, fan_out), &self.params[offset..offset + fan_in * fan_out])
                .expect("layer slice");
            offset += fan_in * fan_out;
            let b = ArrayView1::from(&self.params[offset..offset + fan_out]);
            offset += fan_out;
            (w, b)
        })
    }

    fn check_inputs(&self, inputs: &ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.arch.input {
            return Err(Error::shape(format!(
                "inputs have {} columns but the network expects {}",
                inputs.ncols(),
                self.arch.input
            )));
        }
        Ok(())
    }

    /// Batched forward pass keeping intermediates for [`AllocationNet::backward`].
    pub fn forward_tape(&self, inputs: Array2<f64>) -> Result<Tape> {
        self.check_inputs(&inputs.view())?;
        let last = self.arch.depth;
        let mut activations = vec![inputs];
        let mut logits = None;
        for (l, (w, b)) in self.layers().enumerate() {
            let mut z = activations[l].dot(&w);
            z += &b;
            ensure_finite(l, z.iter(), "pre-activation")?;
            if l == last {
                logits = Some(z.remove_axis(Axis(1)));
            } else {
                z.mapv_inplace(|v| v.max(0.0));
                activations.push(z);
            }
        }
        let logits = logits.expect("output layer");
        let outputs = logits.mapv(softplus);
        Ok(Tape { activations, logits, outputs })
    }

    /// Outputs for each input row.
    pub fn forward_inputs(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward_tape(inputs.to_owned())?.outputs)
    }

    /// Which hidden units are active for each input row, layer by layer.
    pub fn relu_pattern(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<bool>> {
        let tape = self.forward_tape(inputs.to_owned())?;
        Ok(tape.activations[1..].iter().flat_map(|a| a.iter().map(|&v| v > 0.0)).collect())
    }

    /// Allocation of `good` to `buyer`.
    pub fn forward(&self, buyer: &[f64], good: &[f64]) -> Result<f64> {
        if buyer.len() + good.len() != self.arch.input || buyer.len() != good.len() {
            return Err(Error::shape(format!(
                "contexts of dimension {} and {} for a network on {} inputs",
                buyer.len(),
                good.len(),
                self.arch.input
            )));
        }
        let input = Array2::from_shape_vec((1, self.arch.input), [buyer, good].concat()).expect("one row");
        Ok(self.forward_inputs(input.view())?[0])
    }

    /// Allocation matrix with entry `(i, j) = forward(buyers[i], goods[j])`.
    pub fn forward_batch(&self, buyers: ArrayView2<'_, f64>, goods: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (n, m) = (buyers.nrows(), goods.nrows());
        let out = self.forward_inputs(pair_inputs(buyers, goods)?.view())?;
        Ok(out.into_shape_with_order((n, m)).expect("n*m outputs"))
    }

    /// Reverse-mode gradient of a scalar loss with respect to all parameters,
    /// given `d loss / d output` for each row of the taped batch.
    pub fn backward(&self, tape: &Tape, d_outputs: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        if d_outputs.len() != tape.outputs.len() {
            return Err(Error::shape("output gradient length differs from batch size"));
        }
        let dims = self.arch.layer_dims();
        let mut grad = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for (fan_in, fan_out) in &dims {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }
        let layers: Vec<_> = self.layers().collect();

        let mut dz = Array2::from_shape_fn((tape.logits.len(), 1), |(r, _)| d_outputs[r] * sigmoid(tape.logits[r]));
        for l in (0..dims.len()).rev() {
            ensure_finite(l, dz.iter(), "gradient")?;
            let (fan_in, fan_out) = dims[l];
            let a = &tape.activations[l];
            let dw = a.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            let start = offsets[l];
            grad[start..start + fan_in * fan_out].iter_mut().zip(dw.iter()).for_each(|(g, v)| *g = *v);
            grad[start + fan_in * fan_out..start + fan_in * fan_out + fan_out]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(g, v)| *g = *v);
            if l > 0 {
                let mut da = dz.dot(&layers[l].0.t());
                da.zip_mut_with(a, |d, &act| {
                    if act <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz = da;
            }
        }
        Ok(grad)
    }

    /// Evaluates `loss` on the outputs of `inputs` and returns the loss with
    /// its gradient. `loss` returns the scalar and its derivative with
    /// respect to each output.
    pub fn loss_gradient<F>(&self, inputs: Array2<f64>, loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)>,
    {
        let tape = self.forward_tape(inputs)?;
        let (value, d_outputs) = loss(tape.outputs())?;
        if !value.is_finite() {
            return Err(Error::NumericFailure { layer: self.arch.depth, detail: format!("loss is {value}") });
        }
        let grad = self.backward(&tape, d_outputs.view())?;
        Ok((value, grad))
    }

    pub fn checkpoint(&self, optimizer: Option<&OptimizerState>, multipliers: Option<&[f64]>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            architecture: self.arch,
            parameters: self.params.clone(),
            optimizer: optimizer.cloned(),
            multipliers: multipliers.map(<[f64]>::to_vec),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, parameter_count: usize) -> Self {
        OptimizerState {
            config,
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            step: 0,
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grad.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters; got {} parameters and {} gradients",
                self.first_moment.len(),
                params.len(),
                grad.len()
            )));
        }
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in
            params.iter_mut().zip(grad).zip(self.first_moment.iter_mut()).zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of `net`.
pub fn adam_step(state: &mut OptimizerState, net: &mut AllocationNet, grad: &[f64]) -> Result<()> {
    state.apply(net.parameters_mut(), grad)
}

/// Serialized network, optionally with optimizer state and multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    /// Flat parameters in layer order (see module docs).
    pub parameters: Vec<f64>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
    #[serde(default)]
    pub multipliers: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn net(&self) -> Result<AllocationNet> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        AllocationNet::from_parameters(self.architecture, self.parameters.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
