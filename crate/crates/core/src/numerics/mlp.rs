//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Parameters are laid out flat as, for each layer in order, the weight
//! matrix (row-major, `out × in`) followed by the bias vector. Optimizers
//! and checkpoints both use this order.

use serde::{Deserialize, Serialize};

use super::rng::SeededRng;
use super::tensor::{axpy, Tensor};
use crate::error::{arg_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Softmax,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
            Activation::Softmax => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Identity,
            3 => Activation::Softmax,
            _ => return None,
        })
    }

    fn apply(self, pre: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => pre.iter().map(|&z| z.max(0.0)).collect(),
            Activation::Tanh => pre.iter().map(|&z| z.tanh()).collect(),
            Activation::Identity => pre.to_vec(),
            Activation::Softmax => softmax(pre),
        }
    }

    /// Maps a gradient w.r.t. the post-activation into one w.r.t. the pre-activation.
    fn backprop(self, pre: &[f64], post: &[f64], grad_post: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => pre
                .iter()
                .zip(grad_post)
                .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
                .collect(),
            Activation::Tanh => post
                .iter()
                .zip(grad_post)
                .map(|(&y, &g)| g * (1.0 - y * y))
                .collect(),
            Activation::Identity => grad_post.to_vec(),
            Activation::Softmax => {
                let inner: f64 = post.iter().zip(grad_post).map(|(y, g)| y * g).sum();
                post.iter()
                    .zip(grad_post)
                    .map(|(&y, &g)| y * (g - inner))
                    .collect()
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activations: Vec<Activation>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }

    /// Pre-activation of the final layer.
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

/// Gradient seed for the top of the network.
#[derive(Debug, Clone, Copy)]
pub enum TopGrad<'a> {
    /// Gradient w.r.t. the network output (post-activation).
    Output(&'a [f64]),
    /// Gradient w.r.t. the final pre-activation (skips the output nonlinearity).
    Logits(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub input: Vec<f64>,
    /// Gradient w.r.t. the first layer's pre-activation (equals the gradient
    /// of an additive bias injected there).
    pub first_preact: Vec<f64>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }
}

impl MlpModel {
    /// Builds a network with Glorot-uniform weights and zero biases.
    pub fn new(layer_dims: &[usize], activations: &[Activation], rng: &mut SeededRng) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, activations)?;
        for (l, w) in model.weights.iter_mut().enumerate() {
            let limit = (6.0 / (layer_dims[l] + layer_dims[l + 1]) as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.uniform(-limit, limit);
            }
        }
        Ok(model)
    }

    pub fn zeros(layer_dims: &[usize], activations: &[Activation]) -> Result<Self> {
        let weights = layer_dims
            .windows(2)
            .map(|d| Tensor::zeros(&[d[1], d[0]]))
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| Tensor::zeros(&[d])).collect();
        Self::from_parts(layer_dims.to_vec(), weights, biases, activations.to_vec())
    }

    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Tensor>,
        biases: Vec<Tensor>,
        activations: Vec<Activation>,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return arg_err("an MLP needs at least one layer");
        }
        if layer_dims.contains(&0) {
            return arg_err("layer widths must be positive");
        }
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers || activations.len() != layers {
            return dim_err(format!(
                "{layers} layers but {} weights, {} biases, {} activations",
                weights.len(),
                biases.len(),
                activations.len()
            ));
        }
        for l in 0..layers {
            if weights[l].shape() != [layer_dims[l + 1], layer_dims[l]] {
                return dim_err(format!("layer {l} weight shape {:?}", weights[l].shape()));
            }
            if biases[l].shape() != [layer_dims[l + 1]] {
                return dim_err(format!("layer {l} bias shape {:?}", biases[l].shape()));
            }
            if activations[l] == Activation::Softmax && l + 1 != layers {
                return arg_err("softmax is only allowed on the final layer");
            }
        }
        if activations[layers - 1] != Activation::Identity
            && activations[layers - 1] != Activation::Softmax
        {
            return arg_err("final activation must be identity or softmax");
        }
        let model = Self {
            layer_dims,
            weights,
            biases,
            activations,
        };
        for (w, b) in model.weights.iter().zip(&model.biases) {
            w.ensure_finite("weight")?;
            b.ensure_finite("bias")?;
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.biases[layer]
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|d| d[1] * d[0] + d[1]).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return dim_err(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            ));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
            let n = b.len();
            b.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardPass> {
        self.forward_injected(input, None)
    }

    /// Forward pass with an optional additive bias on the first layer's
    /// pre-activation. Zero entries are skipped so a zero bias reproduces the
    /// plain forward pass bit for bit.
    pub fn forward_injected(&self, input: &[f64], bias0: Option<&[f64]>) -> Result<ForwardPass> {
        if input.len() != self.input_dim() {
            return dim_err(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            ));
        }
        if let Some(b) = bias0 {
            if b.len() != self.layer_dims[1] {
                return dim_err(format!(
                    "injected bias has length {}, first layer width is {}",
                    b.len(),
                    self.layer_dims[1]
                ));
            }
        }
        let layers = self.layer_count();
        let mut pre = Vec::with_capacity(layers);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let x = if l == 0 { input } else { &post[l - 1] };
            let mut z = self.weights[l].matvec(x)?;
            for (zi, bi) in z.iter_mut().zip(self.biases[l].data()) {
                *zi += bi;
            }
            if l == 0 {
                if let Some(b) = bias0 {
                    for (zi, &bi) in z.iter_mut().zip(b) {
                        if bi != 0.0 {
                            *zi += bi;
                        }
                    }
                }
            }
            let y = self.activations[l].apply(&z);
            pre.push(z);
            post.push(y);
        }
        Ok(ForwardPass {
            input: input.to_vec(),
            pre,
            post,
        })
    }

    /// Post-activation of the first layer only, with the same optional bias
    /// injection as [`forward_injected`](Self::forward_injected).
    pub fn first_layer(&self, input: &[f64], bias0: Option<&[f64]>) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return dim_err(format!("input has length {}", input.len()));
        }
        let mut z = self.weights[0].matvec(input)?;
        for (zi, bi) in z.iter_mut().zip(self.biases[0].data()) {
            *zi += bi;
        }
        if let Some(b) = bias0 {
            if b.len() != z.len() {
                return dim_err(format!("injected bias has length {}", b.len()));
            }
            for (zi, &bi) in z.iter_mut().zip(b) {
                if bi != 0.0 {
                    *zi += bi;
                }
            }
        }
        Ok(self.activations[0].apply(&z))
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.post.pop().unwrap())
    }

    /// Gradients of `⟨output, output_grad⟩` w.r.t. every parameter and the input.
    pub fn backward(&self, pass: &ForwardPass, output_grad: &[f64]) -> Result<Gradients> {
        self.backward_with(pass, TopGrad::Output(output_grad), &[])
    }

    /// General backward pass. `taps` adds extra gradients w.r.t. the
    /// post-activation of intermediate layers (for auxiliary heads).
    pub fn backward_with(
        &self,
        pass: &ForwardPass,
        top: TopGrad<'_>,
        taps: &[(usize, &[f64])],
    ) -> Result<Gradients> {
        let mut flat = vec![0.0; self.param_count()];
        let (input, first_preact) = self.backward_into(pass, top, taps, &mut flat, 1.0)?;
        let mut grads = Gradients {
            weights: Vec::with_capacity(self.layer_count()),
            biases: Vec::with_capacity(self.layer_count()),
            input,
            first_preact,
        };
        let mut at = 0;
        for l in 0..self.layer_count() {
            let (rows, cols) = (self.layer_dims[l + 1], self.layer_dims[l]);
            grads
                .weights
                .push(Tensor::from_vec(&[rows, cols], flat[at..at + rows * cols].to_vec())?);
            at += rows * cols;
            grads.biases.push(Tensor::vector(flat[at..at + rows].to_vec()));
            at += rows;
        }
        Ok(grads)
    }

    /// Accumulates `scale ×` parameter gradients into `flat` (same layout as
    /// [`params_flat`](Self::params_flat)) and returns the input gradient and
    /// the first-layer pre-activation gradient.
    pub fn backward_into(
        &self,
        pass: &ForwardPass,
        top: TopGrad<'_>,
        taps: &[(usize, &[f64])],
        flat: &mut [f64],
        scale: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let layers = self.layer_count();
        if pass.pre.len() != layers || flat.len() != self.param_count() {
            return dim_err("forward pass or gradient buffer does not match the network");
        }
        let top_len = match top {
            TopGrad::Output(g) | TopGrad::Logits(g) => g.len(),
        };
        if top_len != self.output_dim() {
            return dim_err(format!(
                "output gradient has length {top_len}, network output is {}",
                self.output_dim()
            ));
        }
        for &(l, g) in taps {
            if l >= layers || g.len() != self.layer_dims[l + 1] {
                return dim_err(format!("tap at layer {l} has length {}", g.len()));
            }
        }

        // Offsets of each layer's block in the flat buffer.
        let mut offsets = Vec::with_capacity(layers);
        let mut at = 0;
        for l in 0..layers {
            offsets.push(at);
            at += self.layer_dims[l + 1] * self.layer_dims[l] + self.layer_dims[l + 1];
        }

        let mut grad_post: Option<Vec<f64>> = match top {
            TopGrad::Output(g) => Some(g.to_vec()),
            TopGrad::Logits(_) => None,
        };
        let mut input_grad = Vec::new();
        let mut first_preact = Vec::new();
        for l in (0..layers).rev() {
            let delta = match (l == layers - 1, top) {
                (true, TopGrad::Logits(g)) => {
                    let mut d = g.to_vec();
                    for &(tl, tg) in taps {
                        if tl == l {
                            // Tap on the top layer's post-activation still passes through it.
                            let extra = self.activations[l].backprop(&pass.pre[l], &pass.post[l], tg);
                            axpy(&mut d, 1.0, &extra);
                        }
                    }
                    d
                }
                _ => {
                    let mut gp = grad_post.take().expect("gradient from layer above");
                    for &(tl, tg) in taps {
                        if tl == l {
                            axpy(&mut gp, 1.0, tg);
                        }
                    }
                    self.activations[l].backprop(&pass.pre[l], &pass.post[l], &gp)
                }
            };
            let x = if l == 0 { &pass.input } else { &pass.post[l - 1] };
            let cols = self.layer_dims[l];
            let base = offsets[l];
            for (i, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(&mut flat[base + i * cols..base + (i + 1) * cols], scale * d, x);
                }
            }
            let bias_base = base + delta.len() * cols;
            axpy(&mut flat[bias_base..bias_base + delta.len()], scale, &delta);
            let below = self.weights[l].matvec_t(&delta)?;
            if l == 0 {
                input_grad = below;
                first_preact = delta;
            } else {
                grad_post = Some(below);
            }
        }
        Ok((input_grad, first_preact))
    }
}
