//! Dense feed-forward networks with explicit forward/backward passes.
//!
//! Batches are row-major: an `n x in` matrix holds one sample per row.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encoder,
    Generator,
    Classifier,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Encoder => 0,
            Role::Generator => 1,
            Role::Classifier => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Role::Encoder),
            1 => Some(Role::Generator),
            2 => Some(Role::Classifier),
            _ => None,
        }
    }
}

/// One fully connected layer: `act(x W^T + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(Error::dims(format!(
                "bias of length {} for a {}x{} weight",
                bias.len(),
                weight.nrows(),
                weight.ncols()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weight = DMatrix::from_fn(output, input, |_, _| rng.random_range(-limit..=limit));
        Self {
            weight,
            bias: DVector::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Parameters of one functional module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub role: Role,
    layers: Vec<Dense>,
}

/// Every pre- and post-activation of a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

impl Trace {
    pub fn output(&self) -> &DMatrix<f64> {
        self.post.last().unwrap_or(&self.input)
    }

    pub fn input(&self) -> &DMatrix<f64> {
        &self.input
    }

    pub fn pre_activations(&self) -> &[DMatrix<f64>] {
        &self.pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }
}

impl ModelParams {
    pub fn new(role: Role, layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dims(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        let finite = layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { role, layers })
    }

    /// Glorot-initialized network; `sizes` lists every width from input to output.
    pub fn init<R: Rng + ?Sized>(
        role: Role,
        sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() != activations.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} sizes need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Dense::glorot(w[0], w[1], act, rng))
            .collect();
        Self::new(role, layers)
    }

    /// `input -> hidden relu -> embed identity`.
    pub fn encoder<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        embed: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::init(
            Role::Encoder,
            &[input, hidden, embed],
            &[Activation::Relu, Activation::Identity],
            rng,
        )
    }

    /// `noise + classes -> hidden relu -> hidden relu -> embed identity`;
    /// the label enters as a one-hot block after the noise.
    pub fn generator<R: Rng + ?Sized>(
        noise_dim: usize,
        classes: usize,
        hidden: usize,
        embed: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::init(
            Role::Generator,
            &[noise_dim + classes, hidden, hidden, embed],
            &[Activation::Relu, Activation::Relu, Activation::Identity],
            rng,
        )
    }

    /// `embed -> hidden relu -> classes identity` (logits).
    pub fn classifier<R: Rng + ?Sized>(
        embed: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::init(
            Role::Classifier,
            &[embed, hidden, classes],
            &[Activation::Relu, Activation::Identity],
            rng,
        )
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<Trace> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::dims(format!(
                "batch has {} columns, model expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward input".into()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = post.last().unwrap_or(batch);
            let mut z = x * layer.weight.transpose();
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(layer.bias[j]);
            }
            let act = layer.activation;
            let a = z.map(|v| act.apply(v));
            pre.push(z);
            post.push(a);
        }
        Ok(Trace {
            input: batch.clone(),
            pre,
            post,
        })
    }

    /// Output only.
    pub fn predict(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut trace = self.forward(batch)?;
        Ok(trace.post.pop().expect("non-empty model"))
    }

    /// Reverse-mode gradients for a trace produced by [`forward`](Self::forward)
    /// on these parameters. Returns parameter gradients and the gradient with
    /// respect to the input batch.
    pub fn backward(
        &self,
        trace: &Trace,
        output_grad: &DMatrix<f64>,
    ) -> Result<(Gradients, DMatrix<f64>)> {
        if trace.post.len() != self.layers.len() {
            return Err(Error::dims("trace does not belong to this model"));
        }
        if output_grad.shape() != trace.output().shape() {
            return Err(Error::dims(format!(
                "output gradient {:?} vs output {:?}",
                output_grad.shape(),
                trace.output().shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[i];
            let a = &trace.post[i];
            if z.ncols() != layer.output_dim() {
                return Err(Error::dims("trace does not belong to this model"));
            }
            let act = layer.activation;
            let dz = match act {
                Activation::Identity => upstream,
                _ => DMatrix::from_fn(z.nrows(), z.ncols(), |r, c| {
                    upstream[(r, c)] * act.derivative(z[(r, c)], a[(r, c)])
                }),
            };
            let x = if i == 0 { &trace.input } else { &trace.post[i - 1] };
            let dw = dz.transpose() * x;
            let db = dz.row_sum().transpose();
            upstream = &dz * &layer.weight;
            grads.push(LayerGrad {
                weight: dw,
                bias: db,
            });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dims("gradient layer count"));
        }
        for (l, g) in self.layers.iter().zip(&grads.layers) {
            if l.weight.shape() != g.weight.shape() || l.bias.len() != g.bias.len() {
                return Err(Error::dims("gradient shape"));
            }
        }
        if !grads.is_finite() {
            return Err(Error::Diverged(format!("non-finite {:?} gradient", self.role)));
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weight -= &g.weight * lr;
            l.bias -= &g.bias * lr;
        }
        Ok(())
    }

    /// Weighted parameter average; weights are normalized to sum to one.
    pub fn weighted_average(models: &[(&ModelParams, f64)]) -> Result<ModelParams> {
        let (first, _) = models
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
        let total: f64 = models.iter().map(|(_, w)| *w).sum();
        if total.is_nan() || total <= 0.0 {
            return Err(Error::InvalidArgument("average weights must be positive".into()));
        }
        let mut layers: Vec<Dense> = first
            .layers
            .iter()
            .map(|l| Dense {
                weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                bias: DVector::zeros(l.bias.len()),
                activation: l.activation,
            })
            .collect();
        for (m, w) in models {
            if m.layers.len() != layers.len()
                || m.layers
                    .iter()
                    .zip(&layers)
                    .any(|(a, b)| a.weight.shape() != b.weight.shape())
            {
                return Err(Error::dims("models to average differ in shape"));
            }
            let share = w / total;
            for (acc, l) in layers.iter_mut().zip(&m.layers) {
                acc.weight += &l.weight * share;
                acc.bias += &l.bias * share;
            }
        }
        Ok(ModelParams {
            role: first.role,
            layers,
        })
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_ce(logits: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    let n = logits.nrows();
    let classes = logits.ncols();
    if labels.len() != n {
        return Err(Error::dims(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::NoSamples);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut grad = DMatrix::zeros(n, classes);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.max();
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        loss += log_norm - row[label];
        for c in 0..classes {
            grad[(i, c)] = (row[c] - log_norm).exp() / n as f64;
        }
        grad[(i, label)] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Concatenate noise rows with the one-hot encoding of `labels`.
pub fn noise_with_onehot(noise: &DMatrix<f64>, labels: &[usize], classes: usize) -> DMatrix<f64> {
    let k = noise.ncols();
    DMatrix::from_fn(noise.nrows(), k + classes, |r, c| {
        if c < k {
            noise[(r, c)]
        } else if labels[r] == c - k {
            1.0
        } else {
            0.0
        }
    })
}
