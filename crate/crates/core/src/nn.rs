//! Small neural-network substrate: dense and per-entity layers, squeeze-and-excitation,
//! max-pooling over entities and Adam. Forward passes are pure; backward passes take
//! the cached forward values and accumulate parameter gradients in place.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlockError, Result};
use crate::scalar::Scalar;

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FlockError::Shape {
                context: "tensor data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[T]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(FlockError::Shape {
                    context: "tensor row",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    #[cfg(test)]
    fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Linear => T::one(),
        }
    }
}

/// Dot product with four independent accumulators, summed in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Anything holding trainable arrays with matching gradient buffers.
///
/// Both visitors must walk the arrays in the same order on every call; Adam
/// moments and checkpoint entries are keyed by that order.
pub trait Parameterized<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T], &mut [T]));

    fn zero_grad(&mut self)
    where
        T: Scalar,
    {
        self.visit_params_mut("", &mut |_, _, g| g.iter_mut().for_each(|x| *x = T::zero()));
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, _, v| n += v.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully-connected layer `y = act(W x + b)`, `W` is `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weights: Tensor2<T>,
    pub bias: Vec<T>,
    pub grad_weights: Tensor2<T>,
    pub grad_bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense {
            weights: Tensor2::zeros(outputs, inputs),
            bias: vec![T::zero(); outputs],
            grad_weights: Tensor2::zeros(outputs, inputs),
            grad_bias: vec![T::zero(); outputs],
            activation,
        }
    }

    /// He-uniform weights for ReLU, Xavier-uniform otherwise; zero biases.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            _ => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        Self::init_uniform(inputs, outputs, activation, limit, rng)
    }

    /// Weights uniform in `[-limit, limit]`, zero biases.
    pub fn init_uniform<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        limit: f64,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(inputs, outputs, activation);
        for w in layer.weights.data_mut() {
            *w = T::lit(rng.random_range(-limit..=limit));
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.inputs() {
            return Err(FlockError::Shape {
                context: "dense input",
                expected: self.inputs(),
                actual: len,
            });
        }
        Ok(())
    }

    #[inline]
    fn forward_unchecked(&self, x: &[T], out: &mut [T]) {
        for (o, (w, b)) in out.iter_mut().zip(self.weights.data.chunks_exact(self.inputs()).zip(&self.bias)) {
            *o = self.activation.apply(dot(w, x) + *b);
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x.len())?;
        let mut out = vec![T::zero(); self.outputs()];
        self.forward_unchecked(x, &mut out);
        Ok(out)
    }

    /// Backpropagates `grad_y` through the layer given its forward input `x` and output `y`.
    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[T], y: &[T], grad_y: &[T]) -> Result<Vec<T>> {
        self.check_input(x.len())?;
        for (len, context) in [(y.len(), "dense output"), (grad_y.len(), "dense upstream gradient")] {
            if len != self.outputs() {
                return Err(FlockError::Shape {
                    context,
                    expected: self.outputs(),
                    actual: len,
                });
            }
        }
        let mut grad_x = vec![T::zero(); self.inputs()];
        self.backward_unchecked(x, y, grad_y, &mut grad_x);
        Ok(grad_x)
    }

    #[inline]
    fn backward_unchecked(&mut self, x: &[T], y: &[T], grad_y: &[T], grad_x: &mut [T]) {
        let n_in = self.inputs();
        for o in 0..self.outputs() {
            let g = grad_y[o] * self.activation.derivative_from_output(y[o]);
            if g == T::zero() {
                continue;
            }
            self.grad_bias[o] += g;
            axpy(g, x, &mut self.grad_weights.data[o * n_in..(o + 1) * n_in]);
            axpy(g, &self.weights.data[o * n_in..(o + 1) * n_in], grad_x);
        }
    }
}

impl<T: Scalar> Parameterized<T> for Dense<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "weight"), &self.weights.shape(), self.weights.data());
        f(&join(prefix, "bias"), &[self.bias.len()], &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T], &mut [T])) {
        f(&join(prefix, "weight"), &mut self.weights.data, &mut self.grad_weights.data);
        f(&join(prefix, "bias"), &mut self.bias, &mut self.grad_bias);
    }
}

/// Width-`features` convolution over an `entities x features` input with stride one row:
/// every filter sees exactly one entity, and all entities share the filters.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityConv<T> {
    pub kernel: Dense<T>,
}

impl<T: Scalar> EntityConv<T> {
    pub fn new(kernel: Dense<T>) -> Self {
        EntityConv { kernel }
    }

    pub fn filters(&self) -> usize {
        self.kernel.outputs()
    }

    pub fn forward(&self, input: &Tensor2<T>) -> Result<Tensor2<T>> {
        self.kernel.check_input(input.cols())?;
        let mut out = Tensor2::zeros(input.rows(), self.filters());
        for e in 0..input.rows() {
            let (x, o) = (input.row(e), &mut out.data[e * self.kernel.outputs()..(e + 1) * self.kernel.outputs()]);
            self.kernel.forward_unchecked(x, o);
        }
        Ok(out)
    }

    pub fn backward(&mut self, input: &Tensor2<T>, output: &Tensor2<T>, grad_out: &Tensor2<T>) -> Result<Tensor2<T>> {
        self.kernel.check_input(input.cols())?;
        if output.shape() != [input.rows(), self.filters()] || grad_out.shape() != output.shape() {
            return Err(FlockError::Shape {
                context: "entity conv gradient rows",
                expected: input.rows() * self.filters(),
                actual: grad_out.rows() * grad_out.cols(),
            });
        }
        let mut grad_in = Tensor2::zeros(input.rows(), input.cols());
        let cols = input.cols();
        for e in 0..input.rows() {
            let gx = &mut grad_in.data[e * cols..(e + 1) * cols];
            self.kernel.backward_unchecked(input.row(e), output.row(e), grad_out.row(e), gx);
        }
        Ok(grad_in)
    }
}

impl<T: Scalar> Parameterized<T> for EntityConv<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.kernel.visit_params(prefix, f)
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T], &mut [T])) {
        self.kernel.visit_params_mut(prefix, f)
    }
}

/// Squeeze-and-excitation over the channels of an `entities x channels` map.
#[derive(Clone, Debug, PartialEq)]
pub struct SeBlock<T> {
    /// `channels -> channels / r`, ReLU.
    pub squeeze: Dense<T>,
    /// `channels / r -> channels`, sigmoid.
    pub excite: Dense<T>,
}

/// Values cached by [`SeBlock::forward`] for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SeTrace<T> {
    pub pooled: Vec<T>,
    pub hidden: Vec<T>,
    pub gates: Vec<T>,
}

impl<T: Scalar> SeBlock<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(FlockError::config(
                "network.se_reduction",
                format!("{reduction} does not divide {channels} channels"),
            ));
        }
        let hidden = channels / reduction;
        Ok(SeBlock {
            squeeze: Dense::init(channels, hidden, Activation::Relu, rng),
            excite: Dense::init(hidden, channels, Activation::Sigmoid, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.inputs()
    }

    pub fn forward(&self, input: &Tensor2<T>) -> Result<(Tensor2<T>, SeTrace<T>)> {
        if input.cols() != self.channels() {
            return Err(FlockError::Shape {
                context: "se block channels",
                expected: self.channels(),
                actual: input.cols(),
            });
        }
        if input.rows() == 0 {
            return Err(FlockError::Shape {
                context: "se block entities",
                expected: 1,
                actual: 0,
            });
        }
        let c = input.cols();
        let mut pooled = vec![T::zero(); c];
        for e in 0..input.rows() {
            for (p, &x) in pooled.iter_mut().zip(input.row(e)) {
                *p += x;
            }
        }
        let inv = T::one() / T::lit(input.rows() as f64);
        pooled.iter_mut().for_each(|p| *p *= inv);
        let hidden = self.squeeze.forward(&pooled)?;
        let gates = self.excite.forward(&hidden)?;
        let mut out = input.clone();
        for e in 0..out.rows() {
            for (o, &g) in out.row_mut(e).iter_mut().zip(&gates) {
                *o *= g;
            }
        }
        Ok((out, SeTrace { pooled, hidden, gates }))
    }

    pub fn backward(&mut self, input: &Tensor2<T>, trace: &SeTrace<T>, grad_out: &Tensor2<T>) -> Result<Tensor2<T>> {
        if grad_out.shape() != input.shape() {
            return Err(FlockError::Shape {
                context: "se block gradient",
                expected: input.rows() * input.cols(),
                actual: grad_out.rows() * grad_out.cols(),
            });
        }
        let c = input.cols();
        let mut grad_in = Tensor2::zeros(input.rows(), c);
        let mut grad_gates = vec![T::zero(); c];
        for e in 0..input.rows() {
            let (x, go) = (input.row(e), grad_out.row(e));
            let gi = grad_in.row_mut(e);
            for k in 0..c {
                gi[k] = go[k] * trace.gates[k];
                grad_gates[k] += go[k] * x[k];
            }
        }
        let grad_hidden = self.excite.backward(&trace.hidden, &trace.gates, &grad_gates)?;
        let grad_pooled = self.squeeze.backward(&trace.pooled, &trace.hidden, &grad_hidden)?;
        let inv = T::one() / T::lit(input.rows() as f64);
        for e in 0..input.rows() {
            axpy(inv, &grad_pooled, grad_in.row_mut(e));
        }
        Ok(grad_in)
    }
}

impl<T: Scalar> Parameterized<T> for SeBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.squeeze.visit_params(&join(prefix, "squeeze"), f);
        self.excite.visit_params(&join(prefix, "excite"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T], &mut [T])) {
        self.squeeze.visit_params_mut(&join(prefix, "squeeze"), f);
        self.excite.visit_params_mut(&join(prefix, "excite"), f);
    }
}

/// Per-channel maximum over entity rows, with the winning row per channel.
/// Ties go to the lowest row index.
pub fn max_pool_entities<T: Scalar>(input: &Tensor2<T>) -> Result<(Vec<T>, Vec<usize>)> {
    if input.rows() == 0 {
        return Err(FlockError::Shape {
            context: "max pool entities",
            expected: 1,
            actual: 0,
        });
    }
    let mut best = input.row(0).to_vec();
    let mut argmax = vec![0; input.cols()];
    for e in 1..input.rows() {
        for (c, &x) in input.row(e).iter().enumerate() {
            if x > best[c] {
                best[c] = x;
                argmax[c] = e;
            }
        }
    }
    Ok((best, argmax))
}

/// Routes each channel's gradient to its argmax row.
pub fn max_pool_backward<T: Scalar>(argmax: &[usize], grad: &[T], rows: usize) -> Tensor2<T> {
    let mut out = Tensor2::zeros(rows, grad.len());
    for (c, (&e, &g)) in argmax.iter().zip(grad).enumerate() {
        out.set(e, c, g);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one [`Parameterized`] model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: Parameterized<T> + ?Sized>(config: AdamConfig, model: &P) -> Self {
        let mut first_moment = Vec::new();
        model.visit_params("", &mut |_, _, v| first_moment.push(vec![T::zero(); v.len()]));
        let second_moment = first_moment.clone();
        AdamState {
            config,
            step: 0,
            first_moment,
            second_moment,
        }
    }

    /// One bias-corrected Adam update from the model's accumulated gradients.
    /// Rejects non-finite gradients before touching any parameter.
    pub fn step<P: Parameterized<T> + ?Sized>(&mut self, model: &mut P) -> Result<()> {
        let mut finite = true;
        let mut count = 0;
        model.visit_params_mut("", &mut |_, _, g| {
            count += 1;
            finite &= g.iter().all(|x| x.is_finite());
        });
        if !finite {
            return Err(FlockError::NonFinite("gradient"));
        }
        if count != self.first_moment.len() {
            return Err(FlockError::Shape {
                context: "adam parameter groups",
                expected: self.first_moment.len(),
                actual: count,
            });
        }
        self.step += 1;
        let cfg = self.config;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let one = T::one();
        let correction1 = one - T::lit(cfg.beta1.powi(self.step as i32));
        let correction2 = one - T::lit(cfg.beta2.powi(self.step as i32));
        let lr = T::lit(cfg.learning_rate);
        let eps = T::lit(cfg.epsilon);
        let mut idx = 0;
        let (m_all, v_all) = (&mut self.first_moment, &mut self.second_moment);
        model.visit_params_mut("", &mut |_, value, grad| {
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        Ok(())
    }
}
