//! Dense feed-forward networks with hand-derived backprop and Adam.
//!
//! Parameter layout, per layer in order (hidden layers first, output layer
//! last): the weight matrix in row-major `[out x in]` order, followed by
//! the `out` bias terms when `use_bias` is set. Hidden layers apply the
//! configured activation; the output layer is linear.
//!
//! Everything here is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Shape of a fully-connected network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Hidden layer widths, input side first.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        layer_widths: Vec<usize>,
        activation: Activation,
        use_bias: bool,
        output_dim: usize,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            layer_widths,
            activation,
            use_bias,
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.is_empty() {
            return Err(Error::Config("mlp needs at least one hidden layer".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.layer_widths.contains(&0) {
            return Err(Error::Config("mlp widths must all be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, output layer included.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ins = std::iter::once(self.input_dim).chain(self.layer_widths.iter().copied());
        let outs = self
            .layer_widths
            .iter()
            .copied()
            .chain(std::iter::once(self.output_dim));
        ins.zip(outs)
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .map(|(i, o)| o * i + if self.use_bias { o } else { 0 })
            .sum()
    }

    fn max_width(&self) -> usize {
        self.layer_widths
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(1)
    }
}

/// One dense layer in unflattened form.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `weights[o][i]`
    pub weights: Vec<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Flat parameter vector tied to the spec that shapes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl MlpWeights {
    pub fn from_flat(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        check_dim("mlp parameter vector", spec.param_count(), params.len())?;
        Ok(Self { spec, params })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        let n = spec.param_count();
        Self::from_flat(spec, vec![0.0; n])
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases alike.
    pub fn init_uniform<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = fan_out * fan_in + if spec.use_bias { fan_out } else { 0 };
            params.extend((0..n).map(|_| rng.gen_range(-bound..=bound)));
        }
        Self::from_flat(spec, params)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn unflatten(&self) -> Vec<DenseLayer> {
        let mut offset = 0;
        let mut layers = Vec::new();
        for (fan_in, fan_out) in self.spec.layer_shapes() {
            let weights = (0..fan_out)
                .map(|o| self.params[offset + o * fan_in..offset + (o + 1) * fan_in].to_vec())
                .collect();
            offset += fan_in * fan_out;
            let bias = if self.spec.use_bias {
                let b = self.params[offset..offset + fan_out].to_vec();
                offset += fan_out;
                Some(b)
            } else {
                None
            };
            layers.push(DenseLayer { weights, bias });
        }
        layers
    }

    pub fn from_layers(spec: MlpSpec, layers: &[DenseLayer]) -> Result<Self> {
        spec.validate()?;
        let shapes: Vec<_> = spec.layer_shapes().collect();
        check_dim("mlp layer count", shapes.len(), layers.len())?;
        let mut params = Vec::with_capacity(spec.param_count());
        for (&(fan_in, fan_out), layer) in shapes.iter().zip(layers) {
            check_dim("mlp layer rows", fan_out, layer.weights.len())?;
            for row in &layer.weights {
                check_dim("mlp layer columns", fan_in, row.len())?;
                params.extend_from_slice(row);
            }
            match (&layer.bias, spec.use_bias) {
                (Some(b), true) => {
                    check_dim("mlp bias", fan_out, b.len())?;
                    params.extend_from_slice(b);
                }
                (None, false) => {}
                _ => return Err(Error::Config("bias presence does not match spec".into())),
            }
        }
        Self::from_flat(spec, params)
    }
}

/// Per-sample activation record reused across forward/backward calls.
#[derive(Clone, Debug)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[k]` the post-activation of hidden
    /// layer `k`, and the last entry the network output.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Tape {
    pub fn new(spec: &MlpSpec) -> Self {
        let mut acts = vec![vec![0.0; spec.input_dim]];
        acts.extend(spec.layer_widths.iter().map(|&w| vec![0.0; w]));
        acts.push(vec![0.0; spec.output_dim]);
        let w = spec.max_width();
        Self {
            acts,
            delta: vec![0.0; w],
            delta_prev: vec![0.0; w],
        }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Forward pass into `tape`. Shapes are the caller's responsibility.
pub fn forward_into(w: &MlpWeights, x: &[f64], tape: &mut Tape) {
    let spec = &w.spec;
    let params = &w.params;
    debug_assert_eq!(x.len(), spec.input_dim);
    tape.acts[0].copy_from_slice(x);
    let n_layers = spec.layer_widths.len() + 1;
    let mut offset = 0;
    for (l, (fan_in, fan_out)) in spec.layer_shapes().enumerate() {
        let (before, after) = tape.acts.split_at_mut(l + 1);
        let input = &before[l];
        let out = &mut after[0];
        let wmat = &params[offset..offset + fan_in * fan_out];
        offset += fan_in * fan_out;
        for (o, row) in wmat.chunks_exact(fan_in).enumerate() {
            out[o] = dot(row, input);
        }
        if spec.use_bias {
            for (o, b) in out.iter_mut().zip(&params[offset..offset + fan_out]) {
                *o += b;
            }
            offset += fan_out;
        }
        if l + 1 < n_layers {
            for v in out.iter_mut() {
                *v = spec.activation.apply(*v);
            }
        }
    }
}

/// Accumulates `d<upstream, f(x)>/dw` into `grad` and writes
/// `d<upstream, f(x)>/dx` into `dx`, each when given. Requires a tape
/// filled by [`forward_into`] with the same weights.
pub fn backward_into(
    w: &MlpWeights,
    tape: &mut Tape,
    upstream: &[f64],
    mut grad: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let spec = &w.spec;
    let params = &w.params;
    debug_assert_eq!(upstream.len(), spec.output_dim);

    let n_layers = spec.layer_widths.len() + 1;
    let mut end = params.len();
    tape.delta[..spec.output_dim].copy_from_slice(upstream);
    let mut dx = dx;

    // Walk layers from the output back to the input.
    let mut fan_out = spec.output_dim;
    for l in (0..n_layers).rev() {
        let fan_in = if l == 0 {
            spec.input_dim
        } else {
            spec.layer_widths[l - 1]
        };
        let delta = &tape.delta[..fan_out];
        if spec.use_bias {
            let b0 = end - fan_out;
            if let Some(g) = grad.as_deref_mut() {
                for (g, d) in g[b0..end].iter_mut().zip(delta) {
                    *g += d;
                }
            }
            end = b0;
        }
        let w0 = end - fan_in * fan_out;
        let input = &tape.acts[l];
        let wmat = &params[w0..end];
        let delta_prev = &mut tape.delta_prev[..fan_in];
        delta_prev.iter_mut().for_each(|v| *v = 0.0);
        let need_delta = l > 0 || dx.is_some();
        match grad.as_deref_mut() {
            Some(g) => {
                for ((grow, wrow), &d) in g[w0..end]
                    .chunks_exact_mut(fan_in)
                    .zip(wmat.chunks_exact(fan_in))
                    .zip(delta)
                {
                    if d == 0.0 {
                        continue;
                    }
                    axpy(d, input, grow);
                    if need_delta {
                        axpy(d, wrow, delta_prev);
                    }
                }
            }
            None => {
                for (wrow, &d) in wmat.chunks_exact(fan_in).zip(delta) {
                    if d != 0.0 {
                        axpy(d, wrow, delta_prev);
                    }
                }
            }
        }
        end = w0;
        if l == 0 {
            if let Some(dx) = dx.take() {
                dx.copy_from_slice(delta_prev);
            }
        } else {
            for (dp, &a) in delta_prev.iter_mut().zip(input) {
                *dp *= spec.activation.derivative_from_output(a);
            }
        }
        std::mem::swap(&mut tape.delta, &mut tape.delta_prev);
        fan_out = fan_in;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn mlp_forward(w: &MlpWeights, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("mlp input", w.spec.input_dim, x.len())?;
    let mut tape = Tape::new(&w.spec);
    forward_into(w, x, &mut tape);
    Ok(tape.output().to_vec())
}

/// Gradient of `<upstream, mlp_forward(w, x)>` with respect to the flat
/// weights and to the input.
pub fn mlp_grad(w: &MlpWeights, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim("mlp input", w.spec.input_dim, x.len())?;
    check_dim("mlp upstream", w.spec.output_dim, upstream.len())?;
    let mut tape = Tape::new(&w.spec);
    forward_into(w, x, &mut tape);
    let mut dw = vec![0.0; w.len()];
    let mut dx = vec![0.0; x.len()];
    backward_into(w, &mut tape, upstream, Some(&mut dw), Some(&mut dx));
    Ok((dw, dx))
}

/// Adam optimiser state. `update` minimises; callers maximising pass the
/// negated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// In-place update. A non-finite gradient leaves both the state and the
    /// parameters untouched.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_dim("adam params", self.m.len(), params.len())?;
        check_dim("adam grad", self.m.len(), grad.len())?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("adam gradient component {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::update`].
pub fn adam_step(
    state: &AdamState,
    w: &MlpWeights,
    grad: &[f64],
) -> Result<(AdamState, MlpWeights)> {
    let mut state = state.clone();
    let mut w = w.clone();
    state.update(&mut w.params, grad)?;
    Ok((state, w))
}
