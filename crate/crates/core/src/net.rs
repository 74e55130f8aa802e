//! Dense feed-forward networks with reverse-mode gradients.
//!
//! Parameters live in one flat vector, layer by layer, each layer storing its
//! `out × in` weight matrix (row-major) followed by its `out` biases.
//!
//! Besides plain evaluation, networks can be pushed forward on *jets*: a batch
//! of inputs together with their first and second derivatives along a single
//! direction (here always the spatial coordinate). The tape of such a forward
//! pass can be run backwards, which yields gradients of any linear functional
//! of the output jet with respect to the parameters and to the input jet. This
//! covers the chain rule through `U ∘ Φ` for `u`, `u_x` and `u_xx`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::linalg::{gemm, Matrix};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// `x · sigmoid(x)`.
    Swish,
    Tanh,
    Identity,
}

impl Activation {
    /// `σ(z)` and its first three derivatives.
    #[inline]
    pub fn eval(self, z: f64) -> [f64; 4] {
        match self {
            Activation::Identity => [z, 1.0, 0.0, 0.0],
            Activation::Tanh => {
                let t = math::tanh(z);
                let d1 = 1.0 - t * t;
                [t, d1, -2.0 * t * d1, d1 * (6.0 * t * t - 2.0)]
            }
            Activation::Swish => {
                let s = sigmoid(z);
                let g1 = s * (1.0 - s);
                let g2 = g1 * (1.0 - 2.0 * s);
                let g3 = g2 * (1.0 - 2.0 * s) - 2.0 * g1 * g1;
                [z * s, s + z * g1, 2.0 * g1 + z * g2, 3.0 * g2 + z * g3]
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Swish => "swish",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Activation::Swish, Activation::Tanh, Activation::Identity]
            .into_iter()
            .find(|a| a.as_str() == s)
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => math::tanh(z),
            Activation::Swish => z * sigmoid(z),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + math::exp(-z))
    } else {
        let e = math::exp(z);
        e / (1.0 + e)
    }
}

/// Layer widths and hidden activations; the output layer is always affine.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MlpSpec {
    sizes: Vec<usize>,
    hidden: Vec<Activation>,
}

impl MlpSpec {
    /// Network with the same activation after every hidden layer.
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let hidden = vec![activation; sizes.len().saturating_sub(2)];
        Self::with_activations(sizes, hidden)
    }

    pub fn with_activations(sizes: Vec<usize>, hidden: Vec<Activation>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(config_err("a network needs at least input and output sizes"));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(config_err("layer sizes must be at least 1"));
        }
        if hidden.len() != sizes.len() - 2 {
            return Err(config_err(alloc::format!(
                "{} hidden layers but {} activations",
                sizes.len() - 2,
                hidden.len()
            )));
        }
        Ok(Self { sizes, hidden })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden_activations(&self) -> &[Activation] {
        &self.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `Σ_k (sizes[k] + 1) · sizes[k+1]`.
    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn activation(&self, layer: usize) -> Activation {
        self.hidden.get(layer).copied().unwrap_or(Activation::Identity)
    }

    /// Offset of layer `k`'s weights in the flat vector.
    fn offset(&self, layer: usize) -> usize {
        self.sizes[..layer + 1]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(config_err(alloc::format!(
                "parameter vector has length {}, network expects {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }
}

/// Flattened network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut p = Vec::with_capacity(spec.param_count());
        for w in spec.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            p.extend((0..fan_in * fan_out).map(|_| limit * (2.0 * rng.random::<f64>() - 1.0)));
            p.extend(core::iter::repeat_n(0.0, fan_out));
        }
        Self(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weights and biases of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `out × in`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

pub fn unflatten(spec: &MlpSpec, params: &FlatParams) -> Result<Vec<LayerParams>> {
    spec.check_params(&params.0)?;
    let mut layers = Vec::with_capacity(spec.num_layers());
    let mut at = 0;
    for w in spec.sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = Matrix::from_row_major(fan_out, fan_in, params.0[at..at + fan_in * fan_out].to_vec())?;
        at += fan_in * fan_out;
        let biases = params.0[at..at + fan_out].to_vec();
        at += fan_out;
        layers.push(LayerParams { weights, biases });
    }
    Ok(layers)
}

pub fn flatten(spec: &MlpSpec, layers: &[LayerParams]) -> Result<FlatParams> {
    if layers.len() != spec.num_layers() {
        return Err(config_err("layer count does not match the network"));
    }
    let mut p = Vec::with_capacity(spec.param_count());
    for (l, w) in layers.iter().zip(spec.sizes.windows(2)) {
        if l.weights.rows() != w[1] || l.weights.cols() != w[0] || l.biases.len() != w[1] {
            return Err(config_err("layer shape does not match the network"));
        }
        p.extend_from_slice(l.weights.as_slice());
        p.extend_from_slice(&l.biases);
    }
    Ok(FlatParams(p))
}

/// A batch of points with up to two directional derivatives.
///
/// `channels[0]` holds values, `channels[1]` first derivatives and
/// `channels[2]` second derivatives; each is `points × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub channels: Vec<Matrix>,
}

impl Jet {
    pub fn new(channels: Vec<Matrix>) -> Result<Self> {
        if channels.is_empty() || channels.len() > 3 {
            return Err(config_err("a jet carries 1 to 3 channels"));
        }
        let (r, c) = (channels[0].rows(), channels[0].cols());
        if channels.iter().any(|m| m.rows() != r || m.cols() != c) {
            return Err(config_err("jet channels differ in shape"));
        }
        Ok(Self { channels })
    }

    pub fn values(values: Matrix) -> Self {
        Self {
            channels: vec![values],
        }
    }

    pub fn zeros(points: usize, dim: usize, order: usize) -> Self {
        Self {
            channels: (0..=order).map(|_| Matrix::zeros(points, dim)).collect(),
        }
    }

    pub fn points(&self) -> usize {
        self.channels[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.channels[0].cols()
    }

    /// Highest derivative carried (0, 1 or 2).
    pub fn order(&self) -> usize {
        self.channels.len() - 1
    }
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: Jet,
    pre: Jet,
    /// `σ', σ'', σ'''` at the pre-activation values, `points × out` each.
    slopes: [Matrix; 3],
}

/// Record of a jet forward pass, consumed by [`backward_jet`].
#[derive(Debug, Clone)]
pub struct JetTape {
    layers: Vec<LayerTape>,
}

/// Pushes `input` through the network, returning the output jet and a tape.
pub fn forward_jet(spec: &MlpSpec, params: &[f64], input: &Jet) -> Result<(Jet, JetTape)> {
    spec.check_params(params)?;
    if input.dim() != spec.input_dim() {
        return Err(config_err(alloc::format!(
            "input has dimension {}, network expects {}",
            input.dim(),
            spec.input_dim()
        )));
    }
    let order = input.order();
    let npts = input.points();
    let mut layers = Vec::with_capacity(spec.num_layers());
    let mut current = input.clone();
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.sizes[l], spec.sizes[l + 1]);
        let off = spec.offset(l);
        let w = &params[off..off + fan_in * fan_out];
        let b = &params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out];
        let act = spec.activation(l);

        let mut pre = Jet::zeros(npts, fan_out, order);
        for (c, (src, dst)) in current.channels.iter().zip(pre.channels.iter_mut()).enumerate() {
            let beta = if c == 0 {
                for p in 0..npts {
                    dst.row_mut(p).copy_from_slice(b);
                }
                1.0
            } else {
                0.0
            };
            gemm(npts, fan_in, fan_out, 1.0, (src.as_slice(), false), (w, true), beta, dst.as_mut_slice());
        }

        let mut out = Jet::zeros(npts, fan_out, order);
        let mut slopes = [
            Matrix::zeros(npts, fan_out),
            Matrix::zeros(npts, fan_out),
            Matrix::zeros(npts, fan_out),
        ];
        {
            let [sl1, sl2, sl3] = &mut slopes;
            let (sl1, sl2, sl3) = (sl1.as_mut_slice(), sl2.as_mut_slice(), sl3.as_mut_slice());
            let z0 = pre.channels[0].as_slice();
            let y0 = out.channels[0].as_mut_slice();
            for k in 0..npts * fan_out {
                let [s0, s1, s2, s3] = act.eval(z0[k]);
                y0[k] = s0;
                sl1[k] = s1;
                sl2[k] = s2;
                sl3[k] = s3;
            }
            if order >= 1 {
                let z1 = pre.channels[1].as_slice();
                let (y1, rest) = out.channels[1..].split_at_mut(1);
                let y1 = y1[0].as_mut_slice();
                for k in 0..npts * fan_out {
                    y1[k] = sl1[k] * z1[k];
                }
                if order >= 2 {
                    let z2 = pre.channels[2].as_slice();
                    let y2 = rest[0].as_mut_slice();
                    for k in 0..npts * fan_out {
                        y2[k] = sl2[k] * z1[k] * z1[k] + sl1[k] * z2[k];
                    }
                }
            }
        }
        layers.push(LayerTape {
            input: core::mem::replace(&mut current, out),
            pre,
            slopes,
        });
    }
    Ok((current, JetTape { layers }))
}

/// Reverse pass: given adjoints of the output jet (same shape as the forward
/// output), returns the parameter gradient and the adjoint of the input jet.
pub fn backward_jet(
    spec: &MlpSpec,
    params: &[f64],
    tape: &JetTape,
    output_adjoint: &Jet,
) -> Result<(Vec<f64>, Jet)> {
    let mut grad = vec![0.0; spec.param_count()];
    let input_adjoint = backward_jet_into(spec, params, tape, output_adjoint, &mut grad)?;
    Ok((grad, input_adjoint))
}

/// As [`backward_jet`], accumulating the parameter gradient into `grad`.
pub fn backward_jet_into(
    spec: &MlpSpec,
    params: &[f64],
    tape: &JetTape,
    output_adjoint: &Jet,
    grad: &mut [f64],
) -> Result<Jet> {
    spec.check_params(params)?;
    spec.check_params(grad)?;
    let Some(last) = tape.layers.last() else {
        return Err(config_err("empty tape"));
    };
    let order = last.pre.order();
    if output_adjoint.order() != order
        || output_adjoint.points() != last.pre.points()
        || output_adjoint.dim() != spec.output_dim()
    {
        return Err(config_err("output adjoint does not match the forward pass"));
    }
    let npts = output_adjoint.points();
    let mut adj = output_adjoint.clone();
    for l in (0..spec.num_layers()).rev() {
        let t = &tape.layers[l];
        let (fan_in, fan_out) = (spec.sizes[l], spec.sizes[l + 1]);
        let off = spec.offset(l);
        let identity = spec.activation(l) == Activation::Identity;

        // Adjoints of the pre-activation channels.
        let zbar = if identity {
            adj
        } else {
            let mut zbar = Jet::zeros(npts, fan_out, order);
            let (s1, s2, s3) = (t.slopes[0].as_slice(), t.slopes[1].as_slice(), t.slopes[2].as_slice());
            let a0 = adj.channels[0].as_slice();
            let len = npts * fan_out;
            match order {
                0 => {
                    let zb0 = zbar.channels[0].as_mut_slice();
                    for k in 0..len {
                        zb0[k] = a0[k] * s1[k];
                    }
                }
                1 => {
                    let a1 = adj.channels[1].as_slice();
                    let z1 = t.pre.channels[1].as_slice();
                    let (zb0, zb1) = zbar.channels.split_at_mut(1);
                    let (zb0, zb1) = (zb0[0].as_mut_slice(), zb1[0].as_mut_slice());
                    for k in 0..len {
                        zb0[k] = a0[k] * s1[k] + a1[k] * s2[k] * z1[k];
                        zb1[k] = a1[k] * s1[k];
                    }
                }
                _ => {
                    let (a1, a2) = (adj.channels[1].as_slice(), adj.channels[2].as_slice());
                    let (z1, z2) = (t.pre.channels[1].as_slice(), t.pre.channels[2].as_slice());
                    let [zb0, zb1, zb2] = &mut zbar.channels[..] else {
                        unreachable!("order-2 jets have three channels")
                    };
                    let (zb0, zb1, zb2) = (zb0.as_mut_slice(), zb1.as_mut_slice(), zb2.as_mut_slice());
                    for k in 0..len {
                        zb0[k] = a0[k] * s1[k] + a1[k] * s2[k] * z1[k] + a2[k] * (s3[k] * z1[k] * z1[k] + s2[k] * z2[k]);
                        zb1[k] = a1[k] * s1[k] + 2.0 * a2[k] * s2[k] * z1[k];
                        zb2[k] = a2[k] * s1[k];
                    }
                }
            }
            zbar
        };

        let (gw, gb) = grad[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
        let w = &params[off..off + fan_in * fan_out];
        let mut prev = Jet::zeros(npts, fan_in, order);
        for c in 0..=order {
            let zc = zbar.channels[c].as_slice();
            if c == 0 {
                for p in 0..npts {
                    crate::linalg::axpy(1.0, &zc[p * fan_out..(p + 1) * fan_out], gb);
                }
            }
            gemm(fan_out, npts, fan_in, 1.0, (zc, true), (t.input.channels[c].as_slice(), false), 1.0, gw);
            gemm(npts, fan_out, fan_in, 1.0, (zc, false), (w, false), 0.0, prev.channels[c].as_mut_slice());
        }
        adj = prev;
    }
    Ok(adj)
}

fn single_point(spec: &MlpSpec, input: &[f64]) -> Result<Jet> {
    if input.len() != spec.input_dim() {
        return Err(config_err(alloc::format!(
            "input has length {}, network expects {}",
            input.len(),
            spec.input_dim()
        )));
    }
    Ok(Jet::values(Matrix::from_row_major(1, input.len(), input.to_vec())?))
}

pub fn forward(spec: &MlpSpec, params: &FlatParams, input: &[f64]) -> Result<Vec<f64>> {
    let (out, _) = forward_jet(spec, &params.0, &single_point(spec, input)?)?;
    Ok(out.channels[0].row(0).to_vec())
}

fn backward_single(
    spec: &MlpSpec,
    params: &FlatParams,
    input: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if upstream.len() != spec.output_dim() {
        return Err(config_err(alloc::format!(
            "upstream has length {}, network output is {}",
            upstream.len(),
            spec.output_dim()
        )));
    }
    let (_, tape) = forward_jet(spec, &params.0, &single_point(spec, input)?)?;
    let adj = Jet::values(Matrix::from_row_major(1, upstream.len(), upstream.to_vec())?);
    let (g, inp) = backward_jet(spec, &params.0, &tape, &adj)?;
    Ok((g, inp.channels[0].row(0).to_vec()))
}

/// Gradient of `upstreamᵀ · forward(input)` with respect to the parameters.
pub fn grad_params(
    spec: &MlpSpec,
    params: &FlatParams,
    input: &[f64],
    upstream: &[f64],
) -> Result<FlatParams> {
    Ok(FlatParams(backward_single(spec, params, input, upstream)?.0))
}

/// Gradient of `upstreamᵀ · forward(input)` with respect to the input.
pub fn grad_input(
    spec: &MlpSpec,
    params: &FlatParams,
    input: &[f64],
    upstream: &[f64],
) -> Result<Vec<f64>> {
    Ok(backward_single(spec, params, input, upstream)?.1)
}

/// A network specification together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: FlatParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: FlatParams) -> Result<Self> {
        spec.check_params(&params.0)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates of the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            cfg,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One bias-corrected Adam update of `params`. A non-finite gradient
    /// rejects the step and leaves both `params` and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(config_err("Adam state, parameters and gradient differ in length"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                epoch: self.t as usize,
                reason: "non-finite gradient".into(),
            });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        self.t += 1;
        let bc1 = 1.0 - math::powi(beta1, self.t as i32);
        let bc2 = 1.0 - math::powi(beta2, self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (math::sqrt(vhat) + eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut FlatParams, grad: &FlatParams) -> Result<()> {
    state.step(&mut params.0, &grad.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn rng(seed: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(seed)
    }

    fn random_params(spec: &MlpSpec, r: &mut Xoshiro256PlusPlus) -> FlatParams {
        FlatParams((0..spec.param_count()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn parameter_counts() {
        for r in 1..=20 {
            let u = MlpSpec::new(vec![r, 5, 1], Activation::Tanh).unwrap();
            assert_eq!(u.param_count(), 5 * r + 11);
        }
        assert!(MlpSpec::new(vec![3], Activation::Tanh).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(vec![3, 7, 4, 2], Activation::Swish).unwrap();
        let out = forward(&spec, &FlatParams::zeros(&spec), &[0.3, -2.0, 5.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        let g = grad_input(&spec, &FlatParams::zeros(&spec), &[0.3, -2.0, 5.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn identity_network() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Identity).unwrap();
        let mut p = FlatParams::zeros(&spec);
        for i in 0..3 {
            p.0[i * 3 + i] = 1.0;
        }
        assert_eq!(forward(&spec, &p, &[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn odd_activations_pass_zero() {
        for act in [Activation::Swish, Activation::Tanh] {
            let spec = MlpSpec::new(vec![2, 6, 6, 3], act).unwrap();
            let mut p = FlatParams::glorot(&spec, &mut rng(1));
            assert!(forward(&spec, &p, &[0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
            p.0[0] = 10.0;
            assert!(forward(&spec, &p, &[0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Tanh).unwrap();
        let p = FlatParams::zeros(&spec);
        assert!(forward(&spec, &p, &[1.0]).is_err());
        assert!(grad_params(&spec, &p, &[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(Mlp::new(spec, FlatParams(vec![0.0; 3])).is_err());
    }

    #[test]
    fn linear_network_closed_forms() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Identity).unwrap();
        let p = random_params(&spec, &mut rng(2));
        let x = [0.5, -1.0, 2.0];
        let up = [0.7, -0.2];
        let gp = grad_params(&spec, &p, &x, &up).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((gp.0[o * 3 + i] - up[o] * x[i]).abs() < 1e-15);
            }
            assert_eq!(gp.0[6 + o], up[o]);
        }
        let gi = grad_input(&spec, &p, &x, &up).unwrap();
        for i in 0..3 {
            let want = p.0[i] * up[0] + p.0[3 + i] * up[1];
            assert!((gi[i] - want).abs() < 1e-15);
        }
        let zero = grad_params(&spec, &p, &x, &[0.0, 0.0]).unwrap();
        assert!(zero.0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(3);
        let h = 1e-6;
        for trial in 0..50 {
            let depth = 1 + trial % 3;
            let mut sizes = vec![1 + r.random_range(0..4usize)];
            for _ in 0..depth {
                sizes.push(1 + r.random_range(0..5usize));
            }
            sizes.push(1 + r.random_range(0..3usize));
            let act = [Activation::Swish, Activation::Tanh, Activation::Identity][trial % 3];
            let spec = MlpSpec::new(sizes, act).unwrap();
            let p = random_params(&spec, &mut r);
            let x: Vec<f64> = (0..spec.input_dim()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
            let up: Vec<f64> = (0..spec.output_dim()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
            let f = |p: &FlatParams, x: &[f64]| -> f64 {
                forward(&spec, p, x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let gp = grad_params(&spec, &p, &x, &up).unwrap();
            for k in 0..p.len() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.0[k] += h;
                pm.0[k] -= h;
                let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
                if gp.0[k].abs() > 1e-12 {
                    assert!(rel_err(gp.0[k], fd) < 1e-6 || (gp.0[k] - fd).abs() < 1e-9, "param {k}: {} vs {fd}", gp.0[k]);
                }
            }
            let gi = grad_input(&spec, &p, &x, &up).unwrap();
            for k in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += h;
                xm[k] -= h;
                let fd = (f(&p, &xp) - f(&p, &xm)) / (2.0 * h);
                if gi[k].abs() > 1e-12 {
                    assert!(rel_err(gi[k], fd) < 1e-6 || (gi[k] - fd).abs() < 1e-9, "input {k}: {} vs {fd}", gi[k]);
                }
            }
        }
    }

    /// Inputs along a curve x ↦ (sin(a_i x + b_i)); the jet must carry the
    /// exact derivatives of the network output along x.
    #[test]
    fn jets_match_derivatives_along_a_curve() {
        let mut r = rng(4);
        for act in [Activation::Swish, Activation::Tanh] {
            let spec = MlpSpec::new(vec![3, 6, 4, 2], act).unwrap();
            let p = random_params(&spec, &mut r);
            let a: Vec<f64> = (0..3).map(|_| r.random::<f64>() * 2.0).collect();
            let b: Vec<f64> = (0..3).map(|_| r.random::<f64>()).collect();
            let curve = |x: f64| -> Vec<f64> { (0..3).map(|i| math::sin(a[i] * x + b[i])).collect() };
            let x0 = 0.37;
            let mk = |f: &dyn Fn(usize) -> f64| Matrix::from_row_major(1, 3, (0..3).map(f).collect()).unwrap();
            let jet = Jet::new(vec![
                mk(&|i| math::sin(a[i] * x0 + b[i])),
                mk(&|i| a[i] * math::cos(a[i] * x0 + b[i])),
                mk(&|i| -a[i] * a[i] * math::sin(a[i] * x0 + b[i])),
            ])
            .unwrap();
            let (out, _) = forward_jet(&spec, &p.0, &jet).unwrap();
            let g = |x: f64| forward(&spec, &p, &curve(x)).unwrap();
            let h = 1e-4;
            for o in 0..2 {
                let d1 = (g(x0 + h)[o] - g(x0 - h)[o]) / (2.0 * h);
                let d2 = (g(x0 + h)[o] - 2.0 * g(x0)[o] + g(x0 - h)[o]) / (h * h);
                assert!((out.channels[1][(0, o)] - d1).abs() < 1e-7);
                assert!((out.channels[2][(0, o)] - d2).abs() < 1e-5);
            }
        }
    }

    /// Gradient of a random linear functional of all output jet channels
    /// against central differences in parameters and input channels.
    #[test]
    fn jet_backward_matches_finite_differences() {
        let mut r = rng(5);
        let h = 1e-6;
        for order in 0..=2usize {
            let spec = MlpSpec::with_activations(vec![2, 4, 3, 2], vec![Activation::Swish, Activation::Tanh]).unwrap();
            let p = random_params(&spec, &mut r);
            let npts = 3;
            let rand_mat = |r: &mut Xoshiro256PlusPlus, c: usize| {
                Matrix::from_row_major(npts, c, (0..npts * c).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
            };
            let input = Jet::new((0..=order).map(|_| rand_mat(&mut r, 2)).collect()).unwrap();
            let weights = Jet::new((0..=order).map(|_| rand_mat(&mut r, 2)).collect()).unwrap();
            let functional = |p: &[f64], inp: &Jet| -> f64 {
                let (out, _) = forward_jet(&spec, p, inp).unwrap();
                out.channels
                    .iter()
                    .zip(&weights.channels)
                    .map(|(a, b)| crate::linalg::dot(a.as_slice(), b.as_slice()))
                    .sum()
            };
            let (_, tape) = forward_jet(&spec, &p.0, &input).unwrap();
            let (gp, gin) = backward_jet(&spec, &p.0, &tape, &weights).unwrap();
            for k in 0..p.len() {
                let (mut pp, mut pm) = (p.0.clone(), p.0.clone());
                pp[k] += h;
                pm[k] -= h;
                let fd = (functional(&pp, &input) - functional(&pm, &input)) / (2.0 * h);
                assert!(rel_err(gp[k], fd) < 1e-6 || (gp[k] - fd).abs() < 1e-9, "order {order} param {k}");
            }
            for c in 0..=order {
                for idx in 0..npts * 2 {
                    let (mut ip, mut im) = (input.clone(), input.clone());
                    ip.channels[c].as_mut_slice()[idx] += h;
                    im.channels[c].as_mut_slice()[idx] -= h;
                    let fd = (functional(&p.0, &ip) - functional(&p.0, &im)) / (2.0 * h);
                    let got = gin.channels[c].as_slice()[idx];
                    assert!(rel_err(got, fd) < 1e-6 || (got - fd).abs() < 1e-9, "order {order} channel {c}");
                }
            }
        }
    }

    #[test]
    fn swish_identity() {
        for i in -200..=200 {
            let x = i as f64 * 0.05;
            let (sp, sm) = (Activation::Swish.apply(x), Activation::Swish.apply(-x));
            // 1e-15 absolute on [-1, 1], a few ulps of |x| beyond.
            let tol = 1e-15f64.max(4.0 * f64::EPSILON * x.abs());
            assert!((sp + sm - x * (2.0 * sigmoid(x) - 1.0)).abs() < tol, "{x}");
            assert!((sp - sm - x).abs() < tol, "{x}");
        }
    }

    #[test]
    fn activation_derivatives() {
        let h = 1e-5;
        for act in [Activation::Swish, Activation::Tanh, Activation::Identity] {
            for i in -30..=30 {
                let z = i as f64 * 0.2;
                let e = act.eval(z);
                for k in 0..3 {
                    let fd = (act.eval(z + h)[k] - act.eval(z - h)[k]) / (2.0 * h);
                    assert!((e[k + 1] - fd).abs() < 1e-8, "{act:?} d{} at {z}", k + 1);
                }
            }
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let spec = MlpSpec::new(vec![2, 100, 100, 51], Activation::Swish).unwrap();
        let p = FlatParams::glorot(&spec, &mut rng(6));
        let a = forward(&spec, &p, &[0.1, -0.4]).unwrap();
        let b = forward(&spec, &p, &[0.1, -0.4]).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, FlatParams::glorot(&spec, &mut rng(6)));
    }

    #[test]
    fn adam_zero_gradient() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_single_step_by_hand() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(2, cfg);
        let mut p = vec![0.5, 0.5];
        let g = [0.3, -4.0];
        st.step(&mut p, &g).unwrap();
        for k in 0..2 {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
            let want = 0.5 - cfg.lr * g[k] / (g[k].abs() + cfg.eps);
            assert!((p[k] - want).abs() < 1e-16);
        }
    }

    #[test]
    fn adam_constant_gradient_steady_state() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        let g = [2.5, -0.01];
        let mut prev = p.clone();
        for _ in 0..5000 {
            prev.copy_from_slice(&p);
            st.step(&mut p, &g).unwrap();
        }
        assert!(((p[0] - prev[0]) + 1e-3).abs() < 1e-9);
        assert!(((p[1] - prev[1]) - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut st = AdamState::new(2, AdamConfig::default());
        let mut p = vec![1.0, 1.0];
        assert!(matches!(st.step(&mut p, &[f64::NAN, 0.0]), Err(Error::Training { .. })));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(st.t, 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flatten_unflatten_roundtrip(sizes in prop::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
                let spec = MlpSpec::new(sizes, Activation::Tanh).unwrap();
                let p = FlatParams::glorot(&spec, &mut rng(seed));
                let layers = unflatten(&spec, &p).unwrap();
                prop_assert_eq!(flatten(&spec, &layers).unwrap(), p);
            }
        }
    }
}
