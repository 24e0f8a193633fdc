//! Neural value functions for the Zubov-HJB equation.
//!
//! The network is a fixed-topology feedforward tanh MLP with a linear scalar
//! output. Autodiff is hand-written reverse mode; the physics-informed loss
//! additionally needs parameter gradients of functions of the input gradient,
//! which come from a forward tangent pass differentiated in reverse
//! (`accumulate_augmented`).

mod train;

pub use train::{train, LossRow, TrainConfig, TrainError, TrainReport};

use crate::expr::EvalError;
use crate::pmp::TransformSpec;
use crate::system::{ControlAffineSystem, CostSpec, SystemError};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One dense layer, row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer { rows, cols, w: vec![0.0; rows * cols], b: vec![0.0; rows] }
    }

    #[inline]
    fn apply(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out[r] = acc;
        }
    }

    /// Matrix-vector product without the bias (tangent propagation).
    #[inline]
    fn apply_linear(&self, input: &[f64], out: &mut [f64]) {
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out[r] = acc;
        }
    }

    /// `out += W' s`.
    #[inline]
    fn transpose_apply_add(&self, s: &[f64], out: &mut [f64]) {
        for r in 0..self.rows {
            let sr = s[r];
            if sr != 0.0 {
                let row = &self.w[r * self.cols..(r + 1) * self.cols];
                for (o, wi) in out.iter_mut().zip(row) {
                    *o += wi * sr;
                }
            }
        }
    }
}

/// Feedforward tanh network with linear scalar output plus the value
/// transform it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralValueFunction {
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
    pub transform: TransformSpec,
}

impl NeuralValueFunction {
    /// Glorot-uniform initialization, biases zero.
    pub fn glorot(widths: &[usize], transform: TransformSpec, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        assert_eq!(*widths.last().unwrap(), 1, "output must be scalar");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let (rows, cols) = (widths[l + 1], widths[l]);
            let mut layer = Layer::zeros(rows, cols);
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            for w in layer.w.iter_mut() {
                *w = rng.gen_range(-limit..limit);
            }
            layers.push(layer);
        }
        NeuralValueFunction { widths: widths.to_vec(), layers, transform }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn scratch(&self) -> NetScratch {
        NetScratch::new(self)
    }

    /// Scalar forward pass.
    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut s = self.scratch();
        self.forward_cached(x, &mut s)
    }

    /// Forward pass storing activations in `s` for later reverse passes.
    pub fn forward_cached(&self, x: &[f64], s: &mut NetScratch) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim());
        s.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (lo, hi) = s.acts.split_at_mut(l + 1);
            layer.apply(&lo[l], &mut hi[0]);
            if l < last {
                for v in hi[0].iter_mut() {
                    *v = v.tanh();
                }
            }
        }
        s.acts[self.layers.len()][0]
    }

    /// Exact reverse-accumulation gradient of `forward` with respect to x.
    pub fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.scratch();
        self.forward_cached(x, &mut s);
        self.input_gradient_cached(&mut s);
        s.grad_input.clone()
    }

    /// Reverse pass to the input, using activations cached in `s`.
    pub fn input_gradient_cached(&self, s: &mut NetScratch) {
        let last = self.layers.len() - 1;
        s.delta[last].fill(0.0);
        s.delta[last][0] = 1.0;
        for l in (0..last).rev() {
            let (below, above) = s.delta.split_at_mut(l + 1);
            let msg = &mut below[l];
            msg.fill(0.0);
            self.layers[l + 1].transpose_apply_add(&above[0], msg);
            let act = &s.acts[l + 1];
            for (m, a) in msg.iter_mut().zip(act) {
                *m *= 1.0 - a * a;
            }
        }
        s.grad_input.fill(0.0);
        self.layers[0].transpose_apply_add(&s.delta[0], &mut s.grad_input);
    }

    pub fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut s = self.scratch();
        let v = self.forward_cached(x, &mut s);
        self.input_gradient_cached(&mut s);
        (v, s.grad_input.clone())
    }
}

/// Reusable buffers for network passes.
#[derive(Debug, Clone)]
pub struct NetScratch {
    /// `acts[0] = x`, `acts[l+1]` = post-activation of layer l (output raw).
    pub acts: Vec<Vec<f64>>,
    /// Tangent activations for the forward-over-reverse pass.
    pub tacts: Vec<Vec<f64>>,
    /// Reverse-mode messages per layer output.
    pub delta: Vec<Vec<f64>>,
    pub tdelta: Vec<Vec<f64>>,
    pub grad_input: Vec<f64>,
}

impl NetScratch {
    fn new(net: &NeuralValueFunction) -> Self {
        let acts: Vec<Vec<f64>> = net.widths.iter().map(|&w| vec![0.0; w]).collect();
        let delta: Vec<Vec<f64>> =
            net.widths.iter().skip(1).map(|&w| vec![0.0; w]).collect();
        NetScratch {
            tacts: acts.clone(),
            tdelta: delta.clone(),
            acts,
            delta,
            grad_input: vec![0.0; net.widths[0]],
        }
    }
}

/// Model checkpoint schema.
#[derive(Serialize, Deserialize)]
struct ModelJson {
    widths: Vec<usize>,
    layers: Vec<LayerJson>,
    activation: String,
    transform: TransformSpec,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Serialize for NeuralValueFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerJson {
                w: (0..l.rows)
                    .map(|r| l.w[r * l.cols..(r + 1) * l.cols].to_vec())
                    .collect(),
                b: l.b.clone(),
            })
            .collect();
        ModelJson {
            widths: self.widths.clone(),
            layers,
            activation: "tanh".into(),
            transform: self.transform,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for NeuralValueFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let m = ModelJson::deserialize(d)?;
        if m.activation != "tanh" {
            return Err(serde::de::Error::custom("only tanh activation is supported"));
        }
        let mut layers = Vec::with_capacity(m.layers.len());
        for lj in &m.layers {
            let rows = lj.w.len();
            let cols = lj.w.first().map(|r| r.len()).unwrap_or(0);
            let mut layer = Layer::zeros(rows, cols);
            for (r, row) in lj.w.iter().enumerate() {
                if row.len() != cols {
                    return Err(serde::de::Error::custom("ragged weight matrix"));
                }
                layer.w[r * cols..(r + 1) * cols].copy_from_slice(row);
            }
            if lj.b.len() != rows {
                return Err(serde::de::Error::custom("bias length mismatch"));
            }
            layer.b.copy_from_slice(&lj.b);
            layers.push(layer);
        }
        Ok(NeuralValueFunction { widths: m.widths, layers, transform: m.transform })
    }
}

/// Dynamics data of one collocation point: everything the residual needs.
#[derive(Debug, Clone)]
pub struct PointData {
    /// f(x), length n.
    pub f: Vec<f64>,
    /// S(x) = g R^-1 g', row-major n-by-n.
    pub s: Vec<f64>,
    /// q(x).
    pub q: f64,
}

impl PointData {
    pub fn compute(
        sys: &ControlAffineSystem,
        cost: &CostSpec,
        x: &[f64],
    ) -> Result<PointData, SystemError> {
        let f = sys.eval_f(x)?.as_slice().to_vec();
        let g = sys.eval_g(x)?;
        let r = cost.eval_r(x)?;
        let r_inv = r
            .try_inverse()
            .ok_or_else(|| SystemError::Expr("R(x) is singular".into()))?;
        let s_mat = &g * r_inv * g.transpose();
        let n = sys.n;
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = s_mat[(i, j)];
            }
        }
        let q = cost.q.eval(x).map_err(|e: EvalError| SystemError::Expr(e.to_string()))?;
        Ok(PointData { f, s, q })
    }
}

/// The Zubov-HJB residual at one point, given the value and gradient of W.
///
/// Written exactly as the defining equation: with
/// `khat = -1/2 R^-1 g' DW'`,
/// `residual = -DW (f (1-W) psi(W) + g khat) - khat' R khat
///             - q (1-W)^2 psi(W)^2`,
/// every factor assembled without `1 - W` in a denominator.
pub fn residual_from_parts(data: &PointData, transform: &TransformSpec, w: f64, grad: &[f64]) -> f64 {
    let n = grad.len();
    let phi = transform.phi(w);
    // khat' R khat = 1/4 p' S p and DW g khat = -1/2 p' S p, so the equation
    // collapses to -phi (f . p) - 1/4 p' S p ... with the sign worked out:
    //   -DW f phi - DW g khat - khat' R khat - q phi^2
    // = -phi (f . p) + 1/2 p'Sp - 1/4 p'Sp - q phi^2
    let mut f_dot_p = 0.0;
    for i in 0..n {
        f_dot_p += data.f[i] * grad[i];
    }
    let mut psp = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += data.s[i * n + j] * grad[j];
        }
        psp += grad[i] * row;
    }
    -phi * f_dot_p + 0.25 * psp - data.q * phi * phi
}

/// Partial derivatives of the residual with respect to `W` and `DW`,
/// holding the point data fixed. Used by training.
pub fn residual_partials(
    data: &PointData,
    transform: &TransformSpec,
    w: f64,
    grad: &[f64],
) -> (f64, f64, Vec<f64>) {
    let n = grad.len();
    let phi = transform.phi(w);
    let phi_p = transform.phi_prime(w);
    let mut f_dot_p = 0.0;
    for i in 0..n {
        f_dot_p += data.f[i] * grad[i];
    }
    let mut s_p = vec![0.0; n];
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += data.s[i * n + j] * grad[j];
        }
        s_p[i] = row;
    }
    let mut psp = 0.0;
    for i in 0..n {
        psp += grad[i] * s_p[i];
    }
    let value = -phi * f_dot_p + 0.25 * psp - data.q * phi * phi;
    let d_w = -phi_p * f_dot_p - 2.0 * data.q * phi * phi_p;
    let d_grad: Vec<f64> = (0..n).map(|i| -phi * data.f[i] + 0.5 * s_p[i]).collect();
    (value, d_w, d_grad)
}

/// Anything that provides a value and input gradient: the neural network, or
/// an exact/synthetic solution in tests.
pub trait ValueFunction {
    fn dim(&self) -> usize;
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>);
}

impl ValueFunction for NeuralValueFunction {
    fn dim(&self) -> usize {
        self.input_dim()
    }
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.value_and_grad(x)
    }
}

/// The Zubov-HJB residual of a value function at a point.
pub fn zubov_residual(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
    vf: &impl ValueFunction,
    transform: &TransformSpec,
    x: &[f64],
) -> Result<f64, SystemError> {
    let data = PointData::compute(sys, cost, x)?;
    let (w, grad) = vf.value_grad(x);
    Ok(residual_from_parts(&data, transform, w, &grad))
}

/// Composite physics-informed loss: mean-square residual over the
/// collocation batch, plus weighted mean-square boundary and data errors.
pub fn loss(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
    net: &NeuralValueFunction,
    collocation: &[Vec<f64>],
    data: &[(Vec<f64>, f64)],
    boundary: &[(Vec<f64>, f64)],
    lambda_d: f64,
    lambda_b: f64,
) -> Result<f64, SystemError> {
    let transform = net.transform;
    let mut total = 0.0;
    if !collocation.is_empty() {
        let mut acc = 0.0;
        for x in collocation {
            let r = zubov_residual(sys, cost, net, &transform, x)?;
            acc += r * r;
        }
        total += acc / collocation.len() as f64;
    }
    if lambda_b > 0.0 && !boundary.is_empty() {
        let mut acc = 0.0;
        for (y, h) in boundary {
            let e = net.forward(y) - h;
            acc += e * e;
        }
        total += lambda_b * acc / boundary.len() as f64;
    }
    if lambda_d > 0.0 && !data.is_empty() {
        let mut acc = 0.0;
        for (z, wv) in data {
            let e = net.forward(z) - wv;
            acc += e * e;
        }
        total += lambda_d * acc / data.len() as f64;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Parameter-gradient machinery shared by training and the gradient checks.
// ---------------------------------------------------------------------------

/// Flat gradient buffers, same shapes as the layers.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

impl ParamGrads {
    pub fn zeros_like(net: &NeuralValueFunction) -> Self {
        ParamGrads {
            layers: net.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect(),
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
    }
}

impl NeuralValueFunction {
    /// Tangent forward pass: propagates `v` through the linearization at the
    /// activations cached by `forward_cached`, returning the directional
    /// derivative `v . DW(x)`.
    pub fn tangent_forward_cached(&self, v: &[f64], s: &mut NetScratch) -> f64 {
        debug_assert_eq!(v.len(), self.input_dim());
        s.tacts[0].copy_from_slice(v);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (lo, hi) = s.tacts.split_at_mut(l + 1);
            layer.apply_linear(&lo[l], &mut hi[0]);
            if l < last {
                let act = &s.acts[l + 1];
                for (t, a) in hi[0].iter_mut().zip(act) {
                    *t *= 1.0 - a * a;
                }
            }
        }
        s.tacts[self.layers.len()][0]
    }

    /// Accumulate parameter gradients of `alpha * W(x) + gamma * (v . DW(x))`
    /// into `grads`. Requires `forward_cached` and, when `gamma != 0`,
    /// `tangent_forward_cached` to have run on `s`.
    pub fn accumulate_augmented(
        &self,
        alpha: f64,
        gamma: f64,
        s: &mut NetScratch,
        grads: &mut ParamGrads,
    ) {
        let last = self.layers.len() - 1;
        s.delta[last][0] = alpha;
        s.tdelta[last][0] = gamma;
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            {
                let r_pre = &s.delta[l];
                let r_tpre = &s.tdelta[l];
                let acts = &s.acts[l];
                let tacts = &s.tacts[l];
                for r in 0..layer.rows {
                    let gr = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                    let (rp, rt) = (r_pre[r], r_tpre[r]);
                    if rp != 0.0 || rt != 0.0 {
                        for c in 0..layer.cols {
                            gr[c] += rp * acts[c] + rt * tacts[c];
                        }
                        g.b[r] += rp;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // messages down to the previous pre-activation
            let (below, here) = s.delta.split_at_mut(l);
            let r_acts = &mut below[l - 1];
            r_acts.fill(0.0);
            layer.transpose_apply_add(&here[0], r_acts);
            let (tbelow, there) = s.tdelta.split_at_mut(l);
            let r_tacts = &mut tbelow[l - 1];
            r_tacts.fill(0.0);
            layer.transpose_apply_add(&there[0], r_tacts);
            // through the tanh of layer l-1
            let act = &s.acts[l];
            let tpre = &s.tacts[l];
            for i in 0..act.len() {
                let a = act[i];
                let d = 1.0 - a * a;
                // tacts[l] = d * tpre_raw, so tpre_raw = tacts[l] / d; avoid
                // the division by recomputing from the stored product:
                // d(tacts)/d(pre) = -2 a d * tpre_raw = -2 a * tacts[l]
                let r_a = r_acts[i] * d + r_tacts[i] * (-2.0 * a * tpre[i]);
                let r_t = r_tacts[i] * d;
                r_acts[i] = r_a;
                r_tacts[i] = r_t;
            }
        }
    }
}

#[cfg(test)]
mod tests;
