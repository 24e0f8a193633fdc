//! Interval evaluation of the functions that appear in verification
//! conditions: symbolic expressions, neural value functions, and the
//! composite closed-loop decrease quantities.
//!
//! Network enclosures use the natural per-layer interval extension (tanh is
//! monotone, so each neuron is endpoint-tight); input gradients propagate in
//! forward mode, Hessians likewise for the origin-neighborhood certificates.
//! A mean-value refinement intersects the natural value enclosure with a
//! first-order form around the box midpoint.

use crate::expr::{BoxDomain, Expression, Interval, IntervalError};
use crate::pinn::NeuralValueFunction;
use crate::pmp::{TransformKind, TransformSpec};
use std::sync::Arc;

/// A scalar field with a gradient: either a neural value function or an
/// explicit expression (used for quadratic certificates and synthetic tests).
#[derive(Debug, Clone)]
pub enum ValueModel {
    Net(Arc<NeuralValueFunction>),
    Expr { value: Expression, grad: Vec<Expression> },
}

impl ValueModel {
    pub fn from_net(net: NeuralValueFunction) -> Self {
        ValueModel::Net(Arc::new(net))
    }

    pub fn from_expression(value: Expression) -> Self {
        let grad = value.gradient();
        ValueModel::Expr { value, grad }
    }

    pub fn dim(&self) -> usize {
        match self {
            ValueModel::Net(n) => n.input_dim(),
            ValueModel::Expr { value, .. } => value.arity(),
        }
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, IntervalError> {
        match self {
            ValueModel::Net(n) => Ok(n.forward(x)),
            ValueModel::Expr { value, .. } => {
                value.eval(x).map_err(|_| IntervalError::DivisionByZero)
            }
        }
    }

    pub fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), IntervalError> {
        match self {
            ValueModel::Net(n) => Ok(n.value_and_grad(x)),
            ValueModel::Expr { value, grad } => {
                let v = value.eval(x).map_err(|_| IntervalError::DivisionByZero)?;
                let g = grad
                    .iter()
                    .map(|e| e.eval(x).map_err(|_| IntervalError::DivisionByZero))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((v, g))
            }
        }
    }

    /// Sound enclosure of the value over a box, with the mean-value
    /// refinement applied for networks.
    pub fn value_interval(&self, domain: &BoxDomain) -> Result<Interval, IntervalError> {
        match self {
            ValueModel::Net(n) => {
                let natural = net_value_interval(n, domain);
                Ok(mean_value_refine(n, domain, natural))
            }
            ValueModel::Expr { value, .. } => value.eval_interval(domain),
        }
    }

    pub fn value_grad_interval(
        &self,
        domain: &BoxDomain,
    ) -> Result<(Interval, Vec<Interval>), IntervalError> {
        match self {
            ValueModel::Net(n) => {
                let (v, g) = net_value_grad_interval(n, domain);
                Ok((mean_value_refine(n, domain, v), g))
            }
            ValueModel::Expr { value, grad } => {
                let v = value.eval_interval(domain)?;
                let g = grad
                    .iter()
                    .map(|e| e.eval_interval(domain))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((v, g))
            }
        }
    }
}

/// Natural interval forward pass.
pub fn net_value_interval(net: &NeuralValueFunction, domain: &BoxDomain) -> Interval {
    let mut act: Vec<Interval> = domain.intervals().to_vec();
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        let mut next = Vec::with_capacity(layer.rows);
        for r in 0..layer.rows {
            let mut acc = Interval::point(layer.b[r]);
            for (c, a) in act.iter().enumerate() {
                acc = acc.add(&a.scale(layer.w[r * layer.cols + c]));
            }
            if l < last {
                acc = acc.tanh();
            }
            next.push(acc);
        }
        act = next;
    }
    act[0]
}

/// Interval forward pass carrying input-gradient rows.
pub fn net_value_grad_interval(
    net: &NeuralValueFunction,
    domain: &BoxDomain,
) -> (Interval, Vec<Interval>) {
    let n = net.input_dim();
    let mut val: Vec<Interval> = domain.intervals().to_vec();
    let mut grad: Vec<Vec<Interval>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| Interval::point(if i == j { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        let mut nval = Vec::with_capacity(layer.rows);
        let mut ngrad = Vec::with_capacity(layer.rows);
        for r in 0..layer.rows {
            let mut acc = Interval::point(layer.b[r]);
            let mut gacc = vec![Interval::point(0.0); n];
            for c in 0..layer.cols {
                let w = layer.w[r * layer.cols + c];
                if w != 0.0 {
                    acc = acc.add(&val[c].scale(w));
                    for j in 0..n {
                        gacc[j] = gacc[j].add(&grad[c][j].scale(w));
                    }
                }
            }
            if l < last {
                let t = acc.tanh();
                // derivative 1 - tanh^2 through the even-power form
                let d = Interval::point(1.0).sub(&t.powi(2).expect("square is total"));
                for g in gacc.iter_mut() {
                    *g = g.mul(&d);
                }
                acc = t;
            }
            nval.push(acc);
            ngrad.push(gacc);
        }
        val = nval;
        grad = ngrad;
    }
    (val[0], grad.remove(0))
}

/// First-order (mean value) enclosure intersected with a natural one:
/// `W(box) within W(mid) + DW(box) . (box - mid)`.
fn mean_value_refine(net: &NeuralValueFunction, domain: &BoxDomain, natural: Interval) -> Interval {
    let mid = domain.midpoint();
    let mid_box = BoxDomain::new(mid.iter().map(|&m| Interval::point(m)).collect());
    let center = net_value_interval(net, &mid_box);
    let (_, grad) = net_value_grad_interval(net, domain);
    let mut acc = center;
    for (j, g) in grad.iter().enumerate() {
        let offset = domain.interval(j).sub(&Interval::point(mid[j]));
        acc = acc.add(&g.mul(&offset));
    }
    acc.intersect(&natural).unwrap_or(natural)
}

/// Interval value, gradient, and Hessian of the network over a box.
/// Hessians are propagated in forward mode per neuron.
pub fn net_hessian_interval(
    net: &NeuralValueFunction,
    domain: &BoxDomain,
) -> (Interval, Vec<Interval>, Vec<Vec<Interval>>) {
    let n = net.input_dim();
    let zero = Interval::point(0.0);
    let mut val: Vec<Interval> = domain.intervals().to_vec();
    let mut grad: Vec<Vec<Interval>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| Interval::point(if i == j { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    let mut hess: Vec<Vec<Vec<Interval>>> = vec![vec![vec![zero; n]; n]; n];
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        let rows = layer.rows;
        let mut nval = Vec::with_capacity(rows);
        let mut ngrad = Vec::with_capacity(rows);
        let mut nhess = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut a = Interval::point(layer.b[r]);
            let mut ga = vec![zero; n];
            let mut ha = vec![vec![zero; n]; n];
            for c in 0..layer.cols {
                let w = layer.w[r * layer.cols + c];
                if w != 0.0 {
                    a = a.add(&val[c].scale(w));
                    for j in 0..n {
                        ga[j] = ga[j].add(&grad[c][j].scale(w));
                        for i2 in 0..=j {
                            ha[j][i2] = ha[j][i2].add(&hess[c][j][i2].scale(w));
                        }
                    }
                }
            }
            if l < last {
                // z = tanh(a): dz = s a_i, d2z = s a_ij - 2 z s a_i a_j,
                // with s = 1 - z^2.
                let z = a.tanh();
                let s = Interval::point(1.0).sub(&z.powi(2).expect("square"));
                let minus_2zs = z.scale(-2.0).mul(&s);
                let mut gz = vec![zero; n];
                let mut hz = vec![vec![zero; n]; n];
                for j in 0..n {
                    gz[j] = s.mul(&ga[j]);
                    for i2 in 0..=j {
                        hz[j][i2] =
                            s.mul(&ha[j][i2]).add(&minus_2zs.mul(&ga[j]).mul(&ga[i2]));
                    }
                }
                a = z;
                ga = gz;
                ha = hz;
            }
            nval.push(a);
            ngrad.push(ga);
            nhess.push(ha);
        }
        val = nval;
        grad = ngrad;
        hess = nhess;
    }
    // mirror the lower triangle
    let mut h = hess.remove(0);
    for j in 0..n {
        for i2 in (j + 1)..n {
            h[j][i2] = h[i2][j];
        }
    }
    (val[0], grad.remove(0), h)
}

/// Interval value, gradient, and Hessian of a model over a box: forward
/// propagation for networks, symbolic second derivatives for expressions.
pub fn model_hessian_interval(
    model: &ValueModel,
    domain: &BoxDomain,
) -> Result<(Interval, Vec<Interval>, Vec<Vec<Interval>>), IntervalError> {
    match model {
        ValueModel::Net(n) => Ok(net_hessian_interval(n, domain)),
        ValueModel::Expr { value, grad } => {
            let n = value.arity();
            let v = value.eval_interval(domain)?;
            let g = grad
                .iter()
                .map(|e| e.eval_interval(domain))
                .collect::<Result<Vec<_>, _>>()?;
            let mut h = vec![vec![Interval::point(0.0); n]; n];
            for i in 0..n {
                for j in 0..n {
                    h[i][j] = grad[i].differentiate(j).eval_interval(domain)?;
                }
            }
            Ok((v, g, h))
        }
    }
}

/// The closed-loop decrease quantity
/// `grad_outer . (f + g (k_N - k0))` with the HJB controller
/// `k_N = -R^-1 g' grad_model' / (2 phi(W_model))`, assembled as
/// `a_outer - sum_j b_outer_j b_model_j / (2 r_j phi) - b_outer . k0`.
/// Requires a constant diagonal R.
#[derive(Debug, Clone)]
pub struct ClosedLoopDecrease {
    pub outer: Arc<ValueModel>,
    pub model: Arc<ValueModel>,
    pub f: Vec<Expression>,
    pub g: Vec<Vec<Expression>>,
    pub r_diag: Vec<f64>,
    pub transform: TransformSpec,
    /// Zero-shift offset subtracted from the controller.
    pub k0: Vec<f64>,
    /// Enclosures of W_model may be intersected with this band when a
    /// premise already constrains it.
    pub w_clamp: Option<Interval>,
}

fn phi_interval(t: &TransformSpec, w: Interval) -> Interval {
    match t.kind {
        TransformKind::Kruzkov => Interval::point(1.0).sub(&w).scale(t.alpha),
        TransformKind::Tanh => Interval::point(1.0)
            .sub(&w.powi(2).expect("square"))
            .scale(t.alpha),
    }
}

impl ClosedLoopDecrease {
    pub fn eval_point(&self, x: &[f64]) -> Result<f64, IntervalError> {
        let (_, outer_grad) = self.outer.value_grad(x)?;
        let (w, model_grad) = self.model.value_grad(x)?;
        let n = x.len();
        let k = self.r_diag.len();
        let mut a = 0.0;
        for i in 0..n {
            let fi = self.f[i].eval(x).map_err(|_| IntervalError::DivisionByZero)?;
            a += outer_grad[i] * fi;
        }
        let phi = self.transform.phi(w);
        if phi <= 0.0 {
            return Err(IntervalError::DivisionByZero);
        }
        let mut total = a;
        for j in 0..k {
            let mut b_outer = 0.0;
            let mut b_model = 0.0;
            for i in 0..n {
                let gij = self.g[i][j].eval(x).map_err(|_| IntervalError::DivisionByZero)?;
                b_outer += outer_grad[i] * gij;
                b_model += model_grad[i] * gij;
            }
            total -= b_outer * b_model / (2.0 * self.r_diag[j] * phi);
            total -= b_outer * self.k0[j];
        }
        Ok(total)
    }

    pub fn eval_box(&self, domain: &BoxDomain) -> Result<Interval, IntervalError> {
        let (_, outer_grad) = self.outer.value_grad_interval(domain)?;
        let (mut w, model_grad) = self.model.value_grad_interval(domain)?;
        if let Some(clamp) = &self.w_clamp {
            if let Some(tight) = w.intersect(clamp) {
                w = tight;
            }
        }
        let n = domain.dim();
        let k = self.r_diag.len();
        let mut acc = Interval::point(0.0);
        for i in 0..n {
            let fi = self.f[i].eval_interval(domain)?;
            acc = acc.add(&outer_grad[i].mul(&fi));
        }
        let phi = phi_interval(&self.transform, w);
        for j in 0..k {
            let mut b_outer = Interval::point(0.0);
            let mut b_model = Interval::point(0.0);
            for i in 0..n {
                let gij = self.g[i][j].eval_interval(domain)?;
                b_outer = b_outer.add(&outer_grad[i].mul(&gij));
                b_model = b_model.add(&model_grad[i].mul(&gij));
            }
            let num = b_outer.mul(&b_model);
            let den = phi.scale(2.0 * self.r_diag[j]);
            acc = acc.sub(&num.div(&den)?);
            acc = acc.sub(&b_outer.scale(self.k0[j]));
        }
        Ok(acc)
    }
}

/// A scalar function usable in verification conditions.
#[derive(Debug, Clone)]
pub enum ConstraintFn {
    Expr(Expression),
    /// `W(x)` of a model.
    ModelValue(Arc<ValueModel>),
    /// `grad W(x) . field(x)` for an expression vector field.
    ModelGradDotField { model: Arc<ValueModel>, field: Vec<Expression> },
    ClosedLoop(Arc<ClosedLoopDecrease>),
}

impl ConstraintFn {
    pub fn expr(e: Expression) -> Self {
        ConstraintFn::Expr(e)
    }

    pub fn eval_point(&self, x: &[f64]) -> Result<f64, IntervalError> {
        match self {
            ConstraintFn::Expr(e) => e.eval(x).map_err(|_| IntervalError::DivisionByZero),
            ConstraintFn::ModelValue(m) => m.value(x),
            ConstraintFn::ModelGradDotField { model, field } => {
                let (_, grad) = model.value_grad(x)?;
                let mut acc = 0.0;
                for (gi, fe) in grad.iter().zip(field) {
                    acc += gi * fe.eval(x).map_err(|_| IntervalError::DivisionByZero)?;
                }
                Ok(acc)
            }
            ConstraintFn::ClosedLoop(c) => c.eval_point(x),
        }
    }

    pub fn eval_box(&self, domain: &BoxDomain) -> Result<Interval, IntervalError> {
        match self {
            ConstraintFn::Expr(e) => e.eval_interval(domain),
            ConstraintFn::ModelValue(m) => m.value_interval(domain),
            ConstraintFn::ModelGradDotField { model, field } => {
                let (_, grad) = model.value_grad_interval(domain)?;
                let mut acc = Interval::point(0.0);
                for (gi, fe) in grad.iter().zip(field) {
                    acc = acc.add(&gi.mul(&fe.eval_interval(domain)?));
                }
                Ok(acc)
            }
            ConstraintFn::ClosedLoop(c) => c.eval_box(domain),
        }
    }
}
