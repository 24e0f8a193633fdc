//! Origin-neighborhood certificates.
//!
//! Interval branch-and-bound cannot certify strict decrease on a region
//! whose margin vanishes at the origin, so the origin ball gets a separate
//! algebraic argument:
//!
//! * quadratic certificates: expand the closed-loop derivative as
//!   `x'Mx + tail(x)` on `||x|| <= r`, certify `M` negative definite by
//!   interval Cholesky with margin `mu`, and bound every tail monomial by
//!   `|coeff| r^(deg-2) ||x||^2`; trigonometric terms enter through Taylor
//!   forms with explicit `||x||^2`-remainders;
//! * neural closed loops: enclose the Jacobian of the field over the ball
//!   (interval network Hessians included) and certify
//!   `P J + J' P < 0` for the entire interval matrix family by interval
//!   Cholesky.

use super::funcs::{model_hessian_interval, ValueModel};
use super::VerifyError;
use crate::expr::{BoxDomain, Expression, Interval, Node};
use crate::pmp::{TransformKind, TransformSpec};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

/// Multivariate polynomial keyed by exponent vectors.
#[derive(Debug, Clone, Default)]
pub struct Poly {
    pub terms: BTreeMap<Vec<u16>, f64>,
}

impl Poly {
    fn constant(c: f64, n: usize) -> Self {
        let mut p = Poly::default();
        if c != 0.0 {
            p.terms.insert(vec![0; n], c);
        }
        p
    }

    fn var(i: usize, n: usize) -> Self {
        let mut p = Poly::default();
        let mut e = vec![0u16; n];
        e[i] = 1;
        p.terms.insert(e, 1.0);
        p
    }

    fn add_term(&mut self, e: Vec<u16>, c: f64) {
        *self.terms.entry(e).or_insert(0.0) += c;
    }

    fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }

    fn sub(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), -*c);
        }
        out
    }

    fn neg(&self) -> Poly {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c = -*c;
        }
        out
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::default();
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u16> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }

    fn scale(&self, s: f64) -> Poly {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= s;
        }
        out
    }

    /// `sum |c| r^deg`, a bound for `|p(x)|` on `||x|| <= r`.
    fn sup_on_ball(&self, r: f64) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                let deg: u32 = e.iter().map(|&k| k as u32).sum();
                c.abs() * r.powi(deg as i32)
            })
            .sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                let mut t = *c;
                for (i, &k) in e.iter().enumerate() {
                    t *= x[i].powi(k as i32);
                }
                t
            })
            .sum()
    }
}

/// Polynomial plus a remainder bounded by `rem2 * ||x||^2` on the ball of
/// radius `r`.
#[derive(Debug, Clone)]
pub struct PolyRem {
    pub poly: Poly,
    pub rem2: f64,
}

/// Inflation factor absorbing coefficient rounding in the expansion; the
/// certified margins are orders of magnitude larger.
const SLACK: f64 = 1.0 + 1e-9;

pub fn expand_on_ball(e: &Expression, r: f64) -> Result<PolyRem, VerifyError> {
    let n = e.arity();
    expand_node(e.root(), n, r)
}

fn expand_node(node: &Node, n: usize, r: f64) -> Result<PolyRem, VerifyError> {
    let unsupported =
        |what: &str| VerifyError::OriginExpansion(format!("cannot expand {what} on the ball"));
    Ok(match node {
        Node::Var(i) => PolyRem { poly: Poly::var(*i, n), rem2: 0.0 },
        Node::Const(c) => PolyRem { poly: Poly::constant(*c, n), rem2: 0.0 },
        Node::Add(a, b) => {
            let (pa, pb) = (expand_node(a, n, r)?, expand_node(b, n, r)?);
            PolyRem { poly: pa.poly.add(&pb.poly), rem2: (pa.rem2 + pb.rem2) * SLACK }
        }
        Node::Sub(a, b) => {
            let (pa, pb) = (expand_node(a, n, r)?, expand_node(b, n, r)?);
            PolyRem { poly: pa.poly.sub(&pb.poly), rem2: (pa.rem2 + pb.rem2) * SLACK }
        }
        Node::Neg(a) => {
            let pa = expand_node(a, n, r)?;
            PolyRem { poly: pa.poly.neg(), rem2: pa.rem2 }
        }
        Node::Mul(a, b) => {
            let (pa, pb) = (expand_node(a, n, r)?, expand_node(b, n, r)?);
            mul_polyrem(&pa, &pb, r)
        }
        Node::Pow(a, k) => {
            if *k < 0 {
                return Err(unsupported("negative power"));
            }
            let pa = expand_node(a, n, r)?;
            let mut acc = PolyRem { poly: Poly::constant(1.0, n), rem2: 0.0 };
            for _ in 0..*k {
                acc = mul_polyrem(&acc, &pa, r);
            }
            acc
        }
        Node::Div(a, b) => {
            // only division by a nonzero constant
            let pb = expand_node(b, n, r)?;
            let is_const = pb.rem2 == 0.0
                && pb.poly.terms.len() <= 1
                && pb.poly.terms.keys().all(|e| e.iter().all(|&k| k == 0));
            if !is_const {
                return Err(unsupported("division by a non-constant"));
            }
            let c = pb.poly.terms.values().next().copied().unwrap_or(0.0);
            if c == 0.0 {
                return Err(unsupported("division by zero"));
            }
            let pa = expand_node(a, n, r)?;
            PolyRem { poly: pa.poly.scale(1.0 / c), rem2: pa.rem2 / c.abs() * SLACK }
        }
        Node::Sin(a) => {
            // sin(t) = t - t^3/6 + R, |R| <= |t|^5/120 <= (r^3/120) t^2 for
            // a single-variable argument t = x_i with |t| <= r.
            let i = single_var(a).ok_or_else(|| unsupported("sin of a non-variable"))?;
            let x = Poly::var(i, n);
            let poly = x.add(&x.mul(&x).mul(&x).scale(-1.0 / 6.0));
            PolyRem { poly, rem2: r.powi(3) / 120.0 * SLACK }
        }
        Node::Cos(a) => {
            // cos(t) = 1 - t^2/2 + t^4/24 + R, |R| <= |t|^6/720 <= (r^4/720) t^2.
            let i = single_var(a).ok_or_else(|| unsupported("cos of a non-variable"))?;
            let x = Poly::var(i, n);
            let x2 = x.mul(&x);
            let poly = Poly::constant(1.0, n)
                .add(&x2.scale(-0.5))
                .add(&x2.mul(&x2).scale(1.0 / 24.0));
            PolyRem { poly, rem2: r.powi(4) / 720.0 * SLACK }
        }
        Node::Sqrt(_) => return Err(unsupported("sqrt")),
        Node::Exp(_) => return Err(unsupported("exp")),
        Node::Tanh(_) => return Err(unsupported("tanh")),
    })
}

fn single_var(node: &Node) -> Option<usize> {
    match node {
        Node::Var(i) => Some(*i),
        _ => None,
    }
}

fn mul_polyrem(a: &PolyRem, b: &PolyRem, r: f64) -> PolyRem {
    let poly = a.poly.mul(&b.poly);
    // |pa rb x^2| + |pb ra x^2| + ra rb x^2 x^2, all bounded through
    // sup |p| on the ball and |x|^2 <= r^2.
    let rem2 = (a.poly.sup_on_ball(r) * b.rem2
        + b.poly.sup_on_ball(r) * a.rem2
        + a.rem2 * b.rem2 * r * r)
        * SLACK;
    PolyRem { poly, rem2 }
}

/// Split an expansion into constant/linear (must vanish), symmetric
/// quadratic matrix `M`, and the tail bound `sum |c| r^(deg-2) + rem2`.
pub struct QuadraticSplit {
    pub m: DMatrix<f64>,
    pub tail_bound: f64,
}

pub fn split_quadratic(p: &PolyRem, n: usize, r: f64) -> Result<QuadraticSplit, VerifyError> {
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut tail = 0.0;
    for (e, &c) in &p.poly.terms {
        if c == 0.0 {
            continue;
        }
        let deg: u32 = e.iter().map(|&k| k as u32).sum();
        match deg {
            0 | 1 => {
                if c.abs() > 1e-9 {
                    return Err(VerifyError::OriginExpansion(format!(
                        "expansion has a degree-{deg} term with coefficient {c:.3e}; \
                         the field does not vanish at the origin"
                    )));
                }
                // absorb roundoff-level low-degree terms into the tail bound
                tail += c.abs() / (r * r);
            }
            2 => {
                let idx: Vec<usize> = e
                    .iter()
                    .enumerate()
                    .flat_map(|(i, &k)| std::iter::repeat(i).take(k as usize))
                    .collect();
                let (i, j) = (idx[0], idx[1]);
                if i == j {
                    m[(i, i)] += c;
                } else {
                    m[(i, j)] += 0.5 * c;
                    m[(j, i)] += 0.5 * c;
                }
            }
            _ => {
                tail += c.abs() * r.powi(deg as i32 - 2);
            }
        }
    }
    tail = (tail + p.rem2) * SLACK;
    Ok(QuadraticSplit { m, tail_bound: tail })
}

/// Interval Cholesky: succeeds only if every symmetric matrix in the
/// interval family is positive definite.
pub fn interval_cholesky_posdef(a: &[Vec<Interval>]) -> bool {
    let n = a.len();
    let mut l = vec![vec![Interval::point(0.0); n]; n];
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d = d.sub(&l[j][k].mul(&l[j][k]));
        }
        if d.lo <= 0.0 {
            return false;
        }
        let djj = match d.sqrt() {
            Ok(s) => s,
            Err(_) => return false,
        };
        l[j][j] = djj;
        for i in (j + 1)..n {
            let mut s = a[i][j];
            for k in 0..j {
                s = s.sub(&l[i][k].mul(&l[j][k]));
            }
            match s.div(&djj) {
                Ok(v) => l[i][j] = v,
                Err(_) => return false,
            }
        }
    }
    true
}

fn point_matrix(m: &DMatrix<f64>) -> Vec<Vec<Interval>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| Interval::point(m[(i, j)])).collect())
        .collect()
}

/// Largest certified `mu > 0` with `M + mu I` negative definite
/// (`lambda_max(M) <= -mu`), by bisection over interval Cholesky of
/// `-(M + mu I)`. Returns None if even `mu ~ 0` fails.
pub fn certified_negdef_margin(m: &DMatrix<f64>) -> Option<f64> {
    let n = m.nrows();
    let neg = |mu: f64| -> Vec<Vec<Interval>> {
        let mut a = point_matrix(&(-m));
        for (i, row) in a.iter_mut().enumerate() {
            row[i] = row[i].sub(&Interval::point(mu));
        }
        a
    };
    if !interval_cholesky_posdef(&neg(0.0)) {
        return None;
    }
    // Gershgorin upper bound for |lambda|
    let mut hi = 0.0f64;
    for i in 0..n {
        let row_sum: f64 = (0..n).map(|j| m[(i, j)].abs()).sum();
        hi = hi.max(row_sum);
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if interval_cholesky_posdef(&neg(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-9 * (1.0 + lo) {
            break;
        }
    }
    Some(lo)
}

/// Certify `grad V . field < 0` on `0 < ||x|| <= r` for a quadratic `V` by
/// the quadratic/tail split. Returns the certified radius and margin, trying
/// progressively smaller balls. `derivative` is the full symbolic
/// `grad V . field` expression.
pub fn certify_quadratic_ball(derivative: &Expression) -> Result<(f64, f64), VerifyError> {
    let n = derivative.arity();
    let mut last_err: Option<VerifyError> = None;
    for &r in &[0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001] {
        match try_ball(derivative, n, r) {
            Ok(Some(margin)) => return Ok((r, margin)),
            Ok(None) => continue,
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        VerifyError::OriginExpansion(
            "no ball radius certified the origin neighborhood".into(),
        )
    }))
}

fn try_ball(derivative: &Expression, n: usize, r: f64) -> Result<Option<f64>, VerifyError> {
    let expansion = expand_on_ball(derivative, r)?;
    let split = split_quadratic(&expansion, n, r)?;
    let Some(mu) = certified_negdef_margin(&split.m) else {
        return Ok(None);
    };
    if split.tail_bound < mu {
        Ok(Some(mu - split.tail_bound))
    } else {
        Ok(None)
    }
}

/// Interval Jacobian of the closed-loop field `F = f + g (k_N - k0)` under
/// the HJB controller of `model` over the cube `[-r, r]^n`, then certify
/// `P J + J' P` negative definite for the whole family. Needs a constant
/// diagonal `R`.
pub struct NeuralBallCertificate {
    pub radius: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn certify_closed_loop_ball(
    f: &[Expression],
    g: &[Vec<Expression>],
    model: &ValueModel,
    transform: &TransformSpec,
    r_diag: &[f64],
    k0: &[f64],
    p: &DMatrix<f64>,
    radii: &[f64],
) -> Result<NeuralBallCertificate, VerifyError> {
    let n = f.len();
    let k = r_diag.len();
    // symbolic partials of f and g
    let df: Vec<Vec<Expression>> =
        f.iter().map(|fi| (0..n).map(|j| fi.differentiate(j)).collect()).collect();
    let dg: Vec<Vec<Vec<Expression>>> = g
        .iter()
        .map(|row| row.iter().map(|gij| (0..n).map(|j| gij.differentiate(j)).collect()).collect())
        .collect();

    for &r in radii {
        let ball = BoxDomain::centered_cube(r, n);
        let enclosure = match closed_loop_jacobian_enclosure(
            &ball, g, &df, &dg, model, transform, r_diag, k0, n, k,
        ) {
            Ok(j) => j,
            Err(_) => continue,
        };
        // S = P J + J' P as an interval matrix
        let mut s = vec![vec![Interval::point(0.0); n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = Interval::point(0.0);
                for t in 0..n {
                    acc = acc.add(&enclosure[t][j].scale(p[(i, t)]));
                    acc = acc.add(&enclosure[t][i].scale(p[(j, t)]));
                }
                s[i][j] = acc;
            }
        }
        // require -S positive definite
        let neg_s: Vec<Vec<Interval>> =
            s.iter().map(|row| row.iter().map(|iv| iv.neg()).collect()).collect();
        if interval_cholesky_posdef(&neg_s) {
            return Ok(NeuralBallCertificate { radius: r });
        }
    }
    Err(VerifyError::OriginExpansion(
        "no ball radius certified the neural closed loop at the origin".into(),
    ))
}

#[allow(clippy::too_many_arguments)]
fn closed_loop_jacobian_enclosure(
    ball: &BoxDomain,
    g: &[Vec<Expression>],
    df: &[Vec<Expression>],
    dg: &[Vec<Vec<Expression>>],
    model: &ValueModel,
    transform: &TransformSpec,
    r_diag: &[f64],
    k0: &[f64],
    n: usize,
    k: usize,
) -> Result<Vec<Vec<Interval>>, crate::expr::IntervalError> {
    let (w, grad, hess) = model_hessian_interval(model, ball)?;
    let phi = match transform.kind {
        TransformKind::Kruzkov => Interval::point(1.0).sub(&w).scale(transform.alpha),
        TransformKind::Tanh => Interval::point(1.0)
            .sub(&w.powi(2).expect("square"))
            .scale(transform.alpha),
    };
    let phi_prime = match transform.kind {
        TransformKind::Kruzkov => Interval::point(-transform.alpha),
        TransformKind::Tanh => w.scale(-2.0 * transform.alpha),
    };
    // g and its derivatives as intervals
    let mut g_iv = vec![vec![Interval::point(0.0); k]; n];
    let mut dg_iv = vec![vec![vec![Interval::point(0.0); n]; k]; n];
    for i in 0..n {
        for j in 0..k {
            g_iv[i][j] = g[i][j].eval_interval(ball)?;
            for t in 0..n {
                dg_iv[i][j][t] = dg[i][j][t].eval_interval(ball)?;
            }
        }
    }
    // controller and its Jacobian:
    // kN_j = -(Gj . p) / (2 r_j phi)
    // d kN_j / dx_t = -[(dGj/dx_t . p + Gj . H_t) phi - (Gj . p) phi' p_t]
    //                 / (2 r_j phi^2)
    let mut ktilde = vec![Interval::point(0.0); k];
    let mut dk = vec![vec![Interval::point(0.0); n]; k];
    for j in 0..k {
        let mut gj_dot_p = Interval::point(0.0);
        for i in 0..n {
            gj_dot_p = gj_dot_p.add(&g_iv[i][j].mul(&grad[i]));
        }
        let denom = phi.scale(2.0 * r_diag[j]);
        let kn_j = gj_dot_p.neg().div(&denom)?;
        ktilde[j] = kn_j.sub(&Interval::point(k0[j]));
        for t in 0..n {
            let mut dgj_dot_p = Interval::point(0.0);
            let mut gj_dot_ht = Interval::point(0.0);
            for i in 0..n {
                dgj_dot_p = dgj_dot_p.add(&dg_iv[i][j][t].mul(&grad[i]));
                gj_dot_ht = gj_dot_ht.add(&g_iv[i][j].mul(&hess[i][t]));
            }
            let num = dgj_dot_p
                .add(&gj_dot_ht)
                .mul(&phi)
                .sub(&gj_dot_p.mul(&phi_prime).mul(&grad[t]));
            let denom2 = phi.mul(&phi).scale(2.0 * r_diag[j]);
            dk[j][t] = num.neg().div(&denom2)?;
        }
    }
    // J_ij = df_ij + sum_l dg_il/dx_j ktilde_l + sum_l g_il dk_l/dx_j
    let mut out = vec![vec![Interval::point(0.0); n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = df[i][j].eval_interval(ball)?;
            for l in 0..k {
                acc = acc.add(&dg_iv[i][l][j].mul(&ktilde[l]));
                acc = acc.add(&g_iv[i][l].mul(&dk[l][j]));
            }
            out[i][j] = acc;
        }
    }
    Ok(out)
}
