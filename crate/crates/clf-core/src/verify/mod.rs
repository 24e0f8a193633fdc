//! Formal verification of CLF conditions: the native delta-complete
//! interval checker, level-set bisection drivers for quadratic and neural
//! certificates, closed-loop region-of-attraction verification, and
//! SMT-LIB2 query emission for external solvers.

pub mod bnb;
pub mod funcs;
pub mod origin;
pub mod smtlib;

pub use bnb::{certified_boundary_min, check_condition, BnbBudget};
pub use funcs::{ClosedLoopDecrease, ConstraintFn, ValueModel};
pub use smtlib::emit_smtlib;

use crate::expr::{BoxDomain, Expression};
use crate::riccati::QuadraticCertificate;
use crate::system::{ControlAffineSystem, CostSpec};
use nalgebra::DMatrix;
use serde::Serialize;
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("origin handling failed: {0}")]
    OriginExpansion(String),
    #[error("stage A failed: no closed-loop Lyapunov level could be verified")]
    CertificateRejected,
    #[error("no containment level c1 could be verified; the network is not trained well enough")]
    NoContainmentLevel,
    #[error("SMT emission unsupported: {0}")]
    SmtUnsupported(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("system error: {0}")]
    System(String),
}

/// Premise or conclusion function with its comparison.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub name: String,
    pub f: ConstraintFn,
    pub kind: ConstraintKind,
}

#[derive(Debug, Clone, Copy)]
pub enum ConstraintKind {
    /// Premise `f(x) = 0`, delta-weakened to `|f| <= delta`.
    EqZero,
    /// Premise `f(x) <= c`.
    LeqConst(f64),
    /// Premise `lo <= f(x) <= hi`.
    InBand(f64, f64),
}

/// Regions removed from the search (already certified elsewhere).
#[derive(Debug, Clone)]
pub enum Exclusion {
    /// `||x|| <= radius`; radius zero encodes the bare point `x != 0`
    /// (meaningful only for emitted SMT queries).
    OriginBall { radius: f64 },
    /// `{x : f(x) <= level}`.
    SubLevel { f: ConstraintFn, level: f64 },
}

/// `premises /\ x in domain minus exclusions  ==>  conclusion < 0`.
#[derive(Debug, Clone)]
pub struct Condition {
    pub name: String,
    pub premises: Vec<Constraint>,
    pub conclusion: ConstraintFn,
    /// None means all of R^n, which only the SMT path can handle.
    pub domain: Option<BoxDomain>,
    pub exclusions: Vec<Exclusion>,
    pub arity: usize,
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Proved,
    Counterexample { witness: Vec<f64>, witness_box: BoxDomain },
    Unknown { reason: String },
}

impl Outcome {
    pub fn is_proved(&self) -> bool {
        matches!(self, Outcome::Proved)
    }
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub outcome: Outcome,
    pub delta: f64,
    pub boxes_processed: u64,
    pub wall_time_ms: u64,
}

/// Report row written as JSON next to other run artifacts.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub condition: String,
    pub verdict: String,
    pub c: Option<f64>,
    pub delta: f64,
    pub boxes: u64,
    pub time_ms: u64,
    pub witness: Option<Vec<f64>>,
}

impl VerificationReport {
    pub fn from_verdict(name: &str, v: &Verdict, c: Option<f64>) -> Self {
        let (verdict, witness) = match &v.outcome {
            Outcome::Proved => ("proved".to_string(), None),
            Outcome::Counterexample { witness, .. } => {
                ("counterexample".to_string(), Some(witness.clone()))
            }
            Outcome::Unknown { reason } => (format!("unknown: {reason}"), None),
        };
        VerificationReport {
            condition: name.to_string(),
            verdict,
            c,
            delta: v.delta,
            boxes: v.boxes_processed,
            time_ms: v.wall_time_ms,
            witness,
        }
    }
}

/// Default delta by dimension: tight in the plane, looser in higher
/// dimensions to keep desk-scale runtimes.
pub fn default_delta(n: usize) -> f64 {
    if n <= 2 {
        1e-4
    } else {
        1e-3
    }
}

/// The quadratic form `x' P x` as an expression.
pub fn quadratic_form_expr(p: &DMatrix<f64>) -> Expression {
    let n = p.nrows();
    let mut acc = Expression::zero(n);
    for i in 0..n {
        for j in 0..n {
            let c = p[(i, j)];
            if c != 0.0 {
                acc = acc.add(
                    &Expression::constant(c, n)
                        .mul(&Expression::var(i, n))
                        .mul(&Expression::var(j, n)),
                );
            }
        }
    }
    acc
}

/// Gradient `2 P x` as expressions.
pub fn quadratic_gradient_exprs(p: &DMatrix<f64>) -> Vec<Expression> {
    let n = p.nrows();
    (0..n)
        .map(|i| {
            let mut acc = Expression::zero(n);
            for j in 0..n {
                let c = p[(i, j)] + p[(j, i)];
                if c != 0.0 {
                    acc = acc.add(&Expression::constant(c, n).mul(&Expression::var(j, n)));
                }
            }
            acc
        })
        .collect()
}

/// `grad V . field` for an expression gradient and field.
pub fn directional_derivative(grad: &[Expression], field: &[Expression]) -> Expression {
    let mut acc = Expression::zero(grad[0].arity());
    for (g, f) in grad.iter().zip(field) {
        acc = acc.add(&g.mul(f));
    }
    acc
}

/// Find the largest level in `(0, hi]` whose check passes, assuming
/// monotonicity (if c passes, every smaller level passes). Relative
/// tolerance 1e-3. Returns None when nothing passes.
pub fn bisect_largest_level(hi: f64, mut check: impl FnMut(f64) -> bool) -> Option<f64> {
    assert!(hi > 0.0);
    if check(hi) {
        return Some(hi);
    }
    // find some passing level by geometric descent
    let mut pass = None;
    let mut c = hi;
    for _ in 0..40 {
        c *= 0.5;
        if check(c) {
            pass = Some(c);
            break;
        }
    }
    let mut lo = pass?;
    let mut bad = (lo * 2.0).min(hi);
    while bad - lo > 1e-3 * bad {
        let mid = 0.5 * (lo + bad);
        if check(mid) {
            lo = mid;
        } else {
            bad = mid;
        }
    }
    Some(lo)
}

/// Statistics from a bisection run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct BisectionStats {
    pub checks: usize,
    pub boxes_total: u64,
}

/// Everything Algorithm-2-style verification needs about the quadratic
/// certificate's symbolic side.
struct QuadraticSymbols {
    v: Expression,
    a: Expression,
    b: Vec<Expression>,
    vdot_cl: Expression,
}

fn quadratic_symbols(
    sys: &ControlAffineSystem,
    cert: &QuadraticCertificate,
) -> Result<QuadraticSymbols, VerifyError> {
    let grad = quadratic_gradient_exprs(&cert.p);
    let v = quadratic_form_expr(&cert.p);
    let a = directional_derivative(&grad, &sys.f);
    let b: Vec<Expression> = (0..sys.k)
        .map(|j| {
            let col: Vec<Expression> = (0..sys.n).map(|i| sys.g[i][j].clone()).collect();
            directional_derivative(&grad, &col)
        })
        .collect();
    let controller = sys.linear_feedback(&cert.k);
    let field = sys
        .closed_loop(&controller)
        .map_err(|e| VerifyError::System(e.to_string()))?;
    let vdot_cl = directional_derivative(&grad, &field);
    Ok(QuadraticSymbols { v, a, b, vdot_cl })
}

/// Result of quadratic verification with its audit trail.
#[derive(Debug, Clone)]
pub struct QuadraticVerification {
    pub cert: QuadraticCertificate,
    pub origin_radius: f64,
    pub origin_margin: f64,
    pub stats: BisectionStats,
}

/// Quadratic CLF verification: Stage A certifies `V_P` as a Lyapunov
/// function for the closed loop under `u = Kx` on the largest `{V_P <= c}`
/// (origin ball by the algebraic certificate, the rest by interval
/// branch-and-bound); Stage B then grows the CLF level using the weaker
/// condition `grad V . g = 0  =>  grad V . f < 0` on the band between the
/// two levels.
pub fn verify_quadratic(
    sys: &ControlAffineSystem,
    cert: &QuadraticCertificate,
    c_max: Option<f64>,
    delta: f64,
    budget: &BnbBudget,
    threads: usize,
) -> Result<QuadraticVerification, VerifyError> {
    let syms = quadratic_symbols(sys, cert)?;
    let (origin_radius, origin_margin) = origin::certify_quadratic_ball(&syms.vdot_cl)?;

    // Levels must stay inside the verification domain; the user bound caps
    // both stages (it is the bisection upper bound of the algorithm).
    let v_fn = ConstraintFn::expr(syms.v.clone());
    let boundary_cap = certified_boundary_min(&v_fn, &sys.domain, 1e-6, 400)
        .ok_or_else(|| VerifyError::Unsupported("boundary minimum of V_P failed".into()))?;
    let cap_a = match c_max {
        Some(c) => c.min(boundary_cap * (1.0 - 1e-9)),
        None => boundary_cap * (1.0 - 1e-9),
    };
    let mut stats = BisectionStats::default();

    // Stage A
    let c_p1 = bisect_largest_level(cap_a, |c| {
        let cond = Condition {
            name: format!("stageA c={c}"),
            premises: vec![Constraint {
                name: "level".into(),
                f: v_fn.clone(),
                kind: ConstraintKind::LeqConst(c),
            }],
            conclusion: ConstraintFn::expr(syms.vdot_cl.clone()),
            domain: Some(sys.domain.clone()),
            exclusions: vec![Exclusion::OriginBall { radius: origin_radius }],
            arity: sys.n,
        };
        let v = check_condition(&cond, delta, budget, threads);
        stats.checks += 1;
        stats.boxes_total += v.boxes_processed;
        v.outcome.is_proved()
    })
    .ok_or(VerifyError::CertificateRejected)?;

    // Stage B
    let cap_b = c_max.unwrap_or(cap_a).min(cap_a);
    let c_p = if cap_b > c_p1 {
        bisect_largest_level(cap_b, |c| {
            if c <= c_p1 {
                return true;
            }
            let mut premises: Vec<Constraint> = syms
                .b
                .iter()
                .enumerate()
                .map(|(j, bj)| Constraint {
                    name: format!("b{j}"),
                    f: ConstraintFn::expr(bj.clone()),
                    kind: ConstraintKind::EqZero,
                })
                .collect();
            premises.push(Constraint {
                name: "band".into(),
                f: v_fn.clone(),
                kind: ConstraintKind::InBand(c_p1, c),
            });
            let cond = Condition {
                name: format!("stageB c={c}"),
                premises,
                conclusion: ConstraintFn::expr(syms.a.clone()),
                domain: Some(sys.domain.clone()),
                exclusions: vec![],
                arity: sys.n,
            };
            let v = check_condition(&cond, delta, budget, threads);
            stats.checks += 1;
            stats.boxes_total += v.boxes_processed;
            v.outcome.is_proved()
        })
        .unwrap_or(c_p1)
        .max(c_p1)
    } else {
        c_p1
    };

    let mut out = cert.clone();
    out.c_p1 = c_p1;
    out.c_p = c_p;
    Ok(QuadraticVerification { cert: out, origin_radius, origin_margin, stats })
}

/// The CLF condition `grad V . g = 0 /\ x != 0 => grad V . f < 0` checked
/// natively over the whole (bounded) domain, with the already-certified
/// sublevel `{V_P <= inner_level}` excluded to cover the origin.
pub fn global_clf_condition(
    sys: &ControlAffineSystem,
    cert: &QuadraticCertificate,
    domain: Option<BoxDomain>,
    inner_level: Option<f64>,
) -> Result<Condition, VerifyError> {
    let syms = quadratic_symbols(sys, cert)?;
    let premises: Vec<Constraint> = syms
        .b
        .iter()
        .enumerate()
        .map(|(j, bj)| Constraint {
            name: format!("b{j}"),
            f: ConstraintFn::expr(bj.clone()),
            kind: ConstraintKind::EqZero,
        })
        .collect();
    let exclusions = match inner_level {
        Some(c) => vec![Exclusion::SubLevel {
            f: ConstraintFn::expr(syms.v.clone()),
            level: c,
        }],
        None => vec![Exclusion::OriginBall { radius: 0.0 }],
    };
    Ok(Condition {
        name: format!("global_clf_{}", sys.name),
        premises,
        conclusion: ConstraintFn::expr(syms.a.clone()),
        domain,
        exclusions,
        arity: sys.n,
    })
}

/// Result of neural CLF verification.
#[derive(Debug, Clone)]
pub struct NeuralVerification {
    pub c1: f64,
    pub c2: Option<f64>,
    pub c_max: f64,
    pub stats: BisectionStats,
}

/// Neural CLF verification: the largest `c1` with
/// `{W <= c1} subset {V_P <= c_P}`, then the largest `c2 in (c1, c_max]`
/// on which the neural CLF condition holds. `c_max` defaults to a certified
/// lower bound of `W` on the domain boundary, which also pins
/// `{W <= c2}` inside the domain.
pub fn verify_neural(
    sys: &ControlAffineSystem,
    model: &Arc<ValueModel>,
    cert: &QuadraticCertificate,
    c_max: Option<f64>,
    delta: f64,
    budget: &BnbBudget,
    threads: usize,
) -> Result<NeuralVerification, VerifyError> {
    let n = sys.n;
    let w_fn = ConstraintFn::ModelValue(model.clone());
    let boundary = certified_boundary_min(&w_fn, &sys.domain, 1e-5, 400)
        .ok_or_else(|| VerifyError::Unsupported("boundary minimum of W failed".into()))?;
    let cap = match c_max {
        Some(c) => c.min(boundary * (1.0 - 1e-9)),
        None => boundary * (1.0 - 1e-9),
    };
    if cap <= 0.0 {
        return Err(VerifyError::NoContainmentLevel);
    }
    let mut stats = BisectionStats::default();

    let v_expr = quadratic_form_expr(&cert.p);
    let c1 = bisect_largest_level(cap, |c| {
        let cond = Condition {
            name: format!("containment c1={c}"),
            premises: vec![Constraint {
                name: "w_level".into(),
                f: w_fn.clone(),
                kind: ConstraintKind::LeqConst(c),
            }],
            conclusion: ConstraintFn::expr(
                v_expr.sub(&Expression::constant(cert.c_p, n)),
            ),
            domain: Some(sys.domain.clone()),
            exclusions: vec![],
            arity: n,
        };
        let v = check_condition(&cond, delta, budget, threads);
        stats.checks += 1;
        stats.boxes_total += v.boxes_processed;
        v.outcome.is_proved()
    })
    .ok_or(VerifyError::NoContainmentLevel)?;

    if cap <= c1 {
        return Ok(NeuralVerification { c1, c2: None, c_max: cap, stats });
    }

    let c2 = bisect_largest_level(cap, |c| {
        if c <= c1 {
            return true;
        }
        let mut premises: Vec<Constraint> = (0..sys.k)
            .map(|j| {
                let col: Vec<Expression> = (0..n).map(|i| sys.g[i][j].clone()).collect();
                Constraint {
                    name: format!("bW{j}"),
                    f: ConstraintFn::ModelGradDotField { model: model.clone(), field: col },
                    kind: ConstraintKind::EqZero,
                }
            })
            .collect();
        premises.push(Constraint {
            name: "w_band".into(),
            f: w_fn.clone(),
            kind: ConstraintKind::InBand(c1, c),
        });
        let cond = Condition {
            name: format!("neural_clf c2={c}"),
            premises,
            conclusion: ConstraintFn::ModelGradDotField {
                model: model.clone(),
                field: sys.f.clone(),
            },
            domain: Some(sys.domain.clone()),
            exclusions: vec![],
            arity: n,
        };
        let v = check_condition(&cond, delta, budget, threads);
        stats.checks += 1;
        stats.boxes_total += v.boxes_processed;
        v.outcome.is_proved()
    })
    .filter(|&c| c > c1);

    Ok(NeuralVerification { c1, c2, c_max: cap, stats })
}

/// Closed-loop region-of-attraction verification under the neural HJB
/// controller (zero-shifted). The origin is handled in three certified
/// layers: an interval-Jacobian ball, a quadratic `V_P` region verified
/// under the *neural* controller, and the `W` band above it.
#[derive(Debug, Clone)]
pub struct RoaVerification {
    pub c: f64,
    pub ball_radius: f64,
    pub c_quadratic: f64,
    pub c_inner: f64,
    pub stats: BisectionStats,
}

pub fn verify_closed_loop_roa(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
    model: &Arc<ValueModel>,
    transform: crate::pmp::TransformSpec,
    cert: &QuadraticCertificate,
    delta: f64,
    budget: &BnbBudget,
    threads: usize,
) -> Result<RoaVerification, VerifyError> {
    let n = sys.n;
    let r_diag = cost.constant_diagonal_r().ok_or_else(|| {
        VerifyError::Unsupported(
            "closed-loop ROA verification needs a constant diagonal R".into(),
        )
    })?;

    // zero-shift offset k0 = k_N(0)
    let origin = vec![0.0; n];
    let (w0, grad0) = model
        .value_grad(&origin)
        .map_err(|e| VerifyError::System(e.to_string()))?;
    let g0 = sys.eval_g(&origin).map_err(|e| VerifyError::System(e.to_string()))?;
    let phi0 = transform.phi(w0);
    if phi0 <= 0.0 {
        return Err(VerifyError::Unsupported("W(0) >= 1; transform degenerate".into()));
    }
    let mut k0 = vec![0.0; sys.k];
    for j in 0..sys.k {
        let mut acc = 0.0;
        for i in 0..n {
            acc += g0[(i, j)] * grad0[i];
        }
        k0[j] = -acc / (2.0 * r_diag[j] * phi0);
    }

    // Layer 1: interval-Jacobian ball.
    let ball = origin::certify_closed_loop_ball(
        &sys.f,
        &sys.g,
        model,
        &transform,
        &r_diag,
        &k0,
        &cert.p,
        &[0.2, 0.1, 0.05, 0.02, 0.01],
    )?;
    let mut stats = BisectionStats::default();

    // Layer 2: V_P decreasing under the neural controller on
    // {V_P <= c_q} minus the ball.
    let v_expr = quadratic_form_expr(&cert.p);
    let v_fn = ConstraintFn::expr(v_expr.clone());
    let outer_v = Arc::new(ValueModel::from_expression(v_expr.clone()));
    let quad_decrease = Arc::new(ClosedLoopDecrease {
        outer: outer_v,
        model: model.clone(),
        f: sys.f.clone(),
        g: sys.g.clone(),
        r_diag: r_diag.clone(),
        transform,
        k0: k0.clone(),
        w_clamp: None,
    });
    let c_q = bisect_largest_level(cert.c_p1.max(1e-6), |c| {
        let cond = Condition {
            name: format!("roa_quadratic c={c}"),
            premises: vec![Constraint {
                name: "v_level".into(),
                f: v_fn.clone(),
                kind: ConstraintKind::LeqConst(c),
            }],
            conclusion: ConstraintFn::ClosedLoop(quad_decrease.clone()),
            domain: Some(sys.domain.clone()),
            exclusions: vec![Exclusion::OriginBall { radius: ball.radius }],
            arity: n,
        };
        let v = check_condition(&cond, delta, budget, threads);
        stats.checks += 1;
        stats.boxes_total += v.boxes_processed;
        v.outcome.is_proved()
    })
    .ok_or_else(|| {
        VerifyError::OriginExpansion(
            "no quadratic level verified under the neural controller".into(),
        )
    })?;

    // Layer 3a: {W <= c_inner} inside {V_P <= c_q}.
    let w_fn = ConstraintFn::ModelValue(model.clone());
    let boundary = certified_boundary_min(&w_fn, &sys.domain, 1e-5, 400)
        .ok_or_else(|| VerifyError::Unsupported("boundary minimum of W failed".into()))?;
    let cap = boundary * (1.0 - 1e-9);
    let c_inner = bisect_largest_level(cap, |c| {
        let cond = Condition {
            name: format!("roa_containment c={c}"),
            premises: vec![Constraint {
                name: "w_level".into(),
                f: w_fn.clone(),
                kind: ConstraintKind::LeqConst(c),
            }],
            conclusion: ConstraintFn::expr(v_expr.sub(&Expression::constant(c_q, n))),
            domain: Some(sys.domain.clone()),
            exclusions: vec![],
            arity: n,
        };
        let v = check_condition(&cond, delta, budget, threads);
        stats.checks += 1;
        stats.boxes_total += v.boxes_processed;
        v.outcome.is_proved()
    })
    .ok_or(VerifyError::NoContainmentLevel)?;

    // Layer 3b: W decreasing along the closed loop on the band.
    let c = bisect_largest_level(cap, |c| {
        if c <= c_inner {
            return true;
        }
        let band_decrease = Arc::new(ClosedLoopDecrease {
            outer: model.clone(),
            model: model.clone(),
            f: sys.f.clone(),
            g: sys.g.clone(),
            r_diag: r_diag.clone(),
            transform,
            k0: k0.clone(),
            w_clamp: Some(crate::expr::Interval::new(0.0, (c + delta).min(1.0 - 1e-12))),
        });
        let cond = Condition {
            name: format!("roa_band c={c}"),
            premises: vec![Constraint {
                name: "w_band".into(),
                f: w_fn.clone(),
                kind: ConstraintKind::InBand(c_inner, c),
            }],
            conclusion: ConstraintFn::ClosedLoop(band_decrease),
            domain: Some(sys.domain.clone()),
            exclusions: vec![],
            arity: n,
        };
        let v = check_condition(&cond, delta, budget, threads);
        stats.checks += 1;
        stats.boxes_total += v.boxes_processed;
        v.outcome.is_proved()
    })
    .unwrap_or(c_inner)
    .max(c_inner);

    Ok(RoaVerification { c, ball_radius: ball.radius, c_quadratic: c_q, c_inner, stats })
}

#[cfg(test)]
mod tests;
