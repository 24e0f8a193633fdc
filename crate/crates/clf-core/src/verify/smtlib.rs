//! SMT-LIB2 emission for external complete solvers.
//!
//! The emitted query asserts the NEGATION of the condition, so `unsat` from
//! the solver proves the condition. Constants are written as exact binary
//! rationals, making the byte output deterministic and faithful to the f64
//! values the rest of the toolchain computed with.
//!
//! Trigonometric terms are handled by replacing `sin(x_i)` / `cos(x_i)`
//! with fresh real variables constrained by certified polynomial envelope
//! bounds (odd/even Taylor truncations valid on the whole line).

use super::{Condition, ConstraintFn, ConstraintKind, Exclusion, VerifyError};
use crate::expr::{Expression, Node};
use std::collections::BTreeMap;
use std::fmt::Write;

/// Emit a satisfiability query for the negation of `cond`.
pub fn emit_smtlib(cond: &Condition, logic: &str) -> Result<String, VerifyError> {
    let mut exprs: Vec<&Expression> = Vec::new();
    for p in &cond.premises {
        exprs.push(expr_of(&p.f)?);
    }
    exprs.push(expr_of(&cond.conclusion)?);
    for e in &cond.exclusions {
        if let Exclusion::SubLevel { f, .. } = e {
            exprs.push(expr_of(f)?);
        }
    }

    // Collect trig substitutions sin(x_i) -> s_i, cos(x_i) -> c_i.
    let mut trig: BTreeMap<(bool, usize), String> = BTreeMap::new();
    for e in &exprs {
        collect_trig(e.root(), &mut trig)?;
    }

    let mut out = String::new();
    writeln!(out, "(set-logic {logic})").unwrap();
    writeln!(out, "; negation query: unsat proves the condition '{}'", cond.name).unwrap();
    for i in 0..cond.arity {
        writeln!(out, "(declare-const x{} Real)", i + 1).unwrap();
    }
    for name in trig.values() {
        writeln!(out, "(declare-const {name} Real)").unwrap();
    }

    if let Some(domain) = &cond.domain {
        for i in 0..cond.arity {
            let iv = domain.interval(i);
            writeln!(
                out,
                "(assert (and (<= {} x{}) (<= x{} {})))",
                rational(iv.lo),
                i + 1,
                i + 1,
                rational(iv.hi)
            )
            .unwrap();
        }
    }

    for ((is_sin, var), name) in &trig {
        emit_trig_bounds(&mut out, *is_sin, *var, name);
    }

    for p in &cond.premises {
        let e = smt_expr(expr_of(&p.f)?.root(), &trig);
        match p.kind {
            ConstraintKind::EqZero => writeln!(out, "(assert (= {e} 0))").unwrap(),
            ConstraintKind::LeqConst(c) => {
                writeln!(out, "(assert (<= {e} {}))", rational(c)).unwrap()
            }
            ConstraintKind::InBand(lo, hi) => writeln!(
                out,
                "(assert (and (<= {} {e}) (<= {e} {})))",
                rational(lo),
                rational(hi)
            )
            .unwrap(),
        }
    }

    for excl in &cond.exclusions {
        match excl {
            Exclusion::OriginBall { radius } => {
                let sq = (0..cond.arity)
                    .map(|i| format!("(* x{0} x{0})", i + 1))
                    .collect::<Vec<_>>()
                    .join(" ");
                let sum = if cond.arity == 1 { sq } else { format!("(+ {sq})") };
                writeln!(out, "(assert (> {sum} {}))", rational(radius * radius)).unwrap();
            }
            Exclusion::SubLevel { f, level } => {
                let e = smt_expr(expr_of(f)?.root(), &trig);
                writeln!(out, "(assert (> {e} {}))", rational(*level)).unwrap();
            }
        }
    }

    // negated conclusion: conclusion < 0 fails somewhere
    let concl = smt_expr(expr_of(&cond.conclusion)?.root(), &trig);
    writeln!(out, "(assert (>= {concl} 0))").unwrap();
    writeln!(out, "(check-sat)").unwrap();
    writeln!(out, "(exit)").unwrap();
    Ok(out)
}

fn expr_of(f: &ConstraintFn) -> Result<&Expression, VerifyError> {
    match f {
        ConstraintFn::Expr(e) => Ok(e),
        _ => Err(VerifyError::SmtUnsupported(
            "only symbolic expressions can be emitted to SMT-LIB".into(),
        )),
    }
}

fn collect_trig(
    node: &Node,
    trig: &mut BTreeMap<(bool, usize), String>,
) -> Result<(), VerifyError> {
    match node {
        Node::Var(_) | Node::Const(_) => Ok(()),
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
            collect_trig(a, trig)?;
            collect_trig(b, trig)
        }
        Node::Pow(a, _) | Node::Neg(a) => collect_trig(a, trig),
        Node::Sin(a) | Node::Cos(a) => {
            let is_sin = matches!(node, Node::Sin(_));
            match &**a {
                Node::Var(i) => {
                    trig.entry((is_sin, *i)).or_insert_with(|| {
                        format!("{}{}", if is_sin { "s" } else { "c" }, i + 1)
                    });
                    Ok(())
                }
                _ => Err(VerifyError::SmtUnsupported(
                    "trigonometric arguments must be single variables".into(),
                )),
            }
        }
        Node::Sqrt(_) | Node::Exp(_) | Node::Tanh(_) => Err(VerifyError::SmtUnsupported(
            "sqrt/exp/tanh have no SMT-LIB polynomial encoding here".into(),
        )),
    }
}

/// Envelope bounds valid for every real argument:
/// for x >= 0:  x - x^3/6  <=  sin x  <=  x - x^3/6 + x^5/120, and the odd
/// mirror for x <= 0; for cos on the whole line:
/// 1 - x^2/2  <=  cos x  <=  1 - x^2/2 + x^4/24; both intersected with
/// [-1, 1].
fn emit_trig_bounds(out: &mut String, is_sin: bool, var: usize, name: &str) {
    let x = format!("x{}", var + 1);
    writeln!(out, "(assert (and (<= {name} 1) (>= {name} (- 1))))").unwrap();
    if is_sin {
        let cubic = format!("(- {x} (/ (* {x} {x} {x}) 6))");
        let quintic =
            format!("(+ (- {x} (/ (* {x} {x} {x}) 6)) (/ (* {x} {x} {x} {x} {x}) 120))");
        writeln!(
            out,
            "(assert (=> (>= {x} 0) (and (>= {name} {cubic}) (<= {name} {quintic}))))"
        )
        .unwrap();
        writeln!(
            out,
            "(assert (=> (<= {x} 0) (and (<= {name} {cubic}) (>= {name} {quintic}))))"
        )
        .unwrap();
    } else {
        let quadratic = format!("(- 1 (/ (* {x} {x}) 2))");
        let quartic = format!("(+ (- 1 (/ (* {x} {x}) 2)) (/ (* {x} {x} {x} {x}) 24))");
        writeln!(out, "(assert (>= {name} {quadratic}))").unwrap();
        writeln!(out, "(assert (<= {name} {quartic}))").unwrap();
    }
}

fn smt_expr(node: &Node, trig: &BTreeMap<(bool, usize), String>) -> String {
    match node {
        Node::Var(i) => format!("x{}", i + 1),
        Node::Const(c) => rational(*c),
        Node::Add(a, b) => format!("(+ {} {})", smt_expr(a, trig), smt_expr(b, trig)),
        Node::Sub(a, b) => format!("(- {} {})", smt_expr(a, trig), smt_expr(b, trig)),
        Node::Mul(a, b) => format!("(* {} {})", smt_expr(a, trig), smt_expr(b, trig)),
        Node::Div(a, b) => format!("(/ {} {})", smt_expr(a, trig), smt_expr(b, trig)),
        Node::Neg(a) => format!("(- {})", smt_expr(a, trig)),
        Node::Pow(a, k) => {
            let base = smt_expr(a, trig);
            match *k {
                0 => "1".into(),
                1 => base,
                k if k > 1 => {
                    let parts = vec![base; k as usize];
                    format!("(* {})", parts.join(" "))
                }
                k => {
                    let parts = vec![base; (-k) as usize];
                    format!("(/ 1 (* {}))", parts.join(" "))
                }
            }
        }
        Node::Sin(a) | Node::Cos(a) => {
            let is_sin = matches!(node, Node::Sin(_));
            if let Node::Var(i) = &**a {
                trig.get(&(is_sin, *i)).cloned().unwrap_or_else(|| "?".into())
            } else {
                "?".into()
            }
        }
        Node::Sqrt(_) | Node::Exp(_) | Node::Tanh(_) => "?".into(),
    }
}

/// Exact rational form of a finite f64: `m * 2^e` rendered as an integer or
/// `(/ num den)` with a power-of-two denominator.
pub fn rational(x: f64) -> String {
    assert!(x.is_finite(), "cannot emit non-finite constant");
    if x == 0.0 {
        return "0".into();
    }
    let neg = x < 0.0;
    let bits = x.abs().to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mut mantissa, mut exp) = if raw_exp == 0 {
        (frac, -1074i64)
    } else {
        (frac | (1u64 << 52), raw_exp - 1075)
    };
    // normalize: strip trailing zeros of the mantissa into the exponent
    while mantissa % 2 == 0 && exp < 0 {
        mantissa /= 2;
        exp += 1;
    }
    let body = if exp >= 0 {
        assert!(exp <= 63, "constant too large for exact emission: {x}");
        format!("{}", (mantissa as u128) << exp)
    } else {
        let e = (-exp) as u32;
        assert!(e <= 127, "constant too small for exact emission: {x}");
        format!("(/ {} {})", mantissa, 1u128 << e)
    };
    if neg {
        format!("(- {body})")
    } else {
        body
    }
}
