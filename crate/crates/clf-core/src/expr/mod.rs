//! Symbolic expression trees with exact point evaluation, sound interval
//! evaluation, and symbolic differentiation.
//!
//! Expressions are immutable trees over `{x_i, constants, +, -, *, /, integer
//! powers, sqrt, exp, sin, cos, tanh}`. Subtrees are shared via `Arc`, so
//! cloning is cheap and evaluation from many threads is safe.

mod interval;
mod parse;
pub mod tape;

pub use interval::{BoxDomain, Interval};
pub use parse::ParseError;

use std::fmt;
use std::sync::Arc;

/// Errors raised by point evaluation.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("square root of a negative number")]
    SqrtNegative,
}

/// Errors raised by interval evaluation.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IntervalError {
    #[error("division by an interval containing zero")]
    DivisionByZero,
    #[error("square root of an interval with negative points")]
    SqrtNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Node {
    Var(usize),
    Const(f64),
    Add(Arc<Node>, Arc<Node>),
    Sub(Arc<Node>, Arc<Node>),
    Mul(Arc<Node>, Arc<Node>),
    Div(Arc<Node>, Arc<Node>),
    /// Integer power; exponent may be negative (then `base^-k = 1/base^k`).
    Pow(Arc<Node>, i32),
    Neg(Arc<Node>),
    Sqrt(Arc<Node>),
    Exp(Arc<Node>),
    Sin(Arc<Node>),
    Cos(Arc<Node>),
    Tanh(Arc<Node>),
}

/// An immutable symbolic expression over variables `x0..x{arity-1}`.
///
/// Structural equality is decidable (`==` compares trees). All constructors
/// apply constant folding and the 0/1 identities, nothing more.
#[derive(Clone, PartialEq)]
pub struct Expression {
    root: Arc<Node>,
    arity: usize,
}

impl fmt::Debug for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expression[{}]({})", self.arity, self)
    }
}

fn is_const(node: &Node) -> Option<f64> {
    match node {
        Node::Const(c) => Some(*c),
        _ => None,
    }
}

impl Expression {
    /// The variable `x_i` in an expression space of `arity` variables.
    pub fn var(i: usize, arity: usize) -> Self {
        assert!(i < arity, "variable index {i} out of range for arity {arity}");
        Expression { root: Arc::new(Node::Var(i)), arity }
    }

    pub fn constant(c: f64, arity: usize) -> Self {
        Expression { root: Arc::new(Node::Const(c)), arity }
    }

    pub fn zero(arity: usize) -> Self {
        Self::constant(0.0, arity)
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn as_constant(&self) -> Option<f64> {
        is_const(&self.root)
    }

    fn check_arity(&self, other: &Expression) {
        assert_eq!(
            self.arity, other.arity,
            "expression arity mismatch ({} vs {})",
            self.arity, other.arity
        );
    }

    fn unary(arity: usize, node: Node) -> Expression {
        Expression { root: Arc::new(node), arity }
    }

    pub fn add(&self, other: &Expression) -> Expression {
        self.check_arity(other);
        match (is_const(&self.root), is_const(&other.root)) {
            (Some(a), Some(b)) => Self::constant(a + b, self.arity),
            (Some(a), None) if a == 0.0 => other.clone(),
            (None, Some(b)) if b == 0.0 => self.clone(),
            _ => Self::unary(self.arity, Node::Add(self.root.clone(), other.root.clone())),
        }
    }

    pub fn sub(&self, other: &Expression) -> Expression {
        self.check_arity(other);
        match (is_const(&self.root), is_const(&other.root)) {
            (Some(a), Some(b)) => Self::constant(a - b, self.arity),
            (None, Some(b)) if b == 0.0 => self.clone(),
            (Some(a), None) if a == 0.0 => other.neg(),
            _ => Self::unary(self.arity, Node::Sub(self.root.clone(), other.root.clone())),
        }
    }

    pub fn mul(&self, other: &Expression) -> Expression {
        self.check_arity(other);
        match (is_const(&self.root), is_const(&other.root)) {
            (Some(a), Some(b)) => Self::constant(a * b, self.arity),
            (Some(a), None) if a == 0.0 => Self::zero(self.arity),
            (None, Some(b)) if b == 0.0 => Self::zero(self.arity),
            (Some(a), None) if a == 1.0 => other.clone(),
            (None, Some(b)) if b == 1.0 => self.clone(),
            _ => Self::unary(self.arity, Node::Mul(self.root.clone(), other.root.clone())),
        }
    }

    pub fn div(&self, other: &Expression) -> Expression {
        self.check_arity(other);
        match (is_const(&self.root), is_const(&other.root)) {
            // Constant folding only when the divisor is nonzero, so a
            // division-by-zero error surfaces at evaluation time.
            (Some(a), Some(b)) if b != 0.0 => Self::constant(a / b, self.arity),
            (None, Some(b)) if b == 1.0 => self.clone(),
            _ => Self::unary(self.arity, Node::Div(self.root.clone(), other.root.clone())),
        }
    }

    pub fn neg(&self) -> Expression {
        match &*self.root {
            Node::Const(c) => Self::constant(-c, self.arity),
            Node::Neg(inner) => Expression { root: inner.clone(), arity: self.arity },
            _ => Self::unary(self.arity, Node::Neg(self.root.clone())),
        }
    }

    pub fn powi(&self, k: i32) -> Expression {
        match k {
            0 => Self::constant(1.0, self.arity),
            1 => self.clone(),
            _ => match is_const(&self.root) {
                Some(c) if c != 0.0 || k > 0 => Self::constant(c.powi(k), self.arity),
                _ => Self::unary(self.arity, Node::Pow(self.root.clone(), k)),
            },
        }
    }

    pub fn sqrt(&self) -> Expression {
        match is_const(&self.root) {
            Some(c) if c >= 0.0 => Self::constant(c.sqrt(), self.arity),
            _ => Self::unary(self.arity, Node::Sqrt(self.root.clone())),
        }
    }

    pub fn exp(&self) -> Expression {
        match is_const(&self.root) {
            Some(c) => Self::constant(c.exp(), self.arity),
            None => Self::unary(self.arity, Node::Exp(self.root.clone())),
        }
    }

    pub fn sin(&self) -> Expression {
        match is_const(&self.root) {
            Some(c) => Self::constant(c.sin(), self.arity),
            None => Self::unary(self.arity, Node::Sin(self.root.clone())),
        }
    }

    pub fn cos(&self) -> Expression {
        match is_const(&self.root) {
            Some(c) => Self::constant(c.cos(), self.arity),
            None => Self::unary(self.arity, Node::Cos(self.root.clone())),
        }
    }

    pub fn tanh(&self) -> Expression {
        match is_const(&self.root) {
            Some(c) => Self::constant(c.tanh(), self.arity),
            None => Self::unary(self.arity, Node::Tanh(self.root.clone())),
        }
    }

    /// Parse an infix expression over variables `x1..x{arity}`.
    ///
    /// See the README for the grammar. Offsets in errors are byte offsets
    /// into `text`.
    pub fn parse(text: &str, arity: usize) -> Result<Expression, ParseError> {
        let names: Vec<String> = (1..=arity).map(|i| format!("x{i}")).collect();
        parse::parse_with_names(text, &names)
    }

    /// Parse with an explicit list of variable names; `names[i]` becomes
    /// variable index `i`.
    pub fn parse_with_names(text: &str, names: &[&str]) -> Result<Expression, ParseError> {
        let owned: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        parse::parse_with_names(text, &owned)
    }

    /// IEEE-754 double evaluation at a point.
    pub fn eval(&self, point: &[f64]) -> Result<f64, EvalError> {
        assert_eq!(point.len(), self.arity, "point length must equal arity");
        eval_node(&self.root, point)
    }

    /// Sound interval enclosure of the expression's range over `domain`:
    /// for every `x` in the box, `eval(x)` lies in the returned interval.
    pub fn eval_interval(&self, domain: &BoxDomain) -> Result<Interval, IntervalError> {
        assert_eq!(domain.dim(), self.arity, "box dimension must equal arity");
        interval::eval_node_interval(&self.root, domain)
    }

    /// Symbolic partial derivative with respect to `x_i`.
    pub fn differentiate(&self, i: usize) -> Expression {
        assert!(i < self.arity, "variable index {i} out of range");
        diff_node(&self.root, i, self.arity)
    }

    /// Gradient as a vector of expressions.
    pub fn gradient(&self) -> Vec<Expression> {
        (0..self.arity).map(|i| self.differentiate(i)).collect()
    }

    /// Substitute each variable by the expression `subs[i]` (all of one
    /// common arity). Used to compose controllers into dynamics.
    pub fn substitute(&self, subs: &[Expression]) -> Expression {
        assert_eq!(subs.len(), self.arity, "substitution list must cover every variable");
        let arity = subs.first().map(|e| e.arity).unwrap_or(0);
        for s in subs {
            assert_eq!(s.arity, arity, "substitution expressions must share arity");
        }
        subst_node(&self.root, subs, arity)
    }

    /// True if the tree contains any of sqrt/exp/sin/cos/tanh or division.
    pub fn is_polynomial(&self) -> bool {
        node_is_polynomial(&self.root)
    }

    pub(crate) fn root(&self) -> &Arc<Node> {
        &self.root
    }

    pub(crate) fn from_root(root: Arc<Node>, arity: usize) -> Expression {
        Expression { root, arity }
    }

    /// Number of nodes in the tree (shared subtrees counted repeatedly).
    pub fn node_count(&self) -> usize {
        fn count(n: &Node) -> usize {
            match n {
                Node::Var(_) | Node::Const(_) => 1,
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                    1 + count(a) + count(b)
                }
                Node::Pow(a, _)
                | Node::Neg(a)
                | Node::Sqrt(a)
                | Node::Exp(a)
                | Node::Sin(a)
                | Node::Cos(a)
                | Node::Tanh(a) => 1 + count(a),
            }
        }
        count(&self.root)
    }
}

fn node_is_polynomial(node: &Node) -> bool {
    match node {
        Node::Var(_) | Node::Const(_) => true,
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) => {
            node_is_polynomial(a) && node_is_polynomial(b)
        }
        Node::Pow(a, k) => *k >= 0 && node_is_polynomial(a),
        Node::Neg(a) => node_is_polynomial(a),
        Node::Div(..) | Node::Sqrt(_) | Node::Exp(_) | Node::Sin(_) | Node::Cos(_)
        | Node::Tanh(_) => false,
    }
}

fn eval_node(node: &Node, x: &[f64]) -> Result<f64, EvalError> {
    Ok(match node {
        Node::Var(i) => x[*i],
        Node::Const(c) => *c,
        Node::Add(a, b) => eval_node(a, x)? + eval_node(b, x)?,
        Node::Sub(a, b) => eval_node(a, x)? - eval_node(b, x)?,
        Node::Mul(a, b) => eval_node(a, x)? * eval_node(b, x)?,
        Node::Div(a, b) => {
            let d = eval_node(b, x)?;
            if d == 0.0 {
                return Err(EvalError::DivisionByZero);
            }
            eval_node(a, x)? / d
        }
        Node::Pow(a, k) => {
            let v = eval_node(a, x)?;
            if *k < 0 && v == 0.0 {
                return Err(EvalError::DivisionByZero);
            }
            v.powi(*k)
        }
        Node::Neg(a) => -eval_node(a, x)?,
        Node::Sqrt(a) => {
            let v = eval_node(a, x)?;
            if v < 0.0 {
                return Err(EvalError::SqrtNegative);
            }
            v.sqrt()
        }
        Node::Exp(a) => eval_node(a, x)?.exp(),
        Node::Sin(a) => eval_node(a, x)?.sin(),
        Node::Cos(a) => eval_node(a, x)?.cos(),
        Node::Tanh(a) => eval_node(a, x)?.tanh(),
    })
}

fn diff_node(node: &Node, i: usize, arity: usize) -> Expression {
    let wrap = |n: &Arc<Node>| Expression::from_root(n.clone(), arity);
    match node {
        Node::Var(j) => Expression::constant(if *j == i { 1.0 } else { 0.0 }, arity),
        Node::Const(_) => Expression::zero(arity),
        Node::Add(a, b) => diff_node(a, i, arity).add(&diff_node(b, i, arity)),
        Node::Sub(a, b) => diff_node(a, i, arity).sub(&diff_node(b, i, arity)),
        Node::Mul(a, b) => {
            let (ea, eb) = (wrap(a), wrap(b));
            diff_node(a, i, arity).mul(&eb).add(&ea.mul(&diff_node(b, i, arity)))
        }
        Node::Div(a, b) => {
            // (a/b)' = (a'b - ab') / b^2
            let (ea, eb) = (wrap(a), wrap(b));
            let num = diff_node(a, i, arity).mul(&eb).sub(&ea.mul(&diff_node(b, i, arity)));
            num.div(&eb.powi(2))
        }
        Node::Pow(a, k) => {
            let ea = wrap(a);
            let da = diff_node(a, i, arity);
            Expression::constant(*k as f64, arity).mul(&ea.powi(k - 1)).mul(&da)
        }
        Node::Neg(a) => diff_node(a, i, arity).neg(),
        Node::Sqrt(a) => {
            let ea = wrap(a);
            diff_node(a, i, arity).div(&Expression::constant(2.0, arity).mul(&ea.sqrt()))
        }
        Node::Exp(a) => wrap(a).exp().mul(&diff_node(a, i, arity)),
        Node::Sin(a) => wrap(a).cos().mul(&diff_node(a, i, arity)),
        Node::Cos(a) => wrap(a).sin().neg().mul(&diff_node(a, i, arity)),
        Node::Tanh(a) => {
            let t = wrap(a).tanh();
            Expression::constant(1.0, arity)
                .sub(&t.powi(2))
                .mul(&diff_node(a, i, arity))
        }
    }
}

fn subst_node(node: &Node, subs: &[Expression], arity: usize) -> Expression {
    match node {
        Node::Var(i) => subs[*i].clone(),
        Node::Const(c) => Expression::constant(*c, arity),
        Node::Add(a, b) => subst_node(a, subs, arity).add(&subst_node(b, subs, arity)),
        Node::Sub(a, b) => subst_node(a, subs, arity).sub(&subst_node(b, subs, arity)),
        Node::Mul(a, b) => subst_node(a, subs, arity).mul(&subst_node(b, subs, arity)),
        Node::Div(a, b) => subst_node(a, subs, arity).div(&subst_node(b, subs, arity)),
        Node::Pow(a, k) => subst_node(a, subs, arity).powi(*k),
        Node::Neg(a) => subst_node(a, subs, arity).neg(),
        Node::Sqrt(a) => subst_node(a, subs, arity).sqrt(),
        Node::Exp(a) => subst_node(a, subs, arity).exp(),
        Node::Sin(a) => subst_node(a, subs, arity).sin(),
        Node::Cos(a) => subst_node(a, subs, arity).cos(),
        Node::Tanh(a) => subst_node(a, subs, arity).tanh(),
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn fmt_node(n: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            match n {
                Node::Var(i) => write!(f, "x{}", i + 1),
                Node::Const(c) => write!(f, "{c}"),
                Node::Add(a, b) => {
                    write!(f, "(")?;
                    fmt_node(a, f)?;
                    write!(f, " + ")?;
                    fmt_node(b, f)?;
                    write!(f, ")")
                }
                Node::Sub(a, b) => {
                    write!(f, "(")?;
                    fmt_node(a, f)?;
                    write!(f, " - ")?;
                    fmt_node(b, f)?;
                    write!(f, ")")
                }
                Node::Mul(a, b) => {
                    write!(f, "(")?;
                    fmt_node(a, f)?;
                    write!(f, "*")?;
                    fmt_node(b, f)?;
                    write!(f, ")")
                }
                Node::Div(a, b) => {
                    write!(f, "(")?;
                    fmt_node(a, f)?;
                    write!(f, "/")?;
                    fmt_node(b, f)?;
                    write!(f, ")")
                }
                Node::Pow(a, k) => {
                    fmt_node(a, f)?;
                    write!(f, "^{k}")
                }
                Node::Neg(a) => {
                    write!(f, "-")?;
                    fmt_node(a, f)
                }
                Node::Sqrt(a) | Node::Exp(a) | Node::Sin(a) | Node::Cos(a) | Node::Tanh(a) => {
                    let name = match n {
                        Node::Sqrt(_) => "sqrt",
                        Node::Exp(_) => "exp",
                        Node::Sin(_) => "sin",
                        Node::Cos(_) => "cos",
                        _ => "tanh",
                    };
                    write!(f, "{name}(")?;
                    fmt_node(a, f)?;
                    write!(f, ")")
                }
            }
        }
        fmt_node(&self.root, f)
    }
}
