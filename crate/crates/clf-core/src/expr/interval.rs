//! Closed-interval arithmetic with outward rounding, and axis-aligned boxes.
//!
//! Every elementary operation widens its result by one ULP per endpoint
//! (two for the transcendental functions, whose libm implementations are
//! accurate to about one ULP but not correctly rounded). This keeps the
//! fundamental enclosure property: for all x in a box, the exact real value
//! of the expression at x lies inside the evaluated interval.

use super::{IntervalError, Node};
use serde::{Deserialize, Serialize};

/// A closed interval `[lo, hi]` with `lo <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

#[inline]
fn down(x: f64) -> f64 {
    if x.is_nan() {
        x
    } else {
        x.next_down()
    }
}

#[inline]
fn up(x: f64) -> f64 {
    if x.is_nan() {
        x
    } else {
        x.next_up()
    }
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "invalid interval [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        let m = 0.5 * (self.lo + self.hi);
        if m.is_finite() {
            m
        } else {
            0.5 * self.lo + 0.5 * self.hi
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval { lo: self.lo.min(other.lo), hi: self.hi.max(other.hi) }
    }

    /// Largest absolute value attained on the interval.
    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    /// Smallest absolute value attained on the interval (0 if it straddles 0).
    pub fn mig(&self) -> f64 {
        if self.lo <= 0.0 && 0.0 <= self.hi {
            0.0
        } else {
            self.lo.abs().min(self.hi.abs())
        }
    }

    pub fn add(&self, o: &Interval) -> Interval {
        Interval { lo: down(self.lo + o.lo), hi: up(self.hi + o.hi) }
    }

    pub fn sub(&self, o: &Interval) -> Interval {
        Interval { lo: down(self.lo - o.hi), hi: up(self.hi - o.lo) }
    }

    pub fn neg(&self) -> Interval {
        Interval { lo: -self.hi, hi: -self.lo }
    }

    pub fn mul(&self, o: &Interval) -> Interval {
        let cands = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in cands {
            let c = if c.is_nan() { 0.0 } else { c }; // 0 * inf only arises from 0-width factors
            lo = lo.min(c);
            hi = hi.max(c);
        }
        Interval { lo: down(lo), hi: up(hi) }
    }

    pub fn div(&self, o: &Interval) -> Result<Interval, IntervalError> {
        if o.lo <= 0.0 && 0.0 <= o.hi {
            return Err(IntervalError::DivisionByZero);
        }
        let cands = [self.lo / o.lo, self.lo / o.hi, self.hi / o.lo, self.hi / o.hi];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in cands {
            lo = lo.min(c);
            hi = hi.max(c);
        }
        Ok(Interval { lo: down(lo), hi: up(hi) })
    }

    pub fn scale(&self, c: f64) -> Interval {
        self.mul(&Interval::point(c))
    }

    /// Tight even/odd integer power. Even powers use the `|x|` form so that
    /// e.g. `[-1,2]^2 = [0,4]`.
    pub fn powi(&self, k: i32) -> Result<Interval, IntervalError> {
        if k == 0 {
            return Ok(Interval::point(1.0));
        }
        if k < 0 {
            return self.powi(-k)?.recip();
        }
        let k_u = k as u32;
        if k_u % 2 == 0 {
            let m_lo = self.mig();
            let m_hi = self.mag();
            Ok(Interval { lo: down(pow_u(m_lo, k_u)), hi: up(pow_u(m_hi, k_u)) })
        } else {
            Ok(Interval { lo: down(pow_u(self.lo, k_u)), hi: up(pow_u(self.hi, k_u)) })
        }
    }

    pub fn recip(&self) -> Result<Interval, IntervalError> {
        Interval::point(1.0).div(self)
    }

    pub fn sqrt(&self) -> Result<Interval, IntervalError> {
        if self.lo < 0.0 {
            return Err(IntervalError::SqrtNegative);
        }
        Ok(Interval { lo: down(self.lo.sqrt()).max(0.0), hi: up(self.hi.sqrt()) })
    }

    pub fn exp(&self) -> Interval {
        Interval { lo: down(down(self.lo.exp())).max(0.0), hi: up(up(self.hi.exp())) }
    }

    pub fn tanh(&self) -> Interval {
        Interval {
            lo: down(down(self.lo.tanh())).max(-1.0),
            hi: up(up(self.hi.tanh())).min(1.0),
        }
    }

    pub fn sin(&self) -> Interval {
        if self.width() >= 2.0 * std::f64::consts::PI {
            return Interval { lo: -1.0, hi: 1.0 };
        }
        let lo_s = down(down(self.lo.sin()));
        let hi_s = up(up(self.hi.sin()));
        let mut lo = lo_s.min(down(down(self.hi.sin())));
        let mut hi = hi_s.max(up(up(self.lo.sin())));
        // Interior extrema of sin at pi/2 + 2k*pi (max) and 3pi/2 + 2k*pi (min).
        if contains_critical(self.lo, self.hi, std::f64::consts::FRAC_PI_2) {
            hi = 1.0;
        }
        if contains_critical(self.lo, self.hi, -std::f64::consts::FRAC_PI_2) {
            lo = -1.0;
        }
        Interval { lo: lo.max(-1.0), hi: hi.min(1.0) }
    }

    pub fn cos(&self) -> Interval {
        if self.width() >= 2.0 * std::f64::consts::PI {
            return Interval { lo: -1.0, hi: 1.0 };
        }
        let mut lo = down(down(self.lo.cos())).min(down(down(self.hi.cos())));
        let mut hi = up(up(self.lo.cos())).max(up(up(self.hi.cos())));
        if contains_critical(self.lo, self.hi, 0.0) {
            hi = 1.0;
        }
        if contains_critical(self.lo, self.hi, std::f64::consts::PI) {
            lo = -1.0;
        }
        Interval { lo: lo.max(-1.0), hi: hi.min(1.0) }
    }
}

fn pow_u(base: f64, k: u32) -> f64 {
    base.powi(k as i32)
}

/// Does `[lo, hi]` contain a point `phase + 2k*pi` for some integer k?
/// Widened by a small slack so that argument-reduction error in the test
/// can only add extrema, never miss one.
fn contains_critical(lo: f64, hi: f64, phase: f64) -> bool {
    let two_pi = 2.0 * std::f64::consts::PI;
    let slack = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
    let k_min = ((lo - phase - slack) / two_pi).floor();
    let k_max = ((hi - phase + slack) / two_pi).ceil();
    let mut k = k_min;
    while k <= k_max {
        let crit = phase + k * two_pi;
        if crit >= lo - slack && crit <= hi + slack {
            return true;
        }
        k += 1.0;
    }
    false
}

/// An axis-aligned box: one closed interval per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    dims: Vec<Interval>,
}

impl BoxDomain {
    pub fn new(dims: Vec<Interval>) -> Self {
        assert!(!dims.is_empty(), "box must have at least one dimension");
        for d in &dims {
            assert!(d.lo.is_finite() && d.hi.is_finite(), "box endpoints must be finite");
        }
        BoxDomain { dims }
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Self {
        Self::new(bounds.iter().map(|&(lo, hi)| Interval::new(lo, hi)).collect())
    }

    /// The symmetric cube `[-r, r]^n`.
    pub fn centered_cube(r: f64, n: usize) -> Self {
        Self::new(vec![Interval::new(-r, r); n])
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn interval(&self, i: usize) -> &Interval {
        &self.dims[i]
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.dims
    }

    /// Maximum edge width.
    pub fn width(&self) -> f64 {
        self.dims.iter().map(|d| d.width()).fold(0.0, f64::max)
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.midpoint()).collect()
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.dims.iter().zip(x).all(|(d, &v)| d.contains(v))
    }

    pub fn contains_box(&self, other: &BoxDomain) -> bool {
        self.dim() == other.dim()
            && self.dims.iter().zip(&other.dims).all(|(a, b)| a.contains_interval(b))
    }

    pub fn widest_dim(&self) -> usize {
        let mut best = 0;
        let mut w = self.dims[0].width();
        for (i, d) in self.dims.iter().enumerate().skip(1) {
            if d.width() > w {
                w = d.width();
                best = i;
            }
        }
        best
    }

    /// Bisect along the widest edge. Both halves are strictly narrower than
    /// the parent along that edge for non-degenerate boxes.
    pub fn split(&self) -> (BoxDomain, BoxDomain) {
        let i = self.widest_dim();
        let d = self.dims[i];
        let mid = d.midpoint();
        let mut left = self.clone();
        let mut right = self.clone();
        left.dims[i] = Interval::new(d.lo, mid);
        right.dims[i] = Interval::new(mid, d.hi);
        (left, right)
    }

    /// Uniform sample, one value per dimension.
    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| {
                if d.width() == 0.0 {
                    d.lo
                } else {
                    rng.gen_range(d.lo..d.hi)
                }
            })
            .collect()
    }

    /// The 2n faces of the box, each a box with one degenerate dimension.
    pub fn faces(&self) -> Vec<BoxDomain> {
        let mut out = Vec::with_capacity(2 * self.dim());
        for i in 0..self.dim() {
            for endpoint in [self.dims[i].lo, self.dims[i].hi] {
                let mut face = self.clone();
                face.dims[i] = Interval::point(endpoint);
                out.push(face);
            }
        }
        out
    }

    /// `max(|lo_i|, |hi_i|)` per dimension, squared and summed: an upper
    /// bound for `||x||^2` over the box.
    pub fn norm_sq_upper(&self) -> f64 {
        self.dims.iter().map(|d| up(d.mag() * d.mag())).fold(0.0, |a, b| up(a + b))
    }

    /// A lower bound for `||x||^2` over the box.
    pub fn norm_sq_lower(&self) -> f64 {
        self.dims
            .iter()
            .map(|d| down(d.mig() * d.mig()))
            .fold(0.0, |a, b| down(a + b))
            .max(0.0)
    }
}

pub(super) fn eval_node_interval(node: &Node, domain: &BoxDomain) -> Result<Interval, IntervalError> {
    Ok(match node {
        Node::Var(i) => *domain.interval(*i),
        Node::Const(c) => Interval::point(*c),
        Node::Add(a, b) => eval_node_interval(a, domain)?.add(&eval_node_interval(b, domain)?),
        Node::Sub(a, b) => eval_node_interval(a, domain)?.sub(&eval_node_interval(b, domain)?),
        Node::Mul(a, b) => eval_node_interval(a, domain)?.mul(&eval_node_interval(b, domain)?),
        Node::Div(a, b) => {
            eval_node_interval(a, domain)?.div(&eval_node_interval(b, domain)?)?
        }
        Node::Pow(a, k) => eval_node_interval(a, domain)?.powi(*k)?,
        Node::Neg(a) => eval_node_interval(a, domain)?.neg(),
        Node::Sqrt(a) => eval_node_interval(a, domain)?.sqrt()?,
        Node::Exp(a) => eval_node_interval(a, domain)?.exp(),
        Node::Sin(a) => eval_node_interval(a, domain)?.sin(),
        Node::Cos(a) => eval_node_interval(a, domain)?.cos(),
        Node::Tanh(a) => eval_node_interval(a, domain)?.tanh(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expression;

    #[test]
    fn even_power_is_tight() {
        let e = Expression::parse("x1^2", 1).unwrap();
        let b = BoxDomain::from_bounds(&[(-1.0, 2.0)]);
        let iv = e.eval_interval(&b).unwrap();
        assert!(iv.lo <= 0.0 && iv.lo >= -1e-300);
        assert!((iv.hi - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sin_over_half_period() {
        let e = Expression::parse("sin(x1)", 1).unwrap();
        let b = BoxDomain::from_bounds(&[(0.0, std::f64::consts::PI)]);
        let iv = e.eval_interval(&b).unwrap();
        assert!(iv.contains(0.0) && iv.contains(1.0), "{iv:?}");
        assert!(iv.lo >= -1e-12 && iv.hi <= 1.0 + 1e-12);
    }

    #[test]
    fn product_encloses_true_range() {
        // x*(1-x) over [0,1] has true range [0, 0.25]; the natural extension
        // must contain it.
        let e = Expression::parse("x1*(1 - x1)", 1).unwrap();
        let b = BoxDomain::from_bounds(&[(0.0, 1.0)]);
        let iv = e.eval_interval(&b).unwrap();
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let v = e.eval(&[x]).unwrap();
            assert!(iv.contains(v), "{v} not in {iv:?}");
        }
        assert!(iv.contains_interval(&Interval::new(0.0, 0.25)));
    }

    #[test]
    fn division_by_straddling_interval_errors() {
        let e = Expression::parse("1/x1", 1).unwrap();
        let b = BoxDomain::from_bounds(&[(-1.0, 1.0)]);
        assert_eq!(e.eval_interval(&b).unwrap_err(), IntervalError::DivisionByZero);
        let b2 = BoxDomain::from_bounds(&[(0.5, 1.0)]);
        let iv = e.eval_interval(&b2).unwrap();
        assert!(iv.contains(1.0) && iv.contains(2.0));
    }

    #[test]
    fn split_reduces_width() {
        let b = BoxDomain::from_bounds(&[(-1.0, 1.0), (0.0, 4.0)]);
        let (l, r) = b.split();
        assert!(l.width() < b.width());
        assert!(r.width() < b.width());
        assert_eq!(l.interval(1).hi, 2.0);
        assert_eq!(r.interval(1).lo, 2.0);
    }

    #[test]
    fn inclusion_monotonicity_spot() {
        let e = Expression::parse("sin(x1)*exp(x2) - x1/x2", 2).unwrap();
        let outer = BoxDomain::from_bounds(&[(-1.0, 1.0), (1.0, 3.0)]);
        let inner = BoxDomain::from_bounds(&[(-0.5, 0.25), (1.5, 2.0)]);
        let oi = e.eval_interval(&outer).unwrap();
        let ii = e.eval_interval(&inner).unwrap();
        assert!(oi.contains_interval(&ii), "{oi:?} does not contain {ii:?}");
    }
}
