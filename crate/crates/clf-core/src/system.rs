//! Control-affine system models `xdot = f(x) + g(x) u`, their linearization,
//! closed-loop composition, and the built-in benchmark registry.

use crate::expr::{BoxDomain, Expression};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error("f(0) must vanish: component {index} evaluates to {value} at the origin")]
    OriginNotEquilibrium { index: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("expression error: {0}")]
    Expr(String),
    #[error("unknown benchmark '{0}'")]
    UnknownBenchmark(String),
}

/// A control-affine system: drift `f` (n expressions in x), input matrix `g`
/// (n rows by k columns of expressions in x), and a bounded verification
/// domain.
#[derive(Debug, Clone)]
pub struct ControlAffineSystem {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub f: Vec<Expression>,
    /// Row-major: `g[i][j]` multiplies input `u_j` in state equation `i`.
    pub g: Vec<Vec<Expression>>,
    pub domain: BoxDomain,
}

impl ControlAffineSystem {
    pub fn new(
        name: impl Into<String>,
        f: Vec<Expression>,
        g: Vec<Vec<Expression>>,
        domain: BoxDomain,
    ) -> Result<Self, SystemError> {
        let n = f.len();
        if n == 0 {
            return Err(SystemError::Dimension("empty drift field".into()));
        }
        if g.len() != n {
            return Err(SystemError::Dimension(format!(
                "g has {} rows, expected {n}",
                g.len()
            )));
        }
        let k = g[0].len();
        if g.iter().any(|row| row.len() != k) {
            return Err(SystemError::Dimension("ragged g matrix".into()));
        }
        if domain.dim() != n {
            return Err(SystemError::Dimension(format!(
                "domain has {} dimensions, expected {n}",
                domain.dim()
            )));
        }
        for e in f.iter().chain(g.iter().flatten()) {
            if e.arity() != n {
                return Err(SystemError::Dimension(
                    "all system expressions must have arity n".into(),
                ));
            }
        }
        let origin = vec![0.0; n];
        for (i, fi) in f.iter().enumerate() {
            let v = fi
                .eval(&origin)
                .map_err(|e| SystemError::Expr(e.to_string()))?;
            if v.abs() > 1e-12 {
                return Err(SystemError::OriginNotEquilibrium { index: i, value: v });
            }
        }
        Ok(ControlAffineSystem { name: name.into(), n, k, f, g, domain })
    }

    /// Jacobian of `f` at the origin and `g(0)`.
    pub fn linearize(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), SystemError> {
        let origin = vec![0.0; self.n];
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                a[(i, j)] = self.f[i]
                    .differentiate(j)
                    .eval(&origin)
                    .map_err(|e| SystemError::Expr(e.to_string()))?;
            }
        }
        let mut b = DMatrix::zeros(self.n, self.k);
        for i in 0..self.n {
            for j in 0..self.k {
                b[(i, j)] = self.g[i][j]
                    .eval(&origin)
                    .map_err(|e| SystemError::Expr(e.to_string()))?;
            }
        }
        Ok((a, b))
    }

    /// Compose a state feedback `u = controller(x)` into an autonomous field
    /// `f + g * controller`.
    pub fn closed_loop(&self, controller: &[Expression]) -> Result<Vec<Expression>, SystemError> {
        if controller.len() != self.k {
            return Err(SystemError::Dimension(format!(
                "controller has {} components, expected {}",
                controller.len(),
                self.k
            )));
        }
        for c in controller {
            if c.arity() != self.n {
                return Err(SystemError::Dimension("controller arity must be n".into()));
            }
        }
        Ok((0..self.n)
            .map(|i| {
                let mut acc = self.f[i].clone();
                for j in 0..self.k {
                    acc = acc.add(&self.g[i][j].mul(&controller[j]));
                }
                acc
            })
            .collect())
    }

    /// The linear feedback `u = K x` as expressions.
    pub fn linear_feedback(&self, k_gain: &DMatrix<f64>) -> Vec<Expression> {
        assert_eq!(k_gain.nrows(), self.k);
        assert_eq!(k_gain.ncols(), self.n);
        (0..self.k)
            .map(|j| {
                let mut acc = Expression::zero(self.n);
                for i in 0..self.n {
                    let c = k_gain[(j, i)];
                    if c != 0.0 {
                        acc = acc.add(
                            &Expression::constant(c, self.n).mul(&Expression::var(i, self.n)),
                        );
                    }
                }
                acc
            })
            .collect()
    }

    pub fn eval_f(&self, x: &[f64]) -> Result<DVector<f64>, SystemError> {
        let mut out = DVector::zeros(self.n);
        for i in 0..self.n {
            out[i] = self.f[i].eval(x).map_err(|e| SystemError::Expr(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn eval_g(&self, x: &[f64]) -> Result<DMatrix<f64>, SystemError> {
        let mut out = DMatrix::zeros(self.n, self.k);
        for i in 0..self.n {
            for j in 0..self.k {
                out[(i, j)] =
                    self.g[i][j].eval(x).map_err(|e| SystemError::Expr(e.to_string()))?;
            }
        }
        Ok(out)
    }
}

/// Running-cost specification `q(x) + u' R(x) u` plus the constant `Q`
/// weight used for the linearization.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub q: Expression,
    /// k-by-k symmetric expression matrix.
    pub r: Vec<Vec<Expression>>,
    /// Constant state weight for the Riccati equation.
    pub q_lin: DMatrix<f64>,
}

impl CostSpec {
    /// `q(x) = x'x`, `R = I`, `Q = I` — the paper-wide default.
    pub fn identity(n: usize, k: usize) -> Self {
        let mut q = Expression::zero(n);
        for i in 0..n {
            q = q.add(&Expression::var(i, n).powi(2));
        }
        let r = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| Expression::constant(if i == j { 1.0 } else { 0.0 }, n))
                    .collect()
            })
            .collect();
        CostSpec { q, r, q_lin: DMatrix::identity(n, n) }
    }

    pub fn eval_r(&self, x: &[f64]) -> Result<DMatrix<f64>, SystemError> {
        let k = self.r.len();
        let mut out = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                out[(i, j)] =
                    self.r[i][j].eval(x).map_err(|e| SystemError::Expr(e.to_string()))?;
            }
        }
        Ok(out)
    }

    /// True when `R` is a constant diagonal matrix; returns its diagonal.
    pub fn constant_diagonal_r(&self) -> Option<Vec<f64>> {
        let k = self.r.len();
        let mut diag = Vec::with_capacity(k);
        for i in 0..k {
            for j in 0..k {
                let c = self.r[i][j].as_constant()?;
                if i == j {
                    diag.push(c);
                } else if c != 0.0 {
                    return None;
                }
            }
        }
        Some(diag)
    }
}

/// JSON schema for user-supplied systems.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n: usize,
    pub k: usize,
    pub f: Vec<String>,
    pub g: Vec<Vec<String>>,
    pub domain: Vec<[f64; 2]>,
    pub q: String,
    #[serde(rename = "R")]
    pub r: Vec<Vec<String>>,
    #[serde(rename = "Q", default)]
    pub q_lin: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub name: Option<String>,
}

impl SystemConfig {
    pub fn build(&self) -> Result<(ControlAffineSystem, CostSpec), SystemError> {
        let parse = |s: &str| {
            Expression::parse(s, self.n).map_err(|e| SystemError::Expr(format!("'{s}': {e}")))
        };
        let f = self.f.iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>()?;
        let g = self
            .g
            .iter()
            .map(|row| row.iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let domain =
            BoxDomain::from_bounds(&self.domain.iter().map(|b| (b[0], b[1])).collect::<Vec<_>>());
        let sys = ControlAffineSystem::new(
            self.name.clone().unwrap_or_else(|| "custom".into()),
            f,
            g,
            domain,
        )?;
        if sys.k != self.k {
            return Err(SystemError::Dimension(format!(
                "declared k={} but g has {} columns",
                self.k, sys.k
            )));
        }
        let q = parse(&self.q)?;
        let r = self
            .r
            .iter()
            .map(|row| row.iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        let q_lin = match &self.q_lin {
            Some(rows) => {
                let n = self.n;
                let mut m = DMatrix::zeros(n, n);
                for (i, row) in rows.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        m[(i, j)] = v;
                    }
                }
                m
            }
            None => DMatrix::identity(self.n, self.n),
        };
        Ok((sys, CostSpec { q, r, q_lin }))
    }
}

/// Benchmark registry.
///
/// `mass_spring_chain(N)` is a reconstruction: the source material prints
/// only the two-mass instance, so for N masses we attach mass 1 to the wall
/// through the stiffening spring `x + 0.1 x^3`, couple adjacent masses with a
/// unit linear spring and a damper of coefficient -0.1 (signs as in the
/// two-mass display), and drive mass 1. See the README for the equations.
pub fn get_benchmark(name: &str) -> Result<(ControlAffineSystem, CostSpec), SystemError> {
    let trimmed = name.trim();
    if let Some(n_masses) = parse_chain_name(trimmed) {
        return mass_spring_chain(n_masses);
    }
    match trimmed {
        "vdp_input" => {
            let f = vec![
                Expression::parse("x2", 2).unwrap(),
                Expression::parse("-x1 + x2*(1 - x1^2)", 2).unwrap(),
            ];
            let g = vec![
                vec![Expression::zero(2)],
                vec![Expression::constant(1.0, 2)],
            ];
            let sys = ControlAffineSystem::new(
                "vdp_input",
                f,
                g,
                BoxDomain::from_bounds(&[(-10.0, 10.0), (-10.0, 10.0)]),
            )?;
            Ok((sys, CostSpec::identity(2, 1)))
        }
        "mass_spring_4d" => mass_spring_chain(2).map(|(mut sys, cost)| {
            sys.name = "mass_spring_4d".into();
            (sys, cost)
        }),
        "pendulum" => {
            // g_c = 9.81, b = 0.1, l = 0.5, m = 0.15
            let f = vec![
                Expression::parse("x2", 2).unwrap(),
                Expression::parse("(9.81/0.5)*sin(x1) - (0.1/(0.15*0.5^2))*x2", 2).unwrap(),
            ];
            let g = vec![
                vec![Expression::zero(2)],
                vec![Expression::parse("1/(0.15*0.5^2)", 2).unwrap()],
            ];
            let sys = ControlAffineSystem::new(
                "pendulum",
                f,
                g,
                BoxDomain::from_bounds(&[(-10.0, 10.0), (-10.0, 10.0)]),
            )?;
            Ok((sys, CostSpec::identity(2, 1)))
        }
        "reversed_vdp" => {
            // xdot1 = -x2, xdot2 = x1 + (1+u)(x1^2-1)x2
            let f = vec![
                Expression::parse("-x2", 2).unwrap(),
                Expression::parse("x1 + (x1^2 - 1)*x2", 2).unwrap(),
            ];
            let g = vec![
                vec![Expression::zero(2)],
                vec![Expression::parse("(x1^2 - 1)*x2", 2).unwrap()],
            ];
            let sys = ControlAffineSystem::new(
                "reversed_vdp",
                f,
                g,
                BoxDomain::from_bounds(&[(-8.0, 8.0), (-8.0, 8.0)]),
            )?;
            Ok((sys, CostSpec::identity(2, 1)))
        }
        other => Err(SystemError::UnknownBenchmark(other.into())),
    }
}

/// The domain PMP data is generated on, where it differs from the
/// verification domain.
pub fn default_data_domain(name: &str) -> Option<BoxDomain> {
    (name == "reversed_vdp").then(|| BoxDomain::from_bounds(&[(-4.0, 4.0), (-4.0, 4.0)]))
}

fn parse_chain_name(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("mass_spring_chain")?;
    let inner = rest
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .or_else(|| rest.strip_prefix('_'))?;
    inner.parse().ok()
}

fn mass_spring_chain(n_masses: usize) -> Result<(ControlAffineSystem, CostSpec), SystemError> {
    if n_masses == 0 {
        return Err(SystemError::Dimension("chain needs at least one mass".into()));
    }
    let n = 2 * n_masses;
    let pos = |i: usize| Expression::var(2 * i, n); // mass i position
    let vel = |i: usize| Expression::var(2 * i + 1, n); // mass i velocity
    let c_damp = Expression::constant(0.1, n);
    let mut f = Vec::with_capacity(n);
    for i in 0..n_masses {
        f.push(vel(i));
        let mut acc = Expression::zero(n);
        if i == 0 {
            // wall spring with cubic stiffening
            let cubic = pos(0).add(&Expression::constant(0.1, n).mul(&pos(0).powi(3)));
            acc = acc.sub(&cubic);
        } else {
            // left neighbor: spring -(p_i - p_{i-1}), damper +0.1 (v_i - v_{i-1})
            acc = acc.sub(&pos(i).sub(&pos(i - 1)));
            acc = acc.add(&c_damp.mul(&vel(i).sub(&vel(i - 1))));
        }
        if i + 1 < n_masses {
            // right neighbor: spring +(p_{i+1} - p_i), damper -0.1 (v_{i+1} - v_i)
            acc = acc.add(&pos(i + 1).sub(&pos(i)));
            acc = acc.sub(&c_damp.mul(&vel(i + 1).sub(&vel(i))));
        }
        f.push(acc);
    }
    let mut g = vec![vec![Expression::zero(n)]; n];
    g[1][0] = Expression::constant(1.0, n);
    let sys = ControlAffineSystem::new(
        format!("mass_spring_chain({n_masses})"),
        f,
        g,
        BoxDomain::from_bounds(&vec![(-10.0, 10.0); n]),
    )?;
    Ok((sys, CostSpec::identity(n, 1)))
}

pub const BENCHMARK_NAMES: &[&str] = &[
    "vdp_input",
    "mass_spring_4d",
    "mass_spring_chain(N)",
    "pendulum",
    "reversed_vdp",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn all_instances() -> Vec<(ControlAffineSystem, CostSpec)> {
        ["vdp_input", "mass_spring_4d", "mass_spring_chain(6)", "pendulum", "reversed_vdp"]
            .iter()
            .map(|n| get_benchmark(n).unwrap())
            .collect()
    }

    #[test]
    fn origin_is_equilibrium_for_all_benchmarks() {
        for (sys, _) in all_instances() {
            let origin = vec![0.0; sys.n];
            for fi in &sys.f {
                assert!(fi.eval(&origin).unwrap().abs() <= 1e-12, "{}", sys.name);
            }
        }
    }

    #[test]
    fn vdp_linearization() {
        let (sys, _) = get_benchmark("vdp_input").unwrap();
        let (a, b) = sys.linearize().unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 1.0]));
        assert_eq!(b, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
    }

    #[test]
    fn pendulum_linearization() {
        let (sys, _) = get_benchmark("pendulum").unwrap();
        let (a, b) = sys.linearize().unwrap();
        assert!((a[(1, 0)] - 19.62).abs() < 1e-12);
        assert!((a[(1, 1)] + 0.1 / (0.15 * 0.25)).abs() < 1e-12);
        assert!((b[(1, 0)] - 1.0 / (0.15 * 0.25)).abs() < 1e-12);
        assert_eq!(a[(0, 0)], 0.0);
        assert_eq!(a[(0, 1)], 1.0);
    }

    #[test]
    fn linear_system_linearizes_to_itself() {
        let f = vec![
            Expression::parse("-2*x1 + 0.5*x2", 2).unwrap(),
            Expression::parse("x1 - 3*x2", 2).unwrap(),
        ];
        let g = vec![
            vec![Expression::constant(1.0, 2)],
            vec![Expression::constant(-1.0, 2)],
        ];
        let sys = ControlAffineSystem::new(
            "linear",
            f,
            g,
            BoxDomain::from_bounds(&[(-1.0, 1.0), (-1.0, 1.0)]),
        )
        .unwrap();
        let (a, b) = sys.linearize().unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[-2.0, 0.5, 1.0, -3.0]));
        assert_eq!(b, DMatrix::from_row_slice(2, 1, &[1.0, -1.0]));
    }

    #[test]
    fn closed_loop_with_zero_controller_is_drift() {
        let (sys, _) = get_benchmark("vdp_input").unwrap();
        let cl = sys.closed_loop(&[Expression::zero(2)]).unwrap();
        assert_eq!(cl, sys.f);
    }

    #[test]
    fn closed_loop_vdp_damping() {
        let (sys, _) = get_benchmark("vdp_input").unwrap();
        let u = vec![Expression::parse("-x2", 2).unwrap()];
        let cl = sys.closed_loop(&u).unwrap();
        // second component: -x1 + x2(1-x1^2) - x2
        let expect = Expression::parse("-x1 + x2*(1 - x1^2)", 2)
            .unwrap()
            .add(&Expression::parse("-x2", 2).unwrap());
        for pt in [[0.7, -0.3], [1.5, 2.0]] {
            assert_eq!(cl[1].eval(&pt).unwrap(), expect.eval(&pt).unwrap());
        }
    }

    #[test]
    fn closed_loop_linear_feedback_matches_matrix() {
        let f = vec![
            Expression::parse("x2", 2).unwrap(),
            Expression::parse("-x1", 2).unwrap(),
        ];
        let g = vec![
            vec![Expression::zero(2)],
            vec![Expression::constant(1.0, 2)],
        ];
        let sys = ControlAffineSystem::new(
            "lin",
            f,
            g,
            BoxDomain::from_bounds(&[(-1.0, 1.0), (-1.0, 1.0)]),
        )
        .unwrap();
        let k = DMatrix::from_row_slice(1, 2, &[-2.0, -3.0]);
        let cl = sys.closed_loop(&sys.linear_feedback(&k)).unwrap();
        // field must equal (A + B K) x
        let acl = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -3.0, -3.0]);
        for pt in [[0.25, -1.0], [0.8, 0.6]] {
            let x = DVector::from_column_slice(&pt);
            let want = &acl * &x;
            for i in 0..2 {
                assert!((cl[i].eval(&pt).unwrap() - want[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reversed_vdp_registry_matches_paper_form() {
        let (sys, _) = get_benchmark("reversed_vdp").unwrap();
        // g vanishes on x1 = +-1 and x2 = 0
        for pt in [[1.0, 3.0], [-1.0, -2.0], [0.5, 0.0]] {
            assert_eq!(sys.g[1][0].eval(&pt).unwrap(), 0.0);
        }
        assert_eq!(sys.g[0][0].eval(&[2.0, 2.0]).unwrap(), 0.0);
        // full dynamics at u: xdot2 = x1 + (1+u)(x1^2-1)x2
        let x = [2.0, -1.5];
        let u = 0.7;
        let f2 = sys.f[1].eval(&x).unwrap();
        let g2 = sys.g[1][0].eval(&x).unwrap();
        let expect = x[0] + (1.0 + u) * (x[0] * x[0] - 1.0) * x[1];
        assert!((f2 + g2 * u - expect).abs() < 1e-12);
    }

    #[test]
    fn mass_spring_4d_matches_display() {
        let (sys, _) = get_benchmark("mass_spring_4d").unwrap();
        assert_eq!(sys.n, 4);
        let x = [0.3, -0.2, 0.8, 0.5];
        let f = sys.eval_f(&x).unwrap();
        assert!((f[0] - x[1]).abs() < 1e-14);
        let f2 = -(x[0] + 0.1 * x[0].powi(3)) + (x[2] - x[0]) - 0.1 * (x[3] - x[1]);
        assert!((f[1] - f2).abs() < 1e-14);
        assert!((f[2] - x[3]).abs() < 1e-14);
        let f4 = -(x[2] - x[0]) + 0.1 * (x[3] - x[1]);
        assert!((f[3] - f4).abs() < 1e-14);
    }

    #[test]
    fn chain_of_six_is_twelve_dimensional() {
        let (sys, cost) = get_benchmark("mass_spring_chain(6)").unwrap();
        assert_eq!(sys.n, 12);
        assert_eq!(sys.k, 1);
        assert_eq!(cost.q_lin, DMatrix::identity(12, 12));
    }

    #[test]
    fn unknown_benchmark_errors() {
        assert!(matches!(
            get_benchmark("lorenz"),
            Err(SystemError::UnknownBenchmark(_))
        ));
    }

    #[test]
    fn config_round_trip() {
        let cfg = SystemConfig {
            n: 2,
            k: 1,
            f: vec!["x2".into(), "-x1 + x2*(1 - x1^2)".into()],
            g: vec![vec!["0".into()], vec!["1".into()]],
            domain: vec![[-10.0, 10.0], [-10.0, 10.0]],
            q: "x1^2 + x2^2".into(),
            r: vec![vec!["1".into()]],
            q_lin: None,
            name: Some("custom_vdp".into()),
        };
        let (sys, cost) = cfg.build().unwrap();
        assert_eq!(sys.n, 2);
        assert_eq!(cost.constant_diagonal_r(), Some(vec![1.0]));
        let text = serde_json::to_string(&cfg).unwrap();
        let back: SystemConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.f, cfg.f);
    }
}
