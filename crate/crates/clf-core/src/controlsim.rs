//! Controller constructions and closed-loop simulation with accumulated
//! running cost.
//!
//! Controllers: the universal (Sontag) formula over any CLF, the linear LQR
//! gain, the near-optimal HJB feedback extracted from a trained value
//! function (zero-shifted so the origin stays an equilibrium), and the
//! hybrid that switches from the neural controller to the quadratic one
//! near the origin with a hysteresis band.

use crate::expr::{BoxDomain, Expression};
use crate::pinn::ValueFunction;
use crate::pmp::TransformSpec;
use crate::riccati::QuadraticCertificate;
use crate::system::{ControlAffineSystem, CostSpec, SystemError};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("state norm exceeded {bound:.3e} at t = {t:.3}: trajectory blew up")]
    BlowUp { t: f64, bound: f64 },
    #[error("step size underflow at t = {0:.6}")]
    StepUnderflow(f64),
    #[error("system error: {0}")]
    System(String),
}

/// Zero branch of the Sontag formula: `||b||^2` at or below this threshold
/// maps to `u = 0`. Small enough that the decrease identity holds verbatim
/// whenever `||b|| > 1e-6`.
pub const SONTAG_EPS_B_SQ: f64 = 1e-13;

/// Sontag's universal formula from `a = grad V . f` and `b = grad V . g`.
pub fn sontag_control(a: f64, b: &[f64]) -> Vec<f64> {
    let b_sq: f64 = b.iter().map(|v| v * v).sum();
    if b_sq <= SONTAG_EPS_B_SQ {
        return vec![0.0; b.len()];
    }
    let scale = -(a + (a * a + b_sq * b_sq).sqrt()) / b_sq;
    b.iter().map(|&bj| scale * bj).collect()
}

/// A state-feedback controller.
pub enum Controller<'a> {
    /// Sontag's formula over a CLF given by value-and-gradient callbacks.
    Sontag { grad_v: Box<dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a> },
    /// `u = K x`.
    Lqr { gain: DMatrix<f64> },
    /// The HJB feedback from a trained value function.
    NeuralHjb(NeuralHjbController<'a>),
    /// Neural feedback outside, quadratic-CLF Sontag inside, with a
    /// hysteresis band on the switch level.
    Hybrid(Box<HybridController<'a>>),
}

/// `k(x) = -R^-1 g' grad W' / (2 (1-W) psi(W))`, clamped and zero-shifted.
pub struct NeuralHjbController<'a> {
    pub value: &'a dyn ValueFunction,
    pub transform: TransformSpec,
    /// Constant diagonal of R.
    pub r_diag: Vec<f64>,
    /// `k_N(0)`, subtracted when zero-shift is enabled.
    pub shift: Vec<f64>,
}

/// `1 - W` is floored here before dividing; the controller is certified
/// only inside `{W <= c2}` with `c2 < 1` and the clamp keeps the formula
/// finite outside.
pub const HJB_ONE_MINUS_W_FLOOR: f64 = 1e-6;

impl<'a> NeuralHjbController<'a> {
    pub fn new(
        sys: &ControlAffineSystem,
        cost: &CostSpec,
        value: &'a dyn ValueFunction,
        transform: TransformSpec,
        zero_shift: bool,
    ) -> Result<Self, SystemError> {
        let r_diag = cost.constant_diagonal_r().ok_or_else(|| {
            SystemError::Expr("the HJB controller needs a constant diagonal R".into())
        })?;
        let mut ctrl =
            NeuralHjbController { value, transform, r_diag, shift: vec![0.0; sys.k] };
        if zero_shift {
            let origin = vec![0.0; sys.n];
            ctrl.shift = ctrl.raw_control(sys, &origin)?;
        }
        Ok(ctrl)
    }

    fn raw_control(
        &self,
        sys: &ControlAffineSystem,
        x: &[f64],
    ) -> Result<Vec<f64>, SystemError> {
        let (w, grad) = self.value.value_grad(x);
        let g = sys.eval_g(x)?;
        let one_minus_w = (1.0 - w).max(HJB_ONE_MINUS_W_FLOOR);
        let denom_base = 2.0 * one_minus_w * self.transform.psi(w);
        let mut u = vec![0.0; sys.k];
        for j in 0..sys.k {
            let mut gj_dot_grad = 0.0;
            for i in 0..sys.n {
                gj_dot_grad += g[(i, j)] * grad[i];
            }
            u[j] = -gj_dot_grad / (2.0 * self.r_diag[j] * one_minus_w * self.transform.psi(w));
            debug_assert!(denom_base > 0.0);
        }
        Ok(u)
    }

    pub fn control(
        &self,
        sys: &ControlAffineSystem,
        x: &[f64],
    ) -> Result<Vec<f64>, SystemError> {
        let mut u = self.raw_control(sys, x)?;
        for (uj, s) in u.iter_mut().zip(&self.shift) {
            *uj -= s;
        }
        Ok(u)
    }
}

pub struct HybridController<'a> {
    pub neural: NeuralHjbController<'a>,
    pub cert: QuadraticCertificate,
    /// Switch to the quadratic controller when `W <= switch_level`;
    /// switch back above `switch_level * (1 + hysteresis)`.
    pub switch_level: f64,
    pub hysteresis: f64,
    inside: std::sync::atomic::AtomicBool,
}

impl<'a> HybridController<'a> {
    pub fn new(
        neural: NeuralHjbController<'a>,
        cert: QuadraticCertificate,
        switch_level: f64,
    ) -> Self {
        HybridController {
            neural,
            cert,
            switch_level,
            hysteresis: 0.05,
            inside: std::sync::atomic::AtomicBool::new(false),
        }
    }
}

/// Evaluate a controller at a state.
pub fn control(
    ctrl: &Controller<'_>,
    sys: &ControlAffineSystem,
    x: &[f64],
) -> Result<Vec<f64>, SystemError> {
    match ctrl {
        Controller::Sontag { grad_v } => {
            let grad = grad_v(x);
            let f = sys.eval_f(x)?;
            let g = sys.eval_g(x)?;
            let a: f64 = grad.iter().zip(f.iter()).map(|(gv, fv)| gv * fv).sum();
            let mut b = vec![0.0; sys.k];
            for j in 0..sys.k {
                for i in 0..sys.n {
                    b[j] += grad[i] * g[(i, j)];
                }
            }
            Ok(sontag_control(a, &b))
        }
        Controller::Lqr { gain } => {
            let xv = DVector::from_column_slice(x);
            Ok((gain * xv).as_slice().to_vec())
        }
        Controller::NeuralHjb(c) => c.control(sys, x),
        Controller::Hybrid(h) => {
            use std::sync::atomic::Ordering;
            let (w, _) = h.neural.value.value_grad(x);
            let was_inside = h.inside.load(Ordering::Relaxed);
            let inside = if was_inside {
                w <= h.switch_level * (1.0 + h.hysteresis)
            } else {
                w <= h.switch_level
            };
            h.inside.store(inside, Ordering::Relaxed);
            if inside {
                // Sontag over the quadratic CLF
                let xv = DVector::from_column_slice(x);
                let grad = (&h.cert.p * &xv) * 2.0;
                let f = sys.eval_f(x)?;
                let g = sys.eval_g(x)?;
                let a: f64 = grad.iter().zip(f.iter()).map(|(gv, fv)| gv * fv).sum();
                let mut b = vec![0.0; sys.k];
                for j in 0..sys.k {
                    for i in 0..sys.n {
                        b[j] += grad[i] * g[(i, j)];
                    }
                }
                Ok(sontag_control(a, &b))
            } else {
                h.neural.control(sys, x)
            }
        }
    }
}

/// One dense-output sample: time, state, input, accumulated cost.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub j: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn final_state(&self) -> &TrajectoryPoint {
        self.points.last().expect("trajectory has at least the initial point")
    }

    pub fn accumulated_cost(&self) -> f64 {
        self.final_state().j
    }

    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        let n = self.points[0].x.len();
        let k = self.points[0].u.len();
        let mut header = String::from("t");
        for i in 1..=n {
            header.push_str(&format!(",x{i}"));
        }
        for j in 1..=k {
            header.push_str(&format!(",u{j}"));
        }
        header.push_str(",J");
        writeln!(w, "{header}")?;
        for p in &self.points {
            let mut row = format!("{}", p.t);
            for v in &p.x {
                row.push_str(&format!(",{v}"));
            }
            for v in &p.u {
                row.push_str(&format!(",{v}"));
            }
            row.push_str(&format!(",{}", p.j));
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub t_final: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Trajectory norm beyond which the run aborts as a blow-up.
    pub blow_up_norm: f64,
    /// Dense output spacing; interpolated on top of the adaptive steps.
    pub output_dt: f64,
}

impl SimOptions {
    pub fn new(t_final: f64) -> Self {
        SimOptions {
            t_final,
            rtol: 1e-8,
            atol: 1e-10,
            blow_up_norm: 1e6,
            output_dt: t_final / 400.0,
        }
    }
}

/// Dormand-Prince 5(4) tableau (autonomous form, so no c-row needed).
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];
/// Dense-output coefficients of the 4th-order interpolant.
const DP_D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Integrate `xdot = f + g u(x)`, `Jdot = q + u'Ru`, with an embedded
/// Dormand-Prince 5(4) pair and 4th-order dense output.
pub fn simulate(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
    ctrl: &Controller<'_>,
    x0: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    assert!(opts.t_final > 0.0, "T must be positive");
    let n = sys.n;
    let aug = n + 1; // state plus accumulated cost

    let rhs = |x: &[f64]| -> Result<(Vec<f64>, Vec<f64>), SimError> {
        let state = &x[0..n];
        let u = control(ctrl, sys, state).map_err(|e| SimError::System(e.to_string()))?;
        let f = sys.eval_f(state).map_err(|e| SimError::System(e.to_string()))?;
        let g = sys.eval_g(state).map_err(|e| SimError::System(e.to_string()))?;
        let r = cost.eval_r(state).map_err(|e| SimError::System(e.to_string()))?;
        let q = cost
            .q
            .eval(state)
            .map_err(|e| SimError::System(e.to_string()))?;
        let mut dx = vec![0.0; aug];
        for i in 0..n {
            dx[i] = f[i];
            for j in 0..sys.k {
                dx[i] += g[(i, j)] * u[j];
            }
        }
        let uv = DVector::from_column_slice(&u);
        dx[n] = q + (uv.transpose() * r * &uv)[(0, 0)];
        Ok((dx, u))
    };

    let mut t = 0.0;
    let mut y = x0.to_vec();
    y.push(0.0);
    let (mut k1, mut u_now) = rhs(&y)?;

    let mut points = Vec::new();
    points.push(TrajectoryPoint { t, x: y[0..n].to_vec(), u: u_now.clone(), j: 0.0 });
    let mut next_output = opts.output_dt;

    let mut h = (opts.t_final / 100.0).min(0.1).max(1e-6);
    let mut stages: [Vec<f64>; 7] = Default::default();

    while t < opts.t_final {
        h = h.min(opts.t_final - t);
        if h < 1e-14 {
            return Err(SimError::StepUnderflow(t));
        }
        stages[0] = k1.clone();
        let mut failed = false;
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, stage) in stages.iter().enumerate().take(s) {
                let a = DP_A[s][j];
                if a != 0.0 {
                    for i in 0..aug {
                        ys[i] += h * a * stage[i];
                    }
                }
            }
            match rhs(&ys) {
                Ok((k, _)) => stages[s] = k,
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            h *= 0.5;
            continue;
        }
        let mut y5 = y.clone();
        let mut err = 0.0f64;
        for i in 0..aug {
            let mut acc5 = 0.0;
            let mut acc4 = 0.0;
            for s in 0..7 {
                acc5 += DP_B5[s] * stages[s][i];
                acc4 += DP_B4[s] * stages[s][i];
            }
            y5[i] += h * acc5;
            let sc = opts.atol + opts.rtol * y[i].abs().max(y5[i].abs());
            let e = h * (acc5 - acc4) / sc;
            err += e * e;
        }
        err = (err / aug as f64).sqrt();

        if err <= 1.0 {
            // accept; dense output over [t, t+h]
            let t_new = t + h;
            while next_output <= t_new + 1e-12 && next_output <= opts.t_final + 1e-12 {
                let theta = ((next_output - t) / h).clamp(0.0, 1.0);
                let yi = dense_eval(&y, &stages, h, theta, aug);
                let state = yi[0..n].to_vec();
                let u =
                    control(ctrl, sys, &state).map_err(|e| SimError::System(e.to_string()))?;
                points.push(TrajectoryPoint {
                    t: next_output,
                    x: state,
                    u,
                    j: yi[n],
                });
                next_output += opts.output_dt;
            }
            t = t_new;
            // FSAL: stage 7 with the new y equals k1 of the next step
            let (k_new, u_new) = rhs(&y5)?;
            y = y5;
            k1 = k_new;
            u_now = u_new;
            let norm: f64 = y[0..n].iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > opts.blow_up_norm {
                return Err(SimError::BlowUp { t, bound: opts.blow_up_norm });
            }
            let grow = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
            h *= grow;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        }
    }

    if points.last().map(|p| p.t < opts.t_final - 1e-9).unwrap_or(true) {
        points.push(TrajectoryPoint {
            t: opts.t_final,
            x: y[0..n].to_vec(),
            u: u_now,
            j: y[n],
        });
    }
    Ok(Trajectory { points })
}

/// 4th-order dense-output polynomial of the Dormand-Prince pair.
fn dense_eval(y: &[f64], stages: &[Vec<f64>; 7], h: f64, theta: f64, dim: usize) -> Vec<f64> {
    let th = theta;
    let mut out = vec![0.0; dim];
    for i in 0..dim {
        // rcont coefficients per Hairer's DOPRI5 dense output
        let ydiff = {
            let mut acc5 = 0.0;
            for s in 0..7 {
                acc5 += DP_B5[s] * stages[s][i];
            }
            h * acc5
        };
        let bspl = h * stages[0][i] - ydiff;
        let mut acc_d = 0.0;
        for s in 0..7 {
            acc_d += DP_D[s] * stages[s][i];
        }
        let rcont1 = y[i];
        let rcont2 = ydiff;
        let rcont3 = bspl;
        let rcont4 = ydiff - h * stages[6][i] - bspl;
        let rcont5 = h * acc_d;
        out[i] = rcont1
            + th * (rcont2 + (1.0 - th) * (rcont3 + th * (rcont4 + (1.0 - th) * rcont5)));
    }
    out
}

/// Simulate an autonomous expression field (no controller), tracking cost
/// with `u = 0`. Used for phase portraits.
pub fn simulate_autonomous(
    field: &[Expression],
    q: &Expression,
    x0: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    let n = field.len();
    let domain = BoxDomain::from_bounds(&vec![(-1.0, 1.0); n]);
    let g = vec![vec![Expression::zero(n)]; n];
    let sys = ControlAffineSystem {
        name: "autonomous".into(),
        n,
        k: 1,
        f: field.to_vec(),
        g,
        domain,
    };
    let cost = CostSpec {
        q: q.clone(),
        r: vec![vec![Expression::constant(1.0, n)]],
        q_lin: DMatrix::identity(n, n),
    };
    let ctrl = Controller::Lqr { gain: DMatrix::zeros(1, n) };
    simulate(&sys, &cost, &ctrl, x0, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::BoxDomain;
    use crate::riccati;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sontag_zero_branch() {
        assert_eq!(sontag_control(3.0, &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn sontag_closed_forms() {
        let u = sontag_control(0.0, &[1.0]);
        assert!((u[0] + 1.0).abs() < 1e-15);
        let u = sontag_control(1.0, &[1.0]);
        assert!((u[0] + (1.0 + 2.0f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn sontag_decrease_identity_random() {
        // a + b.u = -sqrt(a^2 + ||b||^4) wherever ||b|| is nonzero
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let k = rng.gen_range(1..=3);
            let a: f64 = rng.gen_range(-5.0..5.0);
            let b: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b_sq: f64 = b.iter().map(|v| v * v).sum();
            if b_sq.sqrt() <= 1e-6 {
                continue;
            }
            let u = sontag_control(a, &b);
            let decrease = a + b.iter().zip(&u).map(|(bv, uv)| bv * uv).sum::<f64>();
            let expect = -(a * a + b_sq * b_sq).sqrt();
            assert!((decrease - expect).abs() <= 1e-9, "{decrease} vs {expect}");
        }
    }

    fn scalar_integrator() -> (ControlAffineSystem, CostSpec) {
        let f = vec![Expression::zero(1)];
        let g = vec![vec![Expression::constant(1.0, 1)]];
        (
            ControlAffineSystem::new(
                "int",
                f,
                g,
                BoxDomain::from_bounds(&[(-10.0, 10.0)]),
            )
            .unwrap(),
            CostSpec::identity(1, 1),
        )
    }

    struct ExactScalarW {
        alpha: f64,
    }
    impl ValueFunction for ExactScalarW {
        fn dim(&self) -> usize {
            1
        }
        fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
            let w = (self.alpha * x[0] * x[0]).tanh();
            (w, vec![(1.0 - w * w) * 2.0 * self.alpha * x[0]])
        }
    }

    #[test]
    fn hjb_control_of_exact_solution_is_minus_x() {
        let (sys, cost) = scalar_integrator();
        let exact = ExactScalarW { alpha: 0.1 };
        let ctrl = NeuralHjbController::new(
            &sys,
            &cost,
            &exact,
            TransformSpec::tanh(0.1),
            true,
        )
        .unwrap();
        for i in 0..100 {
            let x = -3.0 + 6.0 * i as f64 / 99.0;
            let u = ctrl.control(&sys, &[x]).unwrap();
            assert!((u[0] + x).abs() <= 1e-9, "u({x}) = {}", u[0]);
        }
        // zero shift pins the origin
        assert_eq!(ctrl.control(&sys, &[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn hjb_control_matches_lqr_near_origin_for_synthetic_model() {
        // W = beta(V_P) gives k_N = Kx exactly.
        let f = vec![
            Expression::parse("x2", 2).unwrap(),
            Expression::parse("-x1 + x2", 2).unwrap(),
        ];
        let g = vec![
            vec![Expression::zero(2)],
            vec![Expression::constant(1.0, 2)],
        ];
        let sys = ControlAffineSystem::new(
            "lin",
            f,
            g,
            BoxDomain::from_bounds(&[(-3.0, 3.0), (-3.0, 3.0)]),
        )
        .unwrap();
        let cost = CostSpec::identity(2, 1);
        let cert = riccati::certificate(&sys, &cost).unwrap();
        struct BetaVp {
            p: DMatrix<f64>,
            alpha: f64,
        }
        impl ValueFunction for BetaVp {
            fn dim(&self) -> usize {
                2
            }
            fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
                let xv = DVector::from_column_slice(x);
                let v = (xv.transpose() * &self.p * &xv)[(0, 0)];
                let w = (self.alpha * v).tanh();
                let scale = self.alpha * (1.0 - w * w);
                let grad = (&self.p * &xv) * 2.0 * scale;
                (w, grad.as_slice().to_vec())
            }
        }
        let model = BetaVp { p: cert.p.clone(), alpha: 0.1 };
        let ctrl =
            NeuralHjbController::new(&sys, &cost, &model, TransformSpec::tanh(0.1), true)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let u = ctrl.control(&sys, &x).unwrap();
            let expect = cert.k[(0, 0)] * x[0] + cert.k[(0, 1)] * x[1];
            assert!((u[0] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn simulate_from_origin_stays_at_origin() {
        let (sys, cost) = scalar_integrator();
        let ctrl = Controller::Lqr { gain: DMatrix::from_element(1, 1, -1.0) };
        let traj = simulate(&sys, &cost, &ctrl, &[0.0], &SimOptions::new(5.0)).unwrap();
        for p in &traj.points {
            assert_eq!(p.x[0], 0.0);
            assert_eq!(p.j, 0.0);
        }
    }

    #[test]
    fn scalar_lqr_accumulated_cost_is_one() {
        // xdot = u, u = -x, q = x^2, R = 1, x0 = 1: J = int 2 e^{-2t} = 1.
        let (sys, cost) = scalar_integrator();
        let ctrl = Controller::Lqr { gain: DMatrix::from_element(1, 1, -1.0) };
        let traj = simulate(&sys, &cost, &ctrl, &[1.0], &SimOptions::new(20.0)).unwrap();
        let j = traj.accumulated_cost();
        assert!((j - 1.0).abs() <= 1e-4, "J = {j}");
        assert!(traj.final_state().x[0].abs() < 1e-6);
        // cost is non-decreasing
        for w in traj.points.windows(2) {
            assert!(w[1].j >= w[0].j - 1e-12);
        }
    }

    #[test]
    fn lyapunov_value_non_increasing_along_closed_loop() {
        let (sys, cost) = crate::system::get_benchmark("vdp_input").unwrap();
        let cert = riccati::certificate(&sys, &cost).unwrap();
        let ctrl = Controller::Lqr { gain: cert.k.clone() };
        let traj =
            simulate(&sys, &cost, &ctrl, &[0.8, -0.5], &SimOptions::new(15.0)).unwrap();
        let vp = |x: &[f64]| {
            let xv = DVector::from_column_slice(x);
            (xv.transpose() * &cert.p * &xv)[(0, 0)]
        };
        for w in traj.points.windows(2) {
            assert!(
                vp(&w[1].x) <= vp(&w[0].x) + 1e-7,
                "V increased between t={} and t={}",
                w[0].t,
                w[1].t
            );
        }
    }

    #[test]
    fn blow_up_detected() {
        // xdot = x^2 from x0 = 2 escapes in finite time
        let f = vec![Expression::parse("x1^2", 1).unwrap()];
        let g = vec![vec![Expression::zero(1)]];
        let sys = ControlAffineSystem::new(
            "blow",
            f,
            g,
            BoxDomain::from_bounds(&[(-5.0, 5.0)]),
        )
        .unwrap();
        let cost = CostSpec::identity(1, 1);
        let ctrl = Controller::Lqr { gain: DMatrix::zeros(1, 1) };
        let err = simulate(&sys, &cost, &ctrl, &[2.0], &SimOptions::new(10.0)).unwrap_err();
        assert!(matches!(err, SimError::BlowUp { .. } | SimError::StepUnderflow(_)));
    }

    #[test]
    fn csv_output_schema() {
        let (sys, cost) = scalar_integrator();
        let ctrl = Controller::Lqr { gain: DMatrix::from_element(1, 1, -1.0) };
        let traj = simulate(&sys, &cost, &ctrl, &[1.0], &SimOptions::new(1.0)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,u1,J\n"));
    }
}
