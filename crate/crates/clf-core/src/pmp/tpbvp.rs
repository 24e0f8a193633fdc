//! Two-point boundary value problem from the maximum principle, solved by
//! Hermite-Simpson collocation with damped Newton.
//!
//! The augmented state is `z = (x, lambda, V)`. The optimal input
//! `u* = -1/2 R(x)^-1 g(x)' lambda` is substituted symbolically, the adjoint
//! field is assembled from symbolic partials of `q`, `f`, `g`, `R`, and the
//! whole field plus its Jacobian is compiled to a single evaluation tape.
//!
//! Boundary conditions: `x(0) = x0`, `lambda(T) = 0`, `V(T) = 0`.

use super::banded::BandedMatrix;
use super::PmpError;
use crate::expr::tape::CompiledTape;
use crate::expr::Expression;
use crate::system::{ControlAffineSystem, CostSpec};
use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub struct TpbvpConfig {
    pub t_final: f64,
    pub n_steps: usize,
    pub tol: f64,
    pub max_newton_iters: usize,
    /// Solve shorter horizons first and reuse the solution as the next guess.
    pub continuation: bool,
    /// Warm start from a simulated LQR closed loop when a gain is available.
    pub lqr_seed: bool,
}

impl TpbvpConfig {
    pub fn new(t_final: f64, n_steps: usize, tol: f64) -> Self {
        TpbvpConfig {
            t_final,
            n_steps,
            tol,
            max_newton_iters: 60,
            continuation: true,
            lqr_seed: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TpbvpSolution {
    pub ts: Vec<f64>,
    /// `x[i]` is the state at mesh point i.
    pub x: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    /// Max-norm of the collocation and boundary residuals.
    pub defect: f64,
    pub newton_iters: usize,
    /// |Simpson quadrature of q + u'Ru along the trajectory - V(0)|.
    pub quad_residual: f64,
}

/// Symbolic problem built once per (system, cost) pair; the tape is
/// read-only and can be shared across worker threads.
pub struct TpbvpProblem {
    n: usize,
    k: usize,
    m: usize,
    tape: CompiledTape,
    u_tape: CompiledTape,
    /// q(x) + u'Ru on the augmented variables, for the quadrature check.
    w_tape: CompiledTape,
    pub lqr: Option<LqrSeed>,
}

#[derive(Debug, Clone)]
pub struct LqrSeed {
    pub gain: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl TpbvpProblem {
    pub fn new(
        sys: &ControlAffineSystem,
        cost: &CostSpec,
        lqr: Option<LqrSeed>,
    ) -> Result<Self, PmpError> {
        let n = sys.n;
        let k = sys.k;
        let m = 2 * n + 1;

        // Lift an arity-n expression into the augmented space.
        let lift_vars: Vec<Expression> = (0..n).map(|i| Expression::var(i, m)).collect();
        let lift = |e: &Expression| e.substitute(&lift_vars);
        let lam = |i: usize| Expression::var(n + i, m);

        let f: Vec<Expression> = sys.f.iter().map(&lift).collect();
        let g: Vec<Vec<Expression>> =
            sys.g.iter().map(|row| row.iter().map(&lift).collect()).collect();
        let q = lift(&cost.q);
        let r: Vec<Vec<Expression>> =
            cost.r.iter().map(|row| row.iter().map(&lift).collect()).collect();
        let r_inv = symbolic_inverse(&r, m)?;

        // u*_j = -1/2 sum_l inv_jl (g' lambda)_l
        let gt_lam: Vec<Expression> = (0..k)
            .map(|j| {
                let mut acc = Expression::zero(m);
                for i in 0..n {
                    acc = acc.add(&g[i][j].mul(&lam(i)));
                }
                acc
            })
            .collect();
        let u_star: Vec<Expression> = (0..k)
            .map(|j| {
                let mut acc = Expression::zero(m);
                for l in 0..k {
                    acc = acc.add(&r_inv[j][l].mul(&gt_lam[l]));
                }
                Expression::constant(-0.5, m).mul(&acc)
            })
            .collect();

        // xdot = f + g u*
        let mut field: Vec<Expression> = Vec::with_capacity(m);
        for i in 0..n {
            let mut acc = f[i].clone();
            for j in 0..k {
                acc = acc.add(&g[i][j].mul(&u_star[j]));
            }
            field.push(acc);
        }
        // lambdadot_i = -[dq/dx_i + sum_l df_l/dx_i lam_l
        //                + sum_{l,j} dg_lj/dx_i u*_j lam_l
        //                + sum_{j,l} u*_j dR_jl/dx_i u*_l]
        for i in 0..n {
            let mut acc = q.differentiate(i);
            for l in 0..n {
                acc = acc.add(&f[l].differentiate(i).mul(&lam(l)));
            }
            for l in 0..n {
                for j in 0..k {
                    acc = acc.add(&g[l][j].differentiate(i).mul(&u_star[j]).mul(&lam(l)));
                }
            }
            for j in 0..k {
                for l in 0..k {
                    let dr = r[j][l].differentiate(i);
                    if dr.as_constant() != Some(0.0) {
                        acc = acc.add(&u_star[j].mul(&dr).mul(&u_star[l]));
                    }
                }
            }
            field.push(acc.neg());
        }
        // Vdot = -[q + u*' R u*]
        let mut running = q.clone();
        for j in 0..k {
            for l in 0..k {
                running = running.add(&u_star[j].mul(&r[j][l]).mul(&u_star[l]));
            }
        }
        field.push(running.neg());

        // One tape evaluates the field and its full Jacobian.
        let mut everything = field.clone();
        for gi in &field {
            for j in 0..m {
                everything.push(gi.differentiate(j));
            }
        }
        let tape = CompiledTape::compile(&everything);
        let u_tape = CompiledTape::compile(&u_star);
        let w_tape = CompiledTape::compile(&[running]);
        Ok(TpbvpProblem { n, k, m, tape, u_tape, w_tape, lqr })
    }

    /// Evaluate field and Jacobian at one augmented point.
    fn field_jac(
        &self,
        z: &[f64],
        scratch: &mut [f64],
        out: &mut [f64],
    ) -> Result<(), PmpError> {
        self.tape
            .eval(z, scratch, out)
            .map_err(|e| PmpError::Eval(e.to_string()))
    }
}

fn symbolic_inverse(
    r: &[Vec<Expression>],
    arity: usize,
) -> Result<Vec<Vec<Expression>>, PmpError> {
    let k = r.len();
    match k {
        1 => Ok(vec![vec![Expression::constant(1.0, arity).div(&r[0][0])]]),
        2 => {
            let det = r[0][0].mul(&r[1][1]).sub(&r[0][1].mul(&r[1][0]));
            Ok(vec![
                vec![r[1][1].div(&det), r[0][1].neg().div(&det)],
                vec![r[1][0].neg().div(&det), r[0][0].div(&det)],
            ])
        }
        _ => {
            // Fall back to a numeric inverse when R is constant.
            let consts: Option<Vec<Vec<f64>>> = r
                .iter()
                .map(|row| row.iter().map(|e| e.as_constant()).collect())
                .collect();
            let consts = consts.ok_or_else(|| {
                PmpError::Unsupported(
                    "state-dependent R with k > 2 inputs is not supported".into(),
                )
            })?;
            let mat = DMatrix::from_fn(k, k, |i, j| consts[i][j]);
            let inv = mat
                .try_inverse()
                .ok_or_else(|| PmpError::Unsupported("singular R".into()))?;
            Ok((0..k)
                .map(|i| (0..k).map(|j| Expression::constant(inv[(i, j)], arity)).collect())
                .collect())
        }
    }
}

/// Solve the TPBVP for a single initial state.
pub fn solve(
    problem: &TpbvpProblem,
    x0: &[f64],
    cfg: &TpbvpConfig,
) -> Result<TpbvpSolution, PmpError> {
    let n = problem.n;
    assert_eq!(x0.len(), n);
    if cfg.t_final <= 0.0 {
        return Err(PmpError::Domain("T must be positive".into()));
    }
    if cfg.n_steps < 10 {
        return Err(PmpError::Domain("N must be at least 10".into()));
    }
    if cfg.tol <= 0.0 {
        return Err(PmpError::Domain("tol must be positive".into()));
    }

    // Equilibrium shortcut: the all-zero functions solve the problem.
    if x0.iter().all(|&v| v == 0.0) {
        let nn = cfg.n_steps;
        let h = cfg.t_final / nn as f64;
        return Ok(TpbvpSolution {
            ts: (0..=nn).map(|i| i as f64 * h).collect(),
            x: vec![vec![0.0; n]; nn + 1],
            lambda: vec![vec![0.0; n]; nn + 1],
            v: vec![0.0; nn + 1],
            u: vec![vec![0.0; problem.k]; nn + 1],
            defect: 0.0,
            newton_iters: 0,
            quad_residual: 0.0,
        });
    }

    let mut total_iters = 0usize;

    // Attempt 1: LQR-seeded direct solve on the full horizon.
    if cfg.lqr_seed {
        if let Some(seed) = &problem.lqr {
            if let Some(guess) = lqr_guess(problem, seed, x0, cfg.t_final, cfg.n_steps) {
                match newton_solve(problem, x0, cfg.t_final, cfg.n_steps, guess, cfg) {
                    Ok((sol, iters)) => {
                        return Ok(finish(problem, sol, cfg, total_iters + iters));
                    }
                    Err((_, iters)) => total_iters += iters,
                }
            }
        }
    }

    // Attempt 2: continuation in the horizon from a linear-decay guess.
    let stages: Vec<f64> = if cfg.continuation {
        [20.0, 50.0]
            .iter()
            .copied()
            .filter(|&t| t < cfg.t_final)
            .chain(std::iter::once(cfg.t_final))
            .collect()
    } else {
        vec![cfg.t_final]
    };
    let mut prev: Option<(f64, Vec<f64>, usize)> = None; // (T, Z, n_steps)
    for (si, &t_stage) in stages.iter().enumerate() {
        let n_stage = if (t_stage - cfg.t_final).abs() < 1e-12 {
            cfg.n_steps
        } else {
            ((cfg.n_steps as f64 * t_stage / cfg.t_final).ceil() as usize).max(50)
        };
        let guess = match &prev {
            None => linear_decay_guess(problem, x0, n_stage),
            Some((t_prev, z_prev, n_prev)) => {
                resample_guess(problem, z_prev, *t_prev, *n_prev, t_stage, n_stage)
            }
        };
        match newton_solve(problem, x0, t_stage, n_stage, guess, cfg) {
            Ok((sol, iters)) => {
                total_iters += iters;
                if si + 1 == stages.len() {
                    return Ok(finish(problem, sol, cfg, total_iters));
                }
                prev = Some((t_stage, sol, n_stage));
            }
            Err((residual, iters)) => {
                return Err(PmpError::NewtonDiverged {
                    iters: total_iters + iters,
                    residual,
                });
            }
        }
    }
    unreachable!("continuation stage list always ends at t_final");
}

fn finish(
    problem: &TpbvpProblem,
    z: Vec<f64>,
    cfg: &TpbvpConfig,
    newton_iters: usize,
) -> TpbvpSolution {
    let (n, k, m) = (problem.n, problem.k, problem.m);
    let nn = cfg.n_steps;
    let h = cfg.t_final / nn as f64;
    let mut scratch = problem.u_tape.scratch();
    let mut w_scratch = problem.w_tape.scratch();

    let mut x = Vec::with_capacity(nn + 1);
    let mut lambda = Vec::with_capacity(nn + 1);
    let mut v = Vec::with_capacity(nn + 1);
    let mut u = Vec::with_capacity(nn + 1);
    for i in 0..=nn {
        let zi = &z[i * m..(i + 1) * m];
        x.push(zi[0..n].to_vec());
        lambda.push(zi[n..2 * n].to_vec());
        v.push(zi[2 * n]);
        let mut ui = vec![0.0; k];
        let _ = problem.u_tape.eval(zi, &mut scratch, &mut ui);
        u.push(ui);
    }

    // Simpson quadrature of the running cost, with midpoints reconstructed
    // from the collocation structure; compares against V(0) - V(T).
    let mut field_scratch = problem.tape.scratch();
    let mut out = vec![0.0; problem.tape.n_outputs()];
    let mut quad = 0.0;
    let mut w_node = vec![0.0; nn + 1];
    let mut g_node = vec![vec![0.0; m]; nn + 1];
    for i in 0..=nn {
        let zi = &z[i * m..(i + 1) * m];
        let mut w = [0.0];
        if problem.w_tape.eval(zi, &mut w_scratch, &mut w).is_err() {
            w[0] = f64::NAN;
        }
        w_node[i] = w[0];
        if problem.field_jac(zi, &mut field_scratch, &mut out).is_ok() {
            g_node[i][..m].copy_from_slice(&out[0..m]);
        }
    }
    let mut zm = vec![0.0; m];
    for i in 0..nn {
        let zi = &z[i * m..(i + 1) * m];
        let zj = &z[(i + 1) * m..(i + 2) * m];
        for c in 0..m {
            zm[c] = 0.5 * (zi[c] + zj[c]) + h / 8.0 * (g_node[i][c] - g_node[i + 1][c]);
        }
        let mut wm = [0.0];
        if problem.w_tape.eval(&zm, &mut w_scratch, &mut wm).is_err() {
            wm[0] = f64::NAN;
        }
        quad += h / 6.0 * (w_node[i] + 4.0 * wm[0] + w_node[i + 1]);
    }
    let quad_residual = (quad - (v[0] - v[nn])).abs();

    let defect = residual_inf_norm(problem, &z, x[0].as_slice(), cfg.t_final, nn);
    TpbvpSolution {
        ts: (0..=nn).map(|i| i as f64 * h).collect(),
        x,
        lambda,
        v,
        u,
        defect,
        newton_iters,
        quad_residual,
    }
}

fn residual_inf_norm(
    problem: &TpbvpProblem,
    z: &[f64],
    x0: &[f64],
    t_final: f64,
    nn: usize,
) -> f64 {
    let mut ws = Workspace::new(problem, nn);
    match assemble_residual(problem, z, x0, t_final, nn, &mut ws) {
        Ok(()) => ws.residual.iter().fold(0.0f64, |a, r| a.max(r.abs())),
        Err(_) => f64::INFINITY,
    }
}

struct Workspace {
    residual: Vec<f64>,
    g_nodes: Vec<f64>,
    dg_nodes: Vec<f64>,
    tape_scratch: Vec<f64>,
    tape_out: Vec<f64>,
}

impl Workspace {
    fn new(problem: &TpbvpProblem, nn: usize) -> Self {
        let m = problem.m;
        Workspace {
            residual: vec![0.0; (nn + 1) * m],
            g_nodes: vec![0.0; (nn + 1) * m],
            dg_nodes: vec![0.0; (nn + 1) * m * m],
            tape_scratch: problem.tape.scratch(),
            tape_out: vec![0.0; problem.tape.n_outputs()],
        }
    }
}

/// Residual layout: rows `0..n` pin `x(0)`, then `m` rows per interval, then
/// `n+1` rows pin `lambda(T)` and `V(T)`.
fn assemble_residual(
    problem: &TpbvpProblem,
    z: &[f64],
    x0: &[f64],
    t_final: f64,
    nn: usize,
    ws: &mut Workspace,
) -> Result<(), PmpError> {
    let (n, m) = (problem.n, problem.m);
    let h = t_final / nn as f64;

    for i in 0..=nn {
        let zi = &z[i * m..(i + 1) * m];
        problem.field_jac(zi, &mut ws.tape_scratch, &mut ws.tape_out)?;
        ws.g_nodes[i * m..(i + 1) * m].copy_from_slice(&ws.tape_out[0..m]);
        ws.dg_nodes[i * m * m..(i + 1) * m * m].copy_from_slice(&ws.tape_out[m..m + m * m]);
    }

    for c in 0..n {
        ws.residual[c] = z[c] - x0[c];
    }
    let mut zm = vec![0.0; m];
    let mut gm = vec![0.0; m];
    for i in 0..nn {
        let zi = &z[i * m..(i + 1) * m];
        let zj = &z[(i + 1) * m..(i + 2) * m];
        let gi = &ws.g_nodes[i * m..(i + 1) * m];
        let gj = &ws.g_nodes[(i + 1) * m..(i + 2) * m];
        for c in 0..m {
            zm[c] = 0.5 * (zi[c] + zj[c]) + h / 8.0 * (gi[c] - gj[c]);
        }
        problem.field_jac(&zm, &mut ws.tape_scratch, &mut ws.tape_out)?;
        gm.copy_from_slice(&ws.tape_out[0..m]);
        let row0 = n + i * m;
        for c in 0..m {
            ws.residual[row0 + c] =
                zj[c] - zi[c] - h / 6.0 * (gi[c] + 4.0 * gm[c] + gj[c]);
        }
    }
    let last = &z[nn * m..(nn + 1) * m];
    let row0 = n + nn * m;
    for c in 0..n {
        ws.residual[row0 + c] = last[n + c];
    }
    ws.residual[row0 + n] = last[2 * n];
    Ok(())
}

/// Assemble the banded Newton Jacobian matching `assemble_residual`.
fn assemble_jacobian(
    problem: &TpbvpProblem,
    z: &[f64],
    t_final: f64,
    nn: usize,
    ws: &mut Workspace,
    band: &mut BandedMatrix,
) -> Result<(), PmpError> {
    let (n, m) = (problem.n, problem.m);
    let h = t_final / nn as f64;
    band.clear();

    for c in 0..n {
        band.set(c, c, 1.0);
    }

    let mut zm = vec![0.0; m];
    let mut dgm = vec![0.0; m * m];
    // a_blk = dF/dz_i, b_blk = dF/dz_{i+1}
    let mut a_blk = vec![0.0; m * m];
    let mut b_blk = vec![0.0; m * m];
    for i in 0..nn {
        let zi = &z[i * m..(i + 1) * m];
        let zj = &z[(i + 1) * m..(i + 2) * m];
        let gi = &ws.g_nodes[i * m..(i + 1) * m];
        let gj = &ws.g_nodes[(i + 1) * m..(i + 2) * m];
        let dgi = &ws.dg_nodes[i * m * m..(i + 1) * m * m];
        let dgj = &ws.dg_nodes[(i + 1) * m * m..(i + 2) * m * m];
        for c in 0..m {
            zm[c] = 0.5 * (zi[c] + zj[c]) + h / 8.0 * (gi[c] - gj[c]);
        }
        problem.field_jac(&zm, &mut ws.tape_scratch, &mut ws.tape_out)?;
        dgm.copy_from_slice(&ws.tape_out[m..m + m * m]);

        // dzm/dzi = 1/2 I + h/8 DGi ; dzm/dzj = 1/2 I - h/8 DGj
        // A = -I - h/6 (DGi + 4 DGm dzm/dzi)
        // B =  I - h/6 (DGj + 4 DGm dzm/dzj)
        for r in 0..m {
            for c in 0..m {
                let mut ma = 0.0;
                let mut mb = 0.0;
                for t in 0..m {
                    let dgm_rt = dgm[r * m + t];
                    let half = if t == c { 0.5 } else { 0.0 };
                    ma += dgm_rt * (half + h / 8.0 * dgi[t * m + c]);
                    mb += dgm_rt * (half - h / 8.0 * dgj[t * m + c]);
                }
                let eye = if r == c { 1.0 } else { 0.0 };
                a_blk[r * m + c] = -eye - h / 6.0 * (dgi[r * m + c] + 4.0 * ma);
                b_blk[r * m + c] = eye - h / 6.0 * (dgj[r * m + c] + 4.0 * mb);
            }
        }
        let row0 = n + i * m;
        let col_i = i * m;
        let col_j = (i + 1) * m;
        for r in 0..m {
            for c in 0..m {
                let va = a_blk[r * m + c];
                if va != 0.0 {
                    band.set(row0 + r, col_i + c, va);
                }
                let vb = b_blk[r * m + c];
                if vb != 0.0 {
                    band.set(row0 + r, col_j + c, vb);
                }
            }
        }
    }

    let row0 = n + nn * m;
    let col0 = nn * m;
    for c in 0..n {
        band.set(row0 + c, col0 + n + c, 1.0);
    }
    band.set(row0 + n, col0 + 2 * n, 1.0);
    Ok(())
}

/// Damped Newton on the collocation system. On success returns the flat
/// solution vector; on failure, the last residual norm. Either way the
/// iteration count comes back for statistics.
#[allow(clippy::type_complexity)]
fn newton_solve(
    problem: &TpbvpProblem,
    x0: &[f64],
    t_final: f64,
    nn: usize,
    mut z: Vec<f64>,
    cfg: &TpbvpConfig,
) -> Result<(Vec<f64>, usize), (f64, usize)> {
    let (n, m) = (problem.n, problem.m);
    let dim = (nn + 1) * m;
    debug_assert_eq!(z.len(), dim);
    let kl = n + m - 1;
    let ku = 2 * m - n - 1;
    let mut band = BandedMatrix::new(dim, kl, ku);
    let mut ws = Workspace::new(problem, nn);

    let norm2 = |v: &[f64]| v.iter().map(|r| r * r).sum::<f64>();
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |a, r| a.max(r.abs()));

    let mut iters = 0;
    if assemble_residual(problem, &z, x0, t_final, nn, &mut ws).is_err() {
        return Err((f64::INFINITY, iters));
    }
    let mut res_inf = inf(&ws.residual);
    let mut res_sq = norm2(&ws.residual);

    while res_inf > cfg.tol {
        if iters >= cfg.max_newton_iters {
            return Err((res_inf, iters));
        }
        iters += 1;
        if assemble_jacobian(problem, &z, t_final, nn, &mut ws, &mut band).is_err() {
            return Err((res_inf, iters));
        }
        if !band.factor() {
            return Err((res_inf, iters));
        }
        let mut step: Vec<f64> = ws.residual.iter().map(|r| -r).collect();
        band.solve(&mut step);
        if step.iter().any(|v| !v.is_finite()) {
            return Err((res_inf, iters));
        }

        // Armijo backtracking on ||F||^2.
        let mut alpha = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; dim];
        for _ in 0..25 {
            for i in 0..dim {
                trial[i] = z[i] + alpha * step[i];
            }
            if assemble_residual(problem, &trial, x0, t_final, nn, &mut ws).is_ok() {
                let new_sq = norm2(&ws.residual);
                if new_sq.is_finite() && new_sq <= (1.0 - 1e-4 * alpha) * res_sq {
                    z.copy_from_slice(&trial);
                    res_sq = new_sq;
                    res_inf = inf(&ws.residual);
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err((res_inf, iters));
        }
    }
    Ok((z, iters))
}

/// Simulate the LQR closed loop on the mesh and seed `lambda = 2 P x`,
/// `V` by backward trapezoid of the running cost under `u = K x`.
fn lqr_guess(
    problem: &TpbvpProblem,
    seed: &LqrSeed,
    x0: &[f64],
    t_final: f64,
    nn: usize,
) -> Option<Vec<f64>> {
    let (n, m) = (problem.n, problem.m);
    let h = t_final / nn as f64;
    let mut xs = vec![vec![0.0; n]; nn + 1];
    xs[0].copy_from_slice(x0);

    // RK4 on xdot = field(x, 2Px, .) restricted to the state block under
    // u = Kx: evaluate via the augmented tape with lambda := 2Px so that the
    // u* formula reproduces the LQR input at the linearization; far from it
    // the guess only needs to be qualitatively right.
    let mut scratch = problem.tape.scratch();
    let mut out = vec![0.0; problem.tape.n_outputs()];
    let mut z = vec![0.0; m];
    let eval_state = |x: &[f64], scratch: &mut [f64], out: &mut [f64], z: &mut [f64]| -> Option<Vec<f64>> {
        for i in 0..n {
            z[i] = x[i];
        }
        let px = {
            let xv = nalgebra::DVector::from_column_slice(x);
            &seed.p * xv
        };
        for i in 0..n {
            z[n + i] = 2.0 * px[i];
        }
        z[2 * n] = 0.0;
        problem.field_jac(z, scratch, out).ok()?;
        Some(out[0..n].to_vec())
    };

    let bound = 1e4 * (1.0 + x0.iter().map(|v| v.abs()).fold(0.0, f64::max));
    for i in 0..nn {
        let x = xs[i].clone();
        let k1 = eval_state(&x, &mut scratch, &mut out, &mut z)?;
        let x2: Vec<f64> = (0..n).map(|c| x[c] + 0.5 * h * k1[c]).collect();
        let k2 = eval_state(&x2, &mut scratch, &mut out, &mut z)?;
        let x3: Vec<f64> = (0..n).map(|c| x[c] + 0.5 * h * k2[c]).collect();
        let k3 = eval_state(&x3, &mut scratch, &mut out, &mut z)?;
        let x4: Vec<f64> = (0..n).map(|c| x[c] + h * k3[c]).collect();
        let k4 = eval_state(&x4, &mut scratch, &mut out, &mut z)?;
        for c in 0..n {
            xs[i + 1][c] = x[c] + h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        if xs[i + 1].iter().any(|v| !v.is_finite() || v.abs() > bound) {
            return None;
        }
    }

    // Running cost under the seeded lambda, integrated backward.
    let mut w_scratch = problem.w_tape.scratch();
    let mut w = vec![0.0; nn + 1];
    for i in 0..=nn {
        for c in 0..n {
            z[c] = xs[i][c];
        }
        let px = {
            let xv = nalgebra::DVector::from_column_slice(&xs[i]);
            &seed.p * xv
        };
        for c in 0..n {
            z[n + c] = 2.0 * px[c];
        }
        z[2 * n] = 0.0;
        let mut wi = [0.0];
        problem.w_tape.eval(&z, &mut w_scratch, &mut wi).ok()?;
        w[i] = wi[0];
    }
    let mut v = vec![0.0; nn + 1];
    for i in (0..nn).rev() {
        v[i] = v[i + 1] + h / 2.0 * (w[i] + w[i + 1]);
    }

    let mut zfull = vec![0.0; (nn + 1) * m];
    for i in 0..=nn {
        let px = {
            let xv = nalgebra::DVector::from_column_slice(&xs[i]);
            &seed.p * xv
        };
        for c in 0..n {
            zfull[i * m + c] = xs[i][c];
            zfull[i * m + n + c] = 2.0 * px[c];
        }
        zfull[i * m + 2 * n] = v[i];
    }
    Some(zfull)
}

fn linear_decay_guess(problem: &TpbvpProblem, x0: &[f64], nn: usize) -> Vec<f64> {
    let (n, m) = (problem.n, problem.m);
    let mut z = vec![0.0; (nn + 1) * m];
    for i in 0..=nn {
        let s = 1.0 - i as f64 / nn as f64;
        for c in 0..n {
            z[i * m + c] = x0[c] * s;
        }
    }
    z
}

/// Linear interpolation of a previous-stage solution onto a longer horizon;
/// times past the previous horizon keep the terminal values.
fn resample_guess(
    problem: &TpbvpProblem,
    z_prev: &[f64],
    t_prev: f64,
    n_prev: usize,
    t_new: f64,
    n_new: usize,
) -> Vec<f64> {
    let m = problem.m;
    let h_new = t_new / n_new as f64;
    let h_prev = t_prev / n_prev as f64;
    let mut z = vec![0.0; (n_new + 1) * m];
    for i in 0..=n_new {
        let t = i as f64 * h_new;
        if t >= t_prev {
            z[i * m..(i + 1) * m].copy_from_slice(&z_prev[n_prev * m..(n_prev + 1) * m]);
        } else {
            let s = t / h_prev;
            let j = (s.floor() as usize).min(n_prev - 1);
            let frac = s - j as f64;
            for c in 0..m {
                z[i * m + c] =
                    (1.0 - frac) * z_prev[j * m + c] + frac * z_prev[(j + 1) * m + c];
            }
        }
    }
    z
}
