//! Continuous-time algebraic Riccati equation and LQR gain.
//!
//! `solve_are` extracts the stable invariant subspace of the 2n-by-2n
//! Hamiltonian through a scaled matrix-sign iteration (equivalent to an
//! ordered eigendecomposition but with only LU factorizations), then polishes
//! the solution with a few Newton steps, each a Lyapunov solve through a
//! Kronecker linear system. Fine for the desk scales used here (n <= ~30).

use crate::system::{ControlAffineSystem, CostSpec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RiccatiError {
    #[error("R is singular or too ill-conditioned to invert")]
    SingularR,
    #[error("sign iteration did not converge; is (A,B) stabilizable?")]
    SignIterationDiverged,
    #[error("stable invariant subspace has wrong dimension; (A,B) not stabilizable")]
    NotStabilizable,
    #[error("residual {0:.3e} exceeds tolerance after refinement")]
    ResidualTooLarge(f64),
    #[error("closed loop A+BK is not Hurwitz (max Re eigenvalue {0:.3e})")]
    NotHurwitz(f64),
    #[error("system error: {0}")]
    System(String),
}

/// A quadratic certificate `V_P(x) = x' P x` with LQR gain `K` and the two
/// verified levels: `c_p1` for the closed loop under `u = Kx`, `c_p >= c_p1`
/// for the CLF condition. Levels are zero until a verifier fills them in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticCertificate {
    #[serde(rename = "P", with = "matrix_rows")]
    pub p: DMatrix<f64>,
    #[serde(rename = "K", with = "matrix_rows")]
    pub k: DMatrix<f64>,
    #[serde(rename = "c_P1")]
    pub c_p1: f64,
    #[serde(rename = "c_P")]
    pub c_p: f64,
    #[serde(rename = "residual")]
    pub residual_norm: f64,
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> =
            (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

const RESIDUAL_TOL: f64 = 1e-8;

/// Solve `PA + A'P - P B R^-1 B' P + Q = 0` for the stabilizing `P`.
pub fn solve_are(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "A must be square");
    assert_eq!(b.nrows(), n, "B must have n rows");
    assert_eq!(q.shape(), (n, n), "Q must be n-by-n");
    let k_in = b.ncols();
    assert_eq!(r.shape(), (k_in, k_in), "R must be k-by-k");

    let r_inv = r.clone().try_inverse().ok_or(RiccatiError::SingularR)?;
    let s = b * &r_inv * b.transpose();

    // Trivial case: no forcing and no state weight. The zero matrix solves
    // the equation; it is stabilizing iff A is Hurwitz.
    if s.amax() == 0.0 && q.amax() == 0.0 {
        let alpha = spectral_abscissa(a);
        return if alpha < 0.0 {
            Ok(DMatrix::zeros(n, n))
        } else {
            Err(RiccatiError::NotHurwitz(alpha))
        };
    }

    // Hamiltonian H = [[A, -S], [-Q, -A']]
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&s));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let z = matrix_sign(&h)?;

    // (I - sign(H))/2 projects onto the stable invariant subspace.
    let proj = (DMatrix::identity(2 * n, 2 * n) - z) * 0.5;
    let qr = proj.col_piv_qr();
    let rank = {
        let rm = qr.r();
        let tol = 1e-7 * rm[(0, 0)].abs().max(1.0);
        (0..rm.nrows().min(rm.ncols())).take_while(|&i| rm[(i, i)].abs() > tol).count()
    };
    if rank != n {
        return Err(RiccatiError::NotStabilizable);
    }
    let basis = qr.q().columns(0, n).into_owned();
    let u1 = basis.rows(0, n).into_owned();
    let u2 = basis.rows(n, n).into_owned();
    let u1_inv = u1.try_inverse().ok_or(RiccatiError::NotStabilizable)?;
    let mut p = u2 * u1_inv;
    p = (&p + p.transpose()) * 0.5;

    // Newton polish: solve (A-SP)' D + D (A-SP) = -residual for D.
    for _ in 0..5 {
        let res = riccati_residual(&p, a, &s, q);
        if res.amax() <= 1e-14 {
            break;
        }
        let a_cl = a - &s * &p;
        match solve_lyapunov(&a_cl, &(-&res)) {
            Some(d) => {
                p += &d;
                p = (&p + p.transpose()) * 0.5;
            }
            None => break,
        }
    }

    let res_norm = riccati_residual(&p, a, &s, q).norm();
    if !res_norm.is_finite() || res_norm > RESIDUAL_TOL {
        return Err(RiccatiError::ResidualTooLarge(res_norm));
    }
    let a_cl = a - &s * &p;
    let alpha = spectral_abscissa(&a_cl);
    if alpha >= 0.0 {
        return Err(RiccatiError::NotHurwitz(alpha));
    }
    Ok(p)
}

/// `K = -R^-1 B' P`.
pub fn lqr_gain(
    p: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, RiccatiError> {
    let r_inv = r.clone().try_inverse().ok_or(RiccatiError::SingularR)?;
    Ok(-(r_inv * b.transpose() * p))
}

/// Linearize a system and produce its quadratic certificate (levels unset).
pub fn certificate(
    sys: &ControlAffineSystem,
    cost: &CostSpec,
) -> Result<QuadraticCertificate, RiccatiError> {
    let (a, b) = sys.linearize().map_err(|e| RiccatiError::System(e.to_string()))?;
    let r0 = cost
        .eval_r(&vec![0.0; sys.n])
        .map_err(|e| RiccatiError::System(e.to_string()))?;
    let p = solve_are(&a, &b, &cost.q_lin, &r0)?;
    let k = lqr_gain(&p, &b, &r0)?;
    let s = &b * r0.clone().try_inverse().ok_or(RiccatiError::SingularR)? * b.transpose();
    let residual_norm = riccati_residual(&p, &a, &s, &cost.q_lin).norm();
    Ok(QuadraticCertificate { p, k, c_p1: 0.0, c_p: 0.0, residual_norm })
}

pub fn riccati_residual(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> DMatrix<f64> {
    p * a + a.transpose() * p - p * s * p + q
}

/// Largest real part over the eigenvalues.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Solve `A' X + X A = C` (X symmetric when C is) via the Kronecker system.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(A' X + X A) = (I (x) A' + A' (x) I) vec(X), column-major vec.
    let m = kron(&eye, &a.transpose()) + kron(&a.transpose(), &eye);
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = m.lu().solve(&rhs)?;
    Some(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let scale = a[(i, j)];
            if scale != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * scale));
            }
        }
    }
    out
}

/// Scaled Newton iteration for the matrix sign function.
fn matrix_sign(h: &DMatrix<f64>) -> Result<DMatrix<f64>, RiccatiError> {
    let m = h.nrows();
    let mut z = h.clone();
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det: f64 = lu.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(RiccatiError::SignIterationDiverged);
        }
        let z_inv = lu.try_inverse().ok_or(RiccatiError::SignIterationDiverged)?;
        // Determinant scaling accelerates convergence and guards overflow.
        let mu = det.abs().powf(-1.0 / m as f64);
        let next = (&z * mu + z_inv / mu) * 0.5;
        let diff = (&next - &z).norm();
        let scale = next.norm().max(1.0);
        z = next;
        if diff <= 1e-14 * scale {
            return Ok(z);
        }
    }
    // One more convergence check: accept if Z^2 is close to I.
    let err = (&z * &z - DMatrix::<f64>::identity(m, m)).norm();
    if err < 1e-6 {
        Ok(z)
    } else {
        Err(RiccatiError::SignIterationDiverged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::get_benchmark;

    fn mat1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_integrator() {
        // A=0, B=1, Q=1, R=1: -P^2 + 1 = 0, stabilizing root P = 1.
        let p = solve_are(&mat1(0.0), &mat1(1.0), &mat1(1.0), &mat1(1.0)).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
        let k = lqr_gain(&p, &mat1(1.0), &mat1(1.0)).unwrap();
        assert!((k[(0, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_unstable() {
        // A=1: 2P - P^2 + 1 = 0, stabilizing root P = 1 + sqrt(2).
        let p = solve_are(&mat1(1.0), &mat1(1.0), &mat1(1.0), &mat1(1.0)).unwrap();
        let expect = 1.0 + 2.0_f64.sqrt();
        assert!((p[(0, 0)] - expect).abs() < 1e-12);
        let k = lqr_gain(&p, &mat1(1.0), &mat1(1.0)).unwrap();
        assert!((k[(0, 0)] + expect).abs() < 1e-12);
        // closed loop A + BK = -sqrt(2)
        assert!((1.0 + k[(0, 0)] + 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hurwitz_a_with_zero_forcing() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
        let b = DMatrix::zeros(2, 1);
        let q = DMatrix::zeros(2, 2);
        let p = solve_are(&a, &b, &q, &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(p, DMatrix::zeros(2, 2));
    }

    #[test]
    fn non_stabilizable_pair_rejected() {
        // A = I (unstable), B = 0: no stabilizing solution exists.
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::zeros(2, 1);
        let q = DMatrix::identity(2, 2);
        assert!(solve_are(&a, &b, &q, &DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn singular_r_rejected() {
        let a = mat1(0.0);
        let b = mat1(1.0);
        assert!(matches!(
            solve_are(&a, &b, &mat1(1.0), &mat1(0.0)),
            Err(RiccatiError::SingularR)
        ));
    }

    #[test]
    fn all_benchmarks_certify() {
        for name in ["vdp_input", "mass_spring_4d", "mass_spring_chain(6)", "pendulum", "reversed_vdp"]
        {
            let (sys, cost) = get_benchmark(name).unwrap();
            let cert = certificate(&sys, &cost).unwrap();
            assert!(cert.residual_norm <= 1e-8, "{name}: residual {}", cert.residual_norm);
            // P positive definite
            let eig = cert.p.clone().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&l| l > 0.0), "{name}: P not PD");
            // A + BK Hurwitz
            let (a, b) = sys.linearize().unwrap();
            let alpha = spectral_abscissa(&(&a + &b * &cert.k));
            assert!(alpha < 0.0, "{name}: closed loop abscissa {alpha}");
        }
    }

    #[test]
    fn closed_loop_lyapunov_identity() {
        // P(A+BK) + (A+BK)'P = -Q - P B R^-1 B' P must be negative definite.
        for name in ["vdp_input", "pendulum", "reversed_vdp"] {
            let (sys, cost) = get_benchmark(name).unwrap();
            let cert = certificate(&sys, &cost).unwrap();
            let (a, b) = sys.linearize().unwrap();
            let a_cl = &a + &b * &cert.k;
            let lhs = &cert.p * &a_cl + a_cl.transpose() * &cert.p;
            let rhs = -&cost.q_lin - &cert.p * &b * &b.transpose() * &cert.p;
            assert!((&lhs - &rhs).amax() < 1e-8, "{name}");
            let eig = lhs.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&l| l < 0.0), "{name}: not decreasing");
        }
    }

    #[test]
    fn certificate_serialization_schema() {
        let (sys, cost) = get_benchmark("vdp_input").unwrap();
        let cert = certificate(&sys, &cost).unwrap();
        let json = serde_json::to_string(&cert).unwrap();
        assert!(json.contains("\"P\""), "{json}");
        assert!(json.contains("\"c_P1\""));
        let back: QuadraticCertificate = serde_json::from_str(&json).unwrap();
        assert_eq!(back.p, cert.p);
        assert_eq!(back.k, cert.k);
    }
}
