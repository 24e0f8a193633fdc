//! Banded LU with partial pivoting, LAPACK `dgbsv`-style band storage.
//!
//! The collocation Jacobian of the two-point boundary value problem is a
//! banded matrix of dimension `(N+1)(2n+1)`; a dense factorization would be
//! hopeless at N = 2000, while the banded one is linear in N.

/// A banded matrix being assembled and factored in place.
pub struct BandedMatrix {
    dim: usize,
    kl: usize,
    /// Original upper bandwidth; pivoting fills in up to `kl + ku`.
    kw: usize,
    ldab: usize,
    ab: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedMatrix {
    pub fn new(dim: usize, kl: usize, ku: usize) -> Self {
        let kw = kl + ku;
        let ldab = kl + kw + 1;
        BandedMatrix { dim, kl, kw, ldab, ab: vec![0.0; ldab * dim], pivots: vec![0; dim] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.dim && j < self.dim);
        debug_assert!(j <= i + self.kw && i <= j + self.kl, "({i},{j}) outside band");
        j * self.ldab + (self.kw + i) - j
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let p = self.idx(i, j);
        self.ab[p] = v;
    }

    pub fn clear(&mut self) {
        self.ab.fill(0.0);
    }

    /// In-place LU with row partial pivoting. Returns false on a zero pivot.
    pub fn factor(&mut self) -> bool {
        let m = self.dim;
        for j in 0..m {
            let i_max = (j + self.kl).min(m - 1);
            let mut jp = j;
            let mut best = self.ab[self.idx(j, j)].abs();
            for i in (j + 1)..=i_max {
                let v = self.ab[self.idx(i, j)].abs();
                if v > best {
                    best = v;
                    jp = i;
                }
            }
            self.pivots[j] = jp;
            if best == 0.0 || !best.is_finite() {
                return false;
            }
            let c_max = (j + self.kw).min(m - 1);
            if jp != j {
                for c in j..=c_max {
                    let (a, b) = (self.idx(j, c), self.idx(jp, c));
                    self.ab.swap(a, b);
                }
            }
            let pivot = self.ab[self.idx(j, j)];
            for i in (j + 1)..=i_max {
                let l = self.ab[self.idx(i, j)] / pivot;
                let p = self.idx(i, j);
                self.ab[p] = l;
                if l != 0.0 {
                    for c in (j + 1)..=c_max {
                        let val = self.ab[self.idx(j, c)];
                        let p = self.idx(i, c);
                        self.ab[p] -= l * val;
                    }
                }
            }
        }
        true
    }

    /// Solve `A x = b` in place, after `factor`.
    pub fn solve(&self, b: &mut [f64]) {
        let m = self.dim;
        assert_eq!(b.len(), m);
        for j in 0..m {
            let jp = self.pivots[j];
            if jp != j {
                b.swap(jp, j);
            }
            let bj = b[j];
            if bj != 0.0 {
                let i_max = (j + self.kl).min(m - 1);
                for i in (j + 1)..=i_max {
                    b[i] -= self.ab[self.idx(i, j)] * bj;
                }
            }
        }
        for j in (0..m).rev() {
            b[j] /= self.ab[self.idx(j, j)];
            let bj = b[j];
            if bj != 0.0 {
                let i_min = j.saturating_sub(self.kw);
                for i in i_min..j {
                    b[i] -= self.ab[self.idx(i, j)] * bj;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_dense_lu_on_random_banded_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(dim, kl, ku) in &[(1usize, 0usize, 0usize), (8, 2, 1), (40, 5, 7), (120, 9, 4)] {
            for _ in 0..5 {
                let mut dense = DMatrix::<f64>::zeros(dim, dim);
                let mut banded = BandedMatrix::new(dim, kl, ku);
                for i in 0..dim {
                    for j in 0..dim {
                        if j <= i + ku && i <= j + kl {
                            let v: f64 = rng.gen_range(-1.0..1.0)
                                + if i == j { 3.0 } else { 0.0 };
                            dense[(i, j)] = v;
                            banded.set(i, j, v);
                        }
                    }
                }
                let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let expect = dense
                    .clone()
                    .lu()
                    .solve(&DVector::from_column_slice(&b))
                    .unwrap();
                assert!(banded.factor());
                let mut x = b.clone();
                banded.solve(&mut x);
                for i in 0..dim {
                    assert!(
                        (x[i] - expect[i]).abs() < 1e-9 * (1.0 + expect[i].abs()),
                        "dim={dim} kl={kl} ku={ku} i={i}: {} vs {}",
                        x[i],
                        expect[i]
                    );
                }
            }
        }
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        // [[0, 1], [1, 0]] needs a row swap.
        let mut m = BandedMatrix::new(2, 1, 1);
        m.set(0, 0, 0.0);
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        m.set(1, 1, 0.0);
        assert!(m.factor());
        let mut b = vec![2.0, 3.0];
        m.solve(&mut b);
        assert_eq!(b, vec![3.0, 2.0]);
    }

    #[test]
    fn singular_matrix_detected() {
        let mut m = BandedMatrix::new(2, 1, 1);
        m.set(0, 0, 1.0);
        m.set(0, 1, 2.0);
        m.set(1, 0, 2.0);
        m.set(1, 1, 4.0);
        assert!(!m.factor());
    }
}
