//! Small dense complex linear-algebra helpers shared by the filters.

use matrixmultiply::CGemmOption;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;

/// Dense complex operator on the truncated Hilbert space (column-major).
pub type Operator = DMatrix<C64>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Use the operand as stored.
    N,
    /// Use the conjugate transpose of the operand.
    H,
}

/// `c <- alpha * op(a) * op(b) + beta * c` on square `d x d` column-major slices.
#[inline]
pub fn gemm_slices(d: usize, alpha: C64, a: &[C64], opa: Op, b: &[C64], opb: Op, beta: C64, c: &mut [C64]) {
    debug_assert!(a.len() >= d * d && b.len() >= d * d && c.len() >= d * d);
    // the complex kernel has no conjugate mode, so adjoints go through a copy
    let a_h;
    let a = match opa {
        Op::N => a,
        Op::H => {
            a_h = adjoint_slice(d, a);
            &a_h[..]
        }
    };
    let b_h;
    let b = match opb {
        Op::N => b,
        Op::H => {
            b_h = adjoint_slice(d, b);
            &b_h[..]
        }
    };
    let di = d as isize;
    // SAFETY: Complex64 is repr(C) {re, im}; all slices hold at least d*d
    // column-major elements and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::zgemm(
            CGemmOption::Standard,
            CGemmOption::Standard,
            d,
            d,
            d,
            [alpha.re, alpha.im],
            a.as_ptr() as *const [f64; 2],
            1,
            di,
            b.as_ptr() as *const [f64; 2],
            1,
            di,
            [beta.re, beta.im],
            c.as_mut_ptr() as *mut [f64; 2],
            1,
            di,
        );
    }
}

fn adjoint_slice(d: usize, a: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; d * d];
    adjoint_into(d, a, &mut out);
    out
}

/// `out <- a^dagger` for square column-major slices.
pub fn adjoint_into(d: usize, a: &[C64], out: &mut [C64]) {
    for j in 0..d {
        for i in 0..d {
            out[j + i * d] = a[i + j * d].conj();
        }
    }
}

/// `out <- a * f * a^dagger` (or `a^dagger * f * a` when `adjoint` is set).
/// `a_h` must hold `a^dagger`.
pub fn sandwich(d: usize, a: &[C64], a_h: &[C64], f: &[C64], out: &mut [C64], scratch: &mut [C64], adjoint: bool) {
    let (left, right) = if adjoint { (a_h, a) } else { (a, a_h) };
    gemm_slices(d, ONE, left, Op::N, f, Op::N, ZERO, scratch);
    gemm_slices(d, ONE, scratch, Op::N, right, Op::N, ZERO, out);
}

/// Matrix product through the fast kernel.
pub fn matmul(a: &Operator, b: &Operator) -> Operator {
    let d = a.nrows();
    assert!(a.is_square() && b.shape() == a.shape());
    let mut c = Operator::zeros(d, d);
    gemm_slices(d, ONE, a.as_slice(), Op::N, b.as_slice(), Op::N, ZERO, c.as_mut_slice());
    c
}

pub fn commutator(a: &Operator, b: &Operator) -> Operator {
    matmul(a, b) - matmul(b, a)
}

pub fn anticommutator(a: &Operator, b: &Operator) -> Operator {
    matmul(a, b) + matmul(b, a)
}

pub fn max_abs(a: &Operator) -> f64 {
    a.iter().fold(0.0_f64, |m, z| m.max(z.norm()))
}

/// Max-norm distance between `a` and its adjoint.
pub fn hermiticity_defect(a: &Operator) -> f64 {
    let d = a.nrows();
    let mut worst = 0.0_f64;
    for j in 0..d {
        for i in 0..=j {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Hermitian part `(a + a^dagger) / 2`.
pub fn hermitian_part(a: &Operator) -> Operator {
    (a + a.adjoint()) * C64::new(0.5, 0.0)
}

pub fn trace(a: &Operator) -> C64 {
    a.diagonal().iter().sum()
}

/// `tr[a b]` without forming the product.
pub fn trace_product(a: &Operator, b: &Operator) -> C64 {
    trace_product_slices(a.nrows(), a.as_slice(), b.as_slice())
}

pub fn trace_product_slices(d: usize, a: &[C64], b: &[C64]) -> C64 {
    // tr[a b] = sum_{ij} a[i,j] b[j,i]
    let mut acc = ZERO;
    for j in 0..d {
        for i in 0..d {
            acc += a[i + j * d] * b[j + i * d];
        }
    }
    acc
}

/// Eigen-decomposition of a Hermitian operator, eigenvalues ascending.
pub fn hermitian_eigen(a: &Operator) -> (DVector<f64>, Operator) {
    let eig = hermitian_part(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Operator::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn min_eigenvalue(a: &Operator) -> f64 {
    let (values, _) = hermitian_eigen(a);
    values[0]
}

/// `exp(-i * scale * h)` for Hermitian `h`.
pub fn unitary_exp(h: &Operator, scale: f64) -> Operator {
    let (values, vectors) = hermitian_eigen(h);
    let phases = Operator::from_diagonal(&DVector::from_iterator(
        values.len(),
        values.iter().map(|&e| C64::from_polar(1.0, -scale * e)),
    ));
    matmul(&matmul(&vectors, &phases), &vectors.adjoint())
}

/// Converts a real matrix to complex.
pub fn complexify(a: &DMatrix<f64>) -> Operator {
    a.map(|v| C64::new(v, 0.0))
}

/// Sparse (coordinate) form of an operator, used where the product count matters.
#[derive(Clone, Debug)]
pub struct SparseOp {
    pub dim: usize,
    /// (row, col, value)
    pub entries: Vec<(usize, usize, C64)>,
}

impl SparseOp {
    pub fn from_dense(a: &Operator, tol: f64) -> SparseOp {
        let mut entries = Vec::new();
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                if a[(i, j)].norm() > tol {
                    entries.push((i, j, a[(i, j)]));
                }
            }
        }
        SparseOp { dim: a.nrows(), entries }
    }

    pub fn density(&self) -> f64 {
        self.entries.len() as f64 / (self.dim * self.dim) as f64
    }

    /// `out <- a * m` for a dense column-major `a`.
    pub fn right_multiply(&self, a: &[C64], out: &mut [C64]) {
        let d = self.dim;
        out[..d * d].fill(ZERO);
        for &(i, j, v) in &self.entries {
            let (src, dst) = (&a[i * d..(i + 1) * d], &mut out[j * d..(j + 1) * d]);
            for (o, x) in dst.iter_mut().zip(src) {
                *o += x * v;
            }
        }
    }

    /// `out <- m f m^dagger` (or `m^dagger f m` when `adjoint`).
    pub fn sandwich(&self, f: &[C64], out: &mut [C64], scratch: &mut [C64], adjoint: bool) {
        let d = self.dim;
        scratch[..d * d].fill(ZERO);
        out[..d * d].fill(ZERO);
        if adjoint {
            // scratch = m^dagger f : (m^dagger)[j,i] = conj(m[i,j])
            for &(i, j, v) in &self.entries {
                let v = v.conj();
                for c in 0..d {
                    scratch[j + c * d] += v * f[i + c * d];
                }
            }
            // out = scratch m : out[r, j] += scratch[r, i] m[i, j]
            for &(i, j, v) in &self.entries {
                for r in 0..d {
                    out[r + j * d] += scratch[r + i * d] * v;
                }
            }
        } else {
            // scratch = m f
            for &(i, j, v) in &self.entries {
                for c in 0..d {
                    scratch[i + c * d] += v * f[j + c * d];
                }
            }
            // out = scratch m^dagger : out[r, i] += scratch[r, j] conj(m[i, j])
            for &(i, j, v) in &self.entries {
                let v = v.conj();
                for r in 0..d {
                    out[r + i * d] += scratch[r + j * d] * v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(d: usize, seed: u64) -> Operator {
        let mut s = seed;
        Operator::from_fn(d, d, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let a = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let b = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            C64::new(a, b)
        })
    }

    #[test]
    fn gemm_matches_nalgebra_for_all_transpose_modes() {
        let d = 5;
        let a = sample(d, 1);
        let b = sample(d, 2);
        for (opa, opb) in [(Op::N, Op::N), (Op::H, Op::N), (Op::N, Op::H), (Op::H, Op::H)] {
            let ea = if opa == Op::H { a.adjoint() } else { a.clone() };
            let eb = if opb == Op::H { b.adjoint() } else { b.clone() };
            let mut c = Operator::zeros(d, d);
            gemm_slices(d, ONE, a.as_slice(), opa, b.as_slice(), opb, ZERO, c.as_mut_slice());
            assert!(max_abs(&(c - ea * eb)) < 1e-13);
        }
    }

    #[test]
    fn sparse_sandwich_matches_dense() {
        let d = 6;
        let mut m = sample(d, 3);
        for i in 0..d {
            for j in 0..d {
                if (i as isize - j as isize).abs() > 1 {
                    m[(i, j)] = ZERO;
                }
            }
        }
        let f = sample(d, 4);
        let sp = SparseOp::from_dense(&m, 0.0);
        let mut out = vec![ZERO; d * d];
        let mut scratch = vec![ZERO; d * d];
        sp.sandwich(f.as_slice(), &mut out, &mut scratch, false);
        let want = &m * &f * m.adjoint();
        assert!(max_abs(&(Operator::from_column_slice(d, d, &out) - want)) < 1e-13);
        sp.sandwich(f.as_slice(), &mut out, &mut scratch, true);
        let want = m.adjoint() * &f * &m;
        assert!(max_abs(&(Operator::from_column_slice(d, d, &out) - want)) < 1e-13);
    }

    #[test]
    fn unitary_exp_is_unitary_and_matches_series() {
        let h = hermitian_part(&sample(4, 9));
        let u = unitary_exp(&h, 0.01);
        let id = Operator::identity(4, 4);
        assert!(max_abs(&(&u * u.adjoint() - &id)) < 1e-13);
        let minus_i = C64::new(0.0, -0.01);
        let h1 = &h * minus_i;
        let series = &id + &h1 + &h1 * &h1 * C64::new(0.5, 0.0) + &h1 * &h1 * &h1 * C64::new(1.0 / 6.0, 0.0);
        assert!(max_abs(&(u - series)) < 1e-8);
    }
}
