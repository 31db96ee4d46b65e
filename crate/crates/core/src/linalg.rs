//! Small dense symmetric eigensolver used for the K×K Gram route to singular
//! values of wide matrices.

use crate::scalar::{matmul, Scalar};

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen<T> {
    /// Eigenvalues in descending order.
    pub values: Vec<T>,
    /// Row-major `n×n`; column `j` is the eigenvector of `values[j]`.
    pub vectors: Vec<T>,
    pub n: usize,
}

/// Cyclic Jacobi rotations on a row-major symmetric `n×n` matrix.
pub fn sym_eigen<T: Scalar>(a: &[T], n: usize) -> SymEigen<T> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let two = T::lit(2.0);
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let diag: T = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum();
        if off <= T::epsilon() * T::epsilon() * diag || off.is_zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.is_zero() {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (two * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap());
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![T::zero(); n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    SymEigen { values, vectors, n }
}

/// `X·Xᵀ` for a row-major `rows×cols` matrix.
pub fn gram_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut g = vec![T::zero(); rows * rows];
    T::gemm(
        rows,
        cols,
        rows,
        T::one(),
        x,
        cols as isize,
        1,
        x,
        1,
        cols as isize,
        T::zero(),
        &mut g,
        rows as isize,
        1,
    );
    // Symmetrize away rounding asymmetry.
    for i in 0..rows {
        for j in i + 1..rows {
            let s = (g[i * rows + j] + g[j * rows + i]) * T::lit(0.5);
            g[i * rows + j] = s;
            g[j * rows + i] = s;
        }
    }
    g
}

/// Singular values (descending) of a wide `rows×cols` matrix through the
/// eigenvalues of its Gram matrix, clamped at zero, together with the left
/// singular vectors.
pub fn singular_values_via_gram<T: Scalar>(x: &[T], rows: usize, cols: usize) -> SymEigen<T> {
    let g = gram_rows(x, rows, cols);
    let mut e = sym_eigen(&g, rows);
    for v in e.values.iter_mut() {
        *v = v.max(T::zero()).sqrt();
    }
    e
}

/// `A·B` convenience wrapper returning a fresh buffer.
pub fn mat_mul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul(m, k, n, a, b, &mut c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_is_already_decomposed() {
        let a = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let e = sym_eigen::<f64>(&a, 3);
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn eigenpairs_reconstruct_matrix() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, -0.25, 0.5, -0.25, 1.0];
        let e = sym_eigen::<f64>(&a, 3);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3)
                    .map(|k| e.vectors[i * 3 + k] * e.values[k] * e.vectors[j * 3 + k])
                    .sum();
                assert!((r - a[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_values_of_embedded_diagonal() {
        // diag(3,2,0) embedded in 3×5.
        let mut x = vec![0.0f64; 15];
        x[0] = 3.0;
        x[6] = -2.0;
        let e = singular_values_via_gram(&x, 3, 5);
        assert_eq!(e.values, vec![3.0, 2.0, 0.0]);
    }
}
