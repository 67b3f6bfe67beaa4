//! Dense symmetric eigenvalues and a few matrix helpers.
//!
//! The eigensolver is a cyclic Jacobi sweep: deterministic, no pivot
//! randomization, accurate to a few ulps of the matrix norm for the small
//! (tens of rows) matrices this crate works with.

use nalgebra::{DMatrix, DVector};

const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Cyclic Jacobi eigen-decomposition. Only the upper triangle is read after
/// symmetrization `(m + mᵀ)/2`.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymEigen {
    assert!(m.is_square(), "sym_eigen requires a square matrix");
    let n = m.nrows();
    let mut a = symmetrize(m);
    let mut v = DMatrix::<f64>::identity(n, n);
    if n == 0 {
        return SymEigen {
            values: DVector::zeros(0),
            vectors: v,
        };
    }

    let scale = a.norm().max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-17 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &v.column(i));
    }
    SymEigen { values, vectors }
}

// Apply the Jacobi rotation J(p, q, θ) as A ← JᵀAJ and V ← VJ.
fn rotate(a: &mut DMatrix<f64>, v: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).max()
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigen(m).min()
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    max_eigenvalue(&gram).max(0.0).sqrt()
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// `‖x‖²_W = xᵀ W x`.
pub fn weighted_sq_norm(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (x.transpose() * w * x)[(0, 0)]
}

/// Projects a symmetric matrix onto `{X : X ⪰ floor·I}` in Frobenius norm.
pub fn clamp_spectrum(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = sym_eigen(m);
    let clamped = eig.values.map(|l| l.max(floor));
    let v = &eig.vectors;
    symmetrize(&(v * DMatrix::from_diagonal(&clamped) * v.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn diagonal_matrix_eigenvalues_sorted() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0]));
        let e = sym_eigen(&m);
        assert_eq!(e.values.as_slice(), &[-1.0, 2.0, 3.0]);
    }

    #[test]
    fn reconstructs_random_symmetric() {
        let m = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + (i == j) as u8 as f64);
        let m = symmetrize(&m);
        let e = sym_eigen(&m);
        let rec = &e.vectors * DMatrix::from_diagonal(&e.values) * e.vectors.transpose();
        assert_relative_eq!(rec, m, epsilon = 1e-12);
        let orth = e.vectors.transpose() * &e.vectors;
        assert_relative_eq!(orth, DMatrix::identity(6, 6), epsilon = 1e-12);
    }

    #[test]
    fn spectral_norm_of_row_vector() {
        let c = DMatrix::from_row_slice(1, 4, &[0.1, 0.3, 0.8, 0.5]);
        assert_relative_eq!(spectral_norm(&c), 0.99f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn block_diag_layout() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(2, 2, 1.0);
        let d = block_diag(&[a, b]);
        assert_eq!(d.shape(), (3, 3));
        assert_eq!(d[(0, 0)], 2.0);
        assert_eq!(d[(0, 1)], 0.0);
        assert_eq!(d[(2, 1)], 1.0);
    }

    #[test]
    fn clamp_spectrum_raises_floor() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 0.5]));
        let c = clamp_spectrum(&m, 0.1);
        assert_relative_eq!(c[(0, 0)], 0.1, epsilon = 1e-15);
        assert_relative_eq!(c[(1, 1)], 0.5, epsilon = 1e-15);
    }
}
