//! Dense Hermitian eigen-decomposition and propagator kernels.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::spin::CMatrix;

/// Eigenpairs of a Hermitian matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns in the order of `values`.
    pub vectors: CMatrix,
}

/// True when every imaginary part is exactly zero.
pub fn is_real(m: &CMatrix) -> bool {
    m.iter().all(|z| z.im == 0.0)
}

/// Diagonalizes a Hermitian matrix. Real input takes the real symmetric path.
pub fn eigh(h: &CMatrix) -> Eigen {
    let n = h.nrows();
    let (values, vectors) = if is_real(h) {
        let re = DMatrix::from_fn(n, n, |i, j| h[(i, j)].re);
        let se = SymmetricEigen::new(re);
        (
            se.eigenvalues.as_slice().to_vec(),
            se.eigenvectors.map(|x| Complex64::new(x, 0.0)),
        )
    } else {
        let se = SymmetricEigen::new(h.clone());
        (se.eigenvalues.as_slice().to_vec(), se.eigenvectors)
    };
    sort_eigen(values, vectors)
}

fn sort_eigen(values: Vec<f64>, vectors: CMatrix) -> Eigen {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let n = vectors.nrows();
    let sorted_vecs = CMatrix::from_fn(n, order.len(), |i, k| vectors[(i, order[k])]);
    Eigen {
        values: order.iter().map(|&k| values[k]).collect(),
        vectors: sorted_vecs,
    }
}

/// `exp(-i 2π H t)` for `H` in MHz and `t` in μs.
pub fn propagator(h: &CMatrix, t_us: f64) -> CMatrix {
    let e = eigh(h);
    propagator_from_eigen(&e, t_us)
}

pub fn propagator_from_eigen(e: &Eigen, t_us: f64) -> CMatrix {
    let phases = DVector::from_iterator(
        e.values.len(),
        e.values
            .iter()
            .map(|&w| Complex64::from_polar(1.0, -std::f64::consts::TAU * w * t_us)),
    );
    let mut left = e.vectors.clone();
    for (k, mut col) in left.column_iter_mut().enumerate() {
        col *= phases[k];
    }
    left * e.vectors.adjoint()
}

/// `A ρ A†`.
pub fn sandwich(a: &CMatrix, rho: &CMatrix) -> CMatrix {
    a * rho * a.adjoint()
}

/// Largest element magnitude.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Frobenius norm.
pub fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `‖H − H†‖_max`.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    max_abs(&(m - m.adjoint()))
}

/// Reorders the rows and columns of `m` into `basis` (a list of global indices).
pub fn restrict(m: &CMatrix, basis: &[usize]) -> CMatrix {
    CMatrix::from_fn(basis.len(), basis.len(), |i, j| m[(basis[i], basis[j])])
}
