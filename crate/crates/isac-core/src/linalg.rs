//! Internal dense complex linear-algebra helpers.
//!
//! nalgebra's generic `Complex<f64>` matrix product does not route through
//! SIMD kernels, which matters for the subframe-sized products (128 x 128
//! times 128 x ~11k). Those go through `matrixmultiply::zgemm` here;
//! `num_complex::Complex<f64>` is `#[repr(C)]` and layout-compatible with
//! `[f64; 2]`, and `DMatrix` is column-major, so the raw-pointer calls below
//! use row stride 1 and column stride `nrows`.

use matrixmultiply::{zgemm, CGemmOption};
use nalgebra::linalg::QR;
use nalgebra::SymmetricEigen;
use num_complex::Complex64;

use crate::CMatrix;

/// `c = a * b`.
pub(crate) fn mul_into(c: &mut CMatrix, a: &CMatrix, b: &CMatrix) {
    gemm(c, a, b, [0.0, 0.0]);
}

/// `c += a * b`.
pub(crate) fn mul_acc(c: &mut CMatrix, a: &CMatrix, b: &CMatrix) {
    gemm(c, a, b, [1.0, 0.0]);
}

/// `c = a.adjoint() * b`. The adjoint is materialized; every call site has a
/// small left operand (at most chains x elements), so the copy is cheap.
pub(crate) fn adjoint_mul_into(c: &mut CMatrix, a: &CMatrix, b: &CMatrix) {
    let ah = a.adjoint();
    gemm(c, &ah, b, [0.0, 0.0]);
}

/// `a * b` into a fresh matrix.
pub(crate) fn mul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let mut c = CMatrix::zeros(a.nrows(), b.ncols());
    mul_into(&mut c, a, b);
    c
}

/// `a.adjoint() * b` into a fresh matrix.
pub(crate) fn adjoint_mul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let mut c = CMatrix::zeros(a.ncols(), b.ncols());
    adjoint_mul_into(&mut c, a, b);
    c
}

fn gemm(c: &mut CMatrix, a: &CMatrix, b: &CMatrix, beta: [f64; 2]) {
    let (m, k) = (a.nrows(), a.ncols());
    let n = b.ncols();
    assert_eq!(k, b.nrows(), "gemm: inner dimensions disagree");
    assert_eq!((c.nrows(), c.ncols()), (m, n), "gemm: output shape disagrees");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == [0.0, 0.0] {
            c.fill(Complex64::new(0.0, 0.0));
        }
        return;
    }
    unsafe {
        zgemm(
            CGemmOption::Standard,
            CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            1,
            a.nrows() as isize,
            b.as_ptr() as *const [f64; 2],
            1,
            b.nrows() as isize,
            beta,
            c.as_mut_ptr() as *mut [f64; 2],
            1,
            c.nrows() as isize,
        );
    }
}

/// Eigendecomposition of a Hermitian matrix with a deterministic order:
/// eigenvalues descending, original index ascending on ties. The input is
/// re-hermitized first so callers may pass products that are Hermitian only
/// up to rounding.
pub(crate) fn hermitian_eigen_desc(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let herm = (a + a.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(herm);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .expect("eigenvalue comparison")
            .then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_columns(
        &order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Right-singular basis of `a`: returns `(singular_values, v)` where the
/// columns of the square matrix `v` are the right-singular vectors of `a` in
/// descending singular-value order, computed from the Gram matrix `a^H a`.
/// A zero matrix maps to the identity basis so downstream selections stay
/// deterministic.
pub(crate) fn right_singular_basis(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = a.ncols();
    if a.norm_squared() == 0.0 {
        return (vec![0.0; n], CMatrix::identity(n, n));
    }
    let gram = adjoint_mul(a, a);
    let (lambdas, v) = hermitian_eigen_desc(&gram);
    let sigmas = lambdas.iter().map(|&l| l.max(0.0).sqrt()).collect();
    (sigmas, v)
}

/// Orthonormal basis (as columns) of every direction annihilated by `rows`,
/// i.e. `rows * x ~ 0`; the basis has `rows.ncols() - rank(rows)` columns
/// and `min_dim` is a caller-supplied lower bound on that width.
///
/// Computed backward-stably: a thin QR of `rows^H` gives an orthonormal basis
/// `q` of the row space, and the eigenvectors of the complement projector
/// `I - q q^H` with eigenvalue 1 span its orthogonal complement. The
/// eigenvalue gap of a projector is exactly 1, so the returned directions are
/// accurate to machine precision regardless of the conditioning of `rows`.
///
/// Rank deficiency matters here: rank-one user channels hand the precoder
/// exactly scaled copies of the same row, and keeping the QR column behind a
/// negligible pivot would discard a genuine null direction chosen by rounding
/// noise. Such copies zero the corresponding `R` diagonal entry, so dropping
/// columns with negligible pivots restores the full null space.
pub(crate) fn null_space_basis(rows: &CMatrix, min_dim: usize) -> CMatrix {
    let n = rows.ncols();
    assert!(min_dim <= n, "null space dimension exceeds ambient dimension");
    if rows.nrows() == 0 || rows.norm_squared() == 0.0 {
        return CMatrix::identity(n, n);
    }
    let qr = QR::new(rows.adjoint());
    let q = qr.q();
    let r = qr.r();
    let tol = rows.norm() * n.max(rows.nrows()) as f64 * f64::EPSILON;
    let kept: Vec<usize> = (0..q.ncols()).filter(|&i| r[(i, i)].norm() > tol).collect();
    let rank = kept.len();
    assert!(n - rank >= min_dim, "rows span more than they may");
    let mut proj = CMatrix::identity(n, n);
    for &i in &kept {
        let col = q.column(i);
        proj.gerc(Complex64::new(-1.0, 0.0), &col, &col, Complex64::new(1.0, 0.0));
    }
    let (_, vectors) = hermitian_eigen_desc(&proj);
    vectors.columns(0, n - rank).into_owned()
}

/// Squared Frobenius norm of each row.
pub(crate) fn row_powers(a: &CMatrix) -> Vec<f64> {
    (0..a.nrows()).map(|i| a.row(i).norm_squared()).collect()
}
