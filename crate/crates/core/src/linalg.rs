//! Dense linear-algebra kernels shared by the solver and learner layers:
//! Kronecker/vectorization utilities, half-vectorization ("hat") maps,
//! Lyapunov solves, PBH rank tests, and stable-subspace extraction for
//! Hamiltonian matrices via the matrix sign function.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Kronecker product A ⊗ B.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * aij));
        }
    }
    out
}

/// Kronecker product of two vectors, x ⊗ y, laid out x-major:
/// entry `i * y.len() + j` equals `x[i] * y[j]`.
pub fn kron_vec(x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(x.len() * y.len());
    for i in 0..x.len() {
        for j in 0..y.len() {
            out[i * y.len() + j] = x[i] * y[j];
        }
    }
    out
}

/// Column-stacking vectorization: vec(A)[j*rows + i] = A[i,j].
pub fn vec_col(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_col`] for an `rows × cols` matrix.
pub fn unvec_col(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Length of the half-vectorization of an n×n symmetric matrix.
pub fn hat_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of the (i, j) entry, i <= j, in the row-major upper-triangle
/// ordering used by the hat vectors.
pub fn hat_index(i: usize, j: usize, n: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * n - i * (i + 1) / 2 + j
}

/// Hat vector of an outer-product (data-side) matrix: diagonal entries taken
/// as-is, off-diagonal entries doubled, so that `hat_from_outer(x xᵀ) · p`
/// equals `xᵀ P x` when `p` holds the plain entries of symmetric P.
pub fn hat_from_outer(s: &DMatrix<f64>) -> DVector<f64> {
    let n = s.nrows();
    let mut out = DVector::zeros(hat_len(n));
    for i in 0..n {
        for j in i..n {
            out[hat_index(i, j, n)] = if i == j { s[(i, i)] } else { 2.0 * s[(i, j)] };
        }
    }
    out
}

/// Inverse of [`hat_from_outer`]: rebuilds the symmetric outer-product matrix,
/// halving the doubled off-diagonal entries.
pub fn outer_from_hat(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let e = v[hat_index(i, j, n)];
            let val = if i == j { e } else { 0.5 * e };
            out[(i, j)] = val;
            out[(j, i)] = val;
        }
    }
    out
}

/// Rebuilds a symmetric matrix from plain upper-triangle coefficients
/// (the parameter-side convention: no doubling on either side).
pub fn symmetric_from_upper(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let e = v[hat_index(i, j, n)];
            out[(i, j)] = e;
            out[(j, i)] = e;
        }
    }
    out
}

/// Symmetric part (A + Aᵀ)/2.
pub fn sym_part(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Relative Frobenius asymmetry ‖A − Aᵀ‖ / max(1, ‖A‖).
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).norm() / a.norm().max(1.0)
}

pub fn is_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    a.is_square() && asymmetry(a) <= rel_tol
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Symmetric positive-semidefinite square root via eigendecomposition,
/// clipping eigenvalues below `clip` to zero.
pub fn sqrtm_psd(a: &DMatrix<f64>, clip: f64) -> Result<DMatrix<f64>> {
    if !is_symmetric(a, 1e-9) {
        return Err(Error::NotSymmetric("sqrtm operand".into()));
    }
    let eig = sym_part(a).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    for &lam in eig.eigenvalues.iter() {
        if lam < -1e-9 * scale {
            return Err(Error::NotPositiveSemidefinite(format!(
                "eigenvalue {lam:.3e} in sqrtm operand"
            )));
        }
    }
    let roots = eig.eigenvalues.map(|l| if l < clip { 0.0 } else { l.sqrt() });
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    out *= eig.eigenvectors.transpose();
    Ok(sym_part(&out))
}

/// Minimum eigenvalue of the symmetric part.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_part(a)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Solves FᵀX + XF + W = 0 by LU on the Kronecker-vectorized system
/// (I ⊗ Fᵀ + Fᵀ ⊗ I) vec(X) = −vec(W). Adequate for the desk-scale
/// dimensions used here (N ≤ 16). The output is symmetrized when W is.
pub fn solve_lyapunov(f: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    if !f.is_square() || w.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "lyapunov: F is {}x{}, W is {}x{}",
            f.nrows(),
            f.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    let ft = f.transpose();
    let eye = DMatrix::identity(n, n);
    let big = kron(&eye, &ft) + kron(&ft, &eye);
    let rhs = -vec_col(w);
    let lu = big.lu();
    let sol = lu.solve(&rhs).ok_or(Error::DegenerateLyapunov)?;
    let x = unvec_col(&sol, n, n);
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("lyapunov solution".into()));
    }
    Ok(if is_symmetric(w, 1e-9) { sym_part(&x) } else { x })
}

/// Counts of eigenvalue real-part signs, with |Re λ| <= tol treated as
/// on-axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplittingCounts {
    pub negative: usize,
    pub positive: usize,
    pub on_axis: usize,
}

impl SplittingCounts {
    pub fn of(a: &DMatrix<f64>, tol: f64) -> Self {
        let mut c = SplittingCounts { negative: 0, positive: 0, on_axis: 0 };
        for z in a.complex_eigenvalues().iter() {
            if z.re < -tol {
                c.negative += 1;
            } else if z.re > tol {
                c.positive += 1;
            } else {
                c.on_axis += 1;
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.negative + self.positive + self.on_axis
    }
}

/// Stable invariant subspace of a real matrix with no eigenvalues on the
/// imaginary axis, computed with the scaled Newton iteration for the matrix
/// sign function. Returns an orthonormal basis (columns) of the subspace
/// spanned by eigenvalues with negative real part.
pub fn stable_subspace(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = h.nrows();
    if !h.is_square() {
        return Err(Error::DimensionMismatch("stable_subspace: nonsquare".into()));
    }
    let mut s = h.clone();
    let mut converged = false;
    for _ in 0..100 {
        let lu = s.clone().lu();
        let det: f64 = lu.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::SplittingFailure(
                "singular iterate in sign-function Newton step".into(),
            ));
        }
        let sinv = lu
            .try_inverse()
            .ok_or_else(|| Error::SplittingFailure("iterate not invertible".into()))?;
        let c = det.abs().powf(1.0 / n as f64);
        let next = (&s / c + sinv * c) * 0.5;
        let step = (&next - &s).norm();
        let done = step <= 1e-13 * next.norm().max(1.0);
        s = next;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SplittingFailure("sign iteration did not converge".into()));
    }
    let defect = (&s * &s - DMatrix::identity(n, n)).norm();
    if defect > 1e-6 * (n as f64) {
        return Err(Error::SplittingFailure(format!(
            "sign(H)^2 - I residual {defect:.3e}; eigenvalues too close to the imaginary axis"
        )));
    }
    // Projector onto the stable subspace; its column space is extracted with
    // a rank-revealing QR.
    let proj = (DMatrix::identity(n, n) - &s) * 0.5;
    let rank = proj.diagonal().sum().round();
    if !rank.is_finite() || rank < 0.5 {
        return Err(Error::SplittingFailure("stable subspace is empty".into()));
    }
    let dim = rank as usize;
    let qr = proj.col_piv_qr();
    let q = qr.q();
    let r = qr.unpack_r();
    let lead = r[(0, 0)].abs();
    if dim < n {
        let tail = r[(dim, dim)].abs();
        if lead == 0.0 || tail > 1e-7 * lead {
            return Err(Error::SplittingFailure(format!(
                "projector rank ambiguous: |r[{dim},{dim}]| / |r[0,0]| = {:.3e}",
                tail / lead.max(f64::MIN_POSITIVE)
            )));
        }
    }
    Ok(q.columns(0, dim).into_owned())
}

/// Condition number from the singular values of a (generally rectangular)
/// matrix; infinite when rank-deficient to machine precision.
pub fn cond(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Numerical rank: number of singular values above `factor * max(dims) * σ_max`.
pub fn numerical_rank(a: &DMatrix<f64>, factor: f64) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let thresh = factor * a.nrows().max(a.ncols()) as f64 * sv.max();
    sv.iter().filter(|&&s| s > thresh).count()
}

fn complex_rank(a: &DMatrix<Complex<f64>>, rel_tol: f64) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    a.map(|v| Complex::new(v, 0.0))
}

/// PBH stabilizability test: rank [A − λI, B] = n at every eigenvalue λ of A
/// with Re λ >= −tol.
pub fn pbh_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let n = a.nrows();
    let eigs = a.complex_eigenvalues();
    let ac = to_complex(a);
    let bc = to_complex(b);
    for lam in eigs.iter() {
        if lam.re < -tol {
            continue;
        }
        let mut m = DMatrix::zeros(n, n + b.ncols());
        m.view_mut((0, 0), (n, n)).copy_from(&ac);
        for i in 0..n {
            m[(i, i)] -= lam;
        }
        m.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        if complex_rank(&m, 1e-9) < n {
            return false;
        }
    }
    true
}

/// PBH observability test: rank [A − λI; C] = n at every eigenvalue λ of A.
pub fn pbh_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let eigs = a.complex_eigenvalues();
    let ac = to_complex(a);
    let cc = to_complex(c);
    for lam in eigs.iter() {
        let mut m = DMatrix::zeros(n + c.nrows(), n);
        m.view_mut((0, 0), (n, n)).copy_from(&ac);
        for i in 0..n {
            m[(i, i)] -= lam;
        }
        m.view_mut((n, 0), (c.nrows(), n)).copy_from(&cc);
        if complex_rank(&m, 1e-9) < n {
            return false;
        }
    }
    true
}

/// Greedy nearest-neighbor pairing distance between two equal-length complex
/// multisets: pairs each left value with its closest unused right value and
/// returns the largest paired distance.
pub fn multiset_pairing_distance(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
    assert_eq!(a.len(), b.len(), "pairing requires equal multiset sizes");
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for za in a {
        let mut best = f64::INFINITY;
        let mut best_j = usize::MAX;
        for (j, zb) in b.iter().enumerate() {
            if used[j] {
                continue;
            }
            let d = (za - zb).norm();
            if d < best {
                best = d;
                best_j = j;
            }
        }
        used[best_j] = true;
        worst = worst.max(best);
    }
    worst
}
