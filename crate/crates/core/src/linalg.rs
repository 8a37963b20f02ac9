//! Small dense linear-algebra helpers on `DMatrix<f64>`.

use nalgebra::DMatrix;

/// Thin orthonormal basis of the column span of `a` (Householder QR).
pub fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return a.clone();
    }
    let q = a.clone().qr().q();
    q.columns(0, a.ncols()).into_owned()
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0.0;
    }
    a.singular_values().max()
}

/// Smallest singular value over the columns' domain: `min_{|v|=1} |A v|`.
/// For an injective restriction this is `1 / ‖A⁻¹‖`.
pub fn conorm(a: &DMatrix<f64>) -> f64 {
    if a.ncols() == 0 {
        return f64::INFINITY;
    }
    if a.nrows() < a.ncols() {
        return 0.0;
    }
    a.singular_values().min()
}

/// Sine of the largest principal angle between the spans of two
/// orthonormal column sets of equal dimension.
pub fn subspace_distance(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> f64 {
    if q1.ncols() == 0 {
        return 0.0;
    }
    let proj = q1 - q2 * (q2.transpose() * q1);
    spectral_norm(&proj).min(1.0)
}

/// Smallest principal angle (radians) between two orthonormal column sets.
pub fn min_principal_angle(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> f64 {
    if q1.ncols() == 0 || q2.ncols() == 0 {
        return std::f64::consts::FRAC_PI_2;
    }
    let cos_max = spectral_norm(&(q1.transpose() * q2)).min(1.0);
    cos_max.acos()
}

/// Right singular vectors of `a` sorted by decreasing singular value,
/// returned as columns, with the singular values.
pub fn right_singular(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = a.ncols();
    // eigen-decomposition of AᵀA is too lossy for wide dynamic ranges; use SVD.
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap());
    let mut v = DMatrix::zeros(n, order.len());
    for (c, &i) in order.iter().enumerate() {
        v.set_column(c, &v_t.row(i).transpose());
    }
    (v, order.iter().map(|&i| sv[i]).collect())
}

/// Left singular vectors sorted by decreasing singular value.
pub fn left_singular(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    right_singular(&a.transpose())
}

/// Dominant `k`-dimensional invariant subspace of `m` by orthogonal
/// subspace iteration. Returns an orthonormal basis.
pub fn dominant_subspace(m: &DMatrix<f64>, k: usize, max_iter: usize) -> DMatrix<f64> {
    let n = m.nrows();
    if k == 0 {
        return DMatrix::zeros(n, 0);
    }
    // deterministic, generic start
    let mut q = orthonormalize(&DMatrix::from_fn(n, k, |i, j| {
        1.0 / (1.0 + (i + 2 * j) as f64) + if i == j { 1.0 } else { 0.0 }
    }));
    for _ in 0..max_iter {
        let next = orthonormalize(&(m * &q));
        let moved = subspace_distance(&next, &q);
        q = next;
        if moved < 1e-14 {
            break;
        }
    }
    q
}
