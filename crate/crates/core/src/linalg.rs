//! Dense complex linear algebra helpers on top of nalgebra.
//!
//! Vectorization is row-major: `vec(f)[i*D + j] = f[(i, j)]`, so that
//! `kron(A, conj(B)) * vec(f) == vec(A f B^†)`.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen, SVD};
pub use num_complex::Complex64 as C64;

pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn eye(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn zeros(n: usize) -> CMat {
    CMat::zeros(n, n)
}

pub fn scaled_eye(n: usize, s: C64) -> CMat {
    CMat::from_diagonal_element(n, n, s)
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn vec_rm(f: &CMat) -> CVec {
    let (n, m) = f.shape();
    CVec::from_fn(n * m, |k, _| f[(k / m, k % m)])
}

pub fn unvec_rm(v: &CVec, n: usize) -> CMat {
    assert_eq!(v.len(), n * n, "unvec: length is not a square");
    CMat::from_fn(n, n, |i, j| v[i * n + j])
}

/// Row vector `b` with `b * vec(f) == tr[x f]`.
pub fn bra_rm(x: &CMat) -> CVec {
    vec_rm(&x.transpose())
}

pub fn comm(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

pub fn anticomm(a: &CMat, b: &CMat) -> CMat {
    a * b + b * a
}

/// `tr[a b]` without forming the product.
pub fn trace_prod(a: &CMat, b: &CMat) -> C64 {
    let n = a.nrows();
    let mut s = ZERO;
    for i in 0..n {
        for j in 0..a.ncols() {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

/// Hilbert-Schmidt inner product `tr[a^† b]`.
pub fn hs_inner(a: &CMat, b: &CMat) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn fro(a: &CMat) -> f64 {
    a.norm()
}

pub fn hermitize(a: &CMat) -> CMat {
    (a + a.adjoint()) * c(0.5, 0.0)
}

pub fn hermiticity_defect(a: &CMat) -> f64 {
    (a - a.adjoint()).norm()
}

pub fn is_finite(a: &CMat) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(a: &CMat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Condition number in the 2-norm (infinite for singular input).
pub fn cond(a: &CMat) -> f64 {
    let s = a.singular_values();
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn inverse(a: &CMat) -> Option<CMat> {
    let inv = a.clone().try_inverse()?;
    if is_finite(&inv) {
        Some(inv)
    } else {
        None
    }
}

pub fn solve(a: &CMat, b: &CVec) -> Option<CVec> {
    let x = a.clone().lu().solve(b)?;
    if x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Some(x)
    } else {
        None
    }
}

pub fn expm(a: &CMat) -> CMat {
    a.exp()
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
pub fn eigh(a: &CMat) -> (Vec<f64>, CMat) {
    let n = a.nrows();
    let se = SymmetricEigen::new(hermitize(a));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| se.eigenvalues[i].partial_cmp(&se.eigenvalues[j]).unwrap());
    let vals = idx.iter().map(|&i| se.eigenvalues[i]).collect();
    let vecs = CMat::from_fn(n, n, |r, k| se.eigenvectors[(r, idx[k])]);
    (vals, vecs)
}

/// Apply a scalar function to the spectrum of a Hermitian matrix.
pub fn herm_fn(a: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let (w, u) = eigh(a);
    let d = CMat::from_diagonal(&CVec::from_iterator(w.len(), w.iter().map(|&x| c(f(x), 0.0))));
    &u * d * u.adjoint()
}

/// Positive square root of a PSD matrix with eigenvalues floored at `floor`.
pub fn psd_sqrt(a: &CMat, floor: f64) -> CMat {
    herm_fn(a, |x| x.max(floor).sqrt())
}

pub fn psd_inv_sqrt(a: &CMat, floor: f64) -> CMat {
    herm_fn(a, |x| 1.0 / x.max(floor).sqrt())
}

/// Eigenvalues of a general complex matrix (Schur form diagonal).
pub fn eigvals(a: &CMat) -> Vec<C64> {
    let n = a.nrows();
    if n == 0 {
        return vec![];
    }
    let t = schur(a).1;
    (0..n).map(|i| t[(i, i)]).collect()
}

/// Complex Schur form `(U, T)` with `a = U T U^†`. nalgebra's QR iteration
/// can stall on matrices with a zero spectrum, so on failure the iteration is
/// rerun on a shifted copy.
pub fn schur(a: &CMat) -> (CMat, CMat) {
    let n = a.nrows();
    if let Some(s) = Schur::try_new(a.clone(), f64::EPSILON, 100 * n.max(10)) {
        return s.unpack();
    }
    let shift = c(1.0 + a.norm(), 0.0);
    let b = a + CMat::identity(n, n) * shift;
    let (u, mut t) = Schur::try_new(b, f64::EPSILON, 0).expect("unbounded Schur iteration").unpack();
    for i in 0..n {
        t[(i, i)] -= shift;
    }
    (u, t)
}

/// Eigenvalues and right eigenvectors (unit 2-norm columns) of a general
/// complex matrix, via the Schur form and triangular back-substitution.
pub fn eig(a: &CMat) -> (Vec<C64>, CMat) {
    let n = a.nrows();
    let (u, t) = schur(a);
    let scale = max_abs(&t).max(f64::MIN_POSITIVE);
    let mut vecs = CMat::zeros(n, n);
    for k in 0..n {
        let lam = t[(k, k)];
        let mut y = CVec::zeros(n);
        y[k] = ONE;
        for j in (0..k).rev() {
            let mut s = ZERO;
            for i in (j + 1)..=k {
                s += t[(j, i)] * y[i];
            }
            let mut den = t[(j, j)] - lam;
            if den.norm() < f64::EPSILON * scale {
                den = c(f64::EPSILON * scale, 0.0);
            }
            y[j] = -s / den;
        }
        let v = &u * y;
        let nv = v.norm();
        vecs.set_column(k, &(v / c(nv, 0.0)));
    }
    ((0..n).map(|i| t[(i, i)]).collect(), vecs)
}

/// Index of the eigenvalue with the largest real part.
pub fn argmax_re(vals: &[C64]) -> usize {
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if v.re > vals[best].re {
            best = i;
        }
    }
    best
}

/// Unit vector spanning the (numerical) null space of `a`: the right
/// singular vector of the smallest singular value.
pub fn null_vector(a: &CMat) -> (CVec, f64) {
    let svd = SVD::new(a.clone(), false, true);
    let vt = svd.v_t.expect("v_t requested");
    let s = &svd.singular_values;
    let mut k = 0;
    for i in 0..s.len() {
        if s[i] < s[k] {
            k = i;
        }
    }
    let v = vt.row(k).adjoint();
    (v, s[k])
}

/// Deterministic phase: make the first entry with non-negligible modulus
/// real and positive.
pub fn fix_phase(v: &mut CVec) {
    let m = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if m == 0.0 {
        return;
    }
    if let Some(z) = v.iter().find(|z| z.norm() > 1e-8 * m).cloned() {
        let ph = z.conj() / c(z.norm(), 0.0);
        *v *= ph;
    }
}

/// Centered differences on a uniform grid (second-order one-sided at the ends).
pub fn grid_derivative(samples: &[CMat], h: f64) -> Vec<CMat> {
    let n = samples.len();
    assert!(n >= 3, "need at least three samples to differentiate");
    let mut out = Vec::with_capacity(n);
    let inv = c(1.0 / h, 0.0);
    let half = c(0.5 / h, 0.0);
    out.push((&samples[0] * c(-1.5, 0.0) + &samples[1] * c(2.0, 0.0) - &samples[2] * c(0.5, 0.0)) * inv);
    for k in 1..n - 1 {
        out.push((&samples[k + 1] - &samples[k - 1]) * half);
    }
    out.push(
        (&samples[n - 1] * c(1.5, 0.0) - &samples[n - 2] * c(2.0, 0.0) + &samples[n - 3] * c(0.5, 0.0)) * inv,
    );
    out
}

/// Fourth-order differences: five-point central inside, one-sided
/// five-point stencils at the two points next to each end.
pub fn grid_derivative4(samples: &[CMat], h: f64) -> Vec<CMat> {
    let n = samples.len();
    if n < 5 {
        return grid_derivative(samples, h);
    }
    let f = |k: usize| &samples[k];
    let lin = |cs: [f64; 5], ks: [usize; 5]| {
        let mut acc = f(ks[0]) * c(cs[0], 0.0);
        for i in 1..5 {
            acc += f(ks[i]) * c(cs[i], 0.0);
        }
        acc * c(1.0 / (12.0 * h), 0.0)
    };
    let m = n - 1;
    (0..n)
        .map(|k| {
            if k == 0 {
                lin([-25.0, 48.0, -36.0, 16.0, -3.0], [0, 1, 2, 3, 4])
            } else if k == 1 {
                lin([-3.0, -10.0, 18.0, -6.0, 1.0], [0, 1, 2, 3, 4])
            } else if k == m {
                lin([25.0, -48.0, 36.0, -16.0, 3.0], [m, m - 1, m - 2, m - 3, m - 4])
            } else if k == m - 1 {
                lin([3.0, 10.0, -18.0, 6.0, -1.0], [m, m - 1, m - 2, m - 3, m - 4])
            } else {
                lin([1.0, -8.0, 8.0, -1.0, 0.0], [k - 2, k - 1, k + 1, k + 2, k])
            }
        })
        .collect()
}

/// Trapezoid rule for complex samples on a uniform grid.
pub fn trapezoid(values: &[C64], h: f64) -> C64 {
    let n = values.len();
    if n < 2 {
        return ZERO;
    }
    let inner: C64 = values[1..n - 1].iter().sum();
    (inner + (values[0] + values[n - 1]) * 0.5) * h
}

/// Restarted GMRES on a matrix-valued unknown with the Hilbert-Schmidt
/// inner product. Returns the solution and the final relative residual.
pub fn gmres<F>(op: F, b: &CMat, x0: Option<&CMat>, tol: f64, max_iter: usize, restart: usize) -> (CMat, f64)
where
    F: Fn(&CMat) -> CMat,
{
    let bnorm = b.norm();
    let mut x = x0.cloned().unwrap_or_else(|| CMat::zeros(b.nrows(), b.ncols()));
    if bnorm == 0.0 {
        return (CMat::zeros(b.nrows(), b.ncols()), 0.0);
    }
    let mut iters = 0;
    loop {
        let r = b - op(&x);
        let beta = r.norm();
        if beta <= tol * bnorm || iters >= max_iter {
            return (x, beta / bnorm);
        }
        let m = restart.max(1);
        let mut basis: Vec<CMat> = vec![r / c(beta, 0.0)];
        let mut h = CMat::zeros(m + 1, m);
        let mut k_used = 0;
        for k in 0..m {
            let mut w = op(&basis[k]);
            for (j, vj) in basis.iter().enumerate() {
                let hj = hs_inner(vj, &w);
                h[(j, k)] = hj;
                w -= vj * hj;
            }
            // one reorthogonalization pass
            for (j, vj) in basis.iter().enumerate() {
                let hj = hs_inner(vj, &w);
                h[(j, k)] += hj;
                w -= vj * hj;
            }
            let wn = w.norm();
            h[(k + 1, k)] = c(wn, 0.0);
            k_used = k + 1;
            iters += 1;
            // residual estimate via small least squares
            let hk = h.view((0, 0), (k + 2, k + 1)).into_owned();
            let mut rhs = CVec::zeros(k + 2);
            rhs[0] = c(beta, 0.0);
            let y = least_squares(&hk, &rhs);
            let res = (&rhs - &hk * &y).norm();
            if wn <= 1e-300 || res <= tol * bnorm || iters >= max_iter {
                break;
            }
            basis.push(w / c(wn, 0.0));
        }
        let hk = h.view((0, 0), (k_used + 1, k_used)).into_owned();
        let mut rhs = CVec::zeros(k_used + 1);
        rhs[0] = c(beta, 0.0);
        let y = least_squares(&hk, &rhs);
        for j in 0..k_used {
            x += &basis[j] * y[j];
        }
    }
}

fn least_squares(a: &CMat, b: &CVec) -> CVec {
    let svd = SVD::new(a.clone(), true, true);
    let eps = 1e-15 * svd.singular_values.iter().cloned().fold(0.0, f64::max);
    svd.solve(b, eps).expect("svd solve")
}

/// Result of an Arnoldi run: Ritz values sorted by decreasing real part
/// and the Ritz vector of the first one.
pub struct ArnoldiResult {
    pub values: Vec<C64>,
    pub vector: CMat,
    pub residual: f64,
    pub iterations: usize,
}

/// Restarted Arnoldi for the eigenvalue of largest real part of a linear
/// map on `n x n` matrices.
pub fn arnoldi_rightmost<F>(op: F, n: usize, start: &CMat, krylov: usize, tol: f64, max_iter: usize) -> ArnoldiResult
where
    F: Fn(&CMat) -> CMat,
{
    let dim = n * n;
    let m = krylov.min(dim).max(2);
    let mut v0 = start.clone();
    let mut iters = 0;
    let mut best: Option<ArnoldiResult> = None;
    loop {
        let nv = v0.norm();
        v0 /= c(nv, 0.0);
        let mut basis = vec![v0.clone()];
        let mut h = CMat::zeros(m + 1, m);
        let mut k_used = 0;
        for k in 0..m {
            let mut w = op(&basis[k]);
            for _ in 0..2 {
                for (j, vj) in basis.iter().enumerate() {
                    let hj = hs_inner(vj, &w);
                    h[(j, k)] += hj;
                    w -= vj * hj;
                }
            }
            let wn = w.norm();
            h[(k + 1, k)] = c(wn, 0.0);
            k_used = k + 1;
            iters += 1;
            if wn < 1e-14 {
                break;
            }
            basis.push(w / c(wn, 0.0));
        }
        let hm = h.view((0, 0), (k_used, k_used)).into_owned();
        let (vals, vecs) = eig(&hm);
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&i, &j| vals[j].re.partial_cmp(&vals[i].re).unwrap());
        let top = order[0];
        let y = vecs.column(top);
        let mut ritz = CMat::zeros(n, n);
        for j in 0..k_used {
            ritz += &basis[j] * y[j];
        }
        let rn = ritz.norm();
        ritz /= c(rn, 0.0);
        let lam = vals[top];
        let res = (op(&ritz) - &ritz * lam).norm();
        let scale = lam.norm().max(1.0);
        let result = ArnoldiResult {
            values: order.iter().map(|&i| vals[i]).collect(),
            vector: ritz.clone(),
            residual: res,
            iterations: iters,
        };
        let done = res <= tol * scale || iters >= max_iter;
        let improved = best.as_ref().map(|b| res < b.residual).unwrap_or(true);
        if improved {
            best = Some(result);
        }
        if done {
            return best.unwrap();
        }
        v0 = ritz;
    }
}
