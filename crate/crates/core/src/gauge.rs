//! Gauge transformations `Q -> g⁻¹Qg + g⁻¹ dg/dx`, `R -> g⁻¹Rg`, canonical
//! forms of uniform states, finite orthonormalization and the `Q = 0` gauge.

use serde::Serialize;
use thiserror::Error;

use crate::error::{CoreError, ErrorClass};
use crate::finite::{rk4_grid, FiniteError, GridOps};
use crate::linalg::{cond, eigh, eye, grid_derivative, inverse, psd_inv_sqrt, psd_sqrt, CMat, ZERO};
use crate::state::{FiniteCmps, UniformCmps};
use crate::uniform::{Normalized, UniformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaugeError {
    #[error("gauge matrix is singular or ill-conditioned (cond {cond:e}) at sample {index}")]
    SingularGauge { index: usize, cond: f64 },
    #[error("bad propagation: {0}")]
    BadPropagation(String),
    #[error("ill-conditioned: {0}")]
    IllConditioned(String),
    #[error(transparent)]
    Uniform(#[from] UniformError),
    #[error(transparent)]
    Finite(#[from] FiniteError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl GaugeError {
    pub fn code(&self) -> &'static str {
        match self {
            GaugeError::SingularGauge { .. } => "SingularGauge",
            GaugeError::BadPropagation(_) => "BadPropagation",
            GaugeError::IllConditioned(_) => "IllConditioned",
            GaugeError::Uniform(e) => e.code(),
            GaugeError::Finite(e) => e.code(),
            GaugeError::Core(e) => e.code(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            GaugeError::SingularGauge { .. } => ErrorClass::Validation,
            GaugeError::Uniform(e) => e.class(),
            GaugeError::Finite(e) => e.class(),
            GaugeError::Core(e) => e.class(),
            _ => ErrorClass::Numerical,
        }
    }
}

/// Largest accepted condition number of a gauge matrix.
pub const MAX_GAUGE_COND: f64 = 1e12;
/// Eigenvalue floor for Hermitian square roots.
pub const SQRT_FLOOR: f64 = 1e-14;

/// Position-dependent gauge on a grid, or a constant one.
#[derive(Debug, Clone, PartialEq)]
pub enum GaugeFunction {
    Constant(CMat),
    Samples(Vec<CMat>),
}

impl GaugeFunction {
    pub fn at(&self, k: usize) -> &CMat {
        match self {
            GaugeFunction::Constant(g) => g,
            GaugeFunction::Samples(s) => &s[k],
        }
    }

    /// Largest condition number over the samples.
    pub fn max_cond(&self) -> f64 {
        match self {
            GaugeFunction::Constant(g) => cond(g),
            GaugeFunction::Samples(s) => s.iter().map(cond).fold(0.0, f64::max),
        }
    }
}

fn checked_inverse(g: &CMat, index: usize) -> Result<CMat, GaugeError> {
    let k = cond(g);
    if !(k <= MAX_GAUGE_COND) {
        return Err(GaugeError::SingularGauge { index, cond: k });
    }
    inverse(g).ok_or(GaugeError::SingularGauge { index, cond: f64::INFINITY })
}

/// `(g⁻¹Qg, g⁻¹Rg)`.
pub fn gauge_uniform(state: &UniformCmps, g: &CMat) -> Result<UniformCmps, GaugeError> {
    if g.nrows() != state.d() || g.ncols() != state.d() {
        return Err(CoreError::ShapeError(format!("gauge is {}x{}, D={}", g.nrows(), g.ncols(), state.d())).into());
    }
    let gi = checked_inverse(g, 0)?;
    let q = &gi * state.q() * g;
    let r = state.r().iter().map(|r| &gi * r * g).collect();
    Ok(UniformCmps::new(state.species().clone(), q, r)?)
}

/// Fixed points after `gauge_uniform(.., g)`: `(g^† l g, g⁻¹ r g^{-†})`.
pub fn transform_fixed_points(l: &CMat, r: &CMat, g: &CMat) -> Result<(CMat, CMat), GaugeError> {
    let gi = checked_inverse(g, 0)?;
    Ok((g.adjoint() * l * g, &gi * r * gi.adjoint()))
}

#[derive(Debug, Clone)]
pub struct Canonical {
    pub state: UniformCmps,
    pub g: CMat,
    /// Diagonal of the non-identity fixed point, nonincreasing.
    pub diag: Vec<f64>,
}

/// Make the first nonzero entry of every column real and positive.
fn fix_column_phases(g: &mut CMat) {
    for j in 0..g.ncols() {
        let m = g.column(j).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if let Some(z) = g.column(j).iter().find(|z| z.norm() > 1e-8 * m).cloned() {
            let ph = z.conj() / z.norm();
            let mut col = g.column_mut(j);
            col *= ph;
        }
    }
}

/// Eigenvectors of a Hermitian matrix ordered by decreasing eigenvalue.
fn eigh_desc(a: &CMat) -> (Vec<f64>, CMat) {
    let (w, v) = eigh(a);
    let n = w.len();
    let wd: Vec<f64> = w.iter().rev().cloned().collect();
    let mut vd = CMat::zeros(n, n);
    for j in 0..n {
        vd.set_column(j, &v.column(n - 1 - j));
    }
    (wd, vd)
}

fn require_positive(m: &CMat, what: &str) -> Result<(), GaugeError> {
    let (w, _) = eigh(m);
    let top = w.last().cloned().unwrap_or(0.0);
    if !(w[0] > 1e-13 * top.abs()) {
        return Err(UniformError::BadFixedPoint(format!("{what} is not positive definite (min eigenvalue {:e})", w[0])).into());
    }
    Ok(())
}

/// Left-canonical form: `l = 1`, `r` diagonal with nonincreasing entries.
pub fn left_canonicalize_uniform(ns: &Normalized) -> Result<Canonical, GaugeError> {
    let (l, r) = (&ns.fp.l, &ns.fp.r);
    require_positive(l, "left fixed point")?;
    let sl = psd_sqrt(l, SQRT_FLOOR);
    let (diag, u) = eigh_desc(&crate::linalg::hermitize(&(&sl * r * &sl)));
    let mut g = psd_inv_sqrt(l, SQRT_FLOOR) * u;
    fix_column_phases(&mut g);
    Ok(Canonical { state: gauge_uniform(&ns.state, &g)?, g, diag })
}

/// Right-canonical form: `r = 1`, `l` diagonal with nonincreasing entries.
pub fn right_canonicalize_uniform(ns: &Normalized) -> Result<Canonical, GaugeError> {
    let (l, r) = (&ns.fp.l, &ns.fp.r);
    require_positive(r, "right fixed point")?;
    let sr = psd_sqrt(r, SQRT_FLOOR);
    let (diag, u) = eigh_desc(&crate::linalg::hermitize(&(&sr * l * &sr)));
    let mut g = sr * u;
    fix_column_phases(&mut g);
    Ok(Canonical { state: gauge_uniform(&ns.state, &g)?, g, diag })
}

/// Finite gauge transformation. `dg` overrides the central-difference
/// derivative of the samples. Boundary vectors: `v_L -> g(-L/2)^† v_L`,
/// `v_R -> g(L/2)⁻¹ v_R`; for periodic states `B -> g(L/2)⁻¹ B g(-L/2)`.
pub fn gauge_finite(state: &FiniteCmps, g: &[CMat], dg: Option<&[CMat]>) -> Result<FiniteCmps, GaugeError> {
    let n = state.n();
    if g.len() != n + 1 || dg.map(|d| d.len() != n + 1).unwrap_or(false) {
        return Err(FiniteError::GridMismatch(format!("gauge has {} samples for {} grid points", g.len(), n + 1)).into());
    }
    let d = state.d();
    if g.iter().any(|m| m.nrows() != d || m.ncols() != d) {
        return Err(CoreError::ShapeError(format!("gauge samples must be {d}x{d}")).into());
    }
    let fd;
    let dg = match dg {
        Some(x) => x,
        None => {
            fd = grid_derivative(g, state.h());
            &fd
        }
    };
    let mut gi = Vec::with_capacity(n + 1);
    for (k, gk) in g.iter().enumerate() {
        gi.push(checked_inverse(gk, k)?);
    }
    let q = (0..=n).map(|k| &gi[k] * &state.q()[k] * &g[k] + &gi[k] * &dg[k]).collect();
    let r = (0..=n).map(|k| state.r()[k].iter().map(|ra| &gi[k] * ra * &g[k]).collect()).collect();
    let v_l = g[0].adjoint() * state.v_l();
    let v_r = &gi[n] * state.v_r();
    let b = &gi[n] * state.b() * &g[0];
    Ok(FiniteCmps::new(state.species().clone(), state.length(), q, r, v_l, v_r, state.boundary(), Some(b))?)
}

#[derive(Debug, Clone)]
pub struct FiniteGaugeResult {
    pub state: FiniteCmps,
    pub g: Vec<CMat>,
    /// Largest pointwise orthonormality residual of the output.
    pub residual: f64,
}

/// Pointwise `max_x |Q + Q^† + Σ R^†R|`.
pub fn left_orthonormal_residual_finite(state: &FiniteCmps) -> f64 {
    (0..=state.n()).map(|k| crate::transfer::left_orthonormal_residual(&state.sample(k))).fold(0.0, f64::max)
}

pub fn right_orthonormal_residual_finite(state: &FiniteCmps) -> f64 {
    (0..=state.n()).map(|k| crate::transfer::right_orthonormal_residual(&state.sample(k))).fold(0.0, f64::max)
}

fn check_rho(rho: &[CMat]) -> Result<(), GaugeError> {
    for (k, m) in rho.iter().enumerate() {
        if !crate::linalg::is_finite(m) {
            return Err(GaugeError::BadPropagation(format!("non-finite density at sample {k}")));
        }
        let (w, _) = eigh(m);
        let top = w.last().unwrap().abs();
        if !(w[0] > 1e-12 * top) {
            return Err(GaugeError::BadPropagation(format!("density lost positivity at sample {k} (min eigenvalue {:e})", w[0])));
        }
    }
    Ok(())
}

/// Gauge to `Q + Q^† + Σ R^†R = 0` pointwise. The density
/// `ρ = (g⁻¹)^† g⁻¹` is integrated from `ρ(-L/2) = 1`, so `g(-L/2) = 1` and
/// `v_L` is unchanged.
pub fn left_orthonormalize_finite(state: &FiniteCmps) -> Result<FiniteGaugeResult, GaugeError> {
    state.require_open()?;
    let ops = GridOps::plain(state);
    let d = state.d();
    let rho = rk4_grid(0, state.n(), state.h(), eye(d), true, true, |k, t, y| ops.at(k, t).left(y));
    check_rho(&rho)?;
    let g: Vec<CMat> = rho.iter().map(|m| psd_inv_sqrt(m, SQRT_FLOOR)).collect();
    let out = gauge_finite(state, &g, None)?;
    let residual = left_orthonormal_residual_finite(&out);
    Ok(FiniteGaugeResult { state: out, g, residual })
}

/// Gauge to `Q + Q^† + Σ RR^† = 0` pointwise, from `ρ(L/2) = 1`, so
/// `g(L/2) = 1` and `v_R` is unchanged.
pub fn right_orthonormalize_finite(state: &FiniteCmps) -> Result<FiniteGaugeResult, GaugeError> {
    state.require_open()?;
    let ops = GridOps::plain(state);
    let d = state.d();
    let rho = rk4_grid(0, state.n(), state.h(), eye(d), false, true, |k, t, y| -ops.at(k, t).right(y));
    check_rho(&rho)?;
    let g: Vec<CMat> = rho.iter().map(|m| psd_sqrt(m, SQRT_FLOOR)).collect();
    let out = gauge_finite(state, &g, None)?;
    let residual = right_orthonormal_residual_finite(&out);
    Ok(FiniteGaugeResult { state: out, g, residual })
}

/// Largest norm of the ordered exponential accepted by `eliminate_q_gauge`.
pub const MAX_ORDERED_EXP_NORM: f64 = 1e12;

/// Gauge with `g' = -Q g`, `g(-L/2) = 1`, so that `Q̃ = 0`. The ordered
/// exponential is integrated with the same RK4 scheme as the propagators.
pub fn eliminate_q_gauge(state: &FiniteCmps) -> Result<FiniteGaugeResult, GaugeError> {
    state.require_open()?;
    let n = state.n();
    let d = state.d();
    let qm: Vec<CMat> = (0..n).map(|k| state.q_at(k, 0.5)).collect();
    let qs = state.q();
    let qf = |k: usize, t: f64| if t == 0.0 { &qs[k] } else if t == 1.0 { &qs[k + 1] } else { &qm[k] };
    // W(x) = P exp ∫_x^{L/2} Q solves dW/dx = -Q W with W(L/2) = 1
    let w = rk4_grid(0, n, state.h(), eye(d), false, false, |k, t, y| -(qf(k, t) * y));
    let wmax = w.iter().map(|m| m.norm()).fold(0.0, f64::max);
    if !(wmax < MAX_ORDERED_EXP_NORM) {
        return Err(GaugeError::IllConditioned(format!("ordered exponential of Q has norm {wmax:e}")));
    }
    let g0 = inverse(&w[0]).ok_or_else(|| GaugeError::IllConditioned("ordered exponential is singular".into()))?;
    let g: Vec<CMat> = w.iter().map(|m| m * &g0).collect();
    let mut gi = Vec::with_capacity(n + 1);
    for (k, gk) in g.iter().enumerate() {
        gi.push(checked_inverse(gk, k).map_err(|_| GaugeError::IllConditioned(format!("gauge singular at sample {k}")))?);
    }
    let q = vec![CMat::from_element(d, d, ZERO); n + 1];
    let r = (0..=n).map(|k| state.r()[k].iter().map(|ra| &gi[k] * ra * &g[k]).collect()).collect();
    let v_l = g[0].adjoint() * state.v_l();
    let v_r = &gi[n] * state.v_r();
    let out = FiniteCmps::new(state.species().clone(), state.length(), q, r, v_l, v_r, state.boundary(), Some(state.b().clone()))?;
    Ok(FiniteGaugeResult { state: out, g, residual: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GaugeTarget {
    Left,
    Right,
    Qzero,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite::{density_profile, norm, propagate};
    use crate::linalg::{c, eigvals, expm, scaled_eye, zeros};
    use crate::random::{random_gauge, random_smooth_finite, random_smooth_gauge, random_uniform, random_unitary, random_vector};
    use crate::species::SpeciesTable;
    use crate::state::TransferDressing;
    use crate::transfer::{dense_transfer, left_orthonormal_residual, right_orthonormal_residual};
    use crate::uniform::{density, EvalConfig};
    use crate::CVec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nz(s: &UniformCmps) -> Normalized {
        Normalized::new(s, None, EvalConfig::default()).unwrap()
    }

    #[test]
    fn scalar_gauge_trivial() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_uniform(&mut rng, 3, &SpeciesTable::single_boson());
        let t = gauge_uniform(&s, &scaled_eye(3, c(0.3, -2.0))).unwrap();
        assert!((t.q() - s.q()).norm() < 1e-14);
        assert!(matches!(gauge_uniform(&s, &zeros(3)), Err(GaugeError::SingularGauge { .. })));
    }

    #[test]
    fn unitary_gauge_preserves_spectrum_and_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_uniform(&mut rng, 3, &SpeciesTable::single_boson());
        let u = random_unitary(&mut rng, 3);
        let t = gauge_uniform(&s, &u).unwrap();
        let mut a: Vec<_> = eigvals(&dense_transfer(&s, TransferDressing::Plain).unwrap());
        let mut b: Vec<_> = eigvals(&dense_transfer(&t, TransferDressing::Plain).unwrap());
        let key = |z: &crate::C64| (z.re * 1e6).round() as i64 * 1_000_000_000 + (z.im * 1e6).round() as i64;
        a.sort_by_key(key);
        b.sort_by_key(key);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-12);
        }
        let g = random_gauge(&mut rng, 3, 20.0);
        let t = gauge_uniform(&s, &g).unwrap();
        let d1 = density(&nz(&s), 0, 0).unwrap();
        let d2 = density(&nz(&t), 0, 0).unwrap();
        assert!((d1 - d2).norm() < 1e-10 * d1.norm());
    }

    #[test]
    fn left_canonical_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_uniform(&mut rng, 3, &SpeciesTable::single_boson());
        let can = left_canonicalize_uniform(&nz(&s)).unwrap();
        assert!(left_orthonormal_residual(&can.state) < 1e-10);
        let again = nz(&can.state);
        assert!((&again.fp.l - eye(3) * again.fp.l[(0, 0)]).norm() < 1e-10);
        let rd = &again.fp.r / again.fp.r.trace();
        for i in 0..3 {
            assert!((rd[(i, i)].re - can.diag[i]).abs() < 1e-10);
        }
        assert!(can.diag.windows(2).all(|w| w[0] >= w[1]) && can.diag[2] > 0.0);
        // idempotent
        let twice = left_canonicalize_uniform(&again).unwrap();
        assert!((&twice.g - eye(3) * twice.g[(0, 0)]).norm() < 1e-9);
        assert!((twice.state.q() - can.state.q()).norm() < 1e-9);
    }

    #[test]
    fn right_then_left_keeps_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_uniform(&mut rng, 2, &SpeciesTable::single_boson());
        let left = left_canonicalize_uniform(&nz(&s)).unwrap();
        let right = right_canonicalize_uniform(&nz(&left.state)).unwrap();
        assert!(right_orthonormal_residual(&right.state) < 1e-10);
        let back = left_canonicalize_uniform(&nz(&right.state)).unwrap();
        for (a, b) in left.diag.iter().zip(&back.diag) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in left.diag.iter().zip(&right.diag) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn scalar_canonical_unchanged() {
        let r0 = c(0.5, 0.2);
        let s = UniformCmps::new(SpeciesTable::single_boson(), CMat::from_element(1, 1, c(-r0.norm_sqr() / 2.0, 0.0)), vec![CMat::from_element(1, 1, r0)]).unwrap();
        let can = left_canonicalize_uniform(&nz(&s)).unwrap();
        assert_eq!(can.diag, vec![1.0]);
        assert!((can.state.q() - s.q()).norm() < 1e-14);
    }

    fn finite_state(seed: u64, n: usize) -> FiniteCmps {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_smooth_finite(&mut rng, 2, &SpeciesTable::single_boson(), 2.0, n)
    }

    #[test]
    fn finite_gauge_identity_and_scalar() {
        let s = finite_state(5, 200);
        let id = vec![eye(2); 201];
        let t = gauge_finite(&s, &id, None).unwrap();
        assert_eq!(t, s);
        // g = e^{mu (x + L/2)}: Q shifts by mu, state unchanged
        let mu = 0.4;
        let g: Vec<CMat> = s.grid().iter().map(|&x| eye(2) * c((mu * (x + 1.0)).exp(), 0.0)).collect();
        let dg: Vec<CMat> = g.iter().map(|m| m * c(mu, 0.0)).collect();
        let t = gauge_finite(&s, &g, Some(&dg)).unwrap();
        assert!((&t.q()[7] - &s.q()[7] - eye(2) * c(mu, 0.0)).norm() < 1e-13);
        let n1 = norm(&s).unwrap().norm;
        let n2 = norm(&t).unwrap().norm;
        assert!((n1 - n2).abs() < 1e-7 * n1, "{n1} {n2}");
    }

    #[test]
    fn finite_gauge_preserves_density() {
        let s = finite_state(6, 2000);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let g = random_smooth_gauge(&mut rng, &s, 0.3);
        let t = gauge_finite(&s, &g, None).unwrap();
        let d1 = density_profile(&s, &propagate(&s).unwrap(), 0, 0).unwrap();
        let d2 = density_profile(&t, &propagate(&t).unwrap(), 0, 0).unwrap();
        let m = d1.iter().zip(&d2).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(m < 1e-6, "{m}");
    }

    #[test]
    fn left_orthonormalize_converges_second_order() {
        let r1 = left_orthonormalize_finite(&finite_state(7, 1000)).unwrap().residual;
        let r2 = left_orthonormalize_finite(&finite_state(7, 2000)).unwrap().residual;
        let r4 = left_orthonormalize_finite(&finite_state(7, 4000)).unwrap().residual;
        assert!(r4 < 1e-6, "{r4}");
        let ratio = r2 / r4;
        assert!((3.5..4.5).contains(&ratio), "{r1} {r2} {r4}");
        // physical state unchanged
        let s = finite_state(7, 4000);
        let t = left_orthonormalize_finite(&s).unwrap();
        let d1 = density_profile(&s, &propagate(&s).unwrap(), 0, 0).unwrap();
        let d2 = density_profile(&t.state, &propagate(&t.state).unwrap(), 0, 0).unwrap();
        assert!((d1[1234] - d2[1234]).norm() < 1e-6);
        let rr = right_orthonormalize_finite(&s).unwrap();
        assert!(rr.residual < 1e-6);
    }

    #[test]
    fn left_orthonormalize_scalar_quadrature() {
        let sp = SpeciesTable::single_boson();
        let qf = |x: f64| CMat::from_element(1, 1, c(-0.3 + 0.2 * x.sin(), 0.5 * x));
        let rf = |x: f64| vec![CMat::from_element(1, 1, c(0.7 * x.cos(), 0.1))];
        let one = CVec::from_element(1, c(1.0, 0.0));
        let s = FiniteCmps::from_fn(sp, 2.0, 2000, qf, rf, one.clone(), one).unwrap();
        let res = left_orthonormalize_finite(&s).unwrap();
        // g(x) = exp(-∫(2 Re q + |r|²)/2)
        let f: Vec<crate::C64> = s.grid().iter().map(|&x| c(2.0 * (-0.3 + 0.2 * x.sin()) + (0.7 * x.cos()).powi(2) + 0.01, 0.0)).collect();
        let mut acc = 0.0;
        for k in 0..=s.n() {
            if k > 0 {
                acc += 0.5 * s.h() * (f[k - 1].re + f[k].re);
            }
            assert!((res.g[k][(0, 0)].re - (-acc / 2.0).exp()).abs() < 1e-6);
        }
    }

    #[test]
    fn eliminate_q_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_uniform(&mut rng, 2, &SpeciesTable::single_boson());
        let s = FiniteCmps::from_uniform(&u, 2.0, 400, random_vector(&mut rng, 2), random_vector(&mut rng, 2)).unwrap();
        let res = eliminate_q_gauge(&s).unwrap();
        for (k, &x) in s.grid().iter().enumerate() {
            let e = expm(&(u.q() * c(x + 1.0, 0.0)));
            let ei = expm(&(u.q() * c(-(x + 1.0), 0.0)));
            let expect = &e * &u.r()[0] * &ei;
            assert!((&res.state.r()[k][0] - &expect).norm() < 1e-8, "{k}");
        }
        let n1 = norm(&s).unwrap().norm;
        let n2 = norm(&res.state).unwrap().norm;
        assert!((n1 - n2).abs() < 1e-6 * n1, "{n1} {n2}");
        // Q = 0 already: identity
        let z = FiniteCmps::from_fn(SpeciesTable::single_boson(), 1.0, 10, |_| zeros(2), |x| vec![eye(2) * c(x, 0.0)], random_vector(&mut rng, 2), random_vector(&mut rng, 2)).unwrap();
        let rz = eliminate_q_gauge(&z).unwrap();
        assert!((&rz.state.r()[3][0] - &z.r()[3][0]).norm() < 1e-15);
    }
}
