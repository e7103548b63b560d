//! Expectation values of open-boundary cMPS on a grid.
//!
//! `l(x)` solves `dl/dx = T̃(x)(l)` from `v_L v_L^†`, `r(x)` solves
//! `dr/dx = -T(x)(r)` from `v_R v_R^†`; both with classical RK4 per grid
//! interval, midpoint data by linear interpolation.

use serde::Serialize;
use thiserror::Error;

use crate::error::{CoreError, ErrorClass};
use crate::linalg::{c, comm, eigh, grid_derivative, hermitize, trace_prod, trapezoid, CMat, C64, ZERO};
use crate::state::{FiniteCmps, TransferDressing};
use crate::transfer::TransferOp;
use crate::uniform::InteractionKernel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FiniteError {
    #[error("propagation unstable near x={x}: norm grew by {growth:e} in one step")]
    Unstable { x: f64, growth: f64 },
    #[error("grid too coarse: N={n}, need N >= {min}")]
    GridTooCoarse { n: usize, min: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("bad propagation: {0}")]
    BadPropagation(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl FiniteError {
    pub fn code(&self) -> &'static str {
        match self {
            FiniteError::Unstable { .. } => "Unstable",
            FiniteError::GridTooCoarse { .. } => "GridTooCoarse",
            FiniteError::GridMismatch(_) => "GridMismatch",
            FiniteError::BadPropagation(_) => "BadPropagation",
            FiniteError::Core(e) => e.code(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            FiniteError::Unstable { .. } | FiniteError::BadPropagation(_) => ErrorClass::Numerical,
            FiniteError::Core(e) => e.class(),
            _ => ErrorClass::Validation,
        }
    }
}

/// Largest allowed norm amplification over one grid step.
pub const MAX_STEP_GROWTH: f64 = 1e6;
/// Minimum number of intervals for derivative-based quantities.
pub const MIN_INTERVALS: usize = 16;

/// Transfer operators at the grid points and interval midpoints.
pub(crate) struct GridOps {
    grid: Vec<TransferOp>,
    mid: Vec<TransferOp>,
}

impl GridOps {
    pub(crate) fn new(state: &FiniteCmps, signs: &[f64]) -> Self {
        let n = state.n();
        let grid = (0..=n).map(|k| TransferOp::from_parts(&state.q()[k], &state.r()[k], signs)).collect();
        let mid = (0..n).map(|k| TransferOp::from_parts(&state.q_at(k, 0.5), &state.r_at(k, 0.5), signs)).collect();
        GridOps { grid, mid }
    }

    pub(crate) fn plain(state: &FiniteCmps) -> Self {
        Self::new(state, &vec![1.0; state.num_species()])
    }

    pub(crate) fn dressed(state: &FiniteCmps, dressing: TransferDressing) -> Result<Self, CoreError> {
        Ok(Self::new(state, &dressing.signs(state.species())?))
    }

    /// Midpoint data by cubic Hermite interpolation with finite-difference
    /// slopes, which keeps RK4 fourth order for smooth samples.
    pub(crate) fn hermite(state: &FiniteCmps) -> Self {
        let n = state.n();
        let signs = vec![1.0; state.num_species()];
        let (qm, rm) = hermite_state_mids(state);
        let grid = (0..=n).map(|k| TransferOp::from_parts(&state.q()[k], &state.r()[k], &signs)).collect();
        let mid = (0..n).map(|k| TransferOp::from_parts(&qm[k], &rm[k], &signs)).collect();
        GridOps { grid, mid }
    }

    /// Mixed operators with ket data from `ket` and bra data from `bra`.
    pub(crate) fn mixed(ket: &FiniteCmps, bra: &FiniteCmps) -> Self {
        let n = ket.n();
        let grid = (0..=n).map(|k| TransferOp::mixed_parts(&ket.q()[k], &ket.r()[k], &bra.q()[k], &bra.r()[k])).collect();
        let mid = (0..n)
            .map(|k| TransferOp::mixed_parts(&ket.q_at(k, 0.5), &ket.r_at(k, 0.5), &bra.q_at(k, 0.5), &bra.r_at(k, 0.5)))
            .collect();
        GridOps { grid, mid }
    }

    /// Operator at `x_k + t h` for `t` in {0, 1/2, 1}.
    pub(crate) fn at(&self, k: usize, t: f64) -> &TransferOp {
        if t == 0.0 {
            &self.grid[k]
        } else if t == 1.0 {
            &self.grid[k + 1]
        } else {
            &self.mid[k]
        }
    }
}

/// Interval midpoints `(a+b)/2 + h(a'-b')/8` of sampled matrices.
pub(crate) fn hermite_mids(samples: &[CMat], h: f64) -> Vec<CMat> {
    let d = crate::linalg::grid_derivative4(samples, h);
    (0..samples.len() - 1)
        .map(|k| (&samples[k] + &samples[k + 1]) * c(0.5, 0.0) + (&d[k] - &d[k + 1]) * c(h / 8.0, 0.0))
        .collect()
}

/// Hermite midpoints of Q and of every R (indexed `[k][a]`).
pub(crate) fn hermite_state_mids(state: &FiniteCmps) -> (Vec<CMat>, Vec<Vec<CMat>>) {
    let h = state.h();
    let qm = hermite_mids(state.q(), h);
    let per: Vec<Vec<CMat>> = (0..state.num_species()).map(|a| hermite_mids(&state.r_species(a), h)).collect();
    let rm = (0..state.n()).map(|k| per.iter().map(|m| m[k].clone()).collect()).collect();
    (qm, rm)
}

/// RK4 over grid intervals `k = from..to` (forward) or `k = to-1 down to from`
/// (backward). `rhs(k, t, y)` is the derivative at `x_k + t h`. Returns the
/// samples at grid points `from..=to`, indexed from `from`.
pub(crate) fn rk4_grid<F>(from: usize, to: usize, h: f64, y0: CMat, forward: bool, hermitian: bool, rhs: F) -> Vec<CMat>
where
    F: Fn(usize, f64, &CMat) -> CMat,
{
    let m = to - from;
    let mut out = vec![CMat::zeros(0, 0); m + 1];
    let fix = |y: CMat| if hermitian { hermitize(&y) } else { y };
    if forward {
        out[0] = y0;
        for k in from..to {
            let y = &out[k - from];
            let next = rk4_step(k, h, y, 0.0, 1.0, &rhs);
            out[k - from + 1] = fix(next);
        }
    } else {
        out[m] = y0;
        for k in (from..to).rev() {
            let y = &out[k - from + 1];
            let next = rk4_step(k, -h, y, 1.0, 0.0, &rhs);
            out[k - from] = fix(next);
        }
    }
    out
}

fn rk4_step<F>(k: usize, h: f64, y: &CMat, t0: f64, t1: f64, rhs: &F) -> CMat
where
    F: Fn(usize, f64, &CMat) -> CMat,
{
    let hh = c(h / 2.0, 0.0);
    let k1 = rhs(k, t0, y);
    let k2 = rhs(k, 0.5, &(y + &k1 * hh));
    let k3 = rhs(k, 0.5, &(y + &k2 * hh));
    let k4 = rhs(k, t1, &(y + &k3 * c(h, 0.0)));
    y + (k1 + (k2 + k3) * c(2.0, 0.0) + k4) * c(h / 6.0, 0.0)
}

fn check_growth(state: &FiniteCmps, samples: &[CMat]) -> Result<(), FiniteError> {
    for k in 0..samples.len() {
        if !crate::linalg::is_finite(&samples[k]) {
            return Err(FiniteError::Unstable { x: state.x(k), growth: f64::INFINITY });
        }
        if k > 0 {
            let (a, b) = (samples[k - 1].norm(), samples[k].norm());
            let g = if a > 0.0 { (b / a).max(a / b.max(f64::MIN_POSITIVE)) } else { 1.0 };
            if a > 0.0 && b > 0.0 && g > MAX_STEP_GROWTH {
                return Err(FiniteError::Unstable { x: state.x(k), growth: g });
            }
        }
    }
    Ok(())
}

/// Left environment with a given dressing, from `v_L v_L^†`.
pub(crate) fn left_env(state: &FiniteCmps, ops: &GridOps) -> Result<Vec<CMat>, FiniteError> {
    let vl = state.v_l();
    let l = rk4_grid(0, state.n(), state.h(), vl * vl.adjoint(), true, true, |k, t, y| ops.at(k, t).left(y));
    check_growth(state, &l)?;
    Ok(l)
}

pub(crate) fn right_env(state: &FiniteCmps, ops: &GridOps) -> Result<Vec<CMat>, FiniteError> {
    let vr = state.v_r();
    let r = rk4_grid(0, state.n(), state.h(), vr * vr.adjoint(), false, true, |k, t, y| -ops.at(k, t).right(y));
    check_growth(state, &r)?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualDensityPair {
    pub l: Vec<CMat>,
    pub r: Vec<CMat>,
    /// `tr[l r]` at the middle grid point.
    pub norm: f64,
    /// `max_x |tr[l(x) r(x)] - norm| / norm`.
    pub max_deviation: f64,
    /// Smallest eigenvalue of l(x), r(x) relative to the matrix norm.
    pub min_eig_ratio: f64,
}

pub fn propagate(state: &FiniteCmps) -> Result<VirtualDensityPair, FiniteError> {
    state.require_open()?;
    let ops = GridOps::plain(state);
    let l = left_env(state, &ops)?;
    let r = right_env(state, &ops)?;
    let traces: Vec<f64> = l.iter().zip(&r).map(|(a, b)| trace_prod(a, b).re).collect();
    let norm = traces[state.n() / 2];
    let max_deviation = traces.iter().map(|t| (t - norm).abs()).fold(0.0, f64::max) / norm.abs().max(f64::MIN_POSITIVE);
    let mut min_eig_ratio = f64::INFINITY;
    for m in l.iter().chain(r.iter()) {
        let (w, _) = eigh(m);
        let top = w.last().unwrap().abs().max(f64::MIN_POSITIVE);
        min_eig_ratio = min_eig_ratio.min(w[0] / top);
    }
    if !(norm > 0.0) {
        return Err(FiniteError::BadPropagation(format!("non-positive norm {norm:e}")));
    }
    Ok(VirtualDensityPair { l, r, norm, max_deviation, min_eig_ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormReport {
    pub norm: f64,
    pub max_deviation: f64,
}

pub fn norm(state: &FiniteCmps) -> Result<NormReport, FiniteError> {
    let v = propagate(state)?;
    Ok(NormReport { norm: v.norm, max_deviation: v.max_deviation })
}

/// `<ψ†_a ψ_b>(x_k)` on every grid point, normalized.
pub fn density_profile(state: &FiniteCmps, vdp: &VirtualDensityPair, a: usize, b: usize) -> Result<Vec<C64>, FiniteError> {
    state.species().check_index(a)?;
    state.species().check_index(b)?;
    Ok((0..=state.n())
        .map(|k| {
            let r = &state.r()[k];
            trace_prod(&(&vdp.l[k] * &r[b]), &(&vdp.r[k] * r[a].adjoint())) / vdp.norm
        })
        .collect())
}

/// Grid index of `x`, which must lie on the grid.
pub fn grid_index(state: &FiniteCmps, x: f64) -> Result<usize, FiniteError> {
    let t = (x + 0.5 * state.length()) / state.h();
    let k = t.round();
    if !(k >= 0.0 && k <= state.n() as f64) || (t - k).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(FiniteError::GridMismatch(format!("x={x} is not a grid point")));
    }
    Ok(k as usize)
}

/// `<ψ†_a(x) ψ_b(y)>`, normalized, with the sign-dressed propagation
/// between the insertions; `x == y` averages the two orderings.
pub fn two_point(state: &FiniteCmps, vdp: &VirtualDensityPair, a: usize, b: usize, x: f64, y: f64) -> Result<C64, FiniteError> {
    let kx = grid_index(state, x)?;
    let ky = grid_index(state, y)?;
    let lab = left_env(state, &GridOps::dressed(state, TransferDressing::Double(a, b))?)?;
    Ok(two_point_with(state, vdp, &lab, a, b, kx, ky)? / vdp.norm)
}

/// Unnormalized two-point function from a precomputed double-dressed left
/// environment `lab`.
pub(crate) fn two_point_with(
    state: &FiniteCmps,
    vdp: &VirtualDensityPair,
    lab: &[CMat],
    a: usize,
    b: usize,
    kx: usize,
    ky: usize,
) -> Result<C64, FiniteError> {
    let rs = state.r();
    let h = state.h();
    let x_after_y = || -> Result<C64, FiniteError> {
        let ops = GridOps::dressed(state, TransferDressing::Single(a))?;
        let x0 = &lab[ky] * &rs[ky][b];
        let xs = rk4_grid(ky, kx, h, x0, true, false, |k, t, y| ops.at(k, t).left(y));
        Ok(trace_prod(xs.last().unwrap(), &(&vdp.r[kx] * rs[kx][a].adjoint())))
    };
    let y_after_x = || -> Result<C64, FiniteError> {
        let ops = GridOps::dressed(state, TransferDressing::Single(b))?;
        let x0 = rs[kx][a].adjoint() * &lab[kx];
        let xs = rk4_grid(kx, ky, h, x0, true, false, |k, t, y| ops.at(k, t).left(y));
        Ok(trace_prod(xs.last().unwrap(), &(&rs[ky][b] * &vdp.r[ky])))
    };
    if kx > ky {
        x_after_y()
    } else if ky > kx {
        y_after_x()
    } else {
        Ok((x_after_y()? + y_after_x()?) * 0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteEnergyParams {
    pub masses: Vec<f64>,
    /// External potential on the grid (N+1 values).
    pub potential: Option<Vec<f64>>,
    pub interaction: Option<InteractionKernel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteEnergy {
    pub kinetic: f64,
    pub potential: f64,
    pub interaction: f64,
    pub norm: f64,
    pub max_imag: f64,
}

/// Kinetic, potential and interaction energies (normalized). Interactions
/// act within each species; `Delta { c }` is `c ∫ ψ†ψ†ψψ`.
pub fn energy(state: &FiniteCmps, vdp: &VirtualDensityPair, params: &FiniteEnergyParams) -> Result<FiniteEnergy, FiniteError> {
    let n = state.n();
    let q = state.num_species();
    if n < MIN_INTERVALS {
        return Err(FiniteError::GridTooCoarse { n, min: MIN_INTERVALS });
    }
    if params.masses.len() != q || params.masses.iter().any(|m| !(*m > 0.0)) {
        return Err(CoreError::Invalid(format!("need {q} positive masses")).into());
    }
    let h = state.h();
    let (l, r) = (&vdp.l, &vdp.r);
    let mut max_imag: f64 = 0.0;
    let mut kin = ZERO;
    for a in 0..q {
        let ra = state.r_species(a);
        let dr = grid_derivative(&ra, h);
        let vals: Vec<C64> = (0..=n)
            .map(|k| {
                let d = comm(&state.q()[k], &ra[k]) + &dr[k];
                trace_prod(&(&l[k] * &d), &(&r[k] * d.adjoint()))
            })
            .collect();
        kin += trapezoid(&vals, h) / (2.0 * params.masses[a]);
    }
    kin /= vdp.norm;
    max_imag = max_imag.max(kin.im.abs());
    let mut pot = ZERO;
    if let Some(v) = &params.potential {
        if v.len() != n + 1 {
            return Err(FiniteError::GridMismatch(format!("{} potential samples for {} grid points", v.len(), n + 1)));
        }
        let mut dens = vec![ZERO; n + 1];
        for a in 0..q {
            for (acc, d) in dens.iter_mut().zip(density_profile(state, vdp, a, a)?) {
                *acc += d;
            }
        }
        let vals: Vec<C64> = dens.iter().zip(v).map(|(d, v)| d * *v).collect();
        pot = trapezoid(&vals, h);
        max_imag = max_imag.max(pot.im.abs());
    }
    let mut inter = ZERO;
    if let Some(w) = &params.interaction {
        w.validate()?;
        for a in 0..q {
            inter += interaction_species(state, vdp, a, w)?;
        }
        inter /= vdp.norm;
        max_imag = max_imag.max(inter.im.abs());
    }
    Ok(FiniteEnergy { kinetic: kin.re, potential: pot.re, interaction: inter.re, norm: vdp.norm, max_imag })
}

fn interaction_species(state: &FiniteCmps, vdp: &VirtualDensityPair, a: usize, w: &InteractionKernel) -> Result<C64, FiniteError> {
    let n = state.n();
    let h = state.h();
    let ra = state.r_species(a);
    let (l, r) = (&vdp.l, &vdp.r);
    // ket insertion R r R^† at each grid point
    let kets: Vec<CMat> = (0..=n).map(|k| &ra[k] * &r[k] * ra[k].adjoint()).collect();
    match w {
        InteractionKernel::Delta { c: cc } => {
            let vals: Vec<C64> = (0..=n)
                .map(|k| {
                    let r2 = &ra[k] * &ra[k];
                    trace_prod(&(&l[k] * &r2), &(&r[k] * r2.adjoint()))
                })
                .collect();
            Ok(trapezoid(&vals, h) * *cc)
        }
        InteractionKernel::Exponential { c: cc, ell } => {
            // joint RK4 of (l, Y) with dY = T̃(Y) - Y/ell + c R^† l R, Y(-L/2) = 0
            let ops = GridOps::plain(state);
            let d = state.d();
            let vl = state.v_l();
            let mut joint = CMat::zeros(d, 2 * d);
            joint.view_mut((0, 0), (d, d)).copy_from(&(vl * vl.adjoint()));
            let ram: Vec<CMat> = (0..n).map(|k| state.r_at(k, 0.5)[a].clone()).collect();
            let rhs = |k: usize, t: f64, y: &CMat| {
                let op = ops.at(k, t);
                let rr = if t == 0.0 { &ra[k] } else if t == 1.0 { &ra[k + 1] } else { &ram[k] };
                let lk = y.columns(0, d).into_owned();
                let yk = y.columns(d, d).into_owned();
                let dl = op.left(&lk);
                let dy = op.left(&yk) - &yk * c(1.0 / ell, 0.0) + rr.adjoint() * &lk * rr * c(*cc, 0.0);
                let mut out = CMat::zeros(d, 2 * d);
                out.view_mut((0, 0), (d, d)).copy_from(&dl);
                out.view_mut((0, d), (d, d)).copy_from(&dy);
                out
            };
            let ys = rk4_grid(0, n, h, joint, true, false, rhs);
            let vals: Vec<C64> = (0..=n).map(|k| trace_prod(&ys[k].columns(d, d).into_owned(), &kets[k])).collect();
            Ok(trapezoid(&vals, h))
        }
        InteractionKernel::Tabulated { dz, values } => {
            let ops = GridOps::plain(state);
            let range = (values.len().saturating_sub(1)) as f64 * dz;
            let kmax = ((range / h).floor() as usize).min(n);
            let wz = |z: f64| -> f64 {
                let t = z / dz;
                let i = t.floor() as usize;
                if i + 1 >= values.len() {
                    if i + 1 == values.len() && (t - i as f64) < 1e-12 { values[i] } else { 0.0 }
                } else {
                    let f = t - i as f64;
                    values[i] * (1.0 - f) + values[i + 1] * f
                }
            };
            let outer: Vec<C64> = (0..=n)
                .map(|ky| {
                    let kend = (ky + kmax).min(n);
                    let bra = ra[ky].adjoint() * &l[ky] * &ra[ky];
                    let xs = rk4_grid(ky, kend, h, bra, true, false, |k, t, y| ops.at(k, t).left(y));
                    let inner: Vec<C64> = (ky..=kend).map(|kx| trace_prod(&xs[kx - ky], &kets[kx]) * wz((kx - ky) as f64 * h)).collect();
                    if inner.len() < 2 {
                        ZERO
                    } else {
                        trapezoid(&inner, h)
                    }
                })
                .collect();
            Ok(trapezoid(&outer, h))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryReport {
    /// `|v_L^† R_a(-L/2)|` per species.
    pub left: Vec<f64>,
    /// `|R_a(L/2) v_R|` per species.
    pub right: Vec<f64>,
}

pub fn boundary_check(state: &FiniteCmps) -> Result<BoundaryReport, FiniteError> {
    state.require_open()?;
    let n = state.n();
    let left = state.r()[0].iter().map(|ra| (state.v_l().adjoint() * ra).norm()).collect();
    let right = state.r()[n].iter().map(|ra| (ra * state.v_r()).norm()).collect();
    Ok(BoundaryReport { left, right })
}

/// `<Ψ1|Ψ2>` for two open states on the same grid.
pub fn mixed_overlap(s1: &FiniteCmps, s2: &FiniteCmps) -> Result<C64, FiniteError> {
    s1.require_open()?;
    s2.require_open()?;
    if s1.n() != s2.n() || (s1.length() - s2.length()).abs() > 1e-12 * s1.length() || s1.d() != s2.d() {
        return Err(FiniteError::GridMismatch("states differ in grid or bond dimension".into()));
    }
    if s1.species() != s2.species() {
        return Err(CoreError::ShapeError("states differ in species".into()).into());
    }
    let ops = GridOps::mixed(s2, s1);
    let x0 = s1.v_l() * s2.v_l().adjoint();
    let xs = rk4_grid(0, s1.n(), s1.h(), x0, true, false, |k, t, y| ops.at(k, t).left(y));
    let xf = xs.last().unwrap();
    Ok((s1.v_r().adjoint() * xf * s2.v_r())[0])
}
