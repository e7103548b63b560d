//! Tangent vectors: gauge directions, left gauge fixing and the overlap
//! metric, for finite states on a grid and for momentum sectors of uniform
//! states.
//!
//! A finite tangent `(V(x), W_a(x), w_R)` is the first-order variation of
//! `(Q, R_a, v_R)` with `v_L` held fixed. Uniform tangents carry a momentum
//! `p` and report overlaps with the `2πδ` factor stripped.
//!
//! Finite metrics use cubic Hermite midpoints for every sampled function
//! and Simpson's rule per interval, so the integrals are fourth order and
//! gauge directions come out null to that accuracy.

use thiserror::Error;

use crate::error::{CoreError, ErrorClass};
use crate::finite::{hermite_mids, hermite_state_mids, rk4_grid, FiniteError, GridOps, MIN_INTERVALS};
use crate::linalg::{bra_rm, c, comm, cond, eye, fro, gmres, grid_derivative4, solve, trace_prod, unvec_rm, vec_rm, CMat, CVec, C64, I, ZERO};
use crate::state::{FiniteCmps, UniformCmps};
use crate::transfer::TransferOp;
use crate::uniform::{Normalized, UniformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TangentError {
    #[error("bad gauge generator: {0}")]
    BadGenerator(String),
    #[error("gauge fixing is singular: {0}")]
    GaugeSingular(String),
    #[error("left environment ill-conditioned at grid point {index} (cond {cond:e})")]
    IllConditioned { index: usize, cond: f64 },
    #[error("tangent does not match the base state: {0}")]
    Mismatch(String),
    #[error("linear solve failed: {0}")]
    SolveFailed(String),
    #[error(transparent)]
    Finite(#[from] FiniteError),
    #[error(transparent)]
    Uniform(#[from] UniformError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl TangentError {
    pub fn code(&self) -> &'static str {
        match self {
            TangentError::BadGenerator(_) => "BadGenerator",
            TangentError::GaugeSingular(_) => "GaugeSingular",
            TangentError::IllConditioned { .. } => "IllConditioned",
            TangentError::Mismatch(_) => "GridMismatch",
            TangentError::SolveFailed(_) => "SolveFailed",
            TangentError::Finite(e) => e.code(),
            TangentError::Uniform(e) => e.code(),
            TangentError::Core(e) => e.code(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            TangentError::Finite(e) => e.class(),
            TangentError::Uniform(e) => e.class(),
            TangentError::Core(e) => e.class(),
            TangentError::IllConditioned { .. } | TangentError::SolveFailed(_) | TangentError::GaugeSingular(_) => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Validation,
        }
    }
}

/// `l(x)` condition number above which `h = l^{-1} Y` is refused.
pub const MAX_ENV_COND: f64 = 1e14;
/// Relative gauge-condition violation below which a finite tangent counts as fixed.
pub const FIXED_TOL: f64 = 1e-8;
/// Relative size of `h(-L/2)` accepted as zero.
pub const GENERATOR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TangentFinite {
    pub v: Vec<CMat>,
    /// `w[k][a]`, same layout as the state's R samples.
    pub w: Vec<Vec<CMat>>,
    pub w_r: CVec,
}

impl TangentFinite {
    pub fn zeros(base: &FiniteCmps) -> Self {
        let d = base.d();
        TangentFinite {
            v: vec![CMat::zeros(d, d); base.n() + 1],
            w: vec![vec![CMat::zeros(d, d); base.num_species()]; base.n() + 1],
            w_r: CVec::zeros(d),
        }
    }

    /// The base state itself, as `V = 1/L`.
    pub fn base_embedding(base: &FiniteCmps) -> Self {
        let mut t = Self::zeros(base);
        let s = eye(base.d()) * c(1.0 / base.length(), 0.0);
        t.v.iter_mut().for_each(|v| *v = s.clone());
        t
    }

    pub fn check(&self, base: &FiniteCmps) -> Result<(), TangentError> {
        let (d, n) = (base.d(), base.n());
        if self.v.len() != n + 1 || self.w.len() != n + 1 {
            return Err(TangentError::Mismatch(format!("{} V samples for a grid of {} points", self.v.len(), n + 1)));
        }
        if self.w_r.len() != d {
            return Err(TangentError::Mismatch(format!("wR has length {}, D={d}", self.w_r.len())));
        }
        for k in 0..=n {
            if self.v[k].shape() != (d, d) || self.w[k].len() != base.num_species() {
                return Err(TangentError::Mismatch(format!("bad tangent data at grid point {k}")));
            }
            if self.w[k].iter().any(|m| m.shape() != (d, d)) {
                return Err(TangentError::Mismatch(format!("bad W shape at grid point {k}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: C64) -> Self {
        TangentFinite {
            v: self.v.iter().map(|m| m * s).collect(),
            w: self.w.iter().map(|ws| ws.iter().map(|m| m * s).collect()).collect(),
            w_r: &self.w_r * s,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        TangentFinite {
            v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(),
            w: self.w.iter().zip(&o.w).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect(),
            w_r: &self.w_r + &o.w_r,
        }
    }

    /// Largest entry over all data.
    pub fn max_abs(&self) -> f64 {
        let m = self.v.iter().chain(self.w.iter().flatten()).map(crate::linalg::max_abs).fold(0.0, f64::max);
        self.w_r.iter().map(|z| z.norm()).fold(m, f64::max)
    }

    /// `(Q + εV, R + εW, v_R + εw_R)`.
    pub fn displace(&self, base: &FiniteCmps, eps: f64) -> Result<FiniteCmps, CoreError> {
        let e = c(eps, 0.0);
        let q = base.q().iter().zip(&self.v).map(|(a, b)| a + b * e).collect();
        let r = base.r().iter().zip(&self.w).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y * e).collect()).collect();
        FiniteCmps::new(
            base.species().clone(),
            base.length(),
            q,
            r,
            base.v_l().clone(),
            base.v_r() + &self.w_r * e,
            base.boundary(),
            Some(base.b().clone()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentUniform {
    pub v: CMat,
    pub w: Vec<CMat>,
    pub p: f64,
}

impl TangentUniform {
    pub fn zeros(d: usize, q: usize, p: f64) -> Self {
        TangentUniform { v: CMat::zeros(d, d), w: vec![CMat::zeros(d, d); q], p }
    }

    pub fn check(&self, base: &UniformCmps) -> Result<(), TangentError> {
        let d = base.d();
        if self.v.shape() != (d, d) || self.w.len() != base.num_species() || self.w.iter().any(|m| m.shape() != (d, d)) {
            return Err(TangentError::Mismatch(format!("tangent shapes do not match D={d}, q={}", base.num_species())));
        }
        if !self.p.is_finite() {
            return Err(CoreError::NonFinite("momentum".into()).into());
        }
        Ok(())
    }

    pub fn add(&self, o: &Self) -> Self {
        TangentUniform { v: &self.v + &o.v, w: self.w.iter().zip(&o.w).map(|(a, b)| a + b).collect(), p: self.p }
    }

    pub fn max_abs(&self) -> f64 {
        self.w.iter().map(crate::linalg::max_abs).fold(crate::linalg::max_abs(&self.v), f64::max)
    }
}

/// A gauge-fixed tangent with the largest violation of the gauge condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeFixed<T> {
    pub tangent: T,
    pub residual: f64,
}

// ---------------------------------------------------------------- finite

fn pick<'a>(nodes: &'a [CMat], mids: &'a [CMat], k: usize, t: f64) -> &'a CMat {
    if t == 0.0 {
        &nodes[k]
    } else if t == 1.0 {
        &nodes[k + 1]
    } else {
        &mids[k]
    }
}

fn pick_r<'a>(nodes: &'a [Vec<CMat>], mids: &'a [Vec<CMat>], k: usize, t: f64) -> &'a [CMat] {
    if t == 0.0 {
        &nodes[k]
    } else if t == 1.0 {
        &nodes[k + 1]
    } else {
        &mids[k]
    }
}

/// Midpoints `(a+b)/2 + h(a'-b')/8` from node values and node derivatives.
fn mids_with(nodes: &[CMat], deriv: &[CMat], h: f64) -> Vec<CMat> {
    (0..nodes.len() - 1)
        .map(|k| (&nodes[k] + &nodes[k + 1]) * c(0.5, 0.0) + (&deriv[k] - &deriv[k + 1]) * c(h / 8.0, 0.0))
        .collect()
}

/// Hermite midpoints of W, indexed `[k][a]`.
fn w_mids(w: &[Vec<CMat>], q: usize, h: f64) -> Vec<Vec<CMat>> {
    let per: Vec<Vec<CMat>> =
        (0..q).map(|a| hermite_mids(&w.iter().map(|s| s[a].clone()).collect::<Vec<_>>(), h)).collect();
    (0..w.len() - 1).map(|k| per.iter().map(|m| m[k].clone()).collect()).collect()
}

/// Cubic Hermite value at `x_k + t h` from node values and slopes.
fn hermite_at(a: &CMat, da: &CMat, b: &CMat, db: &CMat, h: f64, t: f64) -> CMat {
    let (t2, t3) = (t * t, t * t * t);
    a * c(2.0 * t3 - 3.0 * t2 + 1.0, 0.0)
        + da * c(h * (t3 - 2.0 * t2 + t), 0.0)
        + b * c(-2.0 * t3 + 3.0 * t2, 0.0)
        + db * c(h * (t3 - t2), 0.0)
}

/// RK4 substeps for interval `k`. Near the left end `l(x)` is nearly rank
/// one and later divisions by it amplify truncation error like `1/x^2`.
fn substeps(k: usize) -> usize {
    (BOUNDARY_LAYER / (k + 1)).max(1)
}

const BOUNDARY_LAYER: usize = 32;

fn simpson(nodes: &[C64], mids: &[C64], h: f64) -> C64 {
    let mut acc = ZERO;
    for k in 0..mids.len() {
        acc += nodes[k] + mids[k] * 4.0 + nodes[k + 1];
    }
    acc * (h / 6.0)
}

fn block(y: &CMat, i: usize, d: usize) -> CMat {
    y.columns(i * d, d).into_owned()
}

fn stack(parts: &[CMat]) -> CMat {
    let d = parts[0].nrows();
    let mut out = CMat::zeros(d, d * parts.len());
    for (i, p) in parts.iter().enumerate() {
        out.columns_mut(i * d, d).copy_from(p);
    }
    out
}

/// Environments of a finite base state for tangent-space computations.
pub struct FiniteTangentSpace<'a> {
    base: &'a FiniteCmps,
    ops: GridOps,
    dq: Vec<CMat>,
    dr: Vec<Vec<CMat>>,
    r_mid: Vec<Vec<CMat>>,
    pub l: Vec<CMat>,
    pub r: Vec<CMat>,
    l_mid: Vec<CMat>,
    rr_mid: Vec<CMat>,
}

struct Samples {
    v: Vec<CMat>,
    vm: Vec<CMat>,
    w: Vec<Vec<CMat>>,
    wm: Vec<Vec<CMat>>,
    dv: Vec<CMat>,
    dw: Vec<Vec<CMat>>,
    h: f64,
}

impl Samples {
    fn v_at(&self, k: usize, t: f64) -> CMat {
        if t == 0.0 || t == 0.5 || t == 1.0 {
            return pick(&self.v, &self.vm, k, t).clone();
        }
        hermite_at(&self.v[k], &self.dv[k], &self.v[k + 1], &self.dv[k + 1], self.h, t)
    }

    fn w_at(&self, k: usize, t: f64) -> Vec<CMat> {
        if t == 0.0 || t == 0.5 || t == 1.0 {
            return pick_r(&self.w, &self.wm, k, t).to_vec();
        }
        (0..self.w[k].len())
            .map(|a| hermite_at(&self.w[k][a], &self.dw[k][a], &self.w[k + 1][a], &self.dw[k + 1][a], self.h, t))
            .collect()
    }
}

/// Per-species derivatives of `[k][a]` samples, same layout.
fn species_derivative(w: &[Vec<CMat>], q: usize, h: f64) -> Vec<Vec<CMat>> {
    let per: Vec<Vec<CMat>> = (0..q).map(|a| grid_derivative4(&w.iter().map(|s| s[a].clone()).collect::<Vec<_>>(), h)).collect();
    (0..w.len()).map(|k| per.iter().map(|m| m[k].clone()).collect()).collect()
}

impl<'a> FiniteTangentSpace<'a> {
    pub fn new(base: &'a FiniteCmps) -> Result<Self, TangentError> {
        base.require_open()?;
        if base.n() < MIN_INTERVALS {
            return Err(FiniteError::GridTooCoarse { n: base.n(), min: MIN_INTERVALS }.into());
        }
        let ops = GridOps::hermite(base);
        let (_, r_mid) = hermite_state_mids(base);
        let (n, h) = (base.n(), base.h());
        let dq = grid_derivative4(base.q(), h);
        let per: Vec<Vec<CMat>> = (0..base.num_species()).map(|a| grid_derivative4(&base.r_species(a), h)).collect();
        let dr = (0..=n).map(|k| per.iter().map(|m| m[k].clone()).collect()).collect();
        let mut sp = FiniteTangentSpace { base, ops, dq, dr, r_mid, l: vec![], r: vec![], l_mid: vec![], rr_mid: vec![] };
        let vl = base.v_l();
        let vr = base.v_r();
        let l: Vec<CMat> = sp.layered(vl * vl.adjoint(), |op, _, _, y| op.left(y)).into_iter().map(|m| crate::linalg::hermitize(&m)).collect();
        let ops = &sp.ops;
        let r = rk4_grid(0, n, h, vr * vr.adjoint(), false, true, |k, t, y| -ops.at(k, t).right(y));
        if !l.iter().chain(&r).all(crate::linalg::is_finite) {
            return Err(FiniteError::Unstable { x: base.length() / 2.0, growth: f64::INFINITY }.into());
        }
        let dl: Vec<CMat> = (0..=n).map(|k| ops.at(k, 0.0).left(&l[k])).collect();
        let dr: Vec<CMat> = (0..=n).map(|k| -ops.at(k, 0.0).right(&r[k])).collect();
        let l_mid = mids_with(&l, &dl, h);
        let rr_mid = mids_with(&r, &dr, h);
        sp.l = l;
        sp.r = r;
        sp.l_mid = l_mid;
        sp.rr_mid = rr_mid;
        Ok(sp)
    }

    /// Transfer operator at `x_k + t h`.
    fn op_at(&self, k: usize, t: f64) -> std::borrow::Cow<'_, TransferOp> {
        if t == 0.0 || t == 0.5 || t == 1.0 {
            return std::borrow::Cow::Borrowed(self.ops.at(k, t));
        }
        let (b, h) = (self.base, self.base.h());
        let q = hermite_at(&b.q()[k], &self.dq[k], &b.q()[k + 1], &self.dq[k + 1], h, t);
        let r: Vec<CMat> = (0..b.num_species())
            .map(|a| hermite_at(&b.r()[k][a], &self.dr[k][a], &b.r()[k + 1][a], &self.dr[k + 1][a], h, t))
            .collect();
        std::borrow::Cow::Owned(TransferOp::from_parts(&q, &r, &vec![1.0; r.len()]))
    }

    /// Forward RK4 over the grid with extra substeps in the left boundary
    /// layer. `rhs(op, k, t, y)` gets the operator at `x_k + t h`.
    fn layered<F>(&self, y0: CMat, rhs: F) -> Vec<CMat>
    where
        F: Fn(&TransferOp, usize, f64, &CMat) -> CMat,
    {
        let (n, h) = (self.base.n(), self.base.h());
        let mut out = Vec::with_capacity(n + 1);
        out.push(y0);
        for k in 0..n {
            let m = substeps(k);
            let dt = 1.0 / m as f64;
            let hs = h * dt;
            let mut y = out[k].clone();
            for j in 0..m {
                let t0 = j as f64 * dt;
                let (ta, tb) = (t0 + 0.5 * dt, t0 + dt);
                let tb = if j + 1 == m { 1.0 } else { tb };
                let opa = self.op_at(k, t0);
                let opm = self.op_at(k, ta);
                let opb = self.op_at(k, tb);
                let k1 = rhs(&opa, k, t0, &y);
                let k2 = rhs(&opm, k, ta, &(&y + &k1 * c(hs / 2.0, 0.0)));
                let k3 = rhs(&opm, k, ta, &(&y + &k2 * c(hs / 2.0, 0.0)));
                let k4 = rhs(&opb, k, tb, &(&y + &k3 * c(hs, 0.0)));
                y += (k1 + (k2 + k3) * c(2.0, 0.0) + k4) * c(hs / 6.0, 0.0);
            }
            out.push(y);
        }
        out
    }

    pub fn base(&self) -> &FiniteCmps {
        self.base
    }

    /// `v_R^† l(L/2) v_R`.
    pub fn norm(&self) -> f64 {
        let vr = self.base.v_r();
        (vr.adjoint() * &self.l[self.base.n()] * vr)[(0, 0)].re
    }

    fn samples(&self, t: &TangentFinite) -> Result<Samples, TangentError> {
        t.check(self.base)?;
        let h = self.base.h();
        Ok(Samples {
            vm: hermite_mids(&t.v, h),
            wm: w_mids(&t.w, self.base.num_species(), h),
            dv: grid_derivative4(&t.v, h),
            dw: species_derivative(&t.w, self.base.num_species(), h),
            v: t.v.clone(),
            w: t.w.clone(),
            h,
        })
    }

    fn r_at(&self, k: usize, t: f64) -> Vec<CMat> {
        if t == 0.0 || t == 0.5 || t == 1.0 {
            return self.rr(k, t).to_vec();
        }
        let (b, h) = (self.base, self.base.h());
        (0..b.num_species())
            .map(|a| hermite_at(&b.r()[k][a], &self.dr[k][a], &b.r()[k + 1][a], &self.dr[k + 1][a], h, t))
            .collect()
    }

    fn rr(&self, k: usize, t: f64) -> &[CMat] {
        pick_r(self.base.r(), &self.r_mid, k, t)
    }

    /// `l V + Σ R_a^† l W_a`: the bra `(l|[V⊗1 + ΣW⊗R̄]`.
    fn ket_source(&self, l: &CMat, v: &CMat, w: &[CMat], rs: &[CMat]) -> CMat {
        let mut s = l * v;
        for (ra, wa) in rs.iter().zip(w) {
            s += ra.adjoint() * l * wa;
        }
        s
    }

    /// `V^† l + Σ W_a^† l R_a`: the bra `(l|[1⊗V̄ + ΣR⊗W̄]`.
    fn bra_source(&self, l: &CMat, v: &CMat, w: &[CMat], rs: &[CMat]) -> CMat {
        let mut s = v.adjoint() * l;
        for (ra, wa) in rs.iter().zip(w) {
            s += wa.adjoint() * l * ra;
        }
        s
    }

    /// `⟨Φ(t1)|Φ(t2)⟩`, antilinear in `t1`.
    pub fn overlap(&self, t1: &TangentFinite, t2: &TangentFinite) -> Result<C64, TangentError> {
        let s1 = self.samples(t1)?;
        let s2 = self.samples(t2)?;
        let (n, h, d) = (self.base.n(), self.base.h(), self.base.d());
        // F: ket insertion to the left, G: bra insertion to the left
        let rhs = |op: &TransferOp, k: usize, t: f64, y: &CMat| -> CMat {
            let rs = self.r_at(k, t);
            let (l, f, g) = (block(y, 0, d), block(y, 1, d), block(y, 2, d));
            let df = op.left(&f) + self.ket_source(&l, &s2.v_at(k, t), &s2.w_at(k, t), &rs);
            let dg = op.left(&g) + self.bra_source(&l, &s1.v_at(k, t), &s1.w_at(k, t), &rs);
            stack(&[op.left(&l), df, dg])
        };
        let vl = self.base.v_l();
        let y0 = stack(&[vl * vl.adjoint(), CMat::zeros(d, d), CMat::zeros(d, d)]);
        let ys = self.layered(y0, rhs);
        let dy: Vec<CMat> = (0..=n)
            .map(|k| if k < n { rhs(self.ops.at(k, 0.0), k, 0.0, &ys[k]) } else { rhs(self.ops.at(n - 1, 1.0), n - 1, 1.0, &ys[n]) })
            .collect();
        let ym = mids_with(&ys, &dy, h);

        let integrand = |y: &CMat, r: &CMat, rs: &[CMat], v1: &CMat, w1: &[CMat], v2: &CMat, w2: &[CMat]| -> C64 {
            let (l, f, g) = (block(y, 0, d), block(y, 1, d), block(y, 2, d));
            let mut k1 = r * v1.adjoint();
            let mut k2 = v2 * r;
            let mut local = ZERO;
            for a in 0..rs.len() {
                k1 += &rs[a] * r * w1[a].adjoint();
                k2 += &w2[a] * r * rs[a].adjoint();
                local += trace_prod(&(&l * &w2[a]), &(r * w1[a].adjoint()));
            }
            local + trace_prod(&f, &k1) + trace_prod(&g, &k2)
        };
        let nodes: Vec<C64> = (0..=n)
            .map(|k| integrand(&ys[k], &self.r[k], &self.base.r()[k], &s1.v[k], &s1.w[k], &s2.v[k], &s2.w[k]))
            .collect();
        let mids: Vec<C64> = (0..n)
            .map(|k| integrand(&ym[k], &self.rr_mid[k], &self.r_mid[k], &s1.vm[k], &s1.wm[k], &s2.vm[k], &s2.wm[k]))
            .collect();
        let bulk = simpson(&nodes, &mids, h);

        let (l, f, g) = (block(&ys[n], 0, d), block(&ys[n], 1, d), block(&ys[n], 2, d));
        let vr = self.base.v_r();
        let edge = (t1.w_r.adjoint() * &l * &t2.w_r)[(0, 0)]
            + (t1.w_r.adjoint() * &f * vr)[(0, 0)]
            + (vr.adjoint() * &g * &t2.w_r)[(0, 0)];
        Ok(bulk + edge)
    }

    /// `⟨Ψ|Φ(t)⟩ = v_R^† l(L/2) w_R + ∫ (l|V⊗1 + ΣW⊗R̄|r)`.
    pub fn base_overlap(&self, t: &TangentFinite) -> Result<C64, TangentError> {
        let s = self.samples(t)?;
        let (n, h) = (self.base.n(), self.base.h());
        let f = |l: &CMat, r: &CMat, rs: &[CMat], v: &CMat, w: &[CMat]| -> C64 {
            let mut k = v * r;
            for (ra, wa) in rs.iter().zip(w) {
                k += wa * r * ra.adjoint();
            }
            trace_prod(l, &k)
        };
        let nodes: Vec<C64> = (0..=n).map(|k| f(&self.l[k], &self.r[k], &self.base.r()[k], &s.v[k], &s.w[k])).collect();
        let mids: Vec<C64> =
            (0..n).map(|k| f(&self.l_mid[k], &self.rr_mid[k], &self.r_mid[k], &s.vm[k], &s.wm[k])).collect();
        let vr = self.base.v_r();
        Ok(simpson(&nodes, &mids, h) + (vr.adjoint() * &self.l[n] * &t.w_r)[(0, 0)])
    }

    /// Largest `‖l(x)V + Σ R^† l(x) W‖` over the grid.
    pub fn left_residual(&self, t: &TangentFinite) -> Result<f64, TangentError> {
        t.check(self.base)?;
        Ok((0..=self.base.n())
            .map(|k| fro(&self.ket_source(&self.l[k], &t.v[k], &t.w[k], &self.base.r()[k])))
            .fold(0.0, f64::max))
    }

    /// Add the gauge direction that makes `(l(x)|Ṽ⊗1 + ΣW̃⊗R̄] = 0` for every x.
    ///
    /// With `Y = l h`, `dY/dx = T̃(Y) - (l|V⊗1 + ΣW⊗R̄]` from `Y(-L/2) = 0`.
    /// The generator found this way has `v_L^† h(-L/2) = 0` but not in
    /// general `h(-L/2) = 0`; the left boundary vector is unchanged either way.
    pub fn left_gauge_fix(&self, t: &TangentFinite) -> Result<GaugeFixed<TangentFinite>, TangentError> {
        t.check(self.base)?;
        let (n, h, d) = (self.base.n(), self.base.h(), self.base.d());
        // the source is a known function of x: sample it and interpolate
        let src: Vec<CMat> = (0..=n).map(|k| self.ket_source(&self.l[k], &t.v[k], &t.w[k], &self.base.r()[k])).collect();
        // h = 0 solves the fixing equation when the condition already holds;
        // dividing by l(x) near the rank-one left end would only amplify noise
        let lmax = self.l.iter().map(fro).fold(0.0, f64::max);
        let tol = FIXED_TOL * lmax * t.max_abs().max(f64::MIN_POSITIVE);
        if src.iter().all(|m| fro(m) <= tol) {
            let residual = self.left_residual(t)?;
            return Ok(GaugeFixed { tangent: t.clone(), residual });
        }
        let dsrc = grid_derivative4(&src, h);
        let ys = self.layered(CMat::zeros(d, d), |op, k, tt, y| {
            op.left(y) - hermite_at(&src[k], &dsrc[k], &src[k + 1], &dsrc[k + 1], h, tt)
        });

        let mut gen = vec![CMat::zeros(d, d); n + 1];
        let mut dgen = vec![CMat::zeros(d, d); n + 1];
        for k in 1..=n {
            let l = &self.l[k];
            let cn = cond(l);
            if !(cn <= MAX_ENV_COND) {
                return Err(TangentError::IllConditioned { index: k, cond: cn });
            }
            let inv = crate::linalg::inverse(l).ok_or(TangentError::IllConditioned { index: k, cond: f64::INFINITY })?;
            let y = &ys[k];
            gen[k] = &inv * y;
            let op = self.ops.at(k, 0.0);
            dgen[k] = &inv * (op.left(y) - &src[k] - op.left(l) * &gen[k]);
        }
        // l(-L/2) = v_L v_L^† has rank one. h has a finite limit there with
        // v_L^† h = 0 (v_L stays fixed); extrapolate h, h' from the bulk and take the v_L
        // component of h' from `l h' = T̃(Y) - S - T̃(l) h` with Y = 0.
        let vl = self.base.v_l();
        let pv = vl * vl.adjoint() * c(1.0 / vl.norm_squared(), 0.0);
        let ext = |m: &[CMat]| &m[1] * c(4.0, 0.0) - &m[2] * c(6.0, 0.0) + &m[3] * c(4.0, 0.0) - &m[4];
        let g0 = ext(&gen);
        gen[0] = &g0 - &pv * &g0;
        let op0 = self.ops.at(0, 0.0);
        let rhs0 = -&src[0] - op0.left(&self.l[0]) * &gen[0];
        let d0 = ext(&dgen);
        dgen[0] = &d0 - &pv * &d0 + vl * (vl.adjoint() * rhs0) * c(1.0 / vl.norm_squared().powi(2), 0.0);

        let q = self.base.q();
        let r = self.base.r();
        let fixed = TangentFinite {
            v: (0..=n).map(|k| &t.v[k] + comm(&q[k], &gen[k]) + &dgen[k]).collect(),
            w: (0..=n).map(|k| (0..self.base.num_species()).map(|a| &t.w[k][a] + comm(&r[k][a], &gen[k])).collect()).collect(),
            w_r: &t.w_r - &gen[n] * self.base.v_r(),
        };
        let residual = self.left_residual(&fixed)?;
        Ok(GaugeFixed { tangent: fixed, residual })
    }
}

/// `V = [Q,h] + dh/dx`, `W_a = [R_a,h]`, `w_R = -h(L/2) v_R`.
///
/// `dh` defaults to finite differences of `h`.
pub fn gauge_direction_finite(base: &FiniteCmps, h: &[CMat], dh: Option<&[CMat]>) -> Result<TangentFinite, TangentError> {
    let (n, d) = (base.n(), base.d());
    if h.len() != n + 1 || h.iter().any(|m| m.shape() != (d, d)) {
        return Err(TangentError::Mismatch(format!("generator needs {} samples of {d}x{d}", n + 1)));
    }
    let scale = h.iter().map(crate::linalg::max_abs).fold(0.0, f64::max);
    let h0 = crate::linalg::max_abs(&h[0]);
    if h0 > GENERATOR_TOL * scale.max(1.0) {
        return Err(TangentError::BadGenerator(format!("h(-L/2) must vanish, max entry {h0:e}")));
    }
    let fd;
    let dh = match dh {
        Some(x) => {
            if x.len() != n + 1 {
                return Err(TangentError::Mismatch("generator derivative length".into()));
            }
            x
        }
        None => {
            fd = grid_derivative4(h, base.h());
            &fd[..]
        }
    };
    Ok(TangentFinite {
        v: (0..=n).map(|k| comm(&base.q()[k], &h[k]) + &dh[k]).collect(),
        w: (0..=n).map(|k| base.r()[k].iter().map(|ra| comm(ra, &h[k])).collect()).collect(),
        w_r: -(&h[n] * base.v_r()),
    })
}

pub fn overlap_finite(base: &FiniteCmps, t1: &TangentFinite, t2: &TangentFinite) -> Result<C64, TangentError> {
    FiniteTangentSpace::new(base)?.overlap(t1, t2)
}

pub fn base_overlap_finite(base: &FiniteCmps, t: &TangentFinite) -> Result<C64, TangentError> {
    FiniteTangentSpace::new(base)?.base_overlap(t)
}

pub fn left_gauge_fix_finite(base: &FiniteCmps, t: &TangentFinite) -> Result<GaugeFixed<TangentFinite>, TangentError> {
    FiniteTangentSpace::new(base)?.left_gauge_fix(t)
}

// --------------------------------------------------------------- uniform

const P_ZERO: f64 = 1e-14;

/// `V = [Q,h] + i p h`, `W_a = [R_a,h]`.
pub fn gauge_direction_uniform(base: &UniformCmps, h: &CMat, p: f64) -> Result<TangentUniform, TangentError> {
    let d = base.d();
    if h.shape() != (d, d) {
        return Err(CoreError::ShapeError(format!("generator must be {d}x{d}")).into());
    }
    Ok(TangentUniform {
        v: comm(base.q(), h) + h * (I * p),
        w: base.r().iter().map(|ra| comm(ra, h)).collect(),
        p,
    })
}

/// Singular values (ascending) of the linear map `h ↦ ([Q,h] + iph, [R_a,h])`.
pub fn gauge_map_singular_values(base: &UniformCmps, p: f64) -> Vec<f64> {
    let d = base.d();
    let q = base.num_species();
    let rows = (1 + q) * d * d;
    let mut m = CMat::zeros(rows, d * d);
    for j in 0..d * d {
        let mut e = CMat::zeros(d, d);
        e[(j / d, j % d)] = c(1.0, 0.0);
        let t = gauge_direction_uniform(base, &e, p).expect("shape checked");
        let mut col = vec_rm(&t.v).iter().cloned().collect::<Vec<_>>();
        for w in &t.w {
            col.extend(vec_rm(w).iter().cloned());
        }
        m.column_mut(j).copy_from_slice(&col);
    }
    let mut sv: Vec<f64> = m.singular_values().iter().cloned().collect();
    sv.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sv
}

fn ket_source_u(ns: &Normalized, v: &CMat, w: &[CMat]) -> CMat {
    let l = &ns.fp.l;
    let mut s = l * v;
    for (ra, wa) in ns.state.r().iter().zip(w) {
        s += ra.adjoint() * l * wa;
    }
    s
}

/// `(l|[V⊗1 + ΣW⊗R̄]|r)`, the coefficient of `2πδ(p)` in `⟨Ψ|Φ_p⟩`.
pub fn base_overlap_uniform(ns: &Normalized, t: &TangentUniform) -> Result<C64, TangentError> {
    t.check(&ns.state)?;
    Ok(trace_prod(&ket_source_u(ns, &t.v, &t.w), &ns.fp.r))
}

/// Coefficients of `⟨Φ_p(t1)|Φ_p'(t2)⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformOverlap {
    /// Coefficient of `2πδ(p - p')`; exactly zero when the momenta differ.
    pub delta_coefficient: C64,
    /// Coefficient of `(2π)² δ(p) δ(p')`; zero unless both momenta vanish.
    pub p0_extra: C64,
}

pub fn overlap_uniform(ns: &Normalized, t1: &TangentUniform, t2: &TangentUniform) -> Result<UniformOverlap, TangentError> {
    t1.check(&ns.state)?;
    t2.check(&ns.state)?;
    if t1.p != t2.p {
        return Ok(UniformOverlap { delta_coefficient: ZERO, p0_extra: ZERO });
    }
    let p = t1.p;
    let (l, r) = (&ns.fp.l, &ns.fp.r);
    let rs = ns.state.r();
    let sec = ns.plain_op();

    let s2 = ket_source_u(ns, &t2.v, &t2.w);
    let mut k1 = r * t1.v.adjoint();
    let mut b1 = t1.v.adjoint() * l;
    let mut k2 = &t2.v * r;
    let mut local = ZERO;
    for a in 0..rs.len() {
        k1 += &rs[a] * r * t1.w[a].adjoint();
        b1 += t1.w[a].adjoint() * l * &rs[a];
        k2 += &t2.w[a] * r * rs[a].adjoint();
        local += trace_prod(&(l * &t2.w[a]), &(r * t1.w[a].adjoint()));
    }
    let forward = trace_prod(&s2, &sec.resolvent(I * p, &k1)?);
    let backward = trace_prod(&b1, &sec.resolvent(-I * p, &k2)?);
    let p0_extra = if p.abs() <= P_ZERO { trace_prod(&s2, r) * trace_prod(l, &k1) } else { ZERO };
    Ok(UniformOverlap { delta_coefficient: local + forward + backward, p0_extra })
}

/// Solve `(T̃ - ip) Y = S` for a bra. At `p = 0` the rank-one deflation
/// `+ l tr[r Y]` selects the solution with `tr[r Y] = 0`.
fn solve_left(ns: &Normalized, s: &CMat, p: f64) -> Result<CMat, TangentError> {
    let d = ns.d();
    let t = TransferOp::plain(&ns.state);
    let (l, r) = (&ns.fp.l, &ns.fp.r);
    let deflate = p.abs() <= P_ZERO;
    if d <= ns.cfg.dense_threshold {
        let n = d * d;
        let mut m = t.dense().transpose() - CMat::identity(n, n) * (I * p);
        if deflate {
            m += bra_rm(l) * vec_rm(r).transpose();
        }
        let sol = solve(&m, &bra_rm(s)).ok_or_else(|| TangentError::SolveFailed(format!("singular gauge system at p={p}")))?;
        Ok(unvec_rm(&sol, d).transpose())
    } else {
        let op = |y: &CMat| {
            let mut out = t.left(y) - y * (I * p);
            if deflate {
                out += l * trace_prod(r, y);
            }
            out
        };
        let (y, res) = gmres(op, s, None, ns.cfg.solve_tol * 1e-2, ns.cfg.max_iter, 60);
        if res > ns.cfg.solve_tol {
            return Err(TangentError::SolveFailed(format!("GMRES residual {res:e} at p={p}")));
        }
        Ok(y)
    }
}

/// Largest entry of `l V + Σ R^† l W`.
pub fn left_residual_uniform(ns: &Normalized, t: &TangentUniform) -> f64 {
    crate::linalg::max_abs(&ket_source_u(ns, &t.v, &t.w))
}

/// Add the gauge direction enforcing `(l|Ṽ⊗1 + ΣW̃⊗R̄] = 0`.
///
/// At `p = 0` the gauge map has the identity in its kernel and the system
/// is solvable only when the tangent is orthogonal to the base state. With
/// `orthogonalize` the base-state component `c·1` is removed from V first;
/// otherwise a nonzero component is `GaugeSingular`.
pub fn left_gauge_fix_uniform(
    ns: &Normalized,
    t: &TangentUniform,
    orthogonalize: bool,
) -> Result<GaugeFixed<TangentUniform>, TangentError> {
    t.check(&ns.state)?;
    let d = ns.d();
    let (l, r) = (&ns.fp.l, &ns.fp.r);
    let mut v = t.v.clone();
    let mut s = ket_source_u(ns, &v, &t.w);
    if t.p.abs() <= P_ZERO {
        let c0 = trace_prod(&s, r);
        let scale = fro(&s).max(1.0);
        if orthogonalize {
            v -= eye(d) * c0;
            s -= l * c0;
        } else if c0.norm() > 1e-10 * scale {
            return Err(TangentError::GaugeSingular(format!(
                "p=0 tangent has base-state component {c0}; orthogonalize first"
            )));
        }
    }
    let y = solve_left(ns, &s, t.p)?;
    let cn = cond(l);
    if !(cn <= MAX_ENV_COND) {
        return Err(TangentError::IllConditioned { index: 0, cond: cn });
    }
    let h = crate::linalg::inverse(l).ok_or(TangentError::IllConditioned { index: 0, cond: f64::INFINITY })? * y;
    let g = gauge_direction_uniform(&ns.state, &h, t.p)?;
    let fixed = TangentUniform { v: v + g.v, w: t.w.iter().zip(&g.w).map(|(a, b)| a + b).collect(), p: t.p };
    let residual = left_residual_uniform(ns, &fixed);
    Ok(GaugeFixed { tangent: fixed, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite::mixed_overlap;
    use crate::random::{random_matrix, random_smooth_finite, random_uniform};
    use crate::species::SpeciesTable;
    use crate::uniform::EvalConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn random_tangent(r: &mut ChaCha8Rng, base: &FiniteCmps) -> TangentFinite {
        // smooth in x: two random matrices mixed by low harmonics
        let d = base.d();
        let l = base.length();
        let mk = |r: &mut ChaCha8Rng| [random_matrix(r, d), random_matrix(r, d)];
        let vc = mk(r);
        let wc: Vec<[CMat; 2]> = (0..base.num_species()).map(|_| mk(r)).collect();
        let f = |m: &[CMat; 2], x: f64| &m[0] * c((x / l).cos(), 0.0) + &m[1] * c((2.0 * x / l).sin(), 0.0);
        let xs = base.grid();
        TangentFinite {
            v: xs.iter().map(|&x| f(&vc, x)).collect(),
            w: xs.iter().map(|&x| wc.iter().map(|m| f(m, x)).collect()).collect(),
            w_r: crate::random::random_vector(r, d),
        }
    }

    /// Generator `h = a t + b sin(πt)` with `t = x/L + 1/2`, and its exact derivative.
    fn generator(r: &mut ChaCha8Rng, base: &FiniteCmps) -> (Vec<CMat>, Vec<CMat>) {
        let d = base.d();
        let a = random_matrix(r, d);
        let b = random_matrix(r, d);
        let l = base.length();
        let pi = std::f64::consts::PI;
        let xs = base.grid();
        let h = xs.iter().map(|&x| {
            let t = x / l + 0.5;
            &a * c(t, 0.0) + &b * c((pi * t).sin(), 0.0)
        });
        let dh = xs.iter().map(|&x| {
            let t = x / l + 0.5;
            (&a + &b * c(pi * (pi * t).cos(), 0.0)) * c(1.0 / l, 0.0)
        });
        (h.collect(), dh.collect())
    }

    fn base(seed: u64, d: usize, q: usize, n: usize) -> FiniteCmps {
        random_smooth_finite(&mut rng(seed), d, &SpeciesTable::bosons(q), 1.0, n)
    }

    #[test]
    fn identity_generator_is_the_base_embedding_swap() {
        let b = base(1, 2, 1, 64);
        let l = b.length();
        let h: Vec<CMat> = b.grid().iter().map(|&x| eye(2) * c(x / l + 0.5, 0.0)).collect();
        let t = gauge_direction_finite(&b, &h, None).unwrap();
        for k in 0..=b.n() {
            assert!((&t.v[k] - eye(2) * c(1.0 / l, 0.0)).norm() < 1e-10);
            assert!(t.w[k][0].norm() < 1e-12);
        }
        assert!((&t.w_r + b.v_r()).norm() < 1e-12);
        let z = gauge_direction_finite(&b, &vec![CMat::zeros(2, 2); 65], None).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        let mut bad = h.clone();
        bad[0] = eye(2);
        assert!(matches!(gauge_direction_finite(&b, &bad, None), Err(TangentError::BadGenerator(_))));
    }

    #[test]
    fn base_state_embeddings() {
        let b = base(2, 2, 2, 400);
        let sp = FiniteTangentSpace::new(&b).unwrap();
        let nrm = sp.norm();
        let mut t = TangentFinite::zeros(&b);
        t.w_r = b.v_r().clone();
        assert!((sp.overlap(&t, &t).unwrap() - c(nrm, 0.0)).norm() < 1e-12 * nrm);
        let e = TangentFinite::base_embedding(&b);
        assert!((sp.base_overlap(&e).unwrap() - c(nrm, 0.0)).norm() < 1e-9 * nrm);
        assert!((sp.base_overlap(&t).unwrap() - c(nrm, 0.0)).norm() < 1e-12 * nrm);
        // both embeddings are the same physical vector
        let diff = e.add(&t.scaled(c(-1.0, 0.0)));
        assert!(sp.overlap(&diff, &diff).unwrap().norm() < 1e-9 * nrm);
    }

    #[test]
    fn finite_gauge_directions_are_null() {
        let b = base(3, 2, 1, 1000);
        let sp = FiniteTangentSpace::new(&b).unwrap();
        let mut r = rng(33);
        for i in 0..5 {
            let (h, dh) = generator(&mut r, &b);
            let g = if i % 2 == 0 {
                gauge_direction_finite(&b, &h, Some(&dh)).unwrap()
            } else {
                gauge_direction_finite(&b, &h, None).unwrap()
            };
            let scale = sp.norm() * g.max_abs().powi(2);
            let n = sp.overlap(&g, &g).unwrap();
            assert!(n.norm() < 1e-8 * scale, "gauge norm {n}, scale {scale}");
            let t = random_tangent(&mut r, &b);
            let x = sp.overlap(&t, &g).unwrap();
            assert!(x.norm() < 1e-6 * scale.sqrt() * t.max_abs(), "overlap with gauge direction {x}");
        }
    }

    #[test]
    fn finite_overlap_is_hermitian_and_matches_finite_differences() {
        let b = base(4, 2, 1, 2000);
        let sp = FiniteTangentSpace::new(&b).unwrap();
        let mut r = rng(44);
        let t1 = random_tangent(&mut r, &b);
        let t2 = random_tangent(&mut r, &b);
        let a = sp.overlap(&t1, &t2).unwrap();
        let bk = sp.overlap(&t2, &t1).unwrap();
        assert!((a - bk.conj()).norm() < 1e-12 * a.norm());
        assert!(sp.overlap(&t1, &t1).unwrap().re > 0.0);

        let eps = 1e-3;
        let f = |e1: f64, e2: f64| {
            mixed_overlap(&t1.displace(&b, e1).unwrap(), &t2.displace(&b, e2).unwrap()).unwrap()
        };
        let fd = (f(eps, eps) - f(eps, -eps) - f(-eps, eps) + f(-eps, -eps)) / (4.0 * eps * eps);
        assert!((a - fd).norm() < 1e-5 * a.norm(), "metric {a} vs finite differences {fd}");

        let g = |e: f64| mixed_overlap(&b, &t2.displace(&b, e).unwrap()).unwrap();
        let fd1 = (g(eps) - g(-eps)) / (2.0 * eps);
        let bo = sp.base_overlap(&t2).unwrap();
        assert!((bo - fd1).norm() < 1e-5 * bo.norm(), "base overlap {bo} vs {fd1}");
    }

    #[test]
    fn finite_left_gauge_fix() {
        let b = base(5, 2, 1, 4000);
        let sp = FiniteTangentSpace::new(&b).unwrap();
        let mut r = rng(55);
        let t = random_tangent(&mut r, &b);
        let fixed = sp.left_gauge_fix(&t).unwrap();
        assert!(fixed.residual <= 1e-6, "residual {}", fixed.residual);
        let s = sp.left_gauge_fix(&random_tangent(&mut r, &b)).unwrap().tangent;
        let before = sp.overlap(&s, &t).unwrap();
        let after = sp.overlap(&s, &fixed.tangent).unwrap();
        assert!((before - after).norm() < 1e-7 * before.norm().max(1.0), "{before} vs {after}");

        let again = sp.left_gauge_fix(&fixed.tangent).unwrap().tangent;
        let d = again.add(&fixed.tangent.scaled(c(-1.0, 0.0)));
        assert!(d.max_abs() < 1e-10 * fixed.tangent.max_abs().max(1.0), "refix moved by {}", d.max_abs());
        // a nearly fixed tangent goes through the solve; the physical vector stays put
        let nudged = fixed.tangent.add(&random_tangent(&mut r, &b).scaled(c(1e-6, 0.0)));
        let refit = sp.left_gauge_fix(&nudged).unwrap().tangent;
        let diff = refit.add(&nudged.scaled(c(-1.0, 0.0)));
        assert!(sp.overlap(&diff, &diff).unwrap().norm() < 1e-14, "physical change {}", sp.overlap(&diff, &diff).unwrap());

        let (h, dh) = generator(&mut r, &b);
        let g = gauge_direction_finite(&b, &h, Some(&dh)).unwrap();
        let z = sp.left_gauge_fix(&g).unwrap().tangent;
        assert!(z.max_abs() < 1e-8, "gauge direction fixed to {}", z.max_abs());

        // gauge-fixed with wR ⊥ l(L/2) v_R has no base component
        let mut u = fixed.tangent.clone();
        let lv = &sp.l[b.n()] * b.v_r();
        let proj = (lv.adjoint() * &u.w_r)[(0, 0)] / lv.norm_squared();
        u.w_r -= &lv * proj;
        assert!(sp.base_overlap(&u).unwrap().norm() < 1e-8);
    }

    #[test]
    fn finite_gauge_invariance_of_fixed_test_tangent() {
        let b = base(6, 2, 1, 1000);
        let sp = FiniteTangentSpace::new(&b).unwrap();
        let mut r = rng(66);
        let s = sp.left_gauge_fix(&random_tangent(&mut r, &b)).unwrap().tangent;
        let t = random_tangent(&mut r, &b);
        let (h, dh) = generator(&mut r, &b);
        let g = gauge_direction_finite(&b, &h, Some(&dh)).unwrap();
        let a = sp.overlap(&s, &t).unwrap();
        let a2 = sp.overlap(&s, &t.add(&g)).unwrap();
        assert!((a - a2).norm() < 1e-8 * a.norm().max(1.0));
    }

    fn normalized(seed: u64, d: usize, q: usize) -> Normalized {
        let s = random_uniform(&mut rng(seed), d, &SpeciesTable::bosons(q));
        Normalized::new(&s, None, EvalConfig::default()).unwrap()
    }

    fn random_utangent(r: &mut ChaCha8Rng, d: usize, q: usize, p: f64) -> TangentUniform {
        TangentUniform { v: random_matrix(r, d), w: (0..q).map(|_| random_matrix(r, d)).collect(), p }
    }

    /// Deflated resolvent from the dense matrix: `P pinv(P(-T+z)P) P` with
    /// the oblique projector `P = 1 - |r)(l|`.
    fn oracle_delta(ns: &Normalized, t1: &TangentUniform, t2: &TangentUniform) -> C64 {
        let d = ns.d();
        let n = d * d;
        let (l, r) = (&ns.fp.l, &ns.fp.r);
        let tm = TransferOp::plain(&ns.state).dense();
        let pr = CMat::identity(n, n) - vec_rm(r) * bra_rm(l).transpose();
        let res = |z: C64| {
            let m = &pr * (-&tm + CMat::identity(n, n) * z) * &pr;
            &pr * m.pseudo_inverse(1e-10).unwrap() * &pr
        };
        let rs = ns.state.r();
        let ins = |v: &CMat, w: &[CMat], ket: bool| {
            let mut m = if ket { crate::linalg::kron(v, &eye(d)) } else { crate::linalg::kron(&eye(d), &v.map(|z| z.conj())) };
            for a in 0..rs.len() {
                m += if ket {
                    crate::linalg::kron(&w[a], &rs[a].map(|z| z.conj()))
                } else {
                    crate::linalg::kron(&rs[a], &w[a].map(|z| z.conj()))
                };
            }
            m
        };
        let a2 = ins(&t2.v, &t2.w, true);
        let b1 = ins(&t1.v, &t1.w, false);
        let mut local = CMat::zeros(n, n);
        for a in 0..rs.len() {
            local += crate::linalg::kron(&t2.w[a], &t1.w[a].map(|z| z.conj()));
        }
        let bl = bra_rm(l).transpose();
        let vr = vec_rm(r);
        let p = t1.p;
        let tot = &bl * (local + &a2 * res(I * p) * &b1 + &b1 * res(-I * p) * &a2) * &vr;
        tot[(0, 0)]
    }

    #[test]
    fn uniform_overlap_matches_dense_oracle() {
        let ns = normalized(7, 3, 2);
        let mut r = rng(77);
        for &p in &[0.0, 0.7, -2.3] {
            let t1 = random_utangent(&mut r, 3, 2, p);
            let t2 = random_utangent(&mut r, 3, 2, p);
            let o = overlap_uniform(&ns, &t1, &t2).unwrap();
            let want = oracle_delta(&ns, &t1, &t2);
            assert!((o.delta_coefficient - want).norm() < 1e-9 * want.norm().max(1.0), "p={p}: {} vs {want}", o.delta_coefficient);
            let back = overlap_uniform(&ns, &t2, &t1).unwrap();
            assert!((o.delta_coefficient - back.delta_coefficient.conj()).norm() < 1e-10 * want.norm().max(1.0));
            if p == 0.0 {
                let want0 = base_overlap_uniform(&ns, &t2).unwrap() * base_overlap_uniform(&ns, &t1).unwrap().conj();
                assert!((o.p0_extra - want0).norm() < 1e-10 * want0.norm().max(1.0));
            } else {
                assert_eq!(o.p0_extra, ZERO);
            }
        }
        let t1 = random_utangent(&mut r, 3, 2, 0.5);
        let t2 = random_utangent(&mut r, 3, 2, 0.6);
        assert_eq!(overlap_uniform(&ns, &t1, &t2).unwrap().delta_coefficient, ZERO);
    }

    #[test]
    fn uniform_gauge_directions() {
        let ns = normalized(8, 3, 1);
        let mut r = rng(88);
        let id = gauge_direction_uniform(&ns.state, &eye(3), 0.0).unwrap();
        assert!(id.max_abs() < 1e-14);
        let idp = gauge_direction_uniform(&ns.state, &eye(3), 1.5).unwrap();
        assert!((&idp.v - eye(3) * c(0.0, 1.5)).norm() < 1e-14 && idp.w[0].norm() < 1e-14);
        for &p in &[0.0, 0.4, -3.0] {
            let g = gauge_direction_uniform(&ns.state, &random_matrix(&mut r, 3), p).unwrap();
            let o = overlap_uniform(&ns, &g, &g).unwrap();
            assert!(o.delta_coefficient.norm() < 1e-8 * g.max_abs().powi(2), "p={p}: {}", o.delta_coefficient);
        }
        let sv0 = gauge_map_singular_values(&ns.state, 0.0);
        assert!(sv0[0] < 1e-12 && sv0[1] > 1e-6, "{sv0:?}");
        let sv = gauge_map_singular_values(&ns.state, 0.3);
        assert!(sv[0] > 1e-3);
    }

    #[test]
    fn uniform_left_gauge_fix() {
        let ns = normalized(9, 4, 2);
        let mut r = rng(99);
        for &p in &[0.0, 0.9, -1.7] {
            let t = random_utangent(&mut r, 4, 2, p);
            let f = left_gauge_fix_uniform(&ns, &t, true).unwrap();
            assert!(f.residual <= 1e-10, "residual {}", f.residual);
            assert!(base_overlap_uniform(&ns, &f.tangent).unwrap().norm() <= 1e-10);
            let s = left_gauge_fix_uniform(&ns, &random_utangent(&mut r, 4, 2, p), true).unwrap().tangent;
            let o = overlap_uniform(&ns, &s, &f.tangent).unwrap().delta_coefficient;
            let mut local = ZERO;
            for a in 0..2 {
                local += trace_prod(&(&ns.fp.l * &f.tangent.w[a]), &(&ns.fp.r * s.w[a].adjoint()));
            }
            assert!((o - local).norm() < 1e-9 * local.norm().max(1.0), "p={p}: {o} vs local {local}");
            assert!(overlap_uniform(&ns, &f.tangent, &f.tangent).unwrap().delta_coefficient.re >= -1e-10);
            let again = left_gauge_fix_uniform(&ns, &f.tangent, true).unwrap().tangent;
            assert!((&again.v - &f.tangent.v).norm() < 1e-10);
            // the physical vector is unchanged away from p = 0
            if p != 0.0 {
                let before = overlap_uniform(&ns, &s, &t).unwrap().delta_coefficient;
                assert!((before - o).norm() < 1e-9 * o.norm().max(1.0));
                let g = gauge_direction_uniform(&ns.state, &random_matrix(&mut r, 4), p).unwrap();
                let z = left_gauge_fix_uniform(&ns, &g, false).unwrap().tangent;
                assert!(z.max_abs() < 1e-9, "gauge direction fixed to {}", z.max_abs());
            }
        }
        let t0 = random_utangent(&mut r, 4, 2, 0.0);
        assert!(matches!(left_gauge_fix_uniform(&ns, &t0, false), Err(TangentError::GaugeSingular(_))));
        let one = TangentUniform { v: eye(4), w: vec![CMat::zeros(4, 4); 2], p: 0.0 };
        assert!((base_overlap_uniform(&ns, &one).unwrap() - c(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn scalar_canonical_local_term() {
        // D = 1: gauge-fixed metric is |w|^2
        let s = UniformCmps::new(SpeciesTable::single_boson(), CMat::from_element(1, 1, c(-0.5, 0.3)), vec![CMat::from_element(1, 1, c(1.0, 0.0))]).unwrap();
        let ns = Normalized::new(&s, None, EvalConfig::default()).unwrap();
        let t = TangentUniform { v: CMat::from_element(1, 1, c(0.2, 0.1)), w: vec![CMat::from_element(1, 1, c(0.6, -0.8))], p: 1.0 };
        let f = left_gauge_fix_uniform(&ns, &t, false).unwrap().tangent;
        let o = overlap_uniform(&ns, &f, &f).unwrap().delta_coefficient;
        assert!((o - c(1.0, 0.0)).norm() < 1e-12, "{o}");
    }

    #[test]
    fn iterative_gauge_fix_matches_dense() {
        let s = random_uniform(&mut rng(10), 3, &SpeciesTable::bosons(1));
        let dense = Normalized::new(&s, None, EvalConfig::default()).unwrap();
        let it = Normalized::new(&s, None, EvalConfig { dense_threshold: 0, ..EvalConfig::default() }).unwrap();
        let t = random_utangent(&mut rng(11), 3, 1, 0.8);
        let a = left_gauge_fix_uniform(&dense, &t, false).unwrap().tangent;
        let b = left_gauge_fix_uniform(&it, &t, false).unwrap().tangent;
        assert!((&a.v - &b.v).norm() < 1e-7, "{}", (&a.v - &b.v).norm());
    }
}


