//! Lattice discretization of a cMPS, used as an independent oracle.
//!
//! A site of length `a` carries `A⁰ = 1 + aQ`, `A^α = √a R_α` and, with
//! `nmax = 2`, two-particle tensors `(a/2)(R_α R_β + η_{αβ} R_β R_α)` for
//! `α < β` and `√2 (a/2) R_α²` for a doubly occupied bosonic mode (the
//! `√2` is the norm of `(c†)²|0⟩`). Lattice operators are `ψ = c/√a`.

use serde::Serialize;
use thiserror::Error;

use crate::error::{CoreError, ErrorClass};
use crate::linalg::{bra_rm, c, comm, eig, eye, expm, kron, vec_rm, CMat, C64};
use crate::species::SpeciesTable;
use crate::state::{lerp, FiniteCmps, UniformCmps};
use crate::transfer::TransferOp;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("lattice transfer matrix has a degenerate leading eigenvalue (gap {gap:e})")]
    NonInjective { gap: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl LatticeError {
    pub fn code(&self) -> &'static str {
        match self {
            LatticeError::GridMismatch(_) => "GridMismatch",
            LatticeError::NonInjective { .. } => "NonInjective",
            LatticeError::Unsupported(_) => "Unsupported",
            LatticeError::Core(e) => e.code(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            LatticeError::NonInjective { .. } => ErrorClass::Numerical,
            LatticeError::Core(e) => e.class(),
            _ => ErrorClass::Validation,
        }
    }
}

/// Largest per-site occupation built.
pub const MAX_NMAX: usize = 4;

/// Largest dense lattice transfer matrix built for the uniform oracle.
pub const MAX_ORACLE_D: usize = 8;

/// Local occupation numbers, one per species.
pub type Label = Vec<usize>;

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeMps {
    pub a: f64,
    pub nmax: usize,
    pub species: SpeciesTable,
    pub labels: Vec<Label>,
    /// `sites[n][s]`: tensor for label `s` at site `n`. Uniform states have one site.
    pub sites: Vec<Vec<CMat>>,
    /// Boundary vectors for finite states.
    pub boundary: Option<(crate::linalg::CVec, crate::linalg::CVec)>,
}

fn labels(species: &SpeciesTable, nmax: usize) -> Vec<Label> {
    let q = species.len();
    let mut out: Vec<Label> = vec![vec![0; q]];
    let mut frontier = out.clone();
    for _ in 0..nmax {
        let mut next = Vec::new();
        for l in &frontier {
            // only add at or after the last occupied species so each multiset appears once
            let start = l.iter().rposition(|&n| n > 0).unwrap_or(0);
            for a in start..q {
                if species.is_fermion(a) && l[a] == 1 {
                    continue;
                }
                let mut m = l.clone();
                m[a] += 1;
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Distinct orderings of a sorted multiset, each with the exchange sign that
/// brings its creation operators back to sorted order.
fn orderings(occ: &[usize], species: &SpeciesTable) -> Vec<(Vec<usize>, f64)> {
    let mut stack = vec![occ.to_vec()];
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    while let Some(seq) = stack.pop() {
        if !seen.insert(seq.clone()) {
            continue;
        }
        for i in 0..seq.len().saturating_sub(1) {
            if seq[i] != seq[i + 1] {
                let mut t = seq.clone();
                t.swap(i, i + 1);
                stack.push(t);
            }
        }
        let mut sign = 1.0;
        let mut work = seq.clone();
        for i in 0..work.len() {
            for j in 0..work.len() - 1 - i {
                if work[j] > work[j + 1] {
                    sign *= species.eta(work[j], work[j + 1]);
                    work.swap(j, j + 1);
                }
            }
        }
        out.push((seq, sign));
    }
    out
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// k particles in one cell: `a^{k/2}/k! Σ_orderings ± R…R`, times `√Π n_α!` for
/// the normalized occupation basis.
fn site_tensors(q: &CMat, r: &[CMat], species: &SpeciesTable, labels: &[Label], a: f64) -> Vec<CMat> {
    let d = q.nrows();
    labels
        .iter()
        .map(|l| {
            let occ: Vec<usize> = l.iter().enumerate().flat_map(|(i, &n)| std::iter::repeat(i).take(n)).collect();
            let k = occ.len();
            if k == 0 {
                return eye(d) + q * c(a, 0.0);
            }
            let norm: f64 = l.iter().map(|&n| factorial(n)).product::<f64>().sqrt();
            let mut t = CMat::zeros(d, d);
            for (seq, sign) in orderings(&occ, species) {
                let p = seq.iter().fold(eye(d), |p, &x| p * &r[x]);
                t += p * c(sign, 0.0);
            }
            t * c(a.powf(k as f64 / 2.0) * norm / factorial(k), 0.0)
        })
        .collect()
}

fn check_spacing(a: f64, nmax: usize) -> Result<(), LatticeError> {
    if !(a.is_finite() && a > 0.0) {
        return Err(CoreError::Invalid(format!("lattice spacing must be positive, got {a}")).into());
    }
    if !(1..=MAX_NMAX).contains(&nmax) {
        return Err(CoreError::Invalid(format!("nmax must be between 1 and {MAX_NMAX}, got {nmax}")).into());
    }
    Ok(())
}

pub fn discretize_uniform(state: &UniformCmps, a: f64, nmax: usize) -> Result<LatticeMps, LatticeError> {
    check_spacing(a, nmax)?;
    let labels = labels(state.species(), nmax);
    let site = site_tensors(state.q(), state.r(), state.species(), &labels, a);
    Ok(LatticeMps { a, nmax, species: state.species().clone(), labels, sites: vec![site], boundary: None })
}

/// Site `n` of the lattice covers `[x_n, x_n + a]`; its tensors use the
/// linearly interpolated data at the site midpoint. `a` must divide the
/// grid spacing.
pub fn discretize_finite(state: &FiniteCmps, a: f64, nmax: usize) -> Result<LatticeMps, LatticeError> {
    check_spacing(a, nmax)?;
    state.require_open()?;
    let ratio = state.h() / a;
    let m = ratio.round();
    if m < 1.0 || (ratio - m).abs() > 1e-9 * ratio {
        return Err(LatticeError::GridMismatch(format!("spacing {a} does not divide the grid spacing {}", state.h())));
    }
    let m = m as usize;
    let labels = labels(state.species(), nmax);
    let mut sites = Vec::with_capacity(state.n() * m);
    for k in 0..state.n() {
        for j in 0..m {
            let t = (j as f64 + 0.5) / m as f64;
            let q = lerp(&state.q()[k], &state.q()[k + 1], t);
            let r: Vec<CMat> = (0..state.num_species()).map(|s| lerp(&state.r()[k][s], &state.r()[k + 1][s], t)).collect();
            sites.push(site_tensors(&q, &r, state.species(), &labels, a));
        }
    }
    Ok(LatticeMps {
        a,
        nmax,
        species: state.species().clone(),
        labels,
        sites,
        boundary: Some((state.v_l().clone(), state.v_r().clone())),
    })
}

impl LatticeMps {
    pub fn d(&self) -> usize {
        self.sites[0][0].nrows()
    }

    fn index(&self, l: &[usize]) -> Option<usize> {
        self.labels.iter().position(|x| x == l)
    }

    /// `Σ_s w(s) A^s ⊗ conj(A^s)` at site `n`.
    fn diag_transfer(&self, n: usize, w: impl Fn(&Label) -> f64) -> CMat {
        let d = self.d();
        let mut e = CMat::zeros(d * d, d * d);
        for (s, l) in self.labels.iter().enumerate() {
            let wt = w(l);
            if wt != 0.0 {
                let a = &self.sites[n][s];
                e += kron(a, &a.map(|z| z.conj())) * c(wt, 0.0);
            }
        }
        e
    }

    /// Transfer matrix with `c_α` (`raise = false`) or `c_α^†` acting on the ket.
    fn ladder_transfer(&self, n: usize, alpha: usize, raise: bool) -> CMat {
        let d = self.d();
        let mut e = CMat::zeros(d * d, d * d);
        for (s, l) in self.labels.iter().enumerate() {
            let mut other = l.clone();
            let amp = if raise {
                other[alpha] += 1;
                ((l[alpha] + 1) as f64).sqrt()
            } else {
                if l[alpha] == 0 {
                    continue;
                }
                other[alpha] -= 1;
                (l[alpha] as f64).sqrt()
            };
            if let Some(t) = self.index(&other) {
                e += kron(&self.sites[n][s], &self.sites[n][t].map(|z| z.conj())) * c(amp, 0.0);
            }
        }
        e
    }

    /// `E = Σ_s A^s ⊗ conj(A^s)` at site `n`.
    pub fn transfer(&self, n: usize) -> CMat {
        self.diag_transfer(n, |_| 1.0)
    }
}

/// `‖E - 1 - a T‖_F` for the `nmax = 2` discretization.
pub fn lattice_transfer_check(state: &UniformCmps, a: f64) -> Result<f64, LatticeError> {
    let mps = discretize_uniform(state, a, 2)?;
    let t = TransferOp::plain(state).dense();
    let n = t.nrows();
    Ok((mps.transfer(0) - CMat::identity(n, n) - t * c(a, 0.0)).norm())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeObservables {
    /// Leading eigenvalue of E (norm per site).
    pub norm: f64,
    /// `⟨c†_α c_α⟩ / a` per species.
    pub density: Vec<f64>,
    /// `⟨c†_α(n) c†_β(n+1) c_β(n+1) c_α(n)⟩ / a²`, row-major over species.
    pub pair_density: Vec<Vec<f64>>,
    /// `Σ_α ⟨(c†_{n+1} - c†_n)(c_{n+1} - c_n)⟩ / a³` for species α.
    pub kinetic: f64,
}

fn kinetic_supported(species: &SpeciesTable) -> Result<(), LatticeError> {
    // neighbor hopping needs no string for bosons or for a single species
    if species.all_bosons() || species.len() == 1 {
        Ok(())
    } else {
        Err(LatticeError::Unsupported("lattice hopping with several species including fermions".into()))
    }
}

/// Observables of a uniform lattice MPS from dense fixed points of E.
pub fn lattice_observables(mps: &LatticeMps) -> Result<LatticeObservables, LatticeError> {
    if mps.sites.len() != 1 || mps.boundary.is_some() {
        return Err(LatticeError::Unsupported("use lattice_observables_finite for finite lattices".into()));
    }
    if mps.d() > MAX_ORACLE_D {
        return Err(CoreError::TooLargeForDense { d: mps.d(), budget: MAX_ORACLE_D }.into());
    }
    kinetic_supported(&mps.species)?;
    let e = mps.transfer(0);
    let (vals, vecs) = eig(&e);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| vals[j].re.partial_cmp(&vals[i].re).unwrap());
    let lam = vals[order[0]];
    if vals.len() > 1 {
        let gap = lam.re - vals[order[1]].re;
        if gap <= 1e-12 * lam.norm() {
            return Err(LatticeError::NonInjective { gap });
        }
    }
    let r = vecs.column(order[0]).into_owned();
    let (lv, lvecs) = eig(&e.transpose());
    let li = (0..lv.len()).min_by(|&i, &j| (lv[i] - lam).norm().partial_cmp(&(lv[j] - lam).norm()).unwrap()).unwrap();
    let l = lvecs.column(li).into_owned();
    let z = (l.transpose() * &r)[(0, 0)];
    let pair = |x: &CMat| -> C64 { (l.transpose() * x * &r)[(0, 0)] / z };

    let q = mps.species.len();
    let a = mps.a;
    let num = |alpha: usize| mps.diag_transfer(0, move |s: &Label| s[alpha] as f64);
    let density: Vec<f64> = (0..q).map(|al| pair(&num(al)).re / lam.re / a).collect();
    let pair_density = (0..q)
        .map(|al| (0..q).map(|be| pair(&(num(al) * num(be))).re / (lam.re * lam.re * a * a)).collect())
        .collect();
    let mut kinetic = 0.0;
    for al in 0..q {
        let onsite = 2.0 * pair(&num(al)).re / lam.re;
        let hop = pair(&(mps.ladder_transfer(0, al, true) * mps.ladder_transfer(0, al, false))) / (lam * lam);
        kinetic += (onsite - 2.0 * hop.re) / (a * a * a);
    }
    Ok(LatticeObservables { norm: lam.re, density, pair_density, kinetic })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteLatticeObservables {
    pub norm: f64,
    /// `Σ_n ⟨c†_α c_α⟩` per species.
    pub particle_number: Vec<f64>,
    /// `Σ_α Σ_n ⟨(c†_{n+1} - c†_n)(c_{n+1} - c_n)⟩ / a²`, the lattice `∫⟨∂ψ†∂ψ⟩`.
    pub kinetic: f64,
}

/// Left-to-right contraction of a finite lattice MPS.
pub fn lattice_observables_finite(mps: &LatticeMps) -> Result<FiniteLatticeObservables, LatticeError> {
    let (vl, vr) = mps.boundary.clone().ok_or_else(|| LatticeError::Unsupported("lattice has no boundary vectors".into()))?;
    kinetic_supported(&mps.species)?;
    let m = mps.sites.len();
    let bl = bra_rm(&(&vl * vl.adjoint())).transpose();
    let kr = vec_rm(&(&vr * vr.adjoint()));
    let es: Vec<CMat> = (0..m).map(|n| mps.transfer(n)).collect();
    let mut left = Vec::with_capacity(m + 1);
    left.push(bl);
    for n in 0..m {
        let next = left[n].clone() * &es[n];
        left.push(next);
    }
    let mut right = vec![kr.clone(); m + 1];
    for n in (0..m).rev() {
        right[n] = &es[n] * &right[n + 1];
    }
    let norm = (&left[m] * &kr)[(0, 0)].re;
    let q = mps.species.len();
    let a = mps.a;
    let mut particle_number = vec![0.0; q];
    let mut kinetic = 0.0;
    for al in 0..q {
        let mut onsite = vec![0.0; m];
        for n in 0..m {
            let en = mps.diag_transfer(n, |s: &Label| s[al] as f64);
            onsite[n] = (&left[n] * en * &right[n + 1])[(0, 0)].re / norm;
            particle_number[al] += onsite[n];
        }
        for n in 0..m - 1 {
            let hop = (&left[n] * mps.ladder_transfer(n, al, true) * mps.ladder_transfer(n + 1, al, false) * &right[n + 2])[(0, 0)] / norm;
            kinetic += (onsite[n] + onsite[n + 1] - 2.0 * hop.re) / (a * a);
        }
    }
    Ok(FiniteLatticeObservables { norm, particle_number, kinetic })
}

/// `‖[U(x,y), B] - ∫_y^x U(x,z)[A(z),B]U(z,y) dz‖_F` with `dU(x,y)/dx = A(x)U(x,y)`.
///
/// U is a product of midpoint exponentials over `steps` intervals and the
/// integral uses the trapezoid rule on the same points, so the residual
/// falls off as `steps^-2`.
pub fn verify_commutator_identity(
    afun: impl Fn(f64) -> CMat,
    b: &CMat,
    interval: (f64, f64),
    steps: usize,
) -> Result<f64, LatticeError> {
    if steps < 16 {
        return Err(CoreError::Invalid(format!("need at least 16 steps, got {steps}")).into());
    }
    let (y, x) = interval;
    let d = b.nrows();
    let dz = (x - y) / steps as f64;
    let zs: Vec<f64> = (0..=steps).map(|j| y + j as f64 * dz).collect();
    let step: Vec<CMat> = (0..steps).map(|j| expm(&(afun(zs[j] + 0.5 * dz) * c(dz, 0.0)))).collect();
    // fwd[j] = U(z_j, y), bwd[j] = U(x, z_j)
    let mut fwd = vec![eye(d); steps + 1];
    for j in 0..steps {
        fwd[j + 1] = &step[j] * &fwd[j];
    }
    let mut bwd = vec![eye(d); steps + 1];
    for j in (0..steps).rev() {
        bwd[j] = &bwd[j + 1] * &step[j];
    }
    let lhs = comm(&fwd[steps], b);
    let mut rhs = CMat::zeros(d, d);
    for j in 0..=steps {
        let w = if j == 0 || j == steps { 0.5 } else { 1.0 };
        rhs += &bwd[j] * comm(&afun(zs[j]), b) * &fwd[j] * c(w * dz, 0.0);
    }
    Ok((lhs - rhs).norm())
}
