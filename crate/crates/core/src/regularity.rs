//! Algebraic constraints on `(Q, {R_a})`: the exchange condition needed for
//! finite kinetic energy, its higher-order nested-commutator variants, and
//! the fermion-parity block structure.

use serde::Serialize;
use thiserror::Error;

use crate::error::{CoreError, ErrorClass};
use crate::linalg::{c, grid_derivative, zeros, CMat, CVec, ONE};
use crate::species::SpeciesTable;
use crate::state::{FiniteCmps, UniformCmps};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_ORDER_CAP: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegularityError {
    #[error("regularity order must be between 2 and {cap}, got {order}")]
    BadOrder { order: usize, cap: usize },
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl RegularityError {
    pub fn code(&self) -> &'static str {
        match self {
            RegularityError::BadOrder { .. } => "BadOrder",
            RegularityError::ShapeError(_) => "ShapeError",
            RegularityError::Core(e) => e.code(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        ErrorClass::Validation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    pub order: usize,
    /// `residuals[a][b]` for the ordered species pair `(a, b)`.
    pub residuals: Vec<Vec<f64>>,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl RegularityReport {
    fn from_table(order: usize, residuals: Vec<Vec<f64>>, tol: f64) -> Self {
        let max_residual = residuals.iter().flatten().cloned().fold(0.0, f64::max);
        RegularityReport { order, residuals, max_residual, tolerance: tol, passed: max_residual <= tol }
    }

    fn merge_max(a: Vec<Vec<f64>>, b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.into_iter()
            .zip(b.iter())
            .map(|(ra, rb)| ra.into_iter().zip(rb.iter()).map(|(x, y)| x.max(*y)).collect())
            .collect()
    }
}

/// `X R_b - eta R_b X`: commutator for eta=+1, anticommutator for eta=-1.
fn graded_bracket(x: &CMat, rb: &CMat, eta: f64) -> CMat {
    x * rb - rb * x * c(eta, 0.0)
}

fn first_order_table(r: &[CMat], species: &SpeciesTable) -> Vec<Vec<f64>> {
    let q = r.len();
    (0..q)
        .map(|a| (0..q).map(|b| (&r[b] * &r[a] * c(species.eta(a, b), 0.0) - &r[a] * &r[b]).norm()).collect())
        .collect()
}

pub fn check_first_order(state: &UniformCmps) -> RegularityReport {
    check_first_order_tol(state, DEFAULT_TOL)
}

pub fn check_first_order_tol(state: &UniformCmps, tol: f64) -> RegularityReport {
    RegularityReport::from_table(1, first_order_table(state.r(), state.species()), tol)
}

/// Maximum over all grid samples.
pub fn check_first_order_finite(state: &FiniteCmps, tol: f64) -> RegularityReport {
    let q = state.num_species();
    let mut table = vec![vec![0.0; q]; q];
    for rk in state.r() {
        table = RegularityReport::merge_max(table, &first_order_table(rk, state.species()));
    }
    RegularityReport::from_table(1, table, tol)
}

fn check_order(n: usize, cap: usize) -> Result<(), RegularityError> {
    if n < 2 || n > cap {
        return Err(RegularityError::BadOrder { order: n, cap });
    }
    Ok(())
}

fn ad(q: &CMat, x: &CMat) -> CMat {
    q * x - x * q
}

/// Order-`n` condition for a uniform state: with derivatives vanishing only
/// the innermost nested commutator `ad_Q^{n-1}(R_a)` survives.
pub fn check_higher_order(state: &UniformCmps, n: usize) -> Result<RegularityReport, RegularityError> {
    check_higher_order_with(state, n, DEFAULT_TOL, DEFAULT_ORDER_CAP)
}

pub fn check_higher_order_with(
    state: &UniformCmps,
    n: usize,
    tol: f64,
    cap: usize,
) -> Result<RegularityReport, RegularityError> {
    check_order(n, cap)?;
    let q = state.num_species();
    let sp = state.species();
    let table = (0..q)
        .map(|a| {
            let mut x = state.r()[a].clone();
            for _ in 0..(n - 1) {
                x = ad(state.q(), &x);
            }
            (0..q).map(|b| graded_bracket(&x, &state.r()[b], sp.eta(a, b)).norm()).collect()
        })
        .collect();
    Ok(RegularityReport::from_table(n, table, tol))
}

/// Order-`n` condition on a grid: `[Σ_k d^{n-1-k}/dx^{n-1-k} ad_Q^k(R_a), R_b]_∓`.
/// Derivatives by centered differences; `dr` optionally supplies `dR_a/dx`
/// samples (`dr[k][a]`), used for the first derivative of the `k=0` term.
pub fn check_higher_order_finite(
    state: &FiniteCmps,
    n: usize,
    dr: Option<&[Vec<CMat>]>,
    tol: f64,
    cap: usize,
) -> Result<RegularityReport, RegularityError> {
    check_order(n, cap)?;
    if let Some(dr) = dr {
        if dr.len() != state.n() + 1 || dr.iter().any(|v| v.len() != state.num_species()) {
            return Err(RegularityError::ShapeError("derivative samples do not match the grid".into()));
        }
    }
    let m = n - 1;
    let h = state.h();
    let npts = state.n() + 1;
    let nsp = state.num_species();
    let sp = state.species();
    let mut table = vec![vec![0.0; nsp]; nsp];
    for a in 0..nsp {
        let mut total = vec![zeros(state.d()); npts];
        let mut nested = state.r_species(a);
        for k in 0..=m {
            if k > 0 {
                nested = nested.iter().zip(state.q()).map(|(x, qk)| ad(qk, x)).collect();
            }
            let mut term = nested.clone();
            let mut order = m - k;
            if k == 0 && order > 0 {
                if let Some(dr) = dr {
                    term = dr.iter().map(|v| v[a].clone()).collect();
                    order -= 1;
                }
            }
            for _ in 0..order {
                term = grid_derivative(&term, h);
            }
            for (t, x) in total.iter_mut().zip(term.iter()) {
                *t += x;
            }
        }
        for b in 0..nsp {
            let worst = total
                .iter()
                .zip(state.r())
                .map(|(x, rk)| graded_bracket(x, &rk[b], sp.eta(a, b)).norm())
                .fold(0.0, f64::max);
            table[a][b] = worst;
        }
    }
    Ok(RegularityReport::from_table(n, table, tol))
}

/// Fermion-parity grading of the virtual space: the first `dplus` basis
/// states are even, the remaining `dminus` odd.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParityStructure {
    pub dplus: usize,
    pub dminus: usize,
}

impl ParityStructure {
    pub fn new(dplus: usize, dminus: usize) -> Self {
        ParityStructure { dplus, dminus }
    }

    pub fn d(&self) -> usize {
        self.dplus + self.dminus
    }

    pub fn p(&self) -> CMat {
        let d = self.d();
        CMat::from_diagonal(&CVec::from_iterator(
            d,
            (0..d).map(|i| if i < self.dplus { ONE } else { -ONE }),
        ))
    }

    fn even(&self, i: usize) -> bool {
        i < self.dplus
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParityReport {
    pub passed: bool,
    pub q_residual: f64,
    pub r_residuals: Vec<f64>,
    pub max_residual: f64,
}

/// Largest entry violating the block structure: Q and bosonic R must be
/// block diagonal, fermionic R block off-diagonal.
pub fn check_parity(state: &UniformCmps, parity: &ParityStructure) -> Result<ParityReport, RegularityError> {
    check_parity_tol(state, parity, DEFAULT_TOL)
}

pub fn check_parity_tol(state: &UniformCmps, parity: &ParityStructure, tol: f64) -> Result<ParityReport, RegularityError> {
    if parity.d() != state.d() {
        return Err(RegularityError::ShapeError(format!(
            "parity blocks {}+{} do not match D={}",
            parity.dplus,
            parity.dminus,
            state.d()
        )));
    }
    let violation = |m: &CMat, want_same: bool| -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let same = parity.even(i) == parity.even(j);
                if same != want_same {
                    worst = worst.max(m[(i, j)].norm());
                }
            }
        }
        worst
    };
    let q_residual = violation(state.q(), true);
    let r_residuals: Vec<f64> = state
        .r()
        .iter()
        .enumerate()
        .map(|(a, r)| violation(r, !state.species().is_fermion(a)))
        .collect();
    let max_residual = r_residuals.iter().cloned().fold(q_residual, f64::max);
    Ok(ParityReport { passed: max_residual <= tol, q_residual, r_residuals, max_residual })
}

/// Block data for one species: `(diag+, diag-)` for bosons, `(R^{+-}, R^{-+})` for fermions.
pub type SpeciesBlocks = (CMat, CMat);

pub fn build_parity_state(
    q_plus: &CMat,
    q_minus: &CMat,
    blocks: &[SpeciesBlocks],
    species: SpeciesTable,
) -> Result<(UniformCmps, ParityStructure), RegularityError> {
    let dp = q_plus.nrows();
    let dm = q_minus.nrows();
    if q_plus.ncols() != dp || q_minus.ncols() != dm {
        return Err(RegularityError::ShapeError("Q blocks must be square".into()));
    }
    if blocks.len() != species.len() {
        return Err(RegularityError::ShapeError(format!("{} block pairs for {} species", blocks.len(), species.len())));
    }
    let d = dp + dm;
    let mut q = zeros(d);
    q.view_mut((0, 0), (dp, dp)).copy_from(q_plus);
    q.view_mut((dp, dp), (dm, dm)).copy_from(q_minus);
    let mut rs = Vec::with_capacity(blocks.len());
    for (a, (b1, b2)) in blocks.iter().enumerate() {
        let mut r = zeros(d);
        if species.is_fermion(a) {
            if b1.shape() != (dp, dm) || b2.shape() != (dm, dp) {
                return Err(RegularityError::ShapeError(format!(
                    "fermion blocks for species {a} must be {dp}x{dm} and {dm}x{dp}"
                )));
            }
            r.view_mut((0, dp), (dp, dm)).copy_from(b1);
            r.view_mut((dp, 0), (dm, dp)).copy_from(b2);
        } else {
            if b1.shape() != (dp, dp) || b2.shape() != (dm, dm) {
                return Err(RegularityError::ShapeError(format!(
                    "boson blocks for species {a} must be {dp}x{dp} and {dm}x{dm}"
                )));
            }
            r.view_mut((0, 0), (dp, dp)).copy_from(b1);
            r.view_mut((dp, dp), (dm, dm)).copy_from(b2);
        }
        rs.push(r);
    }
    let state = UniformCmps::new(species, q, rs)?;
    Ok((state, ParityStructure::new(dp, dm)))
}

/// Random state that respects the parity grading.
pub fn random_parity_state<R: rand::Rng>(
    rng: &mut R,
    dplus: usize,
    dminus: usize,
    species: &SpeciesTable,
) -> (UniformCmps, ParityStructure) {
    use crate::random::random_matrix;
    let d = (dplus + dminus) as f64;
    let s = c(1.0 / d.sqrt(), 0.0);
    let rect = |rng: &mut R, m: usize, n: usize| {
        let big = random_matrix(rng, m.max(n));
        big.view((0, 0), (m, n)).into_owned() * s
    };
    let qp = random_matrix(rng, dplus) * s;
    let qm = random_matrix(rng, dminus) * s;
    let blocks: Vec<SpeciesBlocks> = (0..species.len())
        .map(|a| {
            if species.is_fermion(a) {
                (rect(rng, dplus, dminus), rect(rng, dminus, dplus))
            } else {
                (rect(rng, dplus, dplus), rect(rng, dminus, dminus))
            }
        })
        .collect();
    build_parity_state(&qp, &qm, &blocks, species.clone()).expect("consistent blocks")
}
