//! Uniform and finite (grid-sampled) cMPS data.

use crate::error::CoreError;
use crate::linalg::{c, eye, is_finite, CMat, CVec};
use crate::species::SpeciesTable;

/// Translation-invariant cMPS `(Q, {R_a})`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformCmps {
    species: SpeciesTable,
    q: CMat,
    r: Vec<CMat>,
}

fn check_square(m: &CMat, d: usize, what: &str) -> Result<(), CoreError> {
    if m.nrows() != d || m.ncols() != d {
        return Err(CoreError::ShapeError(format!(
            "{what} is {}x{}, expected {d}x{d}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !is_finite(m) {
        return Err(CoreError::NonFinite(what.to_string()));
    }
    Ok(())
}

impl UniformCmps {
    pub fn new(species: SpeciesTable, q: CMat, r: Vec<CMat>) -> Result<Self, CoreError> {
        let d = q.nrows();
        if d == 0 {
            return Err(CoreError::ShapeError("bond dimension must be positive".into()));
        }
        check_square(&q, d, "Q")?;
        if r.len() != species.len() {
            return Err(CoreError::ShapeError(format!(
                "{} R matrices for {} species",
                r.len(),
                species.len()
            )));
        }
        for (a, ra) in r.iter().enumerate() {
            check_square(ra, d, &format!("R[{a}]"))?;
        }
        Ok(UniformCmps { species, q, r })
    }

    pub fn d(&self) -> usize {
        self.q.nrows()
    }

    pub fn q(&self) -> &CMat {
        &self.q
    }

    pub fn r(&self) -> &[CMat] {
        &self.r
    }

    pub fn species(&self) -> &SpeciesTable {
        &self.species
    }

    pub fn num_species(&self) -> usize {
        self.r.len()
    }

    /// Same R and species, different Q (shapes assumed to match).
    pub(crate) fn with_q(&self, q: CMat) -> Self {
        UniformCmps { species: self.species.clone(), q, r: self.r.clone() }
    }

    #[cfg(test)]
    pub(crate) fn with_parts(&self, q: CMat, r: Vec<CMat>) -> Self {
        UniformCmps { species: self.species.clone(), q, r }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    Open,
    Periodic,
}

/// cMPS on `[-L/2, L/2]` sampled on `N+1` equally spaced points.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteCmps {
    species: SpeciesTable,
    length: f64,
    q: Vec<CMat>,
    /// `r[k][a]`: species `a` at grid point `k`.
    r: Vec<Vec<CMat>>,
    v_l: CVec,
    v_r: CVec,
    boundary: BoundaryKind,
    b: CMat,
}

/// Tolerance for the periodic end-sample match.
pub const PERIODIC_TOL: f64 = 1e-10;

impl FiniteCmps {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        species: SpeciesTable,
        length: f64,
        q: Vec<CMat>,
        r: Vec<Vec<CMat>>,
        v_l: CVec,
        v_r: CVec,
        boundary: BoundaryKind,
        b: Option<CMat>,
    ) -> Result<Self, CoreError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(CoreError::Invalid(format!("length must be positive, got {length}")));
        }
        if q.len() < 3 {
            return Err(CoreError::ShapeError(format!("need N >= 2 (N+1 >= 3 samples), got {}", q.len())));
        }
        if r.len() != q.len() {
            return Err(CoreError::ShapeError(format!("{} R samples for {} Q samples", r.len(), q.len())));
        }
        let d = q[0].nrows();
        if d == 0 {
            return Err(CoreError::ShapeError("bond dimension must be positive".into()));
        }
        for (k, qk) in q.iter().enumerate() {
            check_square(qk, d, &format!("Q_samples[{k}]"))?;
            if r[k].len() != species.len() {
                return Err(CoreError::ShapeError(format!(
                    "R_samples[{k}] has {} species, expected {}",
                    r[k].len(),
                    species.len()
                )));
            }
            for (a, ra) in r[k].iter().enumerate() {
                check_square(ra, d, &format!("R_samples[{k}][{a}]"))?;
            }
        }
        if v_l.len() != d || v_r.len() != d {
            return Err(CoreError::ShapeError(format!("boundary vectors must have length {d}")));
        }
        if !v_l.iter().chain(v_r.iter()).all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(CoreError::NonFinite("boundary vectors".into()));
        }
        let b = b.unwrap_or_else(|| eye(d));
        check_square(&b, d, "B")?;
        if boundary == BoundaryKind::Periodic {
            let n = q.len() - 1;
            let mut dev = (&q[0] - &q[n]).norm();
            for a in 0..species.len() {
                dev = dev.max((&r[0][a] - &r[n][a]).norm());
            }
            if dev > PERIODIC_TOL {
                return Err(CoreError::Invalid(format!(
                    "periodic boundary requires equal end samples (deviation {dev:e})"
                )));
            }
        }
        Ok(FiniteCmps { species, length, q, r, v_l, v_r, boundary, b })
    }

    /// Sample a uniform state on an open interval.
    pub fn from_uniform(u: &UniformCmps, length: f64, n: usize, v_l: CVec, v_r: CVec) -> Result<Self, CoreError> {
        let q = vec![u.q().clone(); n + 1];
        let r = vec![u.r().to_vec(); n + 1];
        FiniteCmps::new(u.species().clone(), length, q, r, v_l, v_r, BoundaryKind::Open, None)
    }

    /// Sample position-dependent matrix functions on the grid.
    pub fn from_fn(
        species: SpeciesTable,
        length: f64,
        n: usize,
        qf: impl Fn(f64) -> CMat,
        rf: impl Fn(f64) -> Vec<CMat>,
        v_l: CVec,
        v_r: CVec,
    ) -> Result<Self, CoreError> {
        let h = length / n as f64;
        let xs: Vec<f64> = (0..=n).map(|k| -0.5 * length + k as f64 * h).collect();
        let q = xs.iter().map(|&x| qf(x)).collect();
        let r = xs.iter().map(|&x| rf(x)).collect();
        FiniteCmps::new(species, length, q, r, v_l, v_r, BoundaryKind::Open, None)
    }

    pub fn d(&self) -> usize {
        self.q[0].nrows()
    }

    pub fn species(&self) -> &SpeciesTable {
        &self.species
    }

    pub fn num_species(&self) -> usize {
        self.species.len()
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Number of grid intervals N.
    pub fn n(&self) -> usize {
        self.q.len() - 1
    }

    pub fn h(&self) -> f64 {
        self.length / self.n() as f64
    }

    pub fn x(&self, k: usize) -> f64 {
        -0.5 * self.length + k as f64 * self.h()
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n()).map(|k| self.x(k)).collect()
    }

    pub fn q(&self) -> &[CMat] {
        &self.q
    }

    pub fn r(&self) -> &[Vec<CMat>] {
        &self.r
    }

    /// All samples of species `a`.
    pub fn r_species(&self, a: usize) -> Vec<CMat> {
        self.r.iter().map(|rk| rk[a].clone()).collect()
    }

    pub fn v_l(&self) -> &CVec {
        &self.v_l
    }

    pub fn v_r(&self) -> &CVec {
        &self.v_r
    }

    pub fn boundary(&self) -> BoundaryKind {
        self.boundary
    }

    pub fn b(&self) -> &CMat {
        &self.b
    }

    /// The local data at grid point `k` as a uniform state.
    pub fn sample(&self, k: usize) -> UniformCmps {
        UniformCmps { species: self.species.clone(), q: self.q[k].clone(), r: self.r[k].clone() }
    }

    /// Q at a point inside interval `k`, `t` in `[0, 1]`, by linear interpolation.
    pub fn q_at(&self, k: usize, t: f64) -> CMat {
        lerp(&self.q[k], &self.q[(k + 1).min(self.n())], t)
    }

    pub fn r_at(&self, k: usize, t: f64) -> Vec<CMat> {
        let k1 = (k + 1).min(self.n());
        self.r[k].iter().zip(self.r[k1].iter()).map(|(a, b)| lerp(a, b, t)).collect()
    }

    #[cfg(test)]
    pub(crate) fn with_data(&self, q: Vec<CMat>, r: Vec<Vec<CMat>>, v_l: CVec, v_r: CVec) -> Self {
        FiniteCmps {
            species: self.species.clone(),
            length: self.length,
            q,
            r,
            v_l,
            v_r,
            boundary: self.boundary,
            b: self.b.clone(),
        }
    }

    pub fn require_open(&self) -> Result<(), CoreError> {
        if self.boundary == BoundaryKind::Open {
            Ok(())
        } else {
            Err(CoreError::Invalid("operation requires an open boundary".into()))
        }
    }
}

pub fn lerp(a: &CMat, b: &CMat, t: f64) -> CMat {
    a * c(1.0 - t, 0.0) + b * c(t, 0.0)
}

/// Selector among the plain and sign-dressed transfer operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferDressing {
    Plain,
    Single(usize),
    Double(usize, usize),
}

impl TransferDressing {
    /// Per-species signs `s_g` multiplying `R_g ⊗ conj(R_g)`.
    pub fn signs(&self, species: &SpeciesTable) -> Result<Vec<f64>, CoreError> {
        let q = species.len();
        match *self {
            TransferDressing::Plain => Ok(vec![1.0; q]),
            TransferDressing::Single(a) => {
                species.check_index(a)?;
                Ok((0..q).map(|g| species.eta(a, g)).collect())
            }
            TransferDressing::Double(a, b) => {
                species.check_index(a)?;
                species.check_index(b)?;
                Ok((0..q).map(|g| species.eta(a, g) * species.eta(b, g)).collect())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::zeros;

    #[test]
    fn uniform_shape_checks() {
        let sp = SpeciesTable::single_boson();
        assert!(UniformCmps::new(sp.clone(), zeros(2), vec![zeros(3)]).is_err());
        assert!(UniformCmps::new(sp.clone(), zeros(2), vec![]).is_err());
        let mut bad = zeros(2);
        bad[(0, 0)] = c(f64::NAN, 0.0);
        assert!(matches!(UniformCmps::new(sp.clone(), bad, vec![zeros(2)]), Err(CoreError::NonFinite(_))));
        assert!(UniformCmps::new(sp, zeros(2), vec![zeros(2)]).is_ok());
    }

    #[test]
    fn periodic_requires_matching_ends() {
        let sp = SpeciesTable::single_boson();
        let q: Vec<CMat> = (0..5).map(|k| CMat::from_element(1, 1, c(k as f64, 0.0))).collect();
        let r = vec![vec![zeros(1)]; 5];
        let v = CVec::from_element(1, c(1.0, 0.0));
        let e = FiniteCmps::new(sp.clone(), 1.0, q.clone(), r.clone(), v.clone(), v.clone(), BoundaryKind::Periodic, None);
        assert!(e.is_err());
        assert!(FiniteCmps::new(sp, 1.0, q, r, v.clone(), v, BoundaryKind::Open, None).is_ok());
    }

    #[test]
    fn double_same_species_is_plain() {
        let sp = crate::species::build_species_table(&[
            ("f".into(), crate::species::Statistics::Fermion),
            ("b".into(), crate::species::Statistics::Boson),
        ])
        .unwrap();
        assert_eq!(TransferDressing::Double(0, 0).signs(&sp).unwrap(), vec![1.0, 1.0]);
        assert_eq!(TransferDressing::Single(0).signs(&sp).unwrap(), vec![-1.0, 1.0]);
        assert!(TransferDressing::Single(2).signs(&sp).is_err());
    }
}
