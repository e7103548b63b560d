//! Seeded random states, gauges and tangents for tests and demos.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{c, eye, CMat, CVec};
use crate::species::SpeciesTable;
use crate::state::{FiniteCmps, UniformCmps};

pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Complex Gaussian entries with unit variance.
pub fn random_matrix<R: Rng>(rng: &mut R, d: usize) -> CMat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CMat::from_fn(d, d, |_, _| c(s * gaussian(rng), s * gaussian(rng)))
}

pub fn random_vector<R: Rng>(rng: &mut R, d: usize) -> CVec {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CVec::from_fn(d, |_, _| c(s * gaussian(rng), s * gaussian(rng)))
}

pub fn random_hermitian<R: Rng>(rng: &mut R, d: usize) -> CMat {
    let a = random_matrix(rng, d);
    (&a + a.adjoint()) * c(0.5, 0.0)
}

pub fn random_unitary<R: Rng>(rng: &mut R, d: usize) -> CMat {
    let qr = random_matrix(rng, d).qr();
    let (q, r) = qr.unpack();
    // fix column phases so the distribution does not depend on the QR sign convention
    let ph = CMat::from_fn(d, d, |i, j| {
        if i == j {
            let z = r[(i, i)];
            if z.norm() > 0.0 {
                z / c(z.norm(), 0.0)
            } else {
                c(1.0, 0.0)
            }
        } else {
            c(0.0, 0.0)
        }
    });
    q * ph
}

/// Generic uniform state with entries of order `1/sqrt(D)`.
pub fn random_uniform<R: Rng>(rng: &mut R, d: usize, species: &SpeciesTable) -> UniformCmps {
    let s = c(1.0 / (d as f64).sqrt(), 0.0);
    let q = random_matrix(rng, d) * s;
    let r = (0..species.len()).map(|_| random_matrix(rng, d) * s).collect();
    UniformCmps::new(species.clone(), q, r).expect("random state is well formed")
}

/// Random invertible matrix with 2-norm condition number at most `max_cond`.
pub fn random_gauge<R: Rng>(rng: &mut R, d: usize, max_cond: f64) -> CMat {
    let u = random_unitary(rng, d);
    let v = random_unitary(rng, d);
    let lc = max_cond.max(1.0).ln();
    let sv: Vec<f64> = (0..d)
        .map(|i| if i == 0 { 1.0 } else if i == 1 { max_cond.max(1.0) } else { (rng.gen::<f64>() * lc).exp() })
        .collect();
    let scale = c(0.5 + rng.gen::<f64>(), 0.0);
    let s = CMat::from_diagonal(&CVec::from_iterator(d, sv.iter().map(|&x| c(x, 0.0))));
    u * s * v * scale
}

/// Smooth x-dependent state: each matrix is `A + B sin(w x) + C cos(w' x)`
/// with small random B, C.
pub fn random_smooth_finite<R: Rng>(
    rng: &mut R,
    d: usize,
    species: &SpeciesTable,
    length: f64,
    n: usize,
) -> FiniteCmps {
    let s = 1.0 / (d as f64).sqrt();
    let mk = |rng: &mut R| -> [CMat; 3] {
        [random_matrix(rng, d) * c(s, 0.0), random_matrix(rng, d) * c(0.3 * s, 0.0), random_matrix(rng, d) * c(0.3 * s, 0.0)]
    };
    let qc = mk(rng);
    let rc: Vec<[CMat; 3]> = (0..species.len()).map(|_| mk(rng)).collect();
    let w1 = 2.0 * std::f64::consts::PI / length;
    let w2 = 3.0 / length;
    let eval = move |m: &[CMat; 3], x: f64| &m[0] + &m[1] * c((w1 * x).sin(), 0.0) + &m[2] * c((w2 * x).cos(), 0.0);
    let vl = random_vector(rng, d);
    let vr = random_vector(rng, d);
    let qc2 = qc.clone();
    FiniteCmps::from_fn(
        species.clone(),
        length,
        n,
        move |x| eval(&qc2, x),
        move |x| rc.iter().map(|m| eval(m, x)).collect(),
        vl,
        vr,
    )
    .expect("random finite state is well formed")
}

/// Random smooth matrix function samples on the grid of `state`, vanishing
/// at the left end (a valid finite gauge generator).
pub fn random_generator<R: Rng>(rng: &mut R, state: &FiniteCmps, amplitude: f64) -> Vec<CMat> {
    let d = state.d();
    let a = random_matrix(rng, d) * c(amplitude, 0.0);
    let b = random_matrix(rng, d) * c(amplitude, 0.0);
    let l = state.length();
    state
        .grid()
        .iter()
        .map(|&x| {
            let t = x / l + 0.5;
            &a * c(t, 0.0) + &b * c((std::f64::consts::PI * t).sin(), 0.0)
        })
        .collect()
}

/// Smooth finite gauge function equal to the identity at the left end.
pub fn random_smooth_gauge<R: Rng>(rng: &mut R, state: &FiniteCmps, amplitude: f64) -> Vec<CMat> {
    let d = state.d();
    random_generator(rng, state, amplitude).into_iter().map(|h| eye(d) + h).collect()
}
