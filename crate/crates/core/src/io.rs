//! JSON files for states, tangent vectors and parity gradings.
//!
//! Complex numbers are `[re, im]`, matrices are row-major lists of rows.
//! Uniform states: `{"D", "species", "Q", "R"}`. Finite states add
//! `{"L", "N", "Q_samples", "R_samples", "vL", "vR", "boundary"}` and an
//! optional `"B"` for periodic boundaries; `"Q"`/`"R"` are then absent.
//! Tangents mirror this with `V`/`W` (plus `"p"`) or `V_samples`/
//! `W_samples` (plus `"wR"`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::error::{CoreError, ErrorClass};
use crate::linalg::{c, CMat, CVec};
use crate::regularity::ParityStructure;
use crate::species::{build_species_table, Species, SpeciesTable};
use crate::state::{BoundaryKind, FiniteCmps, UniformCmps};
use crate::tangent::{TangentFinite, TangentUniform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("cannot read {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("cannot write {path}: {msg}")]
    Write { path: String, msg: String },
    #[error("malformed JSON: {0}")]
    ParseError(String),
    #[error("{path}: {msg}")]
    Schema { path: String, msg: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl IoError {
    pub fn code(&self) -> &'static str {
        match self {
            IoError::Read { .. } | IoError::Write { .. } => "IoError",
            IoError::ParseError(_) => "ParseError",
            IoError::Schema { .. } => "SchemaError",
            IoError::Core(e) => e.code(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        ErrorClass::Validation
    }
}

fn schema(path: impl Into<String>, msg: impl Into<String>) -> IoError {
    IoError::Schema { path: path.into(), msg: msg.into() }
}

type RawMat = Vec<Vec<[f64; 2]>>;
type RawVec = Vec<[f64; 2]>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawState {
    #[serde(rename = "D")]
    d: usize,
    species: Vec<Species>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    q: Option<RawMat>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    r: Option<Vec<RawMat>>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    length: Option<f64>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(rename = "Q_samples", default, skip_serializing_if = "Option::is_none")]
    q_samples: Option<Vec<RawMat>>,
    #[serde(rename = "R_samples", default, skip_serializing_if = "Option::is_none")]
    r_samples: Option<Vec<Vec<RawMat>>>,
    #[serde(rename = "vL", default, skip_serializing_if = "Option::is_none")]
    v_l: Option<RawVec>,
    #[serde(rename = "vR", default, skip_serializing_if = "Option::is_none")]
    v_r: Option<RawVec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boundary: Option<String>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    b: Option<RawMat>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTangent {
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "V", default, skip_serializing_if = "Option::is_none")]
    v: Option<RawMat>,
    #[serde(rename = "W", default, skip_serializing_if = "Option::is_none")]
    w: Option<Vec<RawMat>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(rename = "V_samples", default, skip_serializing_if = "Option::is_none")]
    v_samples: Option<Vec<RawMat>>,
    #[serde(rename = "W_samples", default, skip_serializing_if = "Option::is_none")]
    w_samples: Option<Vec<Vec<RawMat>>>,
    #[serde(rename = "wR", default, skip_serializing_if = "Option::is_none")]
    w_r: Option<RawVec>,
}

fn mat(raw: &RawMat, d: usize, path: &str) -> Result<CMat, IoError> {
    if raw.len() != d {
        return Err(schema(path, format!("has {} rows, expected D={d}", raw.len())));
    }
    for (i, row) in raw.iter().enumerate() {
        if row.len() != d {
            return Err(schema(format!("{path}[{i}]"), format!("has {} entries, expected D={d}", row.len())));
        }
    }
    let m = CMat::from_fn(d, d, |i, j| c(raw[i][j][0], raw[i][j][1]));
    if !crate::linalg::is_finite(&m) {
        return Err(schema(path, "non-finite entry"));
    }
    Ok(m)
}

fn vector(raw: &RawVec, d: usize, path: &str) -> Result<CVec, IoError> {
    if raw.len() != d {
        return Err(schema(path, format!("has {} entries, expected D={d}", raw.len())));
    }
    Ok(CVec::from_iterator(d, raw.iter().map(|z| c(z[0], z[1]))))
}

fn mats(raw: &[RawMat], d: usize, count: usize, path: &str) -> Result<Vec<CMat>, IoError> {
    if raw.len() != count {
        return Err(schema(path, format!("has {} matrices, expected {count}", raw.len())));
    }
    raw.iter().enumerate().map(|(a, m)| mat(m, d, &format!("{path}[{a}]"))).collect()
}

fn raw_mat(m: &CMat) -> RawMat {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect()
}

fn raw_vec(v: &CVec) -> RawVec {
    v.iter().map(|z| [z.re, z.im]).collect()
}

fn need<T>(x: Option<T>, path: &str) -> Result<T, IoError> {
    x.ok_or_else(|| schema(path, "missing"))
}

/// A state file's content.
#[derive(Debug, Clone)]
pub enum StateFile {
    Uniform(UniformCmps),
    Finite(FiniteCmps),
}

impl StateFile {
    pub fn species(&self) -> &SpeciesTable {
        match self {
            StateFile::Uniform(s) => s.species(),
            StateFile::Finite(s) => s.species(),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            StateFile::Uniform(s) => s.d(),
            StateFile::Finite(s) => s.d(),
        }
    }
}

fn parse_json(text: &str) -> Result<Value, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::ParseError(e.to_string()))
}

fn from_value<T: for<'de> Deserialize<'de>>(v: Value) -> Result<T, IoError> {
    serde_json::from_value(v).map_err(|e| schema("$", e.to_string()))
}

pub fn state_from_str(text: &str) -> Result<StateFile, IoError> {
    let raw: RawState = from_value(parse_json(text)?)?;
    let d = raw.d;
    if d == 0 {
        return Err(schema("D", "must be positive"));
    }
    let list: Vec<_> = raw.species.iter().map(|s| (s.name.clone(), s.statistics)).collect();
    let species = build_species_table(&list).map_err(|e| schema("species", e.to_string()))?;
    let q = species.len();
    if raw.length.is_none() {
        for (f, present) in [("N", raw.n.is_some()), ("Q_samples", raw.q_samples.is_some()), ("vL", raw.v_l.is_some())] {
            if present {
                return Err(schema(f, "finite-state field in a uniform state (missing L)"));
            }
        }
        let qm = mat(&need(raw.q, "Q")?, d, "Q")?;
        let r = mats(&need(raw.r, "R")?, d, q, "R")?;
        return Ok(StateFile::Uniform(UniformCmps::new(species, qm, r)?));
    }
    if raw.q.is_some() || raw.r.is_some() {
        return Err(schema("Q", "finite states use Q_samples/R_samples"));
    }
    let length = raw.length.unwrap();
    let n = need(raw.n, "N")?;
    let qs = mats(&need(raw.q_samples, "Q_samples")?, d, n + 1, "Q_samples")?;
    let rs_raw = need(raw.r_samples, "R_samples")?;
    if rs_raw.len() != n + 1 {
        return Err(schema("R_samples", format!("has {} samples, expected N+1={}", rs_raw.len(), n + 1)));
    }
    let rs = rs_raw
        .iter()
        .enumerate()
        .map(|(k, rk)| mats(rk, d, q, &format!("R_samples[{k}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let v_l = vector(&need(raw.v_l, "vL")?, d, "vL")?;
    let v_r = vector(&need(raw.v_r, "vR")?, d, "vR")?;
    let boundary = match raw.boundary.as_deref() {
        None | Some("open") => BoundaryKind::Open,
        Some("periodic") => BoundaryKind::Periodic,
        Some(other) => return Err(schema("boundary", format!("expected \"open\" or \"periodic\", got \"{other}\""))),
    };
    let b = raw.b.as_ref().map(|m| mat(m, d, "B")).transpose()?;
    if b.is_some() && boundary == BoundaryKind::Open {
        return Err(schema("B", "boundary matrix given for an open state"));
    }
    let st = FiniteCmps::new(species, length, qs, rs, v_l, v_r, boundary, b).map_err(|e| match e {
        CoreError::Invalid(m) if boundary == BoundaryKind::Periodic => schema("boundary", m),
        other => IoError::Core(other),
    })?;
    Ok(StateFile::Finite(st))
}

fn species_list(sp: &SpeciesTable) -> Vec<Species> {
    sp.species().to_vec()
}

pub fn uniform_to_value(s: &UniformCmps) -> Value {
    let raw = RawState {
        d: s.d(),
        species: species_list(s.species()),
        q: Some(raw_mat(s.q())),
        r: Some(s.r().iter().map(raw_mat).collect()),
        length: None,
        n: None,
        q_samples: None,
        r_samples: None,
        v_l: None,
        v_r: None,
        boundary: None,
        b: None,
    };
    serde_json::to_value(raw).expect("state serializes")
}

pub fn finite_to_value(s: &FiniteCmps) -> Value {
    let periodic = s.boundary() == BoundaryKind::Periodic;
    let raw = RawState {
        d: s.d(),
        species: species_list(s.species()),
        q: None,
        r: None,
        length: Some(s.length()),
        n: Some(s.n()),
        q_samples: Some(s.q().iter().map(raw_mat).collect()),
        r_samples: Some(s.r().iter().map(|rk| rk.iter().map(raw_mat).collect()).collect()),
        v_l: Some(raw_vec(s.v_l())),
        v_r: Some(raw_vec(s.v_r())),
        boundary: Some(if periodic { "periodic" } else { "open" }.into()),
        b: periodic.then(|| raw_mat(s.b())),
    };
    serde_json::to_value(raw).expect("state serializes")
}

pub fn state_to_value(s: &StateFile) -> Value {
    match s {
        StateFile::Uniform(u) => uniform_to_value(u),
        StateFile::Finite(f) => finite_to_value(f),
    }
}

#[derive(Debug, Clone)]
pub enum TangentFile {
    Uniform(TangentUniform),
    Finite(TangentFinite),
}

/// Parse a tangent file; `q` is the species count of the base state.
pub fn tangent_from_str(text: &str, q: usize) -> Result<TangentFile, IoError> {
    let raw: RawTangent = from_value(parse_json(text)?)?;
    let d = raw.d;
    if let Some(n) = raw.n {
        let v = mats(&need(raw.v_samples, "V_samples")?, d, n + 1, "V_samples")?;
        let ws = need(raw.w_samples, "W_samples")?;
        if ws.len() != n + 1 {
            return Err(schema("W_samples", format!("has {} samples, expected N+1={}", ws.len(), n + 1)));
        }
        let w = ws.iter().enumerate().map(|(k, wk)| mats(wk, d, q, &format!("W_samples[{k}]"))).collect::<Result<Vec<_>, _>>()?;
        let w_r = vector(&need(raw.w_r, "wR")?, d, "wR")?;
        return Ok(TangentFile::Finite(TangentFinite { v, w, w_r }));
    }
    let v = mat(&need(raw.v, "V")?, d, "V")?;
    let w = mats(&need(raw.w, "W")?, d, q, "W")?;
    let p = raw.p.unwrap_or(0.0);
    if !p.is_finite() {
        return Err(schema("p", "must be finite"));
    }
    Ok(TangentFile::Uniform(TangentUniform { v, w, p }))
}

pub fn tangent_to_value(t: &TangentFile) -> Value {
    let raw = match t {
        TangentFile::Uniform(t) => RawTangent {
            d: t.v.nrows(),
            v: Some(raw_mat(&t.v)),
            w: Some(t.w.iter().map(raw_mat).collect()),
            p: Some(t.p),
            n: None,
            v_samples: None,
            w_samples: None,
            w_r: None,
        },
        TangentFile::Finite(t) => RawTangent {
            d: t.w_r.len(),
            v: None,
            w: None,
            p: None,
            n: Some(t.v.len() - 1),
            v_samples: Some(t.v.iter().map(raw_mat).collect()),
            w_samples: Some(t.w.iter().map(|wk| wk.iter().map(raw_mat).collect()).collect()),
            w_r: Some(raw_vec(&t.w_r)),
        },
    };
    serde_json::to_value(raw).expect("tangent serializes")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParity {
    dplus: usize,
    dminus: usize,
}

/// `{"dplus": n, "dminus": m}`.
pub fn parity_from_str(text: &str) -> Result<ParityStructure, IoError> {
    let raw: RawParity = from_value(parse_json(text)?)?;
    Ok(ParityStructure::new(raw.dplus, raw.dminus))
}

pub fn matrix_to_value(m: &CMat) -> Value {
    serde_json::to_value(raw_mat(m)).expect("matrix serializes")
}

pub fn matrix_from_value(v: Value, d: usize, path: &str) -> Result<CMat, IoError> {
    let raw: RawMat = serde_json::from_value(v).map_err(|e| schema(path, e.to_string()))?;
    mat(&raw, d, path)
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|e| IoError::Read { path: path.display().to_string(), msg: e.to_string() })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|e| IoError::Write { path: path.display().to_string(), msg: e.to_string() })
}

pub fn read_state(path: &Path) -> Result<StateFile, IoError> {
    state_from_str(&read_text(path)?)
}
