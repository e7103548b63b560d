use serde::{Deserialize, Serialize};

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistics {
    Boson,
    Fermion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Species {
    pub name: String,
    pub statistics: Statistics,
}

/// Ordered list of particle species with the exchange-sign table
/// `eta[a][b] = -1` iff both `a` and `b` are fermions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesTable {
    species: Vec<Species>,
    eta: Vec<Vec<f64>>,
}

pub fn build_species_table(list: &[(String, Statistics)]) -> Result<SpeciesTable, CoreError> {
    if list.is_empty() {
        return Err(CoreError::Invalid("species list is empty".into()));
    }
    let mut species = Vec::with_capacity(list.len());
    for (name, stat) in list {
        if species.iter().any(|s: &Species| &s.name == name) {
            return Err(CoreError::DuplicateSpecies(name.clone()));
        }
        species.push(Species { name: name.clone(), statistics: *stat });
    }
    let eta = species
        .iter()
        .map(|a| {
            species
                .iter()
                .map(|b| {
                    if a.statistics == Statistics::Fermion && b.statistics == Statistics::Fermion {
                        -1.0
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(SpeciesTable { species, eta })
}

impl SpeciesTable {
    pub fn single_boson() -> Self {
        build_species_table(&[("b".into(), Statistics::Boson)]).unwrap()
    }

    pub fn single_fermion() -> Self {
        build_species_table(&[("f".into(), Statistics::Fermion)]).unwrap()
    }

    pub fn bosons(n: usize) -> Self {
        let list: Vec<_> = (0..n).map(|i| (format!("b{i}"), Statistics::Boson)).collect();
        build_species_table(&list).unwrap()
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn eta(&self, a: usize, b: usize) -> f64 {
        self.eta[a][b]
    }

    pub fn eta_table(&self) -> &[Vec<f64>] {
        &self.eta
    }

    pub fn is_fermion(&self, a: usize) -> bool {
        self.species[a].statistics == Statistics::Fermion
    }

    pub fn all_bosons(&self) -> bool {
        self.species.iter().all(|s| s.statistics == Statistics::Boson)
    }

    pub fn check_index(&self, a: usize) -> Result<(), CoreError> {
        if a < self.len() {
            Ok(())
        } else {
            Err(CoreError::BadSpecies { index: a, count: self.len() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eta_rule() {
        let t = build_species_table(&[("b".into(), Statistics::Boson)]).unwrap();
        assert_eq!(t.eta_table(), &[vec![1.0]]);
        let t = build_species_table(&[("f".into(), Statistics::Fermion)]).unwrap();
        assert_eq!(t.eta_table(), &[vec![-1.0]]);
        let t = build_species_table(&[("b".into(), Statistics::Boson), ("f".into(), Statistics::Fermion)]).unwrap();
        assert_eq!(t.eta_table(), &[vec![1.0, 1.0], vec![1.0, -1.0]]);
    }

    #[test]
    fn duplicate_rejected() {
        let e = build_species_table(&[("x".into(), Statistics::Boson), ("x".into(), Statistics::Fermion)]);
        assert_eq!(e.unwrap_err(), CoreError::DuplicateSpecies("x".into()));
    }

    #[test]
    fn eta_symmetric() {
        let t = build_species_table(&[
            ("a".into(), Statistics::Fermion),
            ("b".into(), Statistics::Boson),
            ("c".into(), Statistics::Fermion),
        ])
        .unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(t.eta(a, b), t.eta(b, a));
            }
        }
        assert_eq!(t.eta(0, 2), -1.0);
    }
}
