#![allow(dead_code)]

use std::path::Path;

use himp_core::chem::{featurize, parse_smiles, Atom, Bond, BondOrder, FeatureVocabulary, Molecule};
use himp_core::junction::{decompose, Decomposition};
use himp_core::model::GraphSample;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn sample(mol: &Molecule, dec: &Decomposition, vocab: &FeatureVocabulary, target: f64) -> GraphSample {
    GraphSample::new(mol, dec, &featurize(mol, vocab), vec![target], vec![true])
}

/// Samples (with their decompositions computed fresh) and a vocabulary over them.
pub fn samples(mols: &[Molecule]) -> (FeatureVocabulary, Vec<GraphSample>) {
    let vocab = FeatureVocabulary::build(mols).unwrap();
    let out = mols.iter().map(|m| sample(m, &decompose(m), &vocab, 0.0)).collect();
    (vocab, out)
}

/// Carbon skeleton with single bonds.
pub fn skeleton(n: usize, edges: &[(usize, usize)]) -> Molecule {
    let atoms = (0..n).map(|_| Atom::organic("C", false)).collect();
    let mut bonds: Vec<Bond> =
        edges.iter().map(|&(u, v)| Bond { u: u.min(v), v: u.max(v), order: BondOrder::Single }).collect();
    bonds.sort_by_key(|b| (b.u, b.v));
    Molecule::new(atoms, bonds).unwrap()
}

pub fn random_perm(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// SMILES lines of a fixture file, ignoring blanks and `#` comments.
pub fn fixture_smiles(name: &str) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name);
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

pub fn parsed_fixture(name: &str) -> Vec<Molecule> {
    fixture_smiles(name).iter().filter_map(|s| parse_smiles(s).ok()).collect()
}

/// Union-find root with path halving.
pub fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Checks the decomposition conditions literally. Returns a description of
/// the first violation.
pub fn check_decomposition(mol: &Molecule, dec: &Decomposition) -> Result<(), String> {
    let n = mol.num_atoms();
    let m = dec.clusters.len();
    // 1a: clusters cover every atom
    let mut covered = vec![false; n];
    for c in &dec.clusters {
        for &a in c {
            if a >= n {
                return Err(format!("atom {a} out of range"));
            }
            covered[a] = true;
        }
    }
    if let Some(a) = covered.iter().position(|c| !c) {
        return Err(format!("atom {a} not covered"));
    }
    // 1b: every bond lies inside some cluster
    for b in &mol.bonds {
        if !dec.clusters.iter().any(|c| c.contains(&b.u) && c.contains(&b.v)) {
            return Err(format!("bond {}-{} not represented", b.u, b.v));
        }
    }
    // forest: acyclic with m - #components edges
    let mut parent: Vec<usize> = (0..m).collect();
    for &(i, j) in &dec.tree_edges {
        if i >= m || j >= m {
            return Err(format!("tree edge ({i}, {j}) out of range"));
        }
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj {
            return Err(format!("tree edge ({i}, {j}) closes a cycle"));
        }
        parent[ri] = rj;
    }
    let expected = m - mol.num_components();
    if dec.tree_edges.len() != expected {
        return Err(format!("{} tree edges, expected {expected}", dec.tree_edges.len()));
    }
    // 2: clusters holding any given atom induce a connected subtree
    for a in 0..n {
        let holding: Vec<usize> = (0..m).filter(|&c| dec.clusters[c].contains(&a)).collect();
        let mut parent: Vec<usize> = (0..m).collect();
        for &(i, j) in &dec.tree_edges {
            if holding.contains(&i) && holding.contains(&j) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
        let roots: std::collections::BTreeSet<usize> = holding.iter().map(|&c| find(&mut parent, c)).collect();
        if roots.len() > 1 {
            return Err(format!("clusters holding atom {a} are not connected in the tree"));
        }
    }
    Ok(())
}
