//! Deterministic generator of drug-like molecules with a ZINC-style scalar
//! target, for desk-scale experiments without downloading benchmark data.
//!
//! Molecules are grown by joining ring systems, short chains and terminal
//! groups through single bonds wherever free valence remains. The target
//! mimics the shape of penalized logP: additive atom contributions minus a
//! synthetic-accessibility proxy minus one unit per ring larger than six.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chem::{parse_smiles, write_smiles, Atom, Bond, BondOrder, Molecule};

struct Fragment {
    smiles: &'static str,
    /// sizes of the rings the fragment contributes
    rings: &'static [usize],
    bridged: bool,
    spiro: bool,
}

const fn ring(smiles: &'static str, rings: &'static [usize]) -> Fragment {
    Fragment { smiles, rings, bridged: false, spiro: false }
}

const fn chain(smiles: &'static str) -> Fragment {
    Fragment { smiles, rings: &[], bridged: false, spiro: false }
}

const RING_SYSTEMS: &[Fragment] = &[
    ring("c1ccccc1", &[6]),
    ring("c1ccccc1", &[6]),
    ring("c1ccncc1", &[6]),
    ring("c1cncnc1", &[6]),
    ring("c1ccoc1", &[5]),
    ring("c1ccsc1", &[5]),
    ring("c1cc[nH]c1", &[5]),
    ring("c1cn[nH]c1", &[5]),
    ring("c1cocn1", &[5]),
    ring("C1CCCCC1", &[6]),
    ring("C1CCCC1", &[5]),
    ring("C1CC1", &[3]),
    ring("C1CCC1", &[4]),
    ring("C1CCNCC1", &[6]),
    ring("C1COCCN1", &[6]),
    ring("C1CCNC1", &[5]),
    ring("C1CNCCN1", &[6]),
    ring("O=C1CCCN1", &[5]),
    ring("C1CCCCCC1", &[7]),
    ring("C1CCNCCC1", &[7]),
    ring("C1CCCCCCC1", &[8]),
    ring("c1ccc2ccccc2c1", &[6, 6]),
    ring("c1ccc2[nH]ccc2c1", &[6, 5]),
    ring("c1ccc2ncccc2c1", &[6, 6]),
    ring("c1ccc2[nH]cnc2c1", &[6, 5]),
    ring("c1ccc2c(c1)CCCC2", &[6, 6]),
    ring("C1CCC2CCCCC2C1", &[6, 6]),
    ring("c1ccc2c(c1)CCC2", &[6, 5]),
    ring("c1ccc2c(c1)OCO2", &[6, 5]),
    ring("c1ccc2c(c1)CCCCC2", &[6, 7]),
    Fragment { smiles: "C1CC2CCC1CC2", rings: &[6, 6], bridged: true, spiro: false },
    Fragment { smiles: "C1CC2CCC1C2", rings: &[5, 5], bridged: true, spiro: false },
    Fragment { smiles: "C1C2CC3CC1CC(C2)C3", rings: &[6, 6, 6], bridged: true, spiro: false },
    Fragment { smiles: "C1CCC2(CC1)CCC2", rings: &[6, 4], bridged: false, spiro: true },
    Fragment { smiles: "C1CC2(C1)CCNCC2", rings: &[4, 6], bridged: false, spiro: true },
];

const CHAINS: &[Fragment] = &[
    chain("C"),
    chain("CC"),
    chain("CCC"),
    chain("CC(C)C"),
    chain("C(=O)N"),
    chain("NC(=O)"),
    chain("C(=O)O"),
    chain("OC"),
    chain("N"),
    chain("CN"),
    chain("O"),
    chain("S"),
    chain("C=C"),
    chain("CCO"),
    chain("S(=O)(=O)N"),
    chain("C(=O)"),
    chain("NC"),
    chain("CC#C"),
];

const TERMINALS: &[Fragment] = &[
    chain("C"),
    chain("F"),
    chain("Cl"),
    chain("Br"),
    chain("I"),
    chain("O"),
    chain("N"),
    chain("C#N"),
    chain("C(F)(F)F"),
    chain("[N+](=O)[O-]"),
    chain("C(=O)[O-]"),
    chain("[NH3+]"),
    chain("OC"),
    chain("C(C)(C)C"),
    chain("S(C)(=O)=O"),
];

/// A generated molecule and its target.
#[derive(Debug, Clone)]
pub struct SyntheticMolecule {
    pub smiles: String,
    pub molecule: Molecule,
    pub target: f64,
}

#[derive(Default)]
struct RingStats {
    sizes: Vec<usize>,
    systems: usize,
    bridged: usize,
    spiro: usize,
    fused: usize,
}

fn valence(atom: &Atom) -> i32 {
    let base = match atom.element.as_str() {
        "C" => 4,
        "N" | "P" | "B" => 3,
        "O" | "S" => 2,
        _ => 1,
    };
    match (atom.element.as_str(), atom.charge) {
        ("N", 1) => 4,
        ("O", -1) => 1,
        _ => base,
    }
}

/// Bond-order sum in half-units (aromatic = 3 halves).
fn bond_halves(mol: &Molecule, a: usize) -> i32 {
    mol.bonds
        .iter()
        .filter(|b| b.u == a || b.v == a)
        .map(|b| match b.order {
            BondOrder::Single => 2,
            BondOrder::Double => 4,
            BondOrder::Triple => 6,
            BondOrder::Aromatic => 3,
        })
        .sum()
}

/// Remaining valence for single-bond attachment.
fn free_valence(mol: &Molecule, a: usize) -> i32 {
    let atom = &mol.atoms[a];
    if atom.aromatic && atom.element != "C" {
        return 0;
    }
    let used = (bond_halves(mol, a) + 1) / 2 + atom.hydrogens.unwrap_or(0) as i32;
    (valence(atom) - used).max(0)
}

fn implicit_hydrogens(mol: &Molecule, a: usize) -> i32 {
    let atom = &mol.atoms[a];
    match atom.hydrogens {
        Some(h) => h as i32,
        None if atom.aromatic && atom.element != "C" => 0,
        None => (valence(atom) - (bond_halves(mol, a) + 1) / 2).max(0),
    }
}

fn atom_contribution(mol: &Molecule, a: usize, degree: usize) -> f64 {
    let atom = &mol.atoms[a];
    let h = implicit_hydrogens(mol, a) as f64;
    let multiple = mol
        .bonds
        .iter()
        .filter(|b| (b.u == a || b.v == a) && matches!(b.order, BondOrder::Double | BondOrder::Triple))
        .count() as f64;
    if atom.charge != 0 {
        return -1.2;
    }
    match (atom.element.as_str(), atom.aromatic) {
        ("C", false) => 0.1 + 0.15 * h - 0.12 * multiple,
        ("C", true) => 0.15 + 0.15 * h,
        ("N", false) => -0.9 + 0.2 * degree as f64 - 0.25 * multiple,
        ("N", true) => -0.5 + 0.2 * h,
        ("O", false) => -0.2 - 0.35 * h - 0.1 * multiple,
        ("O", true) => 0.1,
        ("S", _) => 0.45 - 0.4 * multiple,
        ("F", _) => 0.35,
        ("Cl", _) => 0.65,
        ("Br", _) => 0.85,
        ("I", _) => 1.05,
        _ => -0.2,
    }
}

fn target_value(mol: &Molecule, rings: &RingStats) -> f64 {
    let adj = mol.adjacency();
    let logp: f64 = (0..mol.num_atoms()).map(|a| atom_contribution(mol, a, adj[a].len())).sum();
    let hetero = mol.atoms.iter().filter(|a| a.element != "C").count() as f64;
    let accessibility = 1.0
        + 0.015 * mol.num_atoms() as f64
        + 0.35 * rings.systems as f64
        + 0.6 * rings.bridged as f64
        + 0.4 * rings.spiro as f64
        + 0.2 * rings.fused as f64
        + 0.05 * hetero;
    let large_rings = rings.sizes.iter().filter(|&&s| s > 6).count() as f64;
    logp - accessibility - large_rings
}

fn attach(mol: &mut Molecule, frag: &Molecule, at: usize, frag_at: usize) {
    let offset = mol.atoms.len();
    mol.atoms.extend(frag.atoms.iter().cloned());
    mol.bonds.extend(frag.bonds.iter().map(|b| Bond { u: b.u + offset, v: b.v + offset, order: b.order }));
    let (u, v) = (at.min(frag_at + offset), at.max(frag_at + offset));
    mol.bonds.push(Bond { u, v, order: BondOrder::Single });
}

fn pick_fragment(rng: &mut ChaCha8Rng) -> &'static Fragment {
    let r: f64 = rng.gen();
    let pool = if r < 0.3 {
        RING_SYSTEMS
    } else if r < 0.7 {
        CHAINS
    } else {
        TERMINALS
    };
    pool.choose(rng).expect("non-empty pool")
}

/// One molecule with between `min_atoms` and roughly `max_atoms` heavy atoms.
pub fn generate_one(rng: &mut ChaCha8Rng, min_atoms: usize, max_atoms: usize) -> SyntheticMolecule {
    let goal = rng.gen_range(min_atoms..=max_atoms);
    let mut stats = RingStats::default();
    let note = |f: &Fragment, stats: &mut RingStats| {
        if !f.rings.is_empty() {
            stats.systems += 1;
            stats.sizes.extend_from_slice(f.rings);
            stats.bridged += f.bridged as usize;
            stats.spiro += f.spiro as usize;
            if !f.bridged && !f.spiro {
                stats.fused += f.rings.len() - 1;
            }
        }
    };
    let first = if rng.gen_bool(0.8) { RING_SYSTEMS.choose(rng) } else { CHAINS.choose(rng) }.expect("non-empty");
    let mut mol = parse_smiles(first.smiles).expect("fragment parses");
    note(first, &mut stats);

    let mut attempts = 0;
    while mol.num_atoms() < goal && attempts < 50 {
        attempts += 1;
        let frag = pick_fragment(rng);
        let fmol = parse_smiles(frag.smiles).expect("fragment parses");
        if mol.num_atoms() + fmol.num_atoms() > max_atoms + 4 {
            continue;
        }
        let sites: Vec<usize> = (0..mol.num_atoms()).filter(|&a| free_valence(&mol, a) >= 1).collect();
        let frag_sites: Vec<usize> = (0..fmol.num_atoms()).filter(|&a| free_valence(&fmol, a) >= 1).collect();
        let (Some(&at), Some(&frag_at)) = (sites.choose(rng), frag_sites.choose(rng)) else { continue };
        attach(&mut mol, &fmol, at, frag_at);
        note(frag, &mut stats);
    }
    let mut bonds = mol.bonds;
    bonds.sort_by_key(|b| (b.u, b.v));
    let molecule = Molecule::new(mol.atoms, bonds).expect("generated molecule is valid");
    let target = target_value(&molecule, &stats);
    SyntheticMolecule { smiles: write_smiles(&molecule), molecule, target }
}

/// `count` molecules from a fixed seed; the same seed gives the same corpus.
pub fn generate(count: usize, seed: u64) -> Vec<SyntheticMolecule> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_one(&mut rng, 8, 36)).collect()
}

/// Writes a `smiles,target` CSV.
pub fn write_csv(path: &std::path::Path, molecules: &[SyntheticMolecule]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["smiles", "target"])?;
    for m in molecules {
        w.write_record([m.smiles.as_str(), &format!("{:.6}", m.target)])?;
    }
    w.flush()
}
