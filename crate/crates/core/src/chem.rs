//! Molecular graphs from a practical subset of SMILES, plus the categorical
//! atom/bond vocabulary consumed by the embedding layers.
//!
//! Only heavy atoms become graph nodes. Hydrogens enter the atom key solely
//! through explicit bracket counts (`[NH3+]`), and aromaticity is read off the
//! lowercase symbols as written; no perception or kekulization is attempted.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element symbols accepted inside brackets, indexed by atomic number - 1.
const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// Lowercase symbols that may appear aromatic inside brackets.
const AROMATIC_BRACKET: [&str; 8] = ["b", "c", "n", "o", "p", "s", "se", "as"];

fn canonical_element(symbol: &str) -> Option<&'static str> {
    ELEMENTS.iter().copied().find(|e| *e == symbol)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atom {
    pub element: String,
    pub charge: i8,
    /// `None` for organic-subset atoms written without brackets.
    pub hydrogens: Option<u8>,
    pub aromatic: bool,
}

impl Atom {
    pub fn organic(element: &str, aromatic: bool) -> Self {
        Self { element: element.to_string(), charge: 0, hydrogens: None, aromatic }
    }

    pub fn key(&self) -> AtomKey {
        AtomKey {
            element: self.element.clone(),
            charge: self.charge,
            aromatic: self.aromatic,
            hydrogens: self.hydrogens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    fn symbol(self) -> &'static str {
        match self {
            BondOrder::Single => "-",
            BondOrder::Double => "=",
            BondOrder::Triple => "#",
            BondOrder::Aromatic => ":",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub u: usize,
    pub v: usize,
    pub order: BondOrder,
}

/// Heavy-atom molecular graph. Bonds are undirected, stored once with `u < v`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MoleculeError {
    #[error("bond {index} references atom {atom} but the molecule has {atoms} atoms")]
    DanglingBond { index: usize, atom: usize, atoms: usize },
    #[error("bond {index} is a self-loop on atom {atom}")]
    SelfLoop { index: usize, atom: usize },
    #[error("duplicate bond between atoms {u} and {v}")]
    DuplicateBond { u: usize, v: usize },
    #[error("aromatic bond {u}-{v} touches a non-aromatic atom")]
    AromaticMismatch { u: usize, v: usize },
}

impl Molecule {
    /// Builds a molecule from raw parts, normalizing bond endpoint order.
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, MoleculeError> {
        let bonds = bonds
            .into_iter()
            .map(|b| if b.u <= b.v { b } else { Bond { u: b.v, v: b.u, order: b.order } })
            .collect();
        let mol = Self { atoms, bonds };
        mol.validate()?;
        Ok(mol)
    }

    pub fn validate(&self) -> Result<(), MoleculeError> {
        let n = self.atoms.len();
        let mut seen = std::collections::BTreeSet::new();
        for (index, b) in self.bonds.iter().enumerate() {
            for atom in [b.u, b.v] {
                if atom >= n {
                    return Err(MoleculeError::DanglingBond { index, atom, atoms: n });
                }
            }
            if b.u == b.v {
                return Err(MoleculeError::SelfLoop { index, atom: b.u });
            }
            if !seen.insert((b.u.min(b.v), b.u.max(b.v))) {
                return Err(MoleculeError::DuplicateBond { u: b.u, v: b.v });
            }
            if b.order == BondOrder::Aromatic && !(self.atoms[b.u].aromatic && self.atoms[b.v].aromatic) {
                return Err(MoleculeError::AromaticMismatch { u: b.u, v: b.v });
            }
        }
        Ok(())
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    /// Neighbor lists in ascending order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.u].push(b.v);
            adj[b.v].push(b.u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Connected-component label per atom, labels assigned in order of the
    /// smallest atom index of each component.
    pub fn components(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut label = vec![usize::MAX; self.atoms.len()];
        let mut next = 0;
        for start in 0..self.atoms.len() {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            let mut stack = vec![start];
            while let Some(a) = stack.pop() {
                for &w in &adj[a] {
                    if label[w] == usize::MAX {
                        label[w] = next;
                        stack.push(w);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn num_components(&self) -> usize {
        self.components().into_iter().max().map_or(0, |m| m + 1)
    }

    /// Relabels atoms so that old atom `i` becomes atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Molecule {
        assert_eq!(perm.len(), self.atoms.len(), "permutation length");
        let mut atoms = vec![None; self.atoms.len()];
        for (old, atom) in self.atoms.iter().enumerate() {
            atoms[perm[old]] = Some(atom.clone());
        }
        let mut bonds: Vec<Bond> = self
            .bonds
            .iter()
            .map(|b| {
                let (u, v) = (perm[b.u], perm[b.v]);
                Bond { u: u.min(v), v: u.max(v), order: b.order }
            })
            .collect();
        bonds.sort_by_key(|b| (b.u, b.v));
        Molecule { atoms: atoms.into_iter().map(|a| a.expect("perm is a bijection")).collect(), bonds }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SmilesErrorKind {
    #[error("empty input")]
    Empty,
    #[error("input is not ASCII")]
    NonAscii,
    #[error("unbalanced parentheses")]
    UnbalancedParens,
    #[error("ring-closure {0} is never closed")]
    UnmatchedRingClosure(u32),
    #[error("unknown element token")]
    UnknownElement,
    #[error("unexpected character {0:?}")]
    UnexpectedChar(char),
    #[error("bond or branch without a preceding atom")]
    MissingAtom,
    #[error("unterminated bracket atom")]
    UnclosedBracket,
    #[error("ring-closure bond symbols disagree")]
    RingBondConflict,
    #[error("ring closure connects an atom to itself")]
    SelfLoop,
    #[error("two bonds between the same pair of atoms")]
    DuplicateBond,
    #[error("aromatic bond between non-aromatic atoms")]
    AromaticMismatch,
    #[error("dangling bond symbol")]
    DanglingBond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("SMILES error at byte {position}: {kind}")]
pub struct SmilesError {
    pub position: usize,
    pub kind: SmilesErrorKind,
}

struct Parser<'a> {
    input: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    bond_set: std::collections::BTreeSet<(usize, usize)>,
    /// Open ring closures: number -> (atom, bond symbol at the opening, byte offset)
    rings: BTreeMap<u32, (usize, Option<BondOrder>, usize)>,
}

/// Parses a SMILES string into a heavy-atom [`Molecule`].
///
/// Supports organic-subset and bracket atoms, `-`/`=`/`#`/`:` bonds, ring
/// closures (`1`..`9`, `%nn`), branches and `.` disconnections. Stereo marks,
/// isotopes and atom classes are accepted and dropped. Valence is not checked.
pub fn parse_smiles(text: &str) -> Result<Molecule, SmilesError> {
    if text.is_empty() {
        return Err(SmilesError { position: 0, kind: SmilesErrorKind::Empty });
    }
    if let Some(position) = text.bytes().position(|b| !b.is_ascii()) {
        return Err(SmilesError { position, kind: SmilesErrorKind::NonAscii });
    }
    let mut p = Parser {
        input: text.trim().as_bytes(),
        pos: 0,
        atoms: Vec::new(),
        bonds: Vec::new(),
        bond_set: Default::default(),
        rings: BTreeMap::new(),
    };
    p.run()?;
    let mut bonds = p.bonds;
    bonds.sort_by_key(|b| (b.u, b.v));
    Ok(Molecule { atoms: p.atoms, bonds })
}

impl Parser<'_> {
    fn err(&self, kind: SmilesErrorKind) -> SmilesError {
        SmilesError { position: self.pos, kind }
    }

    fn peek(&self) -> Option<u8> {
        self.input.get(self.pos).copied()
    }

    fn run(&mut self) -> Result<(), SmilesError> {
        // `prev` is the atom new atoms/closures attach to; the stack holds
        // branch points.
        let mut prev: Option<usize> = None;
        let mut stack: Vec<Option<usize>> = Vec::new();
        let mut pending: Option<BondOrder> = None;
        let mut pending_pos = 0;

        while let Some(c) = self.peek() {
            match c {
                b'(' => {
                    if prev.is_none() || pending.is_some() {
                        return Err(self.err(SmilesErrorKind::MissingAtom));
                    }
                    stack.push(prev);
                    self.pos += 1;
                }
                b')' => {
                    if pending.is_some() {
                        return Err(self.err(SmilesErrorKind::DanglingBond));
                    }
                    prev = stack.pop().ok_or_else(|| self.err(SmilesErrorKind::UnbalancedParens))?;
                    self.pos += 1;
                }
                b'.' => {
                    if pending.is_some() {
                        return Err(self.err(SmilesErrorKind::DanglingBond));
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' | b'$' => {
                    if prev.is_none() {
                        return Err(self.err(SmilesErrorKind::MissingAtom));
                    }
                    if pending.is_some() {
                        return Err(self.err(SmilesErrorKind::UnexpectedChar(c as char)));
                    }
                    pending = Some(match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b':' => BondOrder::Aromatic,
                        b'$' => return Err(self.err(SmilesErrorKind::UnexpectedChar('$'))),
                        // '/' and '\' are directional single bonds; stereo is dropped.
                        _ => BondOrder::Single,
                    });
                    pending_pos = self.pos;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let at = self.pos;
                    let number = self.ring_number()?;
                    let atom = prev.ok_or(SmilesError { position: at, kind: SmilesErrorKind::MissingAtom })?;
                    let bond = pending.take();
                    self.ring_closure(number, atom, bond, at)?;
                }
                _ => {
                    let at = self.pos;
                    let atom = self.atom()?;
                    let index = self.atoms.len();
                    self.atoms.push(atom);
                    if let Some(p) = prev {
                        self.add_bond(p, index, pending.take(), at)?;
                    } else if pending.is_some() {
                        return Err(SmilesError { position: pending_pos, kind: SmilesErrorKind::DanglingBond });
                    }
                    prev = Some(index);
                }
            }
        }
        if pending.is_some() {
            return Err(SmilesError { position: pending_pos, kind: SmilesErrorKind::DanglingBond });
        }
        if !stack.is_empty() {
            return Err(self.err(SmilesErrorKind::UnbalancedParens));
        }
        if let Some((&number, &(_, _, at))) = self.rings.iter().next() {
            return Err(SmilesError { position: at, kind: SmilesErrorKind::UnmatchedRingClosure(number) });
        }
        if self.atoms.is_empty() {
            return Err(self.err(SmilesErrorKind::Empty));
        }
        Ok(())
    }

    fn ring_number(&mut self) -> Result<u32, SmilesError> {
        let c = self.peek().expect("caller checked");
        if c == b'%' {
            let digits = self.input.get(self.pos + 1..self.pos + 3);
            match digits {
                Some(d) if d.iter().all(u8::is_ascii_digit) => {
                    self.pos += 3;
                    Ok(((d[0] - b'0') * 10 + (d[1] - b'0')) as u32)
                }
                _ => Err(self.err(SmilesErrorKind::UnexpectedChar('%'))),
            }
        } else {
            self.pos += 1;
            Ok((c - b'0') as u32)
        }
    }

    fn ring_closure(
        &mut self,
        number: u32,
        atom: usize,
        bond: Option<BondOrder>,
        at: usize,
    ) -> Result<(), SmilesError> {
        match self.rings.remove(&number) {
            None => {
                self.rings.insert(number, (atom, bond, at));
                Ok(())
            }
            Some((other, open_bond, _)) => {
                let order = match (open_bond, bond) {
                    (Some(a), Some(b)) if a != b => {
                        return Err(SmilesError { position: at, kind: SmilesErrorKind::RingBondConflict })
                    }
                    (Some(a), _) | (None, Some(a)) => Some(a),
                    (None, None) => None,
                };
                if other == atom {
                    return Err(SmilesError { position: at, kind: SmilesErrorKind::SelfLoop });
                }
                self.add_bond(other, atom, order, at)
            }
        }
    }

    fn add_bond(&mut self, a: usize, b: usize, order: Option<BondOrder>, at: usize) -> Result<(), SmilesError> {
        let both_aromatic = self.atoms[a].aromatic && self.atoms[b].aromatic;
        let order = match order {
            Some(BondOrder::Aromatic) if !both_aromatic => {
                return Err(SmilesError { position: at, kind: SmilesErrorKind::AromaticMismatch })
            }
            Some(o) => o,
            None if both_aromatic => BondOrder::Aromatic,
            None => BondOrder::Single,
        };
        let (u, v) = (a.min(b), a.max(b));
        if !self.bond_set.insert((u, v)) {
            return Err(SmilesError { position: at, kind: SmilesErrorKind::DuplicateBond });
        }
        self.bonds.push(Bond { u, v, order });
        Ok(())
    }

    fn atom(&mut self) -> Result<Atom, SmilesError> {
        let c = self.peek().expect("caller checked");
        if c == b'[' {
            return self.bracket_atom();
        }
        let rest = &self.input[self.pos..];
        let (symbol, aromatic, len) = match rest {
            [b'C', b'l', ..] => ("Cl", false, 2),
            [b'B', b'r', ..] => ("Br", false, 2),
            [b'B', ..] => ("B", false, 1),
            [b'C', ..] => ("C", false, 1),
            [b'N', ..] => ("N", false, 1),
            [b'O', ..] => ("O", false, 1),
            [b'P', ..] => ("P", false, 1),
            [b'S', ..] => ("S", false, 1),
            [b'F', ..] => ("F", false, 1),
            [b'I', ..] => ("I", false, 1),
            [b'b', ..] => ("B", true, 1),
            [b'c', ..] => ("C", true, 1),
            [b'n', ..] => ("N", true, 1),
            [b'o', ..] => ("O", true, 1),
            [b'p', ..] => ("P", true, 1),
            [b's', ..] => ("S", true, 1),
            [x, ..] if x.is_ascii_alphabetic() || *x == b'*' => {
                return Err(self.err(SmilesErrorKind::UnknownElement))
            }
            _ => return Err(self.err(SmilesErrorKind::UnexpectedChar(c as char))),
        };
        self.pos += len;
        Ok(Atom::organic(symbol, aromatic))
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let start = self.pos;
        let close = self.input[start..]
            .iter()
            .position(|&b| b == b']')
            .map(|off| start + off)
            .ok_or_else(|| self.err(SmilesErrorKind::UnclosedBracket))?;
        let body = &self.input[start + 1..close];
        let unknown = SmilesError { position: start, kind: SmilesErrorKind::UnknownElement };
        let mut i = 0;
        // isotope
        while i < body.len() && body[i].is_ascii_digit() {
            i += 1;
        }
        // element: try two-letter symbols first
        let (element, aromatic) = {
            let two = body.get(i..i + 2).and_then(|s| std::str::from_utf8(s).ok());
            let one = body.get(i..i + 1).and_then(|s| std::str::from_utf8(s).ok());
            let lookup = |s: &str| -> Option<(&'static str, bool)> {
                if s.chars().next()?.is_ascii_uppercase() {
                    canonical_element(s).map(|e| (e, false))
                } else if AROMATIC_BRACKET.contains(&s) {
                    let mut cap = s.to_string();
                    cap[..1].make_ascii_uppercase();
                    canonical_element(&cap).map(|e| (e, true))
                } else {
                    None
                }
            };
            // A lowercase second letter only extends an uppercase symbol, or
            // spells one of the two-letter aromatic symbols.
            match two.and_then(lookup) {
                Some(found) if two.is_some_and(|s| s.as_bytes()[1].is_ascii_lowercase()) => {
                    i += 2;
                    found
                }
                _ => match one.and_then(lookup) {
                    Some(found) => {
                        i += 1;
                        found
                    }
                    None => return Err(unknown),
                },
            }
        };
        // chirality
        if body.get(i) == Some(&b'@') {
            while body.get(i) == Some(&b'@') {
                i += 1;
            }
            if [b"TH", b"AL", b"SP", b"TB", b"OH"].iter().any(|t| body[i..].starts_with(*t)) {
                i += 2;
                while i < body.len() && body[i].is_ascii_digit() {
                    i += 1;
                }
            }
        }
        let mut hydrogens = 0u8;
        if i < body.len() && body[i] == b'H' {
            i += 1;
            hydrogens = 1;
            if i < body.len() && body[i].is_ascii_digit() {
                hydrogens = body[i] - b'0';
                i += 1;
            }
        }
        let mut charge: i8 = 0;
        if i < body.len() && (body[i] == b'+' || body[i] == b'-') {
            let sign: i8 = if body[i] == b'+' { 1 } else { -1 };
            let symbol = body[i];
            i += 1;
            let mut magnitude: i8 = 1;
            if i < body.len() && body[i].is_ascii_digit() {
                magnitude = 0;
                while i < body.len() && body[i].is_ascii_digit() {
                    magnitude = magnitude.saturating_mul(10).saturating_add((body[i] - b'0') as i8);
                    i += 1;
                }
            } else {
                while i < body.len() && body[i] == symbol {
                    magnitude += 1;
                    i += 1;
                }
            }
            charge = sign * magnitude;
        }
        // atom class
        if i < body.len() && body[i] == b':' {
            i += 1;
            while i < body.len() && body[i].is_ascii_digit() {
                i += 1;
            }
        }
        if i != body.len() {
            return Err(SmilesError {
                position: start + 1 + i,
                kind: SmilesErrorKind::UnexpectedChar(body[i] as char),
            });
        }
        self.pos = close + 1;
        Ok(Atom { element: element.to_string(), charge, hydrogens: Some(hydrogens), aromatic })
    }
}

/// Categorical atom key: element, formal charge, aromatic flag, bracket H-count.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AtomKey {
    pub element: String,
    pub charge: i8,
    pub aromatic: bool,
    pub hydrogens: Option<u8>,
}

impl fmt::Display for AtomKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:+}", self.element, self.charge)?;
        if self.aromatic {
            write!(f, ":ar")?;
        }
        if let Some(h) = self.hydrogens {
            write!(f, ":H{h}")?;
        }
        Ok(())
    }
}

/// Dense index maps for atom and bond keys. Index 0 on both sides is reserved
/// for keys never seen while building.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVocabulary {
    atoms: Vec<AtomKey>,
    bonds: Vec<BondOrder>,
}

pub const UNKNOWN_INDEX: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabularyError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
}

impl FeatureVocabulary {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a Molecule>) -> Result<Self, VocabularyError> {
        let mut atoms = std::collections::BTreeSet::new();
        let mut bonds = std::collections::BTreeSet::new();
        let mut count = 0usize;
        for mol in corpus {
            count += 1;
            atoms.extend(mol.atoms.iter().map(Atom::key));
            bonds.extend(mol.bonds.iter().map(|b| b.order));
        }
        if count == 0 {
            return Err(VocabularyError::EmptyCorpus);
        }
        Ok(Self { atoms: atoms.into_iter().collect(), bonds: bonds.into_iter().collect() })
    }

    /// Number of atom indices, including the unknown slot.
    pub fn atom_size(&self) -> usize {
        self.atoms.len() + 1
    }

    pub fn bond_size(&self) -> usize {
        self.bonds.len() + 1
    }

    pub fn atom_index(&self, key: &AtomKey) -> usize {
        self.atoms.binary_search(key).map_or(UNKNOWN_INDEX, |i| i + 1)
    }

    pub fn bond_index(&self, order: BondOrder) -> usize {
        self.bonds.binary_search(&order).map_or(UNKNOWN_INDEX, |i| i + 1)
    }

    pub fn atom_keys(&self) -> &[AtomKey] {
        &self.atoms
    }

    pub fn bond_keys(&self) -> &[BondOrder] {
        &self.bonds
    }
}

pub fn build_vocabulary<'a>(
    corpus: impl IntoIterator<Item = &'a Molecule>,
) -> Result<FeatureVocabulary, VocabularyError> {
    FeatureVocabulary::build(corpus)
}

/// Per-atom and per-bond categorical indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Features {
    pub atoms: Vec<usize>,
    pub bonds: Vec<usize>,
}

pub fn featurize(mol: &Molecule, vocab: &FeatureVocabulary) -> Features {
    Features {
        atoms: mol.atoms.iter().map(|a| vocab.atom_index(&a.key())).collect(),
        bonds: mol.bonds.iter().map(|b| vocab.bond_index(b.order)).collect(),
    }
}

/// Writes a (non-canonical) SMILES string for `mol` by depth-first traversal.
/// Parsing the result yields the same graph up to atom order.
pub fn write_smiles(mol: &Molecule) -> String {
    let n = mol.atoms.len();
    let mut adj: Vec<Vec<(usize, BondOrder)>> = vec![Vec::new(); n];
    for b in &mol.bonds {
        adj[b.u].push((b.v, b.order));
        adj[b.v].push((b.u, b.order));
    }
    for list in &mut adj {
        list.sort_by_key(|&(w, _)| w);
    }

    // First pass: DFS tree and ring-closure (back) edges.
    let mut visited = vec![false; n];
    let mut parent = vec![usize::MAX; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut closures: Vec<Vec<(usize, BondOrder)>> = vec![Vec::new(); n];
    let mut roots = Vec::new();
    let mut tree_edge = std::collections::BTreeSet::new();
    for root in 0..n {
        if visited[root] {
            continue;
        }
        roots.push(root);
        visited[root] = true;
        let mut stack = vec![(root, 0usize)];
        while let Some(&mut (a, ref mut next)) = stack.last_mut() {
            if *next < adj[a].len() {
                let (w, _) = adj[a][*next];
                *next += 1;
                if !visited[w] {
                    visited[w] = true;
                    parent[w] = a;
                    children[a].push(w);
                    tree_edge.insert((a.min(w), a.max(w)));
                    stack.push((w, 0));
                }
            } else {
                stack.pop();
            }
        }
    }
    for b in &mol.bonds {
        if !tree_edge.contains(&(b.u, b.v)) {
            closures[b.u].push((b.v, b.order));
            closures[b.v].push((b.u, b.order));
        }
    }
    // emission order: preorder with each atom's children in list order, so
    // closures come out the same way after a parse of the written text
    let mut rank = vec![0usize; n];
    let mut next_rank = 0;
    for &root in &roots {
        let mut stack = vec![root];
        while let Some(a) = stack.pop() {
            rank[a] = next_rank;
            next_rank += 1;
            stack.extend(children[a].iter().rev());
        }
    }
    for list in &mut closures {
        list.sort_by_key(|&(w, _)| rank[w]);
    }

    let bond_text = |a: usize, b: usize, order: BondOrder| -> &'static str {
        let both = mol.atoms[a].aromatic && mol.atoms[b].aromatic;
        match (order, both) {
            (BondOrder::Aromatic, true) | (BondOrder::Single, false) => "",
            (o, _) => o.symbol(),
        }
    };

    let mut out = String::new();
    let mut ring_ids: BTreeMap<(usize, usize), u32> = BTreeMap::new();
    let mut free: std::collections::BTreeSet<u32> = (1..100).collect();
    for (ri, &root) in roots.iter().enumerate() {
        if ri > 0 {
            out.push('.');
        }
        // iterative emission: (atom, state) where state counts emitted children
        enum Step {
            Atom(usize),
            Text(&'static str),
        }
        let mut work = vec![Step::Atom(root)];
        while let Some(step) = work.pop() {
            let a = match step {
                Step::Text(t) => {
                    out.push_str(t);
                    continue;
                }
                Step::Atom(a) => a,
            };
            if parent[a] != usize::MAX {
                out.push_str(bond_text(parent[a], a, bond_order(mol, parent[a], a)));
            }
            out.push_str(&atom_text(&mol.atoms[a]));
            for &(w, order) in &closures[a] {
                let key = (a.min(w), a.max(w));
                if let Some(id) = ring_ids.remove(&key) {
                    out.push_str(bond_text(a, w, order));
                    push_ring_id(&mut out, id);
                    free.insert(id);
                } else {
                    let id = *free.iter().next().expect("fewer than 100 open rings");
                    free.remove(&id);
                    ring_ids.insert(key, id);
                    push_ring_id(&mut out, id);
                }
            }
            let kids = &children[a];
            // last child continues the chain, the others are branches
            for (k, &child) in kids.iter().enumerate().rev() {
                if k + 1 == kids.len() {
                    work.push(Step::Atom(child));
                } else {
                    work.push(Step::Text(")"));
                    work.push(Step::Atom(child));
                    work.push(Step::Text("("));
                }
            }
        }
    }
    out
}

fn push_ring_id(out: &mut String, id: u32) {
    if id < 10 {
        out.push(char::from(b'0' + id as u8));
    } else {
        out.push_str(&format!("%{id:02}"));
    }
}

fn bond_order(mol: &Molecule, a: usize, b: usize) -> BondOrder {
    let (u, v) = (a.min(b), a.max(b));
    mol.bonds.iter().find(|x| x.u == u && x.v == v).expect("tree edge is a bond").order
}

fn atom_text(atom: &Atom) -> String {
    let symbol = if atom.aromatic { atom.element.to_ascii_lowercase() } else { atom.element.clone() };
    let organic = ["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"].contains(&atom.element.as_str());
    if atom.hydrogens.is_none() && atom.charge == 0 && organic {
        return symbol;
    }
    let mut s = format!("[{symbol}");
    match atom.hydrogens {
        Some(0) | None => {}
        Some(1) => s.push('H'),
        Some(h) => s.push_str(&format!("H{h}")),
    }
    match atom.charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c => s.push_str(&format!("{c:+}")),
    }
    s.push(']');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kind(text: &str) -> SmilesErrorKind {
        parse_smiles(text).unwrap_err().kind
    }

    #[test]
    fn ethane() {
        let m = parse_smiles("CC").unwrap();
        assert_eq!(m.num_atoms(), 2);
        assert_eq!(m.bonds, vec![Bond { u: 0, v: 1, order: BondOrder::Single }]);
    }

    #[test]
    fn benzene_is_an_aromatic_six_cycle() {
        let m = parse_smiles("c1ccccc1").unwrap();
        assert_eq!(m.num_atoms(), 6);
        assert!(m.atoms.iter().all(|a| a.aromatic && a.element == "C"));
        assert_eq!(m.num_bonds(), 6);
        assert!(m.bonds.iter().all(|b| b.order == BondOrder::Aromatic));
        assert!(m.adjacency().iter().all(|n| n.len() == 2));
        assert_eq!(m.num_components(), 1);
    }

    #[test]
    fn two_cyclopropanes() {
        let m = parse_smiles("C1CC1.C1CC1").unwrap();
        assert_eq!((m.num_atoms(), m.num_bonds(), m.num_components()), (6, 6, 2));
        assert!(m.adjacency().iter().all(|n| n.len() == 2));
    }

    #[test]
    fn error_cases() {
        assert_eq!(kind("C1CC"), SmilesErrorKind::UnmatchedRingClosure(1));
        assert_eq!(kind("CC(C"), SmilesErrorKind::UnbalancedParens);
        assert_eq!(kind("CC)C"), SmilesErrorKind::UnbalancedParens);
        assert_eq!(kind("CXC"), SmilesErrorKind::UnknownElement);
        assert_eq!(kind("C[Xx]"), SmilesErrorKind::UnknownElement);
        assert_eq!(kind(""), SmilesErrorKind::Empty);
        assert_eq!(kind("C11"), SmilesErrorKind::SelfLoop);
        assert_eq!(kind("C12CC12"), SmilesErrorKind::DuplicateBond);
        assert_eq!(kind("C=1CC#1"), SmilesErrorKind::RingBondConflict);
        assert_eq!(kind("CC="), SmilesErrorKind::DanglingBond);
        assert_eq!(kind("C:C"), SmilesErrorKind::AromaticMismatch);
        assert_eq!(kind("[CH4"), SmilesErrorKind::UnclosedBracket);
        assert_eq!(kind("(C)"), SmilesErrorKind::MissingAtom);
        assert_eq!(kind("Cé"), SmilesErrorKind::NonAscii);
    }

    #[test]
    fn bracket_atoms() {
        let m = parse_smiles("[NH3+]CC(=O)[O-]").unwrap();
        assert_eq!(m.atoms[0], Atom { element: "N".into(), charge: 1, hydrogens: Some(3), aromatic: false });
        assert_eq!(m.atoms[4].charge, -1);
        assert_eq!(m.atoms[4].hydrogens, Some(0));
        assert_eq!(m.bonds[2].order, BondOrder::Double);

        let m = parse_smiles("[13CH3:7][C@@H](F)[Fe++][Cu+2][se]1cc[nH]c1").unwrap();
        assert_eq!(m.atoms[0].element, "C");
        assert_eq!(m.atoms[0].hydrogens, Some(3));
        assert_eq!(m.atoms[1].hydrogens, Some(1));
        assert_eq!(m.atoms[3].charge, 2);
        assert_eq!(m.atoms[4].charge, 2);
        assert_eq!(m.atoms[5].element, "Se");
        assert!(m.atoms[5].aromatic);
        assert_eq!(m.atoms[8].hydrogens, Some(1));
        // "Sc" in brackets is scandium, "sc" is not a symbol
        assert_eq!(parse_smiles("[Sc]").unwrap().atoms[0].element, "Sc");
    }

    #[test]
    fn stereo_and_percent_closures() {
        let m = parse_smiles("F/C=C\\F").unwrap();
        assert_eq!(m.num_bonds(), 3);
        assert_eq!(m.bonds[1].order, BondOrder::Double);
        let m = parse_smiles("C%12CC%12").unwrap();
        assert_eq!(m.num_bonds(), 3);
        // explicit single bond between aromatic atoms (biphenyl)
        let m = parse_smiles("c1ccccc1-c1ccccc1").unwrap();
        assert_eq!(m.bonds.iter().filter(|b| b.order == BondOrder::Single).count(), 1);
    }

    #[test]
    fn ring_closure_reuses_digits_and_branches() {
        let m = parse_smiles("C1CC1C1CC1").unwrap();
        assert_eq!((m.num_atoms(), m.num_bonds()), (6, 7));
        let m = parse_smiles("CC(C)(C)C").unwrap();
        assert_eq!(m.adjacency()[1], vec![0, 2, 3, 4]);
    }

    #[test]
    fn vocabulary_from_ethane() {
        let ethane = parse_smiles("CC").unwrap();
        let vocab = build_vocabulary([&ethane]).unwrap();
        assert_eq!((vocab.atom_size(), vocab.bond_size()), (2, 2));
        let f = featurize(&ethane, &vocab);
        assert_eq!(f.atoms, vec![1, 1]);
        assert_eq!(f.bonds, vec![1]);
    }

    #[test]
    fn vocabulary_from_benzene_and_ethane() {
        let benzene = parse_smiles("c1ccccc1").unwrap();
        let ethane = parse_smiles("CC").unwrap();
        let vocab = build_vocabulary([&benzene, &ethane]).unwrap();
        assert_eq!(vocab.atom_keys().len(), 2);
        assert_eq!(vocab.atom_size(), 3);
        // aliphatic sorts before aromatic (false < true)
        assert_eq!(featurize(&ethane, &vocab).atoms, vec![1, 1]);
        assert_eq!(featurize(&benzene, &vocab).atoms, vec![2; 6]);
        // same vocabulary regardless of corpus order
        assert_eq!(vocab, build_vocabulary([&ethane, &benzene]).unwrap());
    }

    #[test]
    fn unseen_keys_map_to_unknown() {
        let vocab = build_vocabulary([&parse_smiles("CC").unwrap()]).unwrap();
        let f = featurize(&parse_smiles("C=N").unwrap(), &vocab);
        assert_eq!(f.atoms, vec![1, UNKNOWN_INDEX]);
        assert_eq!(f.bonds, vec![UNKNOWN_INDEX]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert_eq!(build_vocabulary(std::iter::empty()), Err(VocabularyError::EmptyCorpus));
    }

    #[test]
    fn writer_round_trips_simple_cases() {
        for s in ["CC", "c1ccccc1", "C1CC1.C1CC1", "CC(=O)[O-]", "c1ccc2ccccc2c1", "C1CC2CCC1CC2", "[NH4+]"] {
            let m = parse_smiles(s).unwrap();
            let again = parse_smiles(&write_smiles(&m)).unwrap();
            assert_eq!(m.num_atoms(), again.num_atoms(), "{s}");
            assert_eq!(m.num_bonds(), again.num_bonds(), "{s}");
        }
    }
}
