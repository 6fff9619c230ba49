//! Tree decomposition of molecular graphs into junction trees.
//!
//! Rings come from a minimum cycle basis; rings sharing more than two atoms are
//! merged into bridged systems, every bond outside a ring becomes a two-atom
//! cluster, and atoms that sit in too many clusters get an extra singleton.
//! Clusters are then linked by a maximum-weight spanning forest of the
//! cluster-intersection graph.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::chem::Molecule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterKind {
    Singleton,
    Bond,
    Ring,
    Bridged,
}

impl ClusterKind {
    pub const COUNT: usize = 4;

    /// Column of this category in the one-hot cluster feature matrix.
    pub fn index(self) -> usize {
        match self {
            ClusterKind::Singleton => 0,
            ClusterKind::Bond => 1,
            ClusterKind::Ring => 2,
            ClusterKind::Bridged => 3,
        }
    }
}

impl fmt::Display for ClusterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ClusterKind::Singleton => "singleton",
            ClusterKind::Bond => "bond",
            ClusterKind::Ring => "ring",
            ClusterKind::Bridged => "bridged",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecomposeOptions {
    /// An atom belonging to more than this many clusters gets its own
    /// singleton cluster.
    pub singleton_threshold: usize,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self { singleton_threshold: 3 }
    }
}

/// A junction tree over clusters of atoms.
///
/// Serializes to `{"clusters": [[..]], "tree_edges": [[i, j]], "categories": [..]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub clusters: Vec<Vec<usize>>,
    pub tree_edges: Vec<(usize, usize)>,
    pub categories: Vec<ClusterKind>,
}

impl Decomposition {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Nonzero entries of the atom-to-cluster assignment matrix as
    /// `(atom, cluster)` pairs, sorted by atom then cluster.
    pub fn assignment(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .clusters
            .iter()
            .enumerate()
            .flat_map(|(c, atoms)| atoms.iter().map(move |&a| (a, c)))
            .collect();
        pairs.sort_unstable();
        pairs
    }

    /// Dense 0/1 assignment matrix of shape `num_atoms x num_clusters`.
    pub fn assignment_matrix(&self, num_atoms: usize) -> Vec<Vec<u8>> {
        let mut s = vec![vec![0u8; self.clusters.len()]; num_atoms];
        for (a, c) in self.assignment() {
            s[a][c] = 1;
        }
        s
    }

    /// Triples `(i, k, j)` where clusters `i` and `j` both neighbor `k` in the
    /// tree but share an atom missing from `k`.
    pub fn running_intersection_violations(&self) -> Vec<(usize, usize, usize)> {
        let m = self.clusters.len();
        let mut neighbors = vec![Vec::new(); m];
        for &(i, j) in &self.tree_edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        let sets: Vec<BTreeSet<usize>> = self.clusters.iter().map(|c| c.iter().copied().collect()).collect();
        let mut out = Vec::new();
        for k in 0..m {
            let nb = &neighbors[k];
            for (x, &i) in nb.iter().enumerate() {
                for &j in &nb[x + 1..] {
                    if sets[i].intersection(&sets[j]).any(|a| !sets[k].contains(a)) {
                        out.push((i.min(j), k, i.max(j)));
                    }
                }
            }
        }
        out
    }

    /// Applies an atom relabeling (`old -> perm[old]`) without recomputing the
    /// decomposition, keeping cluster order and tree edges.
    pub fn permuted(&self, perm: &[usize]) -> Decomposition {
        let clusters = self
            .clusters
            .iter()
            .map(|c| {
                let mut c: Vec<usize> = c.iter().map(|&a| perm[a]).collect();
                c.sort_unstable();
                c
            })
            .collect();
        Decomposition { clusters, tree_edges: self.tree_edges.clone(), categories: self.categories.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("decomposition serializes")
    }
}

/// A cycle given by its atoms (sorted) and bond indices (sorted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cycle {
    pub atoms: Vec<usize>,
    pub bonds: Vec<usize>,
}

type EdgeBits = Vec<u64>;

fn bit_set(bits: &mut EdgeBits, i: usize) {
    bits[i / 64] ^= 1 << (i % 64);
}

fn bit_get(bits: &EdgeBits, i: usize) -> bool {
    bits[i / 64] >> (i % 64) & 1 == 1
}

fn lowest_bit(bits: &EdgeBits) -> Option<usize> {
    bits.iter().enumerate().find(|(_, w)| **w != 0).map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
}

/// Minimum cycle basis (Horton candidates + greedy GF(2) independence).
///
/// Candidates are `P(r, x) + (x, y) + P(y, r)` over every root `r` and bond
/// `(x, y)`, with `P` taken from a BFS tree that visits neighbors in ascending
/// order. They are tried shortest first, ties broken by the lexicographically
/// smallest sorted atom list, so the output is deterministic.
pub fn cycle_basis(mol: &Molecule) -> Vec<Cycle> {
    let n = mol.num_atoms();
    let m = mol.num_bonds();
    let rank = (m + mol.num_components()).saturating_sub(n);
    if rank == 0 {
        return Vec::new();
    }
    let adj = mol.adjacency();
    let bond_index = |a: usize, b: usize| -> usize {
        let (u, v) = (a.min(b), a.max(b));
        mol.bonds.iter().position(|x| x.u == u && x.v == v).expect("adjacent atoms share a bond")
    };
    let words = m.div_ceil(64);

    let mut candidates: Vec<(Vec<usize>, EdgeBits)> = Vec::new();
    let mut seen: BTreeSet<EdgeBits> = BTreeSet::new();
    for root in 0..n {
        let mut parent = vec![usize::MAX; n];
        let mut depth = vec![usize::MAX; n];
        depth[root] = 0;
        parent[root] = root;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(a) = queue.pop_front() {
            for &w in &adj[a] {
                if depth[w] == usize::MAX {
                    depth[w] = depth[a] + 1;
                    parent[w] = a;
                    queue.push_back(w);
                }
            }
        }
        for b in &mol.bonds {
            let (x, y) = (b.u, b.v);
            if depth[x] == usize::MAX || parent[x] == y || parent[y] == x {
                continue;
            }
            let path = |mut a: usize| {
                let mut p = vec![a];
                while a != root {
                    a = parent[a];
                    p.push(a);
                }
                p
            };
            let px = path(x);
            let py = path(y);
            let on_px: BTreeSet<usize> = px.iter().copied().collect();
            // the two tree paths may only meet at the root
            if py[..py.len() - 1].iter().any(|a| on_px.contains(a)) {
                continue;
            }
            let mut bits = vec![0u64; words];
            for p in [&px, &py] {
                for w in p.windows(2) {
                    bit_set(&mut bits, bond_index(w[0], w[1]));
                }
            }
            bit_set(&mut bits, bond_index(x, y));
            if seen.insert(bits.clone()) {
                let mut atoms: Vec<usize> = px.iter().chain(&py[..py.len() - 1]).copied().collect();
                atoms.sort_unstable();
                candidates.push((atoms, bits));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)).then_with(|| a.1.cmp(&b.1)));

    // Reduced basis rows indexed by pivot bit.
    let mut pivots: Vec<(usize, EdgeBits)> = Vec::new();
    let mut basis = Vec::with_capacity(rank);
    for (atoms, bits) in candidates {
        let mut v = bits.clone();
        for (p, row) in &pivots {
            if bit_get(&v, *p) {
                for (x, r) in v.iter_mut().zip(row) {
                    *x ^= r;
                }
            }
        }
        if let Some(p) = lowest_bit(&v) {
            pivots.push((p, v));
            let bonds = (0..m).filter(|&i| bit_get(&bits, i)).collect();
            basis.push(Cycle { atoms, bonds });
            if basis.len() == rank {
                break;
            }
        }
    }
    basis
}

/// Atom sets of a minimum cycle basis; see [`cycle_basis`].
pub fn minimum_cycle_basis(mol: &Molecule) -> Vec<Vec<usize>> {
    cycle_basis(mol).into_iter().map(|c| c.atoms).collect()
}

/// Ring systems after merging (atoms, merged flag) and which bonds lie on a ring.
fn ring_systems(mol: &Molecule) -> (Vec<(BTreeSet<usize>, bool)>, Vec<bool>) {
    let cycles = cycle_basis(mol);
    let mut ring_bonds = vec![false; mol.num_bonds()];
    let mut rings: Vec<(BTreeSet<usize>, bool)> = Vec::new();
    for c in &cycles {
        for &b in &c.bonds {
            ring_bonds[b] = true;
        }
        rings.push((c.atoms.iter().copied().collect(), false));
    }
    merge_overlapping(&mut rings);
    (rings, ring_bonds)
}

/// Merges rings sharing more than two atoms, repeated to a fixpoint.
fn merge_overlapping(rings: &mut Vec<(BTreeSet<usize>, bool)>) {
    'merge: loop {
        for i in 0..rings.len() {
            for j in i + 1..rings.len() {
                if rings[i].0.intersection(&rings[j].0).count() > 2 {
                    let (other, _) = rings.remove(j);
                    rings[i].0.extend(other);
                    rings[i].1 = true;
                    continue 'merge;
                }
            }
        }
        break;
    }
}

fn assemble(
    mol: &Molecule,
    rings: &[(BTreeSet<usize>, bool)],
    ring_bonds: &[bool],
    options: &DecomposeOptions,
) -> (Vec<Vec<usize>>, Vec<ClusterKind>) {
    let mut ring_clusters: Vec<(Vec<usize>, ClusterKind)> = rings
        .iter()
        .map(|(atoms, merged)| {
            (atoms.iter().copied().collect(), if *merged { ClusterKind::Bridged } else { ClusterKind::Ring })
        })
        .collect();
    ring_clusters.sort();

    let mut bond_clusters: Vec<Vec<usize>> = mol
        .bonds
        .iter()
        .zip(ring_bonds)
        .filter(|(_, &in_ring)| !in_ring)
        .map(|(b, _)| vec![b.u, b.v])
        .collect();
    bond_clusters.sort();

    let mut membership = vec![0usize; mol.num_atoms()];
    for atoms in ring_clusters.iter().map(|(a, _)| a).chain(&bond_clusters) {
        for &a in atoms {
            membership[a] += 1;
        }
    }

    let mut clusters = Vec::new();
    let mut categories = Vec::new();
    for (atoms, kind) in ring_clusters {
        clusters.push(atoms);
        categories.push(kind);
    }
    for atoms in bond_clusters {
        clusters.push(atoms);
        categories.push(ClusterKind::Bond);
    }
    for (a, &count) in membership.iter().enumerate() {
        if count == 0 || count > options.singleton_threshold {
            clusters.push(vec![a]);
            categories.push(ClusterKind::Singleton);
        }
    }
    (clusters, categories)
}

/// Clusters and their categories, in deterministic order: rings and bridged
/// systems (by smallest atom), bonds (by endpoints), then singletons (by atom).
///
/// These are the plain rules, before any repair of the running intersection
/// property done by [`decompose_with`].
pub fn build_clusters(mol: &Molecule, options: &DecomposeOptions) -> (Vec<Vec<usize>>, Vec<ClusterKind>) {
    let (rings, ring_bonds) = ring_systems(mol);
    assemble(mol, &rings, &ring_bonds, options)
}

/// Maximum-weight spanning forest of the cluster-intersection graph, weight =
/// number of shared atoms. Kruskal with ties broken by `(i, j)`.
pub fn build_junction_tree(mol: &Molecule, clusters: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut containing: Vec<Vec<usize>> = vec![Vec::new(); mol.num_atoms()];
    for (c, atoms) in clusters.iter().enumerate() {
        for &a in atoms {
            containing[a].push(c);
        }
    }
    let mut weights = std::collections::BTreeMap::new();
    for list in &containing {
        for (x, &i) in list.iter().enumerate() {
            for &j in &list[x + 1..] {
                *weights.entry((i.min(j), i.max(j))).or_insert(0usize) += 1;
            }
        }
    }
    let mut edges: Vec<((usize, usize), usize)> = weights.into_iter().collect();
    edges.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut parent: Vec<usize> = (0..clusters.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut tree = Vec::new();
    for ((i, j), _) in edges {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
            tree.push((i, j));
        }
    }
    tree.sort_unstable();
    tree
}

pub fn decompose(mol: &Molecule) -> Decomposition {
    decompose_with(mol, &DecomposeOptions::default())
}

/// Builds clusters and the spanning forest. Ring systems whose rings overlap
/// in a cycle (peri-fused aromatics, cages) admit no tree with the running
/// intersection property; when the forest breaks it, the two ring clusters
/// meeting outside their common neighbor are merged into one bridged cluster
/// and the tree is rebuilt.
pub fn decompose_with(mol: &Molecule, options: &DecomposeOptions) -> Decomposition {
    let (mut rings, ring_bonds) = ring_systems(mol);
    loop {
        let (clusters, categories) = assemble(mol, &rings, &ring_bonds, options);
        let tree_edges = build_junction_tree(mol, &clusters);
        let d = Decomposition { clusters, tree_edges, categories };
        let Some(&(i, k, j)) = d.running_intersection_violations().first() else {
            return d;
        };
        log::info!(
            "running intersection violated: clusters {i} {:?} and {j} {:?} meet outside neighbor {k} {:?}; merging",
            d.clusters[i],
            d.clusters[j],
            d.clusters[k]
        );
        // only ring clusters can overlap around a cycle; they come first and
        // in the same order as the sorted ring list
        let mut order: Vec<usize> = (0..rings.len()).collect();
        order.sort_by(|&x, &y| rings[x].0.iter().cmp(rings[y].0.iter()).then(rings[x].1.cmp(&rings[y].1)));
        assert!(i < rings.len() && j < rings.len(), "running intersection broken outside ring systems");
        let (ri, rj) = (order[i].min(order[j]), order[i].max(order[j]));
        let (other, _) = rings.remove(rj);
        rings[ri].0.extend(other);
        rings[ri].1 = true;
        merge_overlapping(&mut rings);
    }
}
