//! Hierarchical inter-message passing network.
//!
//! Each layer runs, in order: coarse-to-fine exchange into the atom states,
//! a GIN-E step on the atom graph, fine-to-coarse exchange from the updated
//! atom states into the cluster states, and a GIN step on the junction tree.
//! The readout concatenates per-graph sums of both sides and feeds a two-layer
//! head. [`Architecture::GraphOnly`] drops the tree pathway entirely.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::chem::{Features, Molecule};
use crate::junction::{ClusterKind, Decomposition};
use crate::tensor::{Matrix, ParamId, ParamStore, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Himp,
    GraphOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub layers: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub dropout: f64,
    pub readout: Readout,
    pub atom_vocab: usize,
    pub bond_vocab: usize,
}

/// One molecule in model-ready form: categorical indices plus its junction tree.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub atom_types: Vec<usize>,
    pub bonds: Vec<(usize, usize)>,
    pub bond_types: Vec<usize>,
    pub clusters: Vec<Vec<usize>>,
    pub cluster_kinds: Vec<usize>,
    pub tree_edges: Vec<(usize, usize)>,
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GraphSample {
    pub fn new(mol: &Molecule, dec: &Decomposition, features: &Features, target: Vec<f64>, mask: Vec<bool>) -> Self {
        assert_eq!(target.len(), mask.len());
        Self {
            atom_types: features.atoms.clone(),
            bonds: mol.bonds.iter().map(|b| (b.u, b.v)).collect(),
            bond_types: features.bonds.clone(),
            clusters: dec.clusters.clone(),
            cluster_kinds: dec.categories.iter().map(|k| k.index()).collect(),
            tree_edges: dec.tree_edges.clone(),
            target,
            mask,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_types.len()
    }
}

/// Disjoint union of several molecules and their junction trees.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub num_graphs: usize,
    pub atom_types: Vec<usize>,
    pub atom_graph: Vec<usize>,
    pub bonds: Vec<(usize, usize)>,
    pub bond_types: Vec<usize>,
    pub cluster_kinds: Vec<usize>,
    pub cluster_graph: Vec<usize>,
    pub tree_edges: Vec<(usize, usize)>,
    /// Nonzeros of the block-diagonal assignment as `(atom, cluster)`.
    pub assignment: Vec<(usize, usize)>,
    /// `num_graphs + 1` prefix offsets into the atom and cluster ranges.
    pub atom_offsets: Vec<usize>,
    pub cluster_offsets: Vec<usize>,
    pub targets: Matrix,
    pub mask: Matrix,
}

impl Batch {
    pub fn collate(samples: &[&GraphSample]) -> Batch {
        let tasks = samples.first().map_or(0, |s| s.target.len());
        let mut b = Batch {
            num_graphs: samples.len(),
            atom_types: Vec::new(),
            atom_graph: Vec::new(),
            bonds: Vec::new(),
            bond_types: Vec::new(),
            cluster_kinds: Vec::new(),
            cluster_graph: Vec::new(),
            tree_edges: Vec::new(),
            assignment: Vec::new(),
            atom_offsets: vec![0],
            cluster_offsets: vec![0],
            targets: Matrix::zeros(samples.len(), tasks),
            mask: Matrix::zeros(samples.len(), tasks),
        };
        for (g, s) in samples.iter().enumerate() {
            assert_eq!(s.target.len(), tasks, "all samples need the same number of tasks");
            let ao = b.atom_types.len();
            let co = b.cluster_kinds.len();
            b.atom_types.extend(&s.atom_types);
            b.atom_graph.extend(std::iter::repeat(g).take(s.atom_types.len()));
            b.bonds.extend(s.bonds.iter().map(|&(u, v)| (u + ao, v + ao)));
            b.bond_types.extend(&s.bond_types);
            b.cluster_kinds.extend(&s.cluster_kinds);
            b.cluster_graph.extend(std::iter::repeat(g).take(s.cluster_kinds.len()));
            b.tree_edges.extend(s.tree_edges.iter().map(|&(i, j)| (i + co, j + co)));
            for (c, atoms) in s.clusters.iter().enumerate() {
                b.assignment.extend(atoms.iter().map(|&a| (a + ao, c + co)));
            }
            b.atom_offsets.push(b.atom_types.len());
            b.cluster_offsets.push(b.cluster_kinds.len());
            for t in 0..tasks {
                b.targets.set(g, t, s.target[t]);
                b.mask.set(g, t, if s.mask[t] { 1.0 } else { 0.0 });
            }
        }
        b.assignment.sort_unstable();
        b
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_types.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_kinds.len()
    }

    /// Splits the batch back into per-molecule samples.
    pub fn split(&self) -> Vec<GraphSample> {
        (0..self.num_graphs)
            .map(|g| {
                let (a0, a1) = (self.atom_offsets[g], self.atom_offsets[g + 1]);
                let (c0, c1) = (self.cluster_offsets[g], self.cluster_offsets[g + 1]);
                let mut bonds = Vec::new();
                let mut bond_types = Vec::new();
                for (&(u, v), &t) in self.bonds.iter().zip(&self.bond_types) {
                    if (a0..a1).contains(&u) {
                        bonds.push((u - a0, v - a0));
                        bond_types.push(t);
                    }
                }
                let mut clusters = vec![Vec::new(); c1 - c0];
                for &(a, c) in &self.assignment {
                    if (c0..c1).contains(&c) {
                        clusters[c - c0].push(a - a0);
                    }
                }
                GraphSample {
                    atom_types: self.atom_types[a0..a1].to_vec(),
                    bonds,
                    bond_types,
                    clusters,
                    cluster_kinds: self.cluster_kinds[c0..c1].to_vec(),
                    tree_edges: self
                        .tree_edges
                        .iter()
                        .filter(|(i, _)| (c0..c1).contains(i))
                        .map(|&(i, j)| (i - c0, j - c0))
                        .collect(),
                    target: self.targets.row(g).to_vec(),
                    mask: self.mask.row(g).iter().map(|&m| m != 0.0).collect(),
                }
            })
            .collect()
    }
}

/// Both directions of every undirected edge, `src -> dst`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DirectedEdges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl DirectedEdges {
    pub fn from_undirected(edges: &[(usize, usize)]) -> Self {
        let mut src = Vec::with_capacity(edges.len() * 2);
        let mut dst = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            src.extend([u, v]);
            dst.extend([v, u]);
        }
        Self { src, dst }
    }

    /// Repeats per-undirected-edge values once per direction.
    pub fn expand<T: Copy>(values: &[T]) -> Vec<T> {
        values.iter().flat_map(|&v| [v, v]).collect()
    }
}

/// Tape handles for a two-layer perceptron `relu(x W0 + b0) W1 + b1`.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
}

pub fn mlp(tape: &mut Tape, x: Var, p: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, p.w0)?;
    let h = tape.add_row(h, p.b0)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, p.w1)?;
    tape.add_row(h, p.b1)
}

fn neighbor_sum(tape: &mut Tape, x: Var, edges: &DirectedEdges, edge_emb: Option<Var>) -> Result<Var> {
    let n = tape.shape(x).0;
    let msg = tape.gather(x, &edges.src)?;
    let msg = match edge_emb {
        Some(e) => tape.add(msg, e)?,
        None => msg,
    };
    tape.segment_sum(msg, &edges.dst, n)
}

/// `MLP((1 + eps) x_v + sum_{w in N(v)} (x_w + e_wv))`
pub fn gin_e_layer(
    tape: &mut Tape,
    x: Var,
    edges: &DirectedEdges,
    edge_emb: Var,
    eps: Var,
    mlp_vars: &MlpVars,
) -> Result<Var> {
    let (e_rows, _) = tape.shape(edge_emb);
    if e_rows != edges.src.len() {
        return Err(TensorError::Shape { op: "gin_e_layer", left: tape.shape(edge_emb), right: (edges.src.len(), 0) });
    }
    let agg = neighbor_sum(tape, x, edges, Some(edge_emb))?;
    let scale = tape.add_scalar(eps, 1.0)?;
    let pre = tape.scale_add(agg, scale, x)?;
    mlp(tape, pre, mlp_vars)
}

/// `MLP((1 + eps) z_i + sum_{j in N(i)} z_j)`
pub fn gin_layer(tape: &mut Tape, z: Var, edges: &DirectedEdges, eps: Var, mlp_vars: &MlpVars) -> Result<Var> {
    let agg = neighbor_sum(tape, z, edges, None)?;
    let scale = tape.add_scalar(eps, 1.0)?;
    let pre = tape.scale_add(agg, scale, z)?;
    mlp(tape, pre, mlp_vars)
}

/// `X + relu(S Z W1)` with `S` given by `(atom, cluster)` pairs.
pub fn coarse_to_fine(tape: &mut Tape, x: Var, z: Var, assignment: &[(usize, usize)], w1: Var) -> Result<Var> {
    let n = tape.shape(x).0;
    let (atoms, clusters): (Vec<usize>, Vec<usize>) = assignment.iter().copied().unzip();
    let zw = tape.matmul(z, w1)?;
    let per_pair = tape.gather(zw, &clusters)?;
    let pooled = tape.segment_sum(per_pair, &atoms, n)?;
    let inc = tape.relu(pooled)?;
    tape.add(x, inc)
}

/// `Z + relu(S^T X W2)` with `S` given by `(atom, cluster)` pairs.
pub fn fine_to_coarse(tape: &mut Tape, z: Var, x_next: Var, assignment: &[(usize, usize)], w2: Var) -> Result<Var> {
    let m = tape.shape(z).0;
    let (atoms, clusters): (Vec<usize>, Vec<usize>) = assignment.iter().copied().unzip();
    let xw = tape.matmul(x_next, w2)?;
    let per_pair = tape.gather(xw, &atoms)?;
    let pooled = tape.segment_sum(per_pair, &clusters, m)?;
    let inc = tape.relu(pooled)?;
    tape.add(z, inc)
}

#[derive(Debug, Clone, Copy)]
struct MlpIds {
    w0: ParamId,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    graph_eps: ParamId,
    graph_mlp: MlpIds,
    tree: Option<TreeLayerIds>,
}

#[derive(Debug, Clone, Copy)]
struct TreeLayerIds {
    eps: ParamId,
    mlp: MlpIds,
    coarse_to_fine: ParamId,
    fine_to_coarse: ParamId,
}

/// Trainable model: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Himp {
    config: ModelConfig,
    params: ParamStore,
    atom_emb: ParamId,
    bond_emb: ParamId,
    cluster_emb: Option<ParamId>,
    layers: Vec<LayerIds>,
    head: MlpIds,
}

/// Whether dropout is active; training mode carries its RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

fn add_mlp(store: &mut ParamStore, prefix: &str, dims: [usize; 3], rng: &mut ChaCha8Rng) -> MlpIds {
    let [i, h, o] = dims;
    let lin = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        Matrix::uniform(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
    };
    MlpIds {
        w0: store.add(format!("{prefix}.0.weight"), lin(i, h, rng)),
        b0: store.add(format!("{prefix}.0.bias"), Matrix::zeros(1, h)),
        w1: store.add(format!("{prefix}.1.weight"), lin(h, o, rng)),
        b1: store.add(format!("{prefix}.1.bias"), Matrix::zeros(1, o)),
    }
}

impl Himp {
    /// Fresh parameters: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and
    /// embeddings (fan-in of an embedding = its row count), zero biases, eps = 0.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        assert!(config.layers >= 1 && config.hidden >= 1 && config.out_dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let mut store = ParamStore::new();
        let emb = |rows: usize, rng: &mut ChaCha8Rng| Matrix::uniform(rows, h, 1.0 / (rows as f64).sqrt(), rng);
        let atom_emb = store.add("atom_embedding", emb(config.atom_vocab, &mut rng));
        let bond_emb = store.add("bond_embedding", emb(config.bond_vocab, &mut rng));
        let himp = config.architecture == Architecture::Himp;
        let cluster_emb = himp.then(|| store.add("cluster_embedding", emb(ClusterKind::COUNT, &mut rng)));
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let graph_eps = store.add(format!("layers.{l}.graph.eps"), Matrix::scalar(0.0));
            let graph_mlp = add_mlp(&mut store, &format!("layers.{l}.graph.mlp"), [h, h, h], &mut rng);
            let tree = himp.then(|| {
                let eps = store.add(format!("layers.{l}.tree.eps"), Matrix::scalar(0.0));
                let mlp = add_mlp(&mut store, &format!("layers.{l}.tree.mlp"), [h, h, h], &mut rng);
                let bound = 1.0 / (h as f64).sqrt();
                let coarse_to_fine =
                    store.add(format!("layers.{l}.coarse_to_fine.weight"), Matrix::uniform(h, h, bound, &mut rng));
                let fine_to_coarse =
                    store.add(format!("layers.{l}.fine_to_coarse.weight"), Matrix::uniform(h, h, bound, &mut rng));
                TreeLayerIds { eps, mlp, coarse_to_fine, fine_to_coarse }
            });
            layers.push(LayerIds { graph_eps, graph_mlp, tree });
        }
        let readout_dim = if himp { 2 * h } else { h };
        let head = add_mlp(&mut store, "head", [readout_dim, h, config.out_dim], &mut rng);
        Self { config, params: store, atom_emb, bond_emb, cluster_emb, layers, head }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn load_mlp(&self, tape: &mut Tape, ids: &MlpIds) -> Result<MlpVars> {
        Ok(MlpVars {
            w0: tape.param(&self.params, ids.w0)?,
            b0: tape.param(&self.params, ids.b0)?,
            w1: tape.param(&self.params, ids.w1)?,
            b1: tape.param(&self.params, ids.b1)?,
        })
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode) -> Result<Var> {
        let p = self.config.dropout;
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let (r, c) = tape.shape(x);
                let keep = 1.0 / (1.0 - p);
                let data = (0..r * c).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                tape.mul_const(x, Matrix::from_vec(r, c, data)?)
            }
            _ => Ok(x),
        }
    }

    fn pool(&self, tape: &mut Tape, x: Var, graph: &[usize], num_graphs: usize) -> Result<Var> {
        let pooled = tape.segment_sum(x, graph, num_graphs)?;
        match self.config.readout {
            Readout::Sum => Ok(pooled),
            Readout::Mean => {
                let mut counts = vec![0.0; num_graphs];
                for &g in graph {
                    counts[g] += 1.0;
                }
                let factors: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
                tape.scale_rows(pooled, &factors)
            }
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let bound = |op, ids: &[usize], limit: usize| match ids.iter().find(|&&i| i >= limit) {
            Some(&index) => Err(TensorError::Index { op, index, bound: limit }),
            None => Ok(()),
        };
        bound("atom_types", &batch.atom_types, self.config.atom_vocab)?;
        bound("bond_types", &batch.bond_types, self.config.bond_vocab)?;
        bound("cluster_kinds", &batch.cluster_kinds, ClusterKind::COUNT)?;
        let flat: Vec<usize> = batch.bonds.iter().flat_map(|&(u, v)| [u, v]).collect();
        bound("bonds", &flat, batch.num_atoms())?;
        let flat: Vec<usize> = batch.tree_edges.iter().flat_map(|&(u, v)| [u, v]).collect();
        bound("tree_edges", &flat, batch.num_clusters())?;
        Ok(())
    }

    /// Per-graph predictions, shape `num_graphs x out_dim`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, mode: Mode) -> Result<Var> {
        let readout = self.readout(tape, batch, mode)?;
        let head = self.load_mlp(tape, &self.head)?;
        mlp(tape, readout, &head)
    }

    /// Pooled graph representation fed to the head: `2h` columns for HIMP
    /// (atom side then tree side), `h` for the graph-only model.
    pub fn readout(&self, tape: &mut Tape, batch: &Batch, mut mode: Mode) -> Result<Var> {
        self.check_batch(batch)?;
        let atom_table = tape.param(&self.params, self.atom_emb)?;
        let mut x = tape.embed(atom_table, &batch.atom_types)?;
        let bond_table = tape.param(&self.params, self.bond_emb)?;
        let edges = DirectedEdges::from_undirected(&batch.bonds);
        let edge_emb = tape.embed(bond_table, &DirectedEdges::expand(&batch.bond_types))?;

        let tree_edges = DirectedEdges::from_undirected(&batch.tree_edges);
        let mut z = match self.cluster_emb {
            Some(id) => {
                let table = tape.param(&self.params, id)?;
                Some(tape.embed(table, &batch.cluster_kinds)?)
            }
            None => None,
        };

        for layer in &self.layers {
            if let (Some(tree), Some(zv)) = (&layer.tree, z) {
                let w1 = tape.param(&self.params, tree.coarse_to_fine)?;
                x = coarse_to_fine(tape, x, zv, &batch.assignment, w1)?;
            }
            let eps = tape.param(&self.params, layer.graph_eps)?;
            let vars = self.load_mlp(tape, &layer.graph_mlp)?;
            x = gin_e_layer(tape, x, &edges, edge_emb, eps, &vars)?;
            x = self.dropout(tape, x, &mut mode)?;
            if let (Some(tree), Some(zv)) = (&layer.tree, z) {
                let w2 = tape.param(&self.params, tree.fine_to_coarse)?;
                let zv = fine_to_coarse(tape, zv, x, &batch.assignment, w2)?;
                let eps = tape.param(&self.params, tree.eps)?;
                let vars = self.load_mlp(tape, &tree.mlp)?;
                let zv = gin_layer(tape, zv, &tree_edges, eps, &vars)?;
                z = Some(self.dropout(tape, zv, &mut mode)?);
            }
        }

        let mut readout = self.pool(tape, x, &batch.atom_graph, batch.num_graphs)?;
        if let Some(zv) = z {
            let tree_readout = self.pool(tape, zv, &batch.cluster_graph, batch.num_graphs)?;
            readout = tape.concat_cols(readout, tree_readout)?;
        }
        Ok(readout)
    }

    /// Evaluation-mode predictions as a plain matrix.
    pub fn predict(&self, batch: &Batch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}

/// HIMP forward pass; the model must use [`Architecture::Himp`].
pub fn himp_forward(tape: &mut Tape, batch: &Batch, model: &Himp) -> Result<Var> {
    assert_eq!(model.config.architecture, Architecture::Himp);
    model.forward(tape, batch, Mode::Eval)
}

/// Graph-only GIN-E baseline; the model must use [`Architecture::GraphOnly`].
pub fn graph_only_forward(tape: &mut Tape, batch: &Batch, model: &Himp) -> Result<Var> {
    assert_eq!(model.config.architecture, Architecture::GraphOnly);
    model.forward(tape, batch, Mode::Eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{build_vocabulary, featurize, parse_smiles};
    use crate::junction::decompose;

    fn sample(smiles: &str) -> GraphSample {
        let mol = parse_smiles(smiles).unwrap();
        let vocab = build_vocabulary([&mol]).unwrap();
        GraphSample::new(&mol, &decompose(&mol), &featurize(&mol, &vocab), vec![0.0], vec![true])
    }

    fn identity_mlp(tape: &mut Tape, h: usize) -> MlpVars {
        MlpVars {
            w0: tape.variable(Matrix::identity(h)).unwrap(),
            b0: tape.variable(Matrix::zeros(1, h)).unwrap(),
            w1: tape.variable(Matrix::identity(h)).unwrap(),
            b1: tape.variable(Matrix::zeros(1, h)).unwrap(),
        }
    }

    fn config(arch: Architecture) -> ModelConfig {
        ModelConfig {
            architecture: arch,
            layers: 2,
            hidden: 8,
            out_dim: 1,
            dropout: 0.0,
            readout: Readout::Sum,
            atom_vocab: 4,
            bond_vocab: 3,
        }
    }

    #[test]
    fn isolated_node_gets_scaled_self_term() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::from_rows(&[vec![1.0, 2.0]])).unwrap();
        let e = t.constant(Matrix::zeros(0, 2)).unwrap();
        let eps = t.variable(Matrix::scalar(0.5)).unwrap();
        let m = identity_mlp(&mut t, 2);
        let out = gin_e_layer(&mut t, x, &DirectedEdges::default(), e, eps, &m).unwrap();
        assert_eq!(t.value(out), &Matrix::from_rows(&[vec![1.5, 3.0]]));
    }

    #[test]
    fn benzene_rows_stay_identical() {
        let s = sample("c1ccccc1");
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = Matrix::uniform(1, 4, 1.0, &mut rng);
        let x = t.variable(Matrix::from_rows(&vec![row.row(0).to_vec(); 6])).unwrap();
        let edges = DirectedEdges::from_undirected(&s.bonds);
        let erow = Matrix::uniform(1, 4, 1.0, &mut rng);
        let e = t.constant(Matrix::from_rows(&vec![erow.row(0).to_vec(); 12])).unwrap();
        let eps = t.variable(Matrix::scalar(0.1)).unwrap();
        let m = MlpVars {
            w0: t.variable(Matrix::uniform(4, 4, 1.0, &mut rng)).unwrap(),
            b0: t.variable(Matrix::uniform(1, 4, 1.0, &mut rng)).unwrap(),
            w1: t.variable(Matrix::uniform(4, 4, 1.0, &mut rng)).unwrap(),
            b1: t.variable(Matrix::uniform(1, 4, 1.0, &mut rng)).unwrap(),
        };
        let out = gin_e_layer(&mut t, x, &edges, e, eps, &m).unwrap();
        let v = t.value(out);
        for r in 1..6 {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let s = sample("CC");
        let mut t = Tape::new();
        let x = t.variable(Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]])).unwrap();
        let e = t.constant(Matrix::filled(2, 2, 0.3)).unwrap();
        let eps = t.variable(Matrix::scalar(0.0)).unwrap();
        let mut m = identity_mlp(&mut t, 2);
        m.w1 = t.variable(Matrix::zeros(2, 2)).unwrap();
        let out = gin_e_layer(&mut t, x, &DirectedEdges::from_undirected(&s.bonds), e, eps, &m).unwrap();
        assert_eq!(t.value(out), &Matrix::zeros(2, 2));
    }

    #[test]
    fn dangling_edge_is_an_error() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::zeros(2, 2)).unwrap();
        let e = t.constant(Matrix::zeros(2, 2)).unwrap();
        let eps = t.variable(Matrix::scalar(0.0)).unwrap();
        let m = identity_mlp(&mut t, 2);
        let edges = DirectedEdges::from_undirected(&[(0, 5)]);
        assert!(matches!(gin_e_layer(&mut t, x, &edges, e, eps, &m), Err(TensorError::Index { .. })));
    }

    #[test]
    fn gin_two_clusters_mix() {
        let mut t = Tape::new();
        let z = t.variable(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]])).unwrap();
        let eps = t.variable(Matrix::scalar(0.0)).unwrap();
        let m = identity_mlp(&mut t, 2);
        let out = gin_layer(&mut t, z, &DirectedEdges::from_undirected(&[(0, 1)]), eps, &m).unwrap();
        // each row: own features + the other's
        assert_eq!(t.value(out), &Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]));

        let out = gin_layer(&mut t, z, &DirectedEdges::default(), eps, &m).unwrap();
        assert_eq!(t.value(out), t.value(z));

        // single cluster: MLP((1 + eps) z)
        let z1 = t.variable(Matrix::from_rows(&[vec![2.0, 4.0]])).unwrap();
        let eps = t.variable(Matrix::scalar(-0.5)).unwrap();
        let out = gin_layer(&mut t, z1, &DirectedEdges::default(), eps, &m).unwrap();
        assert_eq!(t.value(out), &Matrix::from_rows(&[vec![1.0, 2.0]]));
    }

    #[test]
    fn coarse_to_fine_examples() {
        let mut t = Tape::new();
        let x = t.variable(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]])).unwrap();
        let w = t.variable(Matrix::identity(2)).unwrap();
        let zero = t.variable(Matrix::zeros(2, 2)).unwrap();
        let pairs = [(0, 0), (1, 0), (1, 1), (2, 1)];
        let out = coarse_to_fine(&mut t, x, zero, &pairs, w).unwrap();
        assert_eq!(t.value(out), t.value(x));

        // atom 1 sits in both clusters and receives relu(z0 + z1)
        let z = t.variable(Matrix::from_rows(&[vec![1.0, -3.0], vec![2.0, 1.0]])).unwrap();
        let out = coarse_to_fine(&mut t, x, z, &pairs, w).unwrap();
        assert_eq!(
            t.value(out),
            &Matrix::from_rows(&[vec![2.0, 2.0], vec![6.0, 4.0], vec![7.0, 7.0]])
        );

        // benzene: one cluster, identical increments
        let x6 = t.variable(Matrix::zeros(6, 2)).unwrap();
        let z1 = t.variable(Matrix::from_rows(&[vec![0.5, 1.5]])).unwrap();
        let pairs: Vec<(usize, usize)> = (0..6).map(|a| (a, 0)).collect();
        let out = coarse_to_fine(&mut t, x6, z1, &pairs, w).unwrap();
        assert_eq!(t.value(out), &Matrix::from_rows(&vec![vec![0.5, 1.5]; 6]));
    }

    #[test]
    fn fine_to_coarse_examples() {
        let mut t = Tape::new();
        let w = t.variable(Matrix::identity(2)).unwrap();
        let z = t.variable(Matrix::from_rows(&[vec![1.0, 1.0]])).unwrap();
        let zero = t.variable(Matrix::zeros(6, 2)).unwrap();
        let pairs: Vec<(usize, usize)> = (0..6).map(|a| (a, 0)).collect();
        let out = fine_to_coarse(&mut t, z, zero, &pairs, w).unwrap();
        assert_eq!(t.value(out), t.value(z));

        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, -1.0]).collect();
        let x = t.variable(Matrix::from_rows(&x)).unwrap();
        let out = fine_to_coarse(&mut t, z, x, &pairs, w).unwrap();
        assert_eq!(t.value(out), &Matrix::from_rows(&[vec![16.0, 1.0]]));

        // singleton cluster 1 holds only atom 2
        let z2 = t.variable(Matrix::zeros(2, 2)).unwrap();
        let x3 = t.variable(Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![4.0, 5.0]])).unwrap();
        let out = fine_to_coarse(&mut t, z2, x3, &[(0, 0), (1, 0), (2, 0), (2, 1)], w).unwrap();
        assert_eq!(t.value(out).row(1), &[4.0, 5.0]);
    }

    #[test]
    fn collate_and_split() {
        let a = sample("CCC");
        let b = sample("C1CC1C");
        let batch = Batch::collate(&[&a, &b]);
        assert_eq!(batch.atom_graph, vec![0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(batch.bonds[2..], [(3, 4), (3, 5), (4, 5), (5, 6)]);
        assert_eq!(batch.split(), vec![a, b]);
    }

    #[test]
    fn single_atom_prediction_is_finite() {
        for arch in [Architecture::Himp, Architecture::GraphOnly] {
            let model = Himp::new(config(arch), 1);
            let s = sample("C");
            let p = model.predict(&Batch::collate(&[&s])).unwrap();
            assert_eq!(p.shape(), (1, 1));
            assert!(p.is_finite());
        }
    }

    #[test]
    fn parameter_names_and_shapes() {
        let model = Himp::new(config(Architecture::Himp), 0);
        let p = model.params();
        let w1 = p.id("layers.1.coarse_to_fine.weight").unwrap();
        assert_eq!(p.value(w1).shape(), (8, 8));
        assert_eq!(p.value(p.id("head.0.weight").unwrap()).shape(), (16, 8));
        assert_eq!(p.value(p.id("cluster_embedding").unwrap()).shape(), (4, 8));
        let base = Himp::new(config(Architecture::GraphOnly), 0);
        assert!(base.params().id("cluster_embedding").is_none());
        assert_eq!(base.params().value(base.params().id("head.0.weight").unwrap()).shape(), (8, 8));
    }

    #[test]
    fn out_of_vocabulary_index_is_rejected() {
        let model = Himp::new(ModelConfig { atom_vocab: 1, ..config(Architecture::Himp) }, 0);
        let s = sample("CO");
        let mut t = Tape::new();
        assert!(matches!(model.forward(&mut t, &Batch::collate(&[&s]), Mode::Eval), Err(TensorError::Index { .. })));
    }

    #[test]
    fn dropout_only_in_training() {
        let model = Himp::new(ModelConfig { dropout: 0.5, ..config(Architecture::Himp) }, 0);
        let s = sample("c1ccccc1CCO");
        let b = Batch::collate(&[&s]);
        assert_eq!(model.predict(&b).unwrap(), model.predict(&b).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let out = model.forward(&mut t, &b, Mode::Train(&mut rng)).unwrap();
        assert_ne!(t.value(out), &model.predict(&b).unwrap());
    }
}
