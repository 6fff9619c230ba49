//! Acceptance criteria, one test per criterion. Each prints a PASS/FAIL line.
//!
//! Criterion 7 trains six models on 10k molecules and is ignored by default:
//! cargo test -p himp-core --test acceptance -- --ignored --nocapture

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use himp_core::chem::{parse_smiles, write_smiles, Molecule};
use himp_core::config::RunConfig;
use himp_core::gradcheck::{self, TOLERANCE};
use himp_core::junction::{cycle_basis, decompose};
use himp_core::model::{Architecture, Batch, Himp, Mode, ModelConfig, Readout};
use himp_core::synth;
use himp_core::tensor::{Matrix, OpKind, Tape};
use himp_core::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

/// Written to the raw stdout handle so the line shows up even when the test
/// harness captures output.
fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("{} criterion {id} ({name}): {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_decomposition_validity() {
    let start = Instant::now();
    let mut corpus: Vec<Molecule> = synth::generate(1000, 2024).into_iter().map(|m| m.molecule).collect();
    let fixture = fixture_smiles("molecules.smi");
    let mut rejected = 0;
    for s in &fixture {
        match parse_smiles(s) {
            Ok(m) => corpus.push(m),
            Err(_) => rejected += 1,
        }
    }
    let mut failures = Vec::new();
    for mol in &corpus {
        if let Err(e) = check_decomposition(mol, &decompose(mol)) {
            failures.push(format!("{}: {e}", write_smiles(mol)));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = corpus.len() >= 1000 && failures.is_empty() && secs < 60.0;
    report(
        1,
        "decomposition validity",
        ok,
        &format!(
            "{} molecules ({} fixture rows rejected by the parser), {} violations, {secs:.1}s",
            corpus.len(),
            rejected,
            failures.len()
        ),
    );
    assert!(ok, "first failures: {:?}", &failures[..failures.len().min(5)]);
}

// ---------------------------------------------------------------- criterion 2

/// Every simple cycle as a sorted edge-index list, by depth-first search from
/// each cycle's smallest vertex.
fn all_simple_cycles(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (k, &(u, v)) in edges.iter().enumerate() {
        adj[u].push((v, k));
        adj[v].push((u, k));
    }
    let mut found = BTreeSet::new();
    fn dfs(
        start: usize,
        at: usize,
        adj: &[Vec<(usize, usize)>],
        on_path: &mut Vec<bool>,
        path_edges: &mut Vec<usize>,
        found: &mut BTreeSet<Vec<usize>>,
    ) {
        for &(w, k) in &adj[at] {
            if w == start && path_edges.len() >= 2 && !path_edges.contains(&k) {
                let mut c = path_edges.clone();
                c.push(k);
                c.sort_unstable();
                found.insert(c);
            } else if w > start && !on_path[w] {
                on_path[w] = true;
                path_edges.push(k);
                dfs(start, w, adj, on_path, path_edges, found);
                path_edges.pop();
                on_path[w] = false;
            }
        }
    }
    for s in 0..n {
        let mut on_path = vec![false; n];
        on_path[s] = true;
        dfs(s, s, &adj, &mut on_path, &mut Vec::new(), &mut found);
    }
    found.into_iter().collect()
}

fn gf2_rank(rows: &[u32]) -> usize {
    let mut basis: Vec<u32> = Vec::new();
    for &r in rows {
        let mut v = r;
        for &b in &basis {
            v = v.min(v ^ b);
        }
        if v != 0 {
            basis.push(v);
            basis.sort_unstable_by(|a, b| b.cmp(a));
        }
    }
    basis.len()
}

/// Walks the cycle's bonds from its first atom and checks it returns home
/// after visiting every atom exactly once.
fn walks_closed(atoms: &[usize], bond_ends: &[(usize, usize)]) -> bool {
    if atoms.len() < 3 || bond_ends.len() != atoms.len() {
        return false;
    }
    let start = atoms[0];
    let mut used = vec![false; bond_ends.len()];
    let mut at = start;
    let mut visited = BTreeSet::from([start]);
    for step in 0..bond_ends.len() {
        let Some(k) = (0..bond_ends.len()).find(|&k| !used[k] && (bond_ends[k].0 == at || bond_ends[k].1 == at)) else {
            return false;
        };
        used[k] = true;
        at = if bond_ends[k].0 == at { bond_ends[k].1 } else { bond_ends[k].0 };
        if step + 1 < bond_ends.len() && !visited.insert(at) {
            return false;
        }
    }
    at == start && visited.len() == atoms.len() && visited.iter().copied().eq(atoms.iter().copied())
}

#[test]
fn criterion_2_cycle_basis_oracle() {
    let start = Instant::now();
    let mut graphs = 0usize;
    let mut failures = Vec::new();
    for n in 1..=6usize {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
        for mask in 0u32..(1 << pairs.len()) {
            let edges: Vec<(usize, usize)> =
                pairs.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &e)| e).collect();
            let mol = skeleton(n, &edges);
            if mol.num_components() != 1 {
                continue;
            }
            graphs += 1;
            let basis = cycle_basis(&mol);
            let rank = edges.len() + 1 - n;
            let bond_ends: Vec<(usize, usize)> = mol.bonds.iter().map(|b| (b.u, b.v)).collect();
            let mut problems = Vec::new();
            if basis.len() != rank {
                problems.push(format!("basis size {} != {rank}", basis.len()));
            }
            for c in &basis {
                let ends: Vec<(usize, usize)> = c.bonds.iter().map(|&k| bond_ends[k]).collect();
                if !walks_closed(&c.atoms, &ends) {
                    problems.push(format!("cycle {:?} is not closed", c.atoms));
                }
            }
            let rows: Vec<u32> = basis.iter().map(|c| c.bonds.iter().map(|&k| 1u32 << k).sum()).collect();
            if gf2_rank(&rows) != basis.len() {
                problems.push("basis cycles are dependent".into());
            }
            // brute-force minimum weight: greedy over all simple cycles by length
            let mut cycles = all_simple_cycles(n, &bond_ends);
            cycles.sort_by_key(|c| c.len());
            let mut chosen: Vec<u32> = Vec::new();
            let mut weight = 0;
            for c in cycles {
                let row: u32 = c.iter().map(|&k| 1u32 << k).sum();
                chosen.push(row);
                if gf2_rank(&chosen) == chosen.len() {
                    weight += c.len();
                } else {
                    chosen.pop();
                }
            }
            let got: usize = basis.iter().map(|c| c.bonds.len()).sum();
            if got != weight {
                problems.push(format!("basis weight {got} != minimum {weight}"));
            }
            if !problems.is_empty() {
                failures.push((n, edges.clone(), problems));
            }
        }
    }
    let ok = failures.is_empty();
    report(
        2,
        "cycle basis oracle",
        ok,
        &format!(
            "{graphs} connected graphs on <= 6 nodes, {} failures, {:.1}s",
            failures.len(),
            start.elapsed().as_secs_f64()
        ),
    );
    assert_eq!(graphs, 1 + 1 + 4 + 38 + 728 + 26704);
    assert!(ok, "first failures: {:?}", &failures[..failures.len().min(3)]);
}

// ---------------------------------------------------------------- criterion 3

/// Joint 1-WL colour refinement; true if the colour histograms agree at every
/// round until the partition is stable.
fn wl_equivalent(a: &Molecule, b: &Molecule) -> bool {
    let graphs = [a.adjacency(), b.adjacency()];
    let mut colors: Vec<Vec<usize>> = graphs.iter().map(|g| vec![0; g.len()]).collect();
    let histogram = |c: &[usize]| {
        let mut h = BTreeMap::new();
        for &x in c {
            *h.entry(x).or_insert(0) += 1;
        }
        h
    };
    for _ in 0..=a.num_atoms().max(b.num_atoms()) {
        if histogram(&colors[0]) != histogram(&colors[1]) {
            return false;
        }
        let mut palette: BTreeMap<(usize, Vec<usize>), usize> = BTreeMap::new();
        let signatures: Vec<Vec<(usize, Vec<usize>)>> = graphs
            .iter()
            .zip(&colors)
            .map(|(g, c)| {
                (0..g.len())
                    .map(|v| {
                        let mut nb: Vec<usize> = g[v].iter().map(|&w| c[w]).collect();
                        nb.sort_unstable();
                        (c[v], nb)
                    })
                    .collect()
            })
            .collect();
        for sig in signatures.iter().flatten() {
            let next = palette.len();
            palette.entry(sig.clone()).or_insert(next);
        }
        colors = signatures.iter().map(|s| s.iter().map(|x| palette[x]).collect()).collect();
    }
    histogram(&colors[0]) == histogram(&colors[1])
}

#[test]
fn criterion_3_expressivity() {
    let ring6 = parse_smiles("C1CCCCC1").unwrap();
    let two_ring3 = parse_smiles("C1CC1.C1CC1").unwrap();
    let wl = wl_equivalent(&ring6, &two_ring3);
    // the oracle must also separate things that differ
    let wl_separates = !wl_equivalent(&ring6, &parse_smiles("C1CCCC1C").unwrap());
    let (vocab, samples) = samples(&[ring6, two_ring3]);
    let uniform = samples[0].atom_types.iter().chain(&samples[1].atom_types).collect::<BTreeSet<_>>().len() == 1
        && samples[0].bond_types.iter().chain(&samples[1].bond_types).collect::<BTreeSet<_>>().len() == 1;

    let readout = |arch: Architecture, seed: u64| -> Vec<Matrix> {
        let config = ModelConfig {
            architecture: arch,
            layers: 3,
            hidden: 16,
            out_dim: 1,
            dropout: 0.0,
            readout: Readout::Sum,
            atom_vocab: vocab.atom_size(),
            bond_vocab: vocab.bond_size(),
        };
        let model = Himp::new(config, seed);
        samples
            .iter()
            .map(|s| {
                let mut tape = Tape::new();
                let r = model.readout(&mut tape, &Batch::collate(&[s]), Mode::Eval).unwrap();
                tape.value(r).clone()
            })
            .collect()
    };
    let mut max_graph_gap: f64 = 0.0;
    let mut min_himp_gap = f64::INFINITY;
    for seed in 0..20 {
        let g = readout(Architecture::GraphOnly, seed);
        max_graph_gap = max_graph_gap.max(g[0].max_abs_diff(&g[1]));
        let h = readout(Architecture::Himp, seed);
        min_himp_gap = min_himp_gap.min(h[0].max_abs_diff(&h[1]));
    }
    let ok = wl && wl_separates && uniform && max_graph_gap <= 1e-9 && min_himp_gap > 1e-6;
    report(
        3,
        "expressivity",
        ok,
        &format!(
            "1-WL equivalent: {wl}; 20 seeds: graph-only max gap {max_graph_gap:.2e}, HIMP min gap {min_himp_gap:.2e}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_gradient_correctness() {
    let mut checks = gradcheck::op_suite(0, None).unwrap();
    checks.push(gradcheck::check_model("himp_batch", Architecture::Himp, gradcheck::PAIR, 0, None).unwrap());
    checks.push(gradcheck::check_model("graph_only_batch", Architecture::GraphOnly, gradcheck::PAIR, 0, None).unwrap());
    let max = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    // negative control: a wrong backward rule must be caught
    let caught = gradcheck::run(0, Some(OpKind::MatMul)).unwrap().max_rel_err() >= TOLERANCE;
    let ok = max < TOLERANCE && caught && checks.len() >= 17;
    report(
        4,
        "gradient correctness",
        ok,
        &format!("{} checks, max relative error {max:.2e} (< {TOLERANCE:e}); corrupted rule caught: {caught}", checks.len()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_batch_and_permutation_invariance() {
    let corpus = synth::generate(40, 5);
    let mols: Vec<Molecule> = corpus.iter().map(|m| m.molecule.clone()).collect();
    let (vocab, samples) = samples(&mols);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut batch_gap: f64 = 0.0;
    let mut perm_gap: f64 = 0.0;
    for arch in [Architecture::Himp, Architecture::GraphOnly] {
        let config = ModelConfig {
            architecture: arch,
            layers: 3,
            hidden: 32,
            out_dim: 2,
            dropout: 0.0,
            readout: Readout::Sum,
            atom_vocab: vocab.atom_size(),
            bond_vocab: vocab.bond_size(),
        };
        let model = Himp::new(config, 3);
        let batched = model.predict(&Batch::collate(&samples.iter().collect::<Vec<_>>())).unwrap();
        for (g, (mol, s)) in mols.iter().zip(&samples).enumerate() {
            let single = model.predict(&Batch::collate(&[s])).unwrap();
            for c in 0..2 {
                batch_gap = batch_gap.max((single.get(0, c) - batched.get(g, c)).abs());
            }
            let perm = random_perm(mol.num_atoms(), &mut rng);
            let pmol = mol.permuted(&perm);
            let pdec = decompose(&mol).permuted(&perm);
            let ps = sample(&pmol, &pdec, &vocab, 0.0);
            let permuted = model.predict(&Batch::collate(&[&ps])).unwrap();
            perm_gap = perm_gap.max(permuted.max_abs_diff(&single));
        }
    }
    let ok = batch_gap <= 1e-10 && perm_gap <= 1e-10;
    report(
        5,
        "batch/permutation invariance",
        ok,
        &format!("40 molecules x 2 architectures: batch gap {batch_gap:.2e}, relabeling gap {perm_gap:.2e}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_overfit_small_subset() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("subset.csv");
    synth::write_csv(&data, &synth::generate(128, 1)).unwrap();
    let mut config = RunConfig::parse(OVERFIT_CONFIG).unwrap();
    config.data = Some(data.clone());
    config.val_data = Some(data.clone());
    config.test_data = Some(data.clone());
    config.checkpoint = dir.path().join("ck.json");
    config.metrics = dir.path().join("metrics.jsonl");
    let mut losses = Vec::new();
    let summary = train::train(&config, |s| losses.push(s.train_loss)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    // epoch-to-epoch loss is noisy; averages over blocks of ten epochs should fall
    let blocks: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let falling = blocks.windows(2).all(|w| w[1] < w[0]);
    let ok = summary.train_metric < 0.05 && config.epochs <= 200 && secs < 600.0;
    report(
        6,
        "overfit 128 molecules",
        ok,
        &format!(
            "train MAE {:.4} (< 0.05) at epoch {} of {}, L={}, h={}, lr={} x{}/epoch, batch {}, 10-epoch loss averages falling: {falling}, {secs:.0}s",
            summary.train_metric, summary.best_epoch, config.epochs, config.layers, config.hidden, config.lr, config.lr_decay, config.batch_size
        ),
    );
    assert!(ok);
}

const OVERFIT_CONFIG: &str = "
layers = 2
hidden = 64
epochs = 200
batch_size = 4
lr = 1e-3
lr_decay = 0.97
seed = 0
";

// ---------------------------------------------------------------- criterion 7

#[test]
#[ignore = "trains six models on 10k molecules; run with --ignored"]
fn criterion_7_ablation_direction() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth::generate(10_000, 77);
    let (train_part, rest) = corpus.split_at(8_000);
    let (val_part, test_part) = rest.split_at(1_000);
    let paths: Vec<_> = [("train", train_part), ("val", val_part), ("test", test_part)]
        .iter()
        .map(|(name, part)| {
            let p = dir.path().join(format!("{name}.csv"));
            synth::write_csv(&p, part).unwrap();
            p
        })
        .collect();
    let mut means = Vec::new();
    for arch in ["himp", "graph_only"] {
        let mut maes = Vec::new();
        for seed in [0u64, 1, 2] {
            let mut config = RunConfig::parse(ABLATION_CONFIG).unwrap();
            config.set("architecture", arch).unwrap();
            config.seed = seed;
            config.data = Some(paths[0].clone());
            config.val_data = Some(paths[1].clone());
            config.test_data = Some(paths[2].clone());
            config.cache_dir = Some(dir.path().join("cache"));
            config.checkpoint = dir.path().join(format!("{arch}-{seed}.json"));
            config.metrics = dir.path().join(format!("{arch}-{seed}.jsonl"));
            let start = Instant::now();
            let s = train::train(&config, |_| {}).unwrap();
            println!(
                "  {arch} seed {seed}: test MAE {:.4} (best epoch {}, val {:.4}, {:.0}s)",
                s.test_metric,
                s.best_epoch,
                s.best_val_metric,
                start.elapsed().as_secs_f64()
            );
            maes.push(s.test_metric);
        }
        means.push(maes.iter().sum::<f64>() / maes.len() as f64);
    }
    let reduction = 1.0 - means[0] / means[1];
    let ok = reduction >= 0.10;
    report(
        7,
        "ablation direction",
        ok,
        &format!("mean test MAE HIMP {:.4} vs graph-only {:.4}: {:.1}% lower (>= 10%)", means[0], means[1], 100.0 * reduction),
    );
    assert!(ok);
}

const ABLATION_CONFIG: &str = "
layers = 3
hidden = 64
epochs = 30
batch_size = 32
lr = 1e-3
";
