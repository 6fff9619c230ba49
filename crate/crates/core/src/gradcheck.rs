//! Central finite-difference checks of tape gradients, per op and end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::chem::{featurize, parse_smiles, FeatureVocabulary};
use crate::junction::decompose;
use crate::model::{Architecture, Batch, GraphSample, Himp, Mode, ModelConfig, Readout};
use crate::tensor::{Matrix, OpKind, Result, Tape, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that entries with near-zero gradients are compared
/// absolutely rather than relatively.
pub const FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Entry with the largest error, as `(input or parameter, flat index)`.
    pub worst: (String, usize),
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Compares the tape gradient of `build(inputs)` with central differences
/// in every input entry.
pub fn check_function(name: &str, inputs: &[Matrix], build: &Build<'_>, fault: Option<OpKind>) -> Result<CheckResult> {
    let eval = |inputs: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|m| tape.variable(m.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).get(0, 0))
    };
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let vars = inputs.iter().map(|m| tape.variable(m.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut result = CheckResult { name: name.into(), entries: 0, max_rel_err: 0.0, worst: (String::new(), 0) };
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Matrix::zeros(inputs[i].rows(), inputs[i].cols()));
        for k in 0..inputs[i].data().len() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let err = relative_error(analytic.data()[k], (plus - minus) / (2.0 * STEP));
            result.entries += 1;
            if err > result.max_rel_err {
                result.max_rel_err = err;
                result.worst = (format!("input{i}"), k);
            }
        }
    }
    Ok(result)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::uniform(rows, cols, 1.0, rng)
}

/// Uniform values kept at least `gap` away from zero, so kinks are not crossed.
fn away_from_zero(rows: usize, cols: usize, gap: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = random(rows, cols, rng);
    for v in m.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap - 0.1 } else { gap + 0.1 };
        }
    }
    m
}

/// Reduces an output to a scalar with fixed random weights.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.mul_const(out, weights.clone())?;
    tape.sum(w)
}

/// One check per differentiable op.
pub fn op_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut run = |name: &str, inputs: Vec<Matrix>, out_shape: (usize, usize), f: &Build<'_>, rng: &mut ChaCha8Rng| {
        let weights = random(out_shape.0, out_shape.1, rng);
        let build = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let out = f(tape, v)?;
            weighted_sum(tape, out, &weights)
        };
        check_function(name, &inputs, &build, fault).map(|r| results.push(r))
    };

    run("matmul", vec![random(3, 4, &mut rng), random(4, 2, &mut rng)], (3, 2), &|t, v| t.matmul(v[0], v[1]), &mut rng)?;
    run("add", vec![random(3, 2, &mut rng), random(3, 2, &mut rng)], (3, 2), &|t, v| t.add(v[0], v[1]), &mut rng)?;
    run("add_row", vec![random(3, 2, &mut rng), random(1, 2, &mut rng)], (3, 2), &|t, v| t.add_row(v[0], v[1]), &mut rng)?;
    run(
        "scale_add",
        vec![random(3, 2, &mut rng), random(1, 1, &mut rng), random(3, 2, &mut rng)],
        (3, 2),
        &|t, v| t.scale_add(v[0], v[1], v[2]),
        &mut rng,
    )?;
    run("add_scalar", vec![random(2, 2, &mut rng)], (2, 2), &|t, v| t.add_scalar(v[0], 0.7), &mut rng)?;
    run("relu", vec![away_from_zero(4, 3, 0.05, &mut rng)], (4, 3), &|t, v| t.relu(v[0]), &mut rng)?;
    run(
        "concat_cols",
        vec![random(3, 2, &mut rng), random(3, 1, &mut rng)],
        (3, 3),
        &|t, v| t.concat_cols(v[0], v[1]),
        &mut rng,
    )?;
    run("gather", vec![random(4, 2, &mut rng)], (5, 2), &|t, v| t.gather(v[0], &[3, 0, 3, 1, 3]), &mut rng)?;
    run("embed", vec![random(4, 3, &mut rng)], (3, 3), &|t, v| t.embed(v[0], &[2, 2, 0]), &mut rng)?;
    run(
        "segment_sum",
        vec![random(5, 2, &mut rng)],
        (4, 2),
        &|t, v| t.segment_sum(v[0], &[1, 0, 1, 3, 1], 4),
        &mut rng,
    )?;
    run("scale_rows", vec![random(3, 2, &mut rng)], (3, 2), &|t, v| t.scale_rows(v[0], &[0.5, -2.0, 3.0]), &mut rng)?;
    let mask = random(3, 2, &mut rng);
    run("mul_const", vec![random(3, 2, &mut rng)], (3, 2), &move |t, v| t.mul_const(v[0], mask.clone()), &mut rng)?;
    run("sum", vec![random(3, 2, &mut rng)], (1, 1), &|t, v| t.sum(v[0]), &mut rng)?;

    // losses are scalar already; check them directly
    let pred = random(4, 2, &mut rng);
    let mut target = pred.clone();
    let offsets = away_from_zero(4, 2, 0.05, &mut rng);
    for (t, o) in target.data_mut().iter_mut().zip(offsets.data()) {
        *t += o;
    }
    let mask = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let (t1, m1) = (target.clone(), mask.clone());
    results.push(check_function(
        "l1_loss",
        &[pred.clone()],
        &move |t: &mut Tape, v: &[Var]| t.l1_loss(v[0], &t1, Some(&m1)),
        fault,
    )?);
    let labels = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]);
    let logits = Matrix::uniform(4, 2, 3.0, &mut rng);
    results.push(check_function(
        "bce_with_logits",
        &[logits],
        &move |t: &mut Tape, v: &[Var]| t.bce_with_logits(v[0], &labels, Some(&mask)),
        fault,
    )?);
    Ok(results)
}

fn sample(smiles: &str, vocab: &FeatureVocabulary, target: f64) -> GraphSample {
    let mol = parse_smiles(smiles).expect("fixture parses");
    let dec = decompose(&mol);
    GraphSample::new(&mol, &dec, &featurize(&mol, vocab), vec![target], vec![true])
}

/// Gradient of a scalar loss on the model output with respect to every
/// parameter entry.
pub fn check_model(
    name: &str,
    architecture: Architecture,
    smiles: &[&str],
    seed: u64,
    fault: Option<OpKind>,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mols: Vec<_> = smiles.iter().map(|s| parse_smiles(s).expect("fixture parses")).collect();
    let vocab = FeatureVocabulary::build(&mols).expect("non-empty");
    let samples: Vec<GraphSample> =
        smiles.iter().map(|s| sample(s, &vocab, rng.gen_range(-1.0..1.0))).collect();
    let batch = Batch::collate(&samples.iter().collect::<Vec<_>>());
    let config = ModelConfig {
        architecture,
        layers: 2,
        hidden: 4,
        out_dim: 1,
        dropout: 0.0,
        readout: Readout::Sum,
        atom_vocab: vocab.atom_size(),
        bond_vocab: vocab.bond_size(),
    };
    let mut model = Himp::new(config, seed);
    // move biases and eps off their zero initialization
    for id in model.params().ids().collect::<Vec<_>>() {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let weights = Matrix::uniform(batch.num_graphs, 1, 1.0, &mut rng);
    let loss = |model: &Himp, tape: &mut Tape| -> Result<Var> {
        let out = model.forward(tape, &batch, Mode::Eval)?;
        let bce = tape.bce_with_logits(out, &batch.targets.clone(), None)?;
        let ws = weighted_sum(tape, out, &weights)?;
        tape.add(bce, ws)
    };

    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let l = loss(&model, &mut tape)?;
    let grads = tape.backward(l)?.for_params(model.params());

    let mut result = CheckResult { name: name.into(), entries: 0, max_rel_err: 0.0, worst: (String::new(), 0) };
    let ids: Vec<_> = model.params().ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let size = model.params().value(id).data().len();
        let zeros = Matrix::zeros(model.params().value(id).rows(), model.params().value(id).cols());
        let analytic = grads[slot].clone().unwrap_or(zeros);
        for k in 0..size {
            let orig = model.params().value(id).data()[k];
            let at = |v: f64, model: &mut Himp| -> Result<f64> {
                model.params_mut().value_mut(id).data_mut()[k] = v;
                let mut t = Tape::new();
                let l = loss(model, &mut t)?;
                Ok(t.value(l).get(0, 0))
            };
            let plus = at(orig + STEP, &mut model)?;
            let minus = at(orig - STEP, &mut model)?;
            model.params_mut().value_mut(id).data_mut()[k] = orig;
            let err = relative_error(analytic.data()[k], (plus - minus) / (2.0 * STEP));
            result.entries += 1;
            if err > result.max_rel_err {
                result.max_rel_err = err;
                result.worst = (model.params().name(id).to_string(), k);
            }
        }
    }
    Ok(result)
}

/// Five-atom molecule with a ring, and a two-molecule batch.
pub const SINGLE: &[&str] = &["C1CC1CO"];
pub const PAIR: &[&str] = &["C1CC1CO", "c1ccccc1C(=O)N"];

/// Op-level checks followed by end-to-end checks of both architectures.
pub fn run(seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let mut checks = op_suite(seed, fault)?;
    checks.push(check_model("himp_single", Architecture::Himp, SINGLE, seed, fault)?);
    checks.push(check_model("himp_batch", Architecture::Himp, PAIR, seed, fault)?);
    checks.push(check_model("graph_only_batch", Architecture::GraphOnly, PAIR, seed, fault)?);
    Ok(GradCheckReport { seed, checks })
}

pub fn parse_op_kind(name: &str) -> Option<OpKind> {
    Some(match name {
        "matmul" => OpKind::MatMul,
        "add" => OpKind::Add,
        "add_row" => OpKind::AddRow,
        "scale_add" => OpKind::ScaleAdd,
        "add_scalar" => OpKind::AddScalar,
        "relu" => OpKind::Relu,
        "concat_cols" => OpKind::ConcatCols,
        "gather" => OpKind::Gather,
        "segment_sum" => OpKind::SegmentSum,
        "scale_rows" => OpKind::ScaleRows,
        "mul_const" => OpKind::MulConst,
        "sum" => OpKind::Sum,
        "l1_loss" => OpKind::L1Loss,
        "bce_with_logits" => OpKind::BceWithLogits,
        _ => return None,
    })
}
