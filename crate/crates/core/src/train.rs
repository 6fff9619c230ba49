//! Training loop, metrics, checkpoints and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{FeatureVocabulary, VocabularyError};
use crate::config::{ConfigError, RunConfig, Task};
use crate::data::{load_csv, make_batches, random_split, DataError, Dataset, LoadOptions, Record, TargetScaler};
use crate::junction::DecomposeOptions;
use crate::model::{GraphSample, Himp, Mode, ModelConfig};
use crate::tensor::{Adam, AdamConfig, Tape, TensorError};

pub const CHECKPOINT_TAG: &str = "himp-checkpoint/1";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_seconds: f64,
}

/// Outcome of a training run, evaluated with the best-validation weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub metric: String,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub train_metric: f64,
    pub test_metric: f64,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub skipped_rows: usize,
    pub parameters: usize,
}

/// Everything needed to rebuild a trained model and featurize new input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub task: Task,
    pub model: ModelConfig,
    pub vocabulary: FeatureVocabulary,
    pub singleton_threshold: usize,
    pub smiles_column: String,
    pub target_columns: Vec<String>,
    pub scaler: Option<TargetScaler>,
    pub best_epoch: usize,
    pub params: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(path))?;
        }
        fs::write(path, serde_json::to_string(self).expect("checkpoint serializes")).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let bad = |message: String| TrainError::Checkpoint { path: path.to_path_buf(), message };
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if ck.format != CHECKPOINT_TAG {
            return Err(bad(format!("unsupported format tag {:?}", ck.format)));
        }
        Ok(ck)
    }

    pub fn model(&self) -> Result<Himp, TrainError> {
        let mut model = Himp::new(self.model.clone(), 0);
        model.params_mut().load_json_value(&self.params)?;
        Ok(model)
    }

    pub fn load_options(&self, cache_dir: Option<PathBuf>) -> LoadOptions {
        LoadOptions {
            smiles_column: self.smiles_column.clone(),
            target_columns: self.target_columns.clone(),
            decompose: DecomposeOptions { singleton_threshold: self.singleton_threshold },
            cache_dir,
        }
    }

    /// Model-ready samples; regression targets are standardized.
    pub fn samples(&self, records: &[Record]) -> Vec<GraphSample> {
        prepare(records, &self.vocabulary, self.scaler.as_ref())
    }
}

fn prepare(records: &[Record], vocab: &FeatureVocabulary, scaler: Option<&TargetScaler>) -> Vec<GraphSample> {
    let ds = Dataset { target_columns: Vec::new(), records: records.to_vec(), skipped: Vec::new() };
    let mut samples = ds.samples(vocab);
    if let Some(s) = scaler {
        for sample in &mut samples {
            for (c, v) in sample.target.iter_mut().enumerate() {
                *v = s.transform(c, *v);
            }
        }
    }
    samples
}

/// Area under the ROC curve from ranks, ties sharing their average rank.
/// `None` when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Regression => "mae",
        Task::Multilabel => "roc_auc",
    }
}

fn better(task: Task, candidate: f64, best: f64) -> bool {
    if candidate.is_nan() {
        return false;
    }
    best.is_nan()
        || match task {
            Task::Regression => candidate < best,
            Task::Multilabel => candidate > best,
        }
}

/// Regression: MAE in original units over labelled entries. Multilabel: mean
/// ROC-AUC over columns with both classes present (NaN if there are none).
pub fn evaluate(
    model: &Himp,
    task: Task,
    samples: &[GraphSample],
    indices: &[usize],
    scaler: Option<&TargetScaler>,
    batch_size: usize,
) -> Result<f64, TensorError> {
    let width = model.config().out_dim;
    let mut preds: Vec<Vec<f64>> = Vec::with_capacity(indices.len());
    for batch in make_batches(samples, indices, batch_size, 0, false) {
        let out = model.predict(&batch)?;
        preds.extend((0..out.rows()).map(|r| out.row(r).to_vec()));
    }
    let rows: Vec<&GraphSample> = indices.iter().map(|&i| &samples[i]).collect();
    Ok(match task {
        Task::Regression => {
            let mut total = 0.0;
            let mut count = 0usize;
            for (s, p) in rows.iter().zip(&preds) {
                for c in 0..width {
                    if s.mask[c] {
                        let (y, yhat) = match scaler {
                            Some(sc) => (sc.inverse(c, s.target[c]), sc.inverse(c, p[c])),
                            None => (s.target[c], p[c]),
                        };
                        total += (yhat - y).abs();
                        count += 1;
                    }
                }
            }
            if count == 0 {
                f64::NAN
            } else {
                total / count as f64
            }
        }
        Task::Multilabel => {
            let aucs: Vec<f64> = (0..width)
                .filter_map(|c| {
                    let (scores, labels): (Vec<f64>, Vec<bool>) = rows
                        .iter()
                        .zip(&preds)
                        .filter(|(s, _)| s.mask[c])
                        .map(|(s, p)| (p[c], s.target[c] > 0.5))
                        .unzip();
                    roc_auc(&scores, &labels)
                })
                .collect();
            if aucs.is_empty() {
                f64::NAN
            } else {
                aucs.iter().sum::<f64>() / aucs.len() as f64
            }
        }
    })
}

fn load_options(config: &RunConfig, target_columns: Vec<String>) -> LoadOptions {
    LoadOptions {
        smiles_column: config.smiles_column.clone(),
        target_columns,
        decompose: DecomposeOptions { singleton_threshold: config.singleton_threshold },
        cache_dir: config.cache_dir.clone(),
    }
}

/// Trains per `config`, writing the metrics file and the best-validation
/// checkpoint. `on_epoch` sees each epoch's stats as they are produced.
pub fn train(config: &RunConfig, mut on_epoch: impl FnMut(&EpochStats)) -> Result<TrainSummary, TrainError> {
    config.validate()?;
    let start = Instant::now();
    let data_path = config.data.as_ref().ok_or(ConfigError::Missing("data"))?;
    let main = load_csv(data_path, &load_options(config, config.target_columns.clone()))?;
    let columns = main.target_columns.clone();
    let mut skipped = main.skipped.len();

    // train, val and test records, in file order within each split
    let (train_recs, val_recs, test_recs) = match (&config.val_data, &config.test_data) {
        (Some(v), Some(t)) => {
            let val = load_csv(v, &load_options(config, columns.clone()))?;
            let test = load_csv(t, &load_options(config, columns.clone()))?;
            skipped += val.skipped.len() + test.skipped.len();
            (main.records, val.records, test.records)
        }
        _ => {
            let split = random_split(main.len(), config.split, config.seed)?;
            let pick = |idx: &[usize]| {
                let mut idx = idx.to_vec();
                idx.sort_unstable();
                idx.iter().map(|&i| main.records[i].clone()).collect::<Vec<_>>()
            };
            (pick(&split.train), pick(&split.val), pick(&split.test))
        }
    };

    let vocabulary = FeatureVocabulary::build(train_recs.iter().map(|r| &r.molecule))?;
    let scaler = match config.task {
        Task::Regression => Some(TargetScaler::fit(&train_recs.iter().collect::<Vec<_>>())),
        Task::Multilabel => None,
    };
    let train_samples = prepare(&train_recs, &vocabulary, scaler.as_ref());
    let val_samples = prepare(&val_recs, &vocabulary, scaler.as_ref());
    let test_samples = prepare(&test_recs, &vocabulary, scaler.as_ref());

    let model_config = ModelConfig {
        architecture: config.architecture,
        layers: config.layers,
        hidden: config.hidden,
        out_dim: columns.len(),
        dropout: config.dropout,
        readout: config.readout,
        atom_vocab: vocabulary.atom_size(),
        bond_vocab: vocabulary.bond_size(),
    };
    let mut model = Himp::new(model_config.clone(), config.seed);
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, model.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d40f);

    let metrics_path = &config.metrics;
    if let Some(dir) = metrics_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(metrics_path))?;
    }
    let mut metrics = fs::File::create(metrics_path).map_err(io_err(metrics_path))?;

    let train_idx: Vec<usize> = (0..train_samples.len()).collect();
    let val_idx: Vec<usize> = (0..val_samples.len()).collect();
    let test_idx: Vec<usize> = (0..test_samples.len()).collect();
    let task = config.task;
    let bs = config.batch_size;

    let mut best_epoch = 0;
    let mut best_val = f64::NAN;
    let mut best_params = model.params().clone();
    if config.epochs == 0 {
        best_val = evaluate(&model, task, &val_samples, &val_idx, scaler.as_ref(), bs)?;
    }
    for epoch in 1..=config.epochs {
        let shuffle_seed = config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64);
        adam.config.lr = config.lr * config.lr_decay.powi(epoch as i32 - 1);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in make_batches(&train_samples, &train_idx, bs, shuffle_seed, true) {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch, Mode::Train(&mut dropout_rng))?;
            let loss = match task {
                Task::Regression => tape.l1_loss(out, &batch.targets, Some(&batch.mask)),
                Task::Multilabel => tape.bce_with_logits(out, &batch.targets, Some(&batch.mask)),
            };
            let loss = match loss {
                Err(TensorError::EmptyMask { .. }) => continue,
                other => other?,
            };
            loss_sum += tape.value(loss).get(0, 0);
            steps += 1;
            let grads = tape.backward(loss)?;
            let grads = grads.for_params(model.params());
            adam.step(model.params_mut(), grads)?;
        }
        let val_metric = evaluate(&model, task, &val_samples, &val_idx, scaler.as_ref(), bs)?;
        let stats = EpochStats {
            epoch,
            train_loss: if steps == 0 { f64::NAN } else { loss_sum / steps as f64 },
            val_metric,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(metrics, "{}", serde_json::to_string(&stats).expect("stats serialize")).map_err(io_err(metrics_path))?;
        on_epoch(&stats);
        if better(task, val_metric, best_val) || (epoch == 1 && best_val.is_nan()) {
            best_val = val_metric;
            best_epoch = epoch;
            best_params = model.params().clone();
        }
    }
    metrics.flush().map_err(io_err(metrics_path))?;
    *model.params_mut() = best_params;

    let checkpoint = Checkpoint {
        format: CHECKPOINT_TAG.into(),
        task,
        model: model_config,
        vocabulary,
        singleton_threshold: config.singleton_threshold,
        smiles_column: config.smiles_column.clone(),
        target_columns: columns,
        scaler: scaler.clone(),
        best_epoch,
        params: model.params().to_json_value(),
    };
    checkpoint.save(&config.checkpoint)?;

    Ok(TrainSummary {
        metric: metric_name(task).into(),
        best_epoch,
        best_val_metric: best_val,
        train_metric: evaluate(&model, task, &train_samples, &train_idx, scaler.as_ref(), bs)?,
        test_metric: evaluate(&model, task, &test_samples, &test_idx, scaler.as_ref(), bs)?,
        num_train: train_samples.len(),
        num_val: val_samples.len(),
        num_test: test_samples.len(),
        skipped_rows: skipped,
        parameters: model.params().num_scalars(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metric: String,
    pub value: f64,
    pub num_records: usize,
    pub skipped_rows: usize,
}

/// Scores a checkpoint on every parseable row of a CSV file.
pub fn evaluate_file(
    checkpoint_path: &Path,
    data: &Path,
    cache_dir: Option<PathBuf>,
    batch_size: usize,
) -> Result<EvalSummary, TrainError> {
    let ck = Checkpoint::load(checkpoint_path)?;
    let model = ck.model()?;
    let ds = load_csv(data, &ck.load_options(cache_dir))?;
    let samples = ck.samples(&ds.records);
    let idx: Vec<usize> = (0..samples.len()).collect();
    let value = evaluate(&model, ck.task, &samples, &idx, ck.scaler.as_ref(), batch_size.max(1))?;
    Ok(EvalSummary {
        metric: metric_name(ck.task).into(),
        value,
        num_records: samples.len(),
        skipped_rows: ds.skipped.len(),
    })
}
