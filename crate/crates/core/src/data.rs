//! CSV loading, decomposition caching, splits and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chem::{featurize, parse_smiles, FeatureVocabulary, Molecule};
use crate::junction::{decompose_with, DecomposeOptions, Decomposition};
use crate::model::{Batch, GraphSample};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: no target columns")]
    NoTargets { path: PathBuf },
    #[error("{path}: no parseable molecules ({skipped} rows skipped)")]
    NoRecords { path: PathBuf, skipped: usize },
    #[error("need at least 3 records to split, got {0}")]
    TooSmall(usize),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
}

/// A parsed molecule with its decomposition and (possibly partial) labels.
#[derive(Debug, Clone)]
pub struct Record {
    pub smiles: String,
    pub molecule: Molecule,
    pub decomposition: Decomposition,
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
}

/// A row that was dropped while loading.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedRow {
    /// 1-based line number, header = line 1
    pub line: usize,
    pub smiles: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub target_columns: Vec<String>,
    pub records: Vec<Record>,
    pub skipped: Vec<SkippedRow>,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub smiles_column: String,
    /// Empty = every column other than the SMILES column.
    pub target_columns: Vec<String>,
    pub decompose: DecomposeOptions,
    pub cache_dir: Option<PathBuf>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            smiles_column: "smiles".into(),
            target_columns: Vec::new(),
            decompose: DecomposeOptions::default(),
            cache_dir: None,
        }
    }
}

fn parse_label(cell: &str) -> Result<Option<f64>, String> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("bad label `{cell}`")),
    }
}

/// Loads a CSV with a SMILES column and numeric target columns.
///
/// Rows whose SMILES fails to parse or whose labels are not numeric are
/// skipped and listed in [`Dataset::skipped`]. Empty label cells are kept
/// with mask 0. Fails when no row survives.
pub fn load_csv(path: &Path, options: &LoadOptions) -> Result<Dataset, DataError> {
    let csv_err = |source| DataError::Csv { path: path.to_path_buf(), source };
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path).map_err(csv_err)?;
    let headers: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };
    let smiles_idx = col(&options.smiles_column)?;
    let target_columns: Vec<String> = if options.target_columns.is_empty() {
        headers.iter().filter(|h| **h != options.smiles_column).cloned().collect()
    } else {
        options.target_columns.clone()
    };
    if target_columns.is_empty() {
        return Err(DataError::NoTargets { path: path.to_path_buf() });
    }
    let target_idx = target_columns.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;
    let cache = options.cache_dir.as_ref().map(|d| DecompositionCache::new(d.clone()));

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(csv_err)?;
        let smiles = row.get(smiles_idx).unwrap_or("").trim().to_string();
        let molecule = match parse_smiles(&smiles) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("{}:{line}: skipping `{smiles}`: {e}", path.display());
                skipped.push(SkippedRow { line, smiles, reason: e.to_string() });
                continue;
            }
        };
        let labels: Result<Vec<Option<f64>>, String> =
            target_idx.iter().map(|&j| parse_label(row.get(j).unwrap_or(""))).collect();
        let labels = match labels {
            Ok(l) => l,
            Err(reason) => {
                log::warn!("{}:{line}: skipping: {reason}", path.display());
                skipped.push(SkippedRow { line, smiles, reason });
                continue;
            }
        };
        let decomposition = match &cache {
            Some(c) => c.get_or_compute(&smiles, &molecule, &options.decompose),
            None => decompose_with(&molecule, &options.decompose),
        };
        records.push(Record {
            smiles,
            molecule,
            decomposition,
            target: labels.iter().map(|l| l.unwrap_or(0.0)).collect(),
            mask: labels.iter().map(|l| l.is_some()).collect(),
        });
    }
    if records.is_empty() {
        return Err(DataError::NoRecords { path: path.to_path_buf(), skipped: skipped.len() });
    }
    Ok(Dataset { target_columns, records, skipped })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn samples(&self, vocab: &FeatureVocabulary) -> Vec<GraphSample> {
        self.records
            .iter()
            .map(|r| {
                let features = featurize(&r.molecule, vocab);
                GraphSample::new(&r.molecule, &r.decomposition, &features, r.target.clone(), r.mask.clone())
            })
            .collect()
    }
}

/// Index sets of a train/validation/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random partition of `0..n`. Sizes are `round(f0 n)`, `round(f1 n)`
/// and the remainder, each kept at least 1.
pub fn random_split(n: usize, fractions: [f64; 3], seed: u64) -> Result<Split, DataError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    if n < 3 {
        return Err(DataError::TooSmall(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((fractions[1] * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split { train: order, val, test })
}

/// Groups `indices` into batches of at most `batch_size`; the last batch may
/// be short. With `shuffle` the order is a seeded permutation.
pub fn make_batches(
    samples: &[GraphSample],
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Vec<Batch> {
    assert!(batch_size >= 1);
    let mut order = indices.to_vec();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&GraphSample> = chunk.iter().map(|&i| &samples[i]).collect();
            Batch::collate(&refs)
        })
        .collect()
}

/// Per-molecule JSON files keyed by SMILES hash and singleton threshold.
#[derive(Debug, Clone)]
pub struct DecompositionCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    smiles: String,
    threshold: usize,
    decomposition: Decomposition,
}

impl DecompositionCache {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn path_for(&self, smiles: &str, options: &DecomposeOptions) -> PathBuf {
        let digest = hex::encode(Sha256::digest(smiles.as_bytes()));
        self.dir.join(format!("{digest}-t{}.json", options.singleton_threshold))
    }

    /// Reads a cached decomposition, or computes and stores it. Cache I/O
    /// problems are logged and fall back to recomputation.
    pub fn get_or_compute(&self, smiles: &str, mol: &Molecule, options: &DecomposeOptions) -> Decomposition {
        let path = self.path_for(smiles, options);
        if let Ok(text) = fs::read_to_string(&path) {
            match serde_json::from_str::<CacheEntry>(&text) {
                Ok(e) if e.smiles == smiles && e.threshold == options.singleton_threshold => return e.decomposition,
                _ => log::warn!("ignoring stale cache entry {}", path.display()),
            }
        }
        let decomposition = decompose_with(mol, options);
        let entry = CacheEntry {
            smiles: smiles.to_string(),
            threshold: options.singleton_threshold,
            decomposition: decomposition.clone(),
        };
        let written = fs::create_dir_all(&self.dir)
            .and_then(|_| fs::write(&path, serde_json::to_string(&entry).expect("serializable")));
        if let Err(e) = written {
            log::warn!("cannot write cache {}: {e}", path.display());
        }
        decomposition
    }
}

/// Per-column standardization fitted on labelled training entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TargetScaler {
    pub fn fit(records: &[&Record]) -> Self {
        let width = records.first().map_or(0, |r| r.target.len());
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        for c in 0..width {
            let vals: Vec<f64> = records.iter().filter(|r| r.mask[c]).map(|r| r.target[c]).collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[c] = m;
            std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn transform(&self, c: usize, v: f64) -> f64 {
        (v - self.mean[c]) / self.std[c]
    }

    pub fn inverse(&self, c: usize, v: f64) -> f64 {
        v * self.std[c] + self.mean[c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "smiles,y\nCCO,1.5\nC1CC,2\nc1ccccc1,\nCC,x\n");
        let ds = load_csv(&p, &LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.records[1].mask, vec![false]);
        assert_eq!(ds.skipped.len(), 2);
        assert_eq!(ds.skipped[0].line, 3);
    }

    #[test]
    fn all_bad_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "smiles,y\nC1CC,1\n");
        assert!(matches!(load_csv(&p, &LoadOptions::default()), Err(DataError::NoRecords { skipped: 1, .. })));
        let p = write(dir.path(), "b.csv", "mol,y\nCC,1\n");
        assert!(matches!(load_csv(&p, &LoadOptions::default()), Err(DataError::MissingColumn { .. })));
    }

    #[test]
    fn split_sizes() {
        let s = random_split(100, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, random_split(100, [0.8, 0.1, 0.1], 3).unwrap());
        assert!(random_split(2, [0.8, 0.1, 0.1], 0).is_err());
        assert!(random_split(10, [0.8, 0.3, 0.1], 0).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DecompositionCache::new(dir.path().join("cache"));
        let mol = parse_smiles("c1ccccc1CC").unwrap();
        let opts = DecomposeOptions::default();
        let a = cache.get_or_compute("c1ccccc1CC", &mol, &opts);
        assert!(cache.path_for("c1ccccc1CC", &opts).exists());
        let b = cache.get_or_compute("c1ccccc1CC", &mol, &opts);
        assert_eq!(a, b);
    }

    #[test]
    fn scaler_inverts() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "smiles,y\nCC,1\nCCC,3\nCCCC,\n");
        let ds = load_csv(&p, &LoadOptions::default()).unwrap();
        let refs: Vec<&Record> = ds.records.iter().collect();
        let s = TargetScaler::fit(&refs);
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.std, vec![1.0]);
        assert_eq!(s.inverse(0, s.transform(0, 7.25)), 7.25);
    }
}
