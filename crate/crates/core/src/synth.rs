//! Synthetic hierarchical datasets.
//!
//! Leaf class centers are produced by a Gaussian diffusion down the label
//! tree: the root center sits at 0.5 in every coordinate, each child center
//! adds isotropic Gaussian noise to its parent's center with a per-stratum
//! scale, and samples add a final observation noise before being clipped to
//! the unit box. Classes deeper in the same subtree therefore stay closer
//! together than classes that split near the root, which is exactly the
//! geometry the tree distance measures.
//!
//! Generation is deterministic: every node and every leaf draws from its own
//! derived ChaCha stream, so parallel or out-of-order generation cannot
//! change the data.

use std::fs;
use std::io;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{Hierarchy, NodeRef, TreeError};
use crate::seed::stream;

const TAG_CENTER: u64 = 1;
const TAG_LEAF: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_COUNTS: u64 = 4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("branching list must be non-empty with factors >= 1")]
    BadBranching,
    #[error("feature dimension must be >= 2, got {0}")]
    DimTooSmall(usize),
    #[error("sigma_levels has {got} entries, tree needs {expected}")]
    SigmaLenMismatch { expected: usize, got: usize },
    #[error("sigma and noise scales must be finite and >= 0")]
    BadScale,
    #[error("sample budget {total} cannot cover {leaves} leaves at min {min} each")]
    BudgetTooSmall {
        total: usize,
        leaves: usize,
        min: usize,
    },
    #[error("samples per leaf must be >= 1")]
    NoSamples,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("dataset i/o failed: {0}")]
    Io(#[from] io::Error),
    #[error("malformed dataset file: {0}")]
    Parse(String),
}

/// Balanced tree with the given branching factors, coarsest first:
/// `branching[0]` children under the root, and so on down to the leaves.
pub fn gen_tree(branching: &[usize]) -> Result<Hierarchy, SynthError> {
    if branching.is_empty() || branching.iter().any(|&b| b == 0) {
        return Err(SynthError::BadBranching);
    }
    let num_levels = branching.len() + 1;
    let mut edges = Vec::new();
    let mut size_above = 1usize;
    for (depth, &factor) in branching.iter().enumerate() {
        // depth 0 sits directly under the root.
        let child_height = num_levels - 2 - depth;
        let size = size_above * factor;
        for i in 0..size {
            edges.push((
                NodeRef::new(child_height, i),
                NodeRef::new(child_height + 1, i / factor),
            ));
        }
        size_above = size;
    }
    Ok(Hierarchy::build(num_levels, &edges)?)
}

/// How many samples each leaf receives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SampleSpec {
    /// The same count for every leaf.
    PerLeaf(usize),
    /// Pareto-distributed counts, largest classes first, summing to `total`;
    /// every leaf keeps at least `min_samples`.
    LongTail {
        alpha: f64,
        min_samples: usize,
        total: usize,
    },
}

/// Generation parameters; `sigma_levels` runs coarse to fine, one entry per
/// stratum transition, so its length is `num_levels - 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataParams {
    pub dim: usize,
    pub sigma_levels: Vec<f64>,
    pub noise_sigma: f64,
    pub samples: SampleSpec,
    pub seed: u64,
}

/// Full generation config when the tree is built in the same call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub branching: Vec<usize>,
    #[serde(flatten)]
    pub params: DataParams,
}

/// Row-major feature matrix with leaf labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Seeded 70/15/15 split.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Samples a dataset over the leaves of `tree` and splits it 70/15/15 with a
/// seeded shuffle.
pub fn gen_data(tree: &Hierarchy, params: &DataParams) -> Result<SplitDataset, SynthError> {
    if params.dim < 2 {
        return Err(SynthError::DimTooSmall(params.dim));
    }
    let transitions = tree.num_levels() - 1;
    if params.sigma_levels.len() != transitions {
        return Err(SynthError::SigmaLenMismatch {
            expected: transitions,
            got: params.sigma_levels.len(),
        });
    }
    if params
        .sigma_levels
        .iter()
        .chain(std::iter::once(&params.noise_sigma))
        .any(|s| !s.is_finite() || *s < 0.0)
    {
        return Err(SynthError::BadScale);
    }
    if params.sigma_levels.windows(2).any(|w| w[1] > w[0]) {
        warn!("sigma_levels increase toward the leaves; sibling classes will overlap their cousins");
    }

    let dim = params.dim;
    let top = tree.num_levels() - 1;
    // centers[h][i] = center of node (h, i); filled root-down.
    let mut centers: Vec<Vec<Vec<f64>>> = tree
        .level_sizes()
        .iter()
        .map(|&n| vec![Vec::new(); n])
        .collect();
    centers[top][0] = vec![0.5; dim];
    for h in (1..=top).rev() {
        // Offset scale for children at height h-1.
        let sigma = params.sigma_levels[top - h];
        for parent in 0..tree.level_sizes()[h] {
            let kids = tree.children(NodeRef::new(h, parent))?.to_vec();
            for child in kids {
                let mut rng = stream(params.seed, &[TAG_CENTER, (h - 1) as u64, child as u64]);
                let center: Vec<f64> = centers[h][parent]
                    .iter()
                    .map(|&c| {
                        let n: f64 = rng.sample(StandardNormal);
                        c + sigma * n
                    })
                    .collect();
                centers[h - 1][child] = center;
            }
        }
    }

    let counts = sample_counts(tree.num_leaves(), params)?;
    let total: usize = counts.iter().sum();
    let mut features = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (leaf, &count) in counts.iter().enumerate() {
        let mut rng = stream(params.seed, &[TAG_LEAF, leaf as u64]);
        for _ in 0..count {
            for &c in &centers[0][leaf] {
                let n: f64 = rng.sample(StandardNormal);
                features.push((c + params.noise_sigma * n).clamp(0.0, 1.0));
            }
            labels.push(leaf);
        }
    }

    let mut order: Vec<usize> = (0..total).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = stream(params.seed, &[TAG_SPLIT]);
        order.shuffle(&mut rng);
    }
    let n_train = total * 70 / 100;
    let n_val = total * 15 / 100;
    let take = |idx: &[usize]| -> Dataset {
        let mut f = Vec::with_capacity(idx.len() * dim);
        let mut l = Vec::with_capacity(idx.len());
        for &i in idx {
            f.extend_from_slice(&features[i * dim..(i + 1) * dim]);
            l.push(labels[i]);
        }
        Dataset {
            dim,
            features: f,
            labels: l,
        }
    };
    Ok(SplitDataset {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

/// Builds the tree and the data in one go.
pub fn gen_synth(cfg: &SynthConfig) -> Result<(Hierarchy, SplitDataset), SynthError> {
    let tree = gen_tree(&cfg.branching)?;
    let data = gen_data(&tree, &cfg.params)?;
    Ok((tree, data))
}

fn sample_counts(n_leaves: usize, params: &DataParams) -> Result<Vec<usize>, SynthError> {
    match params.samples {
        SampleSpec::PerLeaf(k) => {
            if k == 0 {
                return Err(SynthError::NoSamples);
            }
            Ok(vec![k; n_leaves])
        }
        SampleSpec::LongTail {
            alpha,
            min_samples,
            total,
        } => {
            if total < n_leaves * min_samples.max(1) {
                return Err(SynthError::BudgetTooSmall {
                    total,
                    leaves: n_leaves,
                    min: min_samples.max(1),
                });
            }
            let min_samples = min_samples.max(1);
            let mut rng = stream(params.seed, &[TAG_COUNTS]);
            // Pareto via inverse CDF on the unit uniform.
            let raw: Vec<f64> = (0..n_leaves)
                .map(|_| {
                    let u: f64 = rng.random_range(0.0..1.0);
                    (1.0 - u).powf(-1.0 / alpha)
                })
                .collect();
            let sum: f64 = raw.iter().sum();
            let scale = total as f64 / sum;
            let mut counts: Vec<usize> = raw
                .iter()
                .map(|r| ((r * scale).floor() as usize).max(min_samples))
                .collect();
            // Largest-remainder style fix-up so the counts sum to the budget.
            let mut have: usize = counts.iter().sum();
            if have < total {
                let mut by_frac: Vec<usize> = (0..n_leaves).collect();
                by_frac.sort_by(|&a, &b| {
                    let fa = raw[a] * scale - (raw[a] * scale).floor();
                    let fb = raw[b] * scale - (raw[b] * scale).floor();
                    fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
                });
                let mut i = 0;
                while have < total {
                    counts[by_frac[i % n_leaves]] += 1;
                    have += 1;
                    i += 1;
                }
            }
            while have > total {
                let (idx, _) = counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > min_samples)
                    .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia)))
                    .expect("budget >= leaves * min, so some count exceeds the floor");
                counts[idx] -= 1;
                have -= 1;
            }
            // Head classes get the low leaf indices.
            counts.sort_unstable_by(|a, b| b.cmp(a));
            Ok(counts)
        }
    }
}

/// Sizes block of the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// `manifest.json` written next to the split CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub n: usize,
    pub split_sizes: SplitSizes,
    pub tree_path: String,
    pub config: DataParams,
}

/// Writes `manifest.json`, `train.csv`, `val.csv`, `test.csv` into `dir`.
/// Floats are printed with the shortest representation that round-trips, so
/// a written dataset reloads bit-exactly.
pub fn write_dataset_dir(
    dir: &Path,
    splits: &SplitDataset,
    params: &DataParams,
    tree_path: &str,
) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        dim: splits.train.dim,
        n: splits.train.len() + splits.val.len() + splits.test.len(),
        split_sizes: SplitSizes {
            train: splits.train.len(),
            val: splits.val.len(),
            test: splits.test.len(),
        },
        tree_path: tree_path.to_string(),
        config: params.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SynthError::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    for (name, ds) in [
        ("train.csv", &splits.train),
        ("val.csv", &splits.val),
        ("test.csv", &splits.test),
    ] {
        let mut out = String::new();
        for i in 0..ds.len() {
            let row = ds.row(i);
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", ds.labels[i]));
        }
        fs::write(dir.join(name), out)?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, SynthError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| SynthError::Parse(e.to_string()))
}

/// Loads one split (`train`, `val`, or `test`) from a dataset directory.
pub fn load_split(dir: &Path, split: &str) -> Result<Dataset, SynthError> {
    let manifest = load_manifest(dir)?;
    let text = fs::read_to_string(dir.join(format!("{split}.csv")))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != manifest.dim + 1 {
            return Err(SynthError::Parse(format!(
                "{split}.csv line {}: expected {} fields, got {}",
                lineno + 1,
                manifest.dim + 1,
                fields.len()
            )));
        }
        for f in &fields[..manifest.dim] {
            features.push(
                f.parse::<f64>()
                    .map_err(|e| SynthError::Parse(format!("{split}.csv line {}: {e}", lineno + 1)))?,
            );
        }
        labels.push(
            fields[manifest.dim]
                .parse::<usize>()
                .map_err(|e| SynthError::Parse(format!("{split}.csv line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(Dataset {
        dim: manifest.dim,
        features,
        labels,
    })
}
