//! Cross-validation folds.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Image-wise folds split samples; object-wise folds split object ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    ImageWise,
    ObjectWise,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::ImageWise => "iw",
            SplitMode::ObjectWise => "ow",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iw" => Ok(SplitMode::ImageWise),
            "ow" => Ok(SplitMode::ObjectWise),
            _ => Err(Error::config("split", format!("expected iw or ow, got {s:?}"))),
        }
    }
}

/// Sorted sample indices of one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition `0..n` into `k` near-equal consecutive chunks of `order`.
fn chunks<T: Clone>(order: &[T], k: usize) -> Vec<Vec<T>> {
    let n = order.len();
    (0..k).map(|i| order[i * n / k..(i + 1) * n / k].to_vec()).collect()
}

pub fn split(dataset: &Dataset, mode: SplitMode, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::config("folds", "need at least 2 folds"));
    }
    let n = dataset.len();
    if n < folds {
        return Err(Error::Invalid(format!("{n} samples cannot fill {folds} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match mode {
        SplitMode::ImageWise => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            chunks(&order, folds)
        }
        SplitMode::ObjectWise => {
            if let Some(s) = dataset.samples.iter().find(|s| s.object_id.is_empty()) {
                return Err(Error::Invalid(format!("{}: object-wise split needs an object id", s.source)));
            }
            let mut objects: Vec<&str> = dataset
                .samples
                .iter()
                .map(|s| s.object_id.as_str())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if objects.len() < folds {
                return Err(Error::Invalid(format!(
                    "{} distinct objects cannot fill {folds} folds",
                    objects.len()
                )));
            }
            objects.shuffle(&mut rng);
            chunks(&objects, folds)
                .into_iter()
                .map(|objs| {
                    let objs: BTreeSet<&str> = objs.into_iter().collect();
                    (0..n)
                        .filter(|&i| objs.contains(dataset.samples[i].object_id.as_str()))
                        .collect()
                })
                .collect()
        }
    };
    Ok(groups
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let held: BTreeSet<usize> = test.iter().copied().collect();
            Fold {
                train: (0..n).filter(|i| !held.contains(i)).collect(),
                test,
            }
        })
        .collect())
}

/// Text manifest of a split: dataset size, mode, seed and each fold's test
/// indices.
pub fn manifest(dataset: &Dataset, mode: SplitMode, seed: u64, folds: &[Fold]) -> String {
    let mut s = format!(
        "dataset {}\nsamples {}\nmode {mode}\nseed {seed}\nfolds {}\n",
        dataset.provenance,
        dataset.len(),
        folds.len()
    );
    for (k, f) in folds.iter().enumerate() {
        let ids: Vec<String> = f.test.iter().map(usize::to_string).collect();
        s.push_str(&format!("fold {k} test {}\n", ids.join(",")));
    }
    s
}

pub fn write_manifest(path: &Path, dataset: &Dataset, mode: SplitMode, seed: u64, folds: &[Fold]) -> Result<()> {
    fs::write(path, manifest(dataset, mode, seed, folds)).map_err(|e| Error::io(path, e))
}
