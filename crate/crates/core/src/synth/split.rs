use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::{Corpus, Rarity};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPolicy {
    pub common_classes: Vec<u32>,
    pub rare_classes: Vec<u32>,
    pub eval_fraction: f64,
    pub seed: u64,
    /// Train images required per class, normally `s + q`.
    pub min_train_per_class: usize,
}

impl SplitPolicy {
    /// Common and rare rosters taken from the corpus class table.
    pub fn from_corpus(corpus: &Corpus, eval_fraction: f64, seed: u64, min_train_per_class: usize) -> Self {
        Self {
            common_classes: corpus.classes_with(Rarity::Common),
            rare_classes: corpus.classes_with(Rarity::Rare),
            eval_fraction,
            seed,
            min_train_per_class,
        }
    }
}

/// Index lists into `Corpus::images`, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    /// Train images of common classes only.
    pub base: Vec<usize>,
    /// Train images of every class.
    pub full: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Split membership as stored in the corpus manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecord {
    pub policy: SplitPolicy,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl CorpusSplit {
    pub fn record(&self, corpus: &Corpus, policy: &SplitPolicy) -> SplitRecord {
        let ids = |idx: &[usize]| idx.iter().map(|&i| corpus.images[i].id.clone()).collect();
        SplitRecord {
            policy: policy.clone(),
            train: ids(&self.full),
            eval: ids(&self.eval),
        }
    }

    /// Rebuild index lists from a stored record.
    pub fn from_record(corpus: &Corpus, record: &SplitRecord) -> Result<Self> {
        let lookup = |ids: &[String]| -> Result<Vec<usize>> {
            let mut out = ids
                .iter()
                .map(|id| {
                    corpus
                        .position(id)
                        .ok_or_else(|| Error::invalid(format!("split names unknown image {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            out.sort_unstable();
            Ok(out)
        };
        let full = lookup(&record.train)?;
        let eval = lookup(&record.eval)?;
        let rare: BTreeSet<u32> = record.policy.rare_classes.iter().copied().collect();
        let base = full
            .iter()
            .copied()
            .filter(|&i| !rare.contains(&corpus.images[i].class_id))
            .collect();
        Ok(Self { base, full, eval })
    }

    /// Indices of `set` belonging to `class_id`.
    pub fn of_class(corpus: &Corpus, set: &[usize], class_id: u32) -> Vec<usize> {
        set.iter()
            .copied()
            .filter(|&i| corpus.images[i].class_id == class_id)
            .collect()
    }
}

/// Split by source group, so an augmented copy always lands with its
/// original. Each class holds out `floor(groups * eval_fraction)` groups.
pub fn split_corpus(corpus: &Corpus, policy: &SplitPolicy) -> Result<CorpusSplit> {
    if !(policy.eval_fraction > 0.0 && policy.eval_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "eval fraction {} outside (0, 1)",
            policy.eval_fraction
        )));
    }
    let common: BTreeSet<u32> = policy.common_classes.iter().copied().collect();
    let rare: BTreeSet<u32> = policy.rare_classes.iter().copied().collect();
    if !common.is_disjoint(&rare) {
        return Err(Error::invalid("a class is both common and rare"));
    }
    let all: BTreeSet<u32> = corpus.specs().iter().map(|s| s.class_id).collect();
    if common.union(&rare).copied().collect::<BTreeSet<_>>() != all {
        return Err(Error::invalid("split policy must assign every class"));
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(policy.seed);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for spec in corpus.specs() {
        let mut groups: Vec<&str> = Vec::new();
        for im in corpus.images.iter().filter(|im| im.class_id == spec.class_id) {
            if !groups.contains(&im.provenance.source.as_str()) {
                groups.push(&im.provenance.source);
            }
        }
        groups.shuffle(&mut rng);
        let n_eval = (groups.len() as f64 * policy.eval_fraction).floor() as usize;
        let held: BTreeSet<&str> = groups[..n_eval].iter().copied().collect();
        let mut n_train = 0;
        for (i, im) in corpus.images.iter().enumerate() {
            if im.class_id != spec.class_id {
                continue;
            }
            if held.contains(im.provenance.source.as_str()) {
                eval.push(i);
            } else {
                train.push(i);
                n_train += 1;
            }
        }
        if n_train < policy.min_train_per_class {
            return Err(Error::InsufficientImages {
                class: spec.name.clone(),
                needed: policy.min_train_per_class,
                available: n_train,
            });
        }
    }
    train.sort_unstable();
    eval.sort_unstable();
    let base = train
        .iter()
        .copied()
        .filter(|&i| common.contains(&corpus.images[i].class_id))
        .collect();
    Ok(CorpusSplit {
        base,
        full: train,
        eval,
    })
}
