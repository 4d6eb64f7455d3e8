use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::synth::{Corpus, CorpusSplit};

/// One episode's images, as indices into `Corpus::images`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Task {
    /// Class set in ascending order.
    pub classes: Vec<u32>,
    /// Support images per class, sorted by image id.
    pub support: BTreeMap<u32, Vec<usize>>,
    /// Query images, grouped by class in class order for per-class tasks.
    pub query: Vec<usize>,
}

impl Task {
    pub fn support_len(&self) -> usize {
        self.support.values().map(Vec::len).sum()
    }

    pub fn is_disjoint(&self) -> bool {
        let support: BTreeSet<usize> = self.support.values().flatten().copied().collect();
        support.len() == self.support_len() && self.query.iter().all(|i| !support.contains(i))
    }

    pub fn images(&self) -> impl Iterator<Item = usize> + '_ {
        self.support.values().flatten().chain(&self.query).copied()
    }
}

fn class_pool(corpus: &Corpus, pool: &[usize], class_id: u32, needed: usize) -> Result<Vec<usize>> {
    let members = CorpusSplit::of_class(corpus, pool, class_id);
    if members.len() < needed {
        let class = corpus
            .spec(class_id)
            .map_or_else(|| class_id.to_string(), |s| s.name.clone());
        return Err(Error::InsufficientImages {
            class,
            needed,
            available: members.len(),
        });
    }
    Ok(members)
}

fn sort_by_id(corpus: &Corpus, idx: &mut [usize]) {
    idx.sort_by(|&a, &b| corpus.images[a].id.cmp(&corpus.images[b].id));
}

fn checked_classes(classes: &[u32]) -> Result<Vec<u32>> {
    let set: BTreeSet<u32> = classes.iter().copied().collect();
    if set.is_empty() || set.len() != classes.len() {
        return Err(Error::invalid(format!("task class set {classes:?} is empty or repeats a class")));
    }
    Ok(set.into_iter().collect())
}

/// `s` support and `q` query images per class, drawn uniformly without
/// replacement from the class's images in `pool`.
pub fn sample_task(
    corpus: &Corpus,
    pool: &[usize],
    classes: &[u32],
    s: usize,
    q: usize,
    rng: &mut impl Rng,
) -> Result<Task> {
    if s == 0 || q == 0 {
        return Err(Error::invalid("support and query sizes must be at least 1"));
    }
    let classes = checked_classes(classes)?;
    let mut support = BTreeMap::new();
    let mut query = Vec::with_capacity(classes.len() * q);
    for &c in &classes {
        let members = class_pool(corpus, pool, c, s + q)?;
        let picked = index::sample(rng, members.len(), s + q).into_vec();
        let mut sup: Vec<usize> = picked[..s].iter().map(|&k| members[k]).collect();
        let mut qry: Vec<usize> = picked[s..].iter().map(|&k| members[k]).collect();
        sort_by_id(corpus, &mut sup);
        sort_by_id(corpus, &mut qry);
        support.insert(c, sup);
        query.extend(qry);
    }
    Ok(Task {
        classes,
        support,
        query,
    })
}

/// `s` support images per class as in [`sample_task`], with `n_query` query
/// images drawn uniformly from the rest of the pool regardless of class, so
/// queries follow the pool's class frequencies.
pub fn sample_pooled_task(
    corpus: &Corpus,
    pool: &[usize],
    classes: &[u32],
    s: usize,
    n_query: usize,
    rng: &mut impl Rng,
) -> Result<Task> {
    if s == 0 || n_query == 0 {
        return Err(Error::invalid("support and query sizes must be at least 1"));
    }
    let classes = checked_classes(classes)?;
    let mut support = BTreeMap::new();
    let mut taken = BTreeSet::new();
    for &c in &classes {
        let members = class_pool(corpus, pool, c, s)?;
        let mut sup: Vec<usize> = index::sample(rng, members.len(), s).into_iter().map(|k| members[k]).collect();
        sort_by_id(corpus, &mut sup);
        taken.extend(sup.iter().copied());
        support.insert(c, sup);
    }
    let rest: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|i| !taken.contains(i) && classes.binary_search(&corpus.images[*i].class_id).is_ok())
        .collect();
    if rest.len() < n_query {
        return Err(Error::invalid(format!(
            "{n_query} query images requested from a pool of {}",
            rest.len()
        )));
    }
    let mut query: Vec<usize> = index::sample(rng, rest.len(), n_query).into_iter().map(|k| rest[k]).collect();
    sort_by_id(corpus, &mut query);
    Ok(Task {
        classes,
        support,
        query,
    })
}
