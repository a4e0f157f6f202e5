use std::collections::BTreeMap;

use crate::datamodel::sample_indices;
use crate::error::{Error, Result};
use crate::numerics::Rng;

fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        out.entry(c).or_default().push(i);
    }
    out
}

/// Draws `k` training examples per class; every other index is a test
/// example. Both lists are sorted.
///
/// Every class present in `labels` needs at least `k + 1` members so it also
/// appears in the test set.
pub fn kshot_sample(labels: &[usize], k: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let classes = by_class(labels);
    for (&class, members) in &classes {
        if members.len() < k + 1 {
            return Err(Error::InsufficientClass {
                class,
                found: members.len(),
                needed: k + 1,
            });
        }
    }
    let mut is_train = vec![false; labels.len()];
    for members in classes.values() {
        for j in sample_indices(members.len(), k, rng)? {
            is_train[members[j]] = true;
        }
    }
    let train = (0..labels.len()).filter(|&i| is_train[i]).collect();
    let test = (0..labels.len()).filter(|&i| !is_train[i]).collect();
    Ok((train, test))
}

/// Fold index per example, stratified by label.
///
/// Without groups, each class is shuffled and dealt round-robin, the deal
/// continuing where the previous class stopped so fold sizes stay within one
/// of each other. With groups, whole groups are dealt instead: each group is
/// stratified by its majority label and goes to the fold currently holding
/// the fewest examples of that label (ties: fewest examples overall, then
/// lowest fold index), largest groups first.
pub fn stratified_folds(labels: &[usize], groups: Option<&[usize]>, n_folds: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(Error::config("n_folds", "must be at least 2"));
    }
    let classes = by_class(labels);
    for (class, members) in &classes {
        if members.len() < n_folds {
            log::warn!("class {class} has {} examples for {n_folds} folds", members.len());
        }
    }
    let mut fold = vec![0; labels.len()];
    let Some(groups) = groups else {
        let mut next = 0;
        for members in classes.values() {
            let mut members = members.clone();
            rng.shuffle(&mut members);
            for i in members {
                fold[i] = next % n_folds;
                next += 1;
            }
        }
        return Ok(fold);
    };

    if groups.len() != labels.len() {
        return Err(Error::dims("stratified_folds", labels.len(), groups.len()));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut units: Vec<(usize, Vec<usize>)> = members
        .into_values()
        .map(|idx| {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &i in &idx {
                *counts.entry(labels[i]).or_default() += 1;
            }
            // majority label, lowest label on ties
            let label = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&l, _)| l).unwrap_or(0);
            (label, idx)
        })
        .collect();
    rng.shuffle(&mut units);
    units.sort_by(|a, b| b.1.len().cmp(&a.1.len()));

    let n_labels = classes.keys().next_back().map_or(0, |&c| c + 1);
    let mut per_label = vec![vec![0usize; n_folds]; n_labels];
    let mut totals = vec![0usize; n_folds];
    for (label, idx) in units {
        let f = (0..n_folds)
            .min_by_key(|&f| (per_label[label][f], totals[f], f))
            .expect("n_folds >= 2");
        for &i in &idx {
            fold[i] = f;
            per_label[labels[i]][f] += 1;
        }
        totals[f] += idx.len();
    }
    Ok(fold)
}
