use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{derived_rng, Dataset, Sample};
use crate::error::{Error, Result};

const SPLIT_STREAM: u64 = 4;
pub const NUM_FOLDS: usize = 5;
pub const TEST_FRACTION: f64 = 0.1;

/// Held-out test ids plus a five-fold partition of the remaining ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub test: Vec<String>,
    /// `folds[k]` is the validation set of fold `k`.
    pub folds: Vec<Vec<String>>,
}

impl SplitPlan {
    pub fn num_folds(&self) -> usize {
        self.folds.len()
    }

    pub fn validation(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Every non-test id outside fold `fold`.
    pub fn train(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != fold)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect()
    }
}

/// Stratified 10% test hold-out and 5-fold partition of the rest.
///
/// Strata are (label, subgroup) cells; when any subgroup has fewer than five
/// samples the split falls back to label-only strata.
pub fn make_splits(dataset: &Dataset, seed: u64) -> Result<SplitPlan> {
    let n = dataset.len();
    if n < 50 {
        return Err(Error::Data(format!("need at least 50 samples to split, got {n}")));
    }
    let mut per_subgroup: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &dataset.samples {
        *per_subgroup.entry(s.subgroup).or_default() += 1;
    }
    let joint = per_subgroup.values().all(|&c| c >= 5);
    if !joint {
        log::warn!("a subgroup has fewer than 5 samples; stratifying by label only");
    }
    let key = |s: &Sample| -> (u8, usize) {
        if joint {
            (s.label, s.subgroup)
        } else {
            (s.label, 0)
        }
    };
    let mut strata: BTreeMap<(u8, usize), Vec<&str>> = BTreeMap::new();
    for s in &dataset.samples {
        strata.entry(key(s)).or_default().push(&s.id);
    }
    for (i, members) in strata.values_mut().enumerate() {
        members.sort_unstable();
        members.shuffle(&mut derived_rng(seed, SPLIT_STREAM, i as u64));
    }

    // Largest-remainder allocation of the test quota across strata.
    let total_test = (n as f64 * TEST_FRACTION).round() as usize;
    let quotas: Vec<f64> = strata
        .values()
        .map(|m| m.len() as f64 * total_test as f64 / n as f64)
        .collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut remaining = total_test - alloc.iter().sum::<usize>();
    for &i in &order {
        if remaining == 0 {
            break;
        }
        alloc[i] += 1;
        remaining -= 1;
    }

    let mut test = Vec::with_capacity(total_test);
    let mut folds = vec![Vec::new(); NUM_FOLDS];
    let mut next_fold = 0;
    for (members, take) in strata.values().zip(alloc) {
        test.extend(members[..take].iter().map(|s| s.to_string()));
        for id in &members[take..] {
            folds[next_fold].push(id.to_string());
            next_fold = (next_fold + 1) % NUM_FOLDS;
        }
    }
    Ok(SplitPlan { test, folds })
}

/// One line per id: `id,test` or `id,<fold index>`.
pub fn write_split_plan(path: &Path, plan: &SplitPlan) -> Result<()> {
    let mut text = String::from("id,assignment\n");
    for id in &plan.test {
        text.push_str(&format!("{id},test\n"));
    }
    for (k, ids) in plan.folds.iter().enumerate() {
        for id in ids {
            text.push_str(&format!("{id},{k}\n"));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_split_plan(path: &Path) -> Result<SplitPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut test = Vec::new();
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); NUM_FOLDS];
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Data(format!("{}:{}: {message}", path.display(), i + 1));
        let (id, assignment) = line
            .split_once(',')
            .ok_or_else(|| bad("expected `id,assignment`".into()))?;
        if !seen.insert(id.to_string()) {
            return Err(bad(format!("id {id} assigned twice")));
        }
        if assignment == "test" {
            test.push(id.to_string());
        } else {
            let k: usize = assignment
                .parse()
                .ok()
                .filter(|k| *k < NUM_FOLDS)
                .ok_or_else(|| bad(format!("bad assignment {assignment:?}")))?;
            folds[k].push(id.to_string());
        }
    }
    Ok(SplitPlan { test, folds })
}
