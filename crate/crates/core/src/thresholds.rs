//! Prediction logs and per-subgroup decision thresholds.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::GroupingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub probability: f64,
    pub label: u8,
    pub subgroup: usize,
    pub fold: usize,
}

/// Scored samples of one partition of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLog {
    pub fold: usize,
    pub partition: Partition,
    pub num_attributes: usize,
    pub rows: Vec<PredictionRow>,
}

impl PredictionLog {
    pub fn validate(&self) -> Result<()> {
        let groups = 1usize << self.num_attributes;
        for r in &self.rows {
            if !r.probability.is_finite() || !(0.0..=1.0).contains(&r.probability) {
                return Err(Error::Data(format!(
                    "row {}: probability {} outside [0, 1]",
                    r.id, r.probability
                )));
            }
            if r.subgroup >= groups {
                return Err(Error::Data(format!(
                    "row {}: subgroup {} outside [0, {groups})",
                    r.id, r.subgroup
                )));
            }
            if r.label > 1 || r.fold != self.fold {
                return Err(Error::Data(format!("row {}: bad label or fold id", r.id)));
            }
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.probability).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Comma-separated `sample_id,probability,label,subgroup,fold`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = format!(
            "# partition={} num_attributes={}\nsample_id,probability,label,subgroup,fold\n",
            self.partition, self.num_attributes
        );
        for r in &self.rows {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id, r.probability, r.label, r.subgroup, r.fold
            ));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, m: &str| Error::Data(format!("{}:{line}: {m}", path.display()));
        let mut lines = text.lines();
        let meta = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        let mut partition = None;
        let mut num_attributes = None;
        for kv in meta.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("partition", v)) => {
                    partition = Some(match v {
                        "train" => Partition::Train,
                        "val" => Partition::Val,
                        "test" => Partition::Test,
                        _ => return Err(bad(1, "unknown partition")),
                    })
                }
                Some(("num_attributes", v)) => {
                    num_attributes = Some(v.parse().map_err(|_| bad(1, "bad num_attributes"))?)
                }
                _ => {}
            }
        }
        let partition = partition.ok_or_else(|| bad(1, "missing partition"))?;
        let num_attributes = num_attributes.ok_or_else(|| bad(1, "missing num_attributes"))?;
        lines.next();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 3, "expected 5 fields"));
            }
            let parse_err = || bad(i + 3, "unparseable field");
            rows.push(PredictionRow {
                id: f[0].to_string(),
                probability: f[1].parse().map_err(|_| parse_err())?,
                label: f[2].parse().map_err(|_| parse_err())?,
                subgroup: f[3].parse().map_err(|_| parse_err())?,
                fold: f[4].parse().map_err(|_| parse_err())?,
            });
        }
        let fold = rows.first().map(|r| r.fold).unwrap_or(0);
        let log = PredictionLog {
            fold,
            partition,
            num_attributes,
            rows,
        };
        log.validate()?;
        Ok(log)
    }
}

/// Confusion counts at one threshold; rates are `None` when a class is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Confusion {
    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn tnr(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        self.tnr().map(|v| 1.0 - v)
    }

    pub fn fnr(&self) -> Option<f64> {
        self.tpr().map(|v| 1.0 - v)
    }
}

/// Rates for rows predicted positive iff `probability > threshold`.
pub fn confusion_rates<'a, I>(rows: I, threshold: f64) -> Confusion
where
    I: IntoIterator<Item = &'a PredictionRow>,
{
    let mut c = Confusion {
        tp: 0,
        fn_: 0,
        tn: 0,
        fp: 0,
    };
    for r in rows {
        match (r.label == 1, r.probability > threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fp += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MinGap,
    Youden,
    Gmeans,
    Default,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::MinGap,
        Strategy::Youden,
        Strategy::Gmeans,
        Strategy::Default,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::MinGap => "min_gap",
            Strategy::Youden => "youden",
            Strategy::Gmeans => "gmeans",
            Strategy::Default => "default",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min_gap" => Ok(Strategy::MinGap),
            "youden" => Ok(Strategy::Youden),
            "gmeans" => Ok(Strategy::Gmeans),
            "default" => Ok(Strategy::Default),
            other => Err(Error::Config(format!("unknown threshold strategy {other:?}"))),
        }
    }
}

pub fn default_threshold() -> f64 {
    0.5
}

/// `{0, 1}` plus the midpoints of consecutive distinct probabilities, ascending.
pub fn candidate_thresholds(probabilities: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = probabilities.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut c = Vec::with_capacity(v.len() + 1);
    c.push(0.0);
    c.extend(v.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    c.push(1.0);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Integer score of a candidate; larger is better. All candidates of one
/// fit share the class totals, so rates compare exactly via their numerators.
fn score(strategy: Strategy, c: &Confusion) -> i128 {
    let (tp, tn) = (c.tp as i128, c.tn as i128);
    let p = (c.tp + c.fn_) as i128;
    let n = (c.tn + c.fp) as i128;
    match strategy {
        Strategy::MinGap => -(tp * n - tn * p).abs(),
        Strategy::Youden => tp * n + tn * p,
        Strategy::Gmeans => tp * tn,
        Strategy::Default => 0,
    }
}

/// Whether candidate `a` wins a score tie against `b`: closer to 0.5, then smaller.
pub fn tie_break_prefers(a: f64, b: f64) -> bool {
    let (da, db) = ((a - 0.5).abs(), (b - 0.5).abs());
    da < db || (da == db && a < b)
}

/// Optimal threshold over the candidate set for rows holding both classes.
fn sweep(strategy: Strategy, rows: &[&PredictionRow]) -> Option<f64> {
    if strategy == Strategy::Default {
        return Some(default_threshold());
    }
    let positives = rows.iter().filter(|r| r.label == 1).count();
    let negatives = rows.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut sorted: Vec<(f64, u8)> = rows.iter().map(|r| (r.probability, r.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Distinct values with cumulative class counts at or below each.
    let mut values: Vec<f64> = Vec::new();
    let mut pos_le: Vec<usize> = Vec::new();
    let mut neg_le: Vec<usize> = Vec::new();
    let (mut pc, mut nc) = (0, 0);
    for (i, &(p, label)) in sorted.iter().enumerate() {
        if label == 1 {
            pc += 1;
        } else {
            nc += 1;
        }
        if i + 1 == sorted.len() || sorted[i + 1].0 != p {
            values.push(p);
            pos_le.push(pc);
            neg_le.push(nc);
        }
    }
    let confusion_at = |le_pos: usize, le_neg: usize| Confusion {
        tp: positives - le_pos,
        fn_: le_pos,
        tn: le_neg,
        fp: negatives - le_neg,
    };
    let mut candidates: Vec<(f64, Confusion)> = Vec::with_capacity(values.len() + 1);
    let (z_pos, z_neg) = if values[0] <= 0.0 {
        (pos_le[0], neg_le[0])
    } else {
        (0, 0)
    };
    candidates.push((0.0, confusion_at(z_pos, z_neg)));
    for i in 0..values.len() - 1 {
        let mid = (values[i] + values[i + 1]) / 2.0;
        candidates.push((mid, confusion_at(pos_le[i], neg_le[i])));
    }
    candidates.push((1.0, confusion_at(positives, negatives)));

    let mut best: Option<(f64, i128)> = None;
    for (theta, conf) in candidates {
        let s = score(strategy, &conf);
        best = match best {
            None => Some((theta, s)),
            Some((bt, bs)) if s > bs || (s == bs && tie_break_prefers(theta, bt)) => {
                Some((theta, s))
            }
            keep => keep,
        };
    }
    best.map(|(t, _)| t)
}

/// Threshold for a set of rows; falls back to `fallback` (with a warning)
/// when the rows lack one of the classes.
fn fit_rows(strategy: Strategy, rows: &[&PredictionRow], fallback: f64, what: &str) -> (f64, bool) {
    match sweep(strategy, rows) {
        Some(t) => (t, false),
        None => {
            log::warn!("{what} holds a single class; using fallback threshold {fallback}");
            (fallback, true)
        }
    }
}

fn global_threshold(strategy: Strategy, log: &PredictionLog) -> f64 {
    let rows: Vec<&PredictionRow> = log.rows.iter().collect();
    fit_rows(strategy, &rows, default_threshold(), "the whole log").0
}

fn fit_group(strategy: Strategy, log: &PredictionLog, subgroup: usize) -> f64 {
    let rows: Vec<&PredictionRow> = log.rows.iter().filter(|r| r.subgroup == subgroup).collect();
    let fallback = global_threshold(strategy, log);
    fit_rows(strategy, &rows, fallback, &format!("subgroup {subgroup}")).0
}

/// Threshold minimizing |TPR − TNR| within `subgroup`.
pub fn fit_min_gap(log: &PredictionLog, subgroup: usize) -> f64 {
    fit_group(Strategy::MinGap, log, subgroup)
}

/// Threshold maximizing TPR + TNR − 1 within `subgroup`.
pub fn fit_youden(log: &PredictionLog, subgroup: usize) -> f64 {
    fit_group(Strategy::Youden, log, subgroup)
}

/// Threshold maximizing √(TPR·TNR) within `subgroup`.
pub fn fit_gmeans(log: &PredictionLog, subgroup: usize) -> f64 {
    fit_group(Strategy::Gmeans, log, subgroup)
}

/// Per-group thresholds with a global fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub strategy: Strategy,
    pub grouping: GroupingMode,
    pub fold: usize,
    pub fallback: f64,
    pub thresholds: BTreeMap<usize, f64>,
}

impl ThresholdMap {
    pub fn uniform(theta: f64, fold: usize) -> Self {
        Self {
            strategy: Strategy::Default,
            grouping: GroupingMode::Intersectional,
            fold,
            fallback: theta,
            thresholds: BTreeMap::new(),
        }
    }

    pub fn threshold_for_group(&self, group: usize) -> f64 {
        self.thresholds.get(&group).copied().unwrap_or(self.fallback)
    }

    /// Writes the strategy, fallback and one `group,theta` line per entry.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = format!(
            "strategy = {}\ngrouping = {}\nfold = {}\nfallback = {}\nsubgroup_id,theta\n",
            self.strategy, self.grouping, self.fold, self.fallback
        );
        for (g, t) in &self.thresholds {
            text.push_str(&format!("{g},{t}\n"));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
        let mut header: BTreeMap<&str, &str> = BTreeMap::new();
        let mut thresholds = BTreeMap::new();
        let mut in_table = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line == "subgroup_id,theta" {
                in_table = true;
            } else if in_table {
                let (g, t) = line
                    .split_once(',')
                    .ok_or_else(|| bad(format!("bad line {line:?}")))?;
                thresholds.insert(
                    g.parse().map_err(|_| bad(format!("bad subgroup {g:?}")))?,
                    t.parse().map_err(|_| bad(format!("bad theta {t:?}")))?,
                );
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad header line {line:?}")))?;
                header.insert(k.trim(), v.trim());
            }
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        Ok(Self {
            strategy: get("strategy")?.parse()?,
            grouping: get("grouping")?.parse()?,
            fold: get("fold")?.parse().map_err(|_| bad("bad fold".into()))?,
            fallback: get("fallback")?.parse().map_err(|_| bad("bad fallback".into()))?,
            thresholds,
        })
    }
}

/// Fits one threshold per group present in a training log.
pub fn fit_threshold_map(
    log: &PredictionLog,
    strategy: Strategy,
    grouping: &GroupingMode,
) -> Result<ThresholdMap> {
    if log.partition != Partition::Train {
        return Err(Error::Data(format!(
            "thresholds must be fit on training rows, got a {} log",
            log.partition
        )));
    }
    log.validate()?;
    let fallback = global_threshold(strategy, log);
    let mut groups: BTreeMap<usize, Vec<&PredictionRow>> = BTreeMap::new();
    for r in &log.rows {
        groups
            .entry(grouping.group_of(r.subgroup, log.num_attributes))
            .or_default()
            .push(r);
    }
    let mut thresholds = BTreeMap::new();
    for (g, rows) in groups {
        let (t, fell_back) = fit_rows(strategy, &rows, fallback, &format!("group {g}"));
        if !fell_back {
            thresholds.insert(g, t);
        }
    }
    Ok(ThresholdMap {
        strategy,
        grouping: grouping.clone(),
        fold: log.fold,
        fallback,
        thresholds,
    })
}

/// Hard predictions `probability > θ_group` for a validation or test log.
pub fn apply_thresholds(log: &PredictionLog, map: &ThresholdMap) -> Result<Vec<u8>> {
    if log.partition == Partition::Train {
        return Err(Error::Data(
            "thresholds are applied to validation or test rows only".into(),
        ));
    }
    if log.fold != map.fold {
        return Err(Error::Data(format!(
            "threshold map of fold {} applied to a fold-{} log",
            map.fold, log.fold
        )));
    }
    Ok(predict_with(log, map))
}

pub(crate) fn predict_with(log: &PredictionLog, map: &ThresholdMap) -> Vec<u8> {
    log.rows
        .iter()
        .map(|r| {
            let g = map.grouping.group_of(r.subgroup, log.num_attributes);
            u8::from(r.probability > map.threshold_for_group(g))
        })
        .collect()
}

/// `(threshold, TPR, TNR)` at every candidate, for plotting.
pub fn threshold_sweep(rows: &[&PredictionRow]) -> Vec<(f64, f64, f64)> {
    let probs: Vec<f64> = rows.iter().map(|r| r.probability).collect();
    candidate_thresholds(&probs)
        .into_iter()
        .filter_map(|t| {
            let c = confusion_rates(rows.iter().copied(), t);
            Some((t, c.tpr()?, c.tnr()?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(probs: &[f64], labels: &[u8], subgroup: usize) -> Vec<PredictionRow> {
        probs
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&p, &l))| PredictionRow {
                id: format!("r{subgroup}_{i}"),
                probability: p,
                label: l,
                subgroup,
                fold: 0,
            })
            .collect()
    }

    fn train_log(rows: Vec<PredictionRow>) -> PredictionLog {
        PredictionLog {
            fold: 0,
            partition: Partition::Train,
            num_attributes: 2,
            rows,
        }
    }

    /// Exhaustive oracle: scores every candidate by direct counting with
    /// exact rational comparison.
    fn brute_force(strategy: Strategy, rows: &[PredictionRow]) -> f64 {
        let probs: Vec<f64> = rows.iter().map(|r| r.probability).collect();
        let mut best: Option<(f64, i128)> = None;
        let p = rows.iter().filter(|r| r.label == 1).count() as i128;
        let n = rows.len() as i128 - p;
        for t in candidate_thresholds(&probs) {
            let mut tp = 0i128;
            let mut tn = 0i128;
            for r in rows {
                let pred = r.probability > t;
                if r.label == 1 && pred {
                    tp += 1;
                }
                if r.label == 0 && !pred {
                    tn += 1;
                }
            }
            let s = match strategy {
                Strategy::MinGap => -(tp * n - tn * p).abs(),
                Strategy::Youden => tp * n + tn * p,
                Strategy::Gmeans => tp * tn,
                Strategy::Default => 0,
            };
            let better = match best {
                None => true,
                Some((bt, bs)) => s > bs || (s == bs && tie_break_prefers(t, bt)),
            };
            if better {
                best = Some((t, s));
            }
        }
        best.unwrap().0
    }

    #[test]
    fn confusion_examples() {
        let r = rows(&[0.1, 0.4, 0.6, 0.9], &[0, 0, 1, 1], 0);
        let c = confusion_rates(&r, 0.5);
        assert_eq!((c.tpr(), c.tnr()), (Some(1.0), Some(1.0)));
        let c = confusion_rates(&r, 1.0);
        assert_eq!(c.tpr(), Some(0.0));
        let pos = rows(&[0.2, 0.7], &[1, 1], 0);
        let c = confusion_rates(&pos, 0.0);
        assert_eq!(c.tpr(), Some(1.0));
        assert_eq!(c.tnr(), None);
        // ties at the threshold are negative
        let c = confusion_rates(&rows(&[0.5], &[1], 0), 0.5);
        assert_eq!(c.tp, 0);
    }

    #[test]
    fn four_row_example_for_every_fitter() {
        let log = train_log(rows(&[0.1, 0.4, 0.6, 0.9], &[0, 0, 1, 1], 1));
        assert_eq!(fit_min_gap(&log, 1), 0.5);
        assert_eq!(fit_youden(&log, 1), 0.5);
        assert_eq!(fit_gmeans(&log, 1), 0.5);
        assert_eq!(default_threshold(), 0.5);
        assert_eq!(candidate_thresholds(&log.probabilities()).len(), 5);
    }

    #[test]
    fn separated_subgroup_picks_candidate_nearest_half() {
        let log = train_log(rows(&[0.05, 0.1, 0.2, 0.8, 0.85], &[0, 0, 0, 1, 1], 0));
        assert_eq!(fit_min_gap(&log, 0), 0.5);
        let log = train_log(rows(&[0.05, 0.1, 0.2, 0.3, 0.35], &[0, 0, 0, 1, 1], 0));
        assert_eq!(fit_min_gap(&log, 0), 0.25);
    }

    #[test]
    fn single_class_subgroup_falls_back_to_global() {
        let mut r = rows(&[0.1, 0.3, 0.7, 0.9], &[0, 0, 1, 1], 0);
        r.extend(rows(&[0.2, 0.6], &[1, 1], 3));
        let log = train_log(r);
        let global = {
            let all: Vec<&PredictionRow> = log.rows.iter().collect();
            sweep(Strategy::MinGap, &all).unwrap()
        };
        assert_eq!(fit_min_gap(&log, 3), global);
        let map = fit_threshold_map(&log, Strategy::MinGap, &GroupingMode::Intersectional).unwrap();
        assert!(!map.thresholds.contains_key(&3));
        assert_eq!(map.threshold_for_group(3), global);
    }

    #[test]
    fn fitters_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..1000 {
            let n = rng.random_range(2..40);
            let coarse = case % 3 == 0;
            let mut r: Vec<PredictionRow> = (0..n)
                .map(|i| {
                    let p = if coarse {
                        rng.random_range(0..6) as f64 / 5.0
                    } else {
                        rng.random::<f64>()
                    };
                    PredictionRow {
                        id: i.to_string(),
                        probability: p,
                        label: rng.random_range(0..2),
                        subgroup: 0,
                        fold: 0,
                    }
                })
                .collect();
            r[0].label = 0;
            r[1].label = 1;
            let refs: Vec<&PredictionRow> = r.iter().collect();
            for s in [Strategy::MinGap, Strategy::Youden, Strategy::Gmeans] {
                assert_eq!(sweep(s, &refs).unwrap(), brute_force(s, &r), "case {case} {s}");
            }
        }
    }

    #[test]
    fn round_trip_reaches_fitted_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut all = Vec::new();
        for g in 0..4 {
            let probs: Vec<f64> = (0..50).map(|_| rng.random()).collect();
            let labels: Vec<u8> = probs
                .iter()
                .map(|&p| u8::from(rng.random::<f64>() < p))
                .collect();
            all.extend(rows(&probs, &labels, g));
        }
        let train = train_log(all);
        let map = fit_threshold_map(&train, Strategy::MinGap, &GroupingMode::Intersectional).unwrap();
        let val = PredictionLog {
            partition: Partition::Val,
            ..train.clone()
        };
        let preds = apply_thresholds(&val, &map).unwrap();
        for g in 0..4 {
            let (mut tp, mut p, mut tn, mut n) = (0, 0, 0, 0);
            for (r, &y) in val.rows.iter().zip(&preds) {
                if r.subgroup != g {
                    continue;
                }
                if r.label == 1 {
                    p += 1;
                    tp += y as usize;
                } else {
                    n += 1;
                    tn += 1 - y as usize;
                }
            }
            let gap = (tp as f64 / p as f64 - tn as f64 / n as f64).abs();
            let group_rows: Vec<&PredictionRow> = train.rows.iter().filter(|r| r.subgroup == g).collect();
            let best = candidate_thresholds(&group_rows.iter().map(|r| r.probability).collect::<Vec<_>>())
                .into_iter()
                .map(|t| {
                    let c = confusion_rates(group_rows.iter().copied(), t);
                    (c.tpr().unwrap() - c.tnr().unwrap()).abs()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((gap - best).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_boundaries_and_locality() {
        let mut r = rows(&[0.0, 0.2, 0.7], &[0, 1, 1], 0);
        r.extend(rows(&[0.1, 0.6, 0.9], &[0, 0, 1], 1));
        let val = PredictionLog {
            fold: 0,
            partition: Partition::Test,
            num_attributes: 2,
            rows: r,
        };
        let zero = ThresholdMap::uniform(0.0, 0);
        assert_eq!(apply_thresholds(&val, &zero).unwrap(), vec![0, 1, 1, 1, 1, 1]);
        let uniform = ThresholdMap::uniform(0.5, 0);
        let mut per = uniform.clone();
        per.thresholds.insert(1, 0.95);
        let a = apply_thresholds(&val, &uniform).unwrap();
        let b = apply_thresholds(&val, &per).unwrap();
        assert_eq!(&a[..3], &b[..3]);
        assert_ne!(&a[3..], &b[3..]);
    }

    #[test]
    fn partition_and_fold_checks() {
        let train = train_log(rows(&[0.1, 0.9], &[0, 1], 0));
        let map = fit_threshold_map(&train, Strategy::MinGap, &GroupingMode::Intersectional).unwrap();
        assert!(apply_thresholds(&train, &map).is_err());
        let val = PredictionLog {
            partition: Partition::Val,
            ..train.clone()
        };
        assert!(fit_threshold_map(&val, Strategy::MinGap, &GroupingMode::Intersectional).is_err());
        let mut other = map.clone();
        other.fold = 3;
        assert!(apply_thresholds(&val, &other).is_err());
    }

    #[test]
    fn per_attribute_grouping() {
        // subgroups 0b00 and 0b01 share attribute 0 = 0.
        let mut r = rows(&[0.1, 0.9], &[0, 1], 0);
        r.extend(rows(&[0.2, 0.8], &[0, 1], 1));
        r.extend(rows(&[0.3, 0.95], &[0, 1], 2));
        let log = train_log(r);
        let map = fit_threshold_map(&log, Strategy::MinGap, &GroupingMode::PerAttribute(0)).unwrap();
        assert_eq!(map.thresholds.len(), 2);
    }

    #[test]
    fn map_and_log_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = train_log(rows(&[0.1, 0.35, 0.6, 0.9], &[0, 1, 0, 1], 2));
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        assert_eq!(PredictionLog::read_csv(&p).unwrap(), log);
        let map = fit_threshold_map(&log, Strategy::Youden, &GroupingMode::PerAttribute(1)).unwrap();
        let p = dir.path().join("thr.txt");
        map.write(&p).unwrap();
        assert_eq!(ThresholdMap::read(&p).unwrap(), map);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_positives(seed in 0u64..1000, t1 in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs: Vec<f64> = (0..30).map(|_| rng.random()).collect();
            let labels: Vec<u8> = (0..30).map(|_| rng.random_range(0..2)).collect();
            let r = rows(&probs, &labels, 0);
            let lo = confusion_rates(&r, t1);
            let hi = confusion_rates(&r, t1 + dt);
            prop_assert!(hi.tp + hi.fp <= lo.tp + lo.fp);
        }
    }
}
