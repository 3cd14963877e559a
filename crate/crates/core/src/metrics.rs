//! Accuracy, AUC, subgroup disparities, FATE scores and fold reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::thresholds::{apply_thresholds, PredictionLog, ThresholdMap};

/// How subgroup ids are grouped for thresholds and disparities.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    /// All `2^d_a` attribute intersections.
    #[default]
    Intersectional,
    /// The two values of a single attribute, by index.
    PerAttribute(usize),
}

impl GroupingMode {
    /// Resolves `intersectional` or an attribute name against `names`.
    pub fn parse(spec: &str, names: &[String]) -> Result<Self> {
        if spec == "intersectional" {
            return Ok(GroupingMode::Intersectional);
        }
        let name = spec.strip_prefix("per_attribute:").unwrap_or(spec);
        names
            .iter()
            .position(|n| n == name)
            .map(GroupingMode::PerAttribute)
            .ok_or_else(|| Error::Config(format!("grouping names unknown attribute {name:?}")))
    }

    pub fn group_of(&self, subgroup: usize, num_attributes: usize) -> usize {
        match *self {
            GroupingMode::Intersectional => subgroup,
            GroupingMode::PerAttribute(i) => (subgroup >> (num_attributes - 1 - i)) & 1,
        }
    }
}

impl fmt::Display for GroupingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupingMode::Intersectional => f.write_str("intersectional"),
            GroupingMode::PerAttribute(i) => write!(f, "per_attribute:{i}"),
        }
    }
}

impl FromStr for GroupingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "intersectional" {
            return Ok(GroupingMode::Intersectional);
        }
        s.strip_prefix("per_attribute:")
            .and_then(|i| i.parse().ok())
            .map(GroupingMode::PerAttribute)
            .ok_or_else(|| Error::Config(format!("bad grouping {s:?}")))
    }
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "accuracy needs aligned nonempty inputs, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mann–Whitney AUC with average ranks for tied scores.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Undefined("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let rank = (i + j + 2) as f64 / 2.0;
        let tied_positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        positive_rank_sum += rank * tied_positives as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Row indices per group, keeping only groups that hold both classes.
fn valid_groups(
    labels: &[u8],
    subgroups: &[usize],
    num_attributes: usize,
    grouping: &GroupingMode,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in subgroups.iter().enumerate() {
        groups.entry(grouping.group_of(s, num_attributes)).or_default().push(i);
    }
    groups.retain(|g, rows| {
        let pos = rows.iter().filter(|&&i| labels[i] == 1).count();
        let keep = pos > 0 && pos < rows.len();
        if !keep {
            log::warn!("group {g} holds a single class; excluded from disparity");
        }
        keep
    });
    if groups.len() < 2 {
        return Err(Error::Undefined(format!(
            "disparity needs at least 2 groups with both classes, found {}",
            groups.len()
        )));
    }
    Ok(groups)
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    hi - lo
}

/// Largest pairwise gap in per-group AUC.
pub fn delta_auc(log: &PredictionLog, grouping: &GroupingMode) -> Result<f64> {
    let labels = log.labels();
    let subgroups: Vec<usize> = log.rows.iter().map(|r| r.subgroup).collect();
    let groups = valid_groups(&labels, &subgroups, log.num_attributes, grouping)?;
    let mut aucs = Vec::with_capacity(groups.len());
    for rows in groups.values() {
        let s: Vec<f64> = rows.iter().map(|&i| log.rows[i].probability).collect();
        let l: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
        aucs.push(auc(&s, &l)?);
    }
    Ok(spread(aucs.into_iter()))
}

/// Largest gap, over `y ∈ {0, 1}` and group pairs, in `P(ŷ = 1 | y, group)`.
pub fn delta_eo(
    predictions: &[u8],
    labels: &[u8],
    subgroups: &[usize],
    num_attributes: usize,
    grouping: &GroupingMode,
) -> Result<f64> {
    if predictions.len() != labels.len() || labels.len() != subgroups.len() {
        return Err(Error::Shape("delta_eo inputs are not aligned".into()));
    }
    let groups = valid_groups(labels, subgroups, num_attributes, grouping)?;
    let mut worst: f64 = 0.0;
    for y in [0u8, 1] {
        let rates = groups.values().map(|rows| {
            let cond: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == y).collect();
            cond.iter().filter(|&&i| predictions[i] == 1).count() as f64 / cond.len() as f64
        });
        worst = worst.max(spread(rates));
    }
    Ok(worst)
}

/// Which performance/disparity pair a FATE score compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FateKind {
    /// Accuracy against Δ_EO.
    Eo,
    /// AUC against Δ_AUC.
    Auc,
}

/// Relative performance gain minus relative disparity change against a reference.
///
/// `measured` and `reference` are `(performance, disparity)` pairs.
pub fn fate(measured: (f64, f64), reference: (f64, f64), kind: FateKind) -> Result<f64> {
    let (perf, disp) = measured;
    let (ref_perf, ref_disp) = reference;
    if ref_perf == 0.0 || ref_disp == 0.0 {
        return Err(Error::Undefined(format!(
            "FATE ({kind:?}) undefined for a zero reference ({ref_perf}, {ref_disp})"
        )));
    }
    Ok((perf - ref_perf) / ref_perf - (disp - ref_disp) / ref_disp)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupBreakdown {
    pub group: usize,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub delta_auc: f64,
    pub delta_eo: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fate_eo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fate_auc: Option<f64>,
    pub subgroups: Vec<SubgroupBreakdown>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: Summary,
    pub auc: Summary,
    pub delta_auc: Summary,
    pub delta_eo: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fate_eo: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fate_auc: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub tag: String,
    pub strategy: String,
    pub grouping: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub aggregate: Aggregate,
    pub folds: Vec<FoldMetrics>,
}

/// Logs and threshold maps of one method, one entry per fold.
#[derive(Debug, Clone, Copy)]
pub struct MethodLogs<'a> {
    pub name: &'a str,
    pub test_logs: &'a [PredictionLog],
    pub maps: &'a [ThresholdMap],
}

fn fold_metrics(
    log: &PredictionLog,
    map: &ThresholdMap,
    grouping: &GroupingMode,
) -> Result<FoldMetrics> {
    let predictions = apply_thresholds(log, map)?;
    let labels = log.labels();
    let subgroups: Vec<usize> = log.rows.iter().map(|r| r.subgroup).collect();
    let mut per_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in subgroups.iter().enumerate() {
        per_group.entry(grouping.group_of(s, log.num_attributes)).or_default().push(i);
    }
    let subgroup_rows = per_group
        .iter()
        .map(|(&group, rows)| {
            let s: Vec<f64> = rows.iter().map(|&i| log.rows[i].probability).collect();
            let l: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
            let rate = |y: u8| {
                let cond: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == y).collect();
                (!cond.is_empty()).then(|| {
                    cond.iter().filter(|&&i| predictions[i] == 1).count() as f64
                        / cond.len() as f64
                })
            };
            SubgroupBreakdown {
                group,
                count: rows.len(),
                auc: auc(&s, &l).ok(),
                tpr: rate(1),
                fpr: rate(0),
            }
        })
        .collect();
    Ok(FoldMetrics {
        fold: log.fold,
        accuracy: accuracy(&predictions, &labels)?,
        auc: auc(&log.probabilities(), &labels)?,
        delta_auc: delta_auc(log, grouping)?,
        delta_eo: delta_eo(&predictions, &labels, &subgroups, log.num_attributes, grouping)?,
        fate_eo: None,
        fate_auc: None,
        subgroups: subgroup_rows,
    })
}

/// Per-fold test metrics plus mean ± std; FATE appears only with a reference.
pub fn build_report(
    method: MethodLogs<'_>,
    reference: Option<MethodLogs<'_>>,
    grouping: &GroupingMode,
    tag: &str,
) -> Result<MetricsReport> {
    if method.test_logs.len() != method.maps.len() || method.test_logs.is_empty() {
        return Err(Error::Data(format!(
            "{}: {} test logs for {} threshold maps",
            method.name,
            method.test_logs.len(),
            method.maps.len()
        )));
    }
    let mut folds = Vec::with_capacity(method.test_logs.len());
    for (log, map) in method.test_logs.iter().zip(method.maps) {
        folds.push(fold_metrics(log, map, grouping)?);
    }
    if let Some(r) = reference {
        if r.test_logs.len() != r.maps.len() {
            return Err(Error::Data("reference logs and maps differ in count".into()));
        }
        for f in &mut folds {
            let idx = r
                .test_logs
                .iter()
                .position(|l| l.fold == f.fold)
                .ok_or_else(|| Error::Data(format!("reference {} lacks fold {}", r.name, f.fold)))?;
            let rm = fold_metrics(&r.test_logs[idx], &r.maps[idx], grouping)?;
            f.fate_eo = Some(fate(
                (f.accuracy, f.delta_eo),
                (rm.accuracy, rm.delta_eo),
                FateKind::Eo,
            )?);
            f.fate_auc = Some(fate(
                (f.auc, f.delta_auc),
                (rm.auc, rm.delta_auc),
                FateKind::Auc,
            )?);
        }
    }
    let col = |get: fn(&FoldMetrics) -> f64| Summary::of(&folds.iter().map(get).collect::<Vec<_>>());
    let opt = |get: fn(&FoldMetrics) -> Option<f64>| {
        folds
            .iter()
            .map(get)
            .collect::<Option<Vec<f64>>>()
            .map(|v| Summary::of(&v))
    };
    let aggregate = Aggregate {
        accuracy: col(|f| f.accuracy),
        auc: col(|f| f.auc),
        delta_auc: col(|f| f.delta_auc),
        delta_eo: col(|f| f.delta_eo),
        fate_eo: opt(|f| f.fate_eo),
        fate_auc: opt(|f| f.fate_auc),
    };
    Ok(MetricsReport {
        method: method.name.to_string(),
        tag: tag.to_string(),
        strategy: method.maps[0].strategy.to_string(),
        grouping: grouping.to_string(),
        reference: reference.map(|r| r.name.to_string()),
        aggregate,
        folds,
    })
}

pub const SUMMARY_HEADER: &str =
    "method,tag,strategy,fold,accuracy,auc,delta_auc,delta_eo,fate_eo,fate_auc";

impl MetricsReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("report serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Data(format!("report parse: {e}")))
    }

    /// One CSV line per fold plus `mean` and `std` lines, without header.
    pub fn summary_rows(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let prefix = format!("{},{},{}", self.method, self.tag, self.strategy);
        let mut rows: Vec<String> = self
            .folds
            .iter()
            .map(|f| {
                format!(
                    "{prefix},{},{},{},{},{},{},{}",
                    f.fold,
                    f.accuracy,
                    f.auc,
                    f.delta_auc,
                    f.delta_eo,
                    opt(f.fate_eo),
                    opt(f.fate_auc)
                )
            })
            .collect();
        let a = &self.aggregate;
        for (label, pick) in [
            ("mean", (|s: &Summary| s.mean) as fn(&Summary) -> f64),
            ("std", |s: &Summary| s.std),
        ] {
            rows.push(format!(
                "{prefix},{label},{},{},{},{},{},{}",
                pick(&a.accuracy),
                pick(&a.auc),
                pick(&a.delta_auc),
                pick(&a.delta_eo),
                opt(a.fate_eo.as_ref().map(pick)),
                opt(a.fate_auc.as_ref().map(pick))
            ));
        }
        rows
    }

    /// Writes `<stem>.toml` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let toml_path = dir.join(format!("{stem}.toml"));
        fs::write(&toml_path, self.to_toml()?).map_err(|e| Error::io(&toml_path, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut text = format!("{SUMMARY_HEADER}\n");
        for row in self.summary_rows() {
            text.push_str(&row);
            text.push('\n');
        }
        fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))
    }
}

/// Two-column comma-separated plot data.
pub fn write_plot_data(path: &Path, header: (&str, &str), points: &[(f64, f64)]) -> Result<()> {
    let mut text = format!("{},{}\n", header.0, header.1);
    for (x, y) in points {
        text.push_str(&format!("{x},{y}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
