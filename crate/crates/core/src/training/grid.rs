use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    fairread_probabilities, train_attribute_classifier, train_erm, train_fair_encoder,
    train_fairread, FoldData, ImageClassifier, PartitionLogs, TrainConfig,
};
use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{build_report, GroupingMode, MethodLogs};
use crate::thresholds::{fit_threshold_map, Strategy, ThresholdMap};

/// Candidate values per hyperparameter; the default is the published grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub alpha_adv: Vec<f64>,
    pub blocks: Vec<usize>,
    pub hidden_dim: Vec<usize>,
    pub dropout: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            alpha_adv: vec![0.0, 0.1, 0.3, 0.5, 0.8, 1.0, 2.0],
            blocks: vec![1, 2, 3],
            hidden_dim: vec![256, 1024],
            dropout: vec![0.1, 0.3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha_adv: f64,
    pub blocks: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl Grid {
    /// Cartesian product in row-major order (α outermost).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &alpha_adv in &self.alpha_adv {
            for &blocks in &self.blocks {
                for &hidden_dim in &self.hidden_dim {
                    for &dropout in &self.dropout {
                        out.push(GridPoint {
                            alpha_adv,
                            blocks,
                            hidden_dim,
                            dropout,
                        });
                    }
                }
            }
        }
        out
    }

    /// Training config of one grid point; the latent width grows to the
    /// re-fusion hidden width when that is larger.
    pub fn apply(base: &TrainConfig, p: &GridPoint) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.weights.alpha_adv = p.alpha_adv;
        cfg.refusion.blocks = p.blocks;
        cfg.refusion.hidden_dim = p.hidden_dim;
        cfg.refusion.dropout = p.dropout;
        cfg.encoder.latent_dim = cfg.encoder.latent_dim.max(p.hidden_dim);
        cfg
    }
}

/// Mean validation metrics across folds for one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub latent_dim: usize,
    pub val_accuracy: f64,
    pub val_auc: f64,
    pub val_delta_auc: f64,
    pub val_delta_eo: f64,
    /// NaN when the ERM reference disparity is zero.
    pub val_fate_eo: f64,
    pub val_fate_auc: f64,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: usize,
    pub best_config: TrainConfig,
}

fn key(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Index of the row with the highest validation FATE_EO; ties go to the
/// higher validation AUC, then the smaller α.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    let better = |a: &GridRow, b: &GridRow| {
        key(a.val_fate_eo)
            .total_cmp(&key(b.val_fate_eo))
            .then(key(a.val_auc).total_cmp(&key(b.val_auc)))
            .then(b.point.alpha_adv.total_cmp(&a.point.alpha_adv))
    };
    (0..rows.len()).reduce(|best, i| {
        if better(&rows[i], &rows[best]).is_gt() {
            i
        } else {
            best
        }
    })
}

/// Maps `f` over `0..n` on up to `jobs` threads, preserving order.
fn parallel_map<T: Send>(
    n: usize,
    jobs: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every index visited"))
        .collect()
}

struct Stage1Cache {
    target_model: ImageClassifier,
    erm_logs: PartitionLogs,
    erm_map: ThresholdMap,
}

#[derive(Debug, Clone)]
pub struct GridOptions {
    pub jobs: usize,
    pub folds: Option<Vec<usize>>,
    pub grouping: GroupingMode,
    pub strategy: Strategy,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            folds: None,
            grouping: GroupingMode::Intersectional,
            strategy: Strategy::MinGap,
        }
    }
}

/// Cross-validated search over `grid`, scored on validation folds against
/// a same-fold ERM reference. Stage-1 models and ERM references are shared
/// between grid points of equal latent width.
pub fn grid_search(
    dataset: &Dataset,
    plan: &SplitPlan,
    base: &TrainConfig,
    grid: &Grid,
    opts: &GridOptions,
) -> Result<GridResult> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Config("grid has no points".into()));
    }
    let d_a = dataset.num_attributes();
    let configs: Vec<TrainConfig> = points.iter().map(|p| Grid::apply(base, p)).collect();
    for c in &configs {
        c.validate(d_a)?;
    }
    let folds: Vec<usize> = opts
        .folds
        .clone()
        .unwrap_or_else(|| (0..plan.num_folds()).collect());
    let fold_data: Vec<FoldData> = folds
        .iter()
        .map(|&k| FoldData::new(dataset, plan, k))
        .collect::<Result<_>>()?;

    let widths: Vec<usize> = {
        let mut w: Vec<usize> = configs.iter().map(|c| c.encoder.latent_dim).collect();
        w.sort_unstable();
        w.dedup();
        w
    };
    let jobs_stage1: Vec<(usize, usize)> = widths
        .iter()
        .flat_map(|&w| (0..fold_data.len()).map(move |f| (w, f)))
        .collect();
    let caches = parallel_map(jobs_stage1.len(), opts.jobs, |j| {
        let (width, f) = jobs_stage1[j];
        let fold = &fold_data[f];
        let mut cfg = base.clone();
        cfg.encoder.latent_dim = width;
        cfg.refusion.hidden_dim = cfg.refusion.hidden_dim.min(width);
        let wrap = |e| Error::Fold {
            fold: fold.fold,
            source: Box::new(e),
        };
        let (f_a, _) = train_attribute_classifier(fold, &cfg).map_err(wrap)?;
        let (f_t, _) = train_fair_encoder(fold, &f_a, &cfg).map_err(wrap)?;
        let (erm, _) = train_erm(fold, &cfg).map_err(wrap)?;
        let erm_logs = PartitionLogs::compute(fold, |s| erm.probabilities(s))?;
        let erm_map = fit_threshold_map(&erm_logs.train, opts.strategy, &opts.grouping)?;
        Ok(Stage1Cache {
            target_model: f_t,
            erm_logs,
            erm_map,
        })
    })?;
    let cache: BTreeMap<(usize, usize), Stage1Cache> = jobs_stage1.into_iter().zip(caches).collect();

    let rows = parallel_map(points.len(), opts.jobs, |i| {
        let cfg = &configs[i];
        let width = cfg.encoder.latent_dim;
        let mut val_logs = Vec::new();
        let mut maps = Vec::new();
        let mut erm_val = Vec::new();
        let mut erm_maps = Vec::new();
        for (f, fold) in fold_data.iter().enumerate() {
            let c = &cache[&(width, f)];
            let (model, _) = train_fairread(fold, &c.target_model, cfg).map_err(|e| Error::Fold {
                fold: fold.fold,
                source: Box::new(e),
            })?;
            let logs = PartitionLogs::compute(fold, |s| fairread_probabilities(&model, s))?;
            maps.push(fit_threshold_map(&logs.train, opts.strategy, &opts.grouping)?);
            val_logs.push(logs.val);
            erm_val.push(c.erm_logs.val.clone());
            erm_maps.push(c.erm_map.clone());
        }
        let method = MethodLogs {
            name: "fairread",
            test_logs: &val_logs,
            maps: &maps,
        };
        let reference = MethodLogs {
            name: "erm",
            test_logs: &erm_val,
            maps: &erm_maps,
        };
        let report = match build_report(method, Some(reference), &opts.grouping, "val") {
            Err(Error::Undefined(m)) => {
                log::warn!("grid point {i}: FATE undefined ({m})");
                build_report(method, None, &opts.grouping, "val")?
            }
            other => other?,
        };
        let a = &report.aggregate;
        Ok(GridRow {
            point: points[i],
            latent_dim: width,
            val_accuracy: a.accuracy.mean,
            val_auc: a.auc.mean,
            val_delta_auc: a.delta_auc.mean,
            val_delta_eo: a.delta_eo.mean,
            val_fate_eo: a.fate_eo.map_or(f64::NAN, |s| s.mean),
            val_fate_auc: a.fate_auc.map_or(f64::NAN, |s| s.mean),
        })
    })?;
    let best = select_best(&rows).expect("nonempty grid");
    Ok(GridResult {
        best_config: configs[best].clone(),
        rows,
        best,
    })
}

pub const GRID_HEADER: &str = "alpha_adv,blocks,hidden_dim,dropout,latent_dim,val_accuracy,val_auc,val_delta_auc,val_delta_eo,val_fate_eo,val_fate_auc";

pub fn write_grid_table(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut text = format!("{GRID_HEADER}\n");
    for r in rows {
        let p = &r.point;
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            p.alpha_adv,
            p.blocks,
            p.hidden_dim,
            p.dropout,
            r.latent_dim,
            r.val_accuracy,
            r.val_auc,
            r.val_delta_auc,
            r.val_delta_eo,
            r.val_fate_eo,
            r.val_fate_auc
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_grid_table(path: &Path) -> Result<Vec<GridRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Data(format!("{}:{}: malformed grid row", path.display(), i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad());
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
        let int = |k: usize| f[k].parse::<usize>().map_err(|_| bad());
        rows.push(GridRow {
            point: GridPoint {
                alpha_adv: num(0)?,
                blocks: int(1)?,
                hidden_dim: int(2)?,
                dropout: num(3)?,
            },
            latent_dim: int(4)?,
            val_accuracy: num(5)?,
            val_auc: num(6)?,
            val_delta_auc: num(7)?,
            val_delta_eo: num(8)?,
            val_fate_eo: num(9)?,
            val_fate_auc: num(10)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(alpha: f64, fate: f64, auc: f64) -> GridRow {
        GridRow {
            point: GridPoint {
                alpha_adv: alpha,
                blocks: 1,
                hidden_dim: 8,
                dropout: 0.1,
            },
            latent_dim: 16,
            val_accuracy: 0.7,
            val_auc: auc,
            val_delta_auc: 0.1,
            val_delta_eo: 0.1,
            val_fate_eo: fate,
            val_fate_auc: 0.0,
        }
    }

    #[test]
    fn default_grid_size() {
        assert_eq!(Grid::default().points().len(), 7 * 3 * 2 * 2);
    }

    #[test]
    fn selection_order() {
        let rows = vec![
            row(0.5, 0.2, 0.8),
            row(0.1, 0.3, 0.7),
            row(1.0, 0.3, 0.75),
            row(0.3, 0.3, 0.75),
            row(2.0, f64::NAN, 0.9),
        ];
        assert_eq!(select_best(&rows), Some(3));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn latent_width_follows_hidden_width() {
        let base = TrainConfig::default();
        let p = Grid::default().points()[1];
        let c = Grid::apply(&base, &p);
        assert_eq!(c.encoder.latent_dim, 256);
        assert_eq!(c.refusion.hidden_dim, 256);
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row(0.5, 0.2, 0.8), row(0.1, f64::NAN, 0.7)];
        let p = dir.path().join("grid.csv");
        write_grid_table(&p, &rows).unwrap();
        let back = read_grid_table(&p).unwrap();
        assert_eq!(back[0], rows[0]);
        assert!(back[1].val_fate_eo.is_nan());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let v = parallel_map(20, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(v, (0..20).map(|i| i * i).collect::<Vec<_>>());
        assert!(parallel_map(5, 2, |i| if i == 3 { Err(Error::Data("x".into())) } else { Ok(i) }).is_err());
    }
}
