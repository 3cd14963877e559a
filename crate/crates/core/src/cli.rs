//! Command-line front end: one config file, six subcommands, plain-text
//! outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Matrix;
use crate::config::RunConfig;
use crate::data::{
    attribute_matrix, derive_subgroup, generate_synthetic, load_dataset_dir, make_splits,
    pixel_matrix, positive_rate_disparity, read_split_plan, subsample_for_disparity,
    write_dataset_dir, write_split_plan, Dataset, Sample,
};
use crate::error::{Error, Result};
use crate::metrics::{build_report, write_plot_data, GroupingMode, MethodLogs, SUMMARY_HEADER};
use crate::model::load_checkpoint;
use crate::refusion::{FairRead, FairReadArch};
use crate::thresholds::{fit_threshold_map, threshold_sweep, Partition, PredictionLog, Strategy};
use crate::training::{
    fairread_probabilities, grid_search, prediction_log, run_cv, stage_dir, write_grid_table,
    GridOptions, ImageClassifier, PartitionLogs, RunOptions, StageTag, CHECKPOINT_FILE,
};

pub const SPLITS_FILE: &str = "splits.txt";
pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const DATA_POINTER_FILE: &str = "data_dir.txt";

#[derive(Debug, Parser)]
#[command(name = "fairread", version, about = "Fair classification with attribute re-fusion")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Replace an existing, non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for the grid search.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic biased dataset with its split plan.
    Synth {
        /// Target positive-rate gap between the two groups of `--attribute`.
        #[arg(long)]
        disparity: Option<f64>,
        #[arg(long)]
        attribute: Option<String>,
    },
    /// Run the two-stage pipeline over the cross-validation folds.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `1` stops after the fair encoder.
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        with_erm: bool,
        /// Comma-separated fold indices.
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Fit thresholds on training logs and score the test logs.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Score this dataset instead of the run's own test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// A strategy name or `all`.
        #[arg(long)]
        strategy: Option<String>,
        /// `intersectional` or an attribute name.
        #[arg(long)]
        grouping: Option<String>,
        /// Report tag; `ood` when `--data` is given, `id` otherwise.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Cross-validated hyperparameter search.
    Grid {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Write every intermediate representation of a stage-2 model.
    ExportEmbeddings {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Invert this attribute for every sample before encoding.
        #[arg(long)]
        flip: Option<String>,
    },
    /// Collect evaluation summaries into one table.
    Report {
        /// Evaluation output directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.global.quiet {
        log::LevelFilter::Error
    } else {
        match cli.global.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if g.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let out = g
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required".into()))?;
    match &cli.command {
        Command::Synth {
            disparity,
            attribute,
        } => {
            if let Some(d) = disparity {
                cfg.data.target_disparity = Some(*d);
                if cfg.data.disparity_attribute.is_none() && attribute.is_none() {
                    cfg.data.disparity_attribute = cfg.data.synth.attribute_names.first().cloned();
                }
            }
            if let Some(a) = attribute {
                cfg.data.disparity_attribute = Some(a.clone());
            }
            cfg.validate()?;
            prepare_out(out, g.force)?;
            cmd_synth(&cfg, out)
        }
        Command::Train {
            data,
            stage,
            with_erm,
            folds,
        } => {
            cfg.require_loss_weights()?;
            cfg.validate()?;
            prepare_out(out, g.force)?;
            cmd_train(&cfg, data, out, *stage == 1, *with_erm, folds.clone())
        }
        Command::Evaluate {
            run,
            data,
            strategy,
            grouping,
            tag,
        } => {
            let strategies = match strategy.as_deref() {
                Some("all") => Strategy::ALL.to_vec(),
                Some(s) => vec![s.parse()?],
                None => vec![cfg.eval.strategy],
            };
            let grouping = grouping.clone().unwrap_or_else(|| cfg.eval.grouping.clone());
            let tag = tag
                .clone()
                .unwrap_or_else(|| if data.is_some() { "ood" } else { "id" }.to_string());
            prepare_out(out, g.force)?;
            cmd_evaluate(run, data.as_deref(), &strategies, &grouping, &tag, out)
        }
        Command::Grid { data, folds } => {
            cfg.require_loss_weights()?;
            cfg.validate()?;
            prepare_out(out, g.force)?;
            cmd_grid(&cfg, data, out, g.jobs, folds.clone())
        }
        Command::ExportEmbeddings {
            run,
            data,
            fold,
            flip,
        } => {
            prepare_out(out, g.force)?;
            cmd_export_embeddings(run, data, *fold, flip.as_deref(), out)
        }
        Command::Report { inputs } => {
            prepare_out(out, g.force)?;
            cmd_report(inputs, out)
        }
    }
}

/// Creates `dir`, refusing to touch a non-empty one unless forced.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut dataset = generate_synthetic(&cfg.data.synth)?;
    if let (Some(target), Some(attr)) = (cfg.data.target_disparity, &cfg.data.disparity_attribute) {
        dataset = subsample_for_disparity(&dataset, attr, target, cfg.data.synth.seed)?;
        log::info!(
            "subsampled to {} samples, {attr} disparity {:.4}",
            dataset.len(),
            positive_rate_disparity(&dataset, attr)?
        );
    }
    let plan = make_splits(&dataset, cfg.data.synth.seed)?;
    write_dataset_dir(out, &dataset)?;
    write_split_plan(&out.join(SPLITS_FILE), &plan)?;
    write_text(&out.join(SNAPSHOT_FILE), &cfg.to_toml()?)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let load = load_dataset_dir(dir)?;
    if load.dropped > 0 {
        log::warn!("{}: dropped {} rows without demographics", dir.display(), load.dropped);
    }
    Ok(load.dataset)
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    stage1_only: bool,
    with_erm: bool,
    folds: Option<Vec<usize>>,
) -> Result<()> {
    let dataset = load_data(data)?;
    let plan = read_split_plan(&data.join(SPLITS_FILE))?;
    let snapshot = cfg.to_toml()?;
    write_text(&out.join(SNAPSHOT_FILE), &snapshot)?;
    let data_abs = fs::canonicalize(data).map_err(|e| Error::io(data, e))?;
    write_text(&out.join(DATA_POINTER_FILE), &format!("{}\n", data_abs.display()))?;
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        with_erm,
        stage1_only,
        folds,
        config_snapshot: snapshot,
    };
    let outcomes = run_cv(&dataset, &plan, &cfg.train, &opts)?;
    let mut text = String::from("stage,fold,chosen_epoch,epochs,best_val_loss\n");
    for o in &outcomes {
        for r in &o.records {
            let best = r
                .epochs
                .iter()
                .find(|e| e.epoch == r.chosen_epoch)
                .map_or(f64::NAN, |e| e.val_loss);
            text.push_str(&format!(
                "{},{},{},{},{best}\n",
                r.stage,
                r.fold,
                r.chosen_epoch,
                r.epochs.len()
            ));
        }
    }
    write_text(&out.join("training_summary.csv"), &text)
}

/// Folds of `run` that have a stage directory for `stage`, ascending.
fn run_folds(run: &Path, stage: StageTag) -> Result<Vec<usize>> {
    let dir = run.join(stage.to_string());
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut folds: Vec<usize> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.strip_prefix("fold")?.parse().ok())
        .collect();
    folds.sort_unstable();
    Ok(folds)
}

fn run_config(run: &Path) -> Result<RunConfig> {
    RunConfig::from_toml(&read_text(&run.join(SNAPSHOT_FILE))?)
}

fn check_compatible(cfg: &RunConfig, dataset: &Dataset) -> Result<()> {
    let synth = &cfg.data.synth;
    if dataset.attribute_names.as_ref() != synth.attribute_names.as_slice()
        || dataset.height != synth.height
        || dataset.width != synth.width
    {
        return Err(Error::Data(format!(
            "dataset ({} x {}, attributes {:?}) does not match the run ({} x {}, attributes {:?})",
            dataset.height,
            dataset.width,
            dataset.attribute_names,
            synth.height,
            synth.width,
            synth.attribute_names
        )));
    }
    Ok(())
}

fn require_checkpoint(run: &Path, stage: StageTag, fold: usize) -> Result<PathBuf> {
    let path = stage_dir(run, stage, fold).join(CHECKPOINT_FILE);
    if !path.is_file() {
        return Err(Error::Data(format!("missing checkpoint {}", path.display())));
    }
    Ok(path)
}

/// Rebuilds the stage-2 model of one fold from its checkpoint.
pub fn load_fairread(run: &Path, fold: usize, dataset: &Dataset) -> Result<FairRead> {
    let cfg = run_config(run)?;
    check_compatible(&cfg, dataset)?;
    let path = require_checkpoint(run, StageTag::Stage2, fold)?;
    let arch = FairReadArch {
        encoder: cfg.train.encoder.clone(),
        refusion: cfg.train.refusion.clone(),
        num_attributes: dataset.num_attributes(),
        height: dataset.height,
        width: dataset.width,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = FairRead::new(&arch, &mut rng.clone(), &mut rng);
    let (store, _) = load_checkpoint(&path)?;
    model.store.load_values(&store)?;
    Ok(model)
}

fn load_erm(run: &Path, fold: usize, dataset: &Dataset) -> Result<ImageClassifier> {
    let cfg = run_config(run)?;
    check_compatible(&cfg, dataset)?;
    let path = require_checkpoint(run, StageTag::Erm, fold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model =
        ImageClassifier::target_model(&cfg.train.encoder, dataset.height, dataset.width, &mut rng);
    let (store, _) = load_checkpoint(&path)?;
    model.store.load_values(&store)?;
    Ok(model)
}

struct MethodRun {
    name: &'static str,
    stage: StageTag,
    logs: Vec<PartitionLogs>,
}

pub fn cmd_evaluate(
    run: &Path,
    data: Option<&Path>,
    strategies: &[Strategy],
    grouping: &str,
    tag: &str,
    out: &Path,
) -> Result<()> {
    let cfg = run_config(run)?;
    let grouping = GroupingMode::parse(grouping, &cfg.data.synth.attribute_names)?;
    let external = data.map(load_data).transpose()?;
    let mut methods = Vec::new();
    for (name, stage) in [("fairread", StageTag::Stage2), ("erm", StageTag::Erm)] {
        let folds = run_folds(run, stage)?;
        if folds.is_empty() {
            continue;
        }
        let mut logs = Vec::with_capacity(folds.len());
        for k in folds {
            let mut l = PartitionLogs::read(&stage_dir(run, stage, k))?;
            if let Some(ds) = &external {
                let samples: Vec<&Sample> = ds.samples.iter().collect();
                let probs = match stage {
                    StageTag::Stage2 => fairread_probabilities(&load_fairread(run, k, ds)?, &samples)?,
                    _ => load_erm(run, k, ds)?.probabilities(&samples)?,
                };
                l.test = prediction_log(k, Partition::Test, ds.num_attributes(), &samples, &probs);
            }
            logs.push(l);
        }
        methods.push(MethodRun { name, stage, logs });
    }
    if methods.is_empty() {
        return Err(Error::Data(format!("{} holds no stage-2 or ERM predictions", run.display())));
    }
    let maps_dir = out.join("thresholds");
    fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    let mut table = String::from(
        "method,strategy,accuracy,accuracy_std,auc,auc_std,delta_auc,delta_auc_std,delta_eo,delta_eo_std,fate_eo,fate_auc\n",
    );
    for &strategy in strategies {
        let mut maps = Vec::new();
        for m in &methods {
            let mut per_fold = Vec::with_capacity(m.logs.len());
            for l in &m.logs {
                let map = fit_threshold_map(&l.train, strategy, &grouping)?;
                map.write(&maps_dir.join(format!("{}_{strategy}_fold{}.txt", m.name, l.train.fold)))?;
                per_fold.push(map);
            }
            maps.push(per_fold);
        }
        let tests: Vec<Vec<PredictionLog>> = methods
            .iter()
            .map(|m| m.logs.iter().map(|l| l.test.clone()).collect())
            .collect();
        let logs_of = |i: usize| MethodLogs {
            name: methods[i].name,
            test_logs: &tests[i],
            maps: &maps[i],
        };
        let erm = methods.iter().position(|m| m.stage == StageTag::Erm);
        for i in 0..methods.len() {
            let reference = erm.filter(|&e| e != i).map(logs_of);
            let report = match build_report(logs_of(i), reference, &grouping, tag) {
                Err(Error::Undefined(msg)) => {
                    log::warn!("{}: FATE undefined ({msg})", methods[i].name);
                    build_report(logs_of(i), None, &grouping, tag)?
                }
                other => other?,
            };
            report.write(out, &format!("{}_{strategy}", methods[i].name))?;
            let a = &report.aggregate;
            let opt = |s: Option<crate::metrics::Summary>| s.map(|s| s.mean.to_string()).unwrap_or_default();
            table.push_str(&format!(
                "{},{strategy},{},{},{},{},{},{},{},{},{},{}\n",
                methods[i].name,
                a.accuracy.mean,
                a.accuracy.std,
                a.auc.mean,
                a.auc.std,
                a.delta_auc.mean,
                a.delta_auc.std,
                a.delta_eo.mean,
                a.delta_eo.std,
                opt(a.fate_eo),
                opt(a.fate_auc)
            ));
        }
    }
    write_text(&out.join("strategies.csv"), &table)?;
    for m in &methods {
        let mut sweep = String::from("fold,group,threshold,tpr,tnr\n");
        for l in &m.logs {
            let mut groups: BTreeMap<usize, Vec<_>> = BTreeMap::new();
            for r in &l.train.rows {
                groups
                    .entry(grouping.group_of(r.subgroup, l.train.num_attributes))
                    .or_default()
                    .push(r);
            }
            for (g, rows) in groups {
                for (t, tpr, tnr) in threshold_sweep(&rows) {
                    sweep.push_str(&format!("{},{g},{t},{tpr},{tnr}\n", l.train.fold));
                }
            }
        }
        write_text(&out.join(format!("sweep_{}.csv", m.name)), &sweep)?;
    }
    Ok(())
}

pub fn cmd_grid(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    jobs: usize,
    folds: Option<Vec<usize>>,
) -> Result<()> {
    let dataset = load_data(data)?;
    let plan = read_split_plan(&data.join(SPLITS_FILE))?;
    let opts = GridOptions {
        jobs,
        folds,
        grouping: GroupingMode::parse(&cfg.eval.grouping, &dataset.attribute_names)?,
        strategy: cfg.eval.strategy,
    };
    let result = grid_search(&dataset, &plan, &cfg.train, &cfg.grid, &opts)?;
    write_grid_table(&out.join("grid.csv"), &result.rows)?;
    let best = RunConfig {
        train: result.best_config.clone(),
        ..cfg.clone()
    };
    write_text(&out.join("best_config.toml"), &best.to_toml()?)?;
    let mut by_alpha: BTreeMap<u64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &result.rows {
        let e = by_alpha
            .entry(r.point.alpha_adv.to_bits())
            .or_insert((r.point.alpha_adv, Vec::new(), Vec::new()));
        e.1.push(r.val_accuracy);
        e.2.push(r.val_fate_eo);
    }
    let mut alphas: Vec<_> = by_alpha.into_values().collect();
    alphas.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let acc: Vec<(f64, f64)> = alphas.iter().map(|(a, acc, _)| (*a, mean(acc))).collect();
    let fate: Vec<(f64, f64)> = alphas.iter().map(|(a, _, f)| (*a, mean(f))).collect();
    write_plot_data(&out.join("alpha_accuracy.csv"), ("alpha_adv", "val_accuracy"), &acc)?;
    write_plot_data(&out.join("alpha_fate_eo.csv"), ("alpha_adv", "val_fate_eo"), &fate)
}

pub fn cmd_export_embeddings(
    run: &Path,
    data: &Path,
    fold: usize,
    flip: Option<&str>,
    out: &Path,
) -> Result<()> {
    let mut dataset = load_data(data)?;
    let model = load_fairread(run, fold, &dataset)?;
    if let Some(name) = flip {
        let idx = dataset.attribute_index(name)?;
        dataset.samples = dataset
            .samples
            .iter()
            .map(|s| s.with_attrs(s.attrs.flipped(idx)))
            .collect();
    }
    let blocks = model.arch.refusion.blocks;
    let width = model.arch.encoder.latent_dim.max(model.arch.refusion.hidden_dim);
    let mut text = String::from("sample_id,stage");
    for d in 0..width {
        text.push_str(&format!(",dim_{d}"));
    }
    text.push_str(",label,subgroup\n");
    for chunk in dataset.samples.chunks(256) {
        let samples: Vec<&Sample> = chunk.iter().collect();
        let o = model.predict(&pixel_matrix(&samples), &attribute_matrix(&samples))?;
        let mut stages: Vec<(String, &Matrix)> = vec![("zt".into(), &o.z_t)];
        stages.extend(o.fused.iter().enumerate().map(|(i, m)| (format!("fused_{}", i + 1), m)));
        stages.push(("mu".into(), &o.mu));
        stages.push(("sigma2".into(), &o.sigma2));
        debug_assert_eq!(stages.len(), blocks + 3);
        for (r, s) in samples.iter().enumerate() {
            for (name, m) in &stages {
                text.push_str(&format!("{},{name}", s.id));
                for d in 0..width {
                    match m.get((r, d)) {
                        Some(v) => text.push_str(&format!(",{v}")),
                        None => text.push(','),
                    }
                }
                text.push_str(&format!(",{},{}\n", s.label, derive_subgroup(&s.attrs)));
            }
        }
    }
    write_text(&out.join("embeddings.csv"), &text)
}

/// Gathers the mean and std lines of every summary CSV under `inputs`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut text = format!("source,{SUMMARY_HEADER}\n");
    let mut found = 0;
    for dir in inputs {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for path in files {
            let content = read_text(&path)?;
            let mut lines = content.lines();
            if lines.next() != Some(SUMMARY_HEADER) {
                continue;
            }
            found += 1;
            for line in lines {
                let fold = line.split(',').nth(3).unwrap_or_default();
                if fold == "mean" || fold == "std" {
                    text.push_str(&format!("{},{line}\n", dir.display()));
                }
            }
        }
    }
    if found == 0 {
        return Err(Error::Data("no evaluation summaries found".into()));
    }
    write_text(&out.join("report.csv"), &text)
}
