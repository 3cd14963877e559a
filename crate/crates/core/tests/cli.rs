use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fairread::metrics::MetricsReport;

const TINY: &str = r#"
seed = 3
[data.synth]
height = 16
width = 16
subgroup_counts = [25, 25, 25, 25, 25, 25, 25, 25]
[train]
max_epochs = 2
patience = 1
batch_size = 16
[train.weights]
lambda_c = 0.1
lambda_r = 0.1
alpha_adv = 0.5
[train.encoder]
channels = [4, 8]
latent_dim = 16
[train.refusion]
blocks = 2
hidden_dim = 8
[grid]
alpha_adv = [0.0, 0.5]
blocks = [1]
hidden_dim = [8]
dropout = [0.1]
"#;

struct Outcome {
    code: i32,
    stderr: String,
}

fn fairread(args: &[&str]) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_fairread"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("binary runs");
    Outcome {
        code: out.status.code().unwrap_or(-1),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) {
    let o = fairread(args);
    assert_eq!(o.code, 0, "{args:?} failed: {}", o.stderr);
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let path = root.join("config.toml");
        fs::write(&path, config).unwrap();
        Self {
            _dir: dir,
            root,
            config: path,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["--config", s(&self.config), "--out", s(&out), "synth"];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }

    fn train(&self, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["--config", s(&self.config), "--out", s(&out), "train", "--data", s(data)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn default_synth_is_deterministic_under_seed() {
    let ws = Workspace::new("");
    let a = ws.synth("a", &["--seed", "7"]);
    let b = ws.synth("b", &["--seed", "7"]);
    assert!(a.join("splits.txt").is_file());
    assert!(a.join("manifest.csv").is_file());
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), tb.len());
    assert!(ta == tb, "directories differ");
}

#[test]
fn disparity_flag_is_verified_from_the_manifest() {
    let ws = Workspace::new("");
    let data = ws.synth("d", &["--disparity", "0.16", "--attribute", "sex"]);
    let mut counts = BTreeMap::<String, (f64, f64)>::new();
    for row in csv_rows(&data.join("manifest.csv")) {
        let e = counts.entry(row[3].clone()).or_default();
        e.0 += row[2].parse::<f64>().unwrap();
        e.1 += 1.0;
    }
    let rates: Vec<f64> = counts.values().map(|(p, n)| p / n).collect();
    assert_eq!(rates.len(), 2);
    let gap = (rates[0] - rates[1]).abs();
    assert!((gap - 0.16).abs() <= 0.01, "gap {gap}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let ws = Workspace::new("[data.synth]\nheight = 16\nbogus = 1\n");
    let o = fairread(&["--config", s(&ws.config), "--out", s(&ws.path("x")), "synth"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("line 3"), "{}", o.stderr);

    // Training has no silent default for the orthogonality weights.
    let ws = Workspace::new(&TINY.replace("lambda_r = 0.1\n", ""));
    let data = ws.synth("d", &[]);
    let o = fairread(&["--config", s(&ws.config), "--out", s(&ws.path("r")), "train", "--data", s(&data)]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("lambda_r"), "{}", o.stderr);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let ws = Workspace::new(TINY);
    let data = ws.synth("data", &[]);
    let start = Instant::now();
    let run = ws.train(&data, "run", &["--with-erm"]);
    assert!(start.elapsed() < Duration::from_secs(300));
    for stage in ["stage1_fa", "stage1_ft", "stage2", "erm"] {
        for k in 0..5 {
            let dir = run.join(stage).join(format!("fold{k}"));
            assert!(dir.join("model.ckpt").is_file(), "{}", dir.display());
            assert!(dir.join("epochs.log").is_file());
        }
    }

    // A second run into the same directory is refused and leaves it intact.
    let before = tree(&run);
    let o = fairread(&["--config", s(&ws.config), "--out", s(&run), "train", "--data", s(&data)]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("--force"));
    assert!(tree(&run) == before);

    // Retraining with --force reproduces the run bit for bit.
    ok(&["--config", s(&ws.config), "--out", s(&run), "--force", "train", "--data", s(&data), "--with-erm"]);
    assert!(tree(&run) == before);

    let eval = ws.path("eval");
    ok(&["--out", s(&eval), "evaluate", "--run", s(&run), "--strategy", "all"]);
    let table = csv_rows(&eval.join("strategies.csv"));
    for method in ["fairread", "erm"] {
        let mut strategies: Vec<&str> = table
            .iter()
            .filter(|r| r[0] == method)
            .map(|r| r[1].as_str())
            .collect();
        strategies.sort_unstable();
        assert_eq!(strategies, ["default", "gmeans", "min_gap", "youden"]);
    }

    // The default strategy is plain thresholding at one half.
    let report =
        MetricsReport::from_toml(&fs::read_to_string(eval.join("fairread_default.toml")).unwrap()).unwrap();
    assert_eq!(report.tag, "id");
    for f in &report.folds {
        let rows = csv_rows(&run.join("stage2").join(format!("fold{}", f.fold)).join("predictions_test.csv"));
        let correct = rows
            .iter()
            .filter(|r| u8::from(r[1].parse::<f64>().unwrap() > 0.5) == r[2].parse::<u8>().unwrap())
            .count();
        assert!((f.accuracy - correct as f64 / rows.len() as f64).abs() < 1e-12);
    }

    // A second dataset with shifted confounds is scored out of distribution.
    let shifted = Workspace::new(&TINY.replace(
        "subgroup_counts",
        "confound_strength = [0.4, 0.1, 0.3]\nsubgroup_counts",
    ));
    let ood_data = shifted.synth("ood", &[]);
    let ood = ws.path("ood_eval");
    ok(&["--out", s(&ood), "evaluate", "--run", s(&run), "--data", s(&ood_data)]);
    let report =
        MetricsReport::from_toml(&fs::read_to_string(ood.join("fairread_min_gap.toml")).unwrap()).unwrap();
    assert_eq!(report.tag, "ood");
    assert_eq!(report.folds[0].subgroups.iter().map(|g| g.count).sum::<usize>(), 200);

    // A dataset of another geometry is rejected as a data error.
    let other = Workspace::new(&TINY.replace("height = 16\nwidth = 16", "height = 8\nwidth = 8"));
    let small = other.synth("small", &[]);
    let o = fairread(&["--out", s(&ws.path("bad")), "evaluate", "--run", s(&run), "--data", s(&small)]);
    assert_eq!(o.code, 3, "{}", o.stderr);

    let rep = ws.path("report");
    ok(&["--out", s(&rep), "report", s(&eval), s(&ood)]);
    let rows = csv_rows(&rep.join("report.csv"));
    // Mean and std lines: four strategies in-distribution, one out of it.
    assert_eq!(rows.len(), 2 * 4 * 2 + 2 * 2);
}

#[test]
fn exported_embeddings_have_the_documented_structure() {
    let ws = Workspace::new(TINY);
    let data = ws.synth("data", &[]);
    let run = ws.train(&data, "run", &["--folds", "0"]);
    let plain = ws.path("plain");
    let flipped = ws.path("flipped");
    ok(&["--out", s(&plain), "export-embeddings", "--run", s(&run), "--data", s(&data)]);
    ok(&["--out", s(&flipped), "export-embeddings", "--run", s(&run), "--data", s(&data), "--flip", "sex"]);
    let rows = csv_rows(&plain.join("embeddings.csv"));
    assert_eq!(rows.len(), 200 * (2 + 3));

    let mut mu_by_group: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r[1] == "mu") {
        let n = r.len();
        let values = r[2..n - 2].to_vec();
        match mu_by_group.get(&r[n - 1]) {
            Some(v) => assert_eq!(v, &values),
            None => {
                mu_by_group.insert(r[n - 1].clone(), values);
            }
        }
    }
    assert_eq!(mu_by_group.len(), 8);

    let zt = |rows: &[Vec<String>]| -> BTreeMap<String, Vec<String>> {
        rows.iter()
            .filter(|r| r[1] == "zt")
            .map(|r| (r[0].clone(), r[2..r.len() - 2].to_vec()))
            .collect()
    };
    let flipped_rows = csv_rows(&flipped.join("embeddings.csv"));
    assert_eq!(zt(&rows), zt(&flipped_rows));
    let mu = |rows: &[Vec<String>]| rows.iter().filter(|r| r[1] == "mu").cloned().collect::<Vec<_>>();
    assert_ne!(mu(&rows), mu(&flipped_rows));
}

#[test]
fn stage_one_only_leaves_nothing_to_export() {
    let ws = Workspace::new(TINY);
    let data = ws.synth("data", &[]);
    let run = ws.train(&data, "run", &["--stage", "1", "--folds", "0"]);
    assert!(run.join("stage1_ft/fold0/model.ckpt").is_file());
    assert!(!run.join("stage2").exists());
    let o = fairread(&["--out", s(&ws.path("e")), "export-embeddings", "--run", s(&run), "--data", s(&data)]);
    assert_eq!(o.code, 3);
    assert!(o.stderr.contains("missing checkpoint"), "{}", o.stderr);
}

#[test]
fn grid_writes_table_best_config_and_alpha_curve() {
    let ws = Workspace::new(TINY);
    let data = ws.synth("data", &[]);
    let a = ws.path("grid_a");
    let b = ws.path("grid_b");
    ok(&["--config", s(&ws.config), "--out", s(&a), "--jobs", "2", "grid", "--data", s(&data), "--folds", "0,1"]);
    ok(&["--config", s(&ws.config), "--out", s(&b), "grid", "--data", s(&data), "--folds", "0,1"]);
    assert_eq!(csv_rows(&a.join("grid.csv")).len(), 2);
    assert_eq!(csv_rows(&a.join("alpha_fate_eo.csv")).len(), 2);
    let best = fairread::config::RunConfig::load(&a.join("best_config.toml")).unwrap();
    assert_eq!(best.train.refusion.blocks, 1);
    assert!(tree(&a) == tree(&b), "grid output depends on --jobs");
}
