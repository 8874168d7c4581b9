//! Experiment configuration and the runners behind the `spam` binary.
//!
//! Every runner writes into `output_dir`, starting with `config.json`, an echo
//! of the configuration that produced the directory.

mod check;

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csbm::{generate, margin_growth_check, posterior_consistency_trend, support_recovery_rate, CsbmConfig};
use crate::error::{Error, Result};
use crate::graphcore::{load_dataset_dir, make_split, GraphDataset, LabelSplit};
use crate::robustness::{cell_seed, mean_std, robustness_curve, CurveTable, PerturbationKind, PerturbationSpec};
use crate::training::{eval_seed, evaluate, gcn_evaluate, gcn_train, save_checkpoint, train, EpochRecord, Model, TrainConfig};

pub use check::{check, CheckItem};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "SPAM_THREADS";

/// Where the graph comes from: `{"path": "dir"}` or `{"csbm": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Path(PathBuf),
    Csbm(CsbmConfig),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Spam,
    Gcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lambda_sp: Vec<f64>,
    pub lambda_st: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSpec {
    pub kind: PerturbationKind,
    pub magnitudes: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_split() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tag: String,
    pub dataset: DatasetSource,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelKind,
    /// Train, validation and test fractions of each class.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub perturbation: Option<PerturbationSpec>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub k_list: Option<Vec<usize>>,
    #[serde(default)]
    pub robustness: Option<RobustnessSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tag.is_empty() || self.tag.contains([',', '\n', '"']) {
            return Err(Error::Config(format!("tag {:?} must be non-empty plain text", self.tag)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        let [a, b, c] = self.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 || a == 0.0 || b == 0.0 {
            return Err(Error::Config(format!("split {:?} needs positive train and validation parts summing to 1", self.split)));
        }
        self.train.validate()?;
        if let Some(p) = &self.perturbation {
            p.validate()?;
        }
        if let DatasetSource::Csbm(c) = &self.dataset {
            c.validate()?;
        }
        if let Some(grid) = &self.grid {
            if grid.lambda_sp.is_empty() || grid.lambda_st.is_empty() {
                return Err(Error::Config("grid.lambda_sp and grid.lambda_st must be non-empty".into()));
            }
            if grid.lambda_sp.iter().chain(&grid.lambda_st).any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("grid weights must be finite and non-negative".into()));
            }
        }
        if let Some(ks) = &self.k_list {
            if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("k_list {ks:?} must be strictly ascending and start at 1 or more")));
            }
        }
        if let Some(r) = &self.robustness {
            if r.magnitudes.is_empty() || r.magnitudes.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Config("robustness.magnitudes must be non-empty and ascending".into()));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<GraphDataset> {
        match &self.dataset {
            DatasetSource::Path(dir) => Ok(load_dataset_dir(dir)?.0),
            DatasetSource::Csbm(c) => Ok(generate(c)?.0),
        }
    }

    fn split_for(&self, g: &GraphDataset, seed: u64) -> Result<LabelSplit> {
        let [a, b, c] = self.split;
        make_split(g, (a, b, c), seed)
    }

    fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Creates `dir` and writes `config.json` into it.
fn prepare_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

/// One trained seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub test_acc: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub model: Option<Model>,
}

/// Perturbs (when configured), splits, trains and scores one seed.
pub fn train_seed(g: &GraphDataset, cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let perturbed;
    let g = match &cfg.perturbation {
        Some(p) => {
            perturbed = PerturbationSpec::new(p.kind, p.magnitude, cell_seed(p.seed, seed)).apply(g)?;
            &perturbed
        }
        None => g,
    };
    let split = cfg.split_for(g, seed)?;
    let tc = cfg.train_for(seed);
    match cfg.model {
        ModelKind::Spam => {
            let out = train(g, &split, &tc)?;
            let test_acc = evaluate(g, &split.train, &split.test, &out.model, tc.k_eval, eval_seed(seed))?;
            Ok(SeedRun {
                seed,
                test_acc,
                best_epoch: out.best_epoch,
                history: out.history,
                model: Some(out.model),
            })
        }
        ModelKind::Gcn => {
            let out = gcn_train(g, &split, &tc)?;
            Ok(SeedRun {
                seed,
                test_acc: gcn_evaluate(g, &split.test, &out.model)?,
                best_epoch: out.best_epoch,
                history: out.history,
                model: None,
            })
        }
    }
}

/// A row of `summary.csv`. Aggregate rows carry `mean` or `std` as the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub tag: String,
    pub seed: String,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub tag: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl RunSummary {
    pub fn new(tag: &str, per_seed: Vec<(u64, f64)>) -> Self {
        let accs: Vec<f64> = per_seed.iter().map(|r| r.1).collect();
        let (mean, std) = mean_std(&accs);
        Self {
            tag: tag.to_owned(),
            per_seed,
            mean,
            std,
        }
    }

    pub fn rows(&self) -> Vec<SummaryRow> {
        let mut rows: Vec<SummaryRow> = self
            .per_seed
            .iter()
            .map(|&(seed, acc)| SummaryRow {
                tag: self.tag.clone(),
                seed: seed.to_string(),
                test_acc: acc,
            })
            .collect();
        for (name, v) in [("mean", self.mean), ("std", self.std)] {
            rows.push(SummaryRow {
                tag: self.tag.clone(),
                seed: name.into(),
                test_acc: v,
            });
        }
        rows
    }
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Parses `summary.csv` back into per-seed accuracies, ignoring aggregate rows.
pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let rows: Vec<SummaryRow> = read_rows(path)?;
    let tag = rows.first().map(|r| r.tag.clone()).unwrap_or_default();
    let per_seed = rows
        .iter()
        .filter_map(|r| r.seed.parse::<u64>().ok().map(|s| (s, r.test_acc)))
        .collect();
    Ok(RunSummary::new(&tag, per_seed))
}

fn write_seed_outputs(dir: &Path, run: &SeedRun, cfg: &ExperimentConfig) -> Result<()> {
    let sd = dir.join(format!("seed-{}", run.seed));
    fs::create_dir_all(&sd)?;
    write_rows(&sd.join("metrics.csv"), &run.history)?;
    if let Some(model) = &run.model {
        let best_val = run.history.get(run.best_epoch).map_or(f64::NAN, |r| r.val_acc);
        save_checkpoint(&sd.join("checkpoint.json"), model, &cfg.train_for(run.seed), run.best_epoch, best_val)?;
    }
    Ok(())
}

fn run_in(dir: &Path, g: &GraphDataset, cfg: &ExperimentConfig) -> Result<RunSummary> {
    prepare_dir(dir, cfg)?;
    let runs: Vec<SeedRun> = cfg
        .seeds
        .par_iter()
        .map(|&s| train_seed(g, cfg, s))
        .collect::<Result<_>>()?;
    for run in &runs {
        write_seed_outputs(dir, run, cfg)?;
        log::info!("{} seed {}: test accuracy {:.4}", cfg.tag, run.seed, run.test_acc);
    }
    let summary = RunSummary::new(&cfg.tag, runs.iter().map(|r| (r.seed, r.test_acc)).collect());
    write_rows(&dir.join("summary.csv"), &summary.rows())?;
    Ok(summary)
}

/// Trains every seed and writes `summary.csv` plus `seed-*/metrics.csv` and
/// `seed-*/checkpoint.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let g = cfg.dataset()?;
    run_in(&cfg.output_dir, &g, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub tag: String,
    pub lambda_sp: f64,
    pub lambda_st: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// Runs every `(λ_sp, λ_st)` cell into `cell-<i>-<j>/` and writes `grid.csv`.
pub fn grid(cfg: &ExperimentConfig) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let spec = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::Config("the grid verb needs a \"grid\" section".into()))?;
    let g = cfg.dataset()?;
    prepare_dir(&cfg.output_dir, cfg)?;
    let mut rows = Vec::new();
    for (i, &lsp) in spec.lambda_sp.iter().enumerate() {
        for (j, &lst) in spec.lambda_st.iter().enumerate() {
            let cell = ExperimentConfig {
                output_dir: cfg.output_dir.join(format!("cell-{i}-{j}")),
                train: TrainConfig {
                    lambda_sp: lsp,
                    lambda_st: lst,
                    ..cfg.train.clone()
                },
                grid: None,
                ..cfg.clone()
            };
            let s = run_in(&cell.output_dir, &g, &cell)?;
            rows.push(GridRow {
                tag: cfg.tag.clone(),
                lambda_sp: lsp,
                lambda_st: lst,
                mean_acc: s.mean,
                std_acc: s.std,
            });
        }
    }
    write_rows(&cfg.output_dir.join("grid.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub k: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub k: usize,
    pub seed: u64,
    pub test_acc: f64,
}

/// Trains once per seed, then scores the test split with each `K` of
/// `k_list`. Samples are shared across `K`, so larger `K` extends smaller.
pub fn mc_study(cfg: &ExperimentConfig) -> Result<Vec<McRow>> {
    cfg.validate()?;
    if cfg.model != ModelKind::Spam {
        return Err(Error::Config("mc-study needs the spam model".into()));
    }
    let ks = cfg
        .k_list
        .clone()
        .ok_or_else(|| Error::Config("the mc-study verb needs \"k_list\"".into()))?;
    let g = cfg.dataset()?;
    prepare_dir(&cfg.output_dir, cfg)?;
    let per_seed: Vec<Vec<McCell>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let split = cfg.split_for(&g, seed)?;
            let out = train(&g, &split, &cfg.train_for(seed))?;
            ks.iter()
                .map(|&k| {
                    let test_acc = evaluate(&g, &split.train, &split.test, &out.model, k, eval_seed(seed))?;
                    Ok(McCell { k, seed, test_acc })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let cells: Vec<McCell> = per_seed.into_iter().flatten().collect();
    let rows: Vec<McRow> = ks
        .iter()
        .map(|&k| {
            let accs: Vec<f64> = cells.iter().filter(|c| c.k == k).map(|c| c.test_acc).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            McRow { k, mean_acc, std_acc }
        })
        .collect();
    write_rows(&cfg.output_dir.join("mc_cells.csv"), &cells)?;
    write_rows(&cfg.output_dir.join("mc_study.csv"), &rows)?;
    Ok(rows)
}

/// Accuracy-versus-magnitude curve written to `robustness.csv` and
/// `robustness_cells.csv`.
pub fn robustness(cfg: &ExperimentConfig) -> Result<CurveTable> {
    cfg.validate()?;
    let spec = cfg
        .robustness
        .as_ref()
        .ok_or_else(|| Error::Config("the robustness verb needs a \"robustness\" section".into()))?;
    let g = cfg.dataset()?;
    prepare_dir(&cfg.output_dir, cfg)?;
    let base = ExperimentConfig {
        perturbation: None,
        ..cfg.clone()
    };
    let table = robustness_curve(
        &g,
        |pg, seed| train_seed(pg, &base, seed).map(|r| r.test_acc),
        spec.kind,
        &spec.magnitudes,
        &cfg.seeds,
        spec.seed,
    )?;
    table.write_csv(File::create(cfg.output_dir.join("robustness.csv"))?)?;
    table.write_cells_csv(File::create(cfg.output_dir.join("robustness_cells.csv"))?)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// `mean_c ‖μ_c‖²`, the default ℓ1 weight of the support-recovery check.
pub fn support_lambda(c: &CsbmConfig) -> f64 {
    c.means.iter().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / c.means.len() as f64
}

/// Margin growth, support recovery and posterior consistency on the
/// configured CSBM. Writes `csbm_verify.json`.
pub fn csbm_verify(cfg: &ExperimentConfig) -> Result<Vec<VerifyItem>> {
    cfg.validate()?;
    let DatasetSource::Csbm(c) = &cfg.dataset else {
        return Err(Error::Config("csbm-verify needs a csbm dataset".into()));
    };
    prepare_dir(&cfg.output_dir, cfg)?;
    let d = c.dim();
    let eye: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(i == j)).collect()).collect();
    let item = |name: &str, r: Result<(bool, String)>| match r {
        Ok((passed, detail)) => VerifyItem {
            name: name.into(),
            passed,
            detail,
        },
        Err(e) => VerifyItem {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    };
    let margin = margin_growth_check(c, &eye, &eye, &eye, 20).map(|r| (r.pass_fraction() >= 0.9, format!("{}/{} trials", r.passed, r.trials)));
    let lambda = support_lambda(c);
    let support = support_recovery_rate(c, lambda, 20)
        .map(|r| (r.precision >= 0.9, format!("lambda {lambda}: precision {:.4}, recall {:.4}", r.precision, r.recall)));
    let trend = posterior_consistency_trend(c, &[0.1, 0.3, 0.6], &cfg.train, &cfg.seeds)
        .map(|kl| (kl.windows(2).all(|w| w[1] <= w[0]), format!("mean KL {kl:?}")));
    let items = vec![
        item("margin-growth", margin),
        item("support-recovery", support),
        item("posterior-consistency", trend),
    ];
    fs::write(cfg.output_dir.join("csbm_verify.json"), serde_json::to_string_pretty(&items)?)?;
    Ok(items)
}

/// Reads the thread count from [`THREADS_ENV`]; `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
    }
}

#[cfg(test)]
mod tests;
