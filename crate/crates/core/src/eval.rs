//! Error metrics, the network architecture sweep and the cross-model
//! comparison.
//!
//! Every training run draws its seed from `(outer seed, dataset, model,
//! run)` so any single cell of a report can be reproduced on its own.
//! Wall times are measured and reported but never used in any decision.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{fit_ols, LinearModel};
use crate::data::{expm1_pred, FeatureTable};
use crate::error::{Error, Result};
use crate::forest::{fit_bagging, ForestModel, FOREST_SCHEMA};
use crate::model_file;
use crate::neural::{self, NetModel, NetSpec, Variant, NET_SCHEMA};
use crate::seed;
use crate::Predictor;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::WidthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Table("metric of an empty vector".into()));
    }
    Ok(())
}

/// Mean squared difference.
pub fn mse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    Ok(pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Root mean squared logarithmic error of unit counts.
pub fn rmsle(pred_units: &[f64], actual_units: &[f64]) -> Result<f64> {
    check_pair(pred_units, actual_units)?;
    if let Some(v) = pred_units
        .iter()
        .chain(actual_units)
        .find(|v| !(**v >= 0.0) || !v.is_finite())
    {
        return Err(Error::Numeric(format!("rmsle needs non-negative finite units, got {v}")));
    }
    let s: f64 = pred_units
        .iter()
        .zip(actual_units)
        .map(|(p, a)| {
            let d = p.ln_1p() - a.ln_1p();
            d * d
        })
        .sum();
    Ok((s / pred_units.len() as f64).sqrt())
}

/// MSE on the log scale and RMSLE on clamped units for one prediction set.
fn score(pred_log: &[f64], target_log: &[f64]) -> Result<(f64, f64)> {
    let m = mse(pred_log, target_log)?;
    let pu: Vec<f64> = pred_log.iter().map(|&p| expm1_pred(p)).collect();
    let au: Vec<f64> = target_log.iter().map(|&t| t.exp_m1().max(0.0)).collect();
    Ok((m, rmsle(&pu, &au)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub dataset: String,
    pub phase: Phase,
    pub mse: f64,
    pub rmsle: f64,
    pub wall_time_seconds: f64,
    pub n_runs: usize,
    pub mse_sd: f64,
    /// Lowest MSE of its dataset (sweeps only).
    pub best: bool,
}

/// Compares strings with embedded numbers numerically, so `N20 < N100`.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for (x, y) in ca.iter().zip(&cb) {
        let o = match (x, y) {
            ((true, p), (true, q)) => p
                .parse::<u64>()
                .unwrap_or(u64::MAX)
                .cmp(&q.parse::<u64>().unwrap_or(u64::MAX))
                .then(p.cmp(q)),
            _ => x.1.cmp(y.1),
        };
        if o != Ordering::Equal {
            return o;
        }
    }
    ca.len().cmp(&cb.len())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Rows are sorted by (dataset, model, phase).
    pub fn new(mut rows: Vec<EvalRow>) -> Self {
        rows.sort_by(|a, b| {
            a.dataset
                .cmp(&b.dataset)
                .then_with(|| natural_cmp(&a.model, &b.model))
                .then(a.phase.cmp(&b.phase))
        });
        Self { rows }
    }

    pub fn rows(&self) -> &[EvalRow] {
        &self.rows
    }

    pub fn datasets(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.rows.iter().map(|r| r.dataset.as_str()).collect();
        v.dedup();
        v
    }

    pub fn find(&self, dataset: &str, model: &str, phase: Phase) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.model == model && r.phase == phase)
    }

    /// The flagged argmin row of `dataset`.
    pub fn best(&self, dataset: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.dataset == dataset && r.best)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Table(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Table(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<EvalRow>, _>>()
            .map_err(|e| Error::Table(format!("report csv: {e}")))?;
        Ok(Self::new(rows))
    }

    /// Aligned plain-text table; the best row of each dataset is starred.
    pub fn to_text(&self) -> String {
        let header = ["dataset", "model", "phase", "mse", "mse_sd", "rmsle", "seconds", "runs", ""];
        let body: Vec<[String; 9]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.dataset.clone(),
                    r.model.clone(),
                    r.phase.to_string(),
                    format!("{:.6}", r.mse),
                    format!("{:.6}", r.mse_sd),
                    format!("{:.6}", r.rmsle),
                    format!("{:.2}", r.wall_time_seconds),
                    r.n_runs.to_string(),
                    if r.best { "*".into() } else { String::new() },
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for row in &body {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            for (k, (c, w)) in cells.iter().zip(&width).enumerate() {
                // text columns left-aligned, numbers right-aligned
                if k < 3 {
                    let _ = write!(out, "{c:<w$}  ");
                } else {
                    let _ = write!(out, "{c:>w$}  ");
                }
            }
            let trimmed = out.trim_end().len();
            out.truncate(trimmed);
            out.push('\n');
        };
        line(&mut out, &header);
        for row in &body {
            let cells: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&mut out, &cells);
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let txt_path = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt_path, self.to_text()).map_err(|e| Error::io(&txt_path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// A named train/test pair such as Dweather or Devent.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: FeatureTable,
    pub test: FeatureTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub layers: Vec<usize>,
    pub neurons: Vec<usize>,
}

impl Default for SweepGrid {
    /// Two to four hidden layers of 20 to 100 neurons in steps of 10.
    fn default() -> Self {
        Self {
            layers: vec![2, 3, 4],
            neurons: (20..=100).step_by(10).collect(),
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.neurons.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        Ok(())
    }

    pub fn specs(&self, base: &NetSpec) -> Vec<NetSpec> {
        let mut out = Vec::new();
        for &l in &self.layers {
            for &n in &self.neurons {
                let mut s = base.clone();
                s.hidden_layers = l;
                s.neurons = n;
                out.push(s);
            }
        }
        out
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn run_seed(seed: u64, dataset: &str, model: &str, run: usize) -> u64 {
    seed::derive(seed, &[dataset.into(), model.into(), run.into()])
}

/// Trains every grid architecture `n_runs` times on each dataset's train
/// table and reports mean train MSE per (dataset, architecture), flagging
/// the per-dataset argmin.
pub fn sweep_mlp(
    datasets: &[Dataset],
    grid: &SweepGrid,
    base: &NetSpec,
    n_runs: usize,
    seed: u64,
) -> Result<EvalReport> {
    grid.validate()?;
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    let specs = grid.specs(base);
    let mut cells = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        for (a, spec) in specs.iter().enumerate() {
            for run in 0..n_runs {
                cells.push((d, a, run, spec.name(), ds.name.as_str()));
            }
        }
    }
    let results: Vec<(f64, f64, f64)> = cells
        .par_iter()
        .map(|(d, a, run, name, ds_name)| {
            let mut spec = specs[*a].clone();
            spec.seed = run_seed(seed, ds_name, name, *run);
            let table = &datasets[*d].train;
            let model = neural::train(&spec, table)?;
            let (m, r) = score(&model.predict_table(table)?, table.target())?;
            log::info!("sweep {ds_name} {name} run {run}: train mse {m:.6}");
            Ok((m, r, model.train_seconds()))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (chunk, cell) in results.chunks(n_runs).zip(cells.chunks(n_runs)) {
        let (_, _, _, name, ds_name) = &cell[0];
        let mses: Vec<f64> = chunk.iter().map(|c| c.0).collect();
        let (m, sd) = mean_sd(&mses);
        rows.push(EvalRow {
            model: name.clone(),
            dataset: ds_name.to_string(),
            phase: Phase::Train,
            mse: m,
            rmsle: chunk.iter().map(|c| c.1).sum::<f64>() / n_runs as f64,
            wall_time_seconds: chunk.iter().map(|c| c.2).sum::<f64>() / n_runs as f64,
            n_runs,
            mse_sd: sd,
            best: false,
        });
    }
    flag_best(&mut rows);
    Ok(EvalReport::new(rows))
}

fn flag_best(rows: &mut [EvalRow]) {
    let mut best: BTreeMap<String, usize> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let e = best.entry(r.dataset.clone()).or_insert(i);
        if r.mse < rows[*e].mse {
            *e = i;
        }
    }
    for i in best.into_values() {
        rows[i].best = true;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Delay-line length for the time-delay network.
    pub taps: usize,
    pub bagging_ntree: usize,
    pub bagging_min_leaf: usize,
    pub bagging_runs: usize,
    /// Runs per network variant.
    pub net_runs: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            taps: 2,
            bagging_ntree: 50,
            bagging_min_leaf: 5,
            bagging_runs: 10,
            net_runs: 5,
            seed: 0,
        }
    }
}

/// Any fitted model the harness knows how to persist.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Net(NetModel),
    Forest(ForestModel),
    Linear(LinearModel),
}

impl AnyModel {
    pub fn train_seconds(&self) -> f64 {
        match self {
            AnyModel::Net(m) => m.train_seconds(),
            AnyModel::Forest(m) => m.train_seconds(),
            AnyModel::Linear(m) => m.train_seconds(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            AnyModel::Net(m) => m.to_bytes(),
            AnyModel::Forest(m) => m.to_bytes(),
            AnyModel::Linear(m) => m.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let schema = model_file::peek_schema(bytes)?;
        match schema.as_str() {
            NET_SCHEMA => NetModel::from_bytes(bytes).map(AnyModel::Net),
            FOREST_SCHEMA => ForestModel::from_bytes(bytes).map(AnyModel::Forest),
            crate::baseline::LINEAR_SCHEMA => LinearModel::from_bytes(bytes).map(AnyModel::Linear),
            other => Err(Error::Model(format!("unknown model schema {other}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Predictor for AnyModel {
    fn input_columns(&self) -> &[String] {
        match self {
            AnyModel::Net(m) => m.input_columns(),
            AnyModel::Forest(m) => m.input_columns(),
            AnyModel::Linear(m) => m.input_columns(),
        }
    }

    fn predict_table(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        match self {
            AnyModel::Net(m) => m.predict_table(table),
            AnyModel::Forest(m) => m.predict_table(table),
            AnyModel::Linear(m) => m.predict_table(table),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub dataset: String,
    pub model_name: String,
    pub run: usize,
    pub model: AnyModel,
}

#[derive(Debug, Clone)]
enum Job {
    Net(NetSpec),
    Bagging,
    Ols,
}

fn compare_jobs(chosen: &NetSpec, cfg: &CompareConfig) -> Vec<(String, Job, usize)> {
    let mut out = Vec::new();
    let arch = format!("L{}-N{}", chosen.hidden_layers, chosen.neurons);
    let variants = [
        (format!("MLP-{arch}"), Variant::Plain),
        (
            format!("TimeDelay-{arch}-T{}", cfg.taps),
            Variant::TimeDelay { taps: cfg.taps },
        ),
        (format!("Recurrent-{arch}"), Variant::Recurrent),
    ];
    for (name, variant) in variants {
        let mut spec = chosen.clone();
        spec.variant = variant;
        out.push((name, Job::Net(spec), cfg.net_runs));
    }
    out.push((
        format!("Bagging-T{}", cfg.bagging_ntree),
        Job::Bagging,
        cfg.bagging_runs,
    ));
    out.push(("OLS".to_string(), Job::Ols, 1));
    out
}

/// Fits the MLP, time-delay and recurrent variants of each dataset's chosen
/// architecture, bagging and OLS. Runs execute concurrently; the returned
/// list is in a fixed order.
pub fn train_comparison(
    datasets: &[Dataset],
    chosen: &BTreeMap<String, NetSpec>,
    cfg: &CompareConfig,
) -> Result<Vec<TrainedModel>> {
    if cfg.net_runs == 0 || cfg.bagging_runs == 0 {
        return Err(Error::Config("run counts must be at least 1".into()));
    }
    let mut tasks = Vec::new();
    for ds in datasets {
        let spec = chosen.get(&ds.name).ok_or_else(|| {
            Error::Config(format!("no network architecture chosen for dataset {}", ds.name))
        })?;
        for (name, job, runs) in compare_jobs(spec, cfg) {
            for run in 0..runs {
                tasks.push((ds, name.clone(), job.clone(), run));
            }
        }
    }
    tasks
        .par_iter()
        .map(|(ds, name, job, run)| {
            let s = run_seed(cfg.seed, &ds.name, name, *run);
            let model = match job {
                Job::Net(spec) => {
                    let mut spec = spec.clone();
                    spec.seed = s;
                    AnyModel::Net(neural::train(&spec, &ds.train)?)
                }
                Job::Bagging => AnyModel::Forest(fit_bagging(
                    &ds.train,
                    cfg.bagging_ntree,
                    cfg.bagging_min_leaf,
                    s,
                )?),
                Job::Ols => AnyModel::Linear(fit_ols(&ds.train)?),
            };
            log::info!("compare {} {name} run {run} trained", ds.name);
            Ok(TrainedModel {
                dataset: ds.name.clone(),
                model_name: name.clone(),
                run: *run,
                model,
            })
        })
        .collect()
}

/// Train and test rows for every (dataset, model) group of `models`.
pub fn comparison_report(datasets: &[Dataset], models: &[TrainedModel]) -> Result<EvalReport> {
    let mut groups: Vec<((String, String), Vec<&TrainedModel>)> = Vec::new();
    for m in models {
        let key = (m.dataset.clone(), m.model_name.clone());
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1.push(m),
            None => groups.push((key, vec![m])),
        }
    }
    let mut rows = Vec::new();
    for ((ds_name, model_name), members) in groups {
        let ds = datasets
            .iter()
            .find(|d| d.name == ds_name)
            .ok_or_else(|| Error::Config(format!("unknown dataset {ds_name}")))?;
        let scored: Vec<[(f64, f64); 2]> = members
            .par_iter()
            .map(|m| {
                let tr = score(&m.model.predict_table(&ds.train)?, ds.train.target())?;
                let te = score(&m.model.predict_table(&ds.test)?, ds.test.target())?;
                Ok([tr, te])
            })
            .collect::<Result<_>>()?;
        let secs = members.iter().map(|m| m.model.train_seconds()).sum::<f64>() / members.len() as f64;
        for (k, phase) in [Phase::Train, Phase::Test].into_iter().enumerate() {
            let mses: Vec<f64> = scored.iter().map(|s| s[k].0).collect();
            let (m, sd) = mean_sd(&mses);
            rows.push(EvalRow {
                model: model_name.clone(),
                dataset: ds_name.clone(),
                phase,
                mse: m,
                rmsle: scored.iter().map(|s| s[k].1).sum::<f64>() / scored.len() as f64,
                wall_time_seconds: secs,
                n_runs: members.len(),
                mse_sd: sd,
                best: false,
            });
        }
    }
    Ok(EvalReport::new(rows))
}

/// [`train_comparison`] followed by [`comparison_report`].
pub fn compare_models(
    datasets: &[Dataset],
    chosen: &BTreeMap<String, NetSpec>,
    cfg: &CompareConfig,
) -> Result<EvalReport> {
    let models = train_comparison(datasets, chosen, cfg)?;
    comparison_report(datasets, &models)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CalendarDate, RowKey};

    fn loop_mse(p: &[f64], a: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            s += (p[i] - a[i]).powi(2);
        }
        s / p.len() as f64
    }

    #[test]
    fn metric_examples() {
        assert_eq!(rmsle(&[5.0, 0.0, 12.0], &[5.0, 0.0, 12.0]).unwrap(), 0.0);
        let e1 = std::f64::consts::E - 1.0;
        assert!((rmsle(&[0.0], &[e1]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mse(&[2.0, 3.0], &[2.0, 3.0]).unwrap(), 0.0);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmsle(&[1.0, -0.5], &[1.0, 1.0]).is_err());
        assert!(rmsle(&[], &[]).is_err());
    }

    #[test]
    fn metrics_against_loops_and_log_identity() {
        let mut rng = seed::rng(77);
        for _ in 0..100 {
            let l: Vec<f64> = (0..25).map(|_| 3.0 * seed::unit_f64(&mut rng)).collect();
            let m: Vec<f64> = (0..25).map(|_| 3.0 * seed::unit_f64(&mut rng)).collect();
            assert!((mse(&l, &m).unwrap() - loop_mse(&l, &m)).abs() < 1e-12);
            let u: Vec<f64> = l.iter().map(|x| x.exp_m1()).collect();
            let v: Vec<f64> = m.iter().map(|x| x.exp_m1()).collect();
            let r = rmsle(&u, &v).unwrap();
            assert!((r - mse(&l, &m).unwrap().sqrt()).abs() < 1e-12);
            assert_eq!(r, rmsle(&v, &u).unwrap());
        }
    }

    #[test]
    fn natural_ordering() {
        let mut v = vec!["MLP-L2-N100", "MLP-L2-N20", "MLP-L10-N5", "MLP-L3-N20"];
        v.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(v, ["MLP-L2-N20", "MLP-L2-N100", "MLP-L3-N20", "MLP-L10-N5"]);
    }

    fn dataset(name: &str, seed_: u64) -> Dataset {
        let mut rng = seed::rng(seed_);
        let start: CalendarDate = "2013-01-01".parse().unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut meta = Vec::new();
        for s in 1..=2 {
            for t in 0..40 {
                let a = seed::std_normal(&mut rng);
                let b = seed::std_normal(&mut rng);
                x.extend([a, b]);
                y.push((2.0 + 0.5 * a - 0.4 * b).max(0.0));
                meta.push(RowKey {
                    date: start.add_days(t),
                    store: s,
                    item: 1,
                });
            }
        }
        let t = FeatureTable::new(vec!["a".into(), "b".into()], x, y, meta).unwrap();
        let train: Vec<usize> = (0..80).filter(|i| i % 40 < 30).collect();
        let test: Vec<usize> = (0..80).filter(|i| i % 40 >= 30).collect();
        Dataset {
            name: name.into(),
            train: t.take_rows(&train),
            test: t.take_rows(&test),
        }
    }

    #[test]
    fn sweep_shape_and_determinism() {
        let ds = vec![dataset("Dweather", 1), dataset("Devent", 2)];
        let grid = SweepGrid {
            layers: vec![2, 3],
            neurons: vec![4, 6, 8],
        };
        let mut base = NetSpec::new(2, 4);
        base.epochs = 3;
        base.batch_size = 16;
        let a = sweep_mlp(&ds, &grid, &base, 2, 5).unwrap();
        let b = sweep_mlp(&ds, &grid, &base, 2, 5).unwrap();
        assert_eq!(a.rows().len(), 2 * 2 * 3);
        let strip = |r: &EvalReport| -> Vec<(String, String, f64, f64)> {
            r.rows()
                .iter()
                .map(|x| (x.dataset.clone(), x.model.clone(), x.mse, x.mse_sd))
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));
        for d in ["Dweather", "Devent"] {
            let best = a.best(d).unwrap();
            let min = a
                .rows()
                .iter()
                .filter(|r| r.dataset == d)
                .map(|r| r.mse)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(best.mse, min);
        }
        let back = EvalReport::from_csv(&a.to_csv().unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(a.to_text().lines().count() == 13);
    }

    #[test]
    fn comparison_rows_and_model_roundtrip() {
        let ds = vec![dataset("Dweather", 3)];
        let mut spec = NetSpec::new(2, 4);
        spec.epochs = 3;
        let chosen = BTreeMap::from([("Dweather".to_string(), spec)]);
        let cfg = CompareConfig {
            bagging_ntree: 5,
            bagging_runs: 2,
            net_runs: 2,
            ..CompareConfig::default()
        };
        let models = train_comparison(&ds, &chosen, &cfg).unwrap();
        assert_eq!(models.len(), 2 * 3 + 2 + 1);
        let report = comparison_report(&ds, &models).unwrap();
        assert_eq!(report.rows().len(), 5 * 2);
        assert!(report.rows().iter().all(|r| r.mse >= 0.0 && r.rmsle >= 0.0 && r.n_runs >= 1));
        let ols = report.find("Dweather", "OLS", Phase::Test).unwrap();
        assert_eq!(ols.n_runs, 1);
        for m in &models {
            let back = AnyModel::from_bytes(&m.model.to_bytes().unwrap()).unwrap();
            assert_eq!(
                back.predict_table(&ds[0].test).unwrap(),
                m.model.predict_table(&ds[0].test).unwrap()
            );
        }
        assert!(train_comparison(&ds, &BTreeMap::new(), &cfg).is_err());
    }
}
