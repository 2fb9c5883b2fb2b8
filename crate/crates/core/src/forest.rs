//! CART regression trees, random forests with out-of-bag error and
//! permutation importance, and bagging.
//!
//! Importance is reported as %IncMSE: the percentage increase of the pooled
//! OOB mean squared error when one column is permuted,
//! `100 * (mse_perm - mse_oob) / mse_oob`. Each tree permutes the column
//! among its own OOB rows; the permuted predictions are then averaged per
//! row exactly like the unpermuted OOB predictions. The classical
//! alternative (raw per-tree increase divided by its standard deviation
//! over trees) is not computed.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::FeatureTable;
use crate::error::{Error, Result};
use crate::model_file::{self, PayloadReader, PayloadWriter};
use crate::seed::{self, Rng};
use crate::Predictor;

pub const FOREST_SCHEMA: &str = "demand.forest/1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf { value: f64 },
}

/// A regression tree stored as a flat node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + go(t, left as usize).max(go(t, right as usize))
                }
            }
        }
        go(self, 0)
    }
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn best_split_on(
    table: &FeatureTable,
    rows: &[usize],
    centered: &[f64],
    feature: usize,
    min_leaf: usize,
    pairs: &mut Vec<(f64, f64)>,
) -> Option<(f64, f64)> {
    pairs.clear();
    pairs.extend(
        rows.iter()
            .zip(centered)
            .map(|(&r, &y)| (table.get(r, feature), y)),
    );
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let base = total * total / n as f64;
    let mut left_sum = 0.0;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n - 1 {
        left_sum += pairs[i].1;
        let n_left = i + 1;
        if n_left < min_leaf {
            continue;
        }
        if n - n_left < min_leaf {
            break;
        }
        let (lo, hi) = (pairs[i].0, pairs[i + 1].0);
        if lo >= hi {
            continue;
        }
        let right_sum = total - left_sum;
        let gain = left_sum * left_sum / n_left as f64
            + right_sum * right_sum / (n - n_left) as f64
            - base;
        if best.is_none_or(|(g, _)| gain > g) {
            let mid = lo + (hi - lo) / 2.0;
            let threshold = if mid < hi { mid } else { lo };
            best = Some((gain, threshold));
        }
    }
    best
}

/// Grows one CART tree on `rows` (a multiset of row indices).
///
/// At each node `mtry` distinct features are sampled; the split minimizing
/// the children's summed squared error wins, ties going to the lowest
/// feature index and then the lowest threshold. A node is a leaf when it
/// holds fewer than `2 * min_leaf` rows or no candidate split lowers the SSE.
pub fn fit_tree(
    table: &FeatureTable,
    rows: &[usize],
    mtry: usize,
    min_leaf: usize,
    rng: &mut Rng,
) -> Tree {
    assert!(!rows.is_empty(), "fit_tree needs at least one row");
    let d = table.n_cols();
    let mtry = mtry.clamp(1, d.max(1));
    let min_leaf = min_leaf.max(1);
    let y = table.target();

    let mut nodes: Vec<Node> = Vec::new();
    // (node slot, rows reaching it)
    let mut stack: Vec<(usize, Vec<usize>)> = vec![(0, rows.to_vec())];
    nodes.push(Node::Leaf { value: 0.0 });
    let mut pairs = Vec::new();
    let mut centered = Vec::new();

    while let Some((slot, node_rows)) = stack.pop() {
        let n = node_rows.len();
        let mean = node_rows.iter().map(|&r| y[r]).sum::<f64>() / n as f64;
        nodes[slot] = Node::Leaf { value: mean };
        if n < 2 * min_leaf || d == 0 {
            continue;
        }
        centered.clear();
        centered.extend(node_rows.iter().map(|&r| y[r] - mean));
        let sse: f64 = centered.iter().map(|c| c * c).sum();
        let scale: f64 = node_rows.iter().map(|&r| y[r] * y[r]).sum();
        if sse <= 1e-20 * scale {
            continue;
        }

        let mut features = rand::seq::index::sample(rng, d, mtry).into_vec();
        features.sort_unstable();
        let mut best: Option<BestSplit> = None;
        for &f in &features {
            if let Some((gain, threshold)) =
                best_split_on(table, &node_rows, &centered, f, min_leaf, &mut pairs)
            {
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        let Some(best) = best else { continue };
        if best.gain <= 1e-12 * sse {
            continue;
        }
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = node_rows
            .iter()
            .partition(|&&r| table.get(r, best.feature) <= best.threshold);
        let left = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[slot] = Node::Split {
            feature: best.feature as u32,
            threshold: best.threshold,
            left: left as u32,
            right: left as u32 + 1,
        };
        stack.push((left + 1, right_rows));
        stack.push((left, left_rows));
    }
    Tree { nodes }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    /// Features tried per split.
    pub mtry: usize,
    pub ntree: usize,
    pub min_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            mtry: 4,
            ntree: 50,
            min_leaf: 5,
        }
    }
}

/// How each tree's training rows are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// n draws with replacement.
    Bootstrap,
    /// Every row exactly once (no resampling).
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    columns: Vec<String>,
    trees: Vec<Tree>,
    bootstrap: Vec<Vec<u32>>,
    params: ForestParams,
    seed: u64,
    train_seconds: f64,
}

impl ForestModel {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Row multiset each tree was fit on.
    pub fn bootstrap_masks(&self) -> &[Vec<u32>] {
        &self.bootstrap
    }

    pub fn params(&self) -> ForestParams {
        self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn train_seconds(&self) -> f64 {
        self.train_seconds
    }

    /// Mean of the tree predictions for one row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    /// Builds a model from explicit parts (used for averaging identities).
    pub fn from_trees(columns: Vec<String>, trees: Vec<Tree>, params: ForestParams) -> Self {
        Self {
            columns,
            bootstrap: vec![Vec::new(); trees.len()],
            trees,
            params,
            seed: 0,
            train_seconds: 0.0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        model_file::save(path, FOREST_SCHEMA, &self.header(), &self.payload())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, p) = model_file::load::<ForestHeader>(path, FOREST_SCHEMA)?;
        Self::from_parts(h, &p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        model_file::encode(FOREST_SCHEMA, &self.header(), &self.payload())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, p) = model_file::decode::<ForestHeader>(FOREST_SCHEMA, bytes)?;
        Self::from_parts(h, &p)
    }

    fn header(&self) -> ForestHeader {
        ForestHeader {
            columns: self.columns.clone(),
            params: self.params,
            seed: self.seed,
            train_seconds: self.train_seconds,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = PayloadWriter::new();
        w.u32(self.trees.len() as u32);
        for (tree, mask) in self.trees.iter().zip(&self.bootstrap) {
            w.u32(tree.nodes.len() as u32);
            for node in &tree.nodes {
                match *node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        w.u8(1);
                        w.u32(feature);
                        w.f64(threshold);
                        w.u32(left);
                        w.u32(right);
                    }
                    Node::Leaf { value } => {
                        w.u8(0);
                        w.f64(value);
                    }
                }
            }
            w.u32(mask.len() as u32);
            for &r in mask {
                w.u32(r);
            }
        }
        w.into_bytes()
    }

    fn from_parts(h: ForestHeader, payload: &[u8]) -> Result<Self> {
        let mut r = PayloadReader::new(payload);
        let ntree = r.u32()? as usize;
        let mut trees = Vec::with_capacity(ntree);
        let mut bootstrap = Vec::with_capacity(ntree);
        for _ in 0..ntree {
            let n = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                nodes.push(match r.u8()? {
                    0 => Node::Leaf { value: r.f64()? },
                    1 => Node::Split {
                        feature: r.u32()?,
                        threshold: r.f64()?,
                        left: r.u32()?,
                        right: r.u32()?,
                    },
                    t => return Err(Error::Model(format!("bad node tag {t}"))),
                });
            }
            for node in &nodes {
                if let Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } = node
                {
                    if *feature as usize >= h.columns.len()
                        || *left as usize >= n
                        || *right as usize >= n
                    {
                        return Err(Error::Model("node index out of range".into()));
                    }
                }
            }
            if nodes.is_empty() {
                return Err(Error::Model("empty tree".into()));
            }
            trees.push(Tree { nodes });
            let m = r.u32()? as usize;
            bootstrap.push((0..m).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
        }
        r.finish()?;
        Ok(Self {
            columns: h.columns,
            trees,
            bootstrap,
            params: h.params,
            seed: h.seed,
            train_seconds: h.train_seconds,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ForestHeader {
    columns: Vec<String>,
    params: ForestParams,
    seed: u64,
    train_seconds: f64,
}

impl Predictor for ForestModel {
    fn input_columns(&self) -> &[String] {
        &self.columns
    }

    fn predict_table(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        predict_forest(self, table)
    }
}

/// Unweighted mean of tree predictions for every row of `table`.
///
/// Columns are matched by name, so `table` may carry extra columns.
pub fn predict_forest(model: &ForestModel, table: &FeatureTable) -> Result<Vec<f64>> {
    let t = table.select_columns(&model.columns)?;
    Ok((0..t.n_rows()).map(|i| model.predict_row(t.row(i))).collect())
}

fn tree_rng(seed: u64, tree: usize) -> Rng {
    seed::rng(seed::derive(seed, &["tree".into(), tree.into()]))
}

fn draw_rows(n: usize, sampling: Sampling, rng: &mut Rng) -> Vec<usize> {
    match sampling {
        Sampling::Bootstrap => (0..n).map(|_| rng.random_range(0..n)).collect(),
        Sampling::Identity => (0..n).collect(),
    }
}

/// Fits `ntree` trees; tree `t` draws from its own stream derived from
/// `(seed, t)`, so the result does not depend on the thread count.
pub fn fit_ensemble(
    table: &FeatureTable,
    params: ForestParams,
    seed: u64,
    sampling: Sampling,
) -> Result<ForestModel> {
    if table.is_empty() {
        return Err(Error::Table("cannot fit a forest on an empty table".into()));
    }
    if params.ntree == 0 || params.mtry == 0 || params.min_leaf == 0 {
        return Err(Error::Config(format!("invalid forest parameters {params:?}")));
    }
    if params.mtry > table.n_cols() {
        return Err(Error::Config(format!(
            "mtry {} exceeds column count {}",
            params.mtry,
            table.n_cols()
        )));
    }
    let start = std::time::Instant::now();
    let n = table.n_rows();
    let fitted: Vec<(Tree, Vec<u32>)> = (0..params.ntree)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(seed, t);
            let rows = draw_rows(n, sampling, &mut rng);
            let tree = fit_tree(table, &rows, params.mtry, params.min_leaf, &mut rng);
            (tree, rows.into_iter().map(|r| r as u32).collect())
        })
        .collect();
    let (trees, bootstrap) = fitted.into_iter().unzip();
    Ok(ForestModel {
        columns: table.columns().to_vec(),
        trees,
        bootstrap,
        params,
        seed,
        train_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Bagging: a forest that considers every feature at every split.
pub fn fit_bagging(
    table: &FeatureTable,
    ntree: usize,
    min_leaf: usize,
    seed: u64,
) -> Result<ForestModel> {
    let params = ForestParams {
        mtry: table.n_cols().max(1),
        ntree,
        min_leaf,
    };
    fit_ensemble(table, params, seed, Sampling::Bootstrap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub columns: Vec<String>,
    pub pct_inc_mse: Vec<f64>,
    pub oob_mse: f64,
    /// Population variance of the training target.
    pub target_variance: f64,
    pub pct_var_explained: f64,
    pub n_oob_rows: usize,
    pub n_skipped: usize,
}

impl ImportanceReport {
    /// `feature,pct_inc_mse` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,pct_inc_mse\n");
        for (c, v) in self.columns.iter().zip(&self.pct_inc_mse) {
            s.push_str(&format!("{c},{v}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<(String, f64)>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let (name, value) = line.rsplit_once(',').ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: "expected feature,pct_inc_mse".into(),
            })?;
            let v = value.parse().map_err(|_| Error::Malformed {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message: format!("bad number {value:?}"),
            })?;
            out.push((name.to_string(), v));
        }
        Ok(out)
    }
}

/// OOB contributions of one tree: base predictions and, per feature,
/// predictions with that feature permuted among the tree's OOB rows.
struct TreeOob {
    rows: Vec<usize>,
    base: Vec<f64>,
    permuted: Vec<Vec<f64>>,
}

fn tree_oob(table: &FeatureTable, tree: &Tree, mask: &[u32], seed: u64, t: usize) -> TreeOob {
    let n = table.n_rows();
    let d = table.n_cols();
    let mut in_bag = vec![false; n];
    for &r in mask {
        in_bag[r as usize] = true;
    }
    let rows: Vec<usize> = (0..n).filter(|&i| !in_bag[i]).collect();
    let base = rows.iter().map(|&i| tree.predict(table.row(i))).collect();
    let mut rng = seed::rng(seed::derive(seed, &["permute".into(), t.into()]));
    let mut scratch = vec![0.0; d];
    let mut permuted = Vec::with_capacity(d);
    for j in 0..d {
        let mut shuffled: Vec<f64> = rows.iter().map(|&i| table.get(i, j)).collect();
        shuffled.shuffle(&mut rng);
        let preds = rows
            .iter()
            .zip(&shuffled)
            .map(|(&i, &v)| {
                scratch.copy_from_slice(table.row(i));
                scratch[j] = v;
                tree.predict(&scratch)
            })
            .collect();
        permuted.push(preds);
    }
    TreeOob {
        rows,
        base,
        permuted,
    }
}

/// Random forest with OOB error, %Var explained and %IncMSE per column.
pub fn fit_forest(
    table: &FeatureTable,
    params: ForestParams,
    seed: u64,
) -> Result<(ForestModel, ImportanceReport)> {
    let var = table.target_variance();
    if var <= 0.0 {
        return Err(Error::Table("target is constant".into()));
    }
    let model = fit_ensemble(table, params, seed, Sampling::Bootstrap)?;
    let report = importance(table, &model)?;
    Ok((model, report))
}

/// Out-of-bag error and permutation importance of a bootstrapped model.
pub fn importance(table: &FeatureTable, model: &ForestModel) -> Result<ImportanceReport> {
    let n = table.n_rows();
    let d = table.n_cols();
    if model.columns() != table.columns() {
        return Err(Error::SchemaMismatch {
            missing: model
                .columns()
                .iter()
                .filter(|c| !table.columns().contains(c))
                .cloned()
                .collect(),
        });
    }
    let mut base_sum = vec![0.0; n];
    let mut count = vec![0u32; n];
    let mut perm_sum = vec![vec![0.0; n]; d];

    // Bounded-memory chunks, reduced in tree order for determinism.
    let chunk = (rayon::current_num_threads() * 2).max(1);
    let ntree = model.trees.len();
    for start in (0..ntree).step_by(chunk) {
        let end = (start + chunk).min(ntree);
        let parts: Vec<TreeOob> = (start..end)
            .into_par_iter()
            .map(|t| tree_oob(table, &model.trees[t], &model.bootstrap[t], model.seed, t))
            .collect();
        for part in parts {
            for (k, &i) in part.rows.iter().enumerate() {
                base_sum[i] += part.base[k];
                count[i] += 1;
                for j in 0..d {
                    perm_sum[j][i] += part.permuted[j][k];
                }
            }
        }
    }

    let y = table.target();
    let oob_rows: Vec<usize> = (0..n).filter(|&i| count[i] > 0).collect();
    let skipped = n - oob_rows.len();
    if oob_rows.is_empty() {
        return Err(Error::Numeric(
            "no row has an out-of-bag tree; increase ntree".into(),
        ));
    }
    if skipped > 0 {
        log::warn!("{skipped} row(s) had no out-of-bag tree and were skipped");
    }
    let mse_of = |sums: &[f64]| {
        oob_rows
            .iter()
            .map(|&i| {
                let e = sums[i] / f64::from(count[i]) - y[i];
                e * e
            })
            .sum::<f64>()
            / oob_rows.len() as f64
    };
    let oob_mse = mse_of(&base_sum);
    let denom = oob_mse.max(f64::MIN_POSITIVE);
    let pct_inc_mse = perm_sum
        .iter()
        .map(|s| 100.0 * (mse_of(s) - oob_mse) / denom)
        .collect();
    let target_variance = table.target_variance();
    Ok(ImportanceReport {
        columns: table.columns().to_vec(),
        pct_inc_mse,
        oob_mse,
        target_variance,
        pct_var_explained: pct_var_explained(oob_mse, target_variance),
        n_oob_rows: oob_rows.len(),
        n_skipped: skipped,
    })
}

pub fn pct_var_explained(oob_mse: f64, target_variance: f64) -> f64 {
    100.0 * (1.0 - oob_mse / target_variance)
}

/// Columns with `|%IncMSE| > threshold`, in original order. Never empty:
/// if nothing passes, the single most important column is kept.
pub fn select_features(report: &ImportanceReport, threshold: f64) -> Vec<String> {
    let kept: Vec<String> = report
        .columns
        .iter()
        .zip(&report.pct_inc_mse)
        .filter(|(_, v)| v.abs() > threshold)
        .map(|(c, _)| c.clone())
        .collect();
    if !kept.is_empty() {
        return kept;
    }
    let mut top = 0;
    for (j, v) in report.pct_inc_mse.iter().enumerate() {
        if v.abs() > report.pct_inc_mse[top].abs() {
            top = j;
        }
    }
    log::warn!(
        "no column has |%IncMSE| > {threshold}; keeping top column {}",
        report.columns[top]
    );
    vec![report.columns[top].clone()]
}
