//! Feed-forward networks trained by backpropagation, with time-delay input
//! expansion and an Elman-style recurrent variant.
//!
//! Hidden units use the logistic sigmoid and the single output unit is
//! linear, so predictions live on the log1p scale. Inputs are z-scored with
//! train-fit statistics before anything else happens.
//!
//! Panels of many (store, item) series are handled per series: delay lines
//! and recurrent context never cross a series boundary, and the context is
//! reset to zero at the start of every series.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{mean, CalendarDate, FeatureTable, RowKey};
use crate::error::{Error, Result};
use crate::model_file::{self, PayloadReader, PayloadWriter};
use crate::seed::{self, Rng};
use crate::Predictor;

pub const NET_SCHEMA: &str = "demand.net/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Plain,
    TimeDelay { taps: usize },
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub hidden_layers: usize,
    pub neurons: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Stop once the epoch loss has not improved by `min_improvement`
    /// for this many epochs.
    pub patience: usize,
    pub min_improvement: f64,
    /// Truncation length for backpropagation through time.
    pub bptt_window: usize,
}

impl NetSpec {
    pub fn new(hidden_layers: usize, neurons: usize) -> Self {
        Self {
            hidden_layers,
            neurons,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 128,
            seed: 0,
            variant: Variant::Plain,
            patience: 10,
            min_improvement: 1e-6,
            bptt_window: 16,
        }
    }

    /// `MLP-L{layers}-N{neurons}`.
    pub fn name(&self) -> String {
        format!("MLP-L{}-N{}", self.hidden_layers, self.neurons)
    }

    /// Parses `MLP-L3-N70` into `(3, 70)`.
    pub fn parse_name(name: &str) -> Option<(usize, usize)> {
        let rest = name.strip_prefix("MLP-L")?;
        let (l, n) = rest.split_once("-N")?;
        Some((l.parse().ok()?, n.parse().ok()?))
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.hidden_layers) {
            return Err(Error::Config(format!(
                "hidden_layers must be 2..=4, got {}",
                self.hidden_layers
            )));
        }
        if self.neurons == 0 {
            return Err(Error::Config("neurons must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.bptt_window == 0 {
            return Err(Error::Config("bptt_window must be positive".into()));
        }
        if !(self.min_improvement >= 0.0) {
            return Err(Error::Config("min_improvement must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-column z-score parameters fit on a training table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    columns: Vec<String>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Standardizer {
    /// Population mean and sd of every column. Constant columns get sd 0
    /// and are mapped to 0 by [`Standardizer::transform`].
    pub fn fit(table: &FeatureTable) -> Self {
        let n = table.n_rows() as f64;
        let mut m = Vec::with_capacity(table.n_cols());
        let mut sd = Vec::with_capacity(table.n_cols());
        for j in 0..table.n_cols() {
            let mu = table.column(j).sum::<f64>() / n;
            let var = table.column(j).map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            m.push(mu);
            sd.push(var.sqrt());
        }
        Self {
            columns: table.columns().to_vec(),
            mean: m,
            sd,
        }
    }

    pub fn from_parts(columns: Vec<String>, mean: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        if mean.len() != columns.len() || sd.len() != columns.len() {
            return Err(Error::Model("standardizer lengths disagree".into()));
        }
        if mean.iter().chain(&sd).any(|v| !v.is_finite()) || sd.iter().any(|&s| s < 0.0) {
            return Err(Error::Model("non-finite standardizer parameter".into()));
        }
        Ok(Self { columns, mean, sd })
    }

    pub fn is_constant(&self, j: usize) -> bool {
        !(self.sd[j] > 1e-12 * self.mean[j].abs().max(1.0))
    }

    /// Drops constant columns, logging a warning naming them.
    pub fn drop_constant(self) -> Self {
        let keep: Vec<usize> = (0..self.columns.len())
            .filter(|&j| !self.is_constant(j))
            .collect();
        if keep.len() < self.columns.len() {
            let dropped: Vec<&str> = (0..self.columns.len())
                .filter(|&j| self.is_constant(j))
                .map(|j| self.columns[j].as_str())
                .collect();
            log::warn!("dropping constant column(s) {dropped:?}");
        }
        Self {
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            mean: keep.iter().map(|&j| self.mean[j]).collect(),
            sd: keep.iter().map(|&j| self.sd[j]).collect(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn means(&self) -> &[f64] {
        &self.mean
    }

    pub fn sds(&self) -> &[f64] {
        &self.sd
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Row-major z-scores of this standardizer's columns, looked up by name.
    pub fn transform(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        let sel = table.select_columns(&self.columns)?;
        let k = self.columns.len();
        let mut out = sel.values().to_vec();
        for row in out.chunks_mut(k.max(1)) {
            for (j, v) in row.iter_mut().enumerate().take(k) {
                let s = if self.is_constant(j) { 1.0 } else { self.sd[j] };
                *v = (*v - self.mean[j]) / s;
            }
        }
        if k == 0 {
            out.clear();
        }
        Ok(out)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Parameters of a fully connected net stored in one flat vector.
///
/// For each layer the weight matrix (outputs × inputs, row-major) comes
/// first, then its bias. A recurrent net appends the context matrix
/// `W_h` (h1 × h1, row-major) at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    sizes: Vec<usize>,
    recurrent: bool,
    layers: Vec<(usize, usize)>,
    ctx_off: usize,
    params: Vec<f64>,
}

fn layout(sizes: &[usize], recurrent: bool) -> Result<(Vec<(usize, usize)>, usize, usize)> {
    if sizes.len() < 3 {
        return Err(Error::Config(
            "a network needs an input, at least one hidden layer and an output".into(),
        ));
    }
    if sizes.iter().any(|&s| s == 0) || *sizes.last().expect("non-empty") != 1 {
        return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
    }
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    let mut off = 0;
    for w in sizes.windows(2) {
        let w_off = off;
        off += w[0] * w[1];
        layers.push((w_off, off));
        off += w[1];
    }
    let ctx_off = off;
    if recurrent {
        off += sizes[1] * sizes[1];
    }
    Ok((layers, ctx_off, off))
}

impl Network {
    pub fn zeros(sizes: &[usize], recurrent: bool) -> Result<Self> {
        let (layers, ctx_off, n) = layout(sizes, recurrent)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            recurrent,
            layers,
            ctx_off,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(sizes: &[usize], recurrent: bool, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes, recurrent)?;
        if params.len() != net.params.len() {
            return Err(Error::WidthMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Model("non-finite network parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    /// Uniform(-r, r) weights with `r = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases.
    pub fn glorot(sizes: &[usize], recurrent: bool, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes, recurrent)?;
        for (l, &(w_off, b_off)) in net.layers.iter().enumerate() {
            let r = (6.0 / (sizes[l] + sizes[l + 1]) as f64).sqrt();
            for p in &mut net.params[w_off..b_off] {
                *p = rng.random_range(-r..r);
            }
        }
        if recurrent {
            let h = sizes[1];
            let r = (6.0 / (2 * h) as f64).sqrt();
            for p in &mut net.params[net.ctx_off..] {
                *p = rng.random_range(-r..r);
            }
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn context_width(&self) -> usize {
        self.sizes[1]
    }

    pub fn is_recurrent(&self) -> bool {
        self.recurrent
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let (w, b) = self.layers[layer];
        &self.params[w..b]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let (w, b) = self.layers[layer];
        &mut self.params[w..b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let b = self.layers[layer].1;
        &self.params[b..b + self.sizes[layer + 1]]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let b = self.layers[layer].1;
        let n = self.sizes[layer + 1];
        &mut self.params[b..b + n]
    }

    pub fn context_weights(&self) -> Option<&[f64]> {
        self.recurrent.then(|| &self.params[self.ctx_off..])
    }

    pub fn context_weights_mut(&mut self) -> Option<&mut [f64]> {
        if self.recurrent {
            Some(&mut self.params[self.ctx_off..])
        } else {
            None
        }
    }

    /// The same net with the context matrix removed.
    pub fn without_context(&self) -> Network {
        let mut params = self.params.clone();
        params.truncate(self.ctx_off);
        Network {
            sizes: self.sizes.clone(),
            recurrent: false,
            layers: self.layers.clone(),
            ctx_off: self.ctx_off,
            params,
        }
    }

    fn workspace(&self) -> Vec<Vec<f64>> {
        self.sizes.iter().map(|&s| vec![0.0; s]).collect()
    }

    /// Feed-forward pass of an already standardized (and expanded) input.
    /// A recurrent net runs with a zero context.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_width(x.len(), self.input_width())?;
        let mut acts = self.workspace();
        let ctx = self.recurrent.then(|| vec![0.0; self.context_width()]);
        Ok(self.forward_into(x, ctx.as_deref(), &mut acts))
    }

    /// One Elman step: `h_t = g(W_1 x_t + W_h h_prev + b_1)`, then the
    /// remaining layers. Returns the prediction and `h_t`.
    pub fn recurrent_step(&self, x: &[f64], h_prev: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_width(x.len(), self.input_width())?;
        self.check_width(h_prev.len(), self.context_width())?;
        let mut acts = self.workspace();
        let ctx = self.recurrent.then_some(h_prev);
        let y = self.forward_into(x, ctx, &mut acts);
        Ok((y, acts.swap_remove(1)))
    }

    fn check_width(&self, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(Error::WidthMismatch { expected, got });
        }
        Ok(())
    }

    /// Fills `acts[0..]` with the input, hidden activations and output.
    fn forward_into(&self, x: &[f64], ctx: Option<&[f64]>, acts: &mut [Vec<f64>]) -> f64 {
        acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, &(w_off, b_off)) in self.layers.iter().enumerate() {
            let inp = self.sizes[l];
            let out = self.sizes[l + 1];
            let (lo, hi) = acts.split_at_mut(l + 1);
            let a_in = &lo[l];
            let a_out = &mut hi[0];
            for o in 0..out {
                let w = &self.params[w_off + o * inp..w_off + (o + 1) * inp];
                let mut z = self.params[b_off + o];
                for i in 0..inp {
                    z += w[i] * a_in[i];
                }
                if l == 0 {
                    if let Some(c) = ctx {
                        let h = c.len();
                        let wh = &self.params[self.ctx_off + o * h..self.ctx_off + (o + 1) * h];
                        for j in 0..h {
                            z += wh[j] * c[j];
                        }
                    }
                }
                a_out[o] = if l == last { z } else { sigmoid(z) };
            }
        }
        acts[last + 1][0]
    }

    /// Adds the gradient of a loss with `dL/dy = d_out` to `grad`.
    /// `carry` is dL/dh_1 arriving from the next time step. On return
    /// `scratch.delta` holds dL/dz_1.
    fn backward_into(
        &self,
        acts: &[Vec<f64>],
        ctx: Option<&[f64]>,
        d_out: f64,
        carry: Option<&[f64]>,
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) {
        let delta = &mut scratch.delta;
        let next = &mut scratch.next;
        delta.clear();
        delta.push(d_out);
        for l in (0..self.layers.len()).rev() {
            let (w_off, b_off) = self.layers[l];
            let inp = self.sizes[l];
            let a_in = &acts[l];
            for (o, &d) in delta.iter().enumerate() {
                grad[b_off + o] += d;
                let g = &mut grad[w_off + o * inp..w_off + (o + 1) * inp];
                for i in 0..inp {
                    g[i] += d * a_in[i];
                }
            }
            if l == 0 {
                if let Some(c) = ctx {
                    let h = c.len();
                    for (o, &d) in delta.iter().enumerate() {
                        let g = &mut grad[self.ctx_off + o * h..self.ctx_off + (o + 1) * h];
                        for j in 0..h {
                            g[j] += d * c[j];
                        }
                    }
                }
                break;
            }
            next.clear();
            next.resize(inp, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                let w = &self.params[w_off + o * inp..w_off + (o + 1) * inp];
                for i in 0..inp {
                    next[i] += w[i] * d;
                }
            }
            if l == 1 {
                if let Some(c) = carry {
                    for i in 0..inp {
                        next[i] += c[i];
                    }
                }
            }
            for i in 0..inp {
                let a = a_in[i];
                next[i] *= a * (1.0 - a);
            }
            std::mem::swap(delta, next);
        }
    }

    /// `W_h^T dz_1`, the gradient flowing into the previous context.
    fn context_carry(&self, dz1: &[f64], out: &mut [f64]) {
        let h = self.context_width();
        out.fill(0.0);
        for (o, &d) in dz1.iter().enumerate() {
            let wh = &self.params[self.ctx_off + o * h..self.ctx_off + (o + 1) * h];
            for j in 0..h {
                out[j] += wh[j] * d;
            }
        }
    }
}

#[derive(Default)]
struct Scratch {
    delta: Vec<f64>,
    next: Vec<f64>,
}

/// Network-ready inputs: standardized rows plus, for recurrent nets, the
/// date-ordered row indices of every series.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    x: Vec<f64>,
    width: usize,
    y: Vec<f64>,
    series: Option<Vec<Vec<usize>>>,
}

impl TrainingData {
    pub fn rows(x: Vec<f64>, width: usize, y: Vec<f64>) -> Result<Self> {
        if x.len() != width * y.len() {
            return Err(Error::WidthMismatch {
                expected: width * y.len(),
                got: x.len(),
            });
        }
        Ok(Self {
            x,
            width,
            y,
            series: None,
        })
    }

    /// Every row must appear in exactly one series.
    pub fn sequences(x: Vec<f64>, width: usize, y: Vec<f64>, series: Vec<Vec<usize>>) -> Result<Self> {
        let mut data = Self::rows(x, width, y)?;
        let mut seen = vec![false; data.y.len()];
        for &i in series.iter().flatten() {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Table(format!("series index {i} out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Table("series do not cover every row".into()));
        }
        data.series = Some(series);
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.width..(i + 1) * self.width]
    }

    pub fn target(&self) -> &[f64] {
        &self.y
    }
}

/// Groups rows by (store, item) and orders each group by date.
pub fn series_index(meta: &[RowKey]) -> Result<Vec<Vec<usize>>> {
    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, k) in meta.iter().enumerate() {
        groups.entry((k.store, k.item)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((store, item), mut rows) in groups {
        rows.sort_by_key(|&i| meta[i].date);
        if let Some(w) = rows.windows(2).find(|w| meta[w[0]].date == meta[w[1]].date) {
            return Err(Error::UnorderedSeries(format!(
                "store {store}, item {item} has two rows dated {}",
                meta[w[0]].date
            )));
        }
        out.push(rows);
    }
    Ok(out)
}

/// Concatenates each row with its `taps` predecessors in the same series,
/// zero-padding before the series start.
pub fn expand_time_delay(series: &[(CalendarDate, Vec<f64>)], taps: usize) -> Result<Vec<Vec<f64>>> {
    if let Some(w) = series.windows(2).find(|w| w[0].0 >= w[1].0) {
        return Err(Error::UnorderedSeries(format!("{} then {}", w[0].0, w[1].0)));
    }
    let d = series.first().map_or(0, |r| r.1.len());
    if let Some(r) = series.iter().find(|r| r.1.len() != d) {
        return Err(Error::WidthMismatch {
            expected: d,
            got: r.1.len(),
        });
    }
    Ok((0..series.len())
        .map(|t| {
            let mut v = Vec::with_capacity(d * (taps + 1));
            for k in 0..=taps {
                match t.checked_sub(k) {
                    Some(s) => v.extend_from_slice(&series[s].1),
                    None => v.extend(std::iter::repeat_n(0.0, d)),
                }
            }
            v
        })
        .collect())
}

fn expand_rows(x: &[f64], d: usize, series: &[Vec<usize>], taps: usize) -> Vec<f64> {
    let n = x.len() / d.max(1);
    let w = d * (taps + 1);
    let mut out = vec![0.0; n * w];
    for rows in series {
        for (t, &i) in rows.iter().enumerate() {
            for k in 0..=taps.min(t) {
                let src = rows[t - k];
                out[i * w + k * d..i * w + (k + 1) * d].copy_from_slice(&x[src * d..(src + 1) * d]);
            }
        }
    }
    out
}

/// Standardizes and, depending on the variant, expands or sequences a table.
pub fn prepare(variant: Variant, standardizer: &Standardizer, table: &FeatureTable) -> Result<TrainingData> {
    let x = standardizer.transform(table)?;
    let d = standardizer.len();
    let y = table.target().to_vec();
    match variant {
        Variant::Plain => TrainingData::rows(x, d, y),
        Variant::TimeDelay { taps } => {
            let series = series_index(table.meta())?;
            TrainingData::rows(expand_rows(&x, d, &series, taps), d * (taps + 1), y)
        }
        Variant::Recurrent => {
            let series = series_index(table.meta())?;
            TrainingData::sequences(x, d, y, series)
        }
    }
}

/// Predictions for every row; recurrent nets run each series from a zero
/// context without truncation.
pub fn predict_data(net: &Network, data: &TrainingData) -> Result<Vec<f64>> {
    if data.width != net.input_width() {
        return Err(Error::WidthMismatch {
            expected: net.input_width(),
            got: data.width,
        });
    }
    let mut acts = net.workspace();
    let mut out = vec![0.0; data.len()];
    match (&data.series, net.recurrent) {
        (Some(series), true) => {
            let mut ctx = vec![0.0; net.context_width()];
            for rows in series {
                ctx.fill(0.0);
                for &i in rows {
                    out[i] = net.forward_into(data.row(i), Some(&ctx), &mut acts);
                    ctx.copy_from_slice(&acts[1]);
                }
            }
        }
        (None, false) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = net.forward_into(data.row(i), None, &mut acts);
            }
        }
        _ => {
            return Err(Error::Table(
                "recurrent nets need sequence data and vice versa".into(),
            ))
        }
    }
    Ok(out)
}

/// Mean squared error of the net over `data`.
pub fn batch_loss(net: &Network, data: &TrainingData) -> Result<f64> {
    let p = predict_data(net, data)?;
    Ok(p.iter()
        .zip(&data.y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / data.len() as f64)
}

struct SeqWorkspace {
    steps: Vec<Vec<Vec<f64>>>,
    errors: Vec<f64>,
    carry: Vec<f64>,
    scratch: Scratch,
}

impl SeqWorkspace {
    fn new(net: &Network, window: usize) -> Self {
        Self {
            steps: (0..window).map(|_| net.workspace()).collect(),
            errors: vec![0.0; window],
            carry: vec![0.0; net.context_width()],
            scratch: Scratch::default(),
        }
    }
}

/// Forward and truncated-BPTT backward over one window of a series that
/// starts from the (constant) context `ctx`. Accumulates the gradient of
/// the window's summed squared error into `grad`, returns that error and
/// overwrites `ctx` with the final hidden state.
fn window_pass(
    net: &Network,
    data: &TrainingData,
    rows: &[usize],
    ctx: &mut [f64],
    grad: &mut [f64],
    ws: &mut SeqWorkspace,
) -> f64 {
    let t_len = rows.len();
    let mut sse = 0.0;
    for (t, &i) in rows.iter().enumerate() {
        let (prev, cur) = ws.steps.split_at_mut(t);
        let c: &[f64] = if t == 0 { ctx } else { &prev[t - 1][1] };
        let y = net.forward_into(data.row(i), Some(c), &mut cur[0]);
        let e = y - data.y[i];
        ws.errors[t] = e;
        sse += e * e;
    }
    ws.carry.fill(0.0);
    let mut carry_next = vec![0.0; net.context_width()];
    for t in (0..t_len).rev() {
        let c: &[f64] = if t == 0 { ctx } else { &ws.steps[t - 1][1] };
        net.backward_into(
            &ws.steps[t],
            Some(c),
            2.0 * ws.errors[t],
            Some(&ws.carry),
            grad,
            &mut ws.scratch,
        );
        net.context_carry(&ws.scratch.delta, &mut carry_next);
        std::mem::swap(&mut ws.carry, &mut carry_next);
    }
    ctx.copy_from_slice(&ws.steps[t_len - 1][1]);
    sse
}

/// Backpropagated gradient of the batch mean squared error over all of
/// `data`, along with that loss. Recurrent data is processed in windows of
/// `bptt_window` steps with the gradient stopped at window boundaries, so
/// the gradient is exact when every series fits in one window.
pub fn batch_gradient(net: &Network, data: &TrainingData, bptt_window: usize) -> Result<(f64, Vec<f64>)> {
    if data.width != net.input_width() {
        return Err(Error::WidthMismatch {
            expected: net.input_width(),
            got: data.width,
        });
    }
    let n = data.len() as f64;
    let mut grad = vec![0.0; net.params.len()];
    let mut sse = 0.0;
    match (&data.series, net.recurrent) {
        (Some(series), true) => {
            let window = bptt_window.max(1);
            let mut ws = SeqWorkspace::new(net, window);
            let mut ctx = vec![0.0; net.context_width()];
            for rows in series {
                ctx.fill(0.0);
                for chunk in rows.chunks(window) {
                    sse += window_pass(net, data, chunk, &mut ctx, &mut grad, &mut ws);
                }
            }
        }
        (None, false) => {
            let mut acts = net.workspace();
            let mut scratch = Scratch::default();
            for i in 0..data.len() {
                let e = net.forward_into(data.row(i), None, &mut acts) - data.y[i];
                sse += e * e;
                net.backward_into(&acts, None, 2.0 * e, None, &mut grad, &mut scratch);
            }
        }
        _ => {
            return Err(Error::Table(
                "recurrent nets need sequence data and vice versa".into(),
            ))
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok((sse / n, grad))
}

/// Largest relative disagreement between [`batch_gradient`] and central
/// finite differences over `n_sampled` randomly chosen parameters:
/// `|g_bp - g_fd| / max(1e-8, |g_bp| + |g_fd|)`.
pub fn check_network_gradient(
    net: &Network,
    data: &TrainingData,
    bptt_window: usize,
    n_sampled: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let (_, grad) = batch_gradient(net, data, bptt_window)?;
    let mut rng = seed::rng(seed::derive(seed, &["gradient_check".into()]));
    let p = net.params.len();
    let picks = rand::seq::index::sample(&mut rng, p, n_sampled.min(p));
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for k in picks.iter() {
        let orig = probe.params[k];
        probe.params[k] = orig + h;
        let up = batch_loss(&probe, data)?;
        probe.params[k] = orig - h;
        let down = batch_loss(&probe, data)?;
        probe.params[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (grad[k] - fd).abs() / (grad[k].abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn initial_network(spec: &NetSpec, data: &TrainingData, rng: &mut Rng) -> Result<Network> {
    let mut sizes = vec![data.width];
    sizes.extend(std::iter::repeat_n(spec.neurons, spec.hidden_layers));
    sizes.push(1);
    let mut net = Network::glorot(&sizes, spec.variant == Variant::Recurrent, rng)?;
    // start the linear output at the target mean
    let last = net.n_layers() - 1;
    net.bias_mut(last)[0] = mean(&data.y);
    Ok(net)
}

fn fit_standardizer(table: &FeatureTable) -> Result<Standardizer> {
    let s = Standardizer::fit(table).drop_constant();
    if s.is_empty() {
        return Err(Error::Table("every feature column is constant".into()));
    }
    Ok(s)
}

/// Gradient check of the spec's freshly initialized net on `table`.
pub fn gradient_check(spec: &NetSpec, table: &FeatureTable, n_params_sampled: usize, h: f64) -> Result<f64> {
    spec.validate()?;
    let st = fit_standardizer(table)?;
    let data = prepare(spec.variant, &st, table)?;
    let net = initial_network(spec, &data, &mut seed::rng(spec.seed))?;
    check_network_gradient(&net, &data, spec.bptt_window, n_params_sampled, h, spec.seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetModel {
    spec: NetSpec,
    input_columns: Vec<String>,
    standardizer: Standardizer,
    network: Network,
    train_mse: f64,
    train_seconds: f64,
    epochs_run: usize,
}

fn sgd_step(params: &mut [f64], grad: &[f64], scale: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= scale * g;
    }
}

/// Trains by mini-batch SGD on the mean squared error of the log1p target.
///
/// Rows (or, for the recurrent variant, whole series) are visited in an
/// order reshuffled every epoch from `spec.seed`.
pub fn train(spec: &NetSpec, table: &FeatureTable) -> Result<NetModel> {
    spec.validate()?;
    if table.is_empty() {
        return Err(Error::Table("cannot train on an empty table".into()));
    }
    let started = Instant::now();
    let standardizer = fit_standardizer(table)?;
    let data = prepare(spec.variant, &standardizer, table)?;
    let mut rng = seed::rng(spec.seed);
    let mut net = initial_network(spec, &data, &mut rng)?;

    let mut grad = vec![0.0; net.params.len()];
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs_run = 0;
    let n = data.len() as f64;
    for epoch in 0..spec.epochs {
        let sse = match &data.series {
            None => rows_epoch(spec, &mut net, &data, &mut grad, &mut rng),
            Some(series) => sequence_epoch(spec, &mut net, &data, series, &mut grad, &mut rng),
        };
        let loss = sse / n;
        epochs_run = epoch + 1;
        if !loss.is_finite() || net.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch, loss });
        }
        log::debug!("{} epoch {epoch}: loss {loss:.6}", spec.name());
        if loss < best - spec.min_improvement {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= spec.patience {
                break;
            }
        }
    }
    let train_mse = batch_loss(&net, &data)?;
    if !train_mse.is_finite() {
        return Err(Error::Divergence {
            epoch: epochs_run,
            loss: train_mse,
        });
    }
    Ok(NetModel {
        spec: spec.clone(),
        input_columns: table.columns().to_vec(),
        standardizer,
        network: net,
        train_mse,
        train_seconds: started.elapsed().as_secs_f64(),
        epochs_run,
    })
}

fn rows_epoch(spec: &NetSpec, net: &mut Network, data: &TrainingData, grad: &mut [f64], rng: &mut Rng) -> f64 {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut acts = net.workspace();
    let mut scratch = Scratch::default();
    let mut sse = 0.0;
    for batch in order.chunks(spec.batch_size) {
        grad.fill(0.0);
        for &i in batch {
            let e = net.forward_into(data.row(i), None, &mut acts) - data.y[i];
            sse += e * e;
            net.backward_into(&acts, None, 2.0 * e, None, grad, &mut scratch);
        }
        sgd_step(&mut net.params, grad, spec.learning_rate / batch.len() as f64);
    }
    sse
}

/// One pass over all series. Gradients from consecutive windows accumulate
/// until at least `batch_size` rows have been seen, then one step is taken.
fn sequence_epoch(
    spec: &NetSpec,
    net: &mut Network,
    data: &TrainingData,
    series: &[Vec<usize>],
    grad: &mut [f64],
    rng: &mut Rng,
) -> f64 {
    let mut order: Vec<usize> = (0..series.len()).collect();
    order.shuffle(rng);
    let mut ws = SeqWorkspace::new(net, spec.bptt_window);
    let mut ctx = vec![0.0; net.context_width()];
    let mut pending = 0usize;
    let mut sse = 0.0;
    grad.fill(0.0);
    for &s in &order {
        ctx.fill(0.0);
        for chunk in series[s].chunks(spec.bptt_window) {
            sse += window_pass(net, data, chunk, &mut ctx, grad, &mut ws);
            pending += chunk.len();
            if pending >= spec.batch_size {
                sgd_step(&mut net.params, grad, spec.learning_rate / pending as f64);
                grad.fill(0.0);
                pending = 0;
            }
        }
    }
    if pending > 0 {
        sgd_step(&mut net.params, grad, spec.learning_rate / pending as f64);
    }
    sse
}

#[derive(Debug, Serialize, Deserialize)]
struct NetHeader {
    spec: NetSpec,
    input_columns: Vec<String>,
    standardized_columns: Vec<String>,
    sizes: Vec<usize>,
    recurrent: bool,
    train_mse: f64,
    train_seconds: f64,
    epochs_run: usize,
}

impl NetModel {
    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Final full-pass mean squared error on the training table.
    pub fn train_mse(&self) -> f64 {
        self.train_mse
    }

    pub fn train_seconds(&self) -> f64 {
        self.train_seconds
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = NetHeader {
            spec: self.spec.clone(),
            input_columns: self.input_columns.clone(),
            standardized_columns: self.standardizer.columns.clone(),
            sizes: self.network.sizes.clone(),
            recurrent: self.network.recurrent,
            train_mse: self.train_mse,
            train_seconds: self.train_seconds,
            epochs_run: self.epochs_run,
        };
        let mut w = PayloadWriter::new();
        w.f64s(&self.standardizer.mean);
        w.f64s(&self.standardizer.sd);
        w.f64s(&self.network.params);
        model_file::encode(NET_SCHEMA, &header, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (NetHeader, _) = model_file::decode(NET_SCHEMA, bytes)?;
        let mut r = PayloadReader::new(&payload);
        let mean = r.f64s()?;
        let sd = r.f64s()?;
        let params = r.f64s()?;
        r.finish()?;
        let standardizer = Standardizer::from_parts(h.standardized_columns, mean, sd)?;
        let network = Network::from_params(&h.sizes, h.recurrent, params)?;
        let width = match h.spec.variant {
            Variant::TimeDelay { taps } => standardizer.len() * (taps + 1),
            _ => standardizer.len(),
        };
        if network.input_width() != width {
            return Err(Error::Model(format!(
                "network expects {} inputs but the standardizer yields {width}",
                network.input_width()
            )));
        }
        Ok(Self {
            spec: h.spec,
            input_columns: h.input_columns,
            standardizer,
            network,
            train_mse: h.train_mse,
            train_seconds: h.train_seconds,
            epochs_run: h.epochs_run,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Predictor for NetModel {
    fn input_columns(&self) -> &[String] {
        &self.input_columns
    }

    fn predict_table(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        let data = prepare(self.spec.variant, &self.standardizer, table)?;
        predict_data(&self.network, &data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RowKey;

    fn date(s: &str) -> CalendarDate {
        s.parse().unwrap()
    }

    /// Panel of `stores` series with `days` rows each and a smooth target
    /// in the first three columns.
    fn panel(stores: u32, days: i64, d: usize, seed: u64) -> FeatureTable {
        let mut rng = seed::rng(seed);
        let start = date("2013-01-01");
        let mut values = Vec::new();
        let mut target = Vec::new();
        let mut meta = Vec::new();
        for s in 1..=stores {
            for t in 0..days {
                let x: Vec<f64> = (0..d).map(|_| seed::std_normal(&mut rng)).collect();
                let y = 2.0 + 0.5 * x[0] - 0.3 * x[1] + 0.2 * x[2].tanh();
                values.extend(&x);
                target.push(y.max(0.0));
                meta.push(RowKey {
                    date: start.add_days(t),
                    store: s,
                    item: 1,
                });
            }
        }
        let cols = (0..d).map(|j| format!("x{j}")).collect();
        FeatureTable::new(cols, values, target, meta).unwrap()
    }

    fn scalar_oracle(ws: &[Vec<Vec<f64>>], bs: &[Vec<f64>], x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        for (l, (w, b)) in ws.iter().zip(bs).enumerate() {
            let mut next = Vec::new();
            for (row, bias) in w.iter().zip(b) {
                let mut z = *bias;
                for (wi, ai) in row.iter().zip(&a) {
                    z += wi * ai;
                }
                next.push(if l + 1 == ws.len() { z } else { 1.0 / (1.0 + (-z).exp()) });
            }
            a = next;
        }
        a[0]
    }

    #[test]
    fn forward_hand_examples() {
        let mut net = Network::zeros(&[1, 1, 1], false).unwrap();
        net.weights_mut(1)[0] = 2.0;
        assert_eq!(net.forward(&[3.7]).unwrap(), 1.0);

        let zero = Network::zeros(&[3, 5, 5, 1], false).unwrap();
        for x in [[0.0, 0.0, 0.0], [1.0, -2.0, 9.0]] {
            assert_eq!(zero.forward(&x).unwrap(), 0.0);
        }
        assert!(matches!(
            zero.forward(&[1.0]),
            Err(Error::WidthMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = seed::rng(11);
        for _ in 0..20 {
            let net = Network::glorot(&[3, 4, 4, 1], false, &mut rng).unwrap();
            let mut net = net;
            for p in net.params_mut() {
                *p += seed::std_normal(&mut rng) * 0.5;
            }
            let mut ws = Vec::new();
            let mut bs = Vec::new();
            for l in 0..3 {
                let inp = net.sizes()[l];
                ws.push(net.weights(l).chunks(inp).map(|c| c.to_vec()).collect::<Vec<_>>());
                bs.push(net.bias(l).to_vec());
            }
            let x: Vec<f64> = (0..3).map(|_| seed::std_normal(&mut rng) * 2.0).collect();
            let got = net.forward(&x).unwrap();
            assert!((got - scalar_oracle(&ws, &bs, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn time_delay_examples() {
        let rows = vec![
            (date("2013-01-01"), vec![1.0]),
            (date("2013-01-02"), vec![2.0]),
            (date("2013-01-04"), vec![3.0]),
        ];
        assert_eq!(
            expand_time_delay(&rows, 0).unwrap(),
            vec![vec![1.0], vec![2.0], vec![3.0]]
        );
        assert_eq!(
            expand_time_delay(&rows, 2).unwrap(),
            vec![
                vec![1.0, 0.0, 0.0],
                vec![2.0, 1.0, 0.0],
                vec![3.0, 2.0, 1.0]
            ]
        );
        let mut bad = rows.clone();
        bad.swap(0, 1);
        assert!(matches!(
            expand_time_delay(&bad, 1),
            Err(Error::UnorderedSeries(_))
        ));
    }

    #[test]
    fn table_expansion_respects_series_boundaries() {
        // two interleaved, shuffled series
        let t = panel(2, 4, 3, 5);
        let order = [5, 0, 7, 2, 1, 6, 3, 4];
        let t = t.take_rows(&order);
        let st = Standardizer::fit(&t);
        let data = prepare(Variant::TimeDelay { taps: 2 }, &st, &t).unwrap();
        let z = st.transform(&t).unwrap();
        let series = series_index(t.meta()).unwrap();
        for rows in &series {
            let seq: Vec<_> = rows
                .iter()
                .map(|&i| (t.meta()[i].date, z[i * 3..i * 3 + 3].to_vec()))
                .collect();
            let want = expand_time_delay(&seq, 2).unwrap();
            for (k, &i) in rows.iter().enumerate() {
                assert_eq!(data.row(i), want[k].as_slice());
            }
        }
    }

    #[test]
    fn recurrent_step_examples() {
        let mut rng = seed::rng(3);
        let mut net = Network::glorot(&[2, 3, 2, 1], true, &mut rng).unwrap();
        net.context_weights_mut().unwrap().fill(0.0);
        let plain = net.without_context();
        let mut h = vec![0.0; 3];
        for t in 0..5 {
            let x = [t as f64 * 0.3, -1.0 + t as f64];
            let (y, h_next) = net.recurrent_step(&x, &h).unwrap();
            assert_eq!(y, plain.forward(&x).unwrap());
            h = h_next;
        }

        let mut z = Network::glorot(&[2, 3, 1], true, &mut rng).unwrap();
        z.weights_mut(0).fill(0.0);
        z.bias_mut(0).fill(0.0);
        let (_, h1) = z.recurrent_step(&[4.0, -2.0], &[0.0; 3]).unwrap();
        assert_eq!(h1, vec![0.5; 3]);
        assert!(z.recurrent_step(&[1.0, 1.0], &[0.0; 2]).is_err());
    }

    #[test]
    fn recurrent_matches_hand_unroll() {
        let mut rng = seed::rng(17);
        let net = Network::glorot(&[2, 3, 1], true, &mut rng).unwrap();
        let w1: Vec<&[f64]> = net.weights(0).chunks(2).collect();
        let b1 = net.bias(0);
        let wh: Vec<&[f64]> = net.context_weights().unwrap().chunks(3).collect();
        let w2 = net.weights(1);
        let b2 = net.bias(1)[0];
        let xs = [[0.5, -1.0], [1.5, 0.25], [-0.7, 2.0]];
        let mut h = [0.0; 3];
        let mut hand = Vec::new();
        for x in &xs {
            let mut hn = [0.0; 3];
            for o in 0..3 {
                let z = w1[o][0] * x[0]
                    + w1[o][1] * x[1]
                    + wh[o][0] * h[0]
                    + wh[o][1] * h[1]
                    + wh[o][2] * h[2]
                    + b1[o];
                hn[o] = 1.0 / (1.0 + (-z).exp());
            }
            h = hn;
            hand.push(w2[0] * h[0] + w2[1] * h[1] + w2[2] * h[2] + b2);
        }
        let mut ctx = vec![0.0; 3];
        for (x, want) in xs.iter().zip(&hand) {
            let (y, next) = net.recurrent_step(x, &ctx).unwrap();
            assert!((y - want).abs() < 1e-12);
            ctx = next;
        }
    }

    #[test]
    fn gradient_checks_for_all_variants() {
        let t = panel(2, 5, 4, 21);
        for variant in [Variant::Plain, Variant::TimeDelay { taps: 2 }, Variant::Recurrent] {
            let mut spec = NetSpec::new(2, 20);
            spec.variant = variant;
            spec.seed = 9;
            let err = gradient_check(&spec, &t, 500, 1e-5).unwrap();
            assert!(err < 1e-4, "{variant:?}: {err}");
        }
    }

    #[test]
    fn zero_net_bias_gradient() {
        let t = panel(1, 30, 3, 2);
        let st = Standardizer::fit(&t);
        let data = prepare(Variant::Plain, &st, &t).unwrap();
        let net = Network::zeros(&[3, 4, 4, 1], false).unwrap();
        let (_, g) = batch_gradient(&net, &data, 16).unwrap();
        let out_bias = net.layers[2].1;
        let want = 2.0 * t.target().iter().map(|y| 0.0 - y).sum::<f64>() / 30.0;
        assert!((g[out_bias] - want).abs() < 1e-12);
        let mut up = net.clone();
        up.params[out_bias] = 1e-5;
        let mut down = net.clone();
        down.params[out_bias] = -1e-5;
        let fd = (batch_loss(&up, &data).unwrap() - batch_loss(&down, &data).unwrap()) / 2e-5;
        assert!((fd - g[out_bias]).abs() < 1e-8);
    }

    #[test]
    fn taps_zero_trains_bit_identical_to_plain() {
        let t = panel(3, 20, 3, 8);
        let mut spec = NetSpec::new(2, 6);
        spec.epochs = 5;
        spec.batch_size = 16;
        spec.seed = 4;
        let a = train(&spec, &t).unwrap();
        spec.variant = Variant::TimeDelay { taps: 0 };
        let b = train(&spec, &t).unwrap();
        assert_eq!(a.network().params(), b.network().params());
    }

    #[test]
    fn epochs_zero_returns_initial_model() {
        let t = panel(2, 10, 3, 1);
        let mut spec = NetSpec::new(2, 5);
        spec.epochs = 0;
        spec.seed = 12;
        let m = train(&spec, &t).unwrap();
        let mut rng = seed::rng(12);
        let mut net = Network::glorot(&[3, 5, 5, 1], false, &mut rng).unwrap();
        net.bias_mut(2)[0] = mean(t.target());
        assert_eq!(m.network(), &net);
        let z = m.standardizer().transform(&t).unwrap();
        let p = m.predict_table(&t).unwrap();
        for i in 0..t.n_rows() {
            assert_eq!(p[i], net.forward(&z[i * 3..i * 3 + 3]).unwrap());
        }
    }

    #[test]
    fn constant_columns_dropped() {
        let t = panel(1, 20, 3, 1);
        let t = t.map_column(1, |_| 4.0).unwrap();
        let st = Standardizer::fit(&t).drop_constant();
        assert_eq!(st.columns(), ["x0", "x2"]);
        assert!(st.sds().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let t = panel(2, 30, 3, 6);
        let mut spec = NetSpec::new(2, 10);
        spec.learning_rate = 1e6;
        spec.epochs = 50;
        spec.batch_size = 4;
        assert!(matches!(train(&spec, &t), Err(Error::Divergence { .. })));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let t = panel(4, 60, 4, 13);
        for variant in [Variant::Plain, Variant::TimeDelay { taps: 1 }, Variant::Recurrent] {
            let mut spec = NetSpec::new(2, 8);
            spec.variant = variant;
            spec.epochs = 40;
            spec.batch_size = 16;
            spec.learning_rate = 0.1;
            let a = train(&spec, &t).unwrap();
            let b = train(&spec, &t).unwrap();
            assert_eq!(a.network().params(), b.network().params());
            assert!(a.train_mse() < 0.5 * t.target_variance(), "{variant:?} {}", a.train_mse());
        }
    }

    #[test]
    fn model_file_roundtrip_is_bit_exact() {
        let t = panel(3, 15, 3, 2);
        for variant in [Variant::Plain, Variant::TimeDelay { taps: 2 }, Variant::Recurrent] {
            let mut spec = NetSpec::new(3, 4);
            spec.variant = variant;
            spec.epochs = 3;
            let m = train(&spec, &t).unwrap();
            let back = NetModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
            assert_eq!(back, m);
            let p = m.predict_table(&t).unwrap();
            let q = back.predict_table(&t).unwrap();
            assert!(p.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn spec_names_and_validation() {
        let s = NetSpec::new(3, 70);
        assert_eq!(s.name(), "MLP-L3-N70");
        assert_eq!(NetSpec::parse_name("MLP-L3-N70"), Some((3, 70)));
        assert!(NetSpec::new(1, 5).validate().is_err());
        assert!(NetSpec::new(5, 5).validate().is_err());
        assert!(NetSpec::new(2, 0).validate().is_err());
    }
}
