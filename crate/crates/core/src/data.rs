//! Domain types shared by every stage: calendar dates, raw records, the
//! train/test split and the dense feature table.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A Gregorian calendar day.
///
/// Field order makes the derived `Ord` chronological.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CalendarDate {
    year: i32,
    month: u8,
    day: u8,
}

fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

fn days_in_month(year: i32, month: u8) -> u8 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap(year) => 29,
        2 => 28,
        _ => 0,
    }
}

impl CalendarDate {
    pub fn new(year: i32, month: u8, day: u8) -> Result<Self> {
        if !(1..=12).contains(&month) || day == 0 || day > days_in_month(year, month) {
            return Err(Error::InvalidDate(format!("{year:04}-{month:02}-{day:02}")));
        }
        Ok(Self { year, month, day })
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn month(&self) -> u8 {
        self.month
    }

    pub fn day(&self) -> u8 {
        self.day
    }

    /// Days since 1970-01-01 (proleptic Gregorian).
    pub fn day_number(&self) -> i64 {
        let y = i64::from(self.year) - i64::from(self.month <= 2);
        let era = y.div_euclid(400);
        let yoe = y - era * 400;
        let m = i64::from(self.month);
        let mp = (m + 9) % 12;
        let doy = (153 * mp + 2) / 5 + i64::from(self.day) - 1;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        era * 146_097 + doe - 719_468
    }

    pub fn from_day_number(n: i64) -> Self {
        let z = n + 719_468;
        let era = z.div_euclid(146_097);
        let doe = z - era * 146_097;
        let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
        let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        let mp = (5 * doy + 2) / 153;
        let day = (doy - (153 * mp + 2) / 5 + 1) as u8;
        let month = if mp < 10 { mp + 3 } else { mp - 9 } as u8;
        let year = (yoe + era * 400 + i64::from(month <= 2)) as i32;
        Self { year, month, day }
    }

    pub fn add_days(&self, days: i64) -> Self {
        Self::from_day_number(self.day_number() + days)
    }

    /// Day of week with Sunday = 0 through Saturday = 6.
    pub fn weekday(&self) -> u8 {
        // 1970-01-01 was a Thursday.
        (self.day_number() + 4).rem_euclid(7) as u8
    }

    pub fn is_weekend(&self) -> bool {
        matches!(self.weekday(), 0 | 6)
    }

    /// Inclusive iterator over consecutive days.
    pub fn range_inclusive(self, end: CalendarDate) -> impl Iterator<Item = CalendarDate> {
        (self.day_number()..=end.day_number()).map(CalendarDate::from_day_number)
    }
}

impl fmt::Display for CalendarDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

impl FromStr for CalendarDate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidDate(s.to_string());
        let t = s.trim();
        let mut parts = t.splitn(3, '-');
        let (y, m, d) = match (parts.next(), parts.next(), parts.next()) {
            (Some(y), Some(m), Some(d)) => (y, m, d),
            _ => return Err(bad()),
        };
        if y.len() != 4 || m.len() != 2 || d.len() != 2 {
            return Err(bad());
        }
        let year = y.parse().map_err(|_| bad())?;
        let month = m.parse().map_err(|_| bad())?;
        let day = d.parse().map_err(|_| bad())?;
        CalendarDate::new(year, month, day).map_err(|_| bad())
    }
}

impl TryFrom<String> for CalendarDate {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CalendarDate> for String {
    fn from(d: CalendarDate) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SalesRecord {
    pub date: CalendarDate,
    pub store: u32,
    pub item: u32,
    pub units: u64,
}

/// One station-day of weather; `values` is aligned with the weather schema.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherRecord {
    pub date: CalendarDate,
    pub station: u32,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StationKey {
    pub store: u32,
    pub station: u32,
}

/// Row identity carried alongside every feature row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowKey {
    pub date: CalendarDate,
    pub store: u32,
    pub item: u32,
}

impl RowKey {
    /// Submission id: `store_item_date`.
    pub fn id(&self) -> String {
        format!("{}_{}_{}", self.store, self.item, self.date)
    }
}

/// Inclusive train and test date ranges with `train_end < test_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    train_start: CalendarDate,
    train_end: CalendarDate,
    test_start: CalendarDate,
    test_end: CalendarDate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
    Outside,
}

impl SplitSpec {
    pub fn new(
        train_start: CalendarDate,
        train_end: CalendarDate,
        test_start: CalendarDate,
        test_end: CalendarDate,
    ) -> Result<Self> {
        if train_start > train_end {
            return Err(Error::InvalidSplit(format!(
                "train range {train_start}..{train_end} is empty"
            )));
        }
        if test_start > test_end {
            return Err(Error::InvalidSplit(format!(
                "test range {test_start}..{test_end} is empty"
            )));
        }
        if train_end >= test_start {
            return Err(Error::InvalidSplit(format!(
                "train end {train_end} must precede test start {test_start}"
            )));
        }
        Ok(Self {
            train_start,
            train_end,
            test_start,
            test_end,
        })
    }

    /// 2012-01-01..2014-05-31 for training, 2014-06-01..2014-10-31 for testing.
    pub fn walmart_default() -> Self {
        let d = |y, m, dd| CalendarDate::new(y, m, dd).expect("valid constant date");
        Self::new(d(2012, 1, 1), d(2014, 5, 31), d(2014, 6, 1), d(2014, 10, 31))
            .expect("valid constant split")
    }

    pub fn train_start(&self) -> CalendarDate {
        self.train_start
    }

    pub fn train_end(&self) -> CalendarDate {
        self.train_end
    }

    pub fn test_start(&self) -> CalendarDate {
        self.test_start
    }

    pub fn test_end(&self) -> CalendarDate {
        self.test_end
    }

    pub fn classify(&self, date: CalendarDate) -> Partition {
        if date >= self.train_start && date <= self.train_end {
            Partition::Train
        } else if date >= self.test_start && date <= self.test_end {
            Partition::Test
        } else {
            Partition::Outside
        }
    }
}

/// Dense row-major feature matrix with a log1p(units) target.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    columns: Vec<String>,
    values: Vec<f64>,
    target: Vec<f64>,
    meta: Vec<RowKey>,
}

impl FeatureTable {
    pub fn new(
        columns: Vec<String>,
        values: Vec<f64>,
        target: Vec<f64>,
        meta: Vec<RowKey>,
    ) -> Result<Self> {
        let d = columns.len();
        let n = target.len();
        if values.len() != n * d {
            return Err(Error::Table(format!(
                "{} values for {n} rows of {d} columns",
                values.len()
            )));
        }
        if meta.len() != n {
            return Err(Error::Table(format!("{} row keys for {n} rows", meta.len())));
        }
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(Error::Table(format!("duplicate column name {c:?}")));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Table(format!(
                "non-finite value in row {}, column {:?}",
                i / d.max(1),
                columns[i % d.max(1)]
            )));
        }
        if let Some(i) = target.iter().position(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Table(format!("invalid target {} in row {i}", target[i])));
        }
        Ok(Self {
            columns,
            values,
            target,
            meta,
        })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_cols();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n_cols() + col]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        let d = self.n_cols();
        (0..self.n_rows()).map(move |i| self.values[i * d + j])
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn meta(&self) -> &[RowKey] {
        &self.meta
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Projects onto `names` in the given order.
    pub fn select_columns<S: AsRef<str>>(&self, names: &[S]) -> Result<FeatureTable> {
        let mut idx = Vec::with_capacity(names.len());
        let mut missing = Vec::new();
        for name in names {
            match self.column_index(name.as_ref()) {
                Some(j) => idx.push(j),
                None => missing.push(name.as_ref().to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::SchemaMismatch { missing });
        }
        let mut values = Vec::with_capacity(self.n_rows() * idx.len());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            values.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(FeatureTable {
            columns: idx.iter().map(|&j| self.columns[j].clone()).collect(),
            values,
            target: self.target.clone(),
            meta: self.meta.clone(),
        })
    }

    /// Keeps the rows listed in `rows`, in that order.
    pub fn take_rows(&self, rows: &[usize]) -> FeatureTable {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols());
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        FeatureTable {
            columns: self.columns.clone(),
            values,
            target: rows.iter().map(|&i| self.target[i]).collect(),
            meta: rows.iter().map(|&i| self.meta[i]).collect(),
        }
    }

    /// Replaces one column with `f(old value)`.
    pub fn map_column(&self, j: usize, f: impl Fn(f64) -> f64) -> Result<FeatureTable> {
        let mut out = self.clone();
        let d = self.n_cols();
        for i in 0..self.n_rows() {
            out.values[i * d + j] = f(out.values[i * d + j]);
        }
        FeatureTable::new(out.columns, out.values, out.target, out.meta)
    }

    /// Population variance of the target.
    pub fn target_variance(&self) -> f64 {
        variance(&self.target)
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Partitions rows by date; rows outside both ranges are dropped.
pub fn split(table: &FeatureTable, spec: &SplitSpec) -> Result<(FeatureTable, FeatureTable)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, key) in table.meta().iter().enumerate() {
        match spec.classify(key.date) {
            Partition::Train => train.push(i),
            Partition::Test => test.push(i),
            Partition::Outside => {}
        }
    }
    if train.is_empty() {
        return Err(Error::EmptyPartition("train"));
    }
    if test.is_empty() {
        return Err(Error::EmptyPartition("test"));
    }
    Ok((table.take_rows(&train), table.take_rows(&test)))
}

/// The modeling target: `ln(units + 1)`.
pub fn log1p_units(units: u64) -> f64 {
    (units as f64).ln_1p()
}

/// Inverse of [`log1p_units`] for a predicted log value, clamped at zero.
pub fn expm1_pred(x: f64) -> f64 {
    let u = x.exp_m1();
    if u > 0.0 {
        u
    } else {
        0.0
    }
}
