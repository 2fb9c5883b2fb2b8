//! Seeded synthetic sales/weather/key fixtures with known ground truth.
//!
//! The log1p target is linear in the declared informative columns (plus an
//! optional product term and Gaussian noise):
//!
//! ```text
//! eta   = intercept + sum(beta_j * x_j) + beta_ab * x_a * x_b + noise_sd * N(0, 1)
//! units = max(0, round(expm1(eta)))
//! ```
//!
//! Weather values are standard normal draws rounded to four decimals, so
//! the value written to disk is exactly the value used for the target.
//! Independent streams are derived per purpose (weather values, missing
//! mask, noise, zero pairs), so changing `missing_rate` leaves the weather
//! values and units untouched.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{CalendarDate, SalesRecord, StationKey, WeatherRecord};
use crate::error::{Error, Result};
use crate::ingest::{derive_event_features, HolidaySet, RawTables, WeatherSchema, EVENT_COLUMNS};
use crate::seed::{self, std_normal, unit_f64};

/// Cap on the linear predictor before exponentiation.
const MAX_ETA: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub a: String,
    pub b: String,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_stores: u32,
    pub n_items: u32,
    pub n_stations: u32,
    pub start: CalendarDate,
    pub end: CalendarDate,
    pub intercept: f64,
    /// (weather column, beta)
    pub informative_weather: Vec<(String, f64)>,
    /// (event column, beta)
    pub informative_events: Vec<(String, f64)>,
    /// Product term over two weather columns (nonlinear mode).
    pub interaction: Option<Interaction>,
    pub noise_sd: f64,
    pub missing_rate: f64,
    /// Number of (store, item) pairs that never sell.
    pub zero_pairs: u32,
    pub schema: WeatherSchema,
}

impl SynthSpec {
    /// A small linear fixture: five informative weather columns, one event.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            seed,
            n_stores: 4,
            n_items: 3,
            n_stations: 2,
            start: CalendarDate::new(2013, 1, 1).expect("valid date"),
            end: CalendarDate::new(2014, 10, 31).expect("valid date"),
            intercept: 2.5,
            informative_weather: vec![
                ("tmax".into(), 0.8),
                ("dewpoint".into(), -0.6),
                ("preciptotal".into(), 0.5),
                ("avgspeed".into(), 0.7),
                ("sealevel".into(), -0.5),
            ],
            informative_events: vec![("is_weekend".into(), 0.4)],
            interaction: None,
            noise_sd: 0.3,
            missing_rate: 0.05,
            zero_pairs: 1,
            schema: WeatherSchema::default(),
        }
    }

    pub fn n_days(&self) -> i64 {
        self.end.day_number() - self.start.day_number() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.end < self.start {
            return bad(format!("degenerate date range {}..{}", self.start, self.end));
        }
        if self.n_stores == 0 || self.n_items == 0 || self.n_stations == 0 {
            return bad("store, item and station counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate {} outside [0, 1)", self.missing_rate));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd {} must be finite and >= 0", self.noise_sd));
        }
        if u64::from(self.zero_pairs) >= u64::from(self.n_stores) * u64::from(self.n_items) {
            return bad("zero_pairs must leave at least one selling pair".into());
        }
        let mut names = std::collections::HashSet::new();
        for (c, b) in &self.informative_weather {
            if !self.schema.columns().contains(c) {
                return bad(format!("informative column {c:?} not in weather schema"));
            }
            if !names.insert(c.as_str()) || !b.is_finite() {
                return bad(format!("duplicate or non-finite effect for {c:?}"));
            }
        }
        for (c, b) in &self.informative_events {
            if !EVENT_COLUMNS.contains(&c.as_str()) {
                return bad(format!("informative event {c:?} is not an event column"));
            }
            if !names.insert(c.as_str()) || !b.is_finite() {
                return bad(format!("duplicate or non-finite effect for {c:?}"));
            }
        }
        if let Some(ix) = &self.interaction {
            for c in [&ix.a, &ix.b] {
                if !self.schema.columns().contains(c) {
                    return bad(format!("interaction column {c:?} not in weather schema"));
                }
            }
            if !ix.beta.is_finite() {
                return bad("non-finite interaction effect".into());
            }
        }
        Ok(())
    }

    /// Columns carrying signal; every other table column is noise.
    pub fn informative_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = self.informative_weather.iter().map(|(c, _)| c.clone()).collect();
        if let Some(ix) = &self.interaction {
            for c in [&ix.a, &ix.b] {
                if !out.contains(c) {
                    out.push(c.clone());
                }
            }
        }
        out.extend(self.informative_events.iter().map(|(c, _)| c.clone()));
        out
    }

    /// Flat `key=value` manifest of the generating model.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "generator=xoshiro256++/splitmix64");
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "stores={}", self.n_stores);
        let _ = writeln!(s, "items={}", self.n_items);
        let _ = writeln!(s, "stations={}", self.n_stations);
        let _ = writeln!(s, "start={}", self.start);
        let _ = writeln!(s, "end={}", self.end);
        let _ = writeln!(s, "intercept={}", self.intercept);
        let _ = writeln!(s, "noise_sd={}", self.noise_sd);
        let _ = writeln!(s, "missing_rate={}", self.missing_rate);
        let _ = writeln!(s, "zero_pairs={}", self.zero_pairs);
        for (c, b) in &self.informative_weather {
            let _ = writeln!(s, "beta.{c}={b}");
        }
        for (c, b) in &self.informative_events {
            let _ = writeln!(s, "beta.{c}={b}");
        }
        if let Some(ix) = &self.interaction {
            let _ = writeln!(s, "beta.{}*{}={}", ix.a, ix.b, ix.beta);
        }
        s
    }
}

/// Generated tables; `weather` holds `None` where "M" is written.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub tables: RawTables,
    /// The linear predictor (before noise) per sales row.
    pub signal: Vec<f64>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

pub fn station_for_store(store: u32, n_stations: u32) -> u32 {
    (store - 1) % n_stations + 1
}

/// Draws the full fixture in memory.
pub fn generate_tables(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let holidays = HolidaySet::us_default();
    let width = spec.schema.len();
    let dates: Vec<CalendarDate> = spec.start.range_inclusive(spec.end).collect();
    let n_days = dates.len();

    let mut value_rng = seed::rng(seed::derive(spec.seed, &["weather".into()]));
    let mut mask_rng = seed::rng(seed::derive(spec.seed, &["missing".into()]));
    let mut noise_rng = seed::rng(seed::derive(spec.seed, &["noise".into()]));
    let mut zero_rng = seed::rng(seed::derive(spec.seed, &["zeros".into()]));

    // truth[(station - 1) * n_days + day][column]
    let mut truth = Vec::with_capacity(spec.n_stations as usize * n_days);
    let mut weather = Vec::with_capacity(truth.capacity());
    for station in 1..=spec.n_stations {
        for &date in &dates {
            let vals: Vec<f64> = (0..width).map(|_| round4(std_normal(&mut value_rng))).collect();
            let shown = vals
                .iter()
                .map(|&v| (unit_f64(&mut mask_rng) >= spec.missing_rate).then_some(v))
                .collect();
            weather.push(WeatherRecord {
                date,
                station,
                values: shown,
            });
            truth.push(vals);
        }
    }

    let col = |name: &str| {
        spec.schema
            .columns()
            .iter()
            .position(|c| c == name)
            .expect("validated column")
    };
    let linear: Vec<(usize, f64)> = spec
        .informative_weather
        .iter()
        .map(|(c, b)| (col(c), *b))
        .collect();
    let product = spec
        .interaction
        .as_ref()
        .map(|ix| (col(&ix.a), col(&ix.b), ix.beta));

    let n_pairs = (spec.n_stores * spec.n_items) as usize;
    let mut pairs: Vec<usize> = (0..n_pairs).collect();
    for i in 0..spec.zero_pairs as usize {
        let j = i + (unit_f64(&mut zero_rng) * (n_pairs - i) as f64) as usize;
        pairs.swap(i, j.min(n_pairs - 1));
    }
    let mut is_zero = vec![false; n_pairs];
    for &p in &pairs[..spec.zero_pairs as usize] {
        is_zero[p] = true;
    }

    let mut sales = Vec::with_capacity(n_days * n_pairs);
    let mut signal = Vec::with_capacity(sales.capacity());
    for (day, &date) in dates.iter().enumerate() {
        let events = derive_event_features(date, &holidays);
        for store in 1..=spec.n_stores {
            let station = station_for_store(store, spec.n_stations);
            let x = &truth[(station as usize - 1) * n_days + day];
            let mut eta = spec.intercept;
            for &(j, b) in &linear {
                eta += b * x[j];
            }
            if let Some((a, bb, beta)) = product {
                eta += beta * x[a] * x[bb];
            }
            for (c, b) in &spec.informative_events {
                eta += b * events.value(c).expect("validated event column");
            }
            for item in 1..=spec.n_items {
                let noise = spec.noise_sd * std_normal(&mut noise_rng);
                let pair = ((store - 1) * spec.n_items + (item - 1)) as usize;
                let units = if is_zero[pair] {
                    0
                } else {
                    (eta + noise).min(MAX_ETA).exp_m1().round().max(0.0) as u64
                };
                sales.push(SalesRecord {
                    date,
                    store,
                    item,
                    units,
                });
                signal.push(eta);
            }
        }
    }

    let keys = (1..=spec.n_stores)
        .map(|store| StationKey {
            store,
            station: station_for_store(store, spec.n_stations),
        })
        .collect();

    Ok(SynthData {
        tables: RawTables {
            schema: spec.schema.clone(),
            sales,
            weather,
            keys,
        },
        signal,
    })
}

/// Paths of a written fixture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthFiles {
    pub sales: PathBuf,
    pub weather: PathBuf,
    pub key: PathBuf,
    pub manifest: PathBuf,
}

impl SynthFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            sales: dir.join("sales.csv"),
            weather: dir.join("weather.csv"),
            key: dir.join("key.csv"),
            manifest: dir.join("manifest.txt"),
        }
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Generates and writes `sales.csv`, `weather.csv`, `key.csv` and
/// `manifest.txt` into `dir`.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<SynthFiles> {
    let data = generate_tables(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SynthFiles::in_dir(dir);
    let t = &data.tables;

    let mut s = String::from("date,store_nbr,item_nbr,units\n");
    for r in &t.sales {
        let _ = writeln!(s, "{},{},{},{}", r.date, r.store, r.item, r.units);
    }
    write_file(&files.sales, &s)?;

    let mut w = String::from("station_nbr,date");
    for c in t.schema.columns() {
        w.push(',');
        w.push_str(c);
    }
    w.push('\n');
    for r in &t.weather {
        let _ = write!(w, "{},{}", r.station, r.date);
        for v in &r.values {
            match v {
                Some(x) => {
                    let _ = write!(w, ",{x}");
                }
                None => w.push_str(",M"),
            }
        }
        w.push('\n');
    }
    write_file(&files.weather, &w)?;

    let mut k = String::from("store_nbr,station_nbr\n");
    for r in &t.keys {
        let _ = writeln!(k, "{},{}", r.store, r.station);
    }
    write_file(&files.key, &k)?;
    write_file(&files.manifest, &spec.manifest())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{log1p_units, SplitSpec};
    use crate::ingest::{build_feature_tables, impute_weather, load_tables};

    fn d(s: &str) -> CalendarDate {
        s.parse().unwrap()
    }

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_stores: 3,
            n_items: 2,
            start: d("2013-01-01"),
            end: d("2013-03-31"),
            ..SynthSpec::desk_default(seed)
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = generate(&small(11), a.path()).unwrap();
        let fb = generate(&small(11), b.path()).unwrap();
        for (x, y) in [
            (&fa.sales, &fb.sales),
            (&fa.weather, &fb.weather),
            (&fa.key, &fb.key),
            (&fa.manifest, &fb.manifest),
        ] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let c = tempfile::tempdir().unwrap();
        let fc = generate(&small(12), c.path()).unwrap();
        assert_ne!(std::fs::read(&fa.sales).unwrap(), std::fs::read(&fc.sales).unwrap());
    }

    #[test]
    fn degenerate_range_rejected() {
        let mut s = small(1);
        s.end = d("2012-12-31");
        assert!(generate_tables(&s).is_err());
        let mut s = small(1);
        s.missing_rate = 1.0;
        assert!(generate_tables(&s).is_err());
        let mut s = small(1);
        s.informative_weather.push(("nope".into(), 1.0));
        assert!(generate_tables(&s).is_err());
    }

    #[test]
    fn noiseless_single_feature_target() {
        let spec = SynthSpec {
            informative_weather: vec![("tmax".into(), 0.9)],
            informative_events: vec![],
            noise_sd: 0.0,
            missing_rate: 0.0,
            zero_pairs: 0,
            intercept: 0.0,
            ..small(5)
        };
        let dir = tempfile::tempdir().unwrap();
        let f = generate(&spec, dir.path()).unwrap();
        let raw = load_tables(&f.sales, &f.weather, &f.key, &spec.schema).unwrap();
        let split = SplitSpec::new(d("2013-01-01"), d("2013-02-28"), d("2013-03-01"), d("2013-03-31")).unwrap();
        let ft = build_feature_tables(&raw, &HolidaySet::us_default(), &split).unwrap();
        let (train, _) = &ft.dweather;
        let j = train.column_index("tmax").unwrap();
        for i in 0..train.n_rows() {
            let eta = 0.9 * train.get(i, j);
            // Units are integers, so the target equals eta up to that rounding.
            let expected = log1p_units(eta.exp_m1().round().max(0.0) as u64);
            assert_eq!(train.target()[i], expected);
            if eta > 0.0 {
                let u = eta.exp_m1();
                assert!((train.target()[i] - eta).abs() <= (0.5 / (u + 0.5)).ln_1p() + 1e-12);
            }
        }
    }

    #[test]
    fn missing_rate_concentrates() {
        for seed in 0..20 {
            let spec = SynthSpec {
                missing_rate: 0.1,
                ..small(seed)
            };
            let data = generate_tables(&spec).unwrap();
            let cells: usize = data.tables.weather.iter().map(|r| r.values.len()).sum();
            let missing: usize = data
                .tables
                .weather
                .iter()
                .map(|r| r.values.iter().filter(|v| v.is_none()).count())
                .sum();
            let rate = missing as f64 / cells as f64;
            assert!((0.05..=0.15).contains(&rate), "seed {seed}: {rate}");
        }
    }

    #[test]
    fn noise_columns_uncorrelated_with_target() {
        for seed in 0..10 {
            let spec = SynthSpec {
                n_stores: 5,
                n_items: 2,
                n_stations: 5,
                start: d("2013-01-01"),
                end: d("2013-01-01").add_days(499),
                missing_rate: 0.0,
                zero_pairs: 0,
                ..SynthSpec::desk_default(seed)
            };
            let data = generate_tables(&spec).unwrap();
            let t = &data.tables;
            assert_eq!(t.sales.len(), 5000);
            let y: Vec<f64> = t.sales.iter().map(|s| log1p_units(s.units)).collect();
            let informative = spec.informative_columns();
            let by_key: std::collections::HashMap<_, _> =
                t.weather.iter().map(|w| ((w.station, w.date), w)).collect();
            for (j, name) in spec.schema.columns().iter().enumerate() {
                if informative.contains(name) {
                    continue;
                }
                let x: Vec<f64> = t
                    .sales
                    .iter()
                    .map(|s| by_key[&(station_for_store(s.store, 5), s.date)].values[j].unwrap())
                    .collect();
                let r = pearson(&x, &y);
                assert!(r.abs() < 0.1, "seed {seed} column {name}: r = {r}");
            }
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn zero_pairs_never_sell() {
        let spec = SynthSpec {
            zero_pairs: 2,
            ..small(3)
        };
        let data = generate_tables(&spec).unwrap();
        let mut totals = std::collections::BTreeMap::new();
        for s in &data.tables.sales {
            *totals.entry((s.store, s.item)).or_insert(0u64) += s.units;
        }
        assert_eq!(totals.values().filter(|&&t| t == 0).count(), 2);
    }

    #[test]
    fn generated_files_ingest_cleanly() {
        for seed in 0..5 {
            let spec = SynthSpec {
                missing_rate: 0.3,
                ..small(seed)
            };
            let dir = tempfile::tempdir().unwrap();
            let f = generate(&spec, dir.path()).unwrap();
            let raw = load_tables(&f.sales, &f.weather, &f.key, &spec.schema).unwrap();
            let imputed = impute_weather(&raw.weather, &raw.schema).unwrap();
            assert!(imputed.iter().all(|r| r.values.iter().all(|v| v.is_some())));
        }
    }

    #[test]
    fn manifest_lists_betas() {
        let m = SynthSpec::desk_default(9).manifest();
        assert!(m.contains("beta.tmax=0.8\n"));
        assert!(m.contains("beta.is_weekend=0.4\n"));
        assert!(m.contains("seed=9\n"));
    }
}
