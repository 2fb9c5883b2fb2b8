//! CSV ingestion, weather imputation, calendar/event features and the
//! construction of the weather-only and weather+event feature tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::data::{
    log1p_units, split, CalendarDate, FeatureTable, Partition, RowKey, SalesRecord, SplitSpec,
    StationKey, WeatherRecord,
};
use crate::error::{Error, Result};

/// Default weather measurement columns, in file order.
pub const WEATHER_COLUMNS: [&str; 17] = [
    "tmax",
    "tmin",
    "tavg",
    "depart",
    "dewpoint",
    "wetbulb",
    "heat",
    "cool",
    "snowfall",
    "preciptotal",
    "stnpressure",
    "sealevel",
    "resultspeed",
    "resultdir",
    "avgspeed",
    "sunrise",
    "sunset",
];

pub const DATE_COLUMNS: [&str; 3] = ["year", "month", "day"];

pub const EVENT_COLUMNS: [&str; 12] = [
    "weekday",
    "is_weekend",
    "is_holiday",
    "is_holiday_and_weekday",
    "is_holiday_and_weekend",
    "is_blackfriday_m3",
    "is_blackfriday_m2",
    "is_blackfriday_m1",
    "is_blackfriday",
    "is_blackfriday_p1",
    "is_blackfriday_p2",
    "is_blackfriday_p3",
];

/// Stores are closed on this date; its rows are never modeled.
pub const CLOSURE_DATE: (i32, u8, u8) = (2013, 12, 25);

/// Value recorded for trace precipitation ("T").
pub const TRACE_PRECIPITATION: f64 = 0.005;

pub fn closure_date() -> CalendarDate {
    let (y, m, d) = CLOSURE_DATE;
    CalendarDate::new(y, m, d).expect("valid constant date")
}

/// Ordered list of weather measurement columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeatherSchema {
    columns: Vec<String>,
}

impl Default for WeatherSchema {
    fn default() -> Self {
        Self {
            columns: WEATHER_COLUMNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl WeatherSchema {
    pub fn new(columns: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c) || c == "station_nbr" || c == "date" {
                return Err(Error::Config(format!("bad weather column {c:?}")));
            }
        }
        if columns.is_empty() {
            return Err(Error::Config("empty weather schema".into()));
        }
        Ok(Self { columns })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// The three raw input tables.
#[derive(Debug, Clone)]
pub struct RawTables {
    pub schema: WeatherSchema,
    pub sales: Vec<SalesRecord>,
    pub weather: Vec<WeatherRecord>,
    pub keys: Vec<StationKey>,
}

impl RawTables {
    pub fn station_of(&self) -> HashMap<u32, u32> {
        self.keys.iter().map(|k| (k.store, k.station)).collect()
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn header_index(
    path: &Path,
    reader: &mut csv::Reader<std::fs::File>,
    wanted: &[&str],
) -> Result<Vec<usize>> {
    let headers = reader
        .headers()
        .map_err(|e| malformed(path, 1, e.to_string()))?
        .clone();
    let mut idx = Vec::with_capacity(wanted.len());
    let mut missing = Vec::new();
    for w in wanted {
        match headers.iter().position(|h| h == *w) {
            Some(i) => idx.push(i),
            None => missing.push(w.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Header {
            path: path.to_path_buf(),
            missing,
        });
    }
    Ok(idx)
}

fn malformed(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, path: &Path, line: u64) -> Result<&'a str> {
    rec.get(i)
        .ok_or_else(|| malformed(path, line, format!("missing field {}", i + 1)))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str, path: &Path, line: u64) -> Result<T> {
    s.parse()
        .map_err(|_| malformed(path, line, format!("bad {what} {s:?}")))
}

/// Parses one weather cell: "M" (and "-" or blank) is missing, "T" is trace.
pub fn parse_weather_value(raw: &str) -> std::result::Result<Option<f64>, String> {
    match raw.trim() {
        "M" | "-" | "" => Ok(None),
        "T" => Ok(Some(TRACE_PRECIPITATION)),
        s => match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(Some(v)),
            _ => Err(format!("bad weather value {s:?}")),
        },
    }
}

fn read_sales(path: &Path) -> Result<Vec<SalesRecord>> {
    let mut rdr = open_csv(path)?;
    let idx = header_index(path, &mut rdr, &["date", "store_nbr", "item_nbr", "units"])?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let date: CalendarDate = field(&rec, idx[0], path, line)?
            .parse()
            .map_err(|e: Error| malformed(path, line, e.to_string()))?;
        let store: u32 = parse_num(field(&rec, idx[1], path, line)?, "store_nbr", path, line)?;
        let item: u32 = parse_num(field(&rec, idx[2], path, line)?, "item_nbr", path, line)?;
        let units: u64 = parse_num(field(&rec, idx[3], path, line)?, "units", path, line)?;
        if store == 0 || item == 0 {
            return Err(malformed(path, line, "ids must be positive"));
        }
        if !seen.insert((date, store, item)) {
            return Err(Error::Duplicate {
                what: "sales",
                key: format!("({date}, store {store}, item {item})"),
            });
        }
        out.push(SalesRecord {
            date,
            store,
            item,
            units,
        });
    }
    Ok(out)
}

fn read_weather(path: &Path, schema: &WeatherSchema) -> Result<Vec<WeatherRecord>> {
    let mut rdr = open_csv(path)?;
    let mut wanted = vec!["station_nbr", "date"];
    wanted.extend(schema.columns().iter().map(String::as_str));
    let idx = header_index(path, &mut rdr, &wanted)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let station: u32 = parse_num(field(&rec, idx[0], path, line)?, "station_nbr", path, line)?;
        let date: CalendarDate = field(&rec, idx[1], path, line)?
            .parse()
            .map_err(|e: Error| malformed(path, line, e.to_string()))?;
        let mut values = Vec::with_capacity(schema.len());
        for &i in &idx[2..] {
            let v = parse_weather_value(field(&rec, i, path, line)?)
                .map_err(|m| malformed(path, line, m))?;
            values.push(v);
        }
        if !seen.insert((date, station)) {
            return Err(Error::Duplicate {
                what: "weather",
                key: format!("({date}, station {station})"),
            });
        }
        out.push(WeatherRecord {
            date,
            station,
            values,
        });
    }
    Ok(out)
}

fn read_keys(path: &Path) -> Result<Vec<StationKey>> {
    let mut rdr = open_csv(path)?;
    let idx = header_index(path, &mut rdr, &["store_nbr", "station_nbr"])?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let store = parse_num(field(&rec, idx[0], path, line)?, "store_nbr", path, line)?;
        let station = parse_num(field(&rec, idx[1], path, line)?, "station_nbr", path, line)?;
        if !seen.insert(store) {
            return Err(Error::Duplicate {
                what: "station key",
                key: format!("store {store}"),
            });
        }
        out.push(StationKey { store, station });
    }
    Ok(out)
}

/// Reads and cross-checks the sales, weather and store→station tables.
///
/// Extra columns in the weather file (e.g. free-text codes) are ignored.
pub fn load_tables(
    sales_path: &Path,
    weather_path: &Path,
    key_path: &Path,
    schema: &WeatherSchema,
) -> Result<RawTables> {
    let sales = read_sales(sales_path)?;
    let weather = read_weather(weather_path, schema)?;
    let keys = read_keys(key_path)?;

    let station_of: HashMap<u32, u32> = keys.iter().map(|k| (k.store, k.station)).collect();
    let have: HashSet<(u32, CalendarDate)> = weather.iter().map(|w| (w.station, w.date)).collect();
    for s in &sales {
        let station = *station_of
            .get(&s.store)
            .ok_or(Error::UnknownStore(s.store))?;
        if !have.contains(&(station, s.date)) {
            return Err(Error::MissingWeather {
                station,
                date: s.date.to_string(),
            });
        }
    }
    Ok(RawTables {
        schema: schema.clone(),
        sales,
        weather,
        keys,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fills gaps per (station, column): forward-fill in date order, back-fill
/// leading gaps, and fall back to the global column median for a station
/// that never reports the column. Present values are left untouched.
pub fn impute_weather(records: &[WeatherRecord], schema: &WeatherSchema) -> Result<Vec<WeatherRecord>> {
    let width = schema.len();
    if let Some(r) = records.iter().find(|r| r.values.len() != width) {
        return Err(Error::WidthMismatch {
            expected: width,
            got: r.values.len(),
        });
    }

    let mut medians = Vec::with_capacity(width);
    let mut dead = Vec::new();
    for (j, name) in schema.columns().iter().enumerate() {
        let mut present: Vec<f64> = records.iter().filter_map(|r| r.values[j]).collect();
        if present.is_empty() {
            dead.push(name.clone());
            medians.push(f64::NAN);
        } else {
            medians.push(median(&mut present));
        }
    }
    if !dead.is_empty() {
        return Err(Error::ColumnAllMissing(dead));
    }

    let mut by_station: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_station.entry(r.station).or_default().push(i);
    }

    let mut out = records.to_vec();
    for rows in by_station.values_mut() {
        rows.sort_by_key(|&i| records[i].date);
        for j in 0..width {
            let first = rows.iter().find_map(|&i| records[i].values[j]);
            let mut last = first.unwrap_or(medians[j]);
            for &i in rows.iter() {
                match records[i].values[j] {
                    Some(v) => last = v,
                    None => out[i].values[j] = Some(last),
                }
            }
        }
    }
    Ok(out)
}

/// Set of holiday dates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HolidaySet {
    dates: HashSet<CalendarDate>,
}

const DEFAULT_HOLIDAYS: &str = include_str!("../data/us_holidays_2012_2014.txt");

impl HolidaySet {
    /// One ISO date per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dates = HashSet::new();
        for line in text.lines() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            dates.insert(body.parse()?);
        }
        Ok(Self { dates })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// US federal holidays 2012-2014.
    pub fn us_default() -> Self {
        Self::parse(DEFAULT_HOLIDAYS).expect("bundled holiday list parses")
    }

    pub fn from_dates(dates: impl IntoIterator<Item = CalendarDate>) -> Self {
        Self {
            dates: dates.into_iter().collect(),
        }
    }

    pub fn contains(&self, date: &CalendarDate) -> bool {
        self.dates.contains(date)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// The day after the fourth Thursday of November.
pub fn black_friday(year: i32) -> CalendarDate {
    let nov1 = CalendarDate::new(year, 11, 1).expect("valid date");
    let first_thursday = 1 + (4 + 7 - i64::from(nov1.weekday())) % 7;
    nov1.add_days(first_thursday - 1 + 21 + 1)
}

/// Calendar and event flags for one date.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventFeatures {
    /// Sunday = 0 through Saturday = 6.
    pub weekday: u8,
    pub is_weekend: bool,
    pub is_holiday: bool,
    pub is_holiday_and_weekday: bool,
    pub is_holiday_and_weekend: bool,
    /// Offsets -3..=+3 around Black Friday.
    pub black_friday_window: [bool; 7],
    pub year: i32,
    pub month: u8,
    pub day: u8,
}

impl EventFeatures {
    /// Values in [`EVENT_COLUMNS`] order.
    pub fn event_values(&self) -> [f64; 12] {
        let f = |b: bool| if b { 1.0 } else { 0.0 };
        let mut out = [0.0; 12];
        out[0] = f64::from(self.weekday);
        out[1] = f(self.is_weekend);
        out[2] = f(self.is_holiday);
        out[3] = f(self.is_holiday_and_weekday);
        out[4] = f(self.is_holiday_and_weekend);
        for (k, &b) in self.black_friday_window.iter().enumerate() {
            out[5 + k] = f(b);
        }
        out
    }

    /// Values in [`DATE_COLUMNS`] order.
    pub fn date_values(&self) -> [f64; 3] {
        [
            f64::from(self.year),
            f64::from(self.month),
            f64::from(self.day),
        ]
    }

    pub fn value(&self, column: &str) -> Option<f64> {
        if let Some(j) = EVENT_COLUMNS.iter().position(|c| *c == column) {
            return Some(self.event_values()[j]);
        }
        DATE_COLUMNS
            .iter()
            .position(|c| *c == column)
            .map(|j| self.date_values()[j])
    }
}

pub fn derive_event_features(date: CalendarDate, holidays: &HolidaySet) -> EventFeatures {
    let weekday = date.weekday();
    let is_weekend = date.is_weekend();
    let is_holiday = holidays.contains(&date);
    let mut window = [false; 7];
    let offset = date.day_number() - black_friday(date.year()).day_number();
    if (-3..=3).contains(&offset) {
        window[(offset + 3) as usize] = true;
    }
    EventFeatures {
        weekday,
        is_weekend,
        is_holiday,
        is_holiday_and_weekday: is_holiday && !is_weekend,
        is_holiday_and_weekend: is_holiday && is_weekend,
        black_friday_window: window,
        year: date.year(),
        month: date.month(),
        day: date.day(),
    }
}

/// (store, item) pairs whose training-period units are all zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ZeroSalesIndex {
    pairs: HashSet<(u32, u32)>,
}

impl ZeroSalesIndex {
    pub fn from_training(sales: &[SalesRecord], split: &SplitSpec) -> Self {
        let mut any_sale: BTreeMap<(u32, u32), bool> = BTreeMap::new();
        for s in sales {
            if split.classify(s.date) == Partition::Train {
                *any_sale.entry((s.store, s.item)).or_insert(false) |= s.units > 0;
            }
        }
        Self {
            pairs: any_sale
                .into_iter()
                .filter(|(_, sold)| !sold)
                .map(|(k, _)| k)
                .collect(),
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        Self {
            pairs: pairs.into_iter().collect(),
        }
    }

    pub fn contains(&self, store: u32, item: u32) -> bool {
        self.pairs.contains(&(store, item))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs in ascending order.
    pub fn sorted(&self) -> Vec<(u32, u32)> {
        let mut v: Vec<_> = self.pairs.iter().copied().collect();
        v.sort_unstable();
        v
    }
}

/// Row bookkeeping from one ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct IngestCounts {
    pub train_rows_raw: usize,
    pub test_rows_raw: usize,
    pub outside_rows: usize,
    pub train_rows_modeled: usize,
    pub test_rows_modeled: usize,
    pub zero_pairs: usize,
    pub zero_rule_rows: usize,
    pub closure_rows: usize,
}

/// Weather-only and weather+event (train, test) tables plus zero-rule state.
#[derive(Debug, Clone)]
pub struct FeatureTables {
    pub dweather: (FeatureTable, FeatureTable),
    pub devent: (FeatureTable, FeatureTable),
    pub zeros: ZeroSalesIndex,
    /// Test-period keys removed by the zero rule or the closure date.
    pub excluded_test: Vec<RowKey>,
    pub counts: IngestCounts,
}

pub fn dweather_columns(schema: &WeatherSchema) -> Vec<String> {
    schema
        .columns()
        .iter()
        .cloned()
        .chain(DATE_COLUMNS.iter().map(|s| s.to_string()))
        .collect()
}

pub fn devent_columns(schema: &WeatherSchema) -> Vec<String> {
    let mut cols = dweather_columns(schema);
    cols.extend(EVENT_COLUMNS.iter().map(|s| s.to_string()));
    cols
}

/// Joins sales to (already imputed) weather and emits both feature sets.
///
/// Rows are ordered by (store, item, date).
pub fn build_feature_tables(
    raw: &RawTables,
    holidays: &HolidaySet,
    split_spec: &SplitSpec,
) -> Result<FeatureTables> {
    let station_of = raw.station_of();
    let weather: HashMap<(u32, CalendarDate), &WeatherRecord> =
        raw.weather.iter().map(|w| ((w.station, w.date), w)).collect();
    let zeros = ZeroSalesIndex::from_training(&raw.sales, split_spec);
    let closed = closure_date();

    let mut sales: Vec<&SalesRecord> = raw.sales.iter().collect();
    sales.sort_by_key(|s| (s.store, s.item, s.date));

    let dw_cols = dweather_columns(&raw.schema);
    let de_cols = devent_columns(&raw.schema);
    let mut dw_vals = Vec::new();
    let mut de_vals = Vec::new();
    let mut target = Vec::new();
    let mut meta = Vec::new();
    let mut excluded_test = Vec::new();
    let mut counts = IngestCounts {
        zero_pairs: zeros.len(),
        ..Default::default()
    };

    for s in sales {
        let part = split_spec.classify(s.date);
        match part {
            Partition::Train => counts.train_rows_raw += 1,
            Partition::Test => counts.test_rows_raw += 1,
            Partition::Outside => {
                counts.outside_rows += 1;
                continue;
            }
        }
        let key = RowKey {
            date: s.date,
            store: s.store,
            item: s.item,
        };
        let is_zero = zeros.contains(s.store, s.item);
        let is_closed = s.date == closed;
        if is_zero || is_closed {
            if is_zero {
                counts.zero_rule_rows += 1;
            } else {
                counts.closure_rows += 1;
            }
            if part == Partition::Test {
                excluded_test.push(key);
            }
            continue;
        }
        let station = *station_of
            .get(&s.store)
            .ok_or(Error::UnknownStore(s.store))?;
        let w = weather
            .get(&(station, s.date))
            .ok_or_else(|| Error::MissingWeather {
                station,
                date: s.date.to_string(),
            })?;
        let ev = derive_event_features(s.date, holidays);
        let start = dw_vals.len();
        for (j, v) in w.values.iter().enumerate() {
            let v = v.ok_or_else(|| {
                Error::Table(format!(
                    "weather {} missing for station {station} on {}; impute first",
                    raw.schema.columns()[j],
                    s.date
                ))
            })?;
            dw_vals.push(v);
        }
        dw_vals.extend_from_slice(&ev.date_values());
        de_vals.extend_from_slice(&dw_vals[start..]);
        de_vals.extend_from_slice(&ev.event_values());
        target.push(log1p_units(s.units));
        meta.push(key);
    }

    let dweather = FeatureTable::new(dw_cols, dw_vals, target.clone(), meta.clone())?;
    let devent = FeatureTable::new(de_cols, de_vals, target, meta)?;
    let dweather = split(&dweather, split_spec)?;
    let devent = split(&devent, split_spec)?;
    counts.train_rows_modeled = dweather.0.n_rows();
    counts.test_rows_modeled = dweather.1.n_rows();
    Ok(FeatureTables {
        dweather,
        devent,
        zeros,
        excluded_test,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn d(s: &str) -> CalendarDate {
        s.parse().unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    fn one_col() -> WeatherSchema {
        WeatherSchema::new(vec!["tavg".into()]).unwrap()
    }

    fn wrec(date: &str, station: u32, v: Option<f64>) -> WeatherRecord {
        WeatherRecord {
            date: d(date),
            station,
            values: vec![v],
        }
    }

    #[test]
    fn loads_small_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(
            dir.path(),
            "sales.csv",
            "date,store_nbr,item_nbr,units\n2012-01-01,1,1,0\n2012-01-01,1,2,3\n2012-01-02,2,1,7\n",
        );
        let w = write(
            dir.path(),
            "weather.csv",
            "station_nbr,date,tavg,codesum\n1,2012-01-01,M,RA\n1,2012-01-02,T,\n2,2012-01-02,40, \n",
        );
        let k = write(dir.path(), "key.csv", "store_nbr,station_nbr\n1,1\n2,2\n");
        let t = load_tables(&s, &w, &k, &one_col()).unwrap();
        assert_eq!(t.sales.len(), 3);
        assert_eq!(t.sales[1].units, 3);
        assert_eq!(t.weather[0].values, vec![None]);
        assert_eq!(t.weather[1].values, vec![Some(TRACE_PRECIPITATION)]);
        assert_eq!(t.weather[2].values, vec![Some(40.0)]);
    }

    #[test]
    fn unknown_store_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s.csv", "date,store_nbr,item_nbr,units\n2012-01-01,99,1,0\n");
        let w = write(dir.path(), "w.csv", "station_nbr,date,tavg\n1,2012-01-01,3\n");
        let k = write(dir.path(), "k.csv", "store_nbr,station_nbr\n1,1\n");
        let err = load_tables(&s, &w, &k, &one_col()).unwrap_err();
        assert_eq!(err.to_string(), "store 99 has no station");
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(
            dir.path(),
            "s.csv",
            "date,store_nbr,item_nbr,units\n2012-01-01,1,1,0\n2012-01-02,1,1,-4\n",
        );
        let w = write(dir.path(), "w.csv", "station_nbr,date,tavg\n1,2012-01-01,3\n");
        let k = write(dir.path(), "k.csv", "store_nbr,station_nbr\n1,1\n");
        match load_tables(&s, &w, &k, &one_col()).unwrap_err() {
            Error::Malformed { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_sales_and_missing_header() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(
            dir.path(),
            "s.csv",
            "date,store_nbr,item_nbr,units\n2012-01-01,1,1,0\n2012-01-01,1,1,2\n",
        );
        let w = write(dir.path(), "w.csv", "station_nbr,date,tavg\n1,2012-01-01,3\n");
        let k = write(dir.path(), "k.csv", "store_nbr,station_nbr\n1,1\n");
        assert!(matches!(
            load_tables(&s, &w, &k, &one_col()),
            Err(Error::Duplicate { what: "sales", .. })
        ));
        let s2 = write(dir.path(), "s2.csv", "date,store_nbr,item_nbr,units\n2012-01-01,1,1,0\n");
        let w2 = write(dir.path(), "w2.csv", "station_nbr,date,tmax\n1,2012-01-01,3\n");
        assert!(matches!(
            load_tables(&s2, &w2, &k, &one_col()),
            Err(Error::Header { .. })
        ));
    }

    #[test]
    fn missing_weather_day_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "s.csv", "date,store_nbr,item_nbr,units\n2012-01-02,1,1,0\n");
        let w = write(dir.path(), "w.csv", "station_nbr,date,tavg\n1,2012-01-01,3\n");
        let k = write(dir.path(), "k.csv", "store_nbr,station_nbr\n1,1\n");
        assert!(matches!(
            load_tables(&s, &w, &k, &one_col()),
            Err(Error::MissingWeather { station: 1, .. })
        ));
    }

    #[test]
    fn imputation_rules() {
        let schema = one_col();
        let recs = vec![
            wrec("2012-01-03", 1, Some(7.0)),
            wrec("2012-01-01", 1, Some(5.0)),
            wrec("2012-01-02", 1, None),
            wrec("2012-01-01", 2, None),
            wrec("2012-01-02", 2, Some(4.0)),
        ];
        let out = impute_weather(&recs, &schema).unwrap();
        let vals: Vec<f64> = out.iter().map(|r| r.values[0].unwrap()).collect();
        assert_eq!(vals, [7.0, 5.0, 5.0, 4.0, 4.0]);

        let full = vec![wrec("2012-01-01", 1, Some(1.0)), wrec("2012-01-02", 1, Some(2.0))];
        assert_eq!(impute_weather(&full, &schema).unwrap(), full);
    }

    #[test]
    fn imputation_median_fallback_and_dead_column() {
        let schema = WeatherSchema::new(vec!["a".into(), "b".into()]).unwrap();
        let recs = vec![
            WeatherRecord { date: d("2012-01-01"), station: 1, values: vec![Some(1.0), None] },
            WeatherRecord { date: d("2012-01-01"), station: 2, values: vec![Some(3.0), None] },
            WeatherRecord { date: d("2012-01-01"), station: 3, values: vec![None, None] },
        ];
        match impute_weather(&recs, &schema).unwrap_err() {
            Error::ColumnAllMissing(cols) => assert_eq!(cols, vec!["b".to_string()]),
            e => panic!("unexpected {e}"),
        }
        let recs: Vec<_> = recs
            .into_iter()
            .map(|mut r| {
                r.values[1] = Some(0.0);
                r
            })
            .collect();
        let out = impute_weather(&recs, &schema).unwrap();
        assert_eq!(out[2].values[0], Some(2.0));
    }

    #[test]
    fn black_friday_dates() {
        assert_eq!(black_friday(2012), d("2012-11-23"));
        assert_eq!(black_friday(2013), d("2013-11-29"));
        assert_eq!(black_friday(2014), d("2014-11-28"));
    }

    #[test]
    fn event_feature_examples() {
        let h = HolidaySet::us_default();
        let bf = derive_event_features(d("2013-11-29"), &h);
        assert_eq!(bf.black_friday_window, [false, false, false, true, false, false, false]);
        assert_eq!(bf.weekday, 5);
        assert!(!bf.is_holiday);

        let ny = derive_event_features(d("2012-01-01"), &h);
        assert!(ny.is_weekend && ny.is_holiday && ny.is_holiday_and_weekend);
        assert!(!ny.is_holiday_and_weekday);

        let plain = derive_event_features(d("2013-06-12"), &h);
        assert_eq!(plain.event_values(), [3.0, 0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(plain.date_values(), [2013.0, 6.0, 12.0]);

        let thanks = derive_event_features(d("2013-11-28"), &h);
        assert!(thanks.is_holiday_and_weekday);
        assert!(thanks.black_friday_window[2]);
    }

    fn nth_weekday(year: i32, month: u8, weekday: u8, n: i64) -> CalendarDate {
        let first = CalendarDate::new(year, month, 1).unwrap();
        let shift = (i64::from(weekday) - i64::from(first.weekday())).rem_euclid(7);
        first.add_days(shift + 7 * (n - 1))
    }

    fn last_monday_of_may(year: i32) -> CalendarDate {
        let end = CalendarDate::new(year, 5, 31).unwrap();
        end.add_days(-((i64::from(end.weekday()) - 1).rem_euclid(7)))
    }

    #[test]
    fn bundled_holidays_follow_federal_rules() {
        let mut expected = HashSet::new();
        for y in 2012..=2014 {
            for (m, dd) in [(1, 1), (7, 4), (11, 11), (12, 25)] {
                expected.insert(CalendarDate::new(y, m, dd).unwrap());
            }
            expected.insert(nth_weekday(y, 1, 1, 3));
            expected.insert(nth_weekday(y, 2, 1, 3));
            expected.insert(last_monday_of_may(y));
            expected.insert(nth_weekday(y, 9, 1, 1));
            expected.insert(nth_weekday(y, 10, 1, 2));
            expected.insert(nth_weekday(y, 11, 4, 4));
        }
        assert_eq!(HolidaySet::us_default(), HolidaySet::from_dates(expected));
    }

    #[test]
    fn event_invariants_hold_for_every_day() {
        let h = HolidaySet::us_default();
        for date in d("2011-01-01").range_inclusive(d("2015-12-31")) {
            let e = derive_event_features(date, &h);
            assert!(u8::from(e.is_holiday_and_weekday) + u8::from(e.is_holiday_and_weekend) <= 1);
            assert!(e.black_friday_window.iter().filter(|b| **b).count() <= 1);
            assert_eq!(e.is_weekend, e.weekday == 0 || e.weekday == 6);
        }
    }

    #[test]
    fn holiday_file_comments() {
        let h = HolidaySet::parse("# header\n2012-07-04 # july\n\n  2012-12-25\n").unwrap();
        assert_eq!(h.len(), 2);
        assert!(HolidaySet::parse("2012-13-01\n").is_err());
    }

    fn tiny_raw() -> RawTables {
        let schema = one_col();
        let mut sales = Vec::new();
        let mut weather = Vec::new();
        for date in d("2013-12-20").range_inclusive(d("2014-01-05")) {
            weather.push(wrec(&date.to_string(), 1, Some(f64::from(date.day()))));
            for item in 1..=3u32 {
                let units = if item == 3 && date < d("2014-01-01") { 0 } else { u64::from(item) };
                sales.push(SalesRecord { date, store: 1, item, units });
            }
        }
        RawTables { schema, sales, weather, keys: vec![StationKey { store: 1, station: 1 }] }
    }

    #[test]
    fn feature_tables_apply_exclusions() {
        let raw = tiny_raw();
        let spec = SplitSpec::new(d("2013-12-20"), d("2013-12-31"), d("2014-01-01"), d("2014-01-05")).unwrap();
        let ft = build_feature_tables(&raw, &HolidaySet::us_default(), &spec).unwrap();
        assert!(ft.zeros.contains(1, 3));
        assert_eq!(ft.zeros.len(), 1);
        for t in [&ft.dweather.0, &ft.dweather.1, &ft.devent.0, &ft.devent.1] {
            assert!(t.meta().iter().all(|k| k.item != 3));
            assert!(t.meta().iter().all(|k| k.date != closure_date()));
        }
        // item 3 is excluded from test even though it sells there
        assert_eq!(ft.excluded_test.len(), 5);
        assert_eq!(ft.devent.0.n_cols(), ft.dweather.0.n_cols() + 12);
        assert_eq!(ft.dweather.0.columns(), &ft.devent.0.columns()[..ft.dweather.0.n_cols()]);
        // 12 train days minus the closure day, 2 items
        assert_eq!(ft.dweather.0.n_rows(), 22);
        assert_eq!(ft.dweather.1.n_rows(), 10);
        assert_eq!(ft.counts.closure_rows, 2);
        let row0 = ft.devent.0.row(0);
        assert_eq!(row0[0], 20.0);
        assert_eq!(&row0[1..4], &[2013.0, 12.0, 20.0]);
        assert_eq!(ft.devent.0.target()[0], log1p_units(1));
    }

    #[test]
    fn default_schema_column_counts() {
        let s = WeatherSchema::default();
        assert_eq!(dweather_columns(&s).len(), 20);
        assert_eq!(devent_columns(&s).len(), 32);
    }
}
