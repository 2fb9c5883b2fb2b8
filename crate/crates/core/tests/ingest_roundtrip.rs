use std::collections::HashSet;

use demand_core::ingest::{
    build_feature_tables, impute_weather, load_tables, HolidaySet, WeatherSchema,
};
use demand_core::synth::{self, SynthSpec};
use demand_core::{CalendarDate, SplitSpec};
use proptest::prelude::*;

fn small_spec(seed: u64, stores: u32, items: u32, stations: u32, days: i64, missing: f64) -> SynthSpec {
    let mut spec = SynthSpec::desk_default(seed);
    spec.n_stores = stores;
    spec.n_items = items;
    spec.n_stations = stations;
    spec.start = CalendarDate::new(2013, 12, 1).unwrap();
    spec.end = spec.start.add_days(days - 1);
    spec.missing_rate = missing;
    spec.zero_pairs = u32::from(stores * items > 1);
    spec
}

#[test]
fn written_fixture_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(9, 3, 2, 2, 40, 0.1);
    let data = synth::generate_tables(&spec).unwrap();
    let files = synth::generate(&spec, dir.path()).unwrap();
    let raw = load_tables(&files.sales, &files.weather, &files.key, &WeatherSchema::default()).unwrap();
    assert_eq!(raw.sales, data.tables.sales);
    assert_eq!(raw.keys, data.tables.keys);
    assert_eq!(raw.weather, data.tables.weather);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ingest_bookkeeping_is_consistent(
        seed in 0u64..1000,
        stores in 1u32..4,
        items in 1u32..4,
        stations in 1u32..3,
        days in 30i64..60,
        missing in 0.0f64..0.3,
    ) {
        let spec = small_spec(seed, stores, items, stations, days, missing);
        let data = synth::generate_tables(&spec).unwrap();
        let mut raw = data.tables;
        raw.weather = impute_weather(&raw.weather, &raw.schema).unwrap();
        prop_assert!(raw.weather.iter().all(|w| w.values.iter().all(|v| v.is_some())));

        let split = SplitSpec::new(
            spec.start,
            spec.start.add_days(19),
            spec.start.add_days(20),
            spec.end,
        ).unwrap();
        let ft = build_feature_tables(&raw, &HolidaySet::us_default(), &split).unwrap();
        let c = ft.counts;
        let (train, test) = &ft.dweather;

        prop_assert_eq!(c.train_rows_raw + c.test_rows_raw + c.outside_rows, raw.sales.len());
        prop_assert_eq!(c.outside_rows, 0);
        prop_assert_eq!(
            c.train_rows_modeled + c.test_rows_modeled + c.zero_rule_rows + c.closure_rows,
            c.train_rows_raw + c.test_rows_raw
        );
        prop_assert_eq!(train.n_rows(), c.train_rows_modeled);
        prop_assert_eq!(test.n_rows(), c.test_rows_modeled);
        prop_assert_eq!(ft.devent.0.n_rows(), train.n_rows());
        prop_assert_eq!(ft.devent.1.n_rows(), test.n_rows());
        prop_assert_eq!(ft.devent.0.n_cols(), train.n_cols() + 12);

        // every test sale is either modeled or excluded, never both
        let modeled: HashSet<_> = test.meta().iter().copied().collect();
        let excluded: HashSet<_> = ft.excluded_test.iter().copied().collect();
        prop_assert!(modeled.is_disjoint(&excluded));
        prop_assert_eq!(modeled.len() + excluded.len(), c.test_rows_raw);

        prop_assert!(train.meta().iter().all(|k| k.date <= split.train_end()));
        prop_assert!(test.meta().iter().all(|k| k.date >= split.test_start()));
        prop_assert!(train.values().iter().chain(test.values()).all(|v| v.is_finite()));
        prop_assert!(train.target().iter().all(|&t| t >= 0.0));
        let christmas = CalendarDate::new(2013, 12, 25).unwrap();
        prop_assert!(!train.meta().iter().chain(test.meta()).any(|k| k.date == christmas));
    }
}
