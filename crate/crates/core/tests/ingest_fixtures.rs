//! Ingestion of the bundled wearable (long layout) and clinical (wide layout,
//! irregular) fixture recordings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use multiwave::data::{ingest_csv, Dataset, IngestSpec};

fn fixture(dir: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(dir)
}

fn load(dir: &str, scale: bool) -> (IngestSpec, Dataset) {
    let text = std::fs::read_to_string(fixture(dir).join("ingest.toml")).unwrap();
    let mut spec = IngestSpec::from_toml(&text).unwrap();
    spec.min_max_scale = scale;
    let ds = ingest_csv(&spec, &fixture(dir)).unwrap();
    (spec, ds)
}

fn signal_index(spec: &IngestSpec, name: &str) -> usize {
    spec.signals.iter().position(|s| s.name == name).unwrap()
}

/// `(time, value)` of one key in a long-layout file, read without the library.
fn long_rows(path: &Path, key: &str) -> Vec<(f64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter_map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            (parts[1] == key).then(|| (parts[0].parse().unwrap(), parts[2].parse().unwrap()))
        })
        .collect()
}

/// One column of a wide-layout file, skipping empty cells.
fn wide_column(path: &Path, column: &str) -> Vec<(f64, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let c = header.iter().position(|h| *h == column).unwrap();
    lines
        .filter_map(|l| {
            let parts: Vec<&str> = l.split(',').collect();
            (!parts[c].is_empty()).then(|| (parts[0].parse().unwrap(), parts[c].parse().unwrap()))
        })
        .collect()
}

#[test]
fn wearable_rates_follow_schedule() {
    let (_, ds) = load("wearable", true);
    let expect = [
        ("ecg", 64.0),
        ("acc_chest", 8.0),
        ("emg", 8.0),
        ("eda_chest", 4.0),
        ("temp_chest", 4.0),
        ("resp", 4.0),
        ("bvp", 64.0),
        ("acc_wrist", 8.0),
        ("eda_wrist", 4.0),
        ("temp_wrist", 4.0),
    ];
    for (spec, (name, rate)) in ds.signals.iter().zip(expect) {
        assert_eq!(spec.name, name);
        assert_eq!(spec.rate, rate);
        assert_eq!(spec.len, rate as usize);
    }
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (2, 2, 2));
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        let lens: Vec<usize> = s.series.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![64, 8, 8, 4, 4, 4, 64, 8, 4, 4]);
    }
    let labels = |v: &[multiwave::data::Sample]| v.iter().map(|s| s.label).collect::<Vec<_>>();
    assert_eq!(labels(&ds.train), vec![0.0, 1.0]);
    assert_eq!(labels(&ds.val), vec![1.0, 2.0]);
    assert_eq!(labels(&ds.test), vec![2.0, 0.0]);
}

#[test]
fn wearable_average_pooling_matches_oracle() {
    let (spec, ds) = load("wearable", false);
    let path = fixture("wearable").join("s2.csv");
    for (name, rate) in [("ecg", 64.0), ("acc_chest", 8.0), ("resp", 4.0), ("acc_wrist", 8.0)] {
        let rows = long_rows(&path, name);
        let mut bins: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (t, v) in rows {
            let e = bins.entry((t * rate + 1e-9).floor() as usize).or_default();
            e.0 += v;
            e.1 += 1;
        }
        let oracle: Vec<f64> = bins.values().map(|(s, n)| s / *n as f64).collect();
        let k = signal_index(&spec, name);
        let got: Vec<f64> = ds.train.iter().flat_map(|s| s.series[k].clone()).collect();
        assert_eq!(got.len(), oracle.len(), "{name}");
        for (g, o) in got.iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-9, "{name}: {g} vs {o}");
        }
    }
}

#[test]
fn wearable_scaling_fit_on_train_only() {
    let (_, ds) = load("wearable", true);
    for k in 0..ds.signals.len() {
        let train: Vec<f64> = ds.train.iter().flat_map(|s| s.series[k].clone()).collect();
        let lo = train.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = train.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= -1e-12 && hi <= 1.0 + 1e-12);
    }
    // subject s4 has a larger wrist acceleration offset than anything in training
    let k = 7;
    assert!(ds.test.iter().flat_map(|s| s.series[k].iter()).any(|v| *v > 1.0));
}

#[test]
fn clinical_intervals_follow_schedule() {
    let (_, ds) = load("clinical", true);
    let days = [1.0, 2.0, 3.0, 5.0, 7.0, 8.0];
    for (spec, d) in ds.signals.iter().zip(days) {
        assert!((spec.rate - 1.0 / d).abs() < 1e-12);
        assert_eq!(spec.len, (40.0 / d).round() as usize);
    }
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (4, 1, 1));
    let lens: Vec<usize> = ds.test[0].series.iter().map(Vec::len).collect();
    assert_eq!(lens, vec![40, 20, 13, 8, 6, 5]);
    assert_eq!(ds.train.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 1.0]);
}

#[test]
fn clinical_keeps_last_value_per_interval() {
    let (spec, ds) = load("clinical", false);
    let esr = signal_index(&spec, "esr");
    for (i, pid) in ["p01", "p02", "p03", "p04"].iter().enumerate() {
        let obs = wide_column(&fixture("clinical").join(format!("{pid}.csv")), "esr");
        let last_in_first = obs.iter().filter(|(t, _)| *t < 2.0).last().unwrap().1;
        assert_eq!(last_in_first, 4.25);
        assert_eq!(ds.train[i].series[esr][0], 4.25, "{pid}");
    }
}

#[test]
fn clinical_interpolates_gaps() {
    let (spec, ds) = load("clinical", false);
    let k = signal_index(&spec, "hemoglobin");
    let s = &ds.train[0].series[k];
    let obs = wide_column(&fixture("clinical").join("p01.csv"), "hemoglobin");
    let at = |day: usize| obs.iter().find(|(t, _)| t.floor() as usize == day).unwrap().1;
    assert_eq!(s[10], at(10));
    assert_eq!(s[13], at(13));
    assert!((s[11] - (at(10) + (at(13) - at(10)) / 3.0)).abs() < 1e-12);
    assert!((s[12] - (at(10) + 2.0 * (at(13) - at(10)) / 3.0)).abs() < 1e-12);
}

#[test]
fn clinical_missing_feature_gets_training_mean() {
    let (spec, ds) = load("clinical", false);
    let k = signal_index(&spec, "ferritin");
    let recorded: Vec<f64> = ["p01", "p02", "p03", "p04"]
        .iter()
        .flat_map(|p| wide_column(&fixture("clinical").join(format!("{p}.csv")), "ferritin"))
        .map(|(_, v)| v)
        .collect();
    let mean = recorded.iter().sum::<f64>() / recorded.len() as f64;
    for series in [&ds.train[2].series[k], &ds.test[0].series[k]] {
        assert_eq!(series.len(), 5);
        assert!(series.iter().all(|v| (v - mean).abs() < 1e-12), "{series:?} vs {mean}");
    }
}
