//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! to stderr, past the test harness's output capture.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use multiwave::components::{ComponentConfig, ComponentKind, FusionModel, Task};
use multiwave::data::{gen_low_band_probe, ingest_csv, square_wave, IngestSpec, SquareSignal, SyntheticConfig};
use multiwave::gradcheck::run_suite;
use multiwave::grouping::{feasible_l_max, plan_grouping, SignalSpec};
use multiwave::masking::mask_report;
use multiwave::training::{arm_spec, metric_auc, run_experiment, train, Arm, ExperimentResult, ExperimentSpec, TrainConfig};
use multiwave::wavelet::{band_label, decompose, max_level, reconstruct, Signal, WaveletFilters};

fn report(id: u32, pass: bool, detail: impl std::fmt::Display) {
    let line = format!("criterion {id:>2}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn corpus() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..100)
        .map(|i| {
            let len = [64, 128, 256][i % 3];
            (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect()
        })
        .collect()
}

#[test]
fn c01_perfect_reconstruction() {
    let start = Instant::now();
    let haar = WaveletFilters::haar();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for x in corpus() {
        let s = Signal::new("x", x.clone(), 1.0).unwrap();
        for levels in 1..=max_level(x.len()) {
            let back = reconstruct(&decompose(&s, &haar, levels).unwrap(), &haar).unwrap();
            assert_eq!(back.len(), x.len());
            worst = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            cases += 1;
        }
    }
    let took = start.elapsed();
    let pass = worst < 1e-9 && took < Duration::from_secs(5);
    report(1, pass, format!("{cases} decompositions, max abs error {worst:.2e}, {took:.2?}"));
    assert!(pass);
}

#[test]
fn c02_energy_conservation() {
    let haar = WaveletFilters::haar();
    let mut worst = 0.0f64;
    for x in corpus() {
        let s = Signal::new("x", x.clone(), 1.0).unwrap();
        let total: f64 = x.iter().map(|v| v * v).sum();
        for levels in 1..=max_level(x.len()) {
            let dec = decompose(&s, &haar, levels).unwrap();
            let parts: f64 = (1..=levels + 1).map(|j| dec.subsignal(j).unwrap().energy()).sum();
            worst = worst.max((parts - total).abs() / total);
        }
    }
    report(2, worst < 1e-9, format!("max relative energy error {worst:.2e}"));
    assert!(worst < 1e-9);
}

/// Haar detail energy of level `j` straight from the block definition:
/// each coefficient is the difference of the two half-block sums over `2^(j/2)`.
fn brute_detail_energy(x: &[f64], j: u32) -> f64 {
    let block = 1usize << j;
    let half = block / 2;
    x.chunks_exact(block)
        .map(|b| {
            let d = (b[..half].iter().sum::<f64>() - b[half..].iter().sum::<f64>()) / 2f64.powf(j as f64 / 2.0);
            d * d
        })
        .sum()
}

#[test]
fn c03_band_localization() {
    let rate = 128.0;
    let levels = max_level(128);
    let haar = WaveletFilters::haar();
    let mut lines = Vec::new();
    let mut pass = true;
    for f in [2.0, 4.0, 8.0, 16.0] {
        // half-sample phase keeps samples off the zero crossings
        let x = square_wave(f, rate, 128, 1.0, PI * f / rate);
        let dec = decompose(&Signal::new("x", x.clone(), rate).unwrap(), &haar, levels).unwrap();
        let oracle: Vec<f64> = (1..=levels as u32).map(|j| brute_detail_energy(&x, j)).collect();
        let lib: Vec<f64> = dec.details().iter().map(|d| d.energy()).collect();
        let agree = oracle.iter().zip(&lib).all(|(o, l)| (o - l).abs() < 1e-9);
        let target = (1..=levels).find(|j| band_label(rate, *j, false).contains(f)).unwrap();
        let share = oracle[target - 1] / oracle.iter().sum::<f64>();
        pass &= agree && share >= 0.9;
        lines.push(format!("{f} Hz -> D{target} ({}) {:.1}%", band_label(rate, target, false), 100.0 * share));
    }
    report(3, pass, lines.join(", "));
    assert!(pass);
}

fn members(plan: &multiwave::grouping::GroupingPlan, component: usize) -> Vec<(String, usize, f64)> {
    let mut m: Vec<(String, usize, f64)> =
        plan.components[component - 1].iter().map(|e| (e.name.clone(), e.subsignal, e.oversample_factor)).collect();
    m.sort_by(|a, b| a.0.cmp(&b.0));
    m
}

#[test]
fn c04_grouping() {
    // six-to-one rates: the slow signal's first detail joins the fast signal's third
    let six = plan_grouping(&[SignalSpec::new("x1", 16.0, 16), SignalSpec::new("x2", 96.0, 96)], 3).unwrap();
    let six_ok = members(&six, 3) == vec![("x1".to_string(), 1, 1.5), ("x2".to_string(), 3, 1.0)];

    let pair = plan_grouping(&[SignalSpec::new("x64", 64.0, 64), SignalSpec::new("x30", 30.0, 30)], 2).unwrap();
    let f30 = 64.0 / 60.0;
    let pair_ok = members(&pair, 1) == vec![("x64".to_string(), 1, 1.0)]
        && members(&pair, 2) == vec![("x30".to_string(), 1, f30), ("x64".to_string(), 2, 1.0)]
        && members(&pair, 3) == vec![("x30".to_string(), 2, f30), ("x64".to_string(), 3, 1.0)];

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tried = 0;
    let mut bad = 0;
    while tried < 1000 {
        let specs: Vec<SignalSpec> = (0..2)
            .map(|i| {
                let rate: f64 = rng.gen_range(1.0..500.0);
                SignalSpec::new(format!("s{i}"), rate, (rate * 4.0).round().max(2.0) as usize)
            })
            .collect();
        let (lo, hi) = feasible_l_max(&specs).unwrap();
        if lo > hi {
            continue;
        }
        tried += 1;
        let plan = plan_grouping(&specs, rng.gen_range(lo..=hi)).unwrap();
        let factors = plan.signals.iter().map(|s| s.oversample_factor).chain(plan.components.iter().flatten().map(|e| e.oversample_factor));
        bad += factors.filter(|f| !(1.0..2.0).contains(f)).count();
    }
    let pass = six_ok && pair_ok && bad == 0;
    report(4, pass, format!("6:1 example {six_ok}, 64/30 plan {pair_ok}, {bad} factors outside [1, 2) over {tried} random pairs"));
    assert!(pass);
}

#[test]
fn c05_gradient_suite() {
    let start = Instant::now();
    let results = run_suite().unwrap();
    let took = start.elapsed();
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| r.to_string()).collect();
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let pass = failed.is_empty() && took < Duration::from_secs(120);
    report(5, pass, format!("{} checks, max relative error {worst:.2e}, {took:.2?} {failed:?}", results.len()));
    assert!(pass);
}

// Synthetic trend settings. The datasets are smaller than the full
// generator defaults (2000/500/500) so the three trend runs fit on one core.
const N_TRAIN: usize = 300;
const N_VAL: usize = 100;
const N_TEST: usize = 200;

struct Trend {
    name: &'static str,
    kind: ComponentKind,
    levels: Option<usize>,
    alpha: f64,
    max_epochs: usize,
}

fn trend_spec(t: &Trend) -> ExperimentSpec {
    ExperimentSpec {
        name: t.name.into(),
        component: ComponentConfig { kind: t.kind, hidden: 24, ..ComponentConfig::default() },
        arms: vec![Arm::Baseline, Arm::Multiwave],
        train: TrainConfig { lr: 0.003, patience: 15, max_epochs: t.max_epochs, levels: t.levels, alpha: t.alpha, ..TrainConfig::default() },
        data: SyntheticConfig { n_train: N_TRAIN, n_val: N_VAL, n_test: N_TEST, ..SyntheticConfig::default() },
        ..ExperimentSpec::default()
    }
}

/// Settings where MultiWave's mean test MSE is at most the baseline's.
fn wins(r: &ExperimentResult) -> (usize, Vec<String>) {
    let mut n = 0;
    let mut cells = Vec::new();
    for s in &r.settings {
        let b = r.cell(s, Arm::Baseline).unwrap().mean;
        let m = r.cell(s, Arm::Multiwave).unwrap().mean;
        n += usize::from(m <= b);
        cells.push(format!("{s}: {m:.2} vs {b:.2}"));
    }
    (n, cells)
}

fn trend(id: u32, t: Trend, need: usize, budget: Option<Duration>) {
    let start = Instant::now();
    let r = run_experiment(&trend_spec(&t)).unwrap();
    let took = start.elapsed();
    assert!(r.runs.iter().all(|c| c.per_seed.len() == 5));
    let (n, cells) = wins(&r);
    let pass = n >= need && budget.map_or(true, |b| took < b);
    report(id, pass, format!("MultiWave <= baseline in {n}/{} settings, {took:.0?} [{}]", r.settings.len(), cells.join("; ")));
    assert!(pass);
}

#[test]
fn c06_synthetic_signal_count_trend() {
    let t = Trend { name: "synthetic-1", kind: ComponentKind::Lstm, levels: Some(3), alpha: 0.2, max_epochs: 80 };
    trend(6, t, 4, Some(Duration::from_secs(30 * 60)));
}

#[test]
fn c07_synthetic_rate_trend() {
    let t = Trend { name: "synthetic-2", kind: ComponentKind::Lstm, levels: None, alpha: 0.05, max_epochs: 80 };
    trend(7, t, 4, None);
}

#[test]
fn c08_nonpow2_trend() {
    let t = Trend { name: "nonpow2", kind: ComponentKind::Transformer, levels: Some(2), alpha: 0.2, max_epochs: 150 };
    trend(8, t, 3, None);
}

#[test]
fn c09_mask_selection() {
    // four 16 Hz signals over 4 s; with three levels the approximation is 0-2 Hz
    let signals: Vec<SquareSignal> = (0..4).map(|_| SquareSignal::new(1.0, 16.0)).collect();
    let component = ComponentConfig { kind: ComponentKind::Mlp, hidden: 8, ..ComponentConfig::default() };
    let mut good = 0;
    let mut lines = Vec::new();
    for seed in 123..128 {
        let ds = gen_low_band_probe(&SyntheticConfig {
            signals: signals.clone(),
            duration: 4.0,
            n_train: 300,
            n_val: 100,
            n_test: 100,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut best: Option<(f64, f64, multiwave::masking::MaskReport)> = None;
        for alpha in [0.01, 0.05, 0.1] {
            let cfg = TrainConfig { alpha, lr: 0.003, levels: Some(3), add_baseline: false, max_epochs: 150, patience: 20, ..TrainConfig::default() };
            let spec = arm_spec(Arm::Multiwave, &component, &ds.signals, Task::Regression, &cfg, seed).unwrap();
            let out = train(&spec, &ds, &cfg).unwrap();
            let masks = mask_report(&out.checkpoint.model().unwrap().mask_bank(), out.best_epoch);
            if best.as_ref().map_or(true, |b| out.val_metric < b.1) {
                best = Some((alpha, out.val_metric, masks));
            }
        }
        let (alpha, _, masks) = best.unwrap();
        let mut informative = 0.0;
        let (mut noise, mut closed) = (0, 0);
        for e in &masks.entries {
            if e.signal == "x1" && e.band.low_hz == 0.0 {
                informative = e.effective_weight;
            } else {
                noise += 1;
                closed += usize::from(e.effective_weight == 0.0);
            }
        }
        let ok = informative > 0.0 && closed as f64 >= 0.8 * noise as f64;
        good += usize::from(ok);
        lines.push(format!("seed {seed} alpha {alpha}: informative {informative:.3}, {closed}/{noise} noise masks closed"));
    }
    let pass = good >= 4;
    report(9, pass, format!("{good}/5 seeds [{}]", lines.join("; ")));
    assert!(pass);
}

fn brute_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, si) in scores.iter().enumerate() {
        for (j, sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn c10_auc_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    let mut with_ties = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=200);
        // a coarse score grid in half of the instances forces ties
        let levels = if rng.gen_bool(0.5) { rng.gen_range(2..8) } else { 0 };
        let scores: Vec<f64> = (0..n)
            .map(|_| if levels > 0 { rng.gen_range(0..levels) as f64 / levels as f64 } else { rng.gen::<f64>() })
            .collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        with_ties += usize::from(sorted.windows(2).any(|w| w[0] == w[1]));
        worst = worst.max((metric_auc(&scores, &positive).unwrap() - brute_auc(&scores, &positive)).abs());
    }
    let pass = worst <= 1e-12 && with_ties > 0;
    report(10, pass, format!("max deviation {worst:.2e} over 1000 instances, {with_ties} with ties"));
    assert!(pass);
}

#[test]
fn c11_ablation_arms() {
    let spec = ExperimentSpec {
        name: "synthetic-2".into(),
        component: ComponentConfig { kind: ComponentKind::Mlp, hidden: 8, ..ComponentConfig::default() },
        arms: vec![Arm::Baseline, Arm::MultiwaveNoMask, Arm::Multiwave],
        train: TrainConfig { seeds: vec![1], max_epochs: 10, lr: 0.003, ..TrainConfig::default() },
        data: SyntheticConfig { n_train: 100, n_val: 40, n_test: 40, ..SyntheticConfig::default() },
        ..ExperimentSpec::default()
    };
    let r = run_experiment(&spec).unwrap();
    let mut complete = true;
    let mut better = 0;
    for s in &r.settings {
        let cells: Vec<f64> = spec.arms.iter().filter_map(|a| r.cell(s, *a)).map(|c| c.mean).collect();
        complete &= cells.len() == 3 && cells.iter().all(|v| v.is_finite());
        better += usize::from(cells.len() == 3 && cells[2] <= cells[1]);
    }
    let trail_ok = r.runs.iter().filter(|c| c.arm == Arm::MultiwaveNoMask).all(|c| c.per_seed.iter().all(|s| s.mask_trail.is_empty()))
        && r.runs.iter().filter(|c| c.arm == Arm::Multiwave).all(|c| c.per_seed.iter().all(|s| !s.mask_trail.is_empty()));
    let pass = complete && trail_ok;
    report(11, pass, format!("3 arms in {} settings; masks helped in {better}/{} (reported only)", r.settings.len(), r.settings.len()));
    assert!(pass);
}

#[test]
fn c12_real_data_substitution() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let load = |dir: &str| {
        let spec = IngestSpec::from_toml(&std::fs::read_to_string(fixtures.join(dir).join("ingest.toml")).unwrap()).unwrap();
        ingest_csv(&spec, &fixtures.join(dir)).unwrap()
    };
    let wearable = load("wearable");
    let rates: Vec<f64> = wearable.signals.iter().map(|s| s.rate).collect();
    let wearable_ok = rates == [64.0, 8.0, 8.0, 4.0, 4.0, 4.0, 64.0, 8.0, 4.0, 4.0];
    let clinical = load("clinical");
    let days: Vec<f64> = clinical.signals.iter().map(|s| (1.0 / s.rate).round()).collect();
    let clinical_ok = days == [1.0, 2.0, 3.0, 5.0, 7.0, 8.0];
    let model_ok = [&wearable, &clinical].iter().all(|ds| {
        let spec = arm_spec(Arm::Multiwave, &ComponentConfig::default(), &ds.signals, ds.task, &TrainConfig::default(), 0).unwrap();
        let m = FusionModel::build(&spec).unwrap();
        ds.train.iter().all(|s| m.featurize(&s.series).is_ok())
    });
    let pass = wearable_ok && clinical_ok && model_ok;
    report(
        12,
        pass,
        "real-dataset scores are not reproduced (the recordings are not bundled); \
         fixture resampling schedules and model input checked instead",
    );
    assert!(pass);
}
