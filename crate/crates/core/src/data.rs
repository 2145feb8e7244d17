//! Synthetic square-wave benchmarks and CSV ingestion.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::Task;
use crate::error::{Error, Result};
use crate::grouping::SignalSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// One series per signal, in dataset signal order.
    pub series: Vec<Vec<f64>>,
    /// Regression target, or class index stored as a float.
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub signals: Vec<SignalSpec>,
    pub task: Task,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            if s.series.len() != self.signals.len() {
                return Err(Error::invalid("sample signal count differs from dataset signals"));
            }
            for (v, spec) in s.series.iter().zip(&self.signals) {
                if v.len() != spec.len {
                    return Err(Error::invalid(format!(
                        "signal {} has {} samples, expected {}",
                        spec.name,
                        v.len(),
                        spec.len
                    )));
                }
            }
            let ok = match self.task {
                Task::Regression => s.label.is_finite(),
                Task::Classification { classes } => s.label >= 0.0 && s.label.fract() == 0.0 && (s.label as usize) < classes,
            };
            if !ok {
                return Err(Error::invalid(format!("invalid label {}", s.label)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareSignal {
    pub freq_hz: f64,
    pub rate_hz: f64,
}

impl SquareSignal {
    pub fn new(freq_hz: f64, rate_hz: f64) -> Self {
        SquareSignal { freq_hz, rate_hz }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub signals: Vec<SquareSignal>,
    pub duration: f64,
    pub amplitude_max: f64,
    /// Noise is drawn from `U(-noise, noise)`.
    pub noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            signals: vec![SquareSignal::new(1.0, 128.0), SquareSignal::new(2.0, 128.0)],
            duration: 1.0,
            amplitude_max: 10.0,
            noise: 3.0,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn with_signals(signals: Vec<SquareSignal>) -> Self {
        SyntheticConfig { signals, ..Default::default() }
    }

    pub fn signal_specs(&self) -> Vec<SignalSpec> {
        self.signals
            .iter()
            .enumerate()
            .map(|(i, s)| SignalSpec::new(format!("x{}", i + 1), s.rate_hz, (self.duration * s.rate_hz).round() as usize))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.signals.is_empty() {
            return Err(Error::invalid("synthetic config has no signals"));
        }
        if self.duration <= 0.0 || self.amplitude_max <= 0.0 || self.noise < 0.0 {
            return Err(Error::invalid("synthetic duration and amplitude must be positive, noise non-negative"));
        }
        for (s, spec) in self.signals.iter().zip(self.signal_specs()) {
            if !(s.freq_hz > 0.0 && s.rate_hz > 0.0) || spec.len < 2 {
                return Err(Error::invalid(format!("bad synthetic signal {s:?}")));
            }
        }
        Ok(())
    }
}

/// splitmix64 finalizer, used to derive per-sample seeds from the master seed.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// `amplitude * sign(sin(2π f t + phase))` with `sign(0) = +1`.
pub fn square_wave(freq_hz: f64, rate_hz: f64, len: usize, amplitude: f64, phase: f64) -> Vec<f64> {
    (0..len)
        .map(|n| {
            let s = (2.0 * PI * freq_hz * n as f64 / rate_hz + phase).sin();
            if s >= 0.0 {
                amplitude
            } else {
                -amplitude
            }
        })
        .collect()
}

fn square_sample(cfg: &SyntheticConfig, specs: &[SignalSpec], seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut label = 0.0;
    let series = cfg
        .signals
        .iter()
        .zip(specs)
        .map(|(s, spec)| {
            let a = rng.gen_range(0.0..cfg.amplitude_max);
            let phase = rng.gen_range(0.0..2.0 * PI);
            label += a;
            let mut v = square_wave(s.freq_hz, s.rate_hz, spec.len, a, phase);
            if cfg.noise > 0.0 {
                v.iter_mut().for_each(|x| *x += rng.gen_range(-cfg.noise..cfg.noise));
            }
            v
        })
        .collect();
    Sample { series, label }
}

fn split_samples(n: [usize; 3], mut make: impl FnMut(u64) -> Sample) -> [Vec<Sample>; 3] {
    let mut idx = 0u64;
    n.map(|count| {
        (0..count)
            .map(|_| {
                idx += 1;
                make(idx - 1)
            })
            .collect()
    })
}

/// Noisy square waves whose regression label is the sum of amplitudes.
pub fn gen_square_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let specs = cfg.signal_specs();
    let [train, val, test] = split_samples([cfg.n_train, cfg.n_val, cfg.n_test], |i| {
        square_sample(cfg, &specs, sample_seed(cfg.seed, i))
    });
    Ok(Dataset { signals: specs, task: Task::Regression, train, val, test })
}

/// Five settings growing from {1, 2} Hz to ten signals, all at 128 Hz.
pub fn experiment1_schedule() -> Vec<Vec<SquareSignal>> {
    let mut freqs = vec![1.0, 2.0];
    let mut out = vec![freqs.clone()];
    for f in [4.0, 8.0, 16.0, 32.0] {
        freqs.extend([f, f]);
        out.push(freqs.clone());
    }
    out.into_iter()
        .map(|fs| fs.into_iter().map(|f| SquareSignal::new(f, 128.0)).collect())
        .collect()
}

/// `base` followed by four settings halving the first signal's rate.
pub fn gen_multirate_schedule(base: &[SquareSignal]) -> Vec<Vec<SquareSignal>> {
    (0..5)
        .map(|k| {
            let mut s = base.to_vec();
            if let Some(first) = s.first_mut() {
                first.rate_hz /= f64::from(1u32 << k);
            }
            s
        })
        .collect()
}

pub fn multirate_base() -> Vec<SquareSignal> {
    vec![SquareSignal::new(2.0, 64.0), SquareSignal::new(4.0, 128.0)]
}

/// {1, 2, 4, 6} Hz, then 7, 13 and 17 Hz appended, all at 128 Hz.
pub fn gen_nonpow2_schedule() -> Vec<Vec<SquareSignal>> {
    let mut freqs = vec![1.0, 2.0, 4.0, 6.0];
    let mut out = vec![freqs.clone()];
    for f in [7.0, 13.0, 17.0] {
        freqs.push(f);
        out.push(freqs.clone());
    }
    out.into_iter()
        .map(|fs| fs.into_iter().map(|f| SquareSignal::new(f, 128.0)).collect())
        .collect()
}

/// Signal 1 is a constant level `A ~ U(0, amplitude_max)` (pure DC, so the
/// lowest band), the others are zero-mean noise; the label is `A`. Noise on
/// signal 1 follows `cfg.noise`.
pub fn gen_low_band_probe(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let specs = cfg.signal_specs();
    let [train, val, test] = split_samples([cfg.n_train, cfg.n_val, cfg.n_test], |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, i));
        let a = rng.gen_range(0.0..cfg.amplitude_max);
        let series = specs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                (0..s.len)
                    .map(|_| {
                        let n = rng.gen_range(-cfg.noise..=cfg.noise);
                        if k == 0 {
                            a + n
                        } else {
                            n
                        }
                    })
                    .collect()
            })
            .collect();
        Sample { series, label: a }
    });
    Ok(Dataset { signals: specs, task: Task::Regression, train, val, test })
}

/// Writes one sample in long layout: `time,signal,value`, label as signal `label`.
pub fn write_sample_csv<W: Write>(signals: &[SignalSpec], sample: &Sample, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "signal", "value"])?;
    for (spec, series) in signals.iter().zip(&sample.series) {
        for (n, v) in series.iter().enumerate() {
            w.write_record([(n as f64 / spec.rate).to_string(), spec.name.clone(), v.to_string()])?;
        }
    }
    w.write_record(["0".to_string(), "label".to_string(), sample.label.to_string()])?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------- ingestion

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMethod {
    /// Mean of the samples in each target interval.
    Average,
    /// Last recorded value in each target interval.
    Last,
    /// Linear interpolation at the interval start.
    Interpolate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// One row per timestamp, one column per signal; empty cells are missing.
    Wide,
    /// `time,signal,value` rows.
    Long,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSignal {
    pub name: String,
    /// Source column (wide) or signal key (long); defaults to `name`.
    #[serde(default)]
    pub column: Option<String>,
    /// Nominal source rate; `None` for irregular sources.
    #[serde(default)]
    pub source_rate: Option<f64>,
    pub target_rate: f64,
    pub method: ResampleMethod,
}

impl IngestSignal {
    pub fn key(&self) -> &str {
        self.column.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub val: Vec<PathBuf>,
    #[serde(default)]
    pub test: Vec<PathBuf>,
}

/// Ingestion recipe, usually loaded from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSpec {
    pub layout: Layout,
    #[serde(default = "default_time_column")]
    pub time_column: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    pub task: Task,
    /// Window length in time units; each signal gets `round(window * rate)` samples.
    pub window: f64,
    /// Window step; defaults to `window`.
    #[serde(default)]
    pub stride: Option<f64>,
    #[serde(default = "default_true")]
    pub min_max_scale: bool,
    pub signals: Vec<IngestSignal>,
    pub files: SplitFiles,
}

fn default_time_column() -> String {
    "time".into()
}

fn default_label_column() -> String {
    "label".into()
}

fn default_true() -> bool {
    true
}

impl IngestSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: IngestSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.signals.is_empty() {
            return Err(Error::invalid("ingest spec lists no signals"));
        }
        for s in &self.signals {
            if !(s.target_rate > 0.0) || s.source_rate.is_some_and(|r| !(r > 0.0)) {
                return Err(Error::invalid(format!("signal {}: rates must be positive", s.name)));
            }
            if (self.window * s.target_rate).round() < 2.0 {
                return Err(Error::invalid(format!(
                    "signal {}: window of {} gives fewer than 2 samples at {} Hz",
                    s.name, self.window, s.target_rate
                )));
            }
        }
        if self.stride.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::invalid("stride must be positive"));
        }
        if self.files.train.is_empty() {
            return Err(Error::invalid("ingest spec has no training files"));
        }
        Ok(())
    }

    pub fn signal_specs(&self) -> Vec<SignalSpec> {
        self.signals
            .iter()
            .map(|s| SignalSpec::new(s.name.clone(), s.target_rate, (self.window * s.target_rate).round() as usize))
            .collect()
    }
}

/// Raw observations of one file: per signal `(time, value)` and labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Recording {
    pub observations: Vec<Vec<(f64, f64)>>,
    pub labels: Vec<(f64, f64)>,
}

impl Recording {
    fn span(&self) -> Option<(f64, f64)> {
        let times = self.observations.iter().flatten().chain(&self.labels).map(|(t, _)| *t);
        times.fold(None, |acc, t| match acc {
            None => Some((t, t)),
            Some((lo, hi)) => Some((lo.min(t), hi.max(t))),
        })
    }
}

fn parse_cell(text: &str, row: usize, what: &str) -> Result<Option<f64>> {
    let t = text.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("nan") || t.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    t.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Parse { row, msg: format!("cannot parse {what} `{t}`") })
}

/// Parses one subject file. Rows are numbered from 1 at the header line.
pub fn parse_recording<R: Read>(spec: &IngestSpec, input: R) -> Result<Recording> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut rec = Recording { observations: vec![Vec::new(); spec.signals.len()], labels: Vec::new() };
    match spec.layout {
        Layout::Wide => {
            let time = col(&spec.time_column)
                .ok_or_else(|| Error::invalid(format!("missing time column `{}`", spec.time_column)))?;
            let label = col(&spec.label_column);
            let cols = spec
                .signals
                .iter()
                .map(|s| col(s.key()).ok_or_else(|| Error::invalid(format!("missing column `{}`", s.key()))))
                .collect::<Result<Vec<_>>>()?;
            for (i, row) in rdr.records().enumerate() {
                let line = i + 2;
                let row = row.map_err(|e| Error::Parse { row: line, msg: e.to_string() })?;
                let t = parse_cell(&row[time], line, "time")?
                    .ok_or_else(|| Error::Parse { row: line, msg: "missing time".into() })?;
                for (k, c) in cols.iter().enumerate() {
                    if let Some(v) = parse_cell(&row[*c], line, "value")? {
                        rec.observations[k].push((t, v));
                    }
                }
                if let Some(l) = label {
                    if let Some(v) = parse_cell(&row[l], line, "label")? {
                        rec.labels.push((t, v));
                    }
                }
            }
        }
        Layout::Long => {
            let need = |n: &str| col(n).ok_or_else(|| Error::invalid(format!("long layout needs a `{n}` column")));
            let (time, signal, value) = (need(&spec.time_column)?, need("signal")?, need("value")?);
            let index: BTreeMap<&str, usize> = spec.signals.iter().enumerate().map(|(k, s)| (s.key(), k)).collect();
            for (i, row) in rdr.records().enumerate() {
                let line = i + 2;
                let row = row.map_err(|e| Error::Parse { row: line, msg: e.to_string() })?;
                let t = parse_cell(&row[time], line, "time")?
                    .ok_or_else(|| Error::Parse { row: line, msg: "missing time".into() })?;
                let key = row[signal].trim();
                let Some(v) = parse_cell(&row[value], line, "value")? else { continue };
                if key == spec.label_column {
                    rec.labels.push((t, v));
                } else if let Some(k) = index.get(key) {
                    rec.observations[*k].push((t, v));
                }
            }
        }
    }
    for obs in &mut rec.observations {
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    rec.labels.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(rec)
}

/// Resamples irregular `(time, value)` points onto `len` bins of width
/// `1/rate` starting at `start`. Empty bins are `None`.
pub fn resample(obs: &[(f64, f64)], start: f64, rate: f64, len: usize, method: ResampleMethod) -> Vec<Option<f64>> {
    let bin = |t: f64| ((t - start) * rate + 1e-9).floor();
    match method {
        ResampleMethod::Average | ResampleMethod::Last => {
            let mut sums = vec![(0.0, 0usize, None); len];
            for &(t, v) in obs {
                let b = bin(t);
                if b < 0.0 || b >= len as f64 {
                    continue;
                }
                let cell = &mut sums[b as usize];
                cell.0 += v;
                cell.1 += 1;
                cell.2 = Some(v);
            }
            sums.into_iter()
                .map(|(s, n, last)| match method {
                    ResampleMethod::Average => (n > 0).then(|| s / n as f64),
                    _ => last,
                })
                .collect()
        }
        ResampleMethod::Interpolate => (0..len)
            .map(|k| {
                let t = start + k as f64 / rate;
                let i = obs.partition_point(|(ot, _)| *ot < t);
                match (obs.get(i.wrapping_sub(1)), obs.get(i)) {
                    (_, Some(&(t1, v1))) if (t1 - t).abs() < 1e-12 => Some(v1),
                    (Some(&(t0, v0)), Some(&(t1, v1))) => Some(v0 + (v1 - v0) * (t - t0) / (t1 - t0)),
                    _ => None,
                }
            })
            .collect(),
    }
}

/// Linear interpolation across interior gaps, nearest value at the edges.
/// Returns `None` when nothing was observed.
pub fn fill_gaps(values: &[Option<f64>]) -> Option<Vec<f64>> {
    let known: Vec<usize> = (0..values.len()).filter(|i| values[*i].is_some()).collect();
    let (&first, &last) = (known.first()?, known.last()?);
    let mut out: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
    for i in 0..first {
        out[i] = out[first];
    }
    for i in last + 1..out.len() {
        out[i] = out[last];
    }
    for w in known.windows(2) {
        let (a, b) = (w[0], w[1]);
        for i in a + 1..b {
            out[i] = out[a] + (out[b] - out[a]) * (i - a) as f64 / (b - a) as f64;
        }
    }
    Some(out)
}

/// Min-max parameters; a constant series maps to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Option<Self> {
        values.into_iter().fold(None, |acc, v| match acc {
            None => Some(MinMax { min: *v, max: *v }),
            Some(m) => Some(MinMax { min: m.min.min(*v), max: m.max.max(*v) }),
        })
    }

    pub fn apply(&self, v: f64) -> f64 {
        let range = self.max - self.min;
        if range > 0.0 {
            (v - self.min) / range
        } else {
            0.0
        }
    }
}

struct Regularized {
    start: f64,
    duration: f64,
    /// Finest sampling interval in the recording.
    step: f64,
    series: Vec<Option<Vec<f64>>>,
    /// Sum and count of the raw observations per signal.
    observed: Vec<(f64, usize)>,
    labels: Vec<(f64, f64)>,
}

fn regularize(spec: &IngestSpec, rec: Recording) -> Result<Regularized> {
    let (start, end) = rec.span().ok_or_else(|| Error::invalid("recording has no rows"))?;
    let fastest = spec.signals.iter().map(|s| s.target_rate).fold(0.0, f64::max);
    let step = spec.signals.iter().filter_map(|s| s.source_rate).fold(fastest, f64::max);
    let duration = end - start + 1.0 / step;
    let series = spec
        .signals
        .iter()
        .zip(&rec.observations)
        .map(|(s, obs)| {
            let len = (duration * s.target_rate).round().max(1.0) as usize;
            fill_gaps(&resample(obs, start, s.target_rate, len, s.method))
        })
        .collect();
    let observed = rec.observations.iter().map(|o| (o.iter().map(|(_, v)| v).sum(), o.len())).collect();
    Ok(Regularized { start, duration, step: 1.0 / step, series, observed, labels: rec.labels })
}

fn window_label(task: Task, labels: &[(f64, f64)], from: f64, to: f64) -> Option<f64> {
    let inside: Vec<f64> = labels.iter().filter(|(t, _)| *t >= from && *t < to).map(|(_, v)| *v).collect();
    if inside.is_empty() {
        return None;
    }
    Some(match task {
        Task::Regression => inside.iter().sum::<f64>() / inside.len() as f64,
        Task::Classification { .. } => {
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for v in &inside {
                *counts.entry(v.round() as i64).or_default() += 1;
            }
            let best = counts.values().copied().max().unwrap_or(0);
            counts.into_iter().find(|(_, c)| *c == best).map(|(k, _)| k as f64).unwrap_or(0.0)
        }
    })
}

/// Runs the full recipe on already-parsed recordings, one per subject.
pub fn ingest_recordings(spec: &IngestSpec, train: Vec<Recording>, val: Vec<Recording>, test: Vec<Recording>) -> Result<Dataset> {
    spec.validate()?;
    let reg = |rs: Vec<Recording>| rs.into_iter().map(|r| regularize(spec, r)).collect::<Result<Vec<_>>>();
    let (train, val, test) = (reg(train)?, reg(val)?, reg(test)?);
    let m = spec.signals.len();

    // training-set statistics only
    let mut means = vec![0.0; m];
    for (k, mean) in means.iter_mut().enumerate() {
        let (sum, count) = train.iter().fold((0.0, 0), |(s, n), r| (s + r.observed[k].0, n + r.observed[k].1));
        if count == 0 {
            return Err(Error::invalid(format!(
                "signal {} is never observed in the training split",
                spec.signals[k].name
            )));
        }
        *mean = sum / count as f64;
    }
    let filled = |rs: Vec<Regularized>| -> Vec<(Regularized, Vec<Vec<f64>>)> {
        rs.into_iter()
            .map(|r| {
                let series = r
                    .series
                    .iter()
                    .enumerate()
                    .map(|(k, s)| {
                        s.clone().unwrap_or_else(|| {
                            vec![means[k]; (r.duration * spec.signals[k].target_rate).round().max(1.0) as usize]
                        })
                    })
                    .collect();
                (r, series)
            })
            .collect()
    };
    let (train, val, test) = (filled(train), filled(val), filled(test));
    let scalers: Vec<Option<MinMax>> = (0..m)
        .map(|k| spec.min_max_scale.then(|| MinMax::fit(train.iter().flat_map(|(_, s)| &s[k]))).flatten())
        .collect();

    let window = spec.window;
    let stride = spec.stride.unwrap_or(window);
    let specs = spec.signal_specs();
    let windows = |rs: Vec<(Regularized, Vec<Vec<f64>>)>| -> Vec<Sample> {
        let mut out = Vec::new();
        for (r, series) in rs {
            let mut w0 = 0.0;
            // time stamps are often printed rounded, so allow half a sample of slack
            while w0 + window <= r.duration + 0.5 * r.step {
                let cut: Option<Vec<Vec<f64>>> = series
                    .iter()
                    .zip(&specs)
                    .zip(&scalers)
                    .map(|((s, sp), sc)| {
                        let from = (w0 * sp.rate).round() as usize;
                        let part = s.get(from..from + sp.len)?;
                        Some(part.iter().map(|v| sc.map_or(*v, |m| m.apply(*v))).collect())
                    })
                    .collect();
                let label = window_label(spec.task, &r.labels, r.start + w0, r.start + w0 + window);
                if let (Some(series), Some(label)) = (cut, label) {
                    out.push(Sample { series, label });
                }
                w0 += stride;
            }
        }
        out
    };
    let ds = Dataset { signals: specs.clone(), task: spec.task, train: windows(train), val: windows(val), test: windows(test) };
    if ds.train.is_empty() {
        return Err(Error::invalid("ingestion produced an empty training split"));
    }
    ds.validate()?;
    Ok(ds)
}

/// Reads the files named in `spec` (relative to `base_dir`) and ingests them.
pub fn ingest_csv(spec: &IngestSpec, base_dir: &Path) -> Result<Dataset> {
    spec.validate()?;
    let load = |files: &[PathBuf]| -> Result<Vec<Recording>> {
        files
            .iter()
            .map(|f| {
                let path = base_dir.join(f);
                let file = std::fs::File::open(&path)
                    .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))?;
                parse_recording(spec, file).map_err(|e| match e {
                    Error::Parse { row, msg } => Error::Parse { row, msg: format!("{}: {msg}", path.display()) },
                    other => other,
                })
            })
            .collect()
    };
    ingest_recordings(spec, load(&spec.files.train)?, load(&spec.files.val)?, load(&spec.files.test)?)
}
