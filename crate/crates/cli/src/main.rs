use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use multiwave::components::ComponentKind;
use multiwave::data::Sample;
use multiwave::gradcheck;
use multiwave::grouping::{feasible_l_max, plan_grouping, SignalSpec};
use multiwave::masking::{write_mask_csv, MaskReport};
use multiwave::training::{
    evaluate, experiment_model, ingested_dataset, run_experiment, train, Arm, Checkpoint, ExperimentSpec, Metric,
};
use multiwave::wavelet::{decompose, max_level, BandKind, Decomposition, Signal, WaveletFilters};
use multiwave::Error;

#[derive(Parser)]
#[command(name = "multiwave", version, about = "Wavelet band models for multirate time series")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose the signals of a CSV file and print the band table.
    Decompose(DecomposeArgs),
    /// Run a synthetic experiment.
    Synth(SynthArgs),
    /// Train every arm and seed on an ingested dataset.
    Train(RunFlags),
    /// Score a checkpoint on one split of an ingested dataset.
    Eval(EvalArgs),
    /// Write the mask trail of a training run.
    MaskReport(MaskReportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Args)]
struct DecomposeArgs {
    /// CSV with one column per signal; shorter signals leave trailing cells empty.
    input: PathBuf,
    /// Sampling rate per column, or one rate for all.
    #[arg(long, value_delimiter = ',', required = true)]
    rates: Vec<f64>,
    #[arg(long, default_value = "haar")]
    wavelet: String,
    /// Levels per signal, or L_max with --plan.
    #[arg(long)]
    levels: Option<usize>,
    /// Print the component grouping of the signals.
    #[arg(long)]
    plan: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// Experiment file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// `123..127`, `123..=127` or a comma list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Train the MultiWave arm without masks.
    #[arg(long)]
    no_masks: bool,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    add_baseline: Option<bool>,
    #[arg(long)]
    component: Option<String>,
    #[arg(long)]
    wavelet: Option<String>,
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// synthetic-1 (or 1), synthetic-2 (or 2), nonpow2.
    #[arg(long)]
    exp: Option<String>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment file with the [ingest] section describing the data.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskReportArgs {
    /// Run directory written by `train`.
    run: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit status 1 is for bad input, 2 for failures while running.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Level { .. }
            | Error::Grouping { .. }
            | Error::Invalid(_)
            | Error::Parse { .. }
            | Error::UnknownExperiment { .. }
            | Error::Toml(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Decompose(a) => cmd_decompose(&a),
        Command::Synth(a) => cmd_synth(&a, cli.verbose),
        Command::Train(a) => cmd_train(&a, cli.verbose),
        Command::Eval(a) => cmd_eval(&a),
        Command::MaskReport(a) => cmd_mask_report(&a),
        Command::Gradcheck => cmd_gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

// ------------------------------------------------------------- decompose

fn read_columns(path: &Path) -> CliResult<Vec<(String, Vec<f64>)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut cols: Vec<(String, Vec<f64>)> = names.into_iter().map(|n| (n, Vec::new())).collect();
    let mut ended = vec![false; cols.len()];
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| usage(format!("row {row}: {e}")))?;
        for (c, cell) in rec.iter().enumerate().take(cols.len()) {
            let cell = cell.trim();
            if cell.is_empty() {
                ended[c] = true;
                continue;
            }
            if ended[c] {
                return Err(usage(format!("row {row}: column `{}` has a value after an empty cell", cols[c].0)));
            }
            let v: f64 = cell.parse().map_err(|_| usage(format!("row {row}: `{cell}` is not a number")))?;
            cols[c].1.push(v);
        }
    }
    if cols.is_empty() {
        return Err(usage(format!("{}: no signal columns", path.display())));
    }
    Ok(cols)
}

fn band_table(decs: &[Decomposition]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:<4} {:<22} {:>8} {:>14}", "signal", "band", "range", "samples", "energy");
    for d in decs {
        for sub in &d.subsignals {
            let tag = match sub.kind {
                BandKind::Detail => format!("D{}", sub.level),
                BandKind::Approx => format!("A{}", sub.level),
            };
            let _ = writeln!(
                s,
                "{:<12} {:<4} {:<22} {:>8} {:>14.6}",
                d.name,
                tag,
                sub.band.to_string(),
                sub.values.len(),
                sub.energy()
            );
        }
    }
    s
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn cmd_decompose(a: &DecomposeArgs) -> CliResult {
    let cols = read_columns(&a.input)?;
    let rates: Vec<f64> = match a.rates.len() {
        1 => vec![a.rates[0]; cols.len()],
        n if n == cols.len() => a.rates.clone(),
        n => return Err(usage(format!("{n} rates given for {} signals", cols.len()))),
    };
    let filters = WaveletFilters::by_name(&a.wavelet)?;
    let signals: Vec<Signal> = cols
        .into_iter()
        .zip(&rates)
        .map(|((name, values), rate)| Signal::new(name, values, *rate))
        .collect::<Result<_, _>>()?;

    let mut plan = None;
    let levels: Vec<usize> = if a.plan {
        let specs: Vec<SignalSpec> = signals.iter().map(|s| SignalSpec::new(&s.name, s.rate, s.len())).collect();
        let l_max = match a.levels {
            Some(l) => l,
            None => feasible_l_max(&specs)?.0,
        };
        let p = plan_grouping(&specs, l_max)?;
        let levels = p.signals.iter().map(|s| s.levels).collect();
        plan = Some(p);
        levels
    } else {
        signals.iter().map(|s| a.levels.unwrap_or_else(|| max_level(s.len()))).collect()
    };
    let decs: Vec<Decomposition> = signals
        .iter()
        .zip(&levels)
        .map(|(s, l)| decompose(s, &filters, *l))
        .collect::<Result<_, _>>()?;

    let table = band_table(&decs);
    print!("{table}");
    if let Some(p) = &plan {
        println!();
        print!("{p}");
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let json = serde_json::json!({ "wavelet": filters.name, "signals": decs });
        write_file(&out.join("decomposition.json"), to_pretty(&json)?)?;
        write_file(&out.join("bands.txt"), &table)?;
        if let Some(p) = &plan {
            write_file(&out.join("plan.json"), to_pretty(p)?)?;
        }
    }
    Ok(())
}

fn to_pretty<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Failure::Runtime(e.to_string()))
}

// ------------------------------------------------------------ experiments

fn parse_seeds(text: &str) -> CliResult<Vec<u64>> {
    let bad = || usage(format!("cannot read seeds `{text}`"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    // ranges include both ends either way
    let seeds: Vec<u64> = if let Some((lo, hi)) = text.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let (lo, hi) = (num(lo)?, num(hi)?);
        if hi < lo {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        text.split(',').map(num).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn load_spec(path: &Path) -> CliResult<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut spec: ExperimentSpec =
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    spec.data_dir = Some(match spec.data_dir.take() {
        Some(d) if d.is_absolute() => d,
        Some(d) => base.join(d),
        None => base.to_path_buf(),
    });
    Ok(spec)
}

fn experiment_name(short: &str) -> String {
    match short {
        "1" => "synthetic-1".into(),
        "2" => "synthetic-2".into(),
        other => other.to_string(),
    }
}

fn apply_flags(spec: &mut ExperimentSpec, f: &RunFlags) -> CliResult {
    if let Some(s) = &f.seeds {
        spec.train.seeds = parse_seeds(s)?;
    }
    if let Some(j) = f.jobs {
        spec.jobs = j.max(1);
    }
    if f.no_masks {
        spec.train.masks_enabled = false;
        for arm in &mut spec.arms {
            if *arm == Arm::Multiwave {
                *arm = Arm::MultiwaveNoMask;
            }
        }
        let mut seen = Vec::new();
        spec.arms.retain(|a| {
            let fresh = !seen.contains(a);
            seen.push(*a);
            fresh
        });
    }
    if let Some(b) = f.add_baseline {
        spec.train.add_baseline = b;
    }
    if let Some(c) = &f.component {
        spec.component.kind = c.parse::<ComponentKind>()?;
    }
    if let Some(w) = &f.wavelet {
        spec.train.wavelet = w.clone();
    }
    if let Some(l) = f.levels {
        spec.train.levels = Some(l);
    }
    spec.validate()?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs, verbose: bool) -> CliResult {
    let mut spec = match &a.run.config {
        Some(p) => load_spec(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(e) = &a.exp {
        spec.name = experiment_name(e);
    }
    if spec.name == "ingest-train" {
        return Err(usage("ingest-train runs through `train`"));
    }
    apply_flags(&mut spec, &a.run)?;
    let started = Instant::now();
    if verbose {
        eprintln!("running {} with {} seeds", spec.name, spec.train.seeds.len());
    }
    let result = run_experiment(&spec)?;
    let out = &a.run.out;
    create_dir(out)?;
    let mut csv_buf = Vec::new();
    result.write_csv(&mut csv_buf)?;
    write_file(&out.join("results.csv"), csv_buf)?;
    write_file(&out.join("summary.json"), to_pretty(&result.summary_json())?)?;
    write_file(&out.join("experiment.toml"), toml::to_string(&spec).map_err(|e| Failure::Runtime(e.to_string()))?)?;
    write_file(&out.join("run.log"), format!("elapsed_seconds {:.3}\n", started.elapsed().as_secs_f64()))?;
    println!("{:<12} {:<17} {:>12} {:>12}", "setting", "arm", "mean", "std");
    for r in &result.runs {
        println!("{:<12} {:<17} {:>12.4} {:>12.4}", r.setting, r.arm.name(), r.mean, r.std);
    }
    Ok(())
}

fn cmd_train(f: &RunFlags, verbose: bool) -> CliResult {
    let path = f.config.as_ref().ok_or_else(|| usage("train needs --config"))?;
    let mut spec = load_spec(path)?;
    spec.name = "ingest-train".into();
    apply_flags(&mut spec, f)?;
    let started = Instant::now();
    let ds = ingested_dataset(&spec)?;
    let mut jobs = Vec::new();
    for arm in &spec.arms {
        for seed in &spec.train.seeds {
            // validated up front so a bad plan fails before any training
            jobs.push((*arm, *seed, experiment_model(&spec, &ds, *arm, *seed)?));
        }
    }
    create_dir(&f.out)?;
    let mut rows = String::from("arm,seed,val_metric,test_metric,epochs,best_epoch\n");
    for (arm, seed, model) in jobs {
        if verbose {
            eprintln!("training {} seed {seed}", arm.name());
        }
        let outcome = train(&model, &ds, &spec.train)?;
        let dir = f.out.join(format!("{}-seed{seed}", arm.name()));
        create_dir(&dir)?;
        write_file(&dir.join("checkpoint.json"), outcome.checkpoint.to_json()?)?;
        write_file(&dir.join("mask_trail.json"), to_pretty(&outcome.mask_trail)?)?;
        let test = outcome.test_metric.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(
            rows,
            "{},{seed},{},{test},{},{}",
            arm.name(),
            outcome.val_metric,
            outcome.epochs,
            outcome.best_epoch
        );
        println!("{:<17} seed {seed}: validation {:.4}, test {test}", arm.name(), outcome.val_metric);
    }
    write_file(&f.out.join("results.csv"), rows)?;
    write_file(&f.out.join("run.log"), format!("elapsed_seconds {:.3}\n", started.elapsed().as_secs_f64()))?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let checkpoint = read_checkpoint(&a.checkpoint)?;
    checkpoint.model()?;
    let spec = load_spec(&a.config)?;
    let ds = ingested_dataset(&spec)?;
    let samples: &[Sample] = match a.split.as_str() {
        "train" => &ds.train,
        "val" => &ds.val,
        "test" => &ds.test,
        other => return Err(usage(format!("unknown split `{other}` (train, val, test)"))),
    };
    if samples.is_empty() {
        return Err(usage(format!("split `{}` is empty", a.split)));
    }
    let metric = spec.train.metric.unwrap_or_else(|| Metric::default_for(checkpoint.spec.task));
    let value = evaluate(&checkpoint, samples, Some(metric))?;
    println!("{metric:?} on {} ({} samples): {value}", a.split, samples.len());
    if let Some(out) = &a.out {
        create_dir(out)?;
        let json = serde_json::json!({ "split": a.split, "metric": metric, "value": value, "samples": samples.len() });
        write_file(&out.join("eval.json"), to_pretty(&json)?)?;
    }
    Ok(())
}

fn cmd_mask_report(a: &MaskReportArgs) -> CliResult {
    let path = a.run.join("mask_trail.json");
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let trail: Vec<MaskReport> = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let last = trail.last().ok_or_else(|| usage("the run has no masks"))?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    create_dir(&out)?;
    let mut buf = Vec::new();
    write_mask_csv(&trail, &mut buf)?;
    write_file(&out.join("masks.csv"), buf)?;
    println!("epoch {}", last.epoch);
    println!("{:<10} {:<12} {:<22} {:>10}", "component", "signal", "band", "weight");
    for e in &last.entries {
        let mark = if e.selected { "" } else { " (off)" };
        println!("{:<10} {:<12} {:<22} {:>10.4}{mark}", e.component, e.signal, e.band.to_string(), e.effective_weight);
    }
    Ok(())
}

fn cmd_gradcheck() -> CliResult {
    let results = gradcheck::run_suite()?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    for r in &results {
        println!("{r}");
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("PASS all {} checks", results.len());
    Ok(())
}
