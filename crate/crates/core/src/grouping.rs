//! Frequency grouping of subsignals into model components.
//!
//! With `f_max` the fastest rate, signal `i` sits
//! `offset_i = floor(log2(f_max / f_i))` levels "behind" the fastest one and
//! is decomposed to `L_i = L_max - offset_i` levels. Component `j` (1-based,
//! `j <= L_max`) receives detail `S_{j - offset_i}(x_i)` of every signal with
//! `j > offset_i`; component `L_max + 1` receives every approximation. Within a
//! component all subsignal rates lie within a factor 2 of each other, and the
//! slower ones are stretched by `f_max / (f_i 2^offset_i)`, always in `[1, 2)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavelet::{max_level, Band, Decomposition};

/// Name, rate and length of one input signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub name: String,
    pub rate: f64,
    pub len: usize,
}

impl SignalSpec {
    pub fn new(name: impl Into<String>, rate: f64, len: usize) -> Self {
        SignalSpec { name: name.into(), rate, len }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub name: String,
    pub rate: f64,
    pub offset: usize,
    pub levels: usize,
    pub oversample_factor: f64,
}

/// One subsignal routed into a component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Index into [`GroupingPlan::signals`].
    pub signal: usize,
    pub name: String,
    /// 1-based `j` of `S_j`.
    pub subsignal: usize,
    pub oversample_factor: f64,
    pub band: Band,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub l_max: usize,
    pub signals: Vec<SignalPlan>,
    /// `components[j - 1]` lists the inputs of component `j`.
    pub components: Vec<Vec<PlanEntry>>,
}

/// Gathered, length-aligned inputs of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentInput {
    /// 1-based component index.
    pub component: usize,
    pub names: Vec<String>,
    /// One series per member, all of equal length.
    pub series: Vec<Vec<f64>>,
    /// Implied rate of the aligned series.
    pub rate: f64,
}

impl ComponentInput {
    pub fn width(&self) -> usize {
        self.series.len()
    }

    pub fn len(&self) -> usize {
        self.series.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn level_offset(f_max: f64, rate: f64) -> usize {
    // tolerance keeps exact powers of two from flooring one level short
    ((f_max / rate).log2() + 1e-9).floor().max(0.0) as usize
}

/// Feasible range of `L_max` for the given signals.
pub fn feasible_l_max(signals: &[SignalSpec]) -> Result<(usize, usize)> {
    let f_max = validate(signals)?;
    let lo = signals.iter().map(|s| level_offset(f_max, s.rate) + 1).max().unwrap();
    let hi = signals
        .iter()
        .map(|s| max_level(s.len) + level_offset(f_max, s.rate))
        .min()
        .unwrap();
    Ok((lo, hi))
}

fn validate(signals: &[SignalSpec]) -> Result<f64> {
    if signals.is_empty() {
        return Err(Error::invalid("grouping needs at least one signal"));
    }
    for s in signals {
        if !(s.rate > 0.0 && s.rate.is_finite()) {
            return Err(Error::invalid(format!("signal `{}` has non-positive rate", s.name)));
        }
        if s.len < 2 {
            return Err(Error::invalid(format!("signal `{}` is shorter than 2 samples", s.name)));
        }
    }
    Ok(signals.iter().map(|s| s.rate).fold(0.0, f64::max))
}

/// Routes every subsignal of every signal to exactly one of `l_max + 1`
/// components.
pub fn plan_grouping(signals: &[SignalSpec], l_max: usize) -> Result<GroupingPlan> {
    let f_max = validate(signals)?;
    let (lo, hi) = feasible_l_max(signals)?;
    if l_max < lo || l_max > hi {
        let reason = if l_max < lo {
            format!("L_max = {l_max} leaves the slowest signal with no level (needs at least {lo})")
        } else {
            format!("L_max = {l_max} exceeds the levels the shortest signals admit")
        };
        return Err(Error::Grouping { reason, max_feasible: hi });
    }

    let plans: Vec<SignalPlan> = signals
        .iter()
        .map(|s| {
            let offset = level_offset(f_max, s.rate);
            SignalPlan {
                name: s.name.clone(),
                rate: s.rate,
                offset,
                levels: l_max - offset,
                oversample_factor: f_max / (s.rate * 2f64.powi(offset as i32)),
            }
        })
        .collect();

    let mut components = vec![Vec::new(); l_max + 1];
    for (i, p) in plans.iter().enumerate() {
        for level in 1..=p.levels {
            components[level + p.offset - 1].push(PlanEntry {
                signal: i,
                name: p.name.clone(),
                subsignal: level,
                oversample_factor: p.oversample_factor,
                band: crate::wavelet::band_label(p.rate, level, false),
            });
        }
        components[l_max].push(PlanEntry {
            signal: i,
            name: p.name.clone(),
            subsignal: p.levels + 1,
            oversample_factor: p.oversample_factor,
            band: crate::wavelet::band_label(p.rate, p.levels, true),
        });
    }
    Ok(GroupingPlan { l_max, signals: plans, components })
}

impl GroupingPlan {
    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.components.iter().map(Vec::len).collect()
    }

    pub fn signal_names(&self) -> Vec<&str> {
        self.signals.iter().map(|s| s.name.as_str()).collect()
    }
}

impl fmt::Display for GroupingPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "component  inputs")?;
        for (j, entries) in self.components.iter().enumerate() {
            let items: Vec<String> = entries
                .iter()
                .map(|e| {
                    let sig = &self.signals[e.signal];
                    let kind = if e.subsignal > sig.levels { "A" } else { "D" };
                    let level = e.subsignal.min(sig.levels);
                    let mut s = format!("{kind}{level}({}) [{}]", e.name, e.band);
                    if e.oversample_factor != 1.0 {
                        s.push_str(&format!(" x{:.4}", e.oversample_factor));
                    }
                    s
                })
                .collect();
            writeln!(f, "{:>9}  {}", j + 1, items.join(", "))?;
        }
        Ok(())
    }
}

/// Linear interpolation of `values` onto `new_len` evenly spaced positions
/// spanning the original index range.
pub fn resample_linear(values: &[f64], new_len: usize) -> Vec<f64> {
    let n = values.len();
    if new_len == n || n == 0 {
        return values.to_vec();
    }
    if new_len == 1 || n == 1 {
        return vec![values[0]; new_len];
    }
    let step = (n - 1) as f64 / (new_len - 1) as f64;
    (0..new_len)
        .map(|m| {
            let pos = m as f64 * step;
            let i = (pos.floor() as usize).min(n - 2);
            let frac = pos - i as f64;
            values[i] * (1.0 - frac) + values[i + 1] * frac
        })
        .collect()
}

/// Stretches `values` by `factor ∈ [1, 2)` to `round(len * factor)` samples.
pub fn oversample(values: &[f64], factor: f64) -> Result<Vec<f64>> {
    if !(1.0..2.0).contains(&factor) {
        return Err(Error::invalid(format!("oversample factor {factor} outside [1, 2)")));
    }
    let new_len = (values.len() as f64 * factor).round() as usize;
    Ok(resample_linear(values, new_len))
}

/// Gathers, oversamples and length-aligns each component's subsignals.
///
/// `decompositions` must follow the plan's signal order. A one-sample length
/// disagreement is resolved by truncating the tail of the longer series.
pub fn assemble_inputs(decompositions: &[Decomposition], plan: &GroupingPlan) -> Result<Vec<ComponentInput>> {
    if decompositions.len() != plan.signals.len() {
        return Err(Error::invalid(format!(
            "plan covers {} signals, got {} decompositions",
            plan.signals.len(),
            decompositions.len()
        )));
    }
    for (d, p) in decompositions.iter().zip(&plan.signals) {
        if d.levels != p.levels {
            return Err(Error::invalid(format!(
                "signal `{}` decomposed to {} levels, plan expects {}",
                p.name, d.levels, p.levels
            )));
        }
    }
    let f_max = plan.signals.iter().map(|s| s.rate).fold(0.0, f64::max);
    plan.components
        .iter()
        .enumerate()
        .map(|(j, entries)| {
            let mut series = Vec::with_capacity(entries.len());
            for e in entries {
                let sub = decompositions[e.signal]
                    .subsignal(e.subsignal)
                    .ok_or_else(|| Error::invalid(format!("missing S_{} of `{}`", e.subsignal, e.name)))?;
                series.push(oversample(&sub.values, e.oversample_factor)?);
            }
            let min = series.iter().map(Vec::len).min().unwrap_or(0);
            let max = series.iter().map(Vec::len).max().unwrap_or(0);
            if max - min > 1 {
                return Err(Error::invalid(format!(
                    "component {}: aligned lengths differ by {} samples",
                    j + 1,
                    max - min
                )));
            }
            series.iter_mut().for_each(|s| s.truncate(min));
            let level = (j + 1).min(plan.l_max) as i32;
            Ok(ComponentInput {
                component: j + 1,
                names: entries.iter().map(|e| e.name.clone()).collect(),
                series,
                rate: f_max / 2f64.powi(level),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::{decompose, Signal, WaveletFilters};
    use proptest::prelude::*;

    fn names(plan: &GroupingPlan, j: usize) -> Vec<(String, usize)> {
        plan.components[j - 1].iter().map(|e| (e.name.clone(), e.subsignal)).collect()
    }

    #[test]
    fn six_to_one_example() {
        let specs = [SignalSpec::new("x1", 16.0, 16), SignalSpec::new("x2", 96.0, 96)];
        let plan = plan_grouping(&specs, 3).unwrap();
        assert_eq!(plan.signals[1].levels, 3);
        assert_eq!(names(&plan, 1), vec![("x2".into(), 1)]);
        assert_eq!(names(&plan, 2), vec![("x2".into(), 2)]);
        let mut i3 = names(&plan, 3);
        i3.sort();
        assert_eq!(i3, vec![("x1".into(), 1), ("x2".into(), 3)]);
        let x1 = plan.components[2].iter().find(|e| e.name == "x1").unwrap();
        assert_eq!(x1.oversample_factor, 1.5);
    }

    #[test]
    fn sixty_four_thirty_example() {
        let specs = [SignalSpec::new("x64", 64.0, 64), SignalSpec::new("x30", 30.0, 30)];
        let plan = plan_grouping(&specs, 2).unwrap();
        assert_eq!(plan.widths(), vec![1, 2, 2]);
        assert_eq!(names(&plan, 1), vec![("x64".into(), 1)]);
        assert_eq!(names(&plan, 2), vec![("x64".into(), 2), ("x30".into(), 1)]);
        assert_eq!(names(&plan, 3), vec![("x64".into(), 3), ("x30".into(), 2)]);
        assert!((plan.signals[1].oversample_factor - 64.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn equal_rates_have_unit_factors() {
        let specs: Vec<_> = (0..3).map(|i| SignalSpec::new(format!("s{i}"), 128.0, 128)).collect();
        let plan = plan_grouping(&specs, 4).unwrap();
        assert_eq!(plan.widths(), vec![3; 5]);
        for (j, comp) in plan.components.iter().enumerate().take(4) {
            assert!(comp.iter().all(|e| e.subsignal == j + 1 && e.oversample_factor == 1.0));
        }
    }

    #[test]
    fn infeasible_l_max_reports_maximum() {
        let specs = [SignalSpec::new("fast", 128.0, 128), SignalSpec::new("slow", 4.0, 4)];
        let err = plan_grouping(&specs, 3).unwrap_err();
        assert!(matches!(err, Error::Grouping { max_feasible: 7, .. }), "{err}");
        assert!(plan_grouping(&specs, 8).is_err());
        assert!(plan_grouping(&specs, 6).is_ok());
    }

    #[test]
    fn oversample_cases() {
        assert_eq!(oversample(&[1.0, 2.0, 3.0], 1.0).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(oversample(&[0.0, 2.0], 1.5).unwrap(), vec![0.0, 1.0, 2.0]);
        let c = oversample(&[4.0; 10], 1.7).unwrap();
        assert_eq!(c.len(), 17);
        assert!(c.iter().all(|v| (v - 4.0).abs() < 1e-12));
        assert!(oversample(&[1.0, 2.0], 2.0).is_err());
        assert!(oversample(&[1.0, 2.0], 0.9).is_err());
    }

    fn decompose_all(signals: &[Signal], plan: &GroupingPlan) -> Vec<Decomposition> {
        let h = WaveletFilters::haar();
        signals
            .iter()
            .zip(&plan.signals)
            .map(|(s, p)| decompose(s, &h, p.levels).unwrap())
            .collect()
    }

    #[test]
    fn assemble_equal_rate() {
        let signals: Vec<Signal> = (0..2)
            .map(|i| Signal::new(format!("s{i}"), (0..32).map(|t| (t * (i + 1)) as f64).collect(), 32.0).unwrap())
            .collect();
        let specs: Vec<_> = signals.iter().map(|s| SignalSpec::new(&s.name, s.rate, s.len())).collect();
        let plan = plan_grouping(&specs, 2).unwrap();
        let inputs = assemble_inputs(&decompose_all(&signals, &plan), &plan).unwrap();
        assert_eq!(inputs.iter().map(|c| c.width()).collect::<Vec<_>>(), vec![2, 2, 2]);
        assert_eq!(inputs.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![16, 8, 8]);
    }

    #[test]
    fn assemble_multirate() {
        let signals = vec![
            Signal::new("x64", (0..64).map(|t| (t as f64).sin()).collect(), 64.0).unwrap(),
            Signal::new("x30", (0..30).map(|t| (t as f64).cos()).collect(), 30.0).unwrap(),
        ];
        let specs: Vec<_> = signals.iter().map(|s| SignalSpec::new(&s.name, s.rate, s.len())).collect();
        let plan = plan_grouping(&specs, 2).unwrap();
        let inputs = assemble_inputs(&decompose_all(&signals, &plan), &plan).unwrap();
        assert_eq!(inputs.iter().map(|c| c.width()).collect::<Vec<_>>(), vec![1, 2, 2]);
        for c in &inputs {
            assert!(c.series.iter().all(|s| s.len() == c.len()));
        }
    }

    #[test]
    fn single_signal_plan() {
        let specs = [SignalSpec::new("only", 8.0, 64)];
        let plan = plan_grouping(&specs, 3).unwrap();
        assert_eq!(plan.widths(), vec![1; 4]);
    }

    #[test]
    fn assemble_rejects_wrong_levels() {
        let s = Signal::new("x", vec![1.0; 16], 16.0).unwrap();
        let plan = plan_grouping(&[SignalSpec::new("x", 16.0, 16)], 2).unwrap();
        let dec = decompose(&s, &WaveletFilters::haar(), 3).unwrap();
        assert!(assemble_inputs(&[dec], &plan).is_err());
    }

    proptest! {
        #[test]
        fn factors_bounded_and_coverage_exact(
            rates in proptest::collection::vec(0.5..500.0f64, 1..5),
        ) {
            let f_max = rates.iter().cloned().fold(0.0, f64::max);
            let specs: Vec<_> = rates
                .iter()
                .enumerate()
                .map(|(i, r)| SignalSpec::new(format!("s{i}"), *r, ((r / f_max) * 4096.0).max(4.0) as usize))
                .collect();
            let (lo, hi) = feasible_l_max(&specs).unwrap();
            prop_assume!(lo <= hi);
            let plan = plan_grouping(&specs, lo).unwrap();
            prop_assert_eq!(plan.component_count(), lo + 1);
            for p in &plan.signals {
                prop_assert!(p.oversample_factor >= 1.0 && p.oversample_factor < 2.0);
            }
            for (i, p) in plan.signals.iter().enumerate() {
                let mut seen: Vec<usize> = plan
                    .components
                    .iter()
                    .flatten()
                    .filter(|e| e.signal == i)
                    .map(|e| e.subsignal)
                    .collect();
                seen.sort();
                prop_assert_eq!(seen, (1..=p.levels + 1).collect::<Vec<_>>());
            }
            for comp in &plan.components {
                let sub_rates: Vec<f64> = comp
                    .iter()
                    .map(|e| {
                        let p = &plan.signals[e.signal];
                        p.rate / 2f64.powi(e.subsignal.min(p.levels) as i32)
                    })
                    .collect();
                let hi_r = sub_rates.iter().cloned().fold(0.0, f64::max);
                let lo_r = sub_rates.iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assert!(hi_r / lo_r < 2.0);
            }
            prop_assert_eq!(plan_grouping(&specs, lo).unwrap(), plan);
        }

        #[test]
        fn power_of_two_rates_need_no_oversampling(base in 1.0..50.0f64, shifts in proptest::collection::vec(0u32..5, 1..5)) {
            let specs: Vec<_> = shifts
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let rate = base * f64::from(1u32 << k);
                    SignalSpec::new(format!("s{i}"), rate, 64 << k)
                })
                .collect();
            let (lo, _) = feasible_l_max(&specs).unwrap();
            let plan = plan_grouping(&specs, lo).unwrap();
            prop_assert!(plan.signals.iter().all(|p| p.oversample_factor == 1.0));
        }
    }
}
