//! Learnable scalar gates on subsignals.
//!
//! Every (component, signal) pair owns one raw weight `W`. The subsignal is
//! multiplied by `ReLU(W)` before entering its component, and the loss gets
//! `alpha * Σ ReLU(W)`. A weight that reaches zero shuts its subsignal off and
//! receives no further gradient, so the selection is exact rather than
//! thresholded.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use crate::wavelet::Band;

/// Raw mask weights of one component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    /// Component label: `"1"`, `"2"`, ... or `"baseline"`.
    pub component: String,
    pub signals: Vec<String>,
    pub bands: Vec<Band>,
    pub raw: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskBank {
    pub rows: Vec<MaskRow>,
}

impl MaskBank {
    pub fn row(&self, component: &str) -> Option<&MaskRow> {
        self.rows.iter().find(|r| r.component == component)
    }

    pub fn weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flat_map(|r| r.raw.iter().copied())
    }

    /// `alpha * Σ max(0, W)`.
    pub fn l1_penalty(&self, alpha: f64) -> f64 {
        alpha * self.weights().map(|w| w.max(0.0)).sum::<f64>()
    }

    /// Scales each series of `row` by the ReLU of its weight.
    pub fn apply(&self, component: &str, series: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let row = self
            .row(component)
            .ok_or_else(|| Error::invalid(format!("no mask row for component {component}")))?;
        if row.raw.len() != series.len() {
            return Err(Error::invalid(format!(
                "component {component}: {} mask weights for {} subsignals",
                row.raw.len(),
                series.len()
            )));
        }
        Ok(series
            .iter()
            .zip(&row.raw)
            .map(|(s, w)| s.iter().map(|v| v * w.max(0.0)).collect())
            .collect())
    }
}

/// Gates `input [B,T,C]` channel-wise by `ReLU(mask)`, `mask [C]`.
pub fn apply_masks(g: &mut Graph, input: Var, mask: Var) -> Result<Var> {
    let width = g.value(input).last_dim();
    let weights = g.value(mask).len();
    if weights != width {
        return Err(Error::invalid(format!(
            "apply_masks: {weights} mask weights for {width} subsignals"
        )));
    }
    let gate = g.relu(mask)?;
    g.mul_trailing(input, gate)
}

/// `alpha * Σ ReLU(W)` over all mask rows, as a graph node.
pub fn l1_penalty_node(g: &mut Graph, masks: &[Var], alpha: f64) -> Result<Option<Var>> {
    if alpha < 0.0 {
        return Err(Error::invalid(format!("mask norm weight must be >= 0, got {alpha}")));
    }
    let mut total: Option<Var> = None;
    for m in masks {
        let r = g.relu(*m)?;
        let s = g.sum(r);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.map(|t| g.scale(t, alpha)).transpose()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReportEntry {
    pub component: String,
    pub signal: String,
    pub band: Band,
    pub effective_weight: f64,
    pub selected: bool,
}

/// Effective mask weights at the end of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub epoch: usize,
    pub entries: Vec<MaskReportEntry>,
}

impl MaskReport {
    pub fn selected(&self) -> impl Iterator<Item = &MaskReportEntry> {
        self.entries.iter().filter(|e| e.selected)
    }

    /// Same weights and selection as `other`, ignoring the epoch number.
    pub fn same_state(&self, other: &MaskReport) -> bool {
        self.entries == other.entries
    }
}

/// Snapshot of `bank`, ordered by component (band order) then signal name.
pub fn mask_report(bank: &MaskBank, epoch: usize) -> MaskReport {
    let mut entries = Vec::new();
    for row in &bank.rows {
        let mut items: Vec<_> = row
            .signals
            .iter()
            .zip(&row.bands)
            .zip(&row.raw)
            .map(|((s, b), w)| MaskReportEntry {
                component: row.component.clone(),
                signal: s.clone(),
                band: *b,
                effective_weight: w.max(0.0),
                selected: *w > 0.0,
            })
            .collect();
        items.sort_by(|a, b| a.signal.cmp(&b.signal));
        entries.extend(items);
    }
    MaskReport { epoch, entries }
}

/// Writes `epoch,signal,band_low_hz,band_high_hz,effective_weight` rows.
pub fn write_mask_csv<W: Write>(reports: &[MaskReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "signal", "band_low_hz", "band_high_hz", "effective_weight"])?;
    for r in reports {
        for e in &r.entries {
            w.write_record([
                r.epoch.to_string(),
                e.signal.clone(),
                e.band.low_hz.to_string(),
                e.band.high_hz.to_string(),
                e.effective_weight.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
