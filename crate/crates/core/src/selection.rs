//! Attention-guided pair selection for localization.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::AttentionReport;
use crate::error::{Error, Result};
use crate::scenario::PairId;
use crate::tensornet::schedule::csv_err;

/// The threshold grid swept by the reliability report.
pub const SIGMA_GRID: [f64; 6] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    pub sigma_att: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { k: 10, sigma_att: 0.1 }
    }
}

impl SelectionConfig {
    pub fn new(k: usize, sigma_att: f64) -> Result<Self> {
        let cfg = SelectionConfig { k, sigma_att };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Invariant { field: "k", message: "must be >= 1".into() });
        }
        if !(0.0..1.0).contains(&self.sigma_att) {
            return Err(Error::Invariant {
                field: "sigma_att",
                message: format!("{} outside [0, 1)", self.sigma_att),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPairs {
    /// Descending attention weight.
    pub pairs: Vec<PairId>,
    /// True when no pair passed both rules and the top-1 pair was taken.
    pub fallback: bool,
}

impl SelectedPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Keeps pairs ranked in the top `k` whose weight is at least `sigma_att`.
/// Ties rank the smaller flat index first. Falls back to the top-1 pair
/// when nothing passes.
pub fn select_pairs(report: &AttentionReport, cfg: &SelectionConfig) -> Result<SelectedPairs> {
    cfg.validate()?;
    if report.is_empty() {
        return Err(Error::Empty("attention report"));
    }
    if report.weights.len() != report.pairs.len() {
        return Err(Error::shape(
            "attention report weights",
            &[report.pairs.len()],
            &[report.weights.len()],
        ));
    }
    let mut order: Vec<usize> = (0..report.len()).collect();
    order.sort_by(|&a, &b| {
        report.weights[b]
            .total_cmp(&report.weights[a])
            .then(report.pairs[a].flat.cmp(&report.pairs[b].flat))
    });
    let pairs: Vec<PairId> = order
        .iter()
        .take(cfg.k)
        .filter(|&&i| report.weights[i] >= cfg.sigma_att)
        .map(|&i| report.pairs[i])
        .collect();
    if pairs.is_empty() {
        return Ok(SelectedPairs { pairs: vec![report.pairs[order[0]]], fallback: true });
    }
    Ok(SelectedPairs { pairs, fallback: false })
}

/// Pairs whose true label is set, in flat order.
pub fn label_selection(pairs: &[PairId], labels: &[bool]) -> Vec<PairId> {
    pairs.iter().copied().filter(|p| labels.get(p.slot()).copied().unwrap_or(false)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilityCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub l_min: Option<usize>,
    pub l_max: Option<usize>,
}

/// Confusion tally of selections against true pair labels, aggregated over
/// samples. `labels[i]` is indexed by flat slot.
pub fn selection_reliability(selections: &[SelectedPairs], labels: &[Vec<bool>]) -> Result<ReliabilityCounts> {
    if selections.len() != labels.len() {
        return Err(Error::shape("selection reliability", &[selections.len()], &[labels.len()]));
    }
    let mut c = ReliabilityCounts::default();
    for (sel, lab) in selections.iter().zip(labels) {
        let chosen: HashSet<usize> = sel.pairs.iter().map(|p| p.slot()).collect();
        if let Some(&bad) = chosen.iter().find(|&&s| s >= lab.len()) {
            return Err(Error::OutOfRange(format!("pair slot {bad} with {} labels", lab.len())));
        }
        for (slot, &y) in lab.iter().enumerate() {
            match (chosen.contains(&slot), y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        let l = sel.len();
        c.l_min = Some(c.l_min.map_or(l, |m| m.min(l)));
        c.l_max = Some(c.l_max.map_or(l, |m| m.max(l)));
    }
    Ok(c)
}

/// One row of the reliability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub sigma_att: f64,
    pub k: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub l_min: Option<usize>,
    pub l_max: Option<usize>,
}

/// Reliability for each threshold in `sigmas` at fixed `k`.
pub fn reliability_sweep(
    reports: &[AttentionReport],
    labels: &[Vec<bool>],
    k: usize,
    sigmas: &[f64],
) -> Result<Vec<ReliabilityRow>> {
    sigmas
        .iter()
        .map(|&sigma_att| {
            let cfg = SelectionConfig::new(k, sigma_att)?;
            let sel = reports.iter().map(|r| select_pairs(r, &cfg)).collect::<Result<Vec<_>>>()?;
            let c = selection_reliability(&sel, labels)?;
            Ok(ReliabilityRow { sigma_att, k, tp: c.tp, fp: c.fp, fn_: c.fn_, l_min: c.l_min, l_max: c.l_max })
        })
        .collect()
}

pub fn write_reliability_csv(path: &Path, rows: &[ReliabilityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
