//! Detection and localization metrics, attention correlation and sensing
//! region maps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::scenario::{PairId, Point3};
use crate::tensornet::schedule::csv_err;

/// Two-sided exact binomial interval at 95% confidence.
pub fn clopper_pearson(successes: usize, trials: usize) -> Option<(f64, f64)> {
    if trials == 0 || successes > trials {
        return None;
    }
    let alpha = 0.05;
    let (x, n) = (successes as f64, trials as f64);
    let lower = if successes == 0 {
        0.0
    } else {
        beta_quantile(x, n - x + 1.0, alpha / 2.0)
    };
    let upper = if successes == trials {
        1.0
    } else {
        beta_quantile(x + 1.0, n - x, 1.0 - alpha / 2.0)
    };
    Some((lower, upper))
}

/// Beta(a, b) quantile by bisection on the regularized incomplete beta.
/// statrs' own inverse stops near 1e-5.
fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `FN / (FN + TP)`; absent without positive samples.
    pub mdp: Option<f64>,
    /// `FP / (FP + TN)`; absent without negative samples.
    pub fap: Option<f64>,
    pub mdp_ci95: Option<(f64, f64)>,
    pub fap_ci95: Option<(f64, f64)>,
}

impl DetectionMetrics {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn detection_metrics(predictions: &[u8], labels: &[u8]) -> Result<DetectionMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("detection metrics", &[labels.len()], &[predictions.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Empty("detection labels"));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(DetectionMetrics {
        tp,
        tn,
        fp,
        fn_,
        mdp: ratio(fn_, fn_ + tp),
        fap: ratio(fp, fp + tn),
        mdp_ci95: clopper_pearson(fn_, fn_ + tp),
        fap_ci95: clopper_pearson(fp, fp + tn),
    })
}

/// Euclidean positioning error in meters.
pub fn ape(estimate: &Point3, truth: &Point3) -> f64 {
    estimate.distance(truth)
}

/// Percentile `q` in `[0, 1]` of sorted data, linear interpolation between
/// order statistics at rank `q (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApeStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    #[serde(skip)]
    sorted: Vec<f64>,
}

impl ApeStats {
    pub fn percentile(&self, q: f64) -> f64 {
        percentile_sorted(&self.sorted, q)
    }

    /// Empirical CDF: fraction of errors `<= x` at each grid point.
    pub fn cdf(&self, grid: &[f64]) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        grid.iter()
            .map(|&x| (x, self.sorted.partition_point(|&v| v <= x) as f64 / n))
            .collect()
    }

    /// Evenly spaced grid from 0 to the largest error, inclusive.
    pub fn default_grid(&self, step: f64) -> Vec<f64> {
        let n = (self.max / step).ceil() as usize;
        (0..=n).map(|i| i as f64 * step).collect()
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }
}

pub fn ape_stats(apes: &[f64]) -> Result<ApeStats> {
    if apes.is_empty() {
        return Err(Error::Empty("APE list"));
    }
    if let Some(bad) = apes.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!("APE value {bad}")));
    }
    let mut sorted = apes.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ApeStats {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median: percentile_sorted(&sorted, 0.5),
        p95: percentile_sorted(&sorted, 0.95),
        max: sorted[sorted.len() - 1],
        sorted,
    })
}

pub fn write_cdf_csv(path: &Path, table: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["ape_m", "cdf"]).map_err(|e| csv_err(path, e))?;
    for (x, f) in table {
        w.write_record([x.to_string(), f.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson inputs", &[x.len()], &[y.len()]));
    }
    if x.is_empty() {
        return Err(Error::Empty("pearson inputs"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("zero-variance input to correlation".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between attention weights and true pair labels, pooled over
/// every (sample, pair) entry.
pub fn attention_label_correlation(weights: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64> {
    if weights.len() != labels.len() {
        return Err(Error::shape("attention correlation", &[labels.len()], &[weights.len()]));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (w, l) in weights.iter().zip(labels) {
        if w.len() != l.len() {
            return Err(Error::shape("attention correlation sample", &[l.len()], &[w.len()]));
        }
        xs.extend_from_slice(w);
        ys.extend(l.iter().map(|&b| f64::from(u8::from(b))));
    }
    pearson(&xs, &ys)
}

/// How several pairs combine into one region map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionMode {
    /// Counted when any listed pair is affected.
    Union,
    /// Counted when every listed pair is affected.
    Intersection,
}

/// Counts of affected UAV positions on a square x-y grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    /// Half-width of the covered square `[-range, range]^2`.
    pub range: f64,
    pub resolution: f64,
    pub cells_per_side: usize,
    /// Row-major, north-up: row 0 holds the largest y.
    pub counts: Vec<u64>,
}

impl RegionMap {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn at(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.cells_per_side + col]
    }

    /// `(row, col)` of the cell holding `(x, y)`; the upper edges belong to
    /// the last cells.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x.abs() <= self.range && y.abs() <= self.range) {
            return None;
        }
        let n = self.cells_per_side;
        let col = (((x + self.range) / self.resolution).floor() as usize).min(n - 1);
        let from_bottom = (((y + self.range) / self.resolution).floor() as usize).min(n - 1);
        Some((n - 1 - from_bottom, col))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in self.counts.chunks(self.cells_per_side) {
            w.write_record(row.iter().map(|c| c.to_string())).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// 8-bit PGM scaled so the fullest cell is white.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let n = self.cells_per_side;
        let peak = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let mut bytes = format!("P5\n{n} {n}\n255\n").into_bytes();
        bytes.extend(self.counts.iter().map(|&c| (c as f64 / peak * 255.0).round() as u8));
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Writes `<stem>.csv` and `<stem>.pgm` into `dir`.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        let pgm = dir.join(format!("{stem}.pgm"));
        self.write_csv(&csv)?;
        self.write_pgm(&pgm)?;
        Ok(vec![csv, pgm])
    }
}

/// Sensing-region map of `pairs` over samples given as UAV position (if
/// any) plus pair labels by flat slot.
pub fn sensing_region_map<'a>(
    samples: impl IntoIterator<Item = (Option<&'a Point3>, &'a [bool])>,
    pairs: &[PairId],
    mode: RegionMode,
    range: f64,
    resolution: f64,
) -> Result<RegionMap> {
    if pairs.is_empty() {
        return Err(Error::Empty("region-map pairs"));
    }
    if !(resolution > 0.0 && range > 0.0 && resolution.is_finite() && range.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "range {range} and resolution {resolution} must be positive"
        )));
    }
    let n = ((2.0 * range / resolution).ceil() as usize).max(1);
    let mut map = RegionMap {
        range,
        resolution,
        cells_per_side: n,
        counts: vec![0; n * n],
    };
    let mut seen = 0usize;
    for (pos, labels) in samples {
        seen += 1;
        let hit = |p: &PairId| -> Result<bool> {
            labels
                .get(p.slot())
                .copied()
                .ok_or_else(|| Error::OutOfRange(format!("pair {p} with {} labels", labels.len())))
        };
        let flags = pairs.iter().map(hit).collect::<Result<Vec<_>>>()?;
        let affected = match mode {
            RegionMode::Union => flags.iter().any(|&b| b),
            RegionMode::Intersection => flags.iter().all(|&b| b),
        };
        if !affected {
            continue;
        }
        let Some(p) = pos else { continue };
        let (r, c) = map.cell_of(p.x(), p.y()).ok_or_else(|| {
            Error::OutOfRange(format!("UAV at ({}, {}) outside +-{range} m", p.x(), p.y()))
        })?;
        map.counts[r * n + c] += 1;
    }
    if seen == 0 {
        return Err(Error::Empty("region-map dataset"));
    }
    Ok(map)
}
