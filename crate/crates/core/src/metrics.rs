//! Kendall's tau over threshold-filtered positions, average precision over
//! binary highlight labels, and the CSV rows the trainer writes.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::LossComponents;

pub const DEFAULT_DELTAS: [f64; 4] = [0.0, 0.2, 0.4, 0.6];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TauVariant {
    /// `(C - D) / (n (n - 1) / 2)`, no tie correction.
    A,
    /// `(C - D) / sqrt((n0 - n1)(n0 - n2))`.
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    TooFewPositions,
    TiedTargets,
    TiedScores,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauOutcome {
    Value(f64),
    Skipped(SkipReason),
}

impl TauOutcome {
    pub fn value(self) -> Option<f64> {
        match self {
            TauOutcome::Value(v) => Some(v),
            TauOutcome::Skipped(_) => None,
        }
    }
}

/// Pair counts behind a tau value, all over `n` retained positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    pub n: u64,
    /// `n (n - 1) / 2`.
    pub total: u64,
    /// Pairs tied in `y`.
    pub tied_y: u64,
    /// Pairs tied in `s`.
    pub tied_s: u64,
    /// Pairs tied in both.
    pub tied_both: u64,
    /// Concordant minus discordant.
    pub net: i64,
}

impl PairCounts {
    pub fn tau(&self, variant: TauVariant) -> TauOutcome {
        if self.n < 2 {
            return TauOutcome::Skipped(SkipReason::TooFewPositions);
        }
        if self.tied_y == self.total {
            return TauOutcome::Skipped(SkipReason::TiedTargets);
        }
        if self.tied_s == self.total {
            return TauOutcome::Skipped(SkipReason::TiedScores);
        }
        let value = match variant {
            TauVariant::A => self.net as f64 / self.total as f64,
            TauVariant::B => {
                let denom = ((self.total - self.tied_y) as f64 * (self.total - self.tied_s) as f64).sqrt();
                self.net as f64 / denom
            }
        };
        TauOutcome::Value(value.clamp(-1.0, 1.0))
    }
}

fn check_finite(op: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().find(|v| !v.is_finite()) {
        Some(&value) => Err(Error::Domain { op, value }),
        None => Ok(()),
    }
}

fn tied_pairs_in_sorted(xs: &[f64]) -> u64 {
    let mut total = 0;
    let mut run = 1u64;
    for w in xs.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that counts strict inversions.
fn sort_counting_swaps(xs: &mut [f64], scratch: &mut Vec<f64>) -> u64 {
    let n = xs.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut xs[..mid], scratch) + sort_counting_swaps(&mut xs[mid..], scratch);
    scratch.clear();
    let (mut a, mut b) = (0, mid);
    while a < mid && b < n {
        if xs[b] < xs[a] {
            scratch.push(xs[b]);
            swaps += (mid - a) as u64;
            b += 1;
        } else {
            scratch.push(xs[a]);
            a += 1;
        }
    }
    scratch.extend_from_slice(&xs[a..mid]);
    scratch.extend_from_slice(&xs[b..n]);
    xs.copy_from_slice(scratch);
    swaps
}

/// Knight's `O(n log n)` pair counts over the positions whose target exceeds `delta`.
pub fn pair_counts(s: &[f64], y: &[f64], delta: f64) -> Result<PairCounts> {
    if s.len() != y.len() {
        return Err(Error::Invalid(format!("kendall_tau: {} scores vs {} targets", s.len(), y.len())));
    }
    check_finite("kendall_tau", s)?;
    check_finite("kendall_tau", y)?;
    let mut kept: Vec<(f64, f64)> = y.iter().zip(s).filter(|(yy, _)| **yy > delta).map(|(&yy, &ss)| (yy, ss)).collect();
    let n = kept.len() as u64;
    let total = n * n.saturating_sub(1) / 2;
    kept.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));

    let ys: Vec<f64> = kept.iter().map(|p| p.0).collect();
    let tied_y = tied_pairs_in_sorted(&ys);
    let mut tied_both = 0;
    let mut run = 1u64;
    for w in kept.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            tied_both += run * (run - 1) / 2;
            run = 1;
        }
    }
    tied_both += run * (run - 1) / 2;

    let mut ss: Vec<f64> = kept.iter().map(|p| p.1).collect();
    let mut scratch = Vec::with_capacity(ss.len());
    let swaps = sort_counting_swaps(&mut ss, &mut scratch);
    let tied_s = tied_pairs_in_sorted(&ss);
    let net = total as i64 - tied_y as i64 - tied_s as i64 + tied_both as i64 - 2 * swaps as i64;
    Ok(PairCounts {
        n,
        total,
        tied_y,
        tied_s,
        tied_both,
        net,
    })
}

/// Tau-b over positions with `y > delta`.
pub fn kendall_tau(s: &[f64], y: &[f64], delta: f64) -> Result<TauOutcome> {
    kendall_tau_with(s, y, delta, TauVariant::B)
}

pub fn kendall_tau_with(s: &[f64], y: &[f64], delta: f64, variant: TauVariant) -> Result<TauOutcome> {
    Ok(pair_counts(s, y, delta)?.tau(variant))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaTau {
    pub delta: f64,
    /// Equal-weight mean over evaluated windows; `None` if every window was skipped.
    pub mean_tau: Option<f64>,
    pub taus: Vec<Option<f64>>,
    pub n_windows: usize,
    pub n_skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TauReport {
    pub per_delta: Vec<DeltaTau>,
}

impl TauReport {
    pub fn at(&self, delta: f64) -> Option<&DeltaTau> {
        self.per_delta.iter().find(|d| d.delta == delta)
    }
}

/// `windows` holds `(s, y)` per window, already restricted to scored positions.
pub fn tau_report(windows: &[(Vec<f64>, Vec<f64>)], deltas: &[f64], variant: TauVariant) -> Result<TauReport> {
    let per_delta = deltas
        .iter()
        .map(|&delta| {
            let taus = windows
                .iter()
                .map(|(s, y)| Ok(kendall_tau_with(s, y, delta, variant)?.value()))
                .collect::<Result<Vec<_>>>()?;
            let evaluated: Vec<f64> = taus.iter().flatten().copied().collect();
            Ok(DeltaTau {
                delta,
                mean_tau: (!evaluated.is_empty()).then(|| evaluated.iter().sum::<f64>() / evaluated.len() as f64),
                n_windows: windows.len(),
                n_skipped: windows.len() - evaluated.len(),
                taus,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TauReport { per_delta })
}

/// Indices sorted by score descending, ties by index ascending.
pub fn ranking(scores: &[f64]) -> Result<Vec<usize>> {
    check_finite("ranking", scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    Ok(order)
}

/// Average precision; `None` when there is no positive label.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!("mean_ap: {} scores vs {} labels", scores.len(), labels.len())));
    }
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (rank, idx) in ranking(scores)?.into_iter().enumerate() {
        if labels[idx] != 0 {
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| precision_sum / hits as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct APReport {
    pub per_video: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub n_skipped: usize,
}

pub fn mean_ap(videos: &[(Vec<f64>, Vec<u8>)]) -> Result<APReport> {
    let per_video = videos
        .iter()
        .map(|(s, l)| average_precision(s, l))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<f64> = per_video.iter().flatten().copied().collect();
    Ok(APReport {
        mean: (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64),
        n_skipped: per_video.len() - scored.len(),
        per_video,
    })
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub delta: f64,
    pub mean_tau: Option<f64>,
    pub n_windows: usize,
    pub n_skipped: usize,
    pub map: Option<f64>,
    pub loss: LossComponents,
    /// Fractions of eligible pairs in Part1, Part2, Part3.
    pub regions: [f64; 3],
}

pub const CSV_HEADER: &str =
    "epoch,split,delta,mean_tau,n_windows,n_skipped,map,loss_total,loss_point,loss_align,loss_pair,part1_frac,part2_frac,part3_frac";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut line = String::new();
        let _ = write!(
            line,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.delta,
            opt(self.mean_tau),
            self.n_windows,
            self.n_skipped,
            opt(self.map),
            self.loss.total,
            self.loss.point,
            self.loss.align,
            self.loss.pair,
            self.regions[0],
            self.regions[1],
            self.regions[2],
        );
        line
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}
