//! Pointwise LogLoss, the border-aware pairwise ranking losses and the
//! weighted training objective.
//!
//! A pair `(i, j)` is eligible when `y_i > y_j + pair_epsilon` and both
//! positions are unmasked. With `delta = s_i - s_j` and `gap = y_i - y_j`,
//! its region is
//!
//! | region | condition              |
//! |--------|------------------------|
//! | Part1  | `delta <= 0`           |
//! | Part2  | `0 < delta < gap`      |
//! | Part3  | `delta >= gap`         |
//!
//! Each variant keeps a subset: `L0` everything, `L1` every pair with
//! `gap - delta >= 0` (so the `delta == gap` boundary stays in), `L2` Part1
//! only and `L3` Part2 only. Membership uses detached predictions.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairVariant {
    L0,
    L1,
    L2,
    L3,
}

impl std::str::FromStr for PairVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "l0" => Ok(PairVariant::L0),
            "l1" => Ok(PairVariant::L1),
            "l2" => Ok(PairVariant::L2),
            "l3" => Ok(PairVariant::L3),
            _ => Err(format!("unknown pair variant {s:?} (expected l0..l3)")),
        }
    }
}

impl std::fmt::Display for PairVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PairVariant::L0 => "l0",
            PairVariant::L1 => "l1",
            PairVariant::L2 => "l2",
            PairVariant::L3 => "l3",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairReduction {
    Mean,
    Sum,
}

impl std::str::FromStr for PairReduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(PairReduction::Mean),
            "sum" => Ok(PairReduction::Sum),
            _ => Err(format!("unknown pair reduction {s:?} (expected mean or sum)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Part1,
    Part2,
    Part3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub sigma: f64,
    pub lambda_point: f64,
    pub lambda_align: f64,
    pub lambda_pair: f64,
    pub pair_variant: PairVariant,
    pub pair_epsilon: f64,
    pub pair_reduction: PairReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            lambda_point: 0.65,
            lambda_align: 0.15,
            lambda_pair: 0.20,
            pair_variant: PairVariant::L1,
            pair_epsilon: 1e-6,
            pair_reduction: PairReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        for (name, v) in [
            ("lambda1", self.lambda_point),
            ("lambda2", self.lambda_align),
            ("lambda3", self.lambda_pair),
            ("pair_epsilon", self.pair_epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub delta: f64,
    pub gap: f64,
    pub region: Region,
}

pub fn classify(delta: f64, gap: f64) -> Region {
    if delta <= 0.0 {
        Region::Part1
    } else if delta >= gap {
        Region::Part3
    } else {
        Region::Part2
    }
}

impl PairVariant {
    pub fn includes(self, pair: &Pair) -> bool {
        match self {
            PairVariant::L0 => true,
            PairVariant::L1 => pair.gap - pair.delta >= 0.0,
            PairVariant::L2 => pair.region == Region::Part1,
            PairVariant::L3 => pair.region == Region::Part2,
        }
    }
}

fn check_lengths(s: &[f64], y: &[f64], mask: &[bool]) -> Result<()> {
    if s.len() != y.len() || s.len() != mask.len() {
        return Err(Error::Invalid(format!(
            "length mismatch: s {} y {} mask {}",
            s.len(),
            y.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// All eligible ordered pairs of one window, `i` ascending then `j` ascending.
pub fn pair_set(s: &[f64], y: &[f64], mask: &[bool], epsilon: f64) -> Result<Vec<Pair>> {
    check_lengths(s, y, mask)?;
    let mut pairs = Vec::new();
    for i in (0..s.len()).filter(|&i| mask[i]) {
        for j in (0..s.len()).filter(|&j| mask[j]) {
            if y[i] > y[j] + epsilon {
                let (delta, gap) = (s[i] - s[j], y[i] - y[j]);
                pairs.push(Pair {
                    i,
                    j,
                    delta,
                    gap,
                    region: classify(delta, gap),
                });
            }
        }
    }
    Ok(pairs)
}

/// `log(1 + exp(-sigma * delta))`, computed without overflow.
pub fn pair_term(sigma: f64, delta: f64) -> f64 {
    let x = -sigma * delta;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Counts of eligible pairs in (Part1, Part2, Part3).
pub fn region_histogram(s: &[f64], y: &[f64], mask: &[bool], epsilon: f64) -> Result<[usize; 3]> {
    let mut counts = [0; 3];
    for p in pair_set(s, y, mask, epsilon)? {
        counts[p.region as usize] += 1;
    }
    Ok(counts)
}

/// Unnormalized pairwise loss over the pairs `variant` keeps.
pub fn pairwise_sum(s: &[f64], y: &[f64], mask: &[bool], sigma: f64, epsilon: f64, variant: PairVariant) -> Result<f64> {
    Ok(pair_set(s, y, mask, epsilon)?
        .iter()
        .filter(|p| variant.includes(p))
        .map(|p| pair_term(sigma, p.delta))
        .sum())
}

/// Sum of per-pair terms over eligible pairs in `region`.
pub fn region_sum(s: &[f64], y: &[f64], mask: &[bool], sigma: f64, epsilon: f64, region: Region) -> Result<f64> {
    Ok(pair_set(s, y, mask, epsilon)?
        .iter()
        .filter(|p| p.region == region)
        .map(|p| pair_term(sigma, p.delta))
        .sum())
}

fn column(tape: &Tape, s: Var) -> Result<Vec<f64>> {
    let shape = tape.shape(s);
    let ok = match shape {
        [_] => true,
        [_, 1] => true,
        _ => false,
    };
    if !ok {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "predictions must be [n] or [n, 1]".into(),
        });
    }
    Ok(tape.value(s).data().to_vec())
}

fn as_rows(tape: &mut Tape, s: Var) -> Result<Var> {
    let n = tape.shape(s)[0];
    if tape.shape(s).len() == 1 {
        tape.reshape(s, &[n, 1])
    } else {
        Ok(s)
    }
}

/// `-(1/m) sum_masked [y ln s + (1 - y) ln(1 - s)]`.
pub fn pointwise_loss(tape: &mut Tape, s: Var, y: &[f64], mask: &[bool]) -> Result<Var> {
    let values = column(tape, s)?;
    check_lengths(&values, y, mask)?;
    if let Some(&bad) = values.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain {
            op: "pointwise_loss",
            value: bad,
        });
    }
    let keep: Vec<usize> = (0..y.len()).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        return Err(Error::Invalid("pointwise loss needs at least one unmasked position".into()));
    }
    let m = keep.len();
    let rows = as_rows(tape, s)?;
    let sk = tape.gather_rows(rows, &keep)?;
    let yk = Tensor::new(vec![m, 1], keep.iter().map(|&i| y[i]).collect())?;
    let one_minus_y = tape.constant(yk.map(|v| 1.0 - v));
    let yk = tape.constant(yk);
    let log_s = tape.log(sk)?;
    let flipped = tape.affine(sk, -1.0, 1.0);
    let log_1ms = tape.log(flipped)?;
    let a = tape.mul(yk, log_s)?;
    let b = tape.mul(one_minus_y, log_1ms)?;
    let total = tape.add(a, b)?;
    let mean = tape.mean(total);
    Ok(tape.scale(mean, -1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct PairwiseOutput {
    pub loss: Var,
    pub included: usize,
    pub eligible: usize,
    /// True when no pair survived the variant's gate; `loss` is then exactly 0.
    pub empty: bool,
    pub histogram: [usize; 3],
}

pub fn pairwise_loss(tape: &mut Tape, s: Var, y: &[f64], mask: &[bool], config: &LossConfig) -> Result<PairwiseOutput> {
    let values = column(tape, s)?;
    let pairs = pair_set(&values, y, mask, config.pair_epsilon)?;
    let mut histogram = [0; 3];
    for p in &pairs {
        histogram[p.region as usize] += 1;
    }
    let kept: Vec<&Pair> = pairs.iter().filter(|p| config.pair_variant.includes(p)).collect();
    if kept.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(PairwiseOutput {
            loss: zero,
            included: 0,
            eligible: pairs.len(),
            empty: true,
            histogram,
        });
    }
    let rows = as_rows(tape, s)?;
    let si = tape.gather_rows(rows, &kept.iter().map(|p| p.i).collect::<Vec<_>>())?;
    let sj = tape.gather_rows(rows, &kept.iter().map(|p| p.j).collect::<Vec<_>>())?;
    let delta = tape.sub(si, sj)?;
    let scaled = tape.scale(delta, -config.sigma);
    let terms = tape.softplus(scaled)?;
    let loss = match config.pair_reduction {
        PairReduction::Mean => tape.mean(terms),
        PairReduction::Sum => tape.sum(terms),
    };
    Ok(PairwiseOutput {
        loss,
        included: kept.len(),
        eligible: pairs.len(),
        empty: false,
        histogram,
    })
}

/// Scalar values of each objective component for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub point: f64,
    pub align: f64,
    pub pair: f64,
}

/// `lambda1 * point + lambda2 * align + lambda3 * pair`. Components passed
/// as `None` contribute nothing (used when their weight is zero).
pub fn combined_loss(
    tape: &mut Tape,
    point: Option<Var>,
    align: Option<Var>,
    pair: Option<Var>,
    config: &LossConfig,
) -> Result<(Var, LossComponents)> {
    let mut parts = Vec::new();
    let mut components = LossComponents::default();
    for (var, weight, slot) in [
        (point, config.lambda_point, &mut components.point),
        (align, config.lambda_align, &mut components.align),
        (pair, config.lambda_pair, &mut components.pair),
    ] {
        if let Some(v) = var {
            *slot = tape.value(v).item();
            parts.push(tape.scale(v, weight));
        }
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &p in parts.iter().skip(1) {
        total = tape.add(total, p)?;
    }
    components.total = tape.value(total).item();
    Ok((total, components))
}
