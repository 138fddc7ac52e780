//! Modality temporal alignment: DTW over a cosine-similarity matrix,
//! similarity-biased swap augmentation, shuffled negatives, and an InfoNCE
//! loss over the resulting DTW distances.
//!
//! The recurrence is
//! `H[i][j] = D[i][j] + best(H[i-1][j-1], H[i-1][j], H[i][j-1])` with
//! out-of-range predecessors excluded, and the distance is `H[n-1][n-1]`.
//! `best` is `min` in [`DtwMode::Min`] and `max` in [`DtwMode::Max`]; ties
//! go to the earliest candidate in that listed order. On the tape, the
//! distance is the sum of `D` along the selected path, so gradients flow
//! only through the cells on that path.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DtwMode {
    Min,
    Max,
}

impl std::str::FromStr for DtwMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "min" => Ok(DtwMode::Min),
            "max" => Ok(DtwMode::Max),
            _ => Err(format!("unknown dtw mode {s:?} (expected min or max)")),
        }
    }
}

impl std::fmt::Display for DtwMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DtwMode::Min => "min",
            DtwMode::Max => "max",
        })
    }
}

impl DtwMode {
    fn better(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            DtwMode::Min => candidate < incumbent,
            DtwMode::Max => candidate > incumbent,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentConfig {
    /// Temperature of the swap-pair distribution.
    pub gamma: f64,
    /// Temperature of the contrastive loss.
    pub tau_c: f64,
    pub negatives: usize,
    pub mode: DtwMode,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            tau_c: 0.1,
            negatives: 8,
            mode: DtwMode::Min,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.tau_c > 0.0) || self.negatives == 0 {
            return Err(Error::Config("alignment needs gamma > 0, tau_c > 0, negatives >= 1".into()));
        }
        Ok(())
    }
}

/// `D[i][j] = cos(z_i, v_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(pub Tensor);

/// Filled DP table `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeMatrix(pub Tensor);

fn check_square(d: &Tensor) -> Result<usize> {
    let (r, c) = d.expect_matrix("dtw")?;
    if r != c {
        return Err(Error::shape("dtw", &[r, r], d.shape()));
    }
    Ok(r)
}

fn row_norms(x: &Tensor) -> Result<Vec<f64>> {
    (0..x.rows())
        .map(|r| {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::Invalid(format!("zero-norm embedding row {r}")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

pub fn similarity_matrix(z: &Tensor, v: &Tensor) -> Result<SimilarityMatrix> {
    let (nz, dz) = z.expect_matrix("similarity")?;
    let (nv, dv) = v.expect_matrix("similarity")?;
    if nz != nv || dz != dv {
        return Err(Error::shape("similarity", z.shape(), v.shape()));
    }
    let (zn, vn) = (row_norms(z)?, row_norms(v)?);
    let mut out = vec![0.0; nz * nv];
    for i in 0..nz {
        for j in 0..nv {
            let dot: f64 = z.row(i).iter().zip(v.row(j)).map(|(a, b)| a * b).sum();
            out[i * nv + j] = dot / (zn[i] * vn[j]);
        }
    }
    Ok(SimilarityMatrix(Tensor::new(vec![nz, nv], out)?))
}

/// Unit-normalizes each row on the tape; zero rows are an error.
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    row_norms(tape.value(x))?;
    let sq = tape.mul(x, x)?;
    let ss = tape.reduce(sq, Reduction::Sum, Some(1))?;
    let norms = tape.sqrt(ss)?;
    tape.div(x, norms)
}

/// Differentiable cosine-similarity matrix of `z` against `v`.
pub fn similarity_on_tape(tape: &mut Tape, z: Var, v: Var) -> Result<Var> {
    if tape.shape(z) != tape.shape(v) {
        return Err(Error::shape("similarity", tape.shape(z), tape.shape(v)));
    }
    let zn = normalize_rows(tape, z)?;
    let vn = normalize_rows(tape, v)?;
    let vt = tape.transpose(vn)?;
    tape.matmul(zn, vt)
}

/// Fills `H`. Returns the table and, per cell, the chosen predecessor.
fn fill(d: &Tensor, mode: DtwMode) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
    let n = check_square(d)?;
    let mut h = vec![0.0; n * n];
    let mut from = vec![None; n * n];
    for i in 0..n {
        for j in 0..n {
            let candidates = [
                (i > 0 && j > 0).then(|| (i - 1) * n + j - 1),
                (i > 0).then(|| (i - 1) * n + j),
                (j > 0).then(|| i * n + j - 1),
            ];
            let mut best: Option<usize> = None;
            for c in candidates.into_iter().flatten() {
                if best.is_none_or(|b| mode.better(h[c], h[b])) {
                    best = Some(c);
                }
            }
            let cell = i * n + j;
            h[cell] = match best {
                Some(b) => d.data()[cell] + h[b],
                None => d.data()[cell],
            };
            from[cell] = best;
        }
    }
    Ok((h, from))
}

pub fn cumulative_matrix(d: &Tensor, mode: DtwMode) -> Result<CumulativeMatrix> {
    let n = check_square(d)?;
    let (h, _) = fill(d, mode)?;
    Ok(CumulativeMatrix(Tensor::new(vec![n, n], h)?))
}

pub fn dtw_distance(d: &Tensor, mode: DtwMode) -> Result<f64> {
    let (h, _) = fill(d, mode)?;
    Ok(*h.last().expect("non-empty"))
}

/// Distance plus the selected path, as flat cell indices from `(0, 0)`.
pub fn dtw_path(d: &Tensor, mode: DtwMode) -> Result<(f64, Vec<usize>)> {
    let (h, from) = fill(d, mode)?;
    let mut cell = h.len() - 1;
    let mut path = vec![cell];
    while let Some(prev) = from[cell] {
        path.push(prev);
        cell = prev;
    }
    path.reverse();
    Ok((h[h.len() - 1], path))
}

/// Differentiable DTW distance: the sum of `d` along the selected path.
pub fn dtw_on_tape(tape: &mut Tape, d: Var, mode: DtwMode) -> Result<Var> {
    let (_, path) = dtw_path(tape.value(d), mode)?;
    tape.select_sum(d, &path)
}

pub const ORACLE_MAX_N: usize = 8;

/// Exhaustive search over every monotone path with steps
/// `(+1, +1)`, `(+1, 0)`, `(0, +1)`.
pub fn enumerate_paths_oracle(d: &Tensor, mode: DtwMode) -> Result<f64> {
    let n = check_square(d)?;
    if n > ORACLE_MAX_N {
        return Err(Error::Invalid(format!("path enumeration limited to n <= {ORACLE_MAX_N}")));
    }
    fn walk(d: &Tensor, n: usize, i: usize, j: usize, acc: f64, mode: DtwMode, best: &mut Option<f64>) {
        let acc = acc + d.at(i, j);
        if i == n - 1 && j == n - 1 {
            if best.is_none_or(|b| mode.better(acc, b)) {
                *best = Some(acc);
            }
            return;
        }
        if i + 1 < n && j + 1 < n {
            walk(d, n, i + 1, j + 1, acc, mode, best);
        }
        if i + 1 < n {
            walk(d, n, i + 1, j, acc, mode, best);
        }
        if j + 1 < n {
            walk(d, n, i, j + 1, acc, mode, best);
        }
    }
    let mut best = None;
    walk(d, n, 0, 0, 0.0, mode, &mut best);
    Ok(best.expect("at least one path"))
}

/// Number of monotone paths across an `n x n` grid (central Delannoy number).
pub fn count_paths(n: usize) -> u64 {
    let mut grid = vec![vec![0u64; n]; n];
    for i in 0..n {
        for j in 0..n {
            grid[i][j] = if i == 0 || j == 0 {
                1
            } else {
                grid[i - 1][j - 1] + grid[i - 1][j] + grid[i][j - 1]
            };
        }
    }
    grid[n - 1][n - 1]
}

/// Swap-pair probabilities `softmax(D[i][j] / gamma)` over ordered pairs `i != j`.
pub fn swap_distribution(d: &Tensor, gamma: f64) -> Result<Vec<((usize, usize), f64)>> {
    let n = check_square(d)?;
    if n < 2 {
        return Err(Error::Invalid("swap augmentation needs n >= 2".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let logits: Vec<f64> = pairs.iter().map(|&(i, j)| d.at(i, j) / gamma).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(pairs.into_iter().zip(w.into_iter().map(|x| x / total)).collect())
}

pub fn sample_swap_pair(d: &Tensor, gamma: f64, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let dist = swap_distribution(d, gamma)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(pair, p) in &dist {
        acc += p;
        if u < acc {
            return Ok(pair);
        }
    }
    Ok(dist.iter().rev().find(|(_, p)| *p > 0.0).expect("non-empty").0)
}

/// Row order of `v` with rows `i` and `j` exchanged.
pub fn positive_permutation(n: usize, (i, j): (usize, usize)) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.swap(i, j);
    perm
}

/// Uniform random non-identity permutation of `0..n`.
pub fn negative_permutation(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Invalid("shuffled negatives need n >= 2".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(k, &p)| k != p) {
            return Ok(perm);
        }
    }
}

fn permute_rows(v: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = perm.iter().map(|&r| v.row(r)).collect();
    Tensor::from_rows(&rows).expect("rows share a width")
}

pub fn make_positive(v: &Tensor, pair: (usize, usize)) -> Tensor {
    permute_rows(v, &positive_permutation(v.rows(), pair))
}

pub fn make_negatives(v: &Tensor, count: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|_| Ok(permute_rows(v, &negative_permutation(v.rows(), rng)?)))
        .collect()
}

/// The sampled (non-differentiable) part of one alignment-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub swap: (usize, usize),
    pub positive: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

pub fn draw_augmentation(d: &Tensor, config: &AlignmentConfig, rng: &mut impl Rng) -> Result<Augmentation> {
    let n = check_square(d)?;
    let swap = sample_swap_pair(d, config.gamma, rng)?;
    let negatives = (0..config.negatives)
        .map(|_| negative_permutation(n, rng))
        .collect::<Result<_>>()?;
    Ok(Augmentation {
        swap,
        positive: positive_permutation(n, swap),
        negatives,
    })
}

#[derive(Clone, Debug)]
pub struct AlignmentState {
    pub similarity: SimilarityMatrix,
    pub cumulative: CumulativeMatrix,
    pub augmentation: Augmentation,
    /// `d(z, v')` followed by each `d(z, v_p)`.
    pub distances: Vec<f64>,
}

/// `-ln( e^{d+/tau} / (e^{d+/tau} + sum_p e^{d_p/tau}) )`.
pub fn info_nce(positive: f64, negatives: &[f64], tau: f64) -> f64 {
    let logits: Vec<f64> = std::iter::once(positive).chain(negatives.iter().copied()).map(|d| d / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// InfoNCE alignment loss for a fixed augmentation.
pub fn align_loss_with(
    tape: &mut Tape,
    z: Var,
    v: Var,
    aug: &Augmentation,
    config: &AlignmentConfig,
) -> Result<(Var, Vec<f64>)> {
    let zn = normalize_rows(tape, z)?;
    let vn = normalize_rows(tape, v)?;
    let mut distances = Vec::with_capacity(1 + aug.negatives.len());
    for perm in std::iter::once(&aug.positive).chain(&aug.negatives) {
        let vp = tape.gather_rows(vn, perm)?;
        let vt = tape.transpose(vp)?;
        let dp = tape.matmul(zn, vt)?;
        distances.push(dtw_on_tape(tape, dp, config.mode)?);
    }
    let values = distances.iter().map(|&d| tape.value(d).item()).collect();
    let stacked = tape.concat(&distances, 0)?;
    let logits = tape.scale(stacked, 1.0 / config.tau_c);
    let log_probs = tape.log_softmax(logits)?;
    let first = tape.narrow(log_probs, 0, 0, 1)?;
    Ok((tape.scale(first, -1.0), values))
}

/// Samples an augmentation from the detached similarity matrix, then
/// evaluates [`align_loss_with`].
pub fn align_loss(
    tape: &mut Tape,
    z: Var,
    v: Var,
    config: &AlignmentConfig,
    rng: &mut impl Rng,
) -> Result<(Var, AlignmentState)> {
    config.validate()?;
    let similarity = similarity_matrix(tape.value(z), tape.value(v))?;
    let cumulative = cumulative_matrix(&similarity.0, config.mode)?;
    let augmentation = draw_augmentation(&similarity.0, config, rng)?;
    let (loss, distances) = align_loss_with(tape, z, v, &augmentation, config)?;
    Ok((
        loss,
        AlignmentState {
            similarity,
            cumulative,
            augmentation,
            distances,
        },
    ))
}
