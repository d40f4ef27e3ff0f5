//! Rank and linear correlation coefficients.
//!
//! Spearman is computed as Pearson correlation of average ranks, which
//! handles ties; [`srcc_closed_form`] is the `1 - 6 sum d^2 / (n (n^2 - 1))`
//! form that is exact only without ties and is kept as a cross-check.
//! Kendall's tau-b uses Knight's O(n log n) algorithm with an O(n^2) pair
//! count alongside it.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelationError {
    #[error("inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("input contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("correlation is undefined for a constant input")]
    Constant,
    #[error("closed-form Spearman requires tie-free inputs")]
    Ties,
}

/// Comparison for NaN-free values, with -0.0 equal to 0.0.
fn fcmp(x: f64, y: f64) -> Ordering {
    x.partial_cmp(&y).expect("NaN rejected before comparison")
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), CorrelationError> {
    if a.len() != b.len() {
        return Err(CorrelationError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(CorrelationError::TooFew(a.len()));
    }
    for v in [a, b] {
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(CorrelationError::NonFinite(i));
        }
    }
    Ok(())
}

/// 1-based average ranks; tied values share the mean of their positions.
pub fn rank_with_ties(values: &[f64]) -> Result<Vec<f64>, CorrelationError> {
    if let Some(i) = values.iter().position(|x| x.is_nan()) {
        return Err(CorrelationError::NonFinite(i));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| fcmp(values[i], values[j]).then(i.cmp(&j)));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    Ok(ranks)
}

/// Average ranks of both inputs and their per-item differences.
#[derive(Debug, Clone, PartialEq)]
pub struct RankData {
    pub ranks_a: Vec<f64>,
    pub ranks_b: Vec<f64>,
    pub d: Vec<f64>,
    pub n: usize,
}

impl RankData {
    pub fn new(a: &[f64], b: &[f64]) -> Result<Self, CorrelationError> {
        check_pair(a, b)?;
        let ranks_a = rank_with_ties(a)?;
        let ranks_b = rank_with_ties(b)?;
        let d = ranks_a.iter().zip(&ranks_b).map(|(x, y)| x - y).collect();
        Ok(Self {
            ranks_a,
            ranks_b,
            d,
            n: a.len(),
        })
    }
}

/// Pearson's linear correlation on raw values, clamped to [-1, 1].
pub fn plcc(a: &[f64], b: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CorrelationError::Constant);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn srcc(a: &[f64], b: &[f64]) -> Result<f64, CorrelationError> {
    let ranks = RankData::new(a, b)?;
    plcc(&ranks.ranks_a, &ranks.ranks_b)
}

/// `1 - 6 sum d^2 / (n (n^2 - 1))`. Errors on ties, where it is not exact.
pub fn srcc_closed_form(a: &[f64], b: &[f64]) -> Result<f64, CorrelationError> {
    let ranks = RankData::new(a, b)?;
    let has_ties = |r: &[f64]| {
        r.iter().any(|x| x.fract() != 0.0) || {
            let mut s = r.to_vec();
            s.sort_by(f64::total_cmp);
            s.windows(2).any(|w| w[0] == w[1])
        }
    };
    if has_ties(&ranks.ranks_a) || has_ties(&ranks.ranks_b) {
        return Err(CorrelationError::Ties);
    }
    let n = ranks.n as f64;
    let sum_d2: f64 = ranks.d.iter().map(|d| d * d).sum();
    Ok(1.0 - 6.0 * sum_d2 / (n * (n * n - 1.0)))
}

fn tau_b(
    concordant_minus_discordant: i64,
    n0: u64,
    ties_a: u64,
    ties_b: u64,
) -> Result<f64, CorrelationError> {
    let left = n0 - ties_a;
    let right = n0 - ties_b;
    if left == 0 || right == 0 {
        return Err(CorrelationError::Constant);
    }
    let tau = concordant_minus_discordant as f64 / (left as f64 * right as f64).sqrt();
    Ok(tau.clamp(-1.0, 1.0))
}

/// Kendall's tau-b by direct enumeration of all pairs.
pub fn krcc_pairwise(a: &[f64], b: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(a, b)?;
    let n = a.len();
    let (mut s, mut ties_a, mut ties_b) = (0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let da = fcmp(a[i], a[j]) as i64;
            let db = fcmp(b[i], b[j]) as i64;
            if da == 0 {
                ties_a += 1;
            }
            if db == 0 {
                ties_b += 1;
            }
            s += da * db;
        }
    }
    let n0 = (n * (n - 1) / 2) as u64;
    tau_b(s, n0, ties_a, ties_b)
}

/// Kendall's tau-b in O(n log n).
pub fn krcc(a: &[f64], b: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(a, b)?;
    let n = a.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| fcmp(a[i], a[j]).then(fcmp(b[i], b[j])));

    let tied_pairs = |sorted: &[usize], eq: &dyn Fn(usize, usize) -> bool| -> u64 {
        let mut total = 0u64;
        let mut run = 1u64;
        for w in sorted.windows(2) {
            if eq(w[0], w[1]) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let ties_a = tied_pairs(&order, &|i, j| a[i] == a[j]);
    let ties_joint = tied_pairs(&order, &|i, j| a[i] == a[j] && b[i] == b[j]);

    // Sorting the a-ordered sequence by b counts the discordant pairs as swaps.
    let mut buf = vec![0usize; n];
    let swaps = merge_count(&mut order, &mut buf, b);
    let ties_b = tied_pairs(&order, &|i, j| b[i] == b[j]);

    let n0 = (n * (n - 1) / 2) as u64;
    let s = n0 as i64 - ties_a as i64 - ties_b as i64 + ties_joint as i64 - 2 * swaps as i64;
    tau_b(s, n0, ties_a, ties_b)
}

/// Stable merge sort of `idx` by `key`, returning the number of inversions.
fn merge_count(idx: &mut [usize], buf: &mut [usize], key: &[f64]) -> u64 {
    let n = idx.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut idx[..mid], &mut buf[..mid], key)
        + merge_count(&mut idx[mid..], &mut buf[mid..], key);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if fcmp(key[idx[j]], key[idx[i]]) == Ordering::Less {
            buf[k] = idx[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = idx[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&idx[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&idx[j..n]);
    idx.copy_from_slice(&buf[..n]);
    swaps
}
