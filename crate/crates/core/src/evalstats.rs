//! Paired nonparametric comparison: Wilcoxon signed-rank test, rank-biserial
//! correlation and the Hodges-Lehmann median difference.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Exact null distribution is used up to this many nonzero differences
/// (when there are no ties).
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    Less,
    Greater,
    TwoSided,
}

/// Nonzero paired differences `AE_A - AE_B`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDiffs {
    d: Vec<f64>,
    dropped: usize,
}

impl PairedDiffs {
    pub fn new(d: &[f64]) -> Result<Self> {
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("paired differences must be finite"));
        }
        let kept: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
        Ok(Self {
            dropped: d.len() - kept.len(),
            d: kept,
        })
    }

    pub fn from_errors(ae_a: &[f64], ae_b: &[f64]) -> Result<Self> {
        Error::check_len(ae_a.len(), ae_b.len())?;
        let d: Vec<f64> = ae_a.iter().zip(ae_b).map(|(a, b)| a - b).collect();
        Self::new(&d)
    }

    pub fn values(&self) -> &[f64] {
        &self.d
    }

    pub fn n_r(&self) -> usize {
        self.d.len()
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_r: usize,
    /// Sum of positive-difference ranks.
    pub v: f64,
    pub p_value: f64,
    pub rank_biserial: f64,
    pub exact: bool,
}

/// Midranks of `|d|`, returned doubled so they stay integral.
fn doubled_midranks(abs: &[f64]) -> (Vec<u64>, bool) {
    let n = abs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; n];
    let mut ties = false;
    let mut k = 0;
    while k < n {
        let mut e = k;
        while e + 1 < n && abs[order[e + 1]] == abs[order[k]] {
            e += 1;
        }
        if e > k {
            ties = true;
        }
        // ranks k+1..=e+1 average to (k+e+2)/2
        for &idx in &order[k..=e] {
            ranks[idx] = (k + e + 2) as u64;
        }
        k = e + 1;
    }
    (ranks, ties)
}

fn tie_correction(abs: &[f64]) -> f64 {
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut total = 0.0;
    let mut k = 0;
    while k < sorted.len() {
        let mut e = k;
        while e + 1 < sorted.len() && sorted[e + 1] == sorted[k] {
            e += 1;
        }
        let t = (e - k + 1) as f64;
        total += t * t * t - t;
        k = e + 1;
    }
    total / 48.0
}

/// Number of subsets of {1..n} with each rank sum, for the exact null.
fn null_counts(n: usize) -> Vec<u64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

pub fn wilcoxon_signed_rank(diffs: &PairedDiffs, alternative: Alternative) -> Result<WilcoxonResult> {
    let d = diffs.values();
    let n = d.len();
    if n == 0 {
        return Err(Error::EmptyInput("no nonzero paired differences".into()));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks2, ties) = doubled_midranks(&abs);
    let v2: u64 = d.iter().zip(&ranks2).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let v = v2 as f64 / 2.0;
    let total = (n * (n + 1)) as u64; // 2T
    let rank_biserial = (2 * v2 as i64 - total as i64) as f64 / total as f64;
    let exact = n <= EXACT_MAX_N && !ties;
    let (p_less, p_greater) = if exact {
        let counts = null_counts(n);
        let all = (1u64 << n) as f64;
        let v = (v2 / 2) as usize;
        let le: u64 = counts[..=v].iter().sum();
        let ge: u64 = counts[v..].iter().sum();
        (le as f64 / all, ge as f64 / all)
    } else {
        let nf = n as f64;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction(&abs);
        let sd4 = 4.0 * var.max(0.0).sqrt();
        let std = Normal::standard();
        // 4V - n(n+1) +- 2 is integral, which keeps sign flips bit-exact
        let num_less = 2 * v2 as i64 - total as i64 + 2;
        let num_greater = total as i64 + 2 - 2 * v2 as i64;
        if sd4 == 0.0 {
            (1.0, 1.0)
        } else {
            (
                std.cdf(num_less as f64 / sd4),
                std.cdf(num_greater as f64 / sd4),
            )
        }
    };
    let p_value = match alternative {
        Alternative::Less => p_less,
        Alternative::Greater => p_greater,
        Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
    };
    Ok(WilcoxonResult {
        n_r: n,
        v,
        p_value: p_value.min(1.0),
        rank_biserial,
        exact,
    })
}

/// Pairs `i <= j` of sorted `d` with `d_i + d_j <= x`.
fn count_le(d: &[f64], x: f64) -> usize {
    let n = d.len();
    let mut count = 0;
    let mut p = n;
    for i in 0..n {
        while p > 0 && d[i] + d[p - 1] > x {
            p -= 1;
        }
        if p <= i {
            break;
        }
        count += p - i;
    }
    count
}

/// Smallest pair sum strictly above `x`.
fn next_sum_above(d: &[f64], x: f64) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..d.len() {
        let rest = &d[i..];
        let j = rest.partition_point(|v| d[i] + v <= x);
        if j < rest.len() {
            best = best.min(d[i] + rest[j]);
        }
    }
    best
}

/// k-th smallest (1-based) pair sum `d_i + d_j`, `i <= j`, by bisection
/// down to adjacent doubles.
fn kth_pair_sum(d: &[f64], k: usize) -> f64 {
    let n = d.len();
    let mut lo = 2.0 * d[0];
    let mut hi = 2.0 * d[n - 1];
    if count_le(d, lo) >= k {
        return lo;
    }
    loop {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        if count_le(d, mid) >= k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    next_sum_above(d, lo)
}

/// Median of the Walsh averages `(d_i + d_j)/2`, `i <= j`.
pub fn hodges_lehmann(d: &[f64]) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::EmptyInput("Hodges-Lehmann of no differences".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("differences must be finite"));
    }
    let mut sorted = d.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let m = n * (n + 1) / 2;
    Ok(if m % 2 == 1 {
        kth_pair_sum(&sorted, m / 2 + 1) / 2.0
    } else {
        (kth_pair_sum(&sorted, m / 2) + kth_pair_sum(&sorted, m / 2 + 1)) / 4.0
    })
}

/// One comparison-report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub level: String,
    pub method_a: String,
    pub method_b: String,
    pub n_r: usize,
    pub v: f64,
    pub p_value: f64,
    pub rank_biserial: f64,
    pub hl: f64,
    pub mean_diff: f64,
}

pub const COMPARISON_COLUMNS: [&str; 9] = [
    "level", "method_a", "method_b", "n_r", "v", "p_value", "rank_biserial", "hl", "mean_diff",
];

/// Compares absolute errors of A against B; `None` when every pair ties.
pub fn compare_methods(
    level: &str,
    method_a: &str,
    method_b: &str,
    ae_a: &[f64],
    ae_b: &[f64],
    alternative: Alternative,
) -> Result<Option<ComparisonRow>> {
    let diffs = PairedDiffs::from_errors(ae_a, ae_b)?;
    if diffs.n_r() == 0 {
        return Ok(None);
    }
    let w = wilcoxon_signed_rank(&diffs, alternative)?;
    let all: Vec<f64> = ae_a.iter().zip(ae_b).map(|(a, b)| a - b).collect();
    Ok(Some(ComparisonRow {
        level: level.into(),
        method_a: method_a.into(),
        method_b: method_b.into(),
        n_r: w.n_r,
        v: w.v,
        p_value: w.p_value,
        rank_biserial: w.rank_biserial,
        hl: hodges_lehmann(diffs.values())?,
        mean_diff: all.iter().sum::<f64>() / all.len() as f64,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(d: &[f64], alt: Alternative) -> WilcoxonResult {
        wilcoxon_signed_rank(&PairedDiffs::new(d).unwrap(), alt).unwrap()
    }

    /// Enumerates all sign patterns of ranks 1..n.
    fn enumerate_p(n: usize, v: f64, le: bool) -> f64 {
        let mut hits = 0u32;
        for mask in 0u32..(1 << n) {
            let s: usize = (0..n).filter(|r| mask >> r & 1 == 1).map(|r| r + 1).sum();
            if (le && s as f64 <= v) || (!le && s as f64 >= v) {
                hits += 1;
            }
        }
        hits as f64 / (1u32 << n) as f64
    }

    #[test]
    fn wilcoxon_examples() {
        let r = w(&[-3.0, -1.0, -2.0], Alternative::Less);
        assert_eq!(r.v, 0.0);
        assert_eq!(r.p_value, 0.125);
        assert_eq!(r.p_value, enumerate_p(3, 0.0, true));
        assert_eq!(r.rank_biserial, -1.0);
        let r = w(&[3.0, 1.0, 2.0], Alternative::Less);
        assert!(r.p_value >= 0.875);
        assert_eq!(r.p_value, enumerate_p(3, 6.0, true));
        let zero = PairedDiffs::new(&[0.0, 1.0, -2.0]).unwrap();
        assert_eq!(zero.n_r(), 2);
        assert_eq!(zero.dropped(), 1);
        assert!(wilcoxon_signed_rank(&PairedDiffs::new(&[0.0]).unwrap(), Alternative::Less).is_err());
    }

    #[test]
    fn exact_matches_enumeration() {
        let d = [1.5, -0.2, 3.1, -4.0, 0.7, 2.2, -1.1];
        // ranks by |d|: 0.2->1, 0.7->2, 1.1->3, 1.5->4, 2.2->5, 3.1->6, 4.0->7
        let r = w(&d, Alternative::Greater);
        assert_eq!(r.v, (4 + 2 + 5 + 6) as f64);
        assert_eq!(r.p_value, enumerate_p(7, r.v, false));
        let two = w(&d, Alternative::TwoSided);
        assert_eq!(two.p_value, (2.0 * enumerate_p(7, r.v, false).min(enumerate_p(7, r.v, true))).min(1.0));
    }

    #[test]
    fn ties_use_normal_approximation() {
        let r = w(&[1.0, 1.0, -1.0, 2.0], Alternative::Greater);
        assert!(!r.exact);
        assert_eq!(r.v, 2.0 + 2.0 + 4.0);
        assert!(r.p_value > 0.0 && r.p_value < 1.0);
    }

    #[test]
    fn hl_examples() {
        assert_eq!(hodges_lehmann(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(hodges_lehmann(&[4.5]).unwrap(), 4.5);
        assert_eq!(hodges_lehmann(&[-2.0, -1.0, 1.0, 2.0]).unwrap(), 0.0);
        assert!(hodges_lehmann(&[]).is_err());
    }

    #[test]
    fn dominated_method_has_small_p() {
        let a: Vec<f64> = (0..200).map(|k| 2.0 + (k % 7) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..200).map(|k| 1.0 + (k % 5) as f64 * 0.1).collect();
        let row = compare_methods("bottom", "a", "b", &b, &a, Alternative::Less).unwrap().unwrap();
        assert!(row.p_value < 1e-10);
        assert!(row.hl < 0.0);
        assert!(compare_methods("bottom", "a", "a", &a, &a, Alternative::Less).unwrap().is_none());
    }

    fn walsh_oracle(d: &[f64]) -> f64 {
        let mut w = Vec::new();
        for i in 0..d.len() {
            for j in i..d.len() {
                w.push((d[i] + d[j]) / 2.0);
            }
        }
        w.sort_by(f64::total_cmp);
        let m = w.len();
        if m % 2 == 1 {
            w[m / 2]
        } else {
            (w[m / 2 - 1] + w[m / 2]) / 2.0
        }
    }

    proptest! {
        #[test]
        fn sign_flip_antisymmetry(d in prop::collection::vec(-50i32..50, 1..60)) {
            let d: Vec<f64> = d.into_iter().map(|v| v as f64 / 4.0).collect();
            let neg: Vec<f64> = d.iter().map(|v| -v).collect();
            let a = PairedDiffs::new(&d).unwrap();
            prop_assume!(a.n_r() > 0);
            let b = PairedDiffs::new(&neg).unwrap();
            let less = wilcoxon_signed_rank(&a, Alternative::Less).unwrap();
            let greater = wilcoxon_signed_rank(&b, Alternative::Greater).unwrap();
            prop_assert_eq!(less.p_value.to_bits(), greater.p_value.to_bits());
        }

        #[test]
        fn hl_matches_walsh_enumeration(d in prop::collection::vec(-1e3f64..1e3, 1..80)) {
            prop_assert_eq!(hodges_lehmann(&d).unwrap(), walsh_oracle(&d));
        }

        #[test]
        fn hl_translation_equivariant(d in prop::collection::vec(-100i32..100, 1..40), c in -64i32..64) {
            let d: Vec<f64> = d.into_iter().map(|v| v as f64 / 8.0).collect();
            let c = c as f64 / 8.0;
            let shifted: Vec<f64> = d.iter().map(|v| v + c).collect();
            prop_assert_eq!(hodges_lehmann(&shifted).unwrap(), hodges_lehmann(&d).unwrap() + c);
        }

        #[test]
        fn exact_and_normal_agree_at_25(d in prop::collection::vec(1u32..10_000, 25)) {
            let mut seen = std::collections::BTreeSet::new();
            let d: Vec<f64> = d.iter().enumerate()
                .filter(|(_, v)| seen.insert(**v))
                .map(|(k, v)| if k % 3 == 0 { -(*v as f64) } else { *v as f64 })
                .collect();
            prop_assume!(d.len() == 25);
            let diffs = PairedDiffs::new(&d).unwrap();
            let exact = wilcoxon_signed_rank(&diffs, Alternative::Less).unwrap();
            prop_assert!(exact.exact);
            let n = 25.0f64;
            let sd = (n * (n + 1.0) * (2.0 * n + 1.0) / 24.0).sqrt();
            let z = (exact.v - n * (n + 1.0) / 4.0 + 0.5) / sd;
            let approx = Normal::standard().cdf(z);
            prop_assert!((exact.p_value - approx).abs() < 0.01);
        }
    }
}
