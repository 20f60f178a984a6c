use super::{check_len, EvalError, Result};

pub const OTSU_BINS: usize = 256;

/// Bin `b` holds values in `(b/256, (b+1)/256]`; zero goes to bin 0.
pub fn otsu_bin(v: f64) -> usize {
    let scaled = (v.clamp(0.0, 1.0) * OTSU_BINS as f64).ceil() as usize;
    scaled.saturating_sub(1).min(OTSU_BINS - 1)
}

/// Otsu threshold of the in-mask values over 256 bins.
///
/// A cut after bin `k` is reported as `(k+1)/256`, so `v > threshold`
/// selects exactly the bins above the cut. Plateaus resolve to the
/// smallest cut; a constant input returns the first cut, `1/256`.
pub fn otsu_threshold(probs: &[f64], mask: &[bool]) -> Result<f64> {
    check_len("mask", probs.len(), mask.len())?;
    let mut hist = [0u64; OTSU_BINS];
    for (&p, _) in probs.iter().zip(mask).filter(|(_, &m)| m) {
        hist[otsu_bin(p)] += 1;
    }
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(EvalError::EmptyMask);
    }
    let weighted_total: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();

    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best = (0usize, Score::ZERO);
    for (k, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += count;
        s0 += k as u64 * count;
        let score = Score::new(n0, s0, total - n0, weighted_total - s0);
        if score.beats(&best.1) {
            best = (k, score);
        }
    }
    Ok((best.0 + 1) as f64 / OTSU_BINS as f64)
}

/// `n0·n1·(μ0 − μ1)² = D²/(n0·n1)` with `D = s0·n1 − s1·n0`, kept as the
/// integer pair `(D², n0·n1)` so cuts compare without rounding.
#[derive(Debug, Clone, Copy)]
enum Score {
    Exact { d2: u128, q: u64 },
    /// Histograms past ~2.7e8 pixels overflow the exact form.
    Approx(f64),
}

impl Score {
    const ZERO: Score = Score::Exact { d2: 0, q: 1 };

    fn new(n0: u64, s0: u64, n1: u64, s1: u64) -> Score {
        if n0 == 0 || n1 == 0 {
            return Score::ZERO;
        }
        let (a, b) = (s0 as u128 * n1 as u128, s1 as u128 * n0 as u128);
        let d = a.abs_diff(b);
        match (d.checked_mul(d), n0.checked_mul(n1)) {
            (Some(d2), Some(q)) => Score::Exact { d2, q },
            _ => Score::Approx(between_class(n0, s0, n1, s1)),
        }
    }

    fn value(&self) -> f64 {
        match *self {
            Score::Exact { d2, q } => d2 as f64 / q as f64,
            Score::Approx(v) => v,
        }
    }

    /// Strictly greater.
    fn beats(&self, other: &Score) -> bool {
        match (*self, *other) {
            (Score::Exact { d2: a, q: qa }, Score::Exact { d2: b, q: qb }) => wide_mul(a, qb) > wide_mul(b, qa),
            _ => self.value() > other.value(),
        }
    }
}

/// Full 256-bit product as `(high, low)`.
fn wide_mul(a: u128, b: u64) -> (u128, u128) {
    let b = b as u128;
    let lo_part = (a & u64::MAX as u128) * b;
    let hi_part = (a >> 64) * b;
    let lo = lo_part.wrapping_add(hi_part << 64);
    let carry = (lo < lo_part) as u128;
    ((hi_part >> 64) + carry, lo)
}

/// `n0·n1·(μ0 − μ1)²` on bin indices, 0 when a class is empty.
pub(crate) fn between_class(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let d = s0 as f64 / n0 as f64 - s1 as f64 / n1 as f64;
    n0 as f64 * n1 as f64 * d * d
}

/// `v > threshold`.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p > threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_mul_matches_split_arithmetic() {
        assert_eq!(wide_mul(u128::MAX, u64::MAX), (u64::MAX as u128 - 1, u128::MAX - u64::MAX as u128 + 1));
        assert_eq!(wide_mul(1 << 127, 2), (1, 0));
        assert_eq!(wide_mul(12345, 678), (0, 12345 * 678));
    }

    #[test]
    fn exact_scores_agree_with_the_float_formula() {
        for (n0, s0, n1, s1) in [(3, 0, 5, 40), (10, 90, 2, 2), (1, 255, 1000, 0)] {
            let s = Score::new(n0, s0, n1, s1);
            assert!((s.value() - between_class(n0, s0, n1, s1)).abs() <= 1e-9 * s.value());
        }
        // 1·1·2² = 1·4·1²
        let a = Score::new(1, 0, 1, 2);
        let b = Score::new(1, 0, 4, 4);
        assert!(!a.beats(&b) && !b.beats(&a));
    }
}
