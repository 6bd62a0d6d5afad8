//! Small statistics helpers for the uniformity and timing checks.

use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

impl ChiSquare {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// Pearson goodness-of-fit against equal expected counts.
pub fn chi_square_uniform(counts: &[u64]) -> ChiSquare {
    assert!(counts.len() >= 2, "need at least two bins");
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let statistic = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dof = counts.len() - 1;
    let p_value = ChiSquared::new(dof as f64).unwrap().sf(statistic);
    ChiSquare { statistic, dof, p_value }
}

/// Histogram of the top `bits` bits of `k`-bit values.
pub fn top_bits_histogram(values: impl IntoIterator<Item = u64>, k: u32, bits: u32) -> Vec<u64> {
    let mut h = vec![0u64; 1 << bits];
    for v in values {
        h[(v >> (k - bits)) as usize] += 1;
    }
    h
}

/// Histogram of the low `bits` bits.
pub fn low_bits_histogram(values: impl IntoIterator<Item = u64>, bits: u32) -> Vec<u64> {
    let mut h = vec![0u64; 1 << bits];
    for v in values {
        h[(v & ((1 << bits) - 1)) as usize] += 1;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert!(xs.len() == ys.len() && xs.len() >= 2);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    LinearFit { slope, intercept, r2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_reference_values() {
        let flat = chi_square_uniform(&[25, 25, 25, 25]);
        assert_eq!(flat.statistic, 0.0);
        assert!((flat.p_value - 1.0).abs() < 1e-12);
        let skew = chi_square_uniform(&[35, 20, 20, 25]);
        assert!((skew.statistic - 6.0).abs() < 1e-12);
        // statistic 12 on 3 dof: upper tail 0.007383
        let ten = chi_square_uniform(&[40, 20, 20, 20]);
        assert!((ten.statistic - 12.0).abs() < 1e-12);
        assert!((ten.p_value - 0.007383).abs() < 1e-5, "{}", ten.p_value);
        assert!(!ten.passes(0.01));
    }

    #[test]
    fn fit_of_exact_line() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let noisy = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((noisy.r2 - 0.64).abs() < 1e-12);
    }

    #[test]
    fn histograms() {
        assert_eq!(top_bits_histogram([0u64, 0xff, 0x80], 8, 1), vec![1, 2]);
        assert_eq!(low_bits_histogram([0u64, 5, 7, 3], 2), vec![1, 1, 0, 2]);
    }
}
