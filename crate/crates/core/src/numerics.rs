//! Probability-vector primitives: stable log-softmax, Hellinger distance,
//! Jensen-Shannon divergence, greedy and nucleus token selection.
//!
//! All math is in `f64`. Masked vocabulary entries are negative infinity in
//! logit space and exact zero in probability space; `NaN` and positive
//! infinity are rejected at construction.

use rand::Rng;
use thiserror::Error;

/// Tolerance for validating that a probability vector sums to one.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("empty support: every logit entry is masked")]
    EmptySupport,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid logits: {0}")]
    InvalidLogits(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid sampling configuration: {0}")]
    InvalidConfig(String),
}

/// Unnormalized vocabulary-length score vector.
///
/// Entries are finite except for masked entries, which are `-inf` sentinels.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        if values.is_empty() {
            return Err(NumericsError::InvalidLogits("empty vector".into()));
        }
        for (i, &v) in values.iter().enumerate() {
            if v.is_nan() || v == f64::INFINITY {
                return Err(NumericsError::InvalidLogits(format!(
                    "entry {i} is {v}; only finite values and -inf masks are allowed"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Exponentiates a log-probability vector into a distribution.
    ///
    /// Only meaningful on the output of [`log_softmax`]; masked entries
    /// become exact zeros.
    pub fn to_probs(&self) -> Result<ProbDistribution, NumericsError> {
        ProbDistribution::new(self.values.iter().map(|&v| v.exp()).collect())
    }
}

/// Vocabulary-length probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDistribution {
    values: Vec<f64>,
}

impl ProbDistribution {
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        if values.is_empty() {
            return Err(NumericsError::InvalidDistribution("empty vector".into()));
        }
        let mut sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(NumericsError::InvalidDistribution(format!(
                    "entry {i} is {v}"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(NumericsError::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1 within {PROB_SUM_TOLERANCE}"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Numerically stable log-softmax.
///
/// Shift-invariant: adding a constant to every input leaves the output
/// unchanged up to rounding. `-inf` masks stay `-inf`. Fails with
/// [`NumericsError::EmptySupport`] when every entry is masked.
pub fn log_softmax(logits: &LogitVector) -> Result<LogitVector, NumericsError> {
    let xs = logits.values();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::EmptySupport);
    }
    let log_sum: f64 = xs
        .iter()
        .filter(|v| v.is_finite())
        .map(|&v| (v - max).exp())
        .sum::<f64>()
        .ln();
    let out = xs
        .iter()
        .map(|&v| {
            if v == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                v - max - log_sum
            }
        })
        .collect();
    LogitVector::new(out)
}

fn check_same_len(p: &ProbDistribution, q: &ProbDistribution) -> Result<(), NumericsError> {
    if p.len() != q.len() {
        return Err(NumericsError::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

/// Hellinger distance `(1/sqrt(2)) * ||sqrt(p) - sqrt(q)||_2`, in `[0, 1]`.
pub fn hellinger(p: &ProbDistribution, q: &ProbDistribution) -> Result<f64, NumericsError> {
    check_same_len(p, q)?;
    let sq_sum: f64 = p
        .values()
        .iter()
        .zip(q.values())
        .map(|(&a, &b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok((sq_sum / 2.0).sqrt().clamp(0.0, 1.0))
}

/// Jensen-Shannon divergence with natural logarithm, in `[0, ln 2]`.
///
/// Uses the convention `0 * ln(0/x) = 0`.
pub fn jensen_shannon(p: &ProbDistribution, q: &ProbDistribution) -> Result<f64, NumericsError> {
    check_same_len(p, q)?;
    let mut acc = 0.0;
    for (&a, &b) in p.values().iter().zip(q.values()) {
        let m = 0.5 * (a + b);
        let term_p = if a > 0.0 { a * (a / m).ln() } else { 0.0 };
        let term_q = if b > 0.0 { b * (b / m).ln() } else { 0.0 };
        acc += term_p + term_q;
    }
    Ok((0.5 * acc).max(0.0))
}

/// Index of the largest probability; ties break toward the lowest index.
pub fn greedy_pick(p: &ProbDistribution) -> usize {
    let mut best = 0;
    for (i, &v) in p.values().iter().enumerate() {
        if v > p.values()[best] {
            best = i;
        }
    }
    best
}

/// Nucleus (top-p) sampling with temperature.
///
/// Temperature rescales log-probabilities before truncation. The nucleus is
/// the smallest probability-sorted prefix whose cumulative mass reaches
/// `top_p` (ties in probability ordered by index); the draw renormalizes
/// over that prefix. Identical `rng` state and inputs give identical output.
pub fn nucleus_sample<R: Rng + ?Sized>(
    p: &ProbDistribution,
    top_p: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<usize, NumericsError> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(NumericsError::InvalidConfig(format!(
            "top_p must be in (0, 1], got {top_p}"
        )));
    }
    if !(temperature > 0.0) {
        return Err(NumericsError::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }

    let weights: Vec<f64> = if temperature == 1.0 {
        p.values().to_vec()
    } else {
        let scaled: Vec<f64> = p
            .values()
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    v.ln() / temperature
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let logits = LogitVector::new(scaled)?;
        log_softmax(&logits)?.to_probs()?.values().to_vec()
    };

    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    // Smallest prefix with cumulative mass >= top_p, never including
    // zero-mass entries.
    let mut nucleus = Vec::new();
    let mut mass = 0.0;
    for &idx in &order {
        if weights[idx] <= 0.0 {
            break;
        }
        nucleus.push(idx);
        mass += weights[idx];
        if mass >= top_p {
            break;
        }
    }
    if nucleus.is_empty() {
        return Err(NumericsError::EmptySupport);
    }

    let u: f64 = rng.random::<f64>() * mass;
    let mut cum = 0.0;
    for &idx in &nucleus {
        cum += weights[idx];
        if u < cum {
            return Ok(idx);
        }
    }
    Ok(*nucleus.last().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(values: &[f64]) -> ProbDistribution {
        ProbDistribution::new(values.to_vec()).unwrap()
    }

    fn logits(values: &[f64]) -> LogitVector {
        LogitVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let out = log_softmax(&logits(&[0.0, 0.0])).unwrap();
        let expect = -(2.0f64.ln());
        assert!((out.values()[0] - expect).abs() < 1e-12);
        assert!((out.values()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_survives_large_inputs() {
        let out = log_softmax(&logits(&[1000.0, 1000.0])).unwrap();
        let expect = -(2.0f64.ln());
        assert!((out.values()[0] - expect).abs() < 1e-12);
        assert!((out.values()[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_worked_example() {
        let out = log_softmax(&logits(&[2.0, 0.0])).unwrap();
        assert!((out.values()[0] - (-0.126928)).abs() < 1e-6);
        assert!((out.values()[1] - (-2.126928)).abs() < 1e-6);
    }

    #[test]
    fn log_softmax_exp_sums_to_one() {
        let out = log_softmax(&logits(&[1.5, -3.0, 0.25, 7.0])).unwrap();
        let sum: f64 = out.values().iter().map(|v| v.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_masks_pass_through() {
        let out = log_softmax(&logits(&[0.0, f64::NEG_INFINITY, 1.0])).unwrap();
        assert_eq!(out.values()[1], f64::NEG_INFINITY);
        let sum: f64 = out.values().iter().map(|v| v.exp()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_all_masked_is_error() {
        let v = logits(&[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(log_softmax(&v), Err(NumericsError::EmptySupport)));
    }

    #[test]
    fn log_softmax_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let base: Vec<f64> = (0..16).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let reference = log_softmax(&logits(&base)).unwrap();
            for c in [-50.0, 0.0, 50.0] {
                let shifted: Vec<f64> = base.iter().map(|v| v + c).collect();
                let out = log_softmax(&logits(&shifted)).unwrap();
                for (a, b) in out.values().iter().zip(reference.values()) {
                    assert!((a - b).abs() < 1e-9, "shift {c} changed output");
                }
            }
        }
    }

    #[test]
    fn hellinger_identity_and_disjoint() {
        let p = dist(&[0.3, 0.7]);
        assert_eq!(hellinger(&p, &p).unwrap(), 0.0);
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.0, 1.0]);
        assert!((hellinger(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hellinger_worked_example() {
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.5, 0.5]);
        assert!((hellinger(&a, &b).unwrap() - 0.541196).abs() < 1e-6);
    }

    #[test]
    fn hellinger_length_mismatch() {
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.5, 0.25, 0.25]);
        assert!(matches!(
            hellinger(&a, &b),
            Err(NumericsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn jsd_identity_and_bound() {
        let p = dist(&[0.25, 0.75]);
        assert_eq!(jensen_shannon(&p, &p).unwrap(), 0.0);
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.0, 1.0]);
        let ln2 = 2.0f64.ln();
        assert!((jensen_shannon(&a, &b).unwrap() - ln2).abs() < 1e-12);
    }

    #[test]
    fn jsd_worked_example() {
        let a = dist(&[0.5, 0.5]);
        let b = dist(&[0.25, 0.75]);
        assert!((jensen_shannon(&a, &b).unwrap() - 0.033822).abs() < 1e-6);
    }

    #[test]
    fn distances_symmetric_zero_on_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ln2 = 2.0f64.ln();
        for _ in 0..1000 {
            let n = rng.random_range(2..12usize);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-6).collect();
            let sum: f64 = raw.iter().sum();
            let p = dist(&raw.iter().map(|v| v / sum).collect::<Vec<_>>());
            let raw2: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-6).collect();
            let sum2: f64 = raw2.iter().sum();
            let q = dist(&raw2.iter().map(|v| v / sum2).collect::<Vec<_>>());

            assert_eq!(hellinger(&p, &p).unwrap(), 0.0);
            assert_eq!(jensen_shannon(&q, &q).unwrap(), 0.0);
            let h_pq = hellinger(&p, &q).unwrap();
            let h_qp = hellinger(&q, &p).unwrap();
            assert!((h_pq - h_qp).abs() < 1e-15);
            let j_pq = jensen_shannon(&p, &q).unwrap();
            let j_qp = jensen_shannon(&q, &p).unwrap();
            assert!((j_pq - j_qp).abs() < 1e-15);
            assert!(j_pq <= ln2 + 1e-12);
            assert!(h_pq <= 1.0);
        }
    }

    #[test]
    fn greedy_picks_max_and_breaks_ties_low() {
        assert_eq!(greedy_pick(&dist(&[0.1, 0.7, 0.2])), 1);
        assert_eq!(greedy_pick(&dist(&[0.5, 0.5])), 0);
        assert_eq!(greedy_pick(&dist(&[0.0, 0.0, 1.0, 0.0])), 2);
    }

    #[test]
    fn nucleus_rejects_bad_config() {
        let p = dist(&[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            nucleus_sample(&p, 0.0, 1.0, &mut rng),
            Err(NumericsError::InvalidConfig(_))
        ));
        assert!(matches!(
            nucleus_sample(&p, 0.9, 0.0, &mut rng),
            Err(NumericsError::InvalidConfig(_))
        ));
        assert!(matches!(
            nucleus_sample(&p, 1.5, 1.0, &mut rng),
            Err(NumericsError::InvalidConfig(_))
        ));
    }

    #[test]
    fn nucleus_support_worked_example() {
        // Prefix {0, 1} has mass 0.8 < 0.9, so the nucleus is {0, 1, 2}.
        let p = dist(&[0.5, 0.3, 0.15, 0.05]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..2000 {
            let idx = nucleus_sample(&p, 0.9, 1.0, &mut rng).unwrap();
            assert!(idx <= 2, "index {idx} outside the nucleus");
        }
    }

    #[test]
    fn nucleus_one_hot_returns_hot_index() {
        let p = dist(&[0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for top_p in [0.1, 0.5, 1.0] {
            assert_eq!(nucleus_sample(&p, top_p, 1.0, &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn nucleus_deterministic_given_seed() {
        let p = dist(&[0.4, 0.3, 0.2, 0.1]);
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = nucleus_sample(&p, 0.9, 0.7, &mut a).unwrap();
            let y = nucleus_sample(&p, 0.9, 0.7, &mut b).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn nucleus_full_support_matches_frequencies() {
        // top_p = 1, temperature = 1: empirical frequencies match p within
        // 3-sigma binomial bounds.
        let probs = [0.5, 0.3, 0.15, 0.05];
        let p = dist(&probs);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[nucleus_sample(&p, 1.0, 1.0, &mut rng).unwrap()] += 1;
        }
        for (i, &expected) in probs.iter().enumerate() {
            let sigma = (expected * (1.0 - expected) * n as f64).sqrt();
            let delta = (counts[i] as f64 - expected * n as f64).abs();
            assert!(
                delta <= 3.0 * sigma,
                "token {i}: count {} vs expected {} (3s = {:.1})",
                counts[i],
                expected * n as f64,
                3.0 * sigma
            );
        }
    }

    #[test]
    fn nucleus_support_property_random_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let n = rng.random_range(2..20usize);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            let values: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let p = dist(&values);
            let top_p = 0.5 + rng.random::<f64>() * 0.5;

            // Independent oracle: enumerate the sorted prefix.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
            let mut nucleus = std::collections::HashSet::new();
            let mut mass = 0.0;
            for &idx in &order {
                nucleus.insert(idx);
                mass += values[idx];
                if mass >= top_p {
                    break;
                }
            }

            for _ in 0..100 {
                let idx = nucleus_sample(&p, top_p, 1.0, &mut rng).unwrap();
                assert!(nucleus.contains(&idx));
            }
        }
    }
}
