//! Perplexity of a draft under an estimator model, and the three-level
//! confidence verdict that decides which guidance goes into the final prompt.

use serde::{Deserialize, Serialize};

pub const HIGH_CONFIDENCE_GUIDANCE: &str =
    "The current implementation and the comments are good, please refer to it and keep these comments.";
pub const MEDIUM_CONFIDENCE_GUIDANCE: &str =
    "The current implementation is somewhat uncertain and comments are reasonable. Please refer to it partially.";
pub const LOW_CONFIDENCE_GUIDANCE: &str =
    "The current implementation is not confidently correct. Please consider regenerating it.";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfidenceError {
    #[error("draft has no tokens to score")]
    EmptyDraft,
    #[error("perplexity must be positive, got {0}")]
    InvalidPerplexity(f64),
    #[error("token/logprob length mismatch ({tokens} tokens, {logprobs} logprobs)")]
    LengthMismatch { tokens: usize, logprobs: usize },
    #[error("log-probability {0} is positive")]
    PositiveLogprob(f64),
}

/// Per-token natural-log probabilities of a continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub estimator_id: String,
}

impl TokenLogProbs {
    pub fn new(tokens: Vec<String>, logprobs: Vec<f64>, estimator_id: impl Into<String>) -> Result<Self, ConfidenceError> {
        if tokens.len() != logprobs.len() {
            return Err(ConfidenceError::LengthMismatch { tokens: tokens.len(), logprobs: logprobs.len() });
        }
        if let Some(&lp) = logprobs.iter().find(|lp| **lp > 0.0 || lp.is_nan()) {
            return Err(ConfidenceError::PositiveLogprob(lp));
        }
        Ok(TokenLogProbs { tokens, logprobs, estimator_id: estimator_id.into() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceLevel {
    Low,
    Medium,
    High,
}

impl ConfidenceLevel {
    pub fn guidance(self) -> &'static str {
        match self {
            ConfidenceLevel::High => HIGH_CONFIDENCE_GUIDANCE,
            ConfidenceLevel::Medium => MEDIUM_CONFIDENCE_GUIDANCE,
            ConfidenceLevel::Low => LOW_CONFIDENCE_GUIDANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVerdict {
    pub ppl: f64,
    pub level: ConfidenceLevel,
    pub guidance: String,
}

/// Bucket boundaries. `high_below` and `low_above` themselves are medium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub high_below: f64,
    pub low_above: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { high_below: 1.3, low_above: 2.0 }
    }
}

/// `exp(-mean(logprobs))`.
pub fn perplexity(tlp: &TokenLogProbs) -> Result<f64, ConfidenceError> {
    if tlp.logprobs.is_empty() {
        return Err(ConfidenceError::EmptyDraft);
    }
    let mean = tlp.logprobs.iter().sum::<f64>() / tlp.logprobs.len() as f64;
    Ok((-mean).exp())
}

pub fn bucket(ppl: f64) -> Result<ConfidenceVerdict, ConfidenceError> {
    bucket_with(ppl, Thresholds::default())
}

pub fn bucket_with(ppl: f64, t: Thresholds) -> Result<ConfidenceVerdict, ConfidenceError> {
    if !(ppl > 0.0) {
        return Err(ConfidenceError::InvalidPerplexity(ppl));
    }
    let level = if ppl < t.high_below {
        ConfidenceLevel::High
    } else if ppl > t.low_above {
        ConfidenceLevel::Low
    } else {
        ConfidenceLevel::Medium
    };
    Ok(ConfidenceVerdict { ppl, level, guidance: level.guidance().to_string() })
}

/// Empirical share of each level over a sample of perplexities.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Calibration {
    pub n: usize,
    pub low: f64,
    pub medium: f64,
    pub high: f64,
}

pub fn calibration(ppls: &[f64], t: Thresholds) -> Calibration {
    let mut counts = [0usize; 3];
    let mut n = 0;
    for &p in ppls {
        if let Ok(v) = bucket_with(p, t) {
            counts[v.level as usize] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Calibration::default();
    }
    let share = |c: usize| c as f64 / n as f64;
    Calibration { n, low: share(counts[0]), medium: share(counts[1]), high: share(counts[2]) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tlp(lps: &[f64]) -> TokenLogProbs {
        TokenLogProbs::new(lps.iter().map(|_| "t".to_string()).collect(), lps.to_vec(), "test").unwrap()
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(&tlp(&[0.0, 0.0, 0.0])).unwrap(), 1.0);
        assert!((perplexity(&tlp(&[0.5f64.ln(); 7])).unwrap() - 2.0).abs() < 1e-12);
        // exp(-(ln 0.9 + ln 0.5 + ln 0.8) / 3) = (0.36)^(-1/3), evaluated with mpmath at 50 digits
        let p = perplexity(&tlp(&[0.9f64.ln(), 0.5f64.ln(), 0.8f64.ln()])).unwrap();
        assert!((p - 1.4057211088362487).abs() < 1e-12, "{p}");
        assert_eq!(perplexity(&tlp(&[])), Err(ConfidenceError::EmptyDraft));
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucket(1.1).unwrap().level, ConfidenceLevel::High);
        assert_eq!(bucket(1.3).unwrap().level, ConfidenceLevel::Medium);
        assert_eq!(bucket(2.0).unwrap().level, ConfidenceLevel::Medium);
        assert_eq!(bucket(2.5).unwrap().level, ConfidenceLevel::Low);
        assert_eq!(bucket(2.5).unwrap().guidance, LOW_CONFIDENCE_GUIDANCE);
        assert!(matches!(bucket(0.0), Err(ConfidenceError::InvalidPerplexity(_))));
        assert!(matches!(bucket(f64::NAN), Err(ConfidenceError::InvalidPerplexity(_))));
    }

    #[test]
    fn rejects_malformed_logprobs() {
        assert!(TokenLogProbs::new(vec!["a".into()], vec![], "x").is_err());
        assert!(TokenLogProbs::new(vec!["a".into()], vec![0.1], "x").is_err());
    }

    #[test]
    fn calibration_shares() {
        let c = calibration(&[1.0, 1.5, 1.6, 3.0, 4.0], Thresholds::default());
        assert_eq!(c.n, 5);
        assert!((c.high - 0.2).abs() < 1e-12 && (c.medium - 0.4).abs() < 1e-12 && (c.low - 0.4).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn strictly_decreasing_in_each_logprob(lps in prop::collection::vec(-5.0f64..-0.01, 1..20), idx in 0usize..20, bump in 0.001f64..0.01) {
            let i = idx % lps.len();
            let mut higher = lps.clone();
            higher[i] += bump;
            prop_assert!(perplexity(&tlp(&higher)).unwrap() < perplexity(&tlp(&lps)).unwrap());
        }

        #[test]
        fn duplicating_sequence_keeps_ppl(lps in prop::collection::vec(-5.0f64..=0.0, 1..30)) {
            let doubled: Vec<f64> = lps.iter().chain(lps.iter()).copied().collect();
            let a = perplexity(&tlp(&lps)).unwrap();
            let b = perplexity(&tlp(&doubled)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a);
            prop_assert!(a >= 1.0);
        }

        #[test]
        fn bucket_is_a_total_partition(ppl in 1e-6f64..1e6) {
            let v = bucket(ppl).unwrap();
            let expected = if ppl < 1.3 { ConfidenceLevel::High } else if ppl <= 2.0 { ConfidenceLevel::Medium } else { ConfidenceLevel::Low };
            prop_assert_eq!(v.level, expected);
        }
    }
}
