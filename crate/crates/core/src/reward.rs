//! Reward algebra: the three unclipped reward strategies, moving-average
//! clipping, and the per-sample shaped reward.

use crate::error::{Error, Result};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardStrategy {
    /// Mean validation performance; assumes a pre-selected clean validation
    /// set and ignores controller scores.
    FixedCleanAvg,
    /// Mean of per-sample metric values weighted by controller scores.
    Weighted,
    /// Mean over the highest-scored `floor((1 - s_rej) * M)` samples.
    Selective,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub strategy: RewardStrategy,
    /// Validation-set rejection ratio for the selective strategy.
    pub s_rej: f64,
    /// Moving-average coefficient for reward clipping.
    pub alpha_r: f64,
    /// Shaping weight between the clipped task reward (phi = 1) and the
    /// frozen task-agnostic scores (phi = 0).
    pub phi: f64,
    /// Ablation switch: keep the lowest-scored samples instead of the
    /// highest-scored ones in the selective strategy.
    pub keep_lowest: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            strategy: RewardStrategy::Weighted,
            s_rej: 0.0,
            alpha_r: 0.9,
            phi: 1.0,
            keep_lowest: false,
        }
    }
}

/// Running clip baseline. After the first observation the baseline is a
/// convex combination of every observed unclipped reward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardState<F: Real = f64> {
    pub baseline: Option<F>,
}

impl<F: Real> RewardState<F> {
    pub fn new() -> Self {
        RewardState { baseline: None }
    }
}

/// Indices kept by the selective strategy: the lowest-scored `s_rej`
/// fraction is dropped (or the highest-scored, with `keep_lowest`), ties
/// broken by index ascending, and the kept set is returned in index order.
pub fn selective_kept_indices<F: Real>(
    scores: &[F],
    s_rej: f64,
    keep_lowest: bool,
) -> Result<Vec<usize>> {
    let m = scores.len();
    let m_prime = ((1.0 - s_rej) * m as f64).floor() as usize;
    if m_prime == 0 {
        return Err(Error::EmptyValidationSet);
    }
    let mut order: Vec<usize> = (0..m).collect();
    // removal order: lowest score first (or highest, under the ablation flag)
    order.sort_by(|&a, &b| {
        let cmp = scores[a].partial_cmp(&scores[b]).expect("finite scores");
        let cmp = if keep_lowest { cmp.reverse() } else { cmp };
        cmp.then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[m - m_prime..].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Unclipped reward for one validation pass. `losses` are the per-sample
/// metric values; `scores` are required by the weighted and selective
/// strategies.
pub fn unclipped_reward<F: Real>(
    strategy: RewardStrategy,
    losses: &[F],
    scores: Option<&[F]>,
    config: &RewardConfig,
) -> Result<F> {
    if losses.is_empty() {
        return Err(Error::EmptyInput);
    }
    let m = F::real(losses.len() as f64);
    match strategy {
        RewardStrategy::FixedCleanAvg => {
            let mut s = F::zero();
            for &l in losses {
                s += l;
            }
            Ok(-(s / m))
        }
        RewardStrategy::Weighted => {
            let scores = scores.ok_or_else(|| {
                Error::Numerical("weighted reward requires controller scores".into())
            })?;
            if scores.len() != losses.len() {
                return Err(Error::Shape(format!(
                    "{} losses but {} scores",
                    losses.len(),
                    scores.len()
                )));
            }
            let mut s = F::zero();
            for (&l, &h) in losses.iter().zip(scores) {
                s += l * h;
            }
            Ok(-(s / m))
        }
        RewardStrategy::Selective => {
            let scores = scores.ok_or_else(|| {
                Error::Numerical("selective reward requires controller scores".into())
            })?;
            if scores.len() != losses.len() {
                return Err(Error::Shape(format!(
                    "{} losses but {} scores",
                    losses.len(),
                    scores.len()
                )));
            }
            let kept = selective_kept_indices(scores, config.s_rej, config.keep_lowest)?;
            let mut s = F::zero();
            for &i in &kept {
                s += losses[i];
            }
            Ok(-(s / F::real(kept.len() as f64)))
        }
    }
}

/// Moving-average clipping: updates the baseline with the current value and
/// returns the clipped reward. The first observation initializes the
/// baseline to the value itself, so the first clipped reward is exactly 0.
pub fn clip<F: Real>(r_tilde: F, state: &mut RewardState<F>, alpha_r: F) -> F {
    match state.baseline {
        None => {
            state.baseline = Some(r_tilde);
            F::zero()
        }
        Some(old) => {
            let new = alpha_r * old + (F::one() - alpha_r) * r_tilde;
            state.baseline = Some(new);
            r_tilde - new
        }
    }
}

/// Per-sample shaped reward over the concatenated train-batch and validation
/// samples: `phi * r_clipped + (1 - phi) * h_a[i]`. The boundary values are
/// exact: phi = 1 broadcasts the clipped reward, phi = 0 returns the
/// task-agnostic scores verbatim.
pub fn shaped_reward<F: Real>(r_clipped: F, h_a_scores: &[F], phi: F) -> Vec<F> {
    if phi == F::one() {
        return vec![r_clipped; h_a_scores.len()];
    }
    if phi == F::zero() {
        return h_a_scores.to_vec();
    }
    let one = F::one();
    h_a_scores
        .iter()
        .map(|&h| phi * r_clipped + (one - phi) * h)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(strategy: RewardStrategy, s_rej: f64) -> RewardConfig {
        RewardConfig {
            strategy,
            s_rej,
            ..RewardConfig::default()
        }
    }

    #[test]
    fn average_direct_substitution() {
        let r = unclipped_reward(
            RewardStrategy::FixedCleanAvg,
            &[1.0, 2.0, 3.0],
            None,
            &cfg(RewardStrategy::FixedCleanAvg, 0.0),
        )
        .unwrap();
        assert_eq!(r, -2.0);
    }

    #[test]
    fn weighted_direct_substitution() {
        let r = unclipped_reward(
            RewardStrategy::Weighted,
            &[1.0, 2.0],
            Some(&[0.5, 1.0]),
            &cfg(RewardStrategy::Weighted, 0.0),
        )
        .unwrap();
        assert_eq!(r, -1.25);
    }

    #[test]
    fn selective_drops_lowest_scored() {
        // enumeration oracle: over all 3-subsets, the kept set must be the
        // one whose minimum score is maximal (the top-scored subset)
        let losses = [1.0, 4.0, 2.0, 3.0];
        let scores = [0.9, 0.1, 0.5, 0.7];
        let mut best: Option<(Vec<usize>, f64)> = None;
        for a in 0..4 {
            for b in (a + 1)..4 {
                for c in (b + 1)..4 {
                    let subset = vec![a, b, c];
                    let min = subset.iter().map(|&i| scores[i]).fold(f64::MAX, f64::min);
                    if best.as_ref().is_none_or(|(_, m)| min > *m) {
                        best = Some((subset, min));
                    }
                }
            }
        }
        let oracle = best.unwrap().0;
        let kept = selective_kept_indices(&scores, 0.25, false).unwrap();
        assert_eq!(kept, oracle);
        let r = unclipped_reward(
            RewardStrategy::Selective,
            &losses,
            Some(&scores),
            &cfg(RewardStrategy::Selective, 0.25),
        )
        .unwrap();
        assert_eq!(r, -2.0);
    }

    #[test]
    fn selective_rejecting_everything_errors() {
        let err = unclipped_reward(
            RewardStrategy::Selective,
            &[1.0],
            Some(&[0.5]),
            &cfg(RewardStrategy::Selective, 1.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyValidationSet));
    }

    #[test]
    fn weighted_reduces_to_average_at_unit_scores() {
        let losses = [0.3, 1.7, 0.4, 2.2, 0.9];
        let ones = [1.0; 5];
        let w = unclipped_reward(
            RewardStrategy::Weighted,
            &losses,
            Some(&ones),
            &cfg(RewardStrategy::Weighted, 0.0),
        )
        .unwrap();
        let a = unclipped_reward(
            RewardStrategy::FixedCleanAvg,
            &losses,
            None,
            &cfg(RewardStrategy::FixedCleanAvg, 0.0),
        )
        .unwrap();
        assert_eq!(w, a);
    }

    #[test]
    fn selective_at_zero_rejection_equals_average() {
        let losses = [0.3, 1.7, 0.4, 2.2, 0.9];
        let scores = [0.2, 0.8, 0.5, 0.1, 0.9];
        let s = unclipped_reward(
            RewardStrategy::Selective,
            &losses,
            Some(&scores),
            &cfg(RewardStrategy::Selective, 0.0),
        )
        .unwrap();
        let a = unclipped_reward(
            RewardStrategy::FixedCleanAvg,
            &losses,
            None,
            &cfg(RewardStrategy::FixedCleanAvg, 0.0),
        )
        .unwrap();
        assert_eq!(s, a);
    }

    #[test]
    fn selective_ignores_rejected_losses() {
        let scores = [0.9, 0.1, 0.5, 0.7];
        let cfg = cfg(RewardStrategy::Selective, 0.25);
        let a = unclipped_reward(RewardStrategy::Selective, &[1.0, 4.0, 2.0, 3.0], Some(&scores), &cfg)
            .unwrap();
        let b = unclipped_reward(
            RewardStrategy::Selective,
            &[1.0, 400.0, 2.0, 3.0],
            Some(&scores),
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn keep_lowest_flag_reverses_direction() {
        let scores = [0.9, 0.1, 0.5, 0.7];
        let kept = selective_kept_indices(&scores, 0.25, true).unwrap();
        assert_eq!(kept, vec![1, 2, 3]);
    }

    #[test]
    fn first_clip_is_exactly_zero() {
        let mut state = RewardState::new();
        let r = clip(-2.0, &mut state, 0.9);
        assert_eq!(r, 0.0);
        assert_eq!(state.baseline, Some(-2.0));
    }

    #[test]
    fn clip_direct_substitution() {
        let mut state: RewardState<f64> = RewardState {
            baseline: Some(0.0),
        };
        let r = clip(1.0, &mut state, 0.9);
        assert!((state.baseline.unwrap() - 0.1).abs() < 1e-15);
        assert!((r - 0.9).abs() < 1e-15);
    }

    #[test]
    fn constant_stream_decays_geometrically() {
        // closed form: with baseline b0 and constant stream c,
        // R_t = alpha^(t-1) * R_1 where R_1 = alpha * (c - b0)
        let (b0, c, alpha) = (0.4f64, -1.3, 0.9);
        let mut state = RewardState { baseline: Some(b0) };
        let r1 = clip(c, &mut state, alpha);
        assert!((r1 - alpha * (c - b0)).abs() < 1e-12);
        let mut expected = r1;
        for _ in 0..30 {
            let r = clip(c, &mut state, alpha);
            expected *= alpha;
            assert!((r - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_mean_vanishes_on_stationary_stream() {
        // jittered but stationary rewards: clipped values center on zero
        let mut state = RewardState::new();
        let mut rng_state = 0x243f6a88u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let mut sum = 0.0;
        let n = 1000;
        for _ in 0..n {
            sum += clip(-0.7 + 0.2 * next(), &mut state, 0.9);
        }
        assert!((sum / n as f64).abs() < 0.05);
    }

    #[test]
    fn shaped_boundaries_are_exact() {
        let h_a = [0.25, 0.5, 0.8];
        assert_eq!(shaped_reward(0.37, &h_a, 1.0), vec![0.37; 3]);
        assert_eq!(shaped_reward(0.37, &h_a, 0.0), h_a.to_vec());
    }

    #[test]
    fn shaped_direct_substitution() {
        let r = shaped_reward(0.5f64, &[0.8], 0.9);
        assert!((r[0] - 0.53).abs() < 1e-15);
    }
}
