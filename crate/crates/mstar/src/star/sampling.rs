//! Token-wise adaptive-temperature sampling and moving-average smoothing.

use rand_chacha::ChaCha8Rng;

use crate::nn::{argmax, sample_with_temperature};

/// Per-position confidences and temperatures for one logits block.
///
/// Confidence is the min-max normalization of each position's top-1 logit
/// across the block; a degenerate block (all equal, including length 1)
/// maps to 0.5. Temperature is `alpha - confidence`, floored.
pub fn tokenwise_temperatures(
    logits: &[f32],
    positions: usize,
    vocab: usize,
    alpha: f32,
    temp_floor: f32,
) -> (Vec<f32>, Vec<f32>) {
    assert!(positions > 0, "temperature block must be non-empty");
    assert_eq!(logits.len(), positions * vocab);
    let top1: Vec<f32> = (0..positions)
        .map(|p| {
            logits[p * vocab..(p + 1) * vocab]
                .iter()
                .fold(f32::NEG_INFINITY, |m, &v| m.max(v))
        })
        .collect();
    let lo = top1.iter().fold(f32::INFINITY, |m, &v| m.min(v));
    let hi = top1.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let confidences: Vec<f32> = if hi > lo {
        top1.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; positions]
    };
    let temperatures = confidences
        .iter()
        .map(|&c| (alpha - c).max(temp_floor))
        .collect();
    (confidences, temperatures)
}

/// Sample one token; at the temperature floor the draw degenerates to
/// argmax.
pub fn sample_token(
    logits: &[f32],
    temperature: f32,
    temp_floor: f32,
    rng: &mut ChaCha8Rng,
) -> usize {
    if temperature <= temp_floor {
        argmax(logits)
    } else {
        sample_with_temperature(logits, temperature, rng)
    }
}

/// Centered moving average per channel with edge truncation: windows are
/// shortened at the boundaries instead of padded.
pub fn moving_average_smooth(z: &[f32], t: usize, d: usize, window: usize) -> Vec<f32> {
    assert!(window % 2 == 1, "window must be odd");
    assert!(window <= t.max(1), "window must not exceed the sequence");
    assert_eq!(z.len(), t * d);
    if window == 1 {
        return z.to_vec();
    }
    let half = window / 2;
    let mut out = vec![0.0f32; t * d];
    for i in 0..t {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(t);
        let denom = (hi - lo) as f64;
        for c in 0..d {
            let mut acc = 0.0f64;
            for j in lo..hi {
                acc += z[j * d + c] as f64;
            }
            out[i * d + c] = (acc / denom) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn full_confidence_gives_alpha_minus_one() {
        // alpha = 1.3, confidence 1.0 -> temperature 0.3
        let logits = [5.0, 0.0, 1.0, 0.0]; // top1 = [5, 1] -> conf [1, 0]
        let (conf, temp) = tokenwise_temperatures(&logits, 2, 2, 1.3, 0.05);
        assert_eq!(conf[0], 1.0);
        assert!((temp[0] - 0.3).abs() < 1e-6);
        assert!((temp[1] - 1.3).abs() < 1e-6);
    }

    #[test]
    fn temperatures_non_increasing_in_confidence() {
        let logits: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let (conf, temp) = tokenwise_temperatures(&logits, 8, 5, 1.3, 0.05);
        let mut pairs: Vec<(f32, f32)> = conf.into_iter().zip(temp).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in pairs.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-7);
        }
    }

    #[test]
    fn single_position_block_gets_half_confidence() {
        let logits = [0.2, -1.0, 3.0];
        let (conf, temp) = tokenwise_temperatures(&logits, 1, 3, 1.3, 0.05);
        assert_eq!(conf, vec![0.5]);
        assert!((temp[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn sampling_at_floor_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.1, 0.9, 0.3, 0.89999];
        for _ in 0..100 {
            assert_eq!(sample_token(&logits, 0.05, 0.05, &mut rng), 1);
        }
    }

    #[test]
    fn smoothing_window_one_is_identity() {
        let z = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(moving_average_smooth(&z, 3, 2, 1), z.to_vec());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let z = vec![2.5f32; 10 * 3];
        let out = moving_average_smooth(&z, 10, 3, 5);
        for v in out {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothing_truncated_window_hand_case() {
        // [0, 3, 0] with window 3 -> [1.5, 1, 1.5]
        let z = [0.0, 3.0, 0.0];
        let out = moving_average_smooth(&z, 3, 1, 3);
        assert_eq!(out, vec![1.5, 1.0, 1.5]);
    }

    #[test]
    fn smoothing_preserves_interior_mean_for_full_windows() {
        // For untruncated interior windows the window mean equals the
        // plain average of the covered entries.
        let z: Vec<f32> = (0..9).map(|i| i as f32).collect();
        let out = moving_average_smooth(&z, 9, 1, 3);
        for i in 1..8 {
            let want = (z[i - 1] + z[i] + z[i + 1]) / 3.0;
            assert!((out[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    #[should_panic(expected = "window must be odd")]
    fn even_window_rejected() {
        moving_average_smooth(&[0.0; 8], 4, 2, 2);
    }
}
