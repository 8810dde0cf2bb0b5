use rand::Rng;

use super::{DataError, SequenceClip};

/// Indices kept when thinning a `src_hz` stream to `dst_hz` by a fixed stride.
pub fn temporal_downsample(timestamps: &[f64], src_hz: f64, dst_hz: f64) -> Result<Vec<usize>, DataError> {
    if !(dst_hz > 0.0) || !dst_hz.is_finite() {
        return Err(DataError::InvalidRate(format!("target rate {dst_hz} must be positive")));
    }
    if !(src_hz > 0.0) || dst_hz > src_hz {
        return Err(DataError::InvalidRate(format!(
            "target rate {dst_hz} exceeds source rate {src_hz}"
        )));
    }
    if let Some(i) = timestamps.windows(2).position(|p| p[1] <= p[0]) {
        return Err(DataError::NonMonotonicTimestamps { sequence: String::new(), index: i + 1 });
    }
    let stride = ((src_hz / dst_hz).round() as usize).max(1);
    Ok((0..timestamps.len()).step_by(stride).collect())
}

/// `anchor, anchor + gap, ..., anchor + queue_len * gap`.
pub fn clip_indices(anchor: usize, gap: usize, queue_len: usize) -> Vec<usize> {
    (0..=queue_len).map(|k| anchor + k * gap).collect()
}

/// Sub-clip at the given frame indices.
pub fn select_frames(seq: &SequenceClip, indices: &[usize]) -> Result<SequenceClip, DataError> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= seq.len()) {
        return Err(DataError::SequenceTooShort { needed: bad + 1, got: seq.len() });
    }
    Ok(SequenceClip {
        sequence_id: seq.sequence_id.clone(),
        frames: indices.iter().map(|&i| seq.frames[i].clone()).collect(),
        masks: indices.iter().map(|&i| seq.masks[i].clone()).collect(),
        is_training_clip: seq.is_training_clip,
    })
}

/// Draw one gap from `intervals` and a valid anchor, returning `queue_len + 1` frames.
pub fn sample_training_clip(
    seq: &SequenceClip,
    queue_len: usize,
    intervals: &[usize],
    rng: &mut impl Rng,
) -> Result<SequenceClip, DataError> {
    let Some(&max_gap) = intervals.iter().max() else {
        return Err(DataError::InvalidClip("no sampling intervals".into()));
    };
    if intervals.contains(&0) {
        return Err(DataError::InvalidClip("sampling intervals must be positive".into()));
    }
    let needed = queue_len * max_gap + 1;
    if seq.len() < needed {
        return Err(DataError::SequenceTooShort { needed, got: seq.len() });
    }
    let gap = intervals[rng.random_range(0..intervals.len())];
    let anchor = rng.random_range(0..=seq.len() - 1 - queue_len * gap);
    select_frames(seq, &clip_indices(anchor, gap, queue_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Frame;
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn counting_clip(n: usize) -> SequenceClip {
        SequenceClip {
            sequence_id: "c".into(),
            frames: (0..n)
                .map(|i| Frame { image: Tensor::full(&[1, 2, 2], i as f32), timestamp: i as f64 * 0.4 })
                .collect(),
            masks: (0..n).map(|_| Tensor::zeros(&[2, 2])).collect(),
            is_training_clip: true,
        }
    }

    fn stamps(n: usize, hz: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 / hz).collect()
    }

    #[test]
    fn fifty_hz_to_two_and_a_half() {
        assert_eq!(temporal_downsample(&stamps(100, 50.0), 50.0, 2.5).unwrap(), [0, 20, 40, 60, 80]);
    }

    #[test]
    fn equal_rates_keep_everything() {
        assert_eq!(temporal_downsample(&stamps(6, 10.0), 10.0, 10.0).unwrap(), [0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn stride_three_over_seven() {
        assert_eq!(temporal_downsample(&stamps(7, 3.0), 3.0, 1.0).unwrap(), [0, 3, 6]);
    }

    #[test]
    fn bad_rates_are_errors() {
        assert!(matches!(temporal_downsample(&stamps(4, 1.0), 1.0, 0.0), Err(DataError::InvalidRate(_))));
        assert!(matches!(temporal_downsample(&stamps(4, 1.0), 1.0, -2.0), Err(DataError::InvalidRate(_))));
        assert!(temporal_downsample(&stamps(4, 1.0), 1.0, 2.0).is_err());
        assert!(temporal_downsample(&[0.0, 1.0, 1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn unit_interval_gives_consecutive_frames() {
        let seq = counting_clip(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clip = sample_training_clip(&seq, 3, &[1], &mut rng).unwrap();
        let idx: Vec<usize> = clip.frames.iter().map(|f| f.image.data()[0] as usize).collect();
        assert_eq!(idx.len(), 4);
        assert!(idx.windows(2).all(|p| p[1] == p[0] + 1));
    }

    #[test]
    fn gap_two_from_anchor_zero() {
        assert_eq!(clip_indices(0, 2, 2), [0, 2, 4]);
        // Length 5 with gap 2 and queue 2 admits only anchor 0.
        let seq = counting_clip(5);
        let clip = sample_training_clip(&seq, 2, &[2], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(clip.timestamps(), [0.0, 0.8, 1.6]);
    }

    #[test]
    fn short_sequences_are_rejected() {
        let seq = counting_clip(12);
        let err = sample_training_clip(&seq, 3, &[1, 4], &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, DataError::SequenceTooShort { needed: 13, got: 12 }));
        assert!(sample_training_clip(&seq, 3, &[], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn gaps_are_drawn_uniformly() {
        let seq = counting_clip(20);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let clip = sample_training_clip(&seq, 3, &[1, 2, 3, 4], &mut rng).unwrap();
            let gap = (clip.frames[1].image.data()[0] - clip.frames[0].image.data()[0]) as usize;
            counts[gap] += 1;
        }
        for &c in &counts[1..] {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn clips_have_uniform_gaps(seed in 0u64..1000, queue in 1usize..5, n in 20usize..40) {
            let seq = counting_clip(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clip = sample_training_clip(&seq, queue, &[1, 2, 3, 4], &mut rng).unwrap();
            prop_assert_eq!(clip.len(), queue + 1);
            let ts = clip.timestamps();
            prop_assert!(ts.windows(2).all(|p| p[1] > p[0]));
            let idx: Vec<f32> = clip.frames.iter().map(|f| f.image.data()[0]).collect();
            let g = idx[1] - idx[0];
            prop_assert!(idx.windows(2).all(|p| p[1] - p[0] == g));
        }
    }
}
