//! Label-preserving augmentation: waveform stretch + noise, and
//! time/frequency masking of spectrograms.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, CANONICAL_SECONDS};
use crate::dsp::MelSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub stretch_prob: f64,
    pub stretch_min: f64,
    pub stretch_max: f64,
    pub noise_prob: f64,
    /// Standard deviation of added Gaussian noise, in full-scale units.
    pub noise_sigma: f64,
    pub time_masks: (usize, usize),
    pub time_mask_max: usize,
    pub freq_masks: (usize, usize),
    pub freq_mask_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            stretch_prob: 0.5,
            stretch_min: 0.8,
            stretch_max: 1.2,
            noise_prob: 0.5,
            noise_sigma: 0.005,
            time_masks: (1, 2),
            time_mask_max: 20,
            freq_masks: (1, 2),
            freq_mask_max: 16,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..Self::default() }
    }
}

/// Play `clip` `factor` times faster: `n` samples become `n / factor`
/// (factor quantized to 0.01 so resampling stays on a short polyphase
/// table).
pub fn stretch(clip: &AudioClip, factor: f64) -> AudioClip {
    let rate = clip.sample_rate_hz();
    let step = (rate / 100).max(1);
    let src = ((rate as f64 * factor / step as f64).round() as u32).max(1) * step;
    let relabeled = clip.with_rate(src);
    audio::resample(&relabeled, rate).expect("positive rates")
}

/// Random stretch (then back to canonical length) and random Gaussian noise,
/// each with its configured probability.
pub fn augment_waveform<R: Rng + ?Sized>(clip: &AudioClip, rng: &mut R, cfg: &AugmentConfig) -> AudioClip {
    let mut out = clip.clone();
    if rng.random::<f64>() < cfg.stretch_prob {
        let factor = rng.random_range(cfg.stretch_min..=cfg.stretch_max);
        out = audio::fix_length(&stretch(&out, factor), CANONICAL_SECONDS);
    }
    if rng.random::<f64>() < cfg.noise_prob && cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
        let noisy = out.samples().iter().map(|&s| (s as f64 + normal.sample(rng)).clamp(-1.0, 1.0) as f32).collect();
        out = out.with_samples(noisy);
    }
    out
}

/// Zero `width` frames starting at `start` (clipped to the spectrogram).
pub fn time_mask(spec: &mut MelSpec, start: usize, width: usize) {
    let end = (start + width).min(spec.cols);
    for r in 0..spec.rows {
        for c in start.min(end)..end {
            spec.set(r, c, 0.0);
        }
    }
}

/// Zero `width` mel bands starting at `start`.
pub fn freq_mask(spec: &mut MelSpec, start: usize, width: usize) {
    let end = (start + width).min(spec.rows);
    for r in start.min(end)..end {
        for c in 0..spec.cols {
            spec.set(r, c, 0.0);
        }
    }
}

fn random_masks<R: Rng + ?Sized>(
    rng: &mut R,
    count: (usize, usize),
    max_width: usize,
    extent: usize,
) -> Vec<(usize, usize)> {
    if count.1 == 0 || max_width == 0 || extent == 0 {
        return Vec::new();
    }
    let n = rng.random_range(count.0..=count.1);
    (0..n)
        .map(|_| {
            let width = rng.random_range(1..=max_width.min(extent));
            let start = rng.random_range(0..=extent - width);
            (start, width)
        })
        .collect()
}

/// Time and frequency masking; masked cells take 0, the midpoint of the
/// normalized range.
pub fn augment_spec<R: Rng + ?Sized>(spec: &MelSpec, rng: &mut R, cfg: &AugmentConfig) -> MelSpec {
    let mut out = spec.clone();
    for (start, width) in random_masks(rng, cfg.time_masks, cfg.time_mask_max, spec.cols) {
        time_mask(&mut out, start, width);
    }
    for (start, width) in random_masks(rng, cfg.freq_masks, cfg.freq_mask_max, spec.rows) {
        freq_mask(&mut out, start, width);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone() -> AudioClip {
        AudioClip::new((0..48000).map(|i| 0.5 * (i as f32 * 0.05).sin()).collect(), 16000).unwrap()
    }

    fn spec() -> MelSpec {
        MelSpec { rows: 128, cols: 188, values: vec![0.5; 128 * 188], normalized: true, params: FeatureParams::default() }
    }

    #[test]
    fn stretch_length_arithmetic() {
        let out = stretch(&tone(), 1.2);
        assert_eq!(out.len(), 40000);
        assert_eq!(out.sample_rate_hz(), 16000);
        let fixed = audio::fix_length(&out, CANONICAL_SECONDS);
        assert_eq!(fixed.len(), 48000);
        assert!(fixed.samples()[40000..].iter().all(|&s| s == 0.0));
        assert_eq!(stretch(&tone(), 0.8).len(), 60000);
    }

    #[test]
    fn no_op_branches_leave_clip_unchanged() {
        let cfg = AugmentConfig { stretch_prob: 0.0, noise_prob: 0.0, ..Default::default() };
        let clip = tone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment_waveform(&clip, &mut rng, &cfg), clip);
        assert_eq!(augment_waveform(&clip, &mut rng, &cfg), clip);
    }

    #[test]
    fn noise_branch_statistics() {
        let cfg = AugmentConfig { stretch_prob: 0.0, noise_prob: 1.0, ..Default::default() };
        let clip = tone();
        let out = augment_waveform(&clip, &mut ChaCha8Rng::seed_from_u64(2), &cfg);
        let diff: Vec<f64> = out.samples().iter().zip(clip.samples()).map(|(a, b)| (a - b) as f64).collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let std = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diff.len() - 1) as f64).sqrt();
        assert!((std - 0.005).abs() < 0.001, "std {std}");
        assert!(out.samples().iter().all(|s| (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn stretched_output_is_canonical() {
        let cfg = AugmentConfig { stretch_prob: 1.0, noise_prob: 0.0, ..Default::default() };
        for seed in 0..4 {
            let out = augment_waveform(&tone(), &mut ChaCha8Rng::seed_from_u64(seed), &cfg);
            assert_eq!(out.len(), 48000);
        }
    }

    #[test]
    fn masks() {
        let mut s = spec();
        time_mask(&mut s, 50, 20);
        for r in 0..128 {
            assert!((50..70).all(|c| s.get(r, c) == 0.0));
            assert_eq!(s.get(r, 49), 0.5);
            assert_eq!(s.get(r, 70), 0.5);
        }
        let once = s.clone();
        time_mask(&mut s, 50, 20);
        assert_eq!(s, once);
        freq_mask(&mut s, 120, 16);
        assert!((0..188).all(|c| s.get(127, c) == 0.0));
    }

    #[test]
    fn zero_masks_is_identity() {
        let cfg = AugmentConfig { time_masks: (0, 0), freq_masks: (0, 0), ..Default::default() };
        assert_eq!(augment_spec(&spec(), &mut ChaCha8Rng::seed_from_u64(0), &cfg), spec());
    }

    #[test]
    fn default_masks_respect_bounds() {
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let out = augment_spec(&spec(), &mut ChaCha8Rng::seed_from_u64(seed), &cfg);
            let zero_cols = (0..188).filter(|&c| (0..128).all(|r| out.get(r, c) == 0.0)).count();
            let zero_rows = (0..128).filter(|&r| (0..188).all(|c| out.get(r, c) == 0.0)).count();
            assert!((1..=40).contains(&zero_cols), "{zero_cols}");
            assert!((1..=32).contains(&zero_rows), "{zero_rows}");
        }
    }
}
