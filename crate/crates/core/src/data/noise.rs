//! Environmental-noise bank and SNR-controlled mixing.

use std::path::Path;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::audio::{self, AudioClip, CANONICAL_RATE_HZ};

pub const NOISE_CATEGORIES: [&str; 5] = ["bus", "metro", "cafe", "kitchen", "office"];

/// How the mixing SNR is chosen for each utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrPolicy {
    /// No noise at all.
    Clean,
    Fixed(f64),
    /// Uniform draw from a list of dB values.
    Choice(Vec<f64>),
}

impl Default for SnrPolicy {
    fn default() -> Self {
        SnrPolicy::Choice(vec![5.0, 10.0, 15.0, 20.0])
    }
}

impl SnrPolicy {
    /// SNR for the next utterance; `+∞` means clean.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            SnrPolicy::Clean => f64::INFINITY,
            SnrPolicy::Fixed(db) => *db,
            SnrPolicy::Choice(v) => *v.choose(rng).unwrap_or(&f64::INFINITY),
        }
    }
}

/// Mixing result with the quantities needed to verify the SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct MixOutcome {
    pub clip: AudioClip,
    /// Gain applied to the noise chunk.
    pub gain: f64,
    pub chunk_start: usize,
    /// Scaled noise as added (before clamping the sum).
    pub scaled_noise: Vec<f64>,
}

/// Add a random equal-length chunk of `noise`, scaled so that
/// `10·log10(P_signal / P_noise) = snr_db`, then clamp to `[-1, 1]`.
///
/// `snr_db = +∞` returns the clip unchanged; a silent clip gets the noise
/// chunk at unit gain.
pub fn mix_noise<R: Rng + ?Sized>(clip: &AudioClip, noise: &AudioClip, snr_db: f64, rng: &mut R) -> Result<AudioClip> {
    Ok(mix_noise_detailed(clip, noise, snr_db, rng)?.clip)
}

pub fn mix_noise_detailed<R: Rng + ?Sized>(
    clip: &AudioClip,
    noise: &AudioClip,
    snr_db: f64,
    rng: &mut R,
) -> Result<MixOutcome> {
    if clip.sample_rate_hz() != noise.sample_rate_hz() {
        return Err(DataError::RateMismatch { clip: clip.sample_rate_hz(), noise: noise.sample_rate_hz() });
    }
    if noise.len() < clip.len() {
        return Err(DataError::NoiseTooShort { noise: noise.len(), clip: clip.len() });
    }
    if snr_db == f64::INFINITY {
        return Ok(MixOutcome { clip: clip.clone(), gain: 0.0, chunk_start: 0, scaled_noise: vec![0.0; clip.len()] });
    }
    let start = rng.random_range(0..=noise.len() - clip.len());
    let chunk = &noise.samples()[start..start + clip.len()];
    let p_noise = chunk.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / chunk.len().max(1) as f64;
    let p_signal = clip.power();
    let gain = if p_signal == 0.0 {
        1.0
    } else if p_noise == 0.0 {
        0.0
    } else {
        (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
    };
    let scaled_noise: Vec<f64> = chunk.iter().map(|&s| s as f64 * gain).collect();
    let samples = clip
        .samples()
        .iter()
        .zip(&scaled_noise)
        .map(|(&s, &n)| (s as f64 + n).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(MixOutcome { clip: clip.with_samples(samples), gain, chunk_start: start, scaled_noise })
}

/// Noise clips per environment category, all at 16 kHz.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseBank {
    pub categories: IndexMap<String, Vec<AudioClip>>,
}

impl NoiseBank {
    pub fn get(&self, category: &str) -> Result<&[AudioClip]> {
        self.categories
            .get(category)
            .filter(|v| !v.is_empty())
            .map(Vec::as_slice)
            .ok_or_else(|| DataError::MissingCategory(category.to_string()))
    }

    pub fn require(&self, categories: &[String]) -> Result<()> {
        categories.iter().try_for_each(|c| self.get(c).map(|_| ()))
    }

    /// A random clip of `category` long enough for `len` samples.
    pub fn pick<R: Rng + ?Sized>(&self, category: &str, len: usize, rng: &mut R) -> Result<&AudioClip> {
        let clips = self.get(category)?;
        let long: Vec<&AudioClip> = clips.iter().filter(|c| c.len() >= len).collect();
        match long.choose(rng) {
            Some(c) => Ok(c),
            None => {
                let longest = clips.iter().map(AudioClip::len).max().unwrap_or(0);
                Err(DataError::NoiseTooShort { noise: longest, clip: len })
            }
        }
    }
}

/// Read `<root>/<category>/*.wav` for each category, resampled to 16 kHz.
pub fn build_noise_bank(root: &Path, categories: &[String]) -> Result<NoiseBank> {
    let mut bank = NoiseBank::default();
    for cat in categories {
        let dir = root.join(cat);
        let mut files: Vec<_> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
                .collect(),
            Err(_) => return Err(DataError::MissingCategory(cat.clone())),
        };
        if files.is_empty() {
            return Err(DataError::MissingCategory(cat.clone()));
        }
        files.sort();
        let clips = files
            .into_iter()
            .map(|path| {
                audio::read_wav(&path)
                    .and_then(|c| audio::resample(&c, CANONICAL_RATE_HZ))
                    .map_err(|source| DataError::Audio { path, source })
            })
            .collect::<Result<Vec<_>>>()?;
        bank.categories.insert(cat.clone(), clips);
    }
    Ok(bank)
}

/// Synthetic stand-in bank: one clip per category of low-passed noise with
/// category-specific color and modulation.
pub fn synth_noise_bank(categories: &[&str], seconds: f64, seed: u64) -> NoiseBank {
    let n = (seconds * CANONICAL_RATE_HZ as f64).round() as usize;
    let mut bank = NoiseBank::default();
    for (k, cat) in categories.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::sub_seed(seed, cat));
        // one-pole low-pass coefficient and amplitude-modulation rate
        let a = 0.5 + 0.1 * k as f64;
        let am_hz = 0.5 + k as f64;
        let mut y = 0.0f64;
        let samples = (0..n)
            .map(|i| {
                let white: f64 = rng.random_range(-1.0..1.0);
                y = a * y + (1.0 - a) * white;
                let t = i as f64 / CANONICAL_RATE_HZ as f64;
                (0.3 * y * (1.0 + 0.5 * (2.0 * std::f64::consts::PI * am_hz * t).sin())) as f32
            })
            .collect();
        bank.categories.insert(cat.to_string(), vec![AudioClip::new(samples, CANONICAL_RATE_HZ).expect("finite")]);
    }
    bank
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        AudioClip::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 16000).unwrap()
    }

    #[test]
    fn snr_formula() {
        // P_signal = 0.01 for a constant 0.1 signal
        let clip = AudioClip::new(vec![0.1; 1000], 16000).unwrap();
        let out = mix_noise_detailed(&clip, &noise(5000), 10.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p: f64 = out.scaled_noise.iter().map(|v| v * v).sum::<f64>() / 1000.0;
        assert!((p - 0.001).abs() < 1e-9, "{p}");
        assert_eq!(out.clip.len(), 1000);
    }

    #[test]
    fn clean_and_silent_cases() {
        let clip = AudioClip::new(vec![0.2; 100], 16000).unwrap();
        let n = noise(300);
        assert_eq!(mix_noise(&clip, &n, f64::INFINITY, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), clip);
        let silent = AudioClip::silence(100, 16000);
        let out = mix_noise_detailed(&silent, &n, 10.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.gain, 1.0);
        assert_eq!(out.clip.samples(), &n.samples()[out.chunk_start..out.chunk_start + 100]);
    }

    #[test]
    fn errors() {
        let clip = AudioClip::silence(100, 16000);
        assert!(matches!(mix_noise(&clip, &noise(50), 5.0, &mut ChaCha8Rng::seed_from_u64(0)), Err(DataError::NoiseTooShort { .. })));
        let other = AudioClip::silence(200, 8000);
        assert!(matches!(mix_noise(&clip, &other, 5.0, &mut ChaCha8Rng::seed_from_u64(0)), Err(DataError::RateMismatch { .. })));
    }

    #[test]
    fn bank_from_directories() {
        let dir = tempfile::tempdir().unwrap();
        let cats: Vec<String> = NOISE_CATEGORIES.iter().map(|s| s.to_string()).collect();
        for c in &cats {
            std::fs::create_dir(dir.path().join(c)).unwrap();
            audio::write_wav(&dir.path().join(c).join("ch01.wav"), &AudioClip::new(vec![0.1; 441], 44100).unwrap()).unwrap();
        }
        let bank = build_noise_bank(dir.path(), &cats).unwrap();
        assert_eq!(bank.categories.len(), 5);
        assert_eq!(bank.get("cafe").unwrap()[0].sample_rate_hz(), 16000);
        assert_eq!(bank.get("cafe").unwrap()[0].len(), 160);
        std::fs::create_dir(dir.path().join("empty")).unwrap();
        assert!(matches!(build_noise_bank(dir.path(), &["empty".into()]), Err(DataError::MissingCategory(_))));
        assert!(matches!(build_noise_bank(dir.path(), &["nowhere".into()]), Err(DataError::MissingCategory(_))));
    }

    #[test]
    fn synthetic_bank_duration() {
        let bank = synth_noise_bank(&NOISE_CATEGORIES, 300.0, 1);
        assert_eq!(bank.categories.len(), 5);
        assert_eq!(bank.get("metro").unwrap()[0].len(), 4_800_000);
    }

    #[test]
    fn policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(SnrPolicy::Clean.draw(&mut rng), f64::INFINITY);
        assert_eq!(SnrPolicy::Fixed(3.0).draw(&mut rng), 3.0);
        for _ in 0..20 {
            assert!([5.0, 10.0, 15.0, 20.0].contains(&SnrPolicy::default().draw(&mut rng)));
        }
    }
}
