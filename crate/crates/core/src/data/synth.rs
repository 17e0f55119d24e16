//! Synthetic two-class corpus for download-free runs: chirped "screams" with
//! harmonics and an amplitude peak versus low-band background sounds.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Manifest, Result, SampleRecord, Valence};
use crate::audio::{self, AudioClip, CANONICAL_RATE_HZ, CANONICAL_SECONDS};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthKind {
    /// Rising chirp, roughly 400 → 1400 Hz.
    ScreamNegative,
    /// Falling chirp, roughly 1400 → 400 Hz.
    ScreamPositive,
    /// Low-passed noise plus a slow low tone.
    NonScream,
    /// Digital silence (labeled non-scream).
    Silence,
}

impl SynthKind {
    pub fn is_scream(self) -> bool {
        matches!(self, SynthKind::ScreamNegative | SynthKind::ScreamPositive)
    }

    pub fn valence(self) -> Option<Valence> {
        match self {
            SynthKind::ScreamNegative => Some(Valence::Negative),
            SynthKind::ScreamPositive => Some(Valence::Positive),
            _ => None,
        }
    }
}

fn chirp<R: Rng + ?Sized>(n: usize, rising: bool, rng: &mut R) -> Vec<f64> {
    let sr = CANONICAL_RATE_HZ as f64;
    let total = n as f64 / sr;
    let dur = rng.random_range(1.6..=2.4f64).min(total);
    let onset = rng.random_range(0.0..=(total - dur));
    let lo = 400.0 * rng.random_range(0.9..1.1);
    let hi = 1400.0 * rng.random_range(0.9..1.1);
    let (f0, f1) = if rising { (lo, hi) } else { (hi, lo) };
    let peak = rng.random_range(0.5..0.8);
    let jitter = Normal::new(0.0, 0.005).expect("positive sigma");
    (0..n)
        .map(|i| {
            let t = i as f64 / sr - onset;
            let mut v = jitter.sample(rng);
            if (0.0..dur).contains(&t) {
                let phase = 2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur));
                // hump envelope with its maximum in the middle of the call
                let env = peak * (PI * t / dur).sin().powf(0.7);
                v += env * (0.6 * phase.sin() + 0.3 * (2.0 * phase).sin() + 0.15 * (3.0 * phase).sin());
            }
            v
        })
        .collect()
}

fn background<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let sr = CANONICAL_RATE_HZ as f64;
    let tone_hz = rng.random_range(80.0..250.0);
    let am_hz = rng.random_range(0.3..1.0);
    let level = rng.random_range(0.1..0.25);
    let mut y = 0.0;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let white: f64 = rng.random_range(-1.0..1.0);
            y = 0.97 * y + 0.03 * white;
            let tone = 0.1 * (2.0 * PI * tone_hz * t).sin() * (0.6 + 0.4 * (2.0 * PI * am_hz * t).sin());
            level * 4.0 * y + tone
        })
        .collect()
}

/// One synthetic clip of `seconds` at 16 kHz.
pub fn synth_clip<R: Rng + ?Sized>(kind: SynthKind, seconds: f64, rng: &mut R) -> AudioClip {
    let n = (seconds * CANONICAL_RATE_HZ as f64).round() as usize;
    let samples = match kind {
        SynthKind::ScreamNegative => chirp(n, true, rng),
        SynthKind::ScreamPositive => chirp(n, false, rng),
        SynthKind::NonScream => background(n, rng),
        SynthKind::Silence => vec![0.0; n],
    };
    let samples = samples.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect();
    AudioClip::new(samples, CANONICAL_RATE_HZ).expect("finite samples")
}

fn kind_for(i: usize) -> SynthKind {
    match i % 4 {
        0 => SynthKind::ScreamNegative,
        2 => SynthKind::ScreamPositive,
        // every 8th background clip is silent
        _ if (i / 2) % 8 == 7 => SynthKind::Silence,
        _ => SynthKind::NonScream,
    }
}

/// Write `n` canonical 3 s clips plus `manifest.csv` into `out_dir`.
/// Half are screams (alternating negative/positive valence), half are not.
pub fn synth_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let kind = kind_for(i);
        let mut rng = seed::keyed_rng(seed, "synth", &[i as u64]);
        let clip = synth_clip(kind, CANONICAL_SECONDS, &mut rng);
        let name = format!("synth_{i:05}.wav");
        let path = out_dir.join(&name);
        audio::write_wav(&path, &clip).map_err(|source| super::DataError::Audio { path, source })?;
        records.push(SampleRecord {
            path: name,
            dataset: Dataset::Synthetic,
            is_scream: Some(kind.is_scream()),
            valence: kind.valence(),
            speaker: Some("synth".into()),
        });
    }
    let manifest = Manifest::new(records, out_dir);
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Concatenate 3 s synthetic clips of the given kinds into one WAV file.
pub fn write_stream_file(path: &Path, kinds: &[SynthKind], seed: u64) -> Result<AudioClip> {
    let mut samples = Vec::new();
    for (i, &kind) in kinds.iter().enumerate() {
        let mut rng = seed::keyed_rng(seed, "stream", &[i as u64]);
        samples.extend(synth_clip(kind, CANONICAL_SECONDS, &mut rng).into_samples());
    }
    let clip = AudioClip::new(samples, CANONICAL_RATE_HZ).expect("finite samples");
    audio::write_wav(path, &clip).map_err(|source| super::DataError::Audio { path: path.to_path_buf(), source })?;
    Ok(clip)
}
