//! Decoding, resampling and length normalization of raw audio.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

/// Canonical model input rate.
pub const CANONICAL_RATE_HZ: u32 = 16_000;
/// Canonical clip duration.
pub const CANONICAL_SECONDS: f64 = 3.0;

/// Taps per polyphase branch of the resampling filter.
pub const RESAMPLE_TAPS: usize = 64;
pub const KAISER_BETA: f64 = 8.6;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV container: {0}")]
    MalformedContainer(String),
    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("clip is empty")]
    EmptyClip,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidRate(0));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFiniteSample(i));
        }
        Ok(AudioClip { samples, sample_rate_hz })
    }

    pub fn silence(len: usize, sample_rate_hz: u32) -> Self {
        AudioClip { samples: vec![0.0; len], sample_rate_hz: sample_rate_hz.max(1) }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Mean power.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.samples.len() as f64
    }

    /// Copy of `[start, start + len)`, zero-filled past the end.
    pub fn window(&self, start: usize, len: usize) -> AudioClip {
        let mut samples = vec![0.0; len];
        if start < self.samples.len() {
            let end = (start + len).min(self.samples.len());
            samples[..end - start].copy_from_slice(&self.samples[start..end]);
        }
        AudioClip { samples, sample_rate_hz: self.sample_rate_hz }
    }

    pub(crate) fn with_samples(&self, samples: Vec<f32>) -> AudioClip {
        AudioClip { samples, sample_rate_hz: self.sample_rate_hz }
    }

    /// Same samples, reinterpreted at another (positive) rate.
    pub(crate) fn with_rate(&self, sample_rate_hz: u32) -> AudioClip {
        AudioClip { samples: self.samples.clone(), sample_rate_hz }
    }
}

/// Decode a RIFF/WAVE byte buffer (PCM16 or float32, mono or stereo) into a
/// mono clip. Channels are averaged; integer samples are scaled by 1/32768.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::UnsupportedEncoding(format!("{} channels", spec.channels)));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!("{fmt:?} {bits}-bit")));
        }
    };
    if let Some(i) = interleaved.iter().position(|s| !s.is_finite()) {
        return Err(AudioError::NonFiniteSample(i));
    }
    let channels = spec.channels as usize;
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().sum::<f32>() / channels as f32).clamp(-1.0, 1.0))
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

fn map_hound(e: hound::Error) -> AudioError {
    match e {
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("codec not supported".into()),
        hound::Error::FormatError(msg) => AudioError::MalformedContainer(msg.into()),
        hound::Error::IoError(io) => AudioError::MalformedContainer(io.to_string()),
        other => AudioError::MalformedContainer(other.to_string()),
    }
}

/// Encode as mono 16-bit PCM.
pub fn encode_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::with_capacity(44 + clip.len() * 2));
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).expect("in-memory writer");
        for &s in &clip.samples {
            let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            w.write_sample(v).expect("in-memory write");
        }
        w.finalize().expect("in-memory finalize");
    }
    buf.into_inner()
}

pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    decode_wav(&std::fs::read(path)?)
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    std::fs::write(path, encode_wav_pcm16(clip))?;
    Ok(())
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Windowed-sinc interpolation kernel for one fractional phase.
struct SincKernel {
    cutoff: f64,
    half: f64,
    i0_beta: f64,
}

impl SincKernel {
    fn new(cutoff: f64) -> Self {
        SincKernel { cutoff, half: (RESAMPLE_TAPS / 2) as f64, i0_beta: bessel_i0(KAISER_BETA) }
    }

    /// Taps for source offsets `k - frac`, `k ∈ [-(H-1), H]`, normalized to
    /// unit DC gain.
    fn taps(&self, frac: f64) -> [f64; RESAMPLE_TAPS] {
        let mut taps = [0.0; RESAMPLE_TAPS];
        let h = (RESAMPLE_TAPS / 2) as isize;
        for (slot, k) in taps.iter_mut().zip(-(h - 1)..=h) {
            let x = k as f64 - frac;
            let r = x / self.half;
            let window = if r.abs() >= 1.0 {
                0.0
            } else {
                bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta
            };
            let arg = std::f64::consts::PI * self.cutoff * x;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
            *slot = self.cutoff * sinc * window;
        }
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= total);
        taps
    }
}

/// Band-limited rational resampling with a polyphase Kaiser-windowed sinc.
///
/// The output has `round(n · target / source)` samples. A clip already at
/// `target_hz` is returned unchanged.
pub fn resample(clip: &AudioClip, target_hz: u32) -> Result<AudioClip, AudioError> {
    if target_hz == 0 {
        return Err(AudioError::InvalidRate(target_hz));
    }
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    let src = clip.sample_rate_hz as u64;
    let dst = target_hz as u64;
    if src == dst {
        return Ok(clip.clone());
    }
    let g = gcd(src, dst);
    let (up, down) = (dst / g, src / g);
    let n = clip.len() as u64;
    let out_len = ((n as u128 * dst as u128 * 2 + src as u128) / (2 * src as u128)) as usize;
    let kernel = SincKernel::new((dst as f64 / src as f64).min(1.0));

    // one filter per distinct fractional phase; large phase counts are
    // computed on the fly instead of tabulated
    let table: Option<Vec<[f64; RESAMPLE_TAPS]>> =
        (up <= 4096).then(|| (0..up).map(|p| kernel.taps(p as f64 / up as f64)).collect());

    let x = &clip.samples;
    let h = (RESAMPLE_TAPS / 2) as i64;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len as u64 {
        let pos = j * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let computed;
        let taps = match &table {
            Some(t) => &t[phase as usize],
            None => {
                computed = kernel.taps(phase as f64 / up as f64);
                &computed
            }
        };
        let mut acc = 0.0f64;
        for (t, k) in taps.iter().zip(-(h - 1)..=h) {
            let i = base + k;
            if i >= 0 && (i as u64) < n {
                acc += t * x[i as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    AudioClip::new(out, target_hz)
}

/// Truncate (keeping the leading samples) or zero-pad at the end to exactly
/// `round(seconds · rate)` samples.
pub fn fix_length(clip: &AudioClip, seconds: f64) -> AudioClip {
    let target = (seconds * clip.sample_rate_hz as f64).round().max(0.0) as usize;
    clip.window(0, target)
}

/// Resample to 16 kHz and fix the length to 3 s.
pub fn canonicalize(clip: &AudioClip) -> Result<AudioClip, AudioError> {
    let at_rate = if clip.is_empty() {
        AudioClip::silence(0, CANONICAL_RATE_HZ)
    } else {
        resample(clip, CANONICAL_RATE_HZ)?
    };
    Ok(fix_length(&at_rate, CANONICAL_SECONDS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, secs: f64, amp: f64) -> AudioClip {
        let n = (secs * rate as f64).round() as usize;
        let s = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioClip::new(s, rate).unwrap()
    }

    fn wav_bytes(channels: u16, rate: u32, bits: u16, float: bool, frames: &[&[f64]]) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: if float { hound::SampleFormat::Float } else { hound::SampleFormat::Int },
        };
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
            for frame in frames {
                for &v in *frame {
                    match (float, bits) {
                        (true, _) => w.write_sample(v as f32).unwrap(),
                        (false, 16) => w.write_sample(v as i16).unwrap(),
                        (false, _) => w.write_sample(v as i32).unwrap(),
                    }
                }
            }
            w.finalize().unwrap();
        }
        buf.into_inner()
    }

    #[test]
    fn pcm16_scaling() {
        let bytes = wav_bytes(1, 16000, 16, false, &[&[32767.0], &[-32768.0], &[0.0]]);
        let clip = decode_wav(&bytes).unwrap();
        assert_eq!(clip.samples(), &[32767.0 / 32768.0, -1.0, 0.0]);
    }

    #[test]
    fn stereo_is_averaged() {
        let bytes = wav_bytes(2, 44100, 32, true, &[&[0.5, -0.5], &[0.25, 0.75]]);
        let clip = decode_wav(&bytes).unwrap();
        assert_eq!(clip.samples(), &[0.0, 0.5]);
        assert_eq!(clip.sample_rate_hz(), 44100);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode_wav(b"RIFX....WAVEfmt "), Err(AudioError::MalformedContainer(_))));
        assert!(matches!(decode_wav(&[]), Err(AudioError::MalformedContainer(_))));
        let pcm24 = wav_bytes(1, 16000, 24, false, &[&[1.0]]);
        assert!(matches!(decode_wav(&pcm24), Err(AudioError::UnsupportedEncoding(_))));
        let quad = wav_bytes(4, 16000, 16, false, &[&[1.0, 1.0, 1.0, 1.0]]);
        assert!(matches!(decode_wav(&quad), Err(AudioError::UnsupportedEncoding(_))));
        let nan = wav_bytes(1, 16000, 32, true, &[&[f64::NAN]]);
        assert!(matches!(decode_wav(&nan), Err(AudioError::NonFiniteSample(0))));
    }

    #[test]
    fn float_samples_are_clamped() {
        let bytes = wav_bytes(1, 16000, 32, true, &[&[1.5], &[-3.0]]);
        assert_eq!(decode_wav(&bytes).unwrap().samples(), &[1.0, -1.0]);
    }

    #[test]
    fn encode_roundtrip_is_exact_for_pcm_values() {
        let clip = AudioClip::new(vec![0.0, 0.5, -1.0, 32767.0 / 32768.0], 8000).unwrap();
        assert_eq!(decode_wav(&encode_wav_pcm16(&clip)).unwrap(), clip);
    }

    #[test]
    fn resample_identity_and_errors() {
        let clip = sine(440.0, 16000, 0.1, 0.5);
        assert_eq!(resample(&clip, 16000).unwrap(), clip);
        assert!(matches!(resample(&clip, 0), Err(AudioError::InvalidRate(0))));
        let empty = AudioClip::new(vec![], 16000).unwrap();
        assert!(matches!(resample(&empty, 8000), Err(AudioError::EmptyClip)));
    }

    #[test]
    fn resample_length_formula() {
        let clip = sine(1000.0, 44100, 1.0, 0.5);
        assert_eq!(resample(&clip, 16000).unwrap().len(), 16000);
        let odd = AudioClip::new(vec![0.1; 1001], 22050).unwrap();
        // 1001 * 16000 / 22050 = 726.35
        assert_eq!(resample(&odd, 16000).unwrap().len(), 726);
    }

    #[test]
    fn resampled_sine_matches_analytic() {
        let clip = sine(1000.0, 44100, 1.0, 0.8);
        let out = resample(&clip, 16000).unwrap();
        let mut worst = 0.0f64;
        for (i, &v) in out.samples().iter().enumerate().skip(200).take(out.len() - 400) {
            let t = i as f64 / 16000.0;
            let expected = 0.8 * (2.0 * std::f64::consts::PI * 1000.0 * t).sin();
            worst = worst.max((v as f64 - expected).abs());
        }
        assert!(worst < 1e-3, "max error {worst}");
    }

    #[test]
    fn round_trip_reconstructs_tone() {
        let clip = sine(1500.0, 16000, 0.5, 0.7);
        let back = resample(&resample(&clip, 44100).unwrap(), 16000).unwrap();
        assert_eq!(back.len(), clip.len());
        let worst = clip.samples()[200..7800]
            .iter()
            .zip(&back.samples()[200..7800])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-2, "max error {worst}");
    }

    #[test]
    fn fix_length_cases() {
        let long = AudioClip::new((0..80000).map(|i| (i % 100) as f32 / 100.0).collect(), 16000).unwrap();
        let cut = fix_length(&long, 3.0);
        assert_eq!(cut.samples(), &long.samples()[..48000]);

        let short = AudioClip::new(vec![0.25; 16000], 16000).unwrap();
        let padded = fix_length(&short, 3.0);
        assert_eq!(padded.len(), 48000);
        assert!(padded.samples()[16000..].iter().all(|&v| v == 0.0));
        assert!(padded.samples()[..16000].iter().all(|&v| v == 0.25));

        let exact = AudioClip::new(vec![0.1; 48000], 16000).unwrap();
        assert_eq!(fix_length(&exact, 3.0), exact);
    }

    #[test]
    fn canonicalize_rate_and_length() {
        let clip = sine(500.0, 44100, 4.2, 0.3);
        let c = canonicalize(&clip).unwrap();
        assert_eq!((c.sample_rate_hz(), c.len()), (16000, 48000));
    }

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn fix_length_idempotent(len in 0usize..60000, secs in 0.1f64..4.0) {
            let clip = AudioClip::new((0..len).map(|i| ((i * 31) % 17) as f32 / 17.0).collect(), 16000).unwrap();
            let once = fix_length(&clip, secs);
            proptest::prop_assert_eq!(fix_length(&once, secs), once);
        }
    }
}
