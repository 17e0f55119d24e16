//! Sensing-layer features: STFT power, mel filterbank, dB compression and
//! min-max normalization, plus the on-disk `MELF` feature format.

use std::io::{self, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError};

/// Floor applied to mel power before dB conversion.
pub const POWER_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid feature parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Error)]
pub enum FeatureIoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"MELF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported MELF version {0}")]
    VersionMismatch(u8),
    #[error("malformed MELF file: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub n_fft: usize,
    pub hop: usize,
    pub win: usize,
    pub sample_rate: u32,
    pub fmin: f64,
    pub fmax: f64,
    pub n_mels: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams { n_fft: 1024, hop: 256, win: 1024, sample_rate: 16_000, fmin: 0.0, fmax: 8000.0, n_mels: 128 }
    }
}

impl FeatureParams {
    /// Number of centered STFT frames for `n` samples.
    pub fn frames_for(&self, n: usize) -> usize {
        1 + n / self.hop
    }

    fn validate(&self) -> Result<(), DspError> {
        if self.hop == 0 || self.n_fft == 0 || self.win == 0 || self.win > self.n_fft {
            return Err(DspError::InvalidParams(format!(
                "n_fft {}, hop {}, win {}",
                self.n_fft, self.hop, self.win
            )));
        }
        Ok(())
    }
}

/// Dense row-major matrix used for spectrogram intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Matrix { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Triangular mel filters, `n_mels × (n_fft/2 + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    pub weights: Matrix,
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels + 2` breakpoints equally spaced in mel between `fmin` and `fmax`,
/// with unit-peak triangles between consecutive triples.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<FilterBank, DspError> {
    let nyquist = sample_rate as f64 / 2.0;
    if n_mels == 0 || n_fft < 2 || !(0.0 <= fmin && fmin < fmax && fmax <= nyquist) {
        return Err(DspError::InvalidParams(format!(
            "n_mels {n_mels}, n_fft {n_fft}, range {fmin}..{fmax} Hz at {sample_rate} Hz"
        )));
    }
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins).map(|b| b as f64 * sample_rate as f64 / n_fft as f64).collect();
    let mut weights = Matrix::zeros(n_mels, bins);
    for m in 0..n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for (b, &f) in bin_hz.iter().enumerate() {
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            weights.data[m * bins + b] = rise.min(fall).max(0.0);
        }
    }
    Ok(FilterBank { weights })
}

/// Periodic Hann window of length `win`, centered inside `n_fft`.
fn hann_window(win: usize, n_fft: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let offset = (n_fft - win) / 2;
    for i in 0..win {
        w[offset + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos();
    }
    w
}

/// Index into a signal of length `n` reflected about its end points
/// (edge samples are not repeated).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct MelExtractor {
    params: FeatureParams,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: FilterBank,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("params", &self.params).finish()
    }
}

impl MelExtractor {
    pub fn new(params: FeatureParams) -> Result<Self, DspError> {
        params.validate()?;
        let bank = mel_filterbank(params.n_mels, params.n_fft, params.sample_rate, params.fmin, params.fmax)?;
        let fft = FftPlanner::new().plan_fft_forward(params.n_fft);
        Ok(MelExtractor { params, fft, window: hann_window(params.win, params.n_fft), bank })
    }

    pub fn params(&self) -> &FeatureParams {
        &self.params
    }

    pub fn filterbank(&self) -> &FilterBank {
        &self.bank
    }

    /// Power spectrogram `|DFT|²`, `(n_fft/2 + 1) × T`, of Hann-windowed frames
    /// centered on multiples of `hop` (signal reflection-padded by `n_fft/2`).
    pub fn stft_power(&self, clip: &AudioClip) -> Result<Matrix, DspError> {
        let x = clip.samples();
        if x.is_empty() {
            return Err(DspError::InvalidParams("empty clip".into()));
        }
        let p = &self.params;
        let bins = p.n_fft / 2 + 1;
        let frames = p.frames_for(x.len());
        let pad = (p.n_fft / 2) as isize;
        let mut out = Matrix::zeros(bins, frames);
        let mut buf = vec![Complex::new(0.0, 0.0); p.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * p.hop) as isize - pad;
            for (k, slot) in buf.iter_mut().enumerate() {
                let v = x[reflect_index(start + k as isize, x.len())] as f64;
                *slot = Complex::new(v * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (b, c) in buf.iter().take(bins).enumerate() {
                out.data[b * frames + t] = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// Normalized log-mel spectrogram of a clip already at the extractor's
    /// sample rate.
    pub fn melspectrogram(&self, clip: &AudioClip) -> Result<MelSpec, DspError> {
        if clip.sample_rate_hz() != self.params.sample_rate {
            return Err(DspError::InvalidParams(format!(
                "clip at {} Hz, extractor expects {} Hz",
                clip.sample_rate_hz(),
                self.params.sample_rate
            )));
        }
        let power = self.stft_power(clip)?;
        let (mels, bins, frames) = (self.params.n_mels, power.rows, power.cols);
        let mut db = Matrix::zeros(mels, frames);
        for m in 0..mels {
            let w = self.bank.weights.row(m);
            for t in 0..frames {
                let mut acc = 0.0;
                for (b, &wb) in w.iter().enumerate().take(bins) {
                    if wb != 0.0 {
                        acc += wb * power.data[b * frames + t];
                    }
                }
                db.data[m * frames + t] = 10.0 * acc.max(POWER_FLOOR).log10();
            }
        }
        let norm = normalize_minmax(&db)?;
        Ok(MelSpec {
            rows: mels,
            cols: frames,
            values: norm.data.iter().map(|&v| v as f32).collect(),
            normalized: true,
            params: self.params,
        })
    }

    /// Canonicalize (16 kHz, 3 s) then extract.
    pub fn featurize(&self, clip: &AudioClip) -> Result<MelSpec, DspError> {
        self.melspectrogram(&audio::canonicalize(clip)?)
    }
}

fn default_extractor() -> &'static MelExtractor {
    static EXTRACTOR: OnceLock<MelExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(|| MelExtractor::new(FeatureParams::default()).expect("default params are valid"))
}

/// STFT power with explicit frame parameters.
pub fn stft_power(clip: &AudioClip, n_fft: usize, hop: usize, win: usize) -> Result<Matrix, DspError> {
    let defaults = FeatureParams::default();
    if (n_fft, hop, win) == (defaults.n_fft, defaults.hop, defaults.win) {
        return default_extractor().stft_power(clip);
    }
    let params = FeatureParams { n_fft, hop, win, ..defaults };
    params.validate()?;
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    // the filterbank is unused for a bare STFT
    let bank = FilterBank { weights: Matrix::zeros(0, 0) };
    MelExtractor { params, fft, window: hann_window(win, n_fft), bank }.stft_power(clip)
}

/// Default-parameter mel spectrogram of a 16 kHz clip.
pub fn melspectrogram(clip: &AudioClip) -> Result<MelSpec, DspError> {
    default_extractor().melspectrogram(clip)
}

/// Canonicalize then extract with default parameters.
pub fn featurize(clip: &AudioClip) -> Result<MelSpec, DspError> {
    default_extractor().featurize(clip)
}

/// Affine map of all entries onto `[-1, 1]`; a constant matrix maps to zeros.
pub fn normalize_minmax(m: &Matrix) -> Result<Matrix, DspError> {
    if let Some(i) = m.data.iter().position(|v| !v.is_finite()) {
        return Err(DspError::NonFiniteInput(i));
    }
    let (lo, hi) = m.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let data = if m.data.is_empty() || hi == lo {
        vec![0.0; m.data.len()]
    } else {
        m.data.iter().map(|&v| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)).collect()
    };
    Ok(Matrix { rows: m.rows, cols: m.cols, data })
}

/// Mel-spectrogram feature: `rows` mel bands × `cols` frames, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub normalized: bool,
    pub params: FeatureParams,
}

impl MelSpec {
    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.cols + frame]
    }

    pub fn set(&mut self, band: usize, frame: usize, v: f32) {
        self.values[band * self.cols + frame] = v;
    }

    /// Model input layout: the spectrogram replicated over 3 channels,
    /// `[3, rows, cols]`, flattened.
    pub fn to_input_channels(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.values.len() * 3);
        for _ in 0..3 {
            out.extend_from_slice(&self.values);
        }
        out
    }
}

pub const MELF_MAGIC: &[u8; 4] = b"MELF";
pub const MELF_VERSION: u8 = 1;
const MELF_DTYPE_F32: u8 = 1;
const FLAG_NORMALIZED: u32 = 1;

/// Generic MELF payload: a 2-d f32 matrix with a sample-rate field and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct MelfMatrix {
    pub sample_rate: u32,
    pub normalized: bool,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

pub fn encode_melf(m: &MelfMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + m.values.len() * 4);
    out.extend_from_slice(MELF_MAGIC);
    out.extend_from_slice(&[MELF_VERSION, MELF_DTYPE_F32, 0, 0]);
    out.extend_from_slice(&m.sample_rate.to_le_bytes());
    out.extend_from_slice(&(if m.normalized { FLAG_NORMALIZED } else { 0 }).to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

pub fn decode_melf(bytes: &[u8]) -> Result<MelfMatrix, FeatureIoError> {
    if bytes.len() < 4 {
        return Err(FeatureIoError::Malformed(format!("{} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MELF_MAGIC {
        return Err(FeatureIoError::BadMagic(magic));
    }
    if bytes.len() < 24 {
        return Err(FeatureIoError::Malformed("truncated header".into()));
    }
    if bytes[4] != MELF_VERSION {
        return Err(FeatureIoError::VersionMismatch(bytes[4]));
    }
    if bytes[5] != MELF_DTYPE_F32 {
        return Err(FeatureIoError::Malformed(format!("dtype {}", bytes[5])));
    }
    let (rows, cols) = (u32_at(bytes, 16) as usize, u32_at(bytes, 20) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(24))
        .ok_or_else(|| FeatureIoError::Malformed("dimension overflow".into()))?;
    if bytes.len() != expected {
        return Err(FeatureIoError::Malformed(format!("{rows}x{cols} needs {expected} bytes, file has {}", bytes.len())));
    }
    let values = bytes[24..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(MelfMatrix {
        sample_rate: u32_at(bytes, 8),
        normalized: u32_at(bytes, 12) & FLAG_NORMALIZED != 0,
        rows,
        cols,
        values,
    })
}

pub fn write_melf(path: &Path, m: &MelfMatrix) -> Result<(), FeatureIoError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_melf(m))?;
    f.flush()?;
    Ok(())
}

pub fn read_melf(path: &Path) -> Result<MelfMatrix, FeatureIoError> {
    decode_melf(&std::fs::read(path)?)
}

pub fn write_features(spec: &MelSpec, path: &Path) -> Result<(), FeatureIoError> {
    write_melf(
        path,
        &MelfMatrix {
            sample_rate: spec.params.sample_rate,
            normalized: spec.normalized,
            rows: spec.rows,
            cols: spec.cols,
            values: spec.values.clone(),
        },
    )
}

/// Read a feature file. Frame parameters other than the sample rate are not
/// stored and come back as defaults.
pub fn read_features(path: &Path) -> Result<MelSpec, FeatureIoError> {
    let m = read_melf(path)?;
    Ok(MelSpec {
        rows: m.rows,
        cols: m.cols,
        values: m.values,
        normalized: m.normalized,
        params: FeatureParams { sample_rate: m.sample_rate, n_mels: m.rows, ..FeatureParams::default() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize) -> AudioClip {
        AudioClip::new(
            (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() as f32).collect(),
            16000,
        )
        .unwrap()
    }

    #[test]
    fn frame_count() {
        let p = stft_power(&AudioClip::silence(48000, 16000), 1024, 256, 1024).unwrap();
        assert_eq!((p.rows, p.cols), (513, 188));
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let p = stft_power(&tone(1000.0, 16000), 1024, 256, 1024).unwrap();
        for t in 4..p.cols - 4 {
            let col: Vec<f64> = (0..p.rows).map(|b| p.get(b, t)).collect();
            let argmax = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, 64, "frame {t}");
        }
    }

    #[test]
    fn invalid_stft_params() {
        let clip = tone(100.0, 100);
        assert!(matches!(stft_power(&clip, 1024, 0, 1024), Err(DspError::InvalidParams(_))));
        assert!(matches!(stft_power(&clip, 512, 256, 1024), Err(DspError::InvalidParams(_))));
    }

    #[test]
    fn short_clips_reflect() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-7, 5), 1);
        assert_eq!(reflect_index(-3, 1), 0);
        let p = stft_power(&tone(700.0, 3), 1024, 256, 1024).unwrap();
        assert_eq!(p.cols, 1);
    }

    #[test]
    fn mel_scale_values() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(3210.0)) - 3210.0).abs() < 1e-9);
    }

    #[test]
    fn filterbank_shape_and_coverage() {
        let fb = mel_filterbank(128, 1024, 16000, 0.0, 8000.0).unwrap();
        assert_eq!((fb.weights.rows, fb.weights.cols), (128, 513));
        for m in 0..128 {
            assert!(fb.weights.row(m).iter().any(|&w| w > 0.0), "empty filter {m}");
            assert!(fb.weights.row(m).iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
        for b in 1..512 {
            let s: f64 = (0..128).map(|m| fb.weights.get(m, b)).sum();
            assert!(s > 0.0, "bin {b} uncovered");
        }
        assert!(mel_filterbank(128, 1024, 16000, 0.0, 9000.0).is_err());
        assert!(mel_filterbank(128, 1024, 16000, 500.0, 500.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 5.0], vec![10.0, 5.0]]);
        assert_eq!(normalize_minmax(&m).unwrap().data, vec![-1.0, 0.0, 1.0, 0.0]);
        let c = Matrix::from_rows(&[vec![3.0, 3.0]]);
        assert_eq!(normalize_minmax(&c).unwrap().data, vec![0.0, 0.0]);
        let n = Matrix::from_rows(&[vec![-1.0, 0.25, 1.0]]);
        let out = normalize_minmax(&n).unwrap();
        for (a, b) in out.data.iter().zip(&n.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = Matrix::from_rows(&[vec![1.0, f64::NAN]]);
        assert!(matches!(normalize_minmax(&bad), Err(DspError::NonFiniteInput(1))));
    }

    #[test]
    fn melspec_shape_and_range() {
        let spec = featurize(&tone(440.0, 20000)).unwrap();
        assert_eq!((spec.rows, spec.cols), (128, 188));
        assert!(spec.normalized);
        let lo = spec.values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = spec.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((lo, hi), (-1.0, 1.0));
        let silent = melspectrogram(&AudioClip::silence(48000, 16000)).unwrap();
        assert!(silent.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn melspec_requires_rate() {
        let clip = AudioClip::silence(1000, 8000);
        assert!(matches!(melspectrogram(&clip), Err(DspError::InvalidParams(_))));
    }

    #[test]
    fn melf_errors() {
        let m = MelfMatrix { sample_rate: 16000, normalized: true, rows: 2, cols: 3, values: vec![1.0; 6] };
        let bytes = encode_melf(&m);
        assert_eq!(bytes.len(), 16 + 8 + 6 * 4);
        assert_eq!(decode_melf(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_melf(&bad), Err(FeatureIoError::BadMagic(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_melf(&v2), Err(FeatureIoError::VersionMismatch(2))));
        assert!(matches!(decode_melf(&bytes[..30]), Err(FeatureIoError::Malformed(_))));
    }
}
