//! Log-mel spectrograms: analysis parameters, the filterbank, padding rules and
//! the `MELS` binary file format.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::Stft;
use super::Waveform;
use crate::{Error, Result};

/// Mel analysis parameters.
///
/// The defaults target 22.05 kHz audio with a 1024-sample window and
/// 256-sample hop (46.4 ms / 11.6 ms rounded to powers of two), 80 triangular
/// filters on 0-8000 Hz with Slaney area normalization, and natural-log
/// magnitudes floored at `1e-5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 22_050,
            win_length: 1024,
            hop_length: 256,
            n_mels: 80,
            fmin_hz: 0.0,
            fmax_hz: 8_000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn hop_s(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate_hz as f64
    }

    pub fn window_s(&self) -> f64 {
        self.win_length as f64 / self.sample_rate_hz as f64
    }

    /// Value every padded or silent cell carries: `ln(log_floor)`.
    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }
}

/// An `F x n_mels` matrix of natural-log mel magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub hop_s: f64,
    pub window_s: f64,
    pub sample_rate_hz: u32,
}

impl MelSpectrogram {
    pub fn new(frames: Array2<f64>, hop_s: f64, window_s: f64, sample_rate_hz: u32) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::Shape("mel spectrogram must be non-empty".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Audio("mel spectrogram contains non-finite values".into()));
        }
        Ok(Self {
            frames,
            hop_s,
            window_s,
            sample_rate_hz,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_s * self.sample_rate_hz as f64).round() as usize
    }

    /// Trims (or log-floor-pads) to exactly `n` frames.
    pub fn with_n_frames(&self, n: usize, floor: f64) -> MelSpectrogram {
        let mut frames = Array2::from_elem((n, self.n_mels()), floor);
        let copy = n.min(self.n_frames());
        frames
            .slice_mut(ndarray::s![..copy, ..])
            .assign(&self.frames.slice(ndarray::s![..copy, ..]));
        MelSpectrogram {
            frames,
            hop_s: self.hop_s,
            window_s: self.window_s,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Serializes as the `MELS` little-endian binary format:
    /// magic `MELS`, u32 version, u32 F, u32 n_mels, f64 hop_s, f64 window_s,
    /// u32 sample_rate_hz, then F*n_mels f32 values row-major.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(32 + self.frames.len() * 4);
        out.extend_from_slice(b"MELS");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_mels() as u32).to_le_bytes());
        out.extend_from_slice(&self.hop_s.to_le_bytes());
        out.extend_from_slice(&self.window_s.to_le_bytes());
        out.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        for v in self.frames.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads the `MELS` format written by [`MelSpectrogram::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<MelSpectrogram> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let fail = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 32 || &bytes[0..4] != b"MELS" {
            return Err(fail("missing MELS magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != 1 {
            return Err(fail(&format!("unsupported MELS version {version}")));
        }
        let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let hop_s = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let window_s = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let rate = u32::from_le_bytes(bytes[32..36].try_into().unwrap());
        let need = 36 + f * m * 4;
        if bytes.len() < need {
            return Err(fail("truncated MELS payload"));
        }
        let mut frames = Array2::zeros((f, m));
        for (i, v) in frames.iter_mut().enumerate() {
            let off = 36 + i * 4;
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        }
        MelSpectrogram::new(frames, hop_s, window_s, rate)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels x n_bins`, Slaney area-normalized.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.win_length / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.win_length as f64;

    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = ((f - lo) / (center - lo)).min((hi - f) / (hi - center));
            if w > 0.0 {
                fb[[m, k]] = w * norm;
            }
        }
    }
    fb
}

/// Log-mel analysis of a waveform at the configured rate.
///
/// Frame count follows `1 + floor((len - win) / hop)`; the waveform must carry
/// the configured sample rate (no silent resampling) and cover one window.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if w.sample_rate_hz() != cfg.sample_rate_hz {
        return Err(Error::Audio(format!(
            "waveform is {} Hz but mel analysis expects {} Hz; resample first",
            w.sample_rate_hz(),
            cfg.sample_rate_hz
        )));
    }
    if w.len() < cfg.win_length {
        return Err(Error::Audio(format!(
            "waveform too short for analysis: {} samples < one {}-sample window",
            w.len(),
            cfg.win_length
        )));
    }
    let stft = Stft::new(cfg.win_length, cfg.hop_length);
    let spec = stft.forward(w.samples());
    let fb = mel_filterbank(cfg);
    let n_frames = spec.nrows();
    let mut frames = Array2::zeros((n_frames, cfg.n_mels));
    for f in 0..n_frames {
        for m in 0..cfg.n_mels {
            let mut acc = 0.0;
            for k in 0..spec.ncols() {
                let w = fb[[m, k]];
                if w > 0.0 {
                    acc += w * spec[[f, k]].norm();
                }
            }
            frames[[f, m]] = acc.max(cfg.log_floor).ln();
        }
    }
    MelSpectrogram::new(
        frames,
        cfg.hop_s(),
        cfg.window_s(),
        cfg.sample_rate_hz,
    )
}

/// Zero-pads frames (with the log floor) up to the next multiple of `k`,
/// returning the padded matrix and the original frame count for trimming.
pub fn pad_frames_to_multiple(
    m: &MelSpectrogram,
    k: usize,
    floor: f64,
) -> (MelSpectrogram, usize) {
    assert!(k >= 1, "padding multiple must be >= 1");
    let f = m.n_frames();
    let target = f.div_ceil(k) * k;
    if target == f {
        return (m.clone(), f);
    }
    (m.with_n_frames(target, floor), f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sine, white_noise};
    use proptest::prelude::*;

    fn cfg() -> MelConfig {
        MelConfig::default()
    }

    #[test]
    fn one_second_is_83_frames() {
        let w = sine(440.0, 22_050, 22_050, 0.5);
        let m = mel_spectrogram(&w, &cfg()).unwrap();
        assert_eq!(m.n_frames(), 1 + (22_050 - 1024) / 256); // 83
        assert_eq!(m.n_frames(), 83);
        assert_eq!(m.n_mels(), 80);
    }

    #[test]
    fn zeros_hit_the_log_floor() {
        let w = Waveform::new(vec![0.0; 4096], 22_050).unwrap();
        let m = mel_spectrogram(&w, &cfg()).unwrap();
        let floor = cfg().floor_value();
        assert!(m.frames.iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn white_noise_lifts_every_bin() {
        let w = white_noise(22_050, 22_050, 0.3, 7);
        let m = mel_spectrogram(&w, &cfg()).unwrap();
        let floor = cfg().floor_value();
        for col in 0..m.n_mels() {
            let max = m
                .frames
                .column(col)
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max > floor + 1.0, "bin {col} stayed at the floor");
        }
    }

    #[test]
    fn wrong_rate_is_an_error() {
        let w = sine(440.0, 16_000, 16_000, 0.5);
        assert!(mel_spectrogram(&w, &cfg()).is_err());
    }

    #[test]
    fn determinism() {
        let w = white_noise(22_050, 8000, 0.3, 3);
        let a = mel_spectrogram(&w, &cfg()).unwrap();
        let b = mel_spectrogram(&w, &cfg()).unwrap();
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn filterbank_rows_cover_the_band() {
        let fb = mel_filterbank(&cfg());
        for m in 0..fb.nrows() {
            let row = fb.row(m);
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.sum() > 0.0, "row {m} sums to zero");
        }
        // adjacent filters overlap: some bin is nonzero in both
        for m in 0..fb.nrows() - 1 {
            let overlap = (0..fb.ncols()).any(|k| fb[[m, k]] > 0.0 && fb[[m + 1, k]] > 0.0);
            assert!(overlap, "filters {m} and {} do not overlap", m + 1);
        }
    }

    #[test]
    fn padding_arithmetic() {
        let w = sine(440.0, 22_050, 34_304, 0.5); // -> 131 frames? compute below
        let m = mel_spectrogram(&w, &cfg()).unwrap();
        let f = m.n_frames();
        let (padded, orig) = pad_frames_to_multiple(&m, 4, cfg().floor_value());
        assert_eq!(orig, f);
        assert_eq!(padded.n_frames() % 4, 0);
        assert!(padded.n_frames() >= f && padded.n_frames() < f + 4);
    }

    #[test]
    fn pad_of_exact_multiple_is_unchanged() {
        let frames = Array2::from_elem((128, 80), -1.0);
        let m = MelSpectrogram::new(frames, 256.0 / 22_050.0, 1024.0 / 22_050.0, 22_050).unwrap();
        let (padded, orig) = pad_frames_to_multiple(&m, 4, cfg().floor_value());
        assert_eq!(orig, 128);
        assert_eq!(padded.frames, m.frames);
    }

    #[test]
    fn single_frame_pads_to_k() {
        let frames = Array2::from_elem((1, 80), -2.0);
        let m = MelSpectrogram::new(frames, 256.0 / 22_050.0, 1024.0 / 22_050.0, 22_050).unwrap();
        let (padded, orig) = pad_frames_to_multiple(&m, 4, cfg().floor_value());
        assert_eq!((padded.n_frames(), orig), (4, 1));
    }

    #[test]
    fn mels_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mels");
        let w = sine(600.0, 22_050, 8000, 0.5);
        let m = mel_spectrogram(&w, &cfg()).unwrap();
        m.save(&p).unwrap();
        let r = MelSpectrogram::load(&p).unwrap();
        assert_eq!(r.n_frames(), m.n_frames());
        assert_eq!(r.sample_rate_hz, m.sample_rate_hz);
        // storage is f32, so compare at f32 resolution
        for (a, b) in m.frames.iter().zip(r.frames.iter()) {
            assert!((a - b).abs() <= (a.abs() + 1.0) * 1e-6);
        }
    }

    proptest! {
        #[test]
        fn frame_count_formula_holds(len in 1024usize..60_000) {
            let w = Waveform::new(vec![0.1; len], 22_050).unwrap();
            let m = mel_spectrogram(&w, &cfg()).unwrap();
            prop_assert_eq!(m.n_frames(), 1 + (len - 1024) / 256);
        }

        #[test]
        fn pad_trim_round_trip(f in 1usize..200, k in 1usize..9) {
            let frames = Array2::from_shape_fn((f, 8), |(i, j)| (i * 8 + j) as f64 * 0.01 - 3.0);
            let m = MelSpectrogram::new(frames.clone(), 0.0116, 0.0464, 22_050).unwrap();
            let (padded, orig) = pad_frames_to_multiple(&m, k, -11.5);
            prop_assert_eq!(orig, f);
            let trimmed = padded.with_n_frames(orig, -11.5);
            prop_assert_eq!(trimmed.frames, frames);
        }
    }
}
