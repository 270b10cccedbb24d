//! Waveform ingestion, resampling, STFT/mel analysis and Griffin-Lim inversion.

mod griffin_lim;
mod mel;
mod resample;
mod stft;
mod wav;

pub use griffin_lim::{griffin_lim_invert, GriffinLimVocoder, VocoderInterface};
pub use mel::{mel_filterbank, mel_spectrogram, pad_frames_to_multiple, MelConfig, MelSpectrogram};
pub use resample::resample;
pub use stft::{hann_window, istft, stft, Stft};
pub use wav::{read_wav, write_wav};

use crate::{Error, Result};

/// A mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    /// Wraps samples after validating finiteness and the amplitude bound.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Audio("waveform contains non-finite samples".into()));
        }
        if samples.iter().any(|s| s.abs() > 1.0) {
            return Err(Error::Audio(
                "waveform samples exceed [-1, 1]; normalize before ingesting".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Wraps samples, scaling down by the peak if any sample exceeds `[-1, 1]`.
    pub fn new_normalized(mut samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if !peak.is_finite() {
            return Err(Error::Audio("waveform contains non-finite samples".into()));
        }
        if peak > 1.0 {
            for s in &mut samples {
                *s /= peak;
            }
        }
        Self::new(samples, sample_rate_hz)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
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

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_samples() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 22_050).is_err());
        assert!(Waveform::new(vec![0.0, f64::INFINITY], 22_050).is_err());
    }

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(Waveform::new(vec![1.5], 22_050).is_err());
        assert!(Waveform::new(vec![-1.0, 1.0], 22_050).is_ok());
    }

    #[test]
    fn normalization_scales_peak_to_one() {
        let w = Waveform::new_normalized(vec![0.5, -2.0], 22_050).unwrap();
        assert_eq!(w.samples(), &[0.25, -1.0]);
    }

    #[test]
    fn zero_rate_rejected() {
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }
}
