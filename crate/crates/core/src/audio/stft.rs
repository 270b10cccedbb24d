//! Short-time Fourier analysis/synthesis shared by mel extraction and Griffin-Lim.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window.
pub fn hann_window(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / size as f64).cos()))
        .collect()
}

/// Planned forward/inverse FFT pair for one window size.
pub struct Stft {
    window: Vec<f64>,
    win_len: usize,
    hop: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(win_len: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: hann_window(win_len),
            win_len,
            hop,
            fwd: planner.plan_fft_forward(win_len),
            inv: planner.plan_fft_inverse(win_len),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    pub fn num_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win_len {
            0
        } else {
            1 + (n_samples - self.win_len) / self.hop
        }
    }

    /// Complex spectrogram, `frames x bins` with `bins = win/2 + 1`.
    pub fn forward(&self, samples: &[f64]) -> Array2<Complex64> {
        let frames = self.num_frames(samples.len());
        let bins = self.n_bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.win_len];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(samples[start + i] * self.window[i], 0.0);
            }
            self.fwd.process(&mut buf);
            for k in 0..bins {
                out[[f, k]] = buf[k];
            }
        }
        out
    }

    /// Overlap-add inverse with squared-window normalization.
    ///
    /// Output length is `(frames - 1) * hop + win`.
    pub fn inverse(&self, spec: &Array2<Complex64>) -> Vec<f64> {
        let frames = spec.nrows();
        let bins = self.n_bins();
        assert_eq!(bins, spec.ncols(), "spectrogram bin count mismatch");
        if frames == 0 {
            return Vec::new();
        }
        let out_len = (frames - 1) * self.hop + self.win_len;
        let mut acc = vec![0.0f64; out_len];
        let mut norm = vec![0.0f64; out_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.win_len];
        for f in 0..frames {
            // rebuild the full conjugate-symmetric spectrum
            for k in 0..bins {
                buf[k] = spec[[f, k]];
            }
            for k in bins..self.win_len {
                buf[k] = spec[[f, self.win_len - k]].conj();
            }
            self.inv.process(&mut buf);
            let start = f * self.hop;
            for i in 0..self.win_len {
                let v = buf[i].re / self.win_len as f64;
                acc[start + i] += v * self.window[i];
                norm[start + i] += self.window[i] * self.window[i];
            }
        }
        // floor the overlap normalization so near-zero window sums at the
        // edges cannot amplify inconsistent frames into spikes
        for (a, n) in acc.iter_mut().zip(&norm) {
            *a /= n.max(1e-2);
        }
        acc
    }
}

/// One-shot forward STFT.
pub fn stft(samples: &[f64], win_len: usize, hop: usize) -> Array2<Complex64> {
    Stft::new(win_len, hop).forward(samples)
}

/// One-shot inverse STFT.
pub fn istft(spec: &Array2<Complex64>, win_len: usize, hop: usize) -> Vec<f64> {
    Stft::new(win_len, hop).inverse(spec)
}
