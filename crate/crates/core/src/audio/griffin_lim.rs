//! Mel inversion: non-negative least-squares back to the linear spectrum, then
//! Griffin-Lim phase reconstruction. Stands in for a neural vocoder behind
//! [`VocoderInterface`].

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::mel::{mel_filterbank, MelConfig, MelSpectrogram};
use super::stft::Stft;
use super::Waveform;
use crate::{Error, Result};

/// Anything that renders a mel spectrogram back to audio.
pub trait VocoderInterface: Send + Sync {
    fn name(&self) -> &str;
    fn invert(&self, m: &MelSpectrogram) -> Result<Waveform>;
}

/// Lawson-Hanson active-set NNLS: `argmin_{x >= 0} |A x - b|`.
fn nnls(a: &Array2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let (rows, cols) = a.dim();
    let mut x = Array1::zeros(cols);
    let mut passive = vec![false; cols];
    let tol = 1e-10 * b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-30);

    // gradient of the residual
    let grad = |x: &Array1<f64>| -> Array1<f64> {
        let r = b.to_owned() - a.dot(x);
        a.t().dot(&r)
    };

    for _ in 0..3 * rows {
        let w = grad(&x);
        let mut best = None;
        for j in 0..cols {
            if !passive[j] && w[j] > tol {
                if best.map_or(true, |(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((j_star, _)) = best else { break };
        passive[j_star] = true;

        loop {
            let idx: Vec<usize> = (0..cols).filter(|&j| passive[j]).collect();
            let z = ls_on_columns(a, b, &idx);
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = z[k];
                }
                break;
            }
            // step toward z until the first coefficient hits zero
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if z[k] <= 0.0 {
                    let denom = x[j] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            let alpha = alpha.min(1.0).max(0.0);
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (z[k] - x[j]);
                if x[j] <= tol.max(1e-300) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    x
}

/// Unconstrained least squares restricted to a column subset, solved through
/// the normal equations with a Cholesky factorization.
fn ls_on_columns(a: &Array2<f64>, b: &ArrayView1<f64>, idx: &[usize]) -> Array1<f64> {
    let k = idx.len();
    let rows = a.nrows();
    let mut g = Array2::zeros((k, k));
    let mut rhs = Array1::zeros(k);
    for (p, &jp) in idx.iter().enumerate() {
        for (q, &jq) in idx.iter().enumerate().skip(p) {
            let mut s = 0.0;
            for r in 0..rows {
                s += a[[r, jp]] * a[[r, jq]];
            }
            g[[p, q]] = s;
            g[[q, p]] = s;
        }
        let mut s = 0.0;
        for r in 0..rows {
            s += a[[r, jp]] * b[r];
        }
        rhs[p] = s;
    }
    // ridge for numerical safety on nearly dependent columns
    let ridge = 1e-12 * (0..k).map(|i| g[[i, i]]).fold(0.0, f64::max).max(1e-300);
    for i in 0..k {
        g[[i, i]] += ridge;
    }
    cholesky_solve(&mut g, &mut rhs);
    rhs
}

/// In-place Cholesky solve of `g x = rhs` for symmetric positive-definite `g`.
fn cholesky_solve(g: &mut Array2<f64>, rhs: &mut Array1<f64>) {
    let n = g.nrows();
    for i in 0..n {
        for j in 0..=i {
            let mut s = g[[i, j]];
            for k in 0..j {
                s -= g[[i, k]] * g[[j, k]];
            }
            if i == j {
                g[[i, i]] = s.max(1e-300).sqrt();
            } else {
                g[[i, j]] = s / g[[j, j]];
            }
        }
    }
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= g[[i, k]] * rhs[k];
        }
        rhs[i] = s / g[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for k in i + 1..n {
            s -= g[[k, i]] * rhs[k];
        }
        rhs[i] = s / g[[i, i]];
    }
}

/// Sub-bin frequency grid: atoms are placed every `1 / ATOM_STEPS` FFT bins.
const ATOM_STEPS: usize = 8;
/// Mainlobe half-width of the Hann window transform kept per atom, in bins.
const ATOM_HALF_BINS: isize = 3;

/// Dictionary of windowed-sinusoid magnitude atoms.
///
/// Each atom is the mainlobe of the analysis window's transform centered at a
/// fractional bin position, so any non-negative combination is a spectrum a
/// real quasi-stationary signal can actually carry. Fitting the mel target
/// with these (instead of raw bins) keeps tones at their true frequency
/// instead of snapping them to the FFT grid.
struct ToneAtoms {
    /// taps per atom: (bin index, magnitude)
    taps: Vec<Vec<(usize, f64)>>,
    /// mel image of every atom, columns scaled to unit norm so the active-set
    /// selection is not biased by filter gains: n_mels x n_atoms
    mel_image: Array2<f64>,
    /// the norms divided out of `mel_image` columns
    column_norms: Vec<f64>,
}

fn tone_atoms(cfg: &MelConfig, fb: &Array2<f64>) -> ToneAtoms {
    let n = cfg.win_length;
    let n_bins = n / 2 + 1;
    let n_atoms = (n_bins - 1) * ATOM_STEPS + 1;
    let window = super::stft::hann_window(n);

    // atom shapes depend only on the fractional bin offset; compute the
    // mainlobe taps of e^{i 2 pi p n / N} * window by direct DFT per offset
    let mut shapes: Vec<Vec<(isize, f64)>> = Vec::with_capacity(ATOM_STEPS);
    for s in 0..ATOM_STEPS {
        let frac = s as f64 / ATOM_STEPS as f64;
        let mut taps = Vec::new();
        for d in -ATOM_HALF_BINS..=ATOM_HALF_BINS + 1 {
            let k = d as f64 - frac; // distance from atom center in bins
            let mut re = 0.0;
            let mut im = 0.0;
            for (i, w) in window.iter().enumerate() {
                let phase = -2.0 * std::f64::consts::PI * k * i as f64 / n as f64;
                re += w * phase.cos();
                im += w * phase.sin();
            }
            let mag = 0.5 * (re * re + im * im).sqrt(); // amplitude-1 real sinusoid
            if mag > 1e-4 * window.iter().sum::<f64>() {
                taps.push((d, mag));
            }
        }
        shapes.push(taps);
    }

    let mut taps = Vec::with_capacity(n_atoms);
    let mut mel_image = Array2::zeros((cfg.n_mels, n_atoms));
    for a in 0..n_atoms {
        let center_bin = a / ATOM_STEPS;
        let shape = &shapes[a % ATOM_STEPS];
        let mut atom = Vec::with_capacity(shape.len());
        for &(d, v) in shape {
            // reflect around DC and Nyquist
            let mut k = center_bin as isize + d;
            if k < 0 {
                k = -k;
            }
            if k as usize >= n_bins {
                k = 2 * (n_bins as isize - 1) - k;
            }
            if (0..n_bins as isize).contains(&k) {
                atom.push((k as usize, v));
            }
        }
        for &(k, v) in &atom {
            for mel in 0..cfg.n_mels {
                let w = fb[[mel, k]];
                if w > 0.0 {
                    mel_image[[mel, a]] += w * v;
                }
            }
        }
        taps.push(atom);
    }
    let mut column_norms = Vec::with_capacity(n_atoms);
    for a in 0..n_atoms {
        let norm = mel_image
            .column(a)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(1e-300);
        mel_image.column_mut(a).mapv_inplace(|v| v / norm);
        column_norms.push(norm);
    }
    ToneAtoms {
        taps,
        mel_image,
        column_norms,
    }
}

/// Recovers linear-spectrum magnitudes from log-mel frames: per-frame NNLS on
/// the tone-atom dictionary.
///
/// The log floor marks "nothing measured", so it maps back to zero energy
/// rather than to a `log_floor`-sized pedestal.
fn mel_to_linear(m: &MelSpectrogram, cfg: &MelConfig) -> Array2<f64> {
    let fb = mel_filterbank(cfg);
    let atoms = tone_atoms(cfg, &fb);
    let n_bins = cfg.win_length / 2 + 1;
    let mut mag = Array2::zeros((m.n_frames(), n_bins));
    for f in 0..m.n_frames() {
        let target: Array1<f64> = m
            .frames
            .row(f)
            .mapv(|v| (v.exp() - cfg.log_floor).max(0.0));
        if target.iter().all(|&v| v == 0.0) {
            continue;
        }
        let weights = nnls(&atoms.mel_image, &target.view());
        let mut row = mag.row_mut(f);
        for (a, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                let scale = w / atoms.column_norms[a];
                for &(k, v) in &atoms.taps[a] {
                    row[k] += scale * v;
                }
            }
        }
    }
    mag
}

/// Griffin-Lim inversion of a log-mel spectrogram.
///
/// Deterministic for a fixed `phase_seed`; the output length is
/// `(F - 1) * hop + win`, i.e. `F * hop` give or take one window.
pub fn griffin_lim_invert(
    m: &MelSpectrogram,
    cfg: &MelConfig,
    n_iters: usize,
    phase_seed: u64,
) -> Result<Waveform> {
    if n_iters == 0 {
        return Err(Error::InvalidArgument("griffin-lim needs n_iters >= 1".into()));
    }
    if m.frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::Audio("mel input contains non-finite values".into()));
    }
    if m.n_mels() != cfg.n_mels {
        return Err(Error::Shape(format!(
            "mel has {} bins, config expects {}",
            m.n_mels(),
            cfg.n_mels
        )));
    }

    let mag = mel_to_linear(m, cfg);
    let stft = Stft::new(cfg.win_length, cfg.hop_length);
    let (frames, bins) = mag.dim();

    let mut rng = ChaCha12Rng::seed_from_u64(phase_seed);
    let mut spec = Array2::from_shape_fn((frames, bins), |(f, k)| {
        let phi: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        Complex64::from_polar(mag[[f, k]], phi)
    });

    // accelerated update: phase from rebuilt + momentum extrapolation
    let momentum = 0.95;
    let mut prev: Option<Array2<Complex64>> = None;
    for _ in 0..n_iters {
        let x = stft.inverse(&spec);
        let rebuilt = stft.forward(&x);
        for f in 0..frames.min(rebuilt.nrows()) {
            for k in 0..bins {
                let mut v = rebuilt[[f, k]];
                if let Some(p) = &prev {
                    v -= p[[f, k]] * (momentum / (1.0 + momentum));
                }
                let phase = if v.norm() > 0.0 { v.arg() } else { 0.0 };
                spec[[f, k]] = Complex64::from_polar(mag[[f, k]], phase);
            }
        }
        prev = Some(rebuilt);
    }
    let x = stft.inverse(&spec);
    Waveform::new_normalized(x, cfg.sample_rate_hz)
}

/// The default vocoder: Griffin-Lim with a fixed phase seed.
pub struct GriffinLimVocoder {
    pub cfg: MelConfig,
    pub n_iters: usize,
    pub phase_seed: u64,
}

impl GriffinLimVocoder {
    pub fn new(cfg: MelConfig) -> Self {
        Self {
            cfg,
            n_iters: 60,
            phase_seed: 0,
        }
    }
}

impl VocoderInterface for GriffinLimVocoder {
    fn name(&self) -> &str {
        "griffin-lim"
    }

    fn invert(&self, m: &MelSpectrogram) -> Result<Waveform> {
        griffin_lim_invert(m, &self.cfg, self.n_iters, self.phase_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::mel_spectrogram;
    use crate::synth::sine;
    use ndarray::array;

    #[test]
    fn nnls_recovers_nonneg_solution() {
        let a = array![[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]];
        let truth = array![0.25, 0.0, 1.0];
        let b = a.dot(&truth);
        let x = nnls(&a, &b.view());
        let err = (&a.dot(&x) - &b).mapv(f64::abs).sum();
        assert!(err < 1e-8, "residual {err}");
        assert!(x.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn tone_round_trip_keeps_pitch() {
        let cfg = MelConfig::default();
        let w = sine(440.0, 22_050, 22_050, 0.5);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        let inv = griffin_lim_invert(&m, &cfg, 60, 0).unwrap();
        let expected = m.n_frames() * cfg.hop_length;
        assert!(
            (inv.len() as i64 - expected as i64).unsigned_abs() as usize <= cfg.win_length,
            "length {} vs {expected}",
            inv.len()
        );
        let peak = crate::eval::dominant_frequency_hz(inv.samples(), 22_050);
        assert!((peak - 440.0).abs() <= 5.0, "peak at {peak} Hz");
    }

    #[test]
    fn silence_in_silence_out() {
        let cfg = MelConfig::default();
        let floor = cfg.floor_value();
        let frames = Array2::from_elem((40, 80), floor);
        let m = MelSpectrogram::new(frames, cfg.hop_s(), cfg.window_s(), 22_050).unwrap();
        let inv = griffin_lim_invert(&m, &cfg, 10, 0).unwrap();
        assert!(inv.rms() < 1e-3, "rms {}", inv.rms());
    }

    #[test]
    fn more_iterations_reduce_mel_error() {
        let cfg = MelConfig::default();
        let w = sine(523.25, 22_050, 11_025, 0.4);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        let mut maes = Vec::new();
        for iters in [10usize, 30, 60] {
            let inv = griffin_lim_invert(&m, &cfg, iters, 0).unwrap();
            let back = mel_spectrogram(&inv, &cfg).unwrap();
            let n = m.n_frames().min(back.n_frames());
            let mut mae = 0.0;
            for f in 0..n {
                for b in 0..cfg.n_mels {
                    mae += (m.frames[[f, b]] - back.frames[[f, b]]).abs();
                }
            }
            maes.push(mae / (n * cfg.n_mels) as f64);
        }
        assert!(
            maes[0] > maes[1] && maes[1] > maes[2],
            "mel error not decreasing: {maes:?}"
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = MelConfig::default();
        let w = sine(300.0, 22_050, 6000, 0.4);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        let a = griffin_lim_invert(&m, &cfg, 5, 9).unwrap();
        let b = griffin_lim_invert(&m, &cfg, 5, 9).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = MelConfig::default();
        let frames = Array2::from_elem((4, 80), -5.0);
        let m = MelSpectrogram::new(frames, cfg.hop_s(), cfg.window_s(), 22_050).unwrap();
        assert!(griffin_lim_invert(&m, &cfg, 0, 0).is_err());
    }
}

