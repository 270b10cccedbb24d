//! Short-time objective intelligibility (STOI) and its extended variant.
//!
//! Both metrics share the same time-frequency decomposition: signals are
//! resampled to 10 kHz, framed with 256-sample Hann windows at 50% overlap,
//! zero-padded to a 512-point FFT, and collapsed onto 15 one-third-octave
//! bands starting at 150 Hz. Frames more than 40 dB below the loudest
//! reference frame are discarded before analysis. Scores are correlations of
//! 30-frame (384 ms) band-envelope segments, averaged and clamped to [0, 1].

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{hann_window, resample, Waveform};
use crate::{Error, Result};

const TARGET_RATE: u32 = 10_000;
const FRAME_LEN: usize = 256;
const HOP: usize = 128;
const FFT_LEN: usize = 512;
const N_BANDS: usize = 15;
const LOWEST_CENTER_HZ: f64 = 150.0;
const SEGMENT_FRAMES: usize = 30;
const VAD_RANGE_DB: f64 = 40.0;
const CLIP_SDR_DB: f64 = -15.0;

/// One-third-octave band edges `(lo, hi)` for the 15 analysis bands.
fn band_edges() -> [(f64, f64); N_BANDS] {
    let mut out = [(0.0, 0.0); N_BANDS];
    for (k, e) in out.iter_mut().enumerate() {
        let center = LOWEST_CENTER_HZ * 2f64.powf(k as f64 / 3.0);
        *e = (center / 2f64.powf(1.0 / 6.0), center * 2f64.powf(1.0 / 6.0));
    }
    out
}

/// Frame both signals, drop frame pairs where the reference is silent, and
/// return one-third-octave band envelopes, `frames x bands`.
fn band_envelopes(reference: &[f64], degraded: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
    let n_frames = if reference.len() < FRAME_LEN {
        0
    } else {
        1 + (reference.len() - FRAME_LEN) / HOP
    };
    if n_frames == 0 {
        return Err(Error::Metric("signal shorter than one analysis frame".into()));
    }
    let window = hann_window(FRAME_LEN);

    // reference-frame energies for voice activity detection
    let mut energies = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let start = f * HOP;
        let e: f64 = (0..FRAME_LEN)
            .map(|i| {
                let v = reference[start + i] * window[i];
                v * v
            })
            .sum();
        energies.push(e);
    }
    let max_e = energies.iter().cloned().fold(0.0f64, f64::max);
    if max_e <= 0.0 {
        return Err(Error::Metric("reference signal is silent".into()));
    }
    let threshold = max_e * 10f64.powf(-VAD_RANGE_DB / 10.0);
    let active: Vec<usize> = (0..n_frames).filter(|&f| energies[f] > threshold).collect();
    if active.len() < SEGMENT_FRAMES {
        return Err(Error::Metric(format!(
            "only {} speech-active frames; need at least {SEGMENT_FRAMES} (384 ms)",
            active.len()
        )));
    }

    let edges = band_edges();
    let bin_hz = TARGET_RATE as f64 / FFT_LEN as f64;
    let fft = FftPlanner::new().plan_fft_forward(FFT_LEN);
    let mut spectrum =
        |signal: &[f64], frame: usize| -> Vec<f64> {
            let start = frame * HOP;
            let mut buf = vec![Complex64::new(0.0, 0.0); FFT_LEN];
            for i in 0..FRAME_LEN {
                let s = signal.get(start + i).copied().unwrap_or(0.0);
                buf[i] = Complex64::new(s * window[i], 0.0);
            }
            fft.process(&mut buf);
            buf[..FFT_LEN / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        };

    let mut env_ref = Array2::zeros((active.len(), N_BANDS));
    let mut env_deg = Array2::zeros((active.len(), N_BANDS));
    for (row, &f) in active.iter().enumerate() {
        let pr = spectrum(reference, f);
        let pd = spectrum(degraded, f);
        for (b, &(lo, hi)) in edges.iter().enumerate() {
            let mut er = 0.0;
            let mut ed = 0.0;
            for (k, (r, d)) in pr.iter().zip(&pd).enumerate() {
                let freq = k as f64 * bin_hz;
                if freq >= lo && freq < hi {
                    er += r;
                    ed += d;
                }
            }
            env_ref[[row, b]] = er.sqrt();
            env_deg[[row, b]] = ed.sqrt();
        }
    }
    Ok((env_ref, env_deg))
}

fn prepare(reference: &Waveform, degraded: &Waveform) -> Result<(Array2<f64>, Array2<f64>)> {
    if reference.len() != degraded.len() {
        return Err(Error::Metric(format!(
            "length mismatch: reference {} vs degraded {} samples (align first)",
            reference.len(),
            degraded.len()
        )));
    }
    if reference.sample_rate_hz() != degraded.sample_rate_hz() {
        return Err(Error::Metric("sample-rate mismatch".into()));
    }
    let r = resample(reference, TARGET_RATE)?;
    let d = resample(degraded, TARGET_RATE)?;
    let n = r.len().min(d.len());
    band_envelopes(&r.samples()[..n], &d.samples()[..n])
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        num += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    let den = (vx * vy).sqrt();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// STOI between a reference and an equal-length degraded signal, in [0, 1].
pub fn stoi(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    let (env_ref, env_deg) = prepare(reference, degraded)?;
    let n_rows = env_ref.nrows();
    let clip_bound = 1.0 + 10f64.powf(CLIP_SDR_DB / 20.0);

    let mut acc = 0.0;
    let mut count = 0usize;
    for m in SEGMENT_FRAMES..=n_rows {
        for b in 0..N_BANDS {
            let x: Vec<f64> = (m - SEGMENT_FRAMES..m).map(|r| env_ref[[r, b]]).collect();
            let y: Vec<f64> = (m - SEGMENT_FRAMES..m).map(|r| env_deg[[r, b]]).collect();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let scale = nx / ny;
            let y_aligned: Vec<f64> = x
                .iter()
                .zip(&y)
                .map(|(xv, yv)| (yv * scale).min(xv * clip_bound))
                .collect();
            acc += pearson(&x, &y_aligned);
            count += 1;
        }
    }
    Ok((acc / count as f64).clamp(0.0, 1.0))
}

/// Extended STOI: segment-level spectral correlation with row/column
/// mean-variance normalization and no clipping.
pub fn estoi(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    let (env_ref, env_deg) = prepare(reference, degraded)?;
    let n_rows = env_ref.nrows();

    // normalize rows (bands) then columns (frames) to zero mean, unit norm
    let normalize = |seg: &mut Array2<f64>| {
        for mut row in seg.rows_mut() {
            let mean = row.sum() / row.len() as f64;
            row.mapv_inplace(|v| v - mean);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            row.mapv_inplace(|v| v / norm);
        }
        for mut col in seg.columns_mut() {
            let mean = col.sum() / col.len() as f64;
            col.mapv_inplace(|v| v - mean);
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            col.mapv_inplace(|v| v / norm);
        }
    };

    let mut acc = 0.0;
    let mut count = 0usize;
    for m in SEGMENT_FRAMES..=n_rows {
        // band x frame matrices for this segment
        let mut seg_ref = Array2::zeros((N_BANDS, SEGMENT_FRAMES));
        let mut seg_deg = Array2::zeros((N_BANDS, SEGMENT_FRAMES));
        for (i, r) in (m - SEGMENT_FRAMES..m).enumerate() {
            for b in 0..N_BANDS {
                seg_ref[[b, i]] = env_ref[[r, b]];
                seg_deg[[b, i]] = env_deg[[r, b]];
            }
        }
        normalize(&mut seg_ref);
        normalize(&mut seg_deg);
        let d: f64 = seg_ref
            .iter()
            .zip(seg_deg.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / SEGMENT_FRAMES as f64;
        acc += d;
        count += 1;
    }
    Ok((acc / count as f64).clamp(0.0, 1.0))
}
