//! Band-limited waveform resampling.

use std::f64::consts::PI;

use super::Waveform;
use crate::{Error, Result};

/// Half-width of the windowed-sinc kernel in zero crossings.
const KERNEL_HALF_WIDTH: usize = 32;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window evaluated on [-1, 1].
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let x = 0.5 * (u + 1.0); // -> [0, 1]
    0.42 - 0.5 * (2.0 * PI * x).cos() + 0.08 * (4.0 * PI * x).cos()
}

/// Resamples with a windowed-sinc interpolation kernel.
///
/// The kernel cutoff sits just below the lower of the two Nyquist frequencies,
/// so downsampling does not alias. Identical input/output rates return the
/// input unchanged.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if target_hz == 0 {
        return Err(Error::Audio("target sample rate must be positive".into()));
    }
    if w.is_empty() {
        return Err(Error::Audio("cannot resample an empty waveform".into()));
    }
    if target_hz == w.sample_rate_hz() {
        return Ok(w.clone());
    }

    let src = w.samples();
    let ratio = target_hz as f64 / w.sample_rate_hz() as f64;
    let out_len = (src.len() as f64 * ratio).round().max(1.0) as usize;

    // Normalized cutoff relative to the input rate, backed off 5% for the
    // transition band of the finite kernel.
    let cutoff = 0.5 * ratio.min(1.0) * 0.95;
    // When downsampling the kernel is dilated by 1/ratio, widening support.
    let scale = 2.0 * cutoff;
    let half_width = if ratio < 1.0 {
        (KERNEL_HALF_WIDTH as f64 / ratio).ceil() as isize
    } else {
        KERNEL_HALF_WIDTH as isize
    };

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let center = n as f64 / ratio;
        let j0 = (center.floor() as isize - half_width).max(0);
        let j1 = (center.floor() as isize + half_width + 1).min(src.len() as isize - 1);
        let mut acc = 0.0;
        for j in j0..=j1 {
            let dx = center - j as f64;
            let u = dx / (half_width as f64 + 1.0);
            acc += src[j as usize] * scale * sinc(scale * dx) * blackman(u);
        }
        out.push(acc.clamp(-1.0, 1.0));
    }
    Waveform::new(out, target_hz)
}
