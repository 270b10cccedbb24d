//! Mel-domain dynamic time warping and the prior-alignment step behind the
//! "P-" metrics.

use ndarray::Array2;

use crate::audio::{mel_spectrogram, MelConfig, Waveform};
use crate::{Error, Result};

/// Monotonic, boundary-anchored DTW path between two frame sequences, using
/// Euclidean frame distance and symmetric (diagonal/vertical/horizontal)
/// steps. Returns `(i, j)` index pairs from `(0, 0)` to `(n-1, m-1)`.
pub fn dtw_path(a: &Array2<f64>, b: &Array2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = (a.nrows(), b.nrows());
    assert!(n > 0 && m > 0, "dtw needs non-empty inputs");
    assert_eq!(a.ncols(), b.ncols(), "dtw feature dims differ");

    let dist = |i: usize, j: usize| -> f64 {
        a.row(i)
            .iter()
            .zip(b.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };

    let mut cost = Array2::from_elem((n, m), f64::INFINITY);
    cost[[0, 0]] = dist(0, 0);
    for i in 0..n {
        for j in 0..m {
            if i == 0 && j == 0 {
                continue;
            }
            let mut best = f64::INFINITY;
            if i > 0 && j > 0 {
                best = best.min(cost[[i - 1, j - 1]]);
            }
            if i > 0 {
                best = best.min(cost[[i - 1, j]]);
            }
            if j > 0 {
                best = best.min(cost[[i, j - 1]]);
            }
            cost[[i, j]] = dist(i, j) + best;
        }
    }

    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 {
            cost[[i - 1, j - 1]]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 { cost[[i - 1, j]] } else { f64::INFINITY };
        let left = if j > 0 { cost[[i, j - 1]] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    path
}

/// Prior alignment: warps `test` onto `reference`'s time axis.
///
/// The warp path is computed on mel frames; `test` audio is then rebuilt by
/// duplicating or dropping hop-sized blocks so both outputs span exactly the
/// reference's frame grid. Outputs have equal lengths.
pub fn p_align(
    reference: &Waveform,
    test: &Waveform,
    cfg: &MelConfig,
) -> Result<(Waveform, Waveform)> {
    let mel_ref = mel_spectrogram(reference, cfg)?;
    let mel_test = mel_spectrogram(test, cfg)?;
    let floor = cfg.floor_value();
    let active = |m: &ndarray::Array2<f64>| {
        m.rows().into_iter().any(|r| {
            let mean = r.sum() / r.len() as f64;
            mean > floor + 0.5
        })
    };
    if !active(&mel_ref.frames) || !active(&mel_test.frames) {
        return Err(Error::Metric(
            "prior alignment on an all-silence signal is degenerate".into(),
        ));
    }

    let path = dtw_path(&mel_ref.frames, &mel_test.frames);

    // last test frame matched to each reference frame
    let n_ref = mel_ref.n_frames();
    let mut mapping = vec![0usize; n_ref];
    for &(i, j) in &path {
        mapping[i] = j;
    }

    let hop = cfg.hop_length;
    let out_len = n_ref * hop;
    let mut warped = Vec::with_capacity(out_len);
    for &j in &mapping {
        let start = j * hop;
        for k in 0..hop {
            warped.push(test.samples().get(start + k).copied().unwrap_or(0.0));
        }
    }
    let mut ref_trim = reference.samples().to_vec();
    ref_trim.resize(out_len, 0.0);

    Ok((
        Waveform::new(ref_trim, cfg.sample_rate_hz)?,
        Waveform::new(warped, cfg.sample_rate_hz)?,
    ))
}
