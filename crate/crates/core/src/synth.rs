//! Synthetic speakers and utterances.
//!
//! Small deterministic audio generators for tests, demos and the built-in
//! smoke corpora: tones, noise, and a toy "speaker" model with a controllable
//! spectral tilt, fundamental and speaking rate. Utterances come with exact
//! phoneme alignments, which makes them usable end to end (stats, encoder and
//! decoder training, conversion, evaluation).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::audio::Waveform;

/// Pure tone.
pub fn sine(freq_hz: f64, sample_rate_hz: u32, len: usize, amp: f64) -> Waveform {
    let w = 2.0 * PI * freq_hz / sample_rate_hz as f64;
    Waveform::new(
        (0..len).map(|i| amp * (w * i as f64).sin()).collect(),
        sample_rate_hz,
    )
    .expect("sine amplitudes in range")
}

/// Uniform white noise in `[-amp, amp]`.
pub fn white_noise(sample_rate_hz: u32, len: usize, amp: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Waveform::new(
        (0..len).map(|_| rng.random_range(-amp..amp)).collect(),
        sample_rate_hz,
    )
    .expect("noise amplitudes in range")
}

/// Speech-shaped test signal: broadband noise with a slow random amplitude
/// envelope, so short-time envelopes carry information (unlike a steady tone).
pub fn modulated_noise(sample_rate_hz: u32, len: usize, amp: f64, seed: u64) -> Waveform {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // random envelope nodes every ~60 ms, linearly interpolated
    let node_step = (sample_rate_hz as usize * 6) / 100;
    let n_nodes = len / node_step + 2;
    let nodes: Vec<f64> = (0..n_nodes).map(|_| rng.random_range(0.15..1.0)).collect();
    let samples: Vec<f64> = (0..len)
        .map(|i| {
            let pos = i as f64 / node_step as f64;
            let k = pos.floor() as usize;
            let frac = pos - k as f64;
            let env = nodes[k] * (1.0 - frac) + nodes[k + 1] * frac;
            amp * env * rng.random_range(-1.0..1.0)
        })
        .collect();
    Waveform::new(samples, sample_rate_hz).expect("modulated noise in range")
}

/// A toy speaker: harmonic voice with a spectral tilt and a speaking rate.
#[derive(Debug, Clone)]
pub struct SyntheticSpeaker {
    pub id: String,
    /// Spectral tilt in dB per octave relative to 1 kHz. Negative = dark voice.
    pub tilt_db_per_octave: f64,
    /// Fundamental frequency in Hz.
    pub f0_hz: f64,
    /// Multiplier on every phoneme duration (speaking slowness).
    pub duration_scale: f64,
}

impl SyntheticSpeaker {
    pub fn new(id: &str, tilt_db_per_octave: f64, f0_hz: f64, duration_scale: f64) -> Self {
        Self {
            id: id.into(),
            tilt_db_per_octave,
            f0_hz,
            duration_scale,
        }
    }

    fn gain_at(&self, freq_hz: f64) -> f64 {
        let octaves = (freq_hz / 1000.0).log2();
        10f64.powf(self.tilt_db_per_octave * octaves / 20.0)
    }
}

/// Toy phoneme inventory: silence plus five voiced/fricative templates.
pub const TOY_PHONEMES: [&str; 6] = ["sil", "aa", "iy", "uw", "eh", "ss"];

/// Component frequencies and weights for a toy phoneme, plus its base duration.
fn phoneme_template(label: &str) -> (Vec<(f64, f64)>, f64, bool) {
    // (components as (freq, weight), base duration seconds, is_noise)
    match label {
        "aa" => (vec![(700.0, 1.0), (1220.0, 0.7), (2600.0, 0.25)], 0.16, false),
        "iy" => (vec![(300.0, 1.0), (2300.0, 0.6), (3000.0, 0.3)], 0.13, false),
        "uw" => (vec![(350.0, 1.0), (800.0, 0.8), (2200.0, 0.15)], 0.15, false),
        "eh" => (vec![(580.0, 1.0), (1800.0, 0.65), (2550.0, 0.3)], 0.12, false),
        "ss" => (vec![(5000.0, 1.0)], 0.11, true),
        _ => (vec![], 0.10, false), // sil
    }
}

/// One labeled interval of a synthetic utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthInterval {
    pub label: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Renders a phoneme sequence for a speaker; returns audio and its alignment.
pub fn synth_utterance(
    speaker: &SyntheticSpeaker,
    phonemes: &[&str],
    sample_rate_hz: u32,
    seed: u64,
) -> (Waveform, Vec<SynthInterval>) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sr = sample_rate_hz as f64;
    let mut samples: Vec<f64> = Vec::new();
    let mut intervals = Vec::new();
    let mut t0 = 0.0f64;

    for &label in phonemes {
        let (components, base_dur, is_noise) = phoneme_template(label);
        let dur = if label == "sil" {
            base_dur
        } else {
            base_dur * speaker.duration_scale * rng.random_range(0.92..1.08)
        };
        let n = (dur * sr).round() as usize;
        let fade = ((0.02 * sr) as usize).min(n / 2);
        for i in 0..n {
            let t = i as f64 / sr;
            let mut v = 0.0;
            if label == "sil" {
                v = rng.random_range(-1e-4..1e-4);
            } else if is_noise {
                // noise band shaped around the template frequency
                let carrier = (2.0 * PI * components[0].0 * t).sin();
                v = 0.4
                    * speaker.gain_at(components[0].0)
                    * carrier
                    * rng.random_range(0.3..1.0);
            } else {
                // harmonic stack at the speaker f0 with formant-weighted amplitudes
                for &(freq, weight) in &components {
                    let harmonic = (freq / speaker.f0_hz).round().max(1.0);
                    let f = harmonic * speaker.f0_hz;
                    v += weight * speaker.gain_at(f) * (2.0 * PI * f * t).sin();
                }
                // fundamental for pitch identity
                v += 0.5 * speaker.gain_at(speaker.f0_hz) * (2.0 * PI * speaker.f0_hz * t).sin();
            }
            let env = if i < fade {
                0.5 - 0.5 * (PI * (i as f64 / fade as f64 - 1.0)).cos()
            } else if i + fade > n {
                let r = (n - i) as f64 / fade as f64;
                0.5 - 0.5 * (PI * (r - 1.0)).cos()
            } else {
                1.0
            };
            samples.push(v * env);
        }
        let t1 = t0 + n as f64 / sr;
        intervals.push(SynthInterval {
            label: label.to_string(),
            start_s: t0,
            end_s: t1,
        });
        t0 = t1;
    }

    // normalize to a fixed peak
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-12);
    for s in &mut samples {
        *s *= 0.5 / peak;
    }
    (
        Waveform::new(samples, sample_rate_hz).expect("synth output in range"),
        intervals,
    )
}

/// A generated utterance with its id and alignment.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub id: String,
    pub audio: Waveform,
    pub intervals: Vec<SynthInterval>,
}

/// Deterministic corpus for a speaker: random non-silence phoneme sequences
/// bracketed by silence, `n_utts` of them.
pub fn synth_corpus(
    speaker: &SyntheticSpeaker,
    n_utts: usize,
    sample_rate_hz: u32,
    seed: u64,
) -> Vec<SynthUtterance> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let voiced: Vec<&str> = TOY_PHONEMES[1..].to_vec();
    (0..n_utts)
        .map(|u| {
            let n_ph = rng.random_range(4..7);
            let mut seq = vec!["sil"];
            for _ in 0..n_ph {
                seq.push(voiced[rng.random_range(0..voiced.len())]);
            }
            seq.push("sil");
            let (audio, intervals) =
                synth_utterance(speaker, &seq, sample_rate_hz, rng.random());
            SynthUtterance {
                id: format!("{}_{u:03}", speaker.id),
                audio,
                intervals,
            }
        })
        .collect()
}
