//! Speaker embeddings: a pluggable provider interface with a non-neural
//! built-in reference, cosine similarity, and the source/target/generated
//! similarity protocol.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::audio::{mel_spectrogram, MelConfig, Waveform};
use crate::{Error, Result};

/// Fixed-length voice-identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub v: Array1<f64>,
    pub speaker_id: Option<String>,
}

impl SpeakerEmbedding {
    pub fn new(v: Array1<f64>, speaker_id: Option<String>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Audio("embedding has non-finite entries".into()));
        }
        if v.iter().map(|x| x * x).sum::<f64>() <= 0.0 {
            return Err(Error::Audio("embedding must be non-zero".into()));
        }
        Ok(Self { v, speaker_id })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// Anything that can produce a speaker embedding for an utterance.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// `utterance_id` keys file-based providers; audio-based providers ignore it.
    fn embed_utterance(&self, utterance_id: &str, audio: &Waveform) -> Result<SpeakerEmbedding>;
}

/// Minimum audio the built-in embedder accepts.
const MIN_EMBED_SECONDS: f64 = 0.5;
/// Frames within this many nats of the loudest frame count as voiced.
const VOICED_RANGE: f64 = 4.0;
/// Fixed projection seed; changing it invalidates stored embeddings.
const PROJECTION_SEED: u64 = 0x5045_4d42_4544_0001;

/// The built-in reference embedder: per-mel-bin mean and standard deviation
/// over voiced frames (2 x n_mels dims), projected by a fixed seeded random
/// matrix and length-normalized. No training involved.
pub struct BuiltinEmbedder {
    mel_cfg: MelConfig,
    dim: usize,
    projection: Array2<f64>,
}

impl BuiltinEmbedder {
    pub fn new(mel_cfg: MelConfig, dim: usize) -> Self {
        let in_dim = 2 * mel_cfg.n_mels;
        let mut rng = ChaCha12Rng::seed_from_u64(PROJECTION_SEED);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let projection =
            Array2::from_shape_fn((dim, in_dim), |_| rng.random_range(-1.0..1.0) * scale);
        Self {
            mel_cfg,
            dim,
            projection,
        }
    }

    pub fn default_dim(mel_cfg: MelConfig) -> Self {
        Self::new(mel_cfg, 256)
    }
}

impl EmbeddingProvider for BuiltinEmbedder {
    fn name(&self) -> &str {
        "builtin-mel-stats"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_utterance(&self, _id: &str, audio: &Waveform) -> Result<SpeakerEmbedding> {
        if audio.duration_s() < MIN_EMBED_SECONDS {
            return Err(Error::Audio(format!(
                "utterance too short to embed: {:.3} s < {MIN_EMBED_SECONDS} s",
                audio.duration_s()
            )));
        }
        let audio = if audio.sample_rate_hz() == self.mel_cfg.sample_rate_hz {
            audio.clone()
        } else {
            crate::audio::resample(audio, self.mel_cfg.sample_rate_hz)?
        };
        let mel = mel_spectrogram(&audio, &self.mel_cfg)?;
        let n_mels = mel.n_mels();

        let frame_means: Vec<f64> = mel
            .frames
            .rows()
            .into_iter()
            .map(|r| r.sum() / n_mels as f64)
            .collect();
        let loudest = frame_means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let voiced: Vec<usize> = (0..mel.n_frames())
            .filter(|&i| frame_means[i] > loudest - VOICED_RANGE)
            .collect();

        let mut stats = Array1::zeros(2 * n_mels);
        for b in 0..n_mels {
            let vals: Vec<f64> = voiced.iter().map(|&i| mel.frames[[i, b]]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            stats[b] = mean;
            stats[n_mels + b] = var.sqrt();
        }
        let mut v = self.projection.dot(&stats);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        v.mapv_inplace(|x| x / norm);
        SpeakerEmbedding::new(v, None)
    }
}

/// Embeddings precomputed by an external system, one record per utterance:
/// `utterance_id<TAB>hex(f32 little-endian x dim)`.
pub struct FileEmbeddingProvider {
    dim: usize,
    table: BTreeMap<String, Array1<f64>>,
}

impl FileEmbeddingProvider {
    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, hex_str) = line.split_once('\t').ok_or_else(|| Error::Config(format!(
                "{}: line {}: expected utterance_id<TAB>hex",
                path.display(),
                lineno + 1
            )))?;
            let bytes = hex::decode(hex_str.trim()).map_err(|e| {
                Error::Config(format!("{}: line {}: bad hex: {e}", path.display(), lineno + 1))
            })?;
            if bytes.len() != dim * 4 {
                return Err(Error::Config(format!(
                    "{}: line {}: {} bytes, expected {} (f32 x {dim})",
                    path.display(),
                    lineno + 1,
                    bytes.len(),
                    dim * 4
                )));
            }
            let v = Array1::from_iter(bytes.chunks_exact(4).map(|c| {
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
            }));
            table.insert(id.to_string(), v);
        }
        Ok(Self { dim, table })
    }

    /// Writes the documented TSV-hex format.
    pub fn save(path: impl AsRef<Path>, entries: &[(String, Array1<f64>)]) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (id, v) in entries {
            let mut bytes = Vec::with_capacity(v.len() * 4);
            for x in v.iter() {
                bytes.extend_from_slice(&(*x as f32).to_le_bytes());
            }
            out.push_str(&format!("{id}\t{}\n", hex::encode(bytes)));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl EmbeddingProvider for FileEmbeddingProvider {
    fn name(&self) -> &str {
        "external-file"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_utterance(&self, id: &str, _audio: &Waveform) -> Result<SpeakerEmbedding> {
        let v = self
            .table
            .get(id)
            .ok_or_else(|| Error::Metric(format!("no embedding on file for utterance {id:?}")))?;
        SpeakerEmbedding::new(v.clone(), None)
    }
}

/// Cosine similarity in [-1, 1].
pub fn cosine_similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let na = a.v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Metric("cosine of a zero vector".into()));
    }
    Ok(a.v.dot(&b.v) / (na * nb))
}

/// Length-normalized mean of a set of embeddings.
pub fn mean_embedding(list: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    let first = list
        .first()
        .ok_or_else(|| Error::Metric("cannot average an empty embedding set".into()))?;
    let mut acc = Array1::zeros(first.dim());
    for e in list {
        if e.dim() != first.dim() {
            return Err(Error::Shape("embedding dims differ in mean".into()));
        }
        acc += &e.v;
    }
    acc.mapv_inplace(|x| x / list.len() as f64);
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    acc.mapv_inplace(|x| x / norm);
    SpeakerEmbedding::new(acc, first.speaker_id.clone())
}

/// Mean cosine similarities between sources (S), targets (T) and generated
/// voices (G), as percentages.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimilarityReport {
    pub s_with_t: f64,
    pub s_with_g: f64,
    pub t_with_g: f64,
    pub n_pairs: usize,
}

/// Table-4-style protocol: for every (source speaker, target speaker) pair
/// with converted output, compare the set-mean embeddings of the three roles
/// and average the cosines over pairs.
pub fn similarity_protocol(
    sources: &BTreeMap<String, Vec<SpeakerEmbedding>>,
    targets: &BTreeMap<String, Vec<SpeakerEmbedding>>,
    converted: &BTreeMap<(String, String), Vec<SpeakerEmbedding>>,
) -> Result<SimilarityReport> {
    if converted.is_empty() {
        return Err(Error::Metric("no converted utterances to score".into()));
    }
    let mut s_t = 0.0;
    let mut s_g = 0.0;
    let mut t_g = 0.0;
    let mut n = 0usize;
    for ((src, tgt), gen) in converted {
        let s_set = sources
            .get(src)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Metric(format!("no source utterances for {src:?}")))?;
        let t_set = targets
            .get(tgt)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| Error::Metric(format!("no target utterances for {tgt:?}")))?;
        if gen.is_empty() {
            return Err(Error::Metric(format!(
                "empty converted set for pair ({src:?}, {tgt:?})"
            )));
        }
        let s = mean_embedding(s_set)?;
        let t = mean_embedding(t_set)?;
        let g = mean_embedding(gen)?;
        s_t += cosine_similarity(&s, &t)?;
        s_g += cosine_similarity(&s, &g)?;
        t_g += cosine_similarity(&t, &g)?;
        n += 1;
    }
    Ok(SimilarityReport {
        s_with_t: 100.0 * s_t / n as f64,
        s_with_g: 100.0 * s_g / n as f64,
        t_with_g: 100.0 * t_g / n as f64,
        n_pairs: n,
    })
}
