//! The speaker-independent mel-spectrogram (SIMS) dictionary: per-phoneme mean
//! mel vectors aggregated over a corpus, and the frame-replacement operation
//! that builds ground-truth SIMS matrices.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{PhonemeId, PhonemeInventory};
use crate::audio::MelSpectrogram;
use crate::container::{read_container, write_container};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DVSD";
const VERSION: u32 = 1;

/// Order-insensitive accumulator for the dictionary. Partial accumulators
/// built in parallel merge associatively.
#[derive(Debug, Clone)]
pub struct SimsAccumulator {
    inventory: PhonemeInventory,
    n_mels: usize,
    sums: Array2<f64>,
    comps: Array2<f64>,
    counts: Vec<u64>,
}

impl SimsAccumulator {
    pub fn new(inventory: PhonemeInventory, n_mels: usize) -> Self {
        let p = inventory.len();
        Self {
            inventory,
            n_mels,
            sums: Array2::zeros((p, n_mels)),
            comps: Array2::zeros((p, n_mels)),
            counts: vec![0; p],
        }
    }

    fn kahan_add(&mut self, p: usize, bin: usize, value: f64) {
        let y = value - self.comps[[p, bin]];
        let t = self.sums[[p, bin]] + y;
        self.comps[[p, bin]] = (t - self.sums[[p, bin]]) - y;
        self.sums[[p, bin]] = t;
    }

    /// Accumulates every frame of one utterance under its label.
    pub fn add_frames(&mut self, frames: &Array2<f64>, labels: &[PhonemeId]) -> Result<()> {
        if frames.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} frames but {} labels",
                frames.nrows(),
                labels.len()
            )));
        }
        if frames.ncols() != self.n_mels {
            return Err(Error::Shape(format!(
                "expected {} mel bins, got {}",
                self.n_mels,
                frames.ncols()
            )));
        }
        for (f, &label) in labels.iter().enumerate() {
            if label.0 >= self.inventory.len() {
                return Err(Error::Shape(format!("label id {} out of range", label.0)));
            }
            for bin in 0..self.n_mels {
                self.kahan_add(label.0, bin, frames[[f, bin]]);
            }
            self.counts[label.0] += 1;
        }
        Ok(())
    }

    /// Merges another partial accumulator into this one.
    pub fn merge(&mut self, other: &SimsAccumulator) -> Result<()> {
        if other.inventory != self.inventory || other.n_mels != self.n_mels {
            return Err(Error::Shape("accumulator configs differ".into()));
        }
        for p in 0..self.counts.len() {
            for bin in 0..self.n_mels {
                self.kahan_add(p, bin, other.sums[[p, bin]] + other.comps[[p, bin]]);
            }
            self.counts[p] += other.counts[p];
        }
        Ok(())
    }

    pub fn finish(self) -> SimsDictionary {
        let p = self.counts.len();
        let mut means = Array2::zeros((p, self.n_mels));
        for i in 0..p {
            if self.counts[i] > 0 {
                for bin in 0..self.n_mels {
                    means[[i, bin]] = self.sums[[i, bin]] / self.counts[i] as f64;
                }
            }
        }
        SimsDictionary {
            inventory: self.inventory,
            means,
            counts: self.counts,
        }
    }
}

/// Phoneme id -> mean log-mel vector, with observation counts. Rows with
/// count 0 have undefined means and refuse lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct SimsDictionary {
    inventory: PhonemeInventory,
    means: Array2<f64>,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct SimsMeta {
    inventory: PhonemeInventory,
    inventory_hash: String,
    n_mels: usize,
    counts: Vec<u64>,
}

impl SimsDictionary {
    pub fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }

    pub fn n_mels(&self) -> usize {
        self.means.ncols()
    }

    pub fn count(&self, p: PhonemeId) -> u64 {
        self.counts[p.0]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Mean vector of a phoneme; errors if the phoneme was never observed.
    pub fn mean(&self, p: PhonemeId) -> Result<ndarray::ArrayView1<'_, f64>> {
        if self.counts[p.0] == 0 {
            return Err(Error::EmptyPhoneme {
                label: self.inventory.label(p).to_string(),
            });
        }
        Ok(self.means.row(p.0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = SimsMeta {
            inventory: self.inventory.clone(),
            inventory_hash: self.inventory.content_hash(),
            n_mels: self.n_mels(),
            counts: self.counts.clone(),
        };
        let means: Vec<f64> = self.means.iter().copied().collect();
        write_container(path, MAGIC, VERSION, &meta, &[("means", &means)])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (meta, blobs): (SimsMeta, _) = read_container(path, MAGIC, VERSION)?;
        let inventory = meta.inventory.reindex();
        let means_flat = blobs.get("means").ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: "missing means blob".into(),
        })?;
        let p = inventory.len();
        if means_flat.len() != p * meta.n_mels || meta.counts.len() != p {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "dictionary shape mismatch".into(),
            });
        }
        let means = Array2::from_shape_vec((p, meta.n_mels), means_flat.clone())
            .expect("shape checked above");
        Ok(Self {
            inventory,
            means,
            counts: meta.counts,
        })
    }
}

/// Aggregates per-phoneme mel means over a corpus of labeled utterances.
pub fn build_sims_dictionary<'a, I>(
    corpus: I,
    inventory: &PhonemeInventory,
    n_mels: usize,
) -> Result<SimsDictionary>
where
    I: IntoIterator<Item = (&'a Array2<f64>, &'a [PhonemeId])>,
{
    let mut acc = SimsAccumulator::new(inventory.clone(), n_mels);
    let mut any = false;
    for (frames, labels) in corpus {
        acc.add_frames(frames, labels)?;
        any = true;
    }
    if !any {
        return Err(Error::InvalidArgument(
            "cannot build a dictionary from an empty corpus".into(),
        ));
    }
    Ok(acc.finish())
}

/// Replaces every frame by its phoneme's dictionary mean.
///
/// The replacement is a projection: applying it twice with the same labels is
/// the same as applying it once.
pub fn ground_truth_sims(
    m: &MelSpectrogram,
    labels: &[PhonemeId],
    dict: &SimsDictionary,
) -> Result<MelSpectrogram> {
    if labels.len() != m.n_frames() {
        return Err(Error::Shape(format!(
            "{} labels for {} frames",
            labels.len(),
            m.n_frames()
        )));
    }
    if dict.n_mels() != m.n_mels() {
        return Err(Error::Shape(format!(
            "dictionary has {} mel bins, input has {}",
            dict.n_mels(),
            m.n_mels()
        )));
    }
    let mut frames = Array2::zeros((m.n_frames(), m.n_mels()));
    for (i, &label) in labels.iter().enumerate() {
        frames.row_mut(i).assign(&dict.mean(label)?);
    }
    MelSpectrogram::new(frames, m.hop_s, m.window_s, m.sample_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn inv() -> PhonemeInventory {
        PhonemeInventory::from_labels("sil", ["AA", "B"]).unwrap()
    }

    fn mel_of(frames: Array2<f64>) -> MelSpectrogram {
        MelSpectrogram::new(frames, 0.0116, 0.0464, 22_050).unwrap()
    }

    #[test]
    fn mean_of_two_frames() {
        let frames = ndarray::array![[1.0, 10.0], [3.0, 30.0]];
        let labels = vec![PhonemeId(1), PhonemeId(1)];
        let d = build_sims_dictionary([(&frames, labels.as_slice())], &inv(), 2).unwrap();
        assert_eq!(d.mean(PhonemeId(1)).unwrap().to_vec(), vec![2.0, 20.0]);
        assert_eq!(d.count(PhonemeId(1)), 2);
    }

    #[test]
    fn unobserved_phoneme_refuses_lookup() {
        let frames = ndarray::array![[1.0, 1.0]];
        let labels = vec![PhonemeId(1)];
        let d = build_sims_dictionary([(&frames, labels.as_slice())], &inv(), 2).unwrap();
        assert_eq!(d.count(PhonemeId(2)), 0);
        assert!(d.mean(PhonemeId(2)).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_corpus() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let inv = inv();
        let n_mels = 8;
        let corpus: Vec<(Array2<f64>, Vec<PhonemeId>)> = (0..3)
            .map(|_| {
                let f = rng.random_range(5..20);
                let frames =
                    Array2::from_shape_fn((f, n_mels), |_| rng.random_range(-10.0..2.0));
                let labels: Vec<PhonemeId> =
                    (0..f).map(|_| PhonemeId(rng.random_range(0..3))).collect();
                (frames, labels)
            })
            .collect();
        let d = build_sims_dictionary(
            corpus.iter().map(|(f, l)| (f, l.as_slice())),
            &inv,
            n_mels,
        )
        .unwrap();

        // brute force: plain accumulation over all frames
        for p in 0..3 {
            let mut sum = vec![0.0; n_mels];
            let mut n = 0u64;
            for (frames, labels) in &corpus {
                for (i, &l) in labels.iter().enumerate() {
                    if l.0 == p {
                        for (b, s) in sum.iter_mut().enumerate() {
                            *s += frames[[i, b]];
                        }
                        n += 1;
                    }
                }
            }
            assert_eq!(d.count(PhonemeId(p)), n);
            if n > 0 {
                let mean = d.mean(PhonemeId(p)).unwrap();
                for b in 0..n_mels {
                    let expect = sum[b] / n as f64;
                    let rel = (mean[b] - expect).abs() / expect.abs().max(1e-12);
                    assert!(rel < 1e-6, "phoneme {p} bin {b}: {} vs {expect}", mean[b]);
                }
            }
        }
        // counts conservation
        let total: u64 = corpus.iter().map(|(f, _)| f.nrows() as u64).sum();
        assert_eq!(d.counts().iter().sum::<u64>(), total);
    }

    #[test]
    fn shuffling_the_corpus_leaves_means_unchanged() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let inv = inv();
        let n_mels = 4;
        let corpus: Vec<(Array2<f64>, Vec<PhonemeId>)> = (0..12)
            .map(|_| {
                let f = rng.random_range(3..15);
                let frames =
                    Array2::from_shape_fn((f, n_mels), |_| rng.random_range(-11.0..3.0));
                let labels: Vec<PhonemeId> =
                    (0..f).map(|_| PhonemeId(rng.random_range(0..3))).collect();
                (frames, labels)
            })
            .collect();
        let a = build_sims_dictionary(
            corpus.iter().map(|(f, l)| (f, l.as_slice())),
            &inv,
            n_mels,
        )
        .unwrap();
        let b = build_sims_dictionary(
            corpus.iter().rev().map(|(f, l)| (f, l.as_slice())),
            &inv,
            n_mels,
        )
        .unwrap();
        for p in 0..3 {
            if a.count(PhonemeId(p)) == 0 {
                continue;
            }
            let ma = a.mean(PhonemeId(p)).unwrap();
            let mb = b.mean(PhonemeId(p)).unwrap();
            for bin in 0..n_mels {
                assert!(
                    (ma[bin] - mb[bin]).abs() < 1e-9,
                    "order dependence at p={p} bin={bin}"
                );
            }
        }
    }

    #[test]
    fn merged_partials_equal_single_pass() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let inv = inv();
        let frames1 = Array2::from_shape_fn((7, 4), |_| rng.random_range(-5.0..5.0));
        let frames2 = Array2::from_shape_fn((9, 4), |_| rng.random_range(-5.0..5.0));
        let l1: Vec<PhonemeId> = (0..7).map(|_| PhonemeId(rng.random_range(0..3))).collect();
        let l2: Vec<PhonemeId> = (0..9).map(|_| PhonemeId(rng.random_range(0..3))).collect();

        let mut a1 = SimsAccumulator::new(inv.clone(), 4);
        a1.add_frames(&frames1, &l1).unwrap();
        let mut a2 = SimsAccumulator::new(inv.clone(), 4);
        a2.add_frames(&frames2, &l2).unwrap();
        a1.merge(&a2).unwrap();
        let merged = a1.finish();

        let single =
            build_sims_dictionary([(&frames1, l1.as_slice()), (&frames2, l2.as_slice())], &inv, 4)
                .unwrap();
        for p in 0..3 {
            assert_eq!(merged.count(PhonemeId(p)), single.count(PhonemeId(p)));
        }
    }

    #[test]
    fn replacement_uses_table_rows() {
        let frames = ndarray::array![[0.0, 0.0], [9.0, 9.0], [0.0, 0.0]];
        let labels = vec![PhonemeId(1), PhonemeId(2), PhonemeId(1)];
        let d = build_sims_dictionary([(&frames, labels.as_slice())], &inv(), 2).unwrap();
        let m = mel_of(frames);
        let gt = ground_truth_sims(&m, &labels, &d).unwrap();
        // oracle: direct lookup per frame
        for (i, &l) in labels.iter().enumerate() {
            let want = d.mean(l).unwrap();
            for b in 0..2 {
                assert_eq!(gt.frames[[i, b]], want[b]);
            }
        }
        // at most P distinct rows
        let mut rows: Vec<Vec<u64>> = gt
            .frames
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.dedup();
        assert!(rows.len() <= 3);
    }

    #[test]
    fn replacement_is_idempotent() {
        let frames = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let labels = vec![PhonemeId(1), PhonemeId(2)];
        let d = build_sims_dictionary([(&frames, labels.as_slice())], &inv(), 2).unwrap();
        let m = mel_of(frames);
        let once = ground_truth_sims(&m, &labels, &d).unwrap();
        let twice = ground_truth_sims(&once, &labels, &d).unwrap();
        assert_eq!(once.frames, twice.frames);
    }

    #[test]
    fn zero_count_label_in_replacement_errors() {
        let frames = ndarray::array![[1.0, 2.0]];
        let labels = vec![PhonemeId(1)];
        let d = build_sims_dictionary([(&frames, labels.as_slice())], &inv(), 2).unwrap();
        let m = mel_of(frames);
        let err = ground_truth_sims(&m, &[PhonemeId(2)], &d).unwrap_err();
        assert!(err.to_string().contains("no observed frames"), "{err}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sims.bin");
        let frames = ndarray::array![[1.5, -2.5], [0.25, 8.0]];
        let labels = vec![PhonemeId(1), PhonemeId(0)];
        let d = build_sims_dictionary([(&frames, labels.as_slice())], &inv(), 2).unwrap();
        d.save(&p).unwrap();
        let r = SimsDictionary::load(&p).unwrap();
        assert_eq!(r, d);
        assert_eq!(r.inventory().id_of("AA"), Some(PhonemeId(1)));
    }
}
