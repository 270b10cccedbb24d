//! Per-speaker phoneme duration statistics. Silence carries pause behavior,
//! not articulation rate, so it never enters these tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PhonemeAlignment, PhonemeId, PhonemeInventory};
use crate::container::{read_container, write_container};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DVDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct PhonemeDuration {
    sum_s: f64,
    count: u64,
}

/// speaker -> phoneme -> mean duration, plus a per-speaker global mean over
/// observed non-silence phonemes.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationStats {
    inventory: PhonemeInventory,
    table: BTreeMap<String, Vec<PhonemeDuration>>,
}

#[derive(Serialize, Deserialize)]
struct DurationMeta {
    inventory: PhonemeInventory,
    inventory_hash: String,
    table: BTreeMap<String, Vec<PhonemeDuration>>,
}

impl DurationStats {
    pub fn inventory(&self) -> &PhonemeInventory {
        &self.inventory
    }

    pub fn speakers(&self) -> impl Iterator<Item = &str> {
        self.table.keys().map(|s| s.as_str())
    }

    pub fn has_speaker(&self, speaker: &str) -> bool {
        self.table.contains_key(speaker)
    }

    /// Mean duration of one phoneme for one speaker, if observed.
    pub fn mean_duration_s(&self, speaker: &str, p: PhonemeId) -> Option<f64> {
        let row = self.table.get(speaker)?;
        let d = row.get(p.0)?;
        (d.count > 0).then(|| d.sum_s / d.count as f64)
    }

    /// Unweighted mean over the speaker's observed non-silence phoneme means.
    /// `None` when the speaker has no non-silence phonemes at all.
    pub fn global_mean_s(&self, speaker: &str) -> Option<f64> {
        let row = self.table.get(speaker)?;
        let mut acc = 0.0;
        let mut n = 0usize;
        for (i, d) in row.iter().enumerate() {
            if i != 0 && d.count > 0 {
                acc += d.sum_s / d.count as f64;
                n += 1;
            }
        }
        (n > 0).then(|| acc / n as f64)
    }

    pub fn occurrence_count(&self, speaker: &str, p: PhonemeId) -> u64 {
        self.table
            .get(speaker)
            .and_then(|row| row.get(p.0))
            .map(|d| d.count)
            .unwrap_or(0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = DurationMeta {
            inventory: self.inventory.clone(),
            inventory_hash: self.inventory.content_hash(),
            table: self.table.clone(),
        };
        write_container(path, MAGIC, VERSION, &meta, &[])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, _) = read_container::<DurationMeta>(path, MAGIC, VERSION)?;
        Ok(Self {
            inventory: meta.inventory.reindex(),
            table: meta.table,
        })
    }
}

/// Accumulates interval durations per speaker and phoneme; silence excluded.
pub fn build_duration_stats<'a, I, S>(
    corpus: I,
    inventory: &PhonemeInventory,
) -> Result<DurationStats>
where
    I: IntoIterator<Item = (S, &'a PhonemeAlignment)>,
    S: AsRef<str>,
{
    let mut table: BTreeMap<String, Vec<PhonemeDuration>> = BTreeMap::new();
    let mut any = false;
    for (speaker, alignment) in corpus {
        any = true;
        let row = table
            .entry(speaker.as_ref().to_string())
            .or_insert_with(|| vec![PhonemeDuration::default(); inventory.len()]);
        for iv in alignment.intervals() {
            if iv.phoneme == inventory.silence() {
                continue;
            }
            let d = &mut row[iv.phoneme.0];
            d.sum_s += iv.end_s - iv.start_s;
            d.count += 1;
        }
    }
    if !any {
        return Err(Error::InvalidArgument(
            "cannot build duration stats from an empty corpus".into(),
        ));
    }
    Ok(DurationStats {
        inventory: inventory.clone(),
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::parse_alignment_str;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn inv() -> PhonemeInventory {
        PhonemeInventory::from_labels("sil", ["AA", "B", "C"]).unwrap()
    }

    #[test]
    fn mean_of_two_occurrences() {
        let inv = inv();
        let a = parse_alignment_str("AA\t0.0\t0.1\nsil\t0.1\t0.4\nAA\t0.4\t0.7\n", &inv).unwrap();
        let stats = build_duration_stats([("spk", &a)], &inv).unwrap();
        let m = stats.mean_duration_s("spk", PhonemeId(1)).unwrap();
        assert!((m - 0.2).abs() < 1e-12, "mean {m}");
        assert_eq!(stats.occurrence_count("spk", PhonemeId(1)), 2);
        // silence excluded
        assert_eq!(stats.occurrence_count("spk", PhonemeId(0)), 0);
    }

    #[test]
    fn all_silence_speaker_has_no_global_mean() {
        let inv = inv();
        let a = parse_alignment_str("sil\t0.0\t1.0\n", &inv).unwrap();
        let stats = build_duration_stats([("quiet", &a)], &inv).unwrap();
        assert!(stats.global_mean_s("quiet").is_none());
        assert!(stats.has_speaker("quiet"));
    }

    #[test]
    fn multi_speaker_brute_force_equivalence() {
        let inv = inv();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        // random alignments per speaker
        let mut raw: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        let mut alignments = Vec::new();
        for s in 0..3 {
            let speaker = format!("spk{s}");
            let mut t = 0.0;
            let mut ivs = Vec::new();
            for _ in 0..rng.random_range(3..10) {
                let p = rng.random_range(0..4);
                let d = rng.random_range(0.05..0.4);
                ivs.push(crate::align::AlignedInterval {
                    phoneme: PhonemeId(p),
                    start_s: t,
                    end_s: t + d,
                });
                if p != 0 {
                    raw.entry(speaker.clone()).or_default().push((p, d));
                }
                t += d;
            }
            alignments.push((speaker, PhonemeAlignment::new(ivs).unwrap()));
        }
        let stats = build_duration_stats(
            alignments.iter().map(|(s, a)| (s.as_str(), a)),
            &inv,
        )
        .unwrap();
        for (speaker, occ) in &raw {
            for p in 1..4 {
                let mine: Vec<f64> = occ
                    .iter()
                    .filter(|(pp, _)| *pp == p)
                    .map(|(_, d)| *d)
                    .collect();
                let got = stats.mean_duration_s(speaker, PhonemeId(p));
                match (mine.is_empty(), got) {
                    (true, None) => {}
                    (false, Some(g)) => {
                        let want = mine.iter().sum::<f64>() / mine.len() as f64;
                        assert!((g - want).abs() < 1e-12);
                    }
                    other => panic!("mismatch for {speaker}/{p}: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn interval_order_does_not_matter() {
        let inv = inv();
        let a = parse_alignment_str("AA\t0.0\t0.1\nB\t0.2\t0.5\n", &inv).unwrap();
        let b = parse_alignment_str("B\t0.2\t0.5\nAA\t0.0\t0.1\n", &inv).unwrap();
        let sa = build_duration_stats([("s", &a)], &inv).unwrap();
        let sb = build_duration_stats([("s", &b)], &inv).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn save_load_round_trip() {
        let inv = inv();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dur.bin");
        let a = parse_alignment_str("AA\t0.0\t0.25\nB\t0.25\t0.5\n", &inv).unwrap();
        let stats = build_duration_stats([("spk", &a)], &inv).unwrap();
        stats.save(&p).unwrap();
        let r = DurationStats::load(&p).unwrap();
        assert_eq!(r, stats);
        assert_eq!(r.inventory().id_of("B"), Some(PhonemeId(2)));
    }
}
