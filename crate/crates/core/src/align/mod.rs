//! Phoneme alignments and the statistics derived from them: the per-phoneme
//! average-mel dictionary and per-speaker duration tables.
//!
//! Alignment files are UTF-8 text, one interval per line as
//! `label<TAB>start_s<TAB>end_s`, `#`-prefixed lines ignored. A TextGrid from
//! an external forced aligner exports to this by emitting one line per
//! phone-tier interval.

mod duration;
mod sims;

pub use duration::{build_duration_stats, DurationStats};
pub use sims::{build_sims_dictionary, ground_truth_sims, SimsAccumulator, SimsDictionary};

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Index into a [`PhonemeInventory`]. Index 0 is always silence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhonemeId(pub usize);

/// Ordered phoneme labels with the reserved silence symbol at index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    /// Builds an inventory; `symbols[0]` is the silence label.
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Config("phoneme inventory cannot be empty".into()));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate phoneme label {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Silence first, then the remaining labels sorted for stable ids.
    pub fn from_labels<I, S>(silence: &str, labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut rest: Vec<String> = labels
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .filter(|s| s != silence)
            .collect();
        rest.sort();
        rest.dedup();
        let mut symbols = vec![silence.to_string()];
        symbols.extend(rest);
        Self::new(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn silence(&self) -> PhonemeId {
        PhonemeId(0)
    }

    pub fn id_of(&self, label: &str) -> Option<PhonemeId> {
        self.index.get(label).copied().map(PhonemeId)
    }

    pub fn label(&self, id: PhonemeId) -> &str {
        &self.symbols[id.0]
    }

    pub fn labels(&self) -> &[String] {
        &self.symbols
    }

    /// Rebuilds the label index after deserialization.
    pub(crate) fn reindex(mut self) -> Self {
        self.index = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        self
    }

    /// Hash of the ordered labels, embedded in artifacts for compatibility checks.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in &self.symbols {
            h.update(s.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// One aligned phoneme interval, `[start_s, end_s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedInterval {
    pub phoneme: PhonemeId,
    pub start_s: f64,
    pub end_s: f64,
}

/// A validated, sorted, non-overlapping sequence of intervals. Gaps are
/// implicitly silence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhonemeAlignment {
    intervals: Vec<AlignedInterval>,
}

impl PhonemeAlignment {
    pub fn new(mut intervals: Vec<AlignedInterval>) -> Result<Self> {
        intervals.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for iv in &intervals {
            if !(iv.start_s >= 0.0 && iv.end_s > iv.start_s) {
                return Err(Error::InvalidArgument(format!(
                    "bad interval [{}, {})",
                    iv.start_s, iv.end_s
                )));
            }
        }
        for pair in intervals.windows(2) {
            if pair[1].start_s < pair[0].end_s - 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "overlapping intervals: [{}, {}) and [{}, {})",
                    pair[0].start_s, pair[0].end_s, pair[1].start_s, pair[1].end_s
                )));
            }
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> &[AlignedInterval] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Interval covering time `t`, if any (half-open containment).
    pub fn at(&self, t: f64) -> Option<&AlignedInterval> {
        self.intervals
            .iter()
            .find(|iv| t >= iv.start_s && t < iv.end_s)
    }
}

/// Parses the tab-separated interval format against an inventory.
pub fn parse_alignment(path: impl AsRef<Path>, inventory: &PhonemeInventory) -> Result<PhonemeAlignment> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_alignment_str(&text, inventory).map_err(|e| match e {
        Error::InvalidArgument(reason) => Error::Alignment {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

/// Parses alignment text (see module docs for the line format).
pub fn parse_alignment_str(text: &str, inventory: &PhonemeInventory) -> Result<PhonemeAlignment> {
    let mut intervals = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        let (label, start, end) = match (parts.next(), parts.next(), parts.next()) {
            (Some(l), Some(s), Some(e)) => (l, s, e),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "line {}: expected label<TAB>start<TAB>end, got {raw:?}",
                    lineno + 1
                )))
            }
        };
        let phoneme = inventory.id_of(label).ok_or(Error::UnknownPhoneme {
            label: label.to_string(),
            line: lineno + 1,
        })?;
        let start_s: f64 = start.parse().map_err(|_| {
            Error::InvalidArgument(format!("line {}: bad start time {start:?}", lineno + 1))
        })?;
        let end_s: f64 = end.parse().map_err(|_| {
            Error::InvalidArgument(format!("line {}: bad end time {end:?}", lineno + 1))
        })?;
        if end_s <= start_s {
            return Err(Error::InvalidArgument(format!(
                "line {}: interval end {end_s} <= start {start_s}",
                lineno + 1
            )));
        }
        intervals.push(AlignedInterval {
            phoneme,
            start_s,
            end_s,
        });
    }
    PhonemeAlignment::new(intervals)
}

/// Writes an alignment back out in the same text format.
pub fn write_alignment(
    path: impl AsRef<Path>,
    alignment: &[(String, f64, f64)],
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (label, s, e) in alignment {
        out.push_str(&format!("{label}\t{s}\t{e}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Labels each of `n_frames` frames by the interval containing its center
/// time `(i + 0.5) * hop_s`; uncovered frames are silence.
pub fn frame_labels(
    alignment: &PhonemeAlignment,
    n_frames: usize,
    hop_s: f64,
    inventory: &PhonemeInventory,
) -> Vec<PhonemeId> {
    let silence = inventory.silence();
    (0..n_frames)
        .map(|i| {
            let center = (i as f64 + 0.5) * hop_s;
            alignment.at(center).map(|iv| iv.phoneme).unwrap_or(silence)
        })
        .collect()
}
