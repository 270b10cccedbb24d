//! P-STOI / P-ESTOI reporting by speaker and intelligibility group.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dtw::p_align;
use super::stoi::{estoi, stoi};
use crate::audio::{MelConfig, Waveform};
use crate::{Error, Result};

/// Severity group of a dysarthric speaker, ordered from most to least severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IntelligibilityGroup {
    VL,
    L,
    M,
    H,
}

impl IntelligibilityGroup {
    pub const ALL: [IntelligibilityGroup; 4] = [
        IntelligibilityGroup::VL,
        IntelligibilityGroup::L,
        IntelligibilityGroup::M,
        IntelligibilityGroup::H,
    ];
}

impl fmt::Display for IntelligibilityGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IntelligibilityGroup::VL => "VL",
            IntelligibilityGroup::L => "L",
            IntelligibilityGroup::M => "M",
            IntelligibilityGroup::H => "H",
        };
        f.write_str(s)
    }
}

impl FromStr for IntelligibilityGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VL" => Ok(IntelligibilityGroup::VL),
            "L" => Ok(IntelligibilityGroup::L),
            "M" => Ok(IntelligibilityGroup::M),
            "H" => Ok(IntelligibilityGroup::H),
            other => Err(Error::Config(format!(
                "unknown intelligibility group {other:?} (expected VL, L, M or H)"
            ))),
        }
    }
}

/// An utterance ready for metric computation.
#[derive(Debug, Clone)]
pub struct EvalUtterance {
    pub id: String,
    pub speaker_id: String,
    pub word: String,
    pub audio: Waveform,
}

/// Mean scores with the number of utterances behind them.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MeanScores {
    pub p_stoi: f64,
    pub p_estoi: f64,
    pub count: usize,
}

/// Per-speaker and per-group P-STOI/P-ESTOI means.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_speaker: BTreeMap<String, MeanScores>,
    pub per_group: BTreeMap<String, MeanScores>,
    /// Test utterances skipped because no control rendition shares their word.
    pub unmatched: Vec<String>,
    /// Utterances skipped because a metric failed (with the reason).
    pub failed: Vec<(String, String)>,
}

impl MetricReport {
    /// Table-style TSV: one row per metric, one column per group.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric");
        for g in IntelligibilityGroup::ALL {
            out.push_str(&format!("\t{g}"));
        }
        out.push('\n');
        for (name, pick) in [
            ("P-STOI", 0usize),
            ("P-ESTOI", 1usize),
        ] {
            out.push_str(name);
            for g in IntelligibilityGroup::ALL {
                match self.per_group.get(&g.to_string()) {
                    Some(s) if s.count > 0 => {
                        let v = if pick == 0 { s.p_stoi } else { s.p_estoi };
                        out.push_str(&format!("\t{v:.4}"));
                    }
                    _ => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores every test utterance against same-word control renditions.
///
/// Each test utterance is aligned (DTW, control as the reference) against
/// every control rendition of its word; STOI and ESTOI are averaged over
/// renditions, then over utterances per speaker, then over speakers per group.
pub fn p_metric_report(
    control: &[EvalUtterance],
    test: &[EvalUtterance],
    groups: &BTreeMap<String, IntelligibilityGroup>,
    cfg: &MelConfig,
) -> Result<MetricReport> {
    if control.is_empty() || test.is_empty() {
        return Err(Error::Metric("empty control or test corpus".into()));
    }

    let mut by_word: BTreeMap<&str, Vec<&EvalUtterance>> = BTreeMap::new();
    for c in control {
        by_word.entry(c.word.as_str()).or_default().push(c);
    }

    let mut report = MetricReport::default();
    let mut speaker_acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();

    for t in test {
        let Some(renditions) = by_word.get(t.word.as_str()) else {
            report.unmatched.push(t.id.clone());
            continue;
        };
        let mut s_acc = 0.0;
        let mut e_acc = 0.0;
        let mut n = 0usize;
        let mut last_err = None;
        for c in renditions {
            match score_pair(c, t, cfg) {
                Ok((s, e)) => {
                    s_acc += s;
                    e_acc += e;
                    n += 1;
                }
                Err(err) => last_err = Some(err.to_string()),
            }
        }
        if n == 0 {
            report
                .failed
                .push((t.id.clone(), last_err.unwrap_or_else(|| "no renditions".into())));
            continue;
        }
        let entry = speaker_acc.entry(t.speaker_id.clone()).or_default();
        entry.0 += s_acc / n as f64;
        entry.1 += e_acc / n as f64;
        entry.2 += 1;
    }

    let mut group_acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (speaker, (s, e, n)) in &speaker_acc {
        let scores = MeanScores {
            p_stoi: s / *n as f64,
            p_estoi: e / *n as f64,
            count: *n,
        };
        report.per_speaker.insert(speaker.clone(), scores);
        if let Some(g) = groups.get(speaker) {
            let acc = group_acc.entry(g.to_string()).or_default();
            acc.0 += scores.p_stoi;
            acc.1 += scores.p_estoi;
            acc.2 += 1;
        }
    }
    for (g, (s, e, n)) in group_acc {
        report.per_group.insert(
            g,
            MeanScores {
                p_stoi: s / n as f64,
                p_estoi: e / n as f64,
                count: n,
            },
        );
    }
    Ok(report)
}

fn score_pair(control: &EvalUtterance, test: &EvalUtterance, cfg: &MelConfig) -> Result<(f64, f64)> {
    let (r, d) = p_align(&control.audio, &test.audio, cfg)?;
    Ok((stoi(&r, &d)?, estoi(&r, &d)?))
}
