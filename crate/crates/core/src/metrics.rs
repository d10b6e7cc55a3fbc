//! Greedy transcription and word/character error rates.
//!
//! # Report format
//!
//! ```text
//! #auxctc-eval v1
//! #mode=proposed
//! #epochs=30
//! #split=test
//! #word_id	writer_id	reference	hypothesis	distance
//! 3	110	4,0,7	4,7	1
//! #summary
//! num_words=1
//! num_chars=3
//! word_errors=1
//! char_edits=1
//! wer=100.000000
//! cer=33.333333
//! ```
//!
//! `reference` and `hypothesis` are comma-separated character ids. Metadata
//! lines (`#key=value`) between the magic line and the column header are
//! free-form and preserved in order.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::ctc::{collapse, LogProbSequence};
use crate::glyphs::WordSample;
use crate::net::{Model, NetError, Real};

const REPORT_MAGIC: &str = "#auxctc-eval v1";
const REPORT_COLUMNS: &str = "#word_id\twriter_id\treference\thypothesis\tdistance";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluating word {word_id} (writer {writer_id}): {source}")]
    Sample {
        word_id: usize,
        writer_id: usize,
        #[source]
        source: NetError,
    },
    #[error("report line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Best path (per-step argmax) followed by collapse.
///
/// Ties go to the lowest index; the blank sits last, so it loses every tie
/// against a label.
pub fn greedy_decode(lp: &LogProbSequence) -> Vec<usize> {
    let path: Vec<usize> = (0..lp.steps())
        .map(|t| {
            let row = lp.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, lp.blank())
}

/// Levenshtein distance with unit insertion, deletion and substitution costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    // single-row DP over b
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(row[j + 1] + 1);
        }
    }
    row[b.len()]
}

/// Reference/hypothesis pair for one evaluated word image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub word_id: usize,
    pub writer_id: usize,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub distance: usize,
}

impl SampleRecord {
    pub fn new(word_id: usize, writer_id: usize, reference: Vec<usize>, hypothesis: Vec<usize>) -> Self {
        let distance = edit_distance(&reference, &hypothesis);
        Self {
            word_id,
            writer_id,
            reference,
            hypothesis,
            distance,
        }
    }
}

/// WER/CER summary plus per-sample records.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Ordered `#key=value` header metadata.
    pub meta: Vec<(String, String)>,
    pub num_words: usize,
    pub num_chars: usize,
    pub word_errors: usize,
    pub char_edits: usize,
    /// Percent of words not transcribed exactly.
    pub wer: f64,
    /// Total edit distance over total reference characters, in percent.
    pub cer: f64,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<SampleRecord>) -> Self {
        let num_words = records.len();
        let num_chars = records.iter().map(|r| r.reference.len()).sum();
        let word_errors = records.iter().filter(|r| r.hypothesis != r.reference).count();
        let char_edits = records.iter().map(|r| r.distance).sum();
        Self {
            meta: Vec::new(),
            num_words,
            num_chars,
            word_errors,
            char_edits,
            wer: percent(word_errors, num_words),
            cer: percent(char_edits, num_chars),
            records,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_file_string(&self) -> String {
        let ids = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = format!("{REPORT_MAGIC}\n");
        for (k, v) in &self.meta {
            out.push_str(&format!("#{k}={v}\n"));
        }
        out.push_str(REPORT_COLUMNS);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.word_id,
                r.writer_id,
                ids(&r.reference),
                ids(&r.hypothesis),
                r.distance
            ));
        }
        out.push_str(&format!(
            "#summary\nnum_words={}\nnum_chars={}\nword_errors={}\nchar_edits={}\nwer={:.6}\ncer={:.6}\n",
            self.num_words, self.num_chars, self.word_errors, self.char_edits, self.wer, self.cer
        ));
        out
    }

    /// Parses a report; the summary counts are recomputed from the records
    /// and must agree with the stored block.
    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let bad = |line: usize, msg: &str| MetricsError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        if lines.next().map(|(_, l)| l) != Some(REPORT_MAGIC) {
            return Err(bad(1, "missing report header"));
        }
        let mut meta = Vec::new();
        loop {
            let (n, line) = lines.next().ok_or_else(|| bad(0, "missing column header"))?;
            if line == REPORT_COLUMNS {
                break;
            }
            let (k, v) = line
                .strip_prefix('#')
                .and_then(|l| l.split_once('='))
                .ok_or_else(|| bad(n, "expected `#key=value`"))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let mut records = Vec::new();
        let mut summary = Vec::new();
        let mut in_summary = false;
        for (n, line) in lines {
            if line == "#summary" {
                in_summary = true;
                continue;
            }
            if in_summary {
                let (k, v) = line.split_once('=').ok_or_else(|| bad(n, "bad summary line"))?;
                summary.push((k.to_string(), v.to_string()));
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(n, "expected 5 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "bad integer"));
            let ids = |s: &str| -> Result<Vec<usize>, MetricsError> {
                if s.is_empty() {
                    Ok(Vec::new())
                } else {
                    s.split(',').map(num).collect()
                }
            };
            let record = SampleRecord::new(num(f[0])?, num(f[1])?, ids(f[2])?, ids(f[3])?);
            if record.distance != num(f[4])? {
                return Err(bad(n, "stored distance disagrees with recomputed edit distance"));
            }
            records.push(record);
        }
        let mut report = Self::from_records(records);
        report.meta = meta;
        let expect = |key: &str, value: String| -> Result<(), MetricsError> {
            match summary.iter().find(|(k, _)| k == key) {
                Some((_, v)) if *v == value => Ok(()),
                Some((_, v)) => Err(bad(0, &format!("summary {key}={v}, records give {value}"))),
                None => Err(bad(0, &format!("summary lacks {key}"))),
            }
        };
        expect("num_words", report.num_words.to_string())?;
        expect("num_chars", report.num_chars.to_string())?;
        expect("word_errors", report.word_errors.to_string())?;
        expect("char_edits", report.char_edits.to_string())?;
        expect("wer", format!("{:.6}", report.wer))?;
        expect("cer", format!("{:.6}", report.cer))?;
        Ok(report)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Greedy-decodes every sample with the character head.
pub fn evaluate<F: Real>(model: &Model<F>, samples: &[WordSample]) -> Result<EvalReport, MetricsError> {
    let records = samples
        .iter()
        .map(|s| {
            let out = model.forward(&s.image).map_err(|source| MetricsError::Sample {
                word_id: s.word_id,
                writer_id: s.writer_id,
                source,
            })?;
            Ok(SampleRecord::new(
                s.word_id,
                s.writer_id,
                s.chars.clone(),
                greedy_decode(&out.char),
            ))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(EvalReport::from_records(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot(path: &[usize], width: usize) -> LogProbSequence {
        let mut v = vec![f64::NEG_INFINITY; path.len() * width];
        for (t, &k) in path.iter().enumerate() {
            v[t * width + k] = 0.0;
        }
        LogProbSequence::new(path.len(), width - 1, v).unwrap()
    }

    #[test]
    fn greedy_examples() {
        let (a, b, blank) = (0, 1, 2);
        assert_eq!(greedy_decode(&one_hot(&[a, blank, a], 3)), vec![a, a]);
        assert_eq!(greedy_decode(&one_hot(&[blank, blank], 3)), Vec::<usize>::new());
        assert_eq!(greedy_decode(&one_hot(&[a, a, b], 3)), vec![a, b]);
    }

    #[test]
    fn greedy_ties_prefer_labels() {
        let v = (3.0f64).ln();
        let lp = LogProbSequence::new(1, 2, vec![-v, -v, -v]).unwrap();
        assert_eq!(greedy_decode(&lp), vec![0]);
        let h = (0.5f64).ln();
        let lp = LogProbSequence::new(1, 2, vec![f64::NEG_INFINITY, h, h]).unwrap();
        assert_eq!(greedy_decode(&lp), vec![1]);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance::<usize>(&[], &[4, 5]), 2);
        let kitten: Vec<char> = "kitten".chars().collect();
        let sitting: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance(&kitten, &sitting), 3);
    }

    #[test]
    fn report_rates() {
        let perfect = EvalReport::from_records(vec![
            SampleRecord::new(0, 0, vec![1, 2], vec![1, 2]),
            SampleRecord::new(1, 0, vec![3], vec![3]),
        ]);
        assert_eq!((perfect.wer, perfect.cer), (0.0, 0.0));

        let blank = EvalReport::from_records(vec![
            SampleRecord::new(0, 0, vec![1, 2], vec![]),
            SampleRecord::new(1, 0, vec![3, 3, 3], vec![]),
        ]);
        assert_eq!((blank.wer, blank.cer), (100.0, 100.0));
        assert_eq!(blank.char_edits, 5);

        let mixed = EvalReport::from_records(vec![
            SampleRecord::new(0, 0, vec![1, 2, 3, 4], vec![1, 2, 3, 4]),
            SampleRecord::new(1, 0, vec![1, 2, 3, 4], vec![1, 9, 3]),
        ]);
        assert_eq!(mixed.wer, 50.0);
        assert_eq!(mixed.cer, 100.0 * 2.0 / 8.0);
    }

    #[test]
    fn report_round_trip_and_tamper_detection() {
        let report = EvalReport::from_records(vec![
            SampleRecord::new(3, 110, vec![4, 0, 7], vec![4, 7]),
            SampleRecord::new(4, 110, vec![2, 2], vec![2, 2]),
        ])
        .with_meta("mode", "proposed")
        .with_meta("split", "test");
        let text = report.to_file_string();
        let back = EvalReport::parse(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_file_string(), text);
        assert_eq!(back.meta("mode"), Some("proposed"));
        let tampered = text.replace("wer=50.000000", "wer=10.000000");
        assert!(EvalReport::parse(&tampered).is_err());
    }

    proptest! {
        #[test]
        fn greedy_matches_collapse(path in proptest::collection::vec(0usize..4, 1..20)) {
            prop_assert_eq!(greedy_decode(&one_hot(&path, 4)), collapse(&path, 3));
        }

        #[test]
        fn edit_distance_is_a_metric(
            a in proptest::collection::vec(0u8..4, 0..8),
            b in proptest::collection::vec(0u8..4, 0..8),
            c in proptest::collection::vec(0u8..4, 0..8),
        ) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
        }

        #[test]
        fn report_totals_ignore_order(seed in 0u64..1000) {
            let mut records: Vec<SampleRecord> = (0..6)
                .map(|i| {
                    let r: Vec<usize> = (0..(i % 3 + 2)).map(|j| (i * 7 + j + seed as usize) % 5).collect();
                    let h: Vec<usize> = r.iter().skip(i % 2).copied().collect();
                    SampleRecord::new(i, 0, r, h)
                })
                .collect();
            let a = EvalReport::from_records(records.clone());
            records.reverse();
            let b = EvalReport::from_records(records);
            prop_assert_eq!((a.wer, a.cer, a.word_errors, a.char_edits), (b.wer, b.cer, b.word_errors, b.char_edits));
            prop_assert!(a.wer > 0.0 || a.cer == 0.0);
        }
    }
}
