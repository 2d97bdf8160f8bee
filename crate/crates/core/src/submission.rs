//! Score files and trial keys.
//!
//! A score file is line-oriented text, one segment per line:
//!
//! ```text
//! seg_1 0.5 -0.2 -0.3 0.1
//! seg_2 -0.1 -0.3 0.5 0.3
//! ```
//!
//! Columns follow the language order declared by the trial key. Score files
//! carry no header line; lines starting with `#` are comments (the CLI uses
//! one for its reproducibility stamp).
//!
//! A key file starts with the whitespace-separated language list, followed by
//! `segment_id language_id` lines. The language id `OOS` marks an
//! out-of-set segment.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, Write};

use thiserror::Error;

/// Language id used in key files for segments outside the language list.
pub const OUT_OF_SET: &str = "OOS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("{line}: malformed line: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("{line}: expected {expected} scores, found {found}")]
    ArityMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{line}: duplicate segment `{id}`")]
    DuplicateSegment { line: usize, id: String },
    #[error("{line}: NaN score")]
    NaNScore { line: usize },
    #[error("{line}: unknown language `{language}`")]
    UnknownLanguage { line: usize, language: String },
    #[error("0: read error: {0}")]
    Io(String),
}

impl FormatError {
    /// 1-based line number the diagnostic refers to (0 for I/O failures).
    pub fn line(&self) -> usize {
        match self {
            FormatError::MalformedLine { line, .. }
            | FormatError::ArityMismatch { line, .. }
            | FormatError::DuplicateSegment { line, .. }
            | FormatError::NaNScore { line }
            | FormatError::UnknownLanguage { line, .. } => *line,
            FormatError::Io(_) => 0,
        }
    }
}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        FormatError::Io(e.to_string())
    }
}

/// One segment's score vector over the hypothesis languages.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub segment_id: String,
    pub scores: Vec<f64>,
}

impl ScoreRecord {
    pub fn new(segment_id: impl Into<String>, scores: Vec<f64>) -> Self {
        Self {
            segment_id: segment_id.into(),
            scores,
        }
    }

    /// A lost trial: every column scored `-inf`.
    pub fn lost(segment_id: impl Into<String>, num_languages: usize) -> Self {
        Self::new(segment_id, vec![f64::NEG_INFINITY; num_languages])
    }
}

/// Ground-truth label of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrueLanguage {
    /// Index into the key's language list.
    InSet(usize),
    OutOfSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialKey {
    languages: Vec<String>,
    entries: Vec<(String, TrueLanguage)>,
    index: HashMap<String, usize>,
}

impl TrialKey {
    /// Builds a key from a language list and `(segment, language)` pairs.
    /// Language `OOS` marks out-of-set segments.
    pub fn new<S, L>(languages: Vec<String>, entries: impl IntoIterator<Item = (S, L)>) -> Result<Self, FormatError>
    where
        S: Into<String>,
        L: AsRef<str>,
    {
        let mut key = Self::with_languages(languages, 1)?;
        for (i, (seg, lang)) in entries.into_iter().enumerate() {
            key.push(seg.into(), lang.as_ref(), i + 2)?;
        }
        Ok(key)
    }

    fn with_languages(languages: Vec<String>, line: usize) -> Result<Self, FormatError> {
        if languages.is_empty() {
            return Err(FormatError::MalformedLine {
                line,
                reason: "empty language list".into(),
            });
        }
        let mut seen = HashSet::new();
        for l in &languages {
            if l == OUT_OF_SET {
                return Err(FormatError::MalformedLine {
                    line,
                    reason: format!("`{OUT_OF_SET}` is reserved for out-of-set segments"),
                });
            }
            if !seen.insert(l.as_str()) {
                return Err(FormatError::MalformedLine {
                    line,
                    reason: format!("language `{l}` listed twice"),
                });
            }
        }
        Ok(Self {
            languages,
            entries: Vec::new(),
            index: HashMap::new(),
        })
    }

    fn push(&mut self, segment: String, language: &str, line: usize) -> Result<(), FormatError> {
        let truth = if language == OUT_OF_SET {
            TrueLanguage::OutOfSet
        } else {
            match self.language_index(language) {
                Some(i) => TrueLanguage::InSet(i),
                None => {
                    return Err(FormatError::UnknownLanguage {
                        line,
                        language: language.to_string(),
                    })
                }
            }
        };
        if self.index.contains_key(&segment) {
            return Err(FormatError::DuplicateSegment { line, id: segment });
        }
        self.index.insert(segment.clone(), self.entries.len());
        self.entries.push((segment, truth));
        Ok(())
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn language_index(&self, language: &str) -> Option<usize> {
        self.languages.iter().position(|l| l == language)
    }

    /// Entries in key-file order.
    pub fn entries(&self) -> &[(String, TrueLanguage)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truth(&self, segment: &str) -> Option<TrueLanguage> {
        self.index.get(segment).map(|&i| self.entries[i].1)
    }

    pub fn contains(&self, segment: &str) -> bool {
        self.index.contains_key(segment)
    }
}

fn data_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String), FormatError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Err(e) => Some(Err(e.into())),
        Ok(l) => {
            let t = l.trim();
            if t.is_empty() || t.starts_with('#') {
                None
            } else {
                Some(Ok((i + 1, t.to_string())))
            }
        }
    })
}

fn parse_score_token(tok: &str, line: usize) -> Result<f64, FormatError> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_nan() => Err(FormatError::NaNScore { line }),
        Ok(v) => Ok(v),
        Err(_) => Err(FormatError::MalformedLine {
            line,
            reason: format!("`{tok}` is not a number"),
        }),
    }
}

/// Reads a score file whose columns follow `expected_languages`.
pub fn parse_scores<R: BufRead>(reader: R, expected_languages: &[String]) -> Result<Vec<ScoreRecord>, FormatError> {
    let n = expected_languages.len();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for item in data_lines(reader) {
        let (line, text) = item?;
        let mut tokens = text.split_whitespace();
        let id = tokens.next().expect("trimmed nonempty line has a token");
        if id.parse::<f64>().is_ok() {
            return Err(FormatError::MalformedLine {
                line,
                reason: format!("segment id `{id}` looks like a number"),
            });
        }
        let scores = tokens
            .map(|t| parse_score_token(t, line))
            .collect::<Result<Vec<_>, _>>()?;
        if scores.len() != n {
            return Err(FormatError::ArityMismatch {
                line,
                expected: n,
                found: scores.len(),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(FormatError::DuplicateSegment {
                line,
                id: id.to_string(),
            });
        }
        records.push(ScoreRecord::new(id, scores));
    }
    Ok(records)
}

/// Formats a score with at most 9 significant digits, using the shortest
/// decimal text that reads back to the rounded value.
pub fn format_score(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    let exp = rounded.abs().log10().floor();
    if (-5.0..15.0).contains(&exp) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

pub fn write_scores<W: Write>(records: &[ScoreRecord], mut w: W) -> io::Result<()> {
    for r in records {
        write!(w, "{}", r.segment_id)?;
        for &s in &r.scores {
            write!(w, " {}", format_score(s))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn scores_to_string(records: &[ScoreRecord]) -> String {
    let mut buf = Vec::new();
    write_scores(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

pub fn parse_key<R: BufRead>(reader: R) -> Result<TrialKey, FormatError> {
    let mut lines = data_lines(reader);
    let (line, header) = match lines.next() {
        Some(item) => item?,
        None => {
            return Err(FormatError::MalformedLine {
                line: 1,
                reason: "missing language list header".into(),
            })
        }
    };
    let languages = header.split_whitespace().map(str::to_string).collect();
    let mut key = TrialKey::with_languages(languages, line)?;
    for item in lines {
        let (line, text) = item?;
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(FormatError::MalformedLine {
                line,
                reason: format!("expected `segment_id language_id`, found {} fields", tokens.len()),
            });
        }
        key.push(tokens[0].to_string(), tokens[1], line)?;
    }
    Ok(key)
}

pub fn write_key<W: Write>(key: &TrialKey, mut w: W) -> io::Result<()> {
    writeln!(w, "{}", key.languages.join(" "))?;
    for (seg, truth) in &key.entries {
        let lang = match truth {
            TrueLanguage::InSet(i) => key.languages[*i].as_str(),
            TrueLanguage::OutOfSet => OUT_OF_SET,
        };
        writeln!(w, "{seg} {lang}")?;
    }
    Ok(())
}

/// Result of aligning a score list with a trial key.
#[derive(Debug, Clone, PartialEq)]
pub struct FillOutcome {
    pub records: Vec<ScoreRecord>,
    /// Key segments that had no score line; filled with `-inf`.
    pub lost: Vec<String>,
    /// Scored segments absent from the key; dropped.
    pub extra: Vec<String>,
}

/// Makes the record list cover exactly the key's segments. Records present
/// in the key keep their order; lost trials are appended in key order with
/// every score set to `-inf`.
pub fn fill_missing(records: Vec<ScoreRecord>, key: &TrialKey) -> FillOutcome {
    let n = key.num_languages();
    let mut present = HashSet::new();
    let mut kept = Vec::with_capacity(key.len());
    let mut extra = Vec::new();
    for r in records {
        if key.contains(&r.segment_id) && !present.contains(&r.segment_id) {
            present.insert(r.segment_id.clone());
            kept.push(r);
        } else {
            extra.push(r.segment_id);
        }
    }
    let mut lost = Vec::new();
    for (seg, _) in key.entries() {
        if !present.contains(seg) {
            lost.push(seg.clone());
            kept.push(ScoreRecord::lost(seg.clone(), n));
        }
    }
    FillOutcome {
        records: kept,
        lost,
        extra,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn langs(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_sample_line() {
        let recs = parse_scores("seg_1 0.5 -0.2 -0.3 0.1\n".as_bytes(), &langs(&["a", "b", "c", "d"])).unwrap();
        assert_eq!(recs, vec![ScoreRecord::new("seg_1", vec![0.5, -0.2, -0.3, 0.1])]);
    }

    #[test]
    fn sample_line_round_trips_token_for_token() {
        let line = "seg_1 0.5 -0.2 -0.3 0.1\n";
        let recs = parse_scores(line.as_bytes(), &langs(&["a", "b", "c", "d"])).unwrap();
        assert_eq!(scores_to_string(&recs), line);
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_scores("".as_bytes(), &langs(&["a", "b"])).unwrap().is_empty());
        assert_eq!(scores_to_string(&[]), "");
    }

    #[test]
    fn arity_mismatch_names_the_line() {
        let ten = langs(&["1", "2", "3", "4", "5", "6", "7", "8", "9", "10"]);
        let text = "s0 1 2 3 4 5 6 7 8 9 10\ns1 1 2 3 4 5 6 7 8 9\n";
        let err = parse_scores(text.as_bytes(), &ten).unwrap_err();
        assert_eq!(
            err,
            FormatError::ArityMismatch {
                line: 2,
                expected: 10,
                found: 9
            }
        );
    }

    #[test]
    fn rejects_nan_duplicates_and_garbage() {
        let l = langs(&["a", "b"]);
        assert_eq!(
            parse_scores("s1 1 nan\n".as_bytes(), &l).unwrap_err(),
            FormatError::NaNScore { line: 1 }
        );
        assert!(matches!(
            parse_scores("s1 1 2\ns1 3 4\n".as_bytes(), &l).unwrap_err(),
            FormatError::DuplicateSegment { line: 2, .. }
        ));
        assert!(matches!(
            parse_scores("s1 1 x\n".as_bytes(), &l).unwrap_err(),
            FormatError::MalformedLine { line: 1, .. }
        ));
    }

    #[test]
    fn accepts_infinities_and_comments() {
        let l = langs(&["a", "b"]);
        let recs = parse_scores("# stamp\n\ns1 -inf inf\ns2 1e-3 -2.5E2\n".as_bytes(), &l).unwrap();
        assert_eq!(recs[0].scores, vec![f64::NEG_INFINITY, f64::INFINITY]);
        assert_eq!(recs[1].scores, vec![1e-3, -250.0]);
    }

    #[test]
    fn neg_inf_written_as_token() {
        let s = scores_to_string(&[ScoreRecord::new("s", vec![1.0, f64::NEG_INFINITY])]);
        assert_eq!(s, "s 1 -inf\n");
    }

    #[test]
    fn format_score_keeps_nine_digits() {
        assert_eq!(format_score(0.1 + 0.2), "0.3");
        assert_eq!(format_score(1.0 / 3.0), "0.333333333");
        assert_eq!(format_score(-123456789.4), "-123456789");
        assert_eq!(format_score(2.5e-9), "2.5e-9");
        assert_eq!(format_score(-0.0), "0");
    }

    #[test]
    fn key_parsing() {
        let key = parse_key("A B C\ns1 A\ns2 OOS\n".as_bytes()).unwrap();
        assert_eq!(key.num_languages(), 3);
        assert_eq!(key.truth("s1"), Some(TrueLanguage::InSet(0)));
        assert_eq!(key.truth("s2"), Some(TrueLanguage::OutOfSet));

        let err = parse_key("A B C\ns1 D\n".as_bytes()).unwrap_err();
        assert!(matches!(err, FormatError::UnknownLanguage { line: 2, .. }));
        let err = parse_key("A B\ns1 A\ns1 B\n".as_bytes()).unwrap_err();
        assert!(matches!(err, FormatError::DuplicateSegment { line: 3, .. }));
        let err = parse_key("A B\ns1 A extra\n".as_bytes()).unwrap_err();
        assert!(matches!(err, FormatError::MalformedLine { line: 2, .. }));
        assert!(parse_key("".as_bytes()).is_err());
        assert!(parse_key("A A\n".as_bytes()).is_err());
    }

    #[test]
    fn key_round_trip() {
        let key = TrialKey::new(langs(&["A", "B"]), [("s1", "A"), ("s2", "OOS"), ("s3", "B")]).unwrap();
        let mut buf = Vec::new();
        write_key(&key, &mut buf).unwrap();
        assert_eq!(parse_key(buf.as_slice()).unwrap(), key);
    }

    #[test]
    fn fill_missing_cases() {
        let key = TrialKey::new(langs(&["A", "B"]), [("s1", "A"), ("s2", "B")]).unwrap();

        let out = fill_missing(vec![ScoreRecord::new("s1", vec![1.0, 0.0])], &key);
        assert_eq!(out.lost, vec!["s2".to_string()]);
        assert_eq!(out.records[1], ScoreRecord::lost("s2", 2));

        let exact = vec![ScoreRecord::new("s2", vec![0.0, 1.0]), ScoreRecord::new("s1", vec![1.0, 0.0])];
        let out = fill_missing(exact.clone(), &key);
        assert_eq!(out.records, exact);
        assert!(out.lost.is_empty() && out.extra.is_empty());

        let mut with_extra = exact.clone();
        with_extra.push(ScoreRecord::new("s3", vec![0.0, 0.0]));
        let out = fill_missing(with_extra, &key);
        assert_eq!(out.records, exact);
        assert_eq!(out.extra.len(), 1);
    }

    fn score_strategy() -> impl Strategy<Value = f64> {
        prop_oneof![
            8 => -1e6f64..1e6,
            1 => -1e-8f64..1e-8,
            1 => Just(f64::NEG_INFINITY),
        ]
    }

    proptest! {
        #[test]
        fn write_parse_is_idempotent(rows in prop::collection::vec(prop::collection::vec(score_strategy(), 3), 0..20)) {
            let l = langs(&["a", "b", "c"]);
            let recs: Vec<_> = rows.into_iter().enumerate().map(|(i, s)| ScoreRecord::new(format!("seg{i}"), s)).collect();
            let once = parse_scores(scores_to_string(&recs).as_bytes(), &l).unwrap();
            let text = scores_to_string(&once);
            let twice = parse_scores(text.as_bytes(), &l).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(scores_to_string(&twice), text);
            for (a, b) in recs.iter().zip(&once) {
                for (x, y) in a.scores.iter().zip(&b.scores) {
                    if x.is_finite() {
                        prop_assert!((x - y).abs() <= 5e-9 * x.abs());
                    } else {
                        prop_assert_eq!(x, y);
                    }
                }
            }
        }

        #[test]
        fn fill_covers_key(present in prop::collection::vec(any::<bool>(), 1..30)) {
            let names: Vec<String> = (0..present.len()).map(|i| format!("s{i}")).collect();
            let key = TrialKey::new(langs(&["A", "B"]), names.iter().map(|n| (n.clone(), "A"))).unwrap();
            let recs = names.iter().zip(&present).filter(|(_, &p)| p).map(|(n, _)| ScoreRecord::new(n.clone(), vec![0.0, 0.0])).collect();
            let out = fill_missing(recs, &key);
            prop_assert_eq!(out.records.len(), key.len());
            prop_assert_eq!(out.lost.len(), present.iter().filter(|p| !**p).count());
        }
    }
}
