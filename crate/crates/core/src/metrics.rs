//! OCR evaluation metrics.
//!
//! - CER: character edit distance over reference length, case-sensitive.
//! - WER / word accuracy: the same at word level after whitespace splitting and
//!   case folding; `word_accuracy = 1 - wer`.
//! - F1: harmonic mean of word precision and recall, where correct matches are
//!   the size of the multiset intersection of case-folded words.
//!
//! Corpus figures are micro-aggregated: summed edits over summed lengths.

use std::collections::HashMap;

use crate::data::Style;
use crate::table::Table;
use crate::{Error, Result};

/// Decomposition of a minimal edit script.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditSummary {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

impl EditSummary {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost Levenshtein distance with the S/I/D split along one optimal path.
///
/// Deletions are reference symbols missing from the prediction; insertions are
/// extra predicted symbols. When several optimal paths exist the backtrace
/// prefers substitution (or match), then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], prediction: &[T]) -> EditSummary {
    let n = reference.len();
    let m = prediction.len();
    let width = m + 1;
    let mut dp = vec![0usize; (n + 1) * width];
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        dp[i * width] = i;
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != prediction[j - 1]);
            let diag = dp[(i - 1) * width + j - 1] + cost;
            let up = dp[(i - 1) * width + j] + 1;
            let left = dp[i * width + j - 1] + 1;
            dp[i * width + j] = diag.min(up).min(left);
        }
    }

    let mut summary = EditSummary {
        reference_length: n,
        ..EditSummary::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * width + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != prediction[j - 1]);
            if here == dp[(i - 1) * width + j - 1] + cost {
                summary.substitutions += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == dp[(i - 1) * width + j] + 1 {
            summary.deletions += 1;
            i -= 1;
        } else {
            summary.insertions += 1;
            j -= 1;
        }
    }
    summary
}

fn strip_line_end(s: &str) -> &str {
    s.strip_suffix("\r\n")
        .or_else(|| s.strip_suffix('\n'))
        .unwrap_or(s)
}

/// Character edit summary between two lines (trailing newline removed).
pub fn char_edits(reference: &str, prediction: &str) -> EditSummary {
    let r: Vec<char> = strip_line_end(reference).chars().collect();
    let p: Vec<char> = strip_line_end(prediction).chars().collect();
    edit_distance(&r, &p)
}

pub fn cer(reference: &str, prediction: &str) -> Result<f64> {
    let edits = char_edits(reference, prediction);
    if edits.reference_length == 0 {
        return Err(Error::UndefinedMetric(
            "CER needs a non-empty reference".into(),
        ));
    }
    Ok(edits.distance() as f64 / edits.reference_length as f64)
}

/// Whitespace-split, lower-cased words.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn word_edits(reference: &str, prediction: &str) -> EditSummary {
    edit_distance(&words(reference), &words(prediction))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WordScore {
    pub wer: f64,
    /// `1 - wer`; negative when the prediction has many extra words.
    pub word_accuracy: f64,
}

pub fn wer_and_accuracy(reference: &str, prediction: &str) -> Result<WordScore> {
    let edits = word_edits(reference, prediction);
    if edits.reference_length == 0 {
        return Err(Error::UndefinedMetric(
            "WER needs at least one reference word".into(),
        ));
    }
    let wer = edits.distance() as f64 / edits.reference_length as f64;
    Ok(WordScore {
        wer,
        word_accuracy: 1.0 - wer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matches: usize,
    pub predicted_words: usize,
    pub reference_words: usize,
}

/// Size of the multiset intersection of two word lists.
pub fn word_matches(reference: &[String], prediction: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let mut matches = 0;
    for w in prediction {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                matches += 1;
            }
        }
    }
    matches
}

fn precision_recall_f1(matches: usize, predicted: usize, reference: usize) -> (f64, f64, f64) {
    match (predicted, reference) {
        (0, 0) => (1.0, 1.0, 1.0),
        (0, _) | (_, 0) => (0.0, 0.0, 0.0),
        _ => {
            let p = matches as f64 / predicted as f64;
            let r = matches as f64 / reference as f64;
            let f1 = if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            };
            (p, r, f1)
        }
    }
}

pub fn f1_line(reference: &str, prediction: &str) -> LineF1 {
    let r = words(reference);
    let p = words(prediction);
    let matches = word_matches(&r, &p);
    let (precision, recall, f1) = precision_recall_f1(matches, p.len(), r.len());
    LineF1 {
        precision,
        recall,
        f1,
        matches,
        predicted_words: p.len(),
        reference_words: r.len(),
    }
}

/// One evaluated line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredPair {
    pub subset: String,
    pub reference: String,
    pub prediction: String,
}

impl ScoredPair {
    pub fn new(
        subset: impl Into<String>,
        reference: impl Into<String>,
        prediction: impl Into<String>,
    ) -> Self {
        Self {
            subset: subset.into(),
            reference: reference.into(),
            prediction: prediction.into(),
        }
    }
}

/// Aggregated metrics for one subset (or the mixed corpus).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub subset: String,
    pub samples: usize,
    pub char_edits: usize,
    pub reference_chars: usize,
    pub word_edits: usize,
    pub reference_words: usize,
    pub predicted_words: usize,
    pub word_matches: usize,
    pub exact_matches: usize,
    pub cer: f64,
    pub wer: f64,
    pub word_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Share of lines predicted exactly; a diagnostic next to `word_accuracy`.
    pub exact_match: f64,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    samples: usize,
    char_edits: usize,
    reference_chars: usize,
    word_edits: usize,
    reference_words: usize,
    predicted_words: usize,
    word_matches: usize,
    exact_matches: usize,
}

impl Tally {
    fn add(&mut self, other: &Tally) {
        self.samples += other.samples;
        self.char_edits += other.char_edits;
        self.reference_chars += other.reference_chars;
        self.word_edits += other.word_edits;
        self.reference_words += other.reference_words;
        self.predicted_words += other.predicted_words;
        self.word_matches += other.word_matches;
        self.exact_matches += other.exact_matches;
    }

    fn row(&self, subset: &str) -> Result<MetricsRow> {
        if self.reference_words == 0 {
            return Err(Error::UndefinedMetric(format!(
                "subset `{subset}` has no reference words"
            )));
        }
        let cer = self.char_edits as f64 / self.reference_chars as f64;
        let wer = self.word_edits as f64 / self.reference_words as f64;
        let (precision, recall, f1) = precision_recall_f1(
            self.word_matches,
            self.predicted_words,
            self.reference_words,
        );
        Ok(MetricsRow {
            subset: subset.to_owned(),
            samples: self.samples,
            char_edits: self.char_edits,
            reference_chars: self.reference_chars,
            word_edits: self.word_edits,
            reference_words: self.reference_words,
            predicted_words: self.predicted_words,
            word_matches: self.word_matches,
            exact_matches: self.exact_matches,
            cer,
            wer,
            word_accuracy: 1.0 - wer,
            precision,
            recall,
            f1,
            exact_match: self.exact_matches as f64 / self.samples as f64,
        })
    }
}

pub const MIXED: &str = "mixed";

/// Per-subset rows in canonical style order, then the mixed row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub subsets: Vec<MetricsRow>,
    pub mixed: MetricsRow,
}

pub fn corpus_report(pairs: &[ScoredPair]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric(
            "corpus report over no samples".into(),
        ));
    }
    let mut per_style: Vec<Tally> = vec![Tally::default(); Style::ALL.len()];
    for pair in pairs {
        let style: Style = pair
            .subset
            .parse()
            .map_err(|_| Error::Manifest(format!("unknown subset tag `{}`", pair.subset)))?;
        let chars = char_edits(&pair.reference, &pair.prediction);
        if chars.reference_length == 0 {
            return Err(Error::UndefinedMetric(
                "CER needs a non-empty reference".into(),
            ));
        }
        let rw = words(&pair.reference);
        let pw = words(&pair.prediction);
        let we = edit_distance(&rw, &pw);
        let t = &mut per_style[style.index()];
        t.samples += 1;
        t.char_edits += chars.distance();
        t.reference_chars += chars.reference_length;
        t.word_edits += we.distance();
        t.reference_words += rw.len();
        t.predicted_words += pw.len();
        t.word_matches += word_matches(&rw, &pw);
        t.exact_matches +=
            usize::from(strip_line_end(&pair.reference) == strip_line_end(&pair.prediction));
    }
    let mut mixed = Tally::default();
    let mut subsets = Vec::new();
    for (style, tally) in Style::ALL.iter().zip(&per_style) {
        if tally.samples == 0 {
            continue;
        }
        mixed.add(tally);
        subsets.push(tally.row(style.as_str())?);
    }
    Ok(MetricsReport {
        subsets,
        mixed: mixed.row(MIXED)?,
    })
}

impl MetricsReport {
    pub fn rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.subsets.iter().chain(std::iter::once(&self.mixed))
    }

    pub fn to_table(&self) -> Table {
        let mut table = Table::new([
            "subset",
            "samples",
            "CER",
            "WER",
            "ACC",
            "Precision",
            "Recall",
            "F1",
            "Exact",
        ]);
        for row in self.rows() {
            table.push_row([
                row.subset.clone(),
                row.samples.to_string(),
                format!("{:.6}", row.cer),
                format!("{:.6}", row.wer),
                format!("{:.6}", row.word_accuracy),
                format!("{:.6}", row.precision),
                format!("{:.6}", row.recall),
                format!("{:.6}", row.f1),
                format!("{:.6}", row.exact_match),
            ]);
        }
        table
    }
}
