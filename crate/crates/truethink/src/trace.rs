//! Data model for problems and chains of thought: sentence segmentation,
//! numeric span scanning, answer canonicalization, dataset loading and
//! splitting.
//!
//! A [`ChainOfThought`] is an ordered list of [`Step`]s that partitions the
//! raw trace text. Steps are the unit of perturbation and scoring; each one
//! carries the numeric literals found in its text so perturbations can
//! offset them in place.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cue lexicon for self-verification ("aha moment") steps.
/// Matched case-insensitively anywhere in the step text.
pub const SELF_VERIFICATION_CUES: &[&str] = &[
    "wait",
    "let me re",
    "double-check",
    "re-evaluate",
    "verify",
    "hold on",
    "but let me compute",
];

/// One problem instance: a question plus its canonical gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub question: String,
    /// Canonical answer string (see [`canonicalize_answer`]).
    pub gold_answer: String,
}

impl Problem {
    /// The gold answer wrapped as an [`Answer`] for confidence queries.
    pub fn gold(&self) -> Answer {
        Answer {
            raw: self.gold_answer.clone(),
            canonical: Some(self.gold_answer.clone()),
        }
    }
}

/// A decoded answer together with its canonical form.
///
/// `canonical` is `None` when no answer could be extracted; such answers
/// compare unequal to everything, including other unparsable answers, so
/// they always count as non-matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub raw: String,
    pub canonical: Option<String>,
}

impl Answer {
    pub fn unparsable(raw: impl Into<String>) -> Self {
        Answer {
            raw: raw.into(),
            canonical: None,
        }
    }

    pub fn is_unparsable(&self) -> bool {
        self.canonical.is_none()
    }

    /// Canonical equality. Unparsable answers match nothing.
    pub fn matches(&self, other: &Answer) -> bool {
        match (&self.canonical, &other.canonical) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

/// A numeric literal inside a step text: byte range plus parsed value.
///
/// Spans match unsigned decimal literals (`12`, `4.14`). A leading minus
/// sign is not part of the span; sign handling is left to consumers that
/// render offsets back into text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericSpan {
    pub start: usize,
    pub end: usize,
    pub value: f64,
}

/// One reasoning step: a sentence of the chain of thought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 0-based position within the chain.
    pub index: usize,
    pub text: String,
    /// Numeric literals in `text`, non-overlapping, ascending.
    pub numeric_spans: Vec<NumericSpan>,
    pub is_self_verification: bool,
    /// Token indices within the full trace, when a backend has assigned them.
    pub token_range: Option<(usize, usize)>,
}

impl Step {
    /// Build a step from its text: scans numeric spans and flags
    /// self-verification cues with the default lexicon.
    pub fn from_text(index: usize, text: impl Into<String>) -> Self {
        let text = text.into();
        let numeric_spans = scan_numeric_spans(&text);
        let is_self_verification = flag_self_verification_with(&text, SELF_VERIFICATION_CUES);
        Step {
            index,
            text,
            numeric_spans,
            is_self_verification,
            token_range: None,
        }
    }
}

/// A full reasoning trace for one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOfThought {
    pub problem_id: String,
    pub steps: Vec<Step>,
    pub raw_text: String,
    pub final_answer: Answer,
}

impl ChainOfThought {
    /// Segment `raw_text` into steps and canonicalize the final answer
    /// from the trailing text.
    pub fn from_raw(problem_id: impl Into<String>, raw_text: impl Into<String>) -> Self {
        let raw_text = raw_text.into();
        let steps = segment(&raw_text);
        let final_answer = canonicalize_answer(&raw_text);
        ChainOfThought {
            problem_id: problem_id.into(),
            steps,
            raw_text,
            final_answer,
        }
    }

    /// Step texts as owned strings, the form backend calls take.
    pub fn step_texts(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.text.clone()).collect()
    }
}

/// Train/validation/test partition of a dataset by problem id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn contains_train(&self, id: &str) -> bool {
        self.train.contains(id)
    }

    pub fn contains_test(&self, id: &str) -> bool {
        self.test.contains(id)
    }
}

// ---------------------------------------------------------------------------
// Numeric span scanning
// ---------------------------------------------------------------------------

/// Scan a text for unsigned decimal literals: digit runs with at most one
/// decimal point that is both preceded and followed by a digit.
pub fn scan_numeric_spans(text: &str) -> Vec<NumericSpan> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            // Decimal part: '.' must be followed by a digit.
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let lit = &text[start..i];
            // Digit runs longer than f64's exact integer range are left alone.
            if lit.split('.').next().map_or(0, str::len) <= 15 {
                if let Ok(value) = lit.parse::<f64>() {
                    spans.push(NumericSpan {
                        start,
                        end: i,
                        value,
                    });
                }
            }
        } else {
            i += 1;
        }
    }
    spans
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Split a raw chain-of-thought text into sentence steps.
///
/// Boundaries sit after terminal punctuation (`.` `!` `?`) followed by
/// whitespace, and at blank lines. Decimal points inside numeric literals
/// never split (they are never followed by whitespace), and periods inside
/// `$...$` math delimiters are protected. Worst case the whole text is one
/// step.
pub fn segment(raw_cot: &str) -> Vec<Step> {
    let bytes = raw_cot.as_bytes();
    let mut pieces: Vec<&str> = Vec::new();
    let mut piece_start = 0;
    let mut in_math = false;
    let mut i = 0;

    while i < bytes.len() {
        let b = bytes[i];
        if b == b'$' {
            in_math = !in_math;
            i += 1;
            continue;
        }
        if !in_math && (b == b'.' || b == b'!' || b == b'?') {
            // Consume a run of terminal punctuation (e.g. "?!", "...").
            let mut j = i + 1;
            while j < bytes.len() && matches!(bytes[j], b'.' | b'!' | b'?') {
                j += 1;
            }
            if j >= bytes.len() || bytes[j].is_ascii_whitespace() {
                pieces.push(&raw_cot[piece_start..j]);
                piece_start = j;
            }
            i = j;
            continue;
        }
        if b == b'\n' {
            // A blank line is a hard boundary even without punctuation.
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j] == b' ' || bytes[j] == b'\t' || bytes[j] == b'\r') {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'\n' {
                pieces.push(&raw_cot[piece_start..j]);
                piece_start = j;
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    if piece_start < bytes.len() {
        pieces.push(&raw_cot[piece_start..]);
    }

    pieces
        .into_iter()
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .enumerate()
        .map(|(idx, text)| Step::from_text(idx, text))
        .collect()
}

// ---------------------------------------------------------------------------
// Self-verification flags
// ---------------------------------------------------------------------------

/// True iff the step text matches the configured cue lexicon.
pub fn flag_self_verification(step: &Step) -> bool {
    flag_self_verification_with(&step.text, SELF_VERIFICATION_CUES)
}

/// Lexicon-matching against arbitrary cue lists; cues are matched
/// case-insensitively as prefixes or infixes of the text.
pub fn flag_self_verification_with(text: &str, cues: &[&str]) -> bool {
    let lowered = text.to_lowercase();
    cues.iter().any(|cue| lowered.contains(&cue.to_lowercase()))
}

// ---------------------------------------------------------------------------
// Answer canonicalization
// ---------------------------------------------------------------------------

/// Extract and normalize the final answer stated in `raw`.
///
/// Extraction order: the last `\boxed{...}` content if present, else the
/// last numeric literal, else the whole text when it is at most three
/// words. Anything else is unparsable. Numeric answers are reduced to a
/// canonical decimal form; short string answers are lowercased with
/// trailing punctuation stripped. Canonicalization is idempotent.
pub fn canonicalize_answer(raw: &str) -> Answer {
    let mut text = raw.trim().to_string();
    // Unwrap nested \boxed{...}, innermost last.
    while let Some(content) = last_boxed_content(&text) {
        text = content;
    }

    let spans = scan_numeric_spans(&text);
    if let Some(span) = spans.last() {
        let negative = text[..span.start].trim_end().ends_with('-');
        let lit = &text[span.start..span.end];
        return Answer {
            raw: raw.to_string(),
            canonical: Some(canonical_number(lit, negative)),
        };
    }

    let words: Vec<&str> = text.split_whitespace().collect();
    if !words.is_empty() && words.len() <= 3 {
        let joined = words.join(" ").to_lowercase();
        let stripped = joined.trim_end_matches(['.', ',', ';', ':', '!', '?']);
        if !stripped.is_empty() {
            return Answer {
                raw: raw.to_string(),
                canonical: Some(stripped.to_string()),
            };
        }
    }

    Answer::unparsable(raw)
}

fn last_boxed_content(text: &str) -> Option<String> {
    let start = text.rfind("\\boxed{")?;
    let inner_start = start + "\\boxed{".len();
    let mut depth = 1;
    for (offset, ch) in text[inner_start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[inner_start..inner_start + offset].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Normalize an unsigned decimal literal: strip leading zeros in the
/// integer part and trailing zeros in the fraction; `-0` becomes `0`.
fn canonical_number(lit: &str, negative: bool) -> String {
    let (int_part, frac_part) = match lit.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (lit, None),
    };
    let int_norm = int_part.trim_start_matches('0');
    let int_norm = if int_norm.is_empty() { "0" } else { int_norm };
    let frac_norm = frac_part.map(|f| f.trim_end_matches('0')).unwrap_or("");

    let mut out = String::new();
    let is_zero = int_norm == "0" && frac_norm.is_empty();
    if negative && !is_zero {
        out.push('-');
    }
    out.push_str(int_norm);
    if !frac_norm.is_empty() {
        out.push('.');
        out.push_str(frac_norm);
    }
    out
}

// ---------------------------------------------------------------------------
// Dataset loading and splitting
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    question: String,
    answer: String,
}

/// Load a line-delimited dataset file. Each line is one object with
/// `id`, `question`, and `answer` fields; order is preserved.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Problem>> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = std::io::BufReader::new(file);
    let mut problems = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Dataset(format!("duplicate problem id {:?}", record.id)));
        }
        let canon = canonicalize_answer(&record.answer);
        let gold_answer = canon
            .canonical
            .unwrap_or_else(|| record.answer.split_whitespace().collect::<Vec<_>>().join(" "));
        if gold_answer.is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                message: format!("empty answer for problem {:?}", record.id),
            });
        }
        problems.push(Problem {
            id: record.id,
            question: record.question,
            gold_answer,
        });
    }
    Ok(problems)
}

/// Deterministically split problems into train/val/test sets.
///
/// The split is a pure function of the problem-id multiset and the seed:
/// ids are sorted before shuffling, so input order does not matter.
pub fn split_dataset(problems: &[Problem], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (r_train, r_val, r_test) = ratios;
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "ratios must sum to 1, got {:?}",
            ratios
        )));
    }
    if problems.len() < 3 {
        return Err(Error::Split(format!(
            "need at least 3 problems to split, got {}",
            problems.len()
        )));
    }

    let mut ids: Vec<String> = problems.iter().map(|p| p.id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    let n_train = (r_train * n as f64).round() as usize;
    let n_val = (r_val * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);

    let train: BTreeSet<String> = ids[..n_train].iter().cloned().collect();
    let val: BTreeSet<String> = ids[n_train..n_train + n_val].iter().cloned().collect();
    let test: BTreeSet<String> = ids[n_train + n_val..].iter().cloned().collect();

    Ok(DatasetSplit {
        seed,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collapse_ws(s: &str) -> String {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn segment_two_plain_sentences() {
        let steps = segment("A is 2. So B is 3.");
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].text, "A is 2.");
        assert_eq!(steps[1].text, "So B is 3.");
    }

    #[test]
    fn segment_protects_decimals() {
        let steps = segment("x = 4.14 inches, so done.");
        assert_eq!(steps.len(), 1);
    }

    #[test]
    fn segment_keeps_self_verification_sentence_separate() {
        let raw = "Then, the side length simplifies to 4.142 inches. So, 4.14 inches. \
                   Wait, but let me compute it more accurately. \
                   So, the length of one side is approximately 4.14.";
        let steps = segment(raw);
        assert_eq!(steps.len(), 4);
        assert!(steps[2].is_self_verification);
        assert!(steps[2].text.starts_with("Wait, but let me compute"));
        assert!(!steps[1].is_self_verification);
    }

    #[test]
    fn segment_is_a_partition() {
        let raw = "First 1.5 apples.  Then $x.y$ holds! Done?\n\nNew paragraph here";
        let steps = segment(raw);
        let joined = steps.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ");
        assert_eq!(collapse_ws(&joined), collapse_ws(raw));
    }

    #[test]
    fn segment_protects_math_delimiters() {
        let steps = segment("Note $a. b$ stays whole. Next sentence.");
        assert_eq!(steps.len(), 2);
        assert_eq!(steps[0].text, "Note $a. b$ stays whole.");
    }

    #[test]
    fn segment_blank_line_is_hard_boundary() {
        let steps = segment("no punctuation here\n\nand a second block");
        assert_eq!(steps.len(), 2);
    }

    #[test]
    fn scan_finds_decimals_and_integers() {
        let spans = scan_numeric_spans("x = 12 then 4.14 and 7.");
        let values: Vec<f64> = spans.iter().map(|s| s.value).collect();
        assert_eq!(values, vec![12.0, 4.14, 7.0]);
        // Trailing '.' of the sentence is not part of the last literal.
        assert_eq!(&"x = 12 then 4.14 and 7."[spans[2].start..spans[2].end], "7");
    }

    #[test]
    fn scan_spans_parse_back(){
        let text = "a 003 b 12.50 c";
        for span in scan_numeric_spans(text) {
            let lit = &text[span.start..span.end];
            assert_eq!(lit.parse::<f64>().unwrap(), span.value);
        }
    }

    #[test]
    fn flag_matches_cue_lexicon() {
        assert!(flag_self_verification(&Step::from_text(0, "Wait, let me recompute the sum.")));
        assert!(!flag_self_verification(&Step::from_text(0, "So the answer is 7.")));
        assert!(flag_self_verification(&Step::from_text(0, "Let me double-check: 3*4 = 12.")));
        assert!(flag_self_verification(&Step::from_text(0, "Hold on, is that right?")));
    }

    #[test]
    fn canonicalize_extracts_last_number() {
        assert_eq!(canonicalize_answer("The final result is 42.").canonical.as_deref(), Some("42"));
        assert_eq!(
            canonicalize_answer("= 4.142, so 4.14 inches").canonical.as_deref(),
            Some("4.14")
        );
        assert!(canonicalize_answer("I am not sure").is_unparsable());
    }

    #[test]
    fn canonicalize_prefers_boxed() {
        assert_eq!(
            canonicalize_answer("so 12 and \\boxed{7}").canonical.as_deref(),
            Some("7")
        );
        assert_eq!(
            canonicalize_answer("\\boxed{4.140}").canonical.as_deref(),
            Some("4.14")
        );
    }

    #[test]
    fn canonicalize_short_strings_and_negatives() {
        assert_eq!(canonicalize_answer("Yes.").canonical.as_deref(), Some("yes"));
        assert_eq!(canonicalize_answer("so -5").canonical.as_deref(), Some("-5"));
        assert_eq!(canonicalize_answer("-0").canonical.as_deref(), Some("0"));
        assert_eq!(canonicalize_answer("007.500").canonical.as_deref(), Some("7.5"));
    }

    #[test]
    fn canonicalize_is_idempotent() {
        for raw in ["The final result is 42.", "= 4.142, so 4.14", "Yes.", "\\boxed{x = 2}", "-17"] {
            let once = canonicalize_answer(raw);
            if let Some(c) = &once.canonical {
                let twice = canonicalize_answer(c);
                assert_eq!(twice.canonical.as_ref(), Some(c), "not idempotent for {raw:?}");
            }
        }
    }

    #[test]
    fn unparsable_matches_nothing() {
        let u = canonicalize_answer("I am not sure at all");
        let v = canonicalize_answer("I am not sure at all");
        assert!(!u.matches(&v));
        assert!(!u.matches(&canonicalize_answer("42")));
    }

    #[test]
    fn load_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"p1\",\"question\":\"1+1=?\",\"answer\":\"2\"}\n",
        )
        .unwrap();
        let problems = load_dataset(&path).unwrap();
        assert_eq!(problems.len(), 1);
        assert_eq!(problems[0].id, "p1");
        assert_eq!(problems[0].gold_answer, "2");
    }

    #[test]
    fn load_dataset_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn load_dataset_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"p1\",\"question\":\"q\",\"answer\":\"1\"}\n{\"id\":\"p1\",\"question\":\"q\",\"answer\":\"2\"}\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Dataset(_))));
    }

    #[test]
    fn load_dataset_missing_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"p1\",\"question\":\"q\",\"answer\":\"1\"}\n{\"id\":\"p2\",\"question\":\"q\"}\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn fake_problems(n: usize) -> Vec<Problem> {
        (0..n)
            .map(|i| Problem {
                id: format!("p{i}"),
                question: format!("q{i}"),
                gold_answer: "1".into(),
            })
            .collect()
    }

    #[test]
    fn split_sizes_ten() {
        let split = split_dataset(&fake_problems(10), (0.6, 0.1, 0.3), 0).unwrap();
        assert_eq!(split.train.len(), 6);
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.test.len(), 3);
    }

    #[test]
    fn split_deterministic_and_order_independent() {
        let problems = fake_problems(20);
        let a = split_dataset(&problems, (0.6, 0.1, 0.3), 7).unwrap();
        let b = split_dataset(&problems, (0.6, 0.1, 0.3), 7).unwrap();
        assert_eq!(a, b);
        let mut reversed = problems.clone();
        reversed.reverse();
        let c = split_dataset(&reversed, (0.6, 0.1, 0.3), 7).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn split_hundred_is_exact_partition() {
        let problems = fake_problems(100);
        let split = split_dataset(&problems, (0.6, 0.1, 0.3), 3).unwrap();
        assert_eq!(split.train.len(), 60);
        assert_eq!(split.val.len(), 10);
        assert_eq!(split.test.len(), 30);
        let mut all: BTreeSet<String> = BTreeSet::new();
        all.extend(split.train.iter().cloned());
        all.extend(split.val.iter().cloned());
        all.extend(split.test.iter().cloned());
        assert_eq!(all.len(), 100);
        assert!(split.train.is_disjoint(&split.val));
        assert!(split.train.is_disjoint(&split.test));
        assert!(split.val.is_disjoint(&split.test));
    }

    #[test]
    fn split_too_small_errors() {
        assert!(matches!(
            split_dataset(&fake_problems(2), (0.6, 0.1, 0.3), 0),
            Err(Error::Split(_))
        ));
    }
}
