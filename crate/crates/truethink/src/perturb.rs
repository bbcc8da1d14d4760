//! Step and context perturbations: small random integer offsets on numeric
//! literals, step dropping for non-numeric steps, and exhaustive
//! enumeration of all offset assignments for oracle-grade scoring.
//!
//! Offsets shift the integer part of a literal and leave fractional digits
//! untouched (`4.14` + 1 → `5.14`). Every non-digit character outside the
//! literals is preserved byte-for-byte; the one exception is a leading `-`
//! that appears when an offset drives a value negative.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{NumericSpan, Step};

/// The admissible offsets, in enumeration order.
pub const OFFSET_VALUES: [i8; 6] = [-3, -2, -1, 1, 2, 3];

/// Default cap on exhaustive enumeration: 6^5 assignments.
pub const ENUMERATION_CAP: usize = 7776;

/// A nonzero offset in `[-3, 3]` applied to one numeric span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offset(i8);

impl Offset {
    pub fn new(value: i8) -> Result<Self> {
        if value == 0 || value.abs() > 3 {
            return Err(Error::Contract(format!(
                "offset must be nonzero with |value| <= 3, got {value}"
            )));
        }
        Ok(Offset(value))
    }

    pub fn value(self) -> i8 {
        self.0
    }

    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Offset(*OFFSET_VALUES.choose(rng).expect("non-empty"))
    }
}

/// Record of how one step was perturbed, sufficient for exact replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub step_index: usize,
    /// `(span index, offset)` pairs, one per numeric span when perturbed.
    pub span_offsets: Vec<(usize, Offset)>,
    /// True when the step was removed instead of offset (non-numeric steps).
    pub dropped: bool,
    pub seed: u64,
}

impl PerturbationPlan {
    fn verbatim(step_index: usize, seed: u64) -> Self {
        PerturbationPlan {
            step_index,
            span_offsets: Vec::new(),
            dropped: false,
            seed,
        }
    }
}

/// Render `text` with the given offsets applied to its numeric spans.
///
/// `offsets` must have one entry per span. The integer part of each
/// literal is shifted; the fractional part is copied unchanged.
pub fn apply_offsets(text: &str, spans: &[NumericSpan], offsets: &[Offset]) -> String {
    debug_assert_eq!(spans.len(), offsets.len());
    let mut out = String::with_capacity(text.len() + 4);
    let mut cursor = 0;
    for (span, offset) in spans.iter().zip(offsets) {
        out.push_str(&text[cursor..span.start]);
        let lit = &text[span.start..span.end];
        let (int_part, frac_part) = match lit.split_once('.') {
            Some((i, f)) => (i, Some(f)),
            None => (lit, None),
        };
        let value: i64 = int_part.parse().expect("span integer part parses");
        let shifted = value + i64::from(offset.value());
        out.push_str(&shifted.to_string());
        if let Some(frac) = frac_part {
            out.push('.');
            out.push_str(frac);
        }
        cursor = span.end;
    }
    out.push_str(&text[cursor..]);
    out
}

/// Perturb one step under study.
///
/// Numeric steps get an independent offset per span; steps without
/// numbers are dropped entirely (the perturbed text is empty), which
/// realizes the step-removal intervention.
pub fn perturb_step(step: &Step, seed: u64) -> (String, PerturbationPlan) {
    if step.numeric_spans.is_empty() {
        return (
            String::new(),
            PerturbationPlan {
                step_index: step.index,
                span_offsets: Vec::new(),
                dropped: true,
                seed,
            },
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<Offset> = step.numeric_spans.iter().map(|_| Offset::sample(&mut rng)).collect();
    let text = apply_offsets(&step.text, &step.numeric_spans, &offsets);
    let plan = PerturbationPlan {
        step_index: step.index,
        span_offsets: offsets.iter().copied().enumerate().collect(),
        dropped: false,
        seed,
    };
    (text, plan)
}

/// Perturb every numeric literal in a context prefix.
///
/// Unlike [`perturb_step`], context steps without numbers are kept
/// verbatim rather than dropped: only numerical values change.
pub fn perturb_context(context: &[Step], seed: u64) -> Vec<(String, PerturbationPlan)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    context
        .iter()
        .map(|step| {
            if step.numeric_spans.is_empty() {
                (step.text.clone(), PerturbationPlan::verbatim(step.index, seed))
            } else {
                let offsets: Vec<Offset> =
                    step.numeric_spans.iter().map(|_| Offset::sample(&mut rng)).collect();
                let text = apply_offsets(&step.text, &step.numeric_spans, &offsets);
                let plan = PerturbationPlan {
                    step_index: step.index,
                    span_offsets: offsets.iter().copied().enumerate().collect(),
                    dropped: false,
                    seed,
                };
                (text, plan)
            }
        })
        .collect()
}

/// Enumerate every offset assignment for one step, in deterministic order:
/// lexicographic over spans with the first span varying slowest, offsets
/// ascending per [`OFFSET_VALUES`]. A step without numeric spans yields the
/// single dropped variant.
pub fn enumerate_perturbations(step: &Step, cap: usize) -> Result<Vec<(String, PerturbationPlan)>> {
    let k = step.numeric_spans.len();
    if k == 0 {
        return Ok(vec![(
            String::new(),
            PerturbationPlan {
                step_index: step.index,
                span_offsets: Vec::new(),
                dropped: true,
                seed: 0,
            },
        )]);
    }
    let total = 6usize
        .checked_pow(k as u32)
        .filter(|&t| t <= cap)
        .ok_or_else(|| {
            Error::Enumeration(format!(
                "6^{k} assignments exceed the cap of {cap}; use monte_carlo mode"
            ))
        })?;

    let mut variants = Vec::with_capacity(total);
    let mut indices = vec![0usize; k];
    loop {
        let offsets: Vec<Offset> = indices.iter().map(|&i| Offset(OFFSET_VALUES[i])).collect();
        let text = apply_offsets(&step.text, &step.numeric_spans, &offsets);
        variants.push((
            text,
            PerturbationPlan {
                step_index: step.index,
                span_offsets: offsets.iter().copied().enumerate().collect(),
                dropped: false,
                seed: 0,
            },
        ));
        // Advance the last index first: first span varies slowest.
        let mut pos = k;
        loop {
            if pos == 0 {
                return Ok(variants);
            }
            pos -= 1;
            indices[pos] += 1;
            if indices[pos] < OFFSET_VALUES.len() {
                break;
            }
            indices[pos] = 0;
        }
    }
}

/// Enumerate joint offset assignments over a whole context prefix, in the
/// same deterministic order as [`enumerate_perturbations`] (earlier steps
/// vary slowest). Steps without numbers stay verbatim in every variant.
/// Returns one `Vec` of step texts per joint assignment.
pub fn enumerate_context_perturbations(
    context: &[Step],
    cap: usize,
) -> Result<Vec<Vec<String>>> {
    let k: usize = context.iter().map(|s| s.numeric_spans.len()).sum();
    let total = 6usize
        .checked_pow(k as u32)
        .filter(|&t| t <= cap)
        .ok_or_else(|| {
            Error::Enumeration(format!(
                "6^{k} context assignments exceed the cap of {cap}; use monte_carlo mode"
            ))
        })?;

    let mut variants = Vec::with_capacity(total);
    let mut indices = vec![0usize; k];
    loop {
        let mut texts = Vec::with_capacity(context.len());
        let mut flat = 0;
        for step in context {
            if step.numeric_spans.is_empty() {
                texts.push(step.text.clone());
            } else {
                let offsets: Vec<Offset> = step
                    .numeric_spans
                    .iter()
                    .map(|_| {
                        let o = Offset(OFFSET_VALUES[indices[flat]]);
                        flat += 1;
                        o
                    })
                    .collect();
                texts.push(apply_offsets(&step.text, &step.numeric_spans, &offsets));
            }
        }
        variants.push(texts);

        if k == 0 {
            return Ok(variants);
        }
        let mut pos = k;
        loop {
            if pos == 0 {
                return Ok(variants);
            }
            pos -= 1;
            indices[pos] += 1;
            if indices[pos] < OFFSET_VALUES.len() {
                break;
            }
            indices[pos] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::scan_numeric_spans;

    /// Mask digit runs (with an optional leading minus) so byte-level
    /// equality outside the literals can be asserted.
    fn mask_digits(text: &str) -> String {
        let mut out = String::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i].is_ascii_digit() {
                if out.ends_with('-') {
                    out.pop();
                }
                out.push('#');
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
            } else {
                out.push(bytes[i] as char);
                i += 1;
            }
        }
        out
    }

    #[test]
    fn perturb_step_shifts_every_span() {
        let step = Step::from_text(0, "So x = 12 and y = 5.");
        let (text, plan) = perturb_step(&step, 42);
        assert!(!plan.dropped);
        assert_eq!(plan.span_offsets.len(), 2);
        assert_ne!(text, step.text);
        assert_eq!(mask_digits(&text), mask_digits(&step.text));
        // Re-parse and check each literal moved by its recorded offset.
        let new_spans = scan_numeric_spans(&text);
        assert_eq!(new_spans.len(), 2);
        for ((_, offset), (old, new)) in plan
            .span_offsets
            .iter()
            .zip(step.numeric_spans.iter().zip(&new_spans))
        {
            assert_eq!(new.value - old.value, f64::from(offset.value()));
        }
    }

    #[test]
    fn perturb_step_drops_non_numeric() {
        let step = Step::from_text(3, "Therefore the claim holds.");
        let (text, plan) = perturb_step(&step, 0);
        assert!(plan.dropped);
        assert!(text.is_empty());
        assert!(plan.span_offsets.is_empty());
    }

    #[test]
    fn perturb_preserves_fraction_digits() {
        let step = Step::from_text(0, "rounds to 4.14 inches");
        let spans = &step.numeric_spans;
        let text = apply_offsets(&step.text, spans, &[Offset::new(1).unwrap()]);
        assert_eq!(text, "rounds to 5.14 inches");
    }

    #[test]
    fn negative_results_render() {
        let step = Step::from_text(0, "start with 1 item");
        let text = apply_offsets(&step.text, &step.numeric_spans, &[Offset::new(-3).unwrap()]);
        assert_eq!(text, "start with -2 item");
    }

    #[test]
    fn perturb_step_is_deterministic() {
        let step = Step::from_text(0, "values 3 and 4 and 9");
        assert_eq!(perturb_step(&step, 11), perturb_step(&step, 11));
    }

    #[test]
    fn perturb_context_keeps_non_numeric_verbatim() {
        let ctx = vec![
            Step::from_text(0, "Consider the square."),
            Step::from_text(1, "a = 1."),
        ];
        let out = perturb_context(&ctx, 5);
        assert_eq!(out[0].0, "Consider the square.");
        assert!(out[0].1.span_offsets.is_empty() && !out[0].1.dropped);
        assert_ne!(out[1].0, "a = 1.");
    }

    #[test]
    fn perturb_context_empty() {
        assert!(perturb_context(&[], 0).is_empty());
    }

    #[test]
    fn enumerate_counts() {
        let one = Step::from_text(0, "x = 3.");
        assert_eq!(enumerate_perturbations(&one, ENUMERATION_CAP).unwrap().len(), 6);

        let two = Step::from_text(0, "x = 3 and y = 4.");
        let variants = enumerate_perturbations(&two, ENUMERATION_CAP).unwrap();
        assert_eq!(variants.len(), 36);
        let unique: std::collections::BTreeSet<String> =
            variants.iter().map(|(t, _)| t.clone()).collect();
        assert_eq!(unique.len(), 36);
    }

    #[test]
    fn enumerate_zero_spans_is_single_drop() {
        let step = Step::from_text(0, "no numbers here.");
        let variants = enumerate_perturbations(&step, ENUMERATION_CAP).unwrap();
        assert_eq!(variants.len(), 1);
        assert!(variants[0].1.dropped);
    }

    #[test]
    fn enumerate_cap_exceeded() {
        let step = Step::from_text(0, "1 2 3 4 5 6");
        assert!(matches!(
            enumerate_perturbations(&step, ENUMERATION_CAP),
            Err(Error::Enumeration(_))
        ));
    }

    #[test]
    fn enumerate_order_is_lexicographic() {
        let step = Step::from_text(0, "a 1 b 2");
        let variants = enumerate_perturbations(&step, ENUMERATION_CAP).unwrap();
        // First span varies slowest; offsets ascend within each span.
        assert_eq!(variants[0].0, "a -2 b -1");
        assert_eq!(variants[1].0, "a -2 b 0");
        assert_eq!(variants[6].0, "a -1 b -1");
        assert_eq!(variants[35].0, "a 4 b 5");
    }

    #[test]
    fn enumerate_context_joint_order() {
        let ctx = vec![Step::from_text(0, "a 1."), Step::from_text(1, "b 2.")];
        let variants = enumerate_context_perturbations(&ctx, ENUMERATION_CAP).unwrap();
        assert_eq!(variants.len(), 36);
        assert_eq!(variants[0], vec!["a -2.".to_string(), "b -1.".to_string()]);
        assert_eq!(variants[1], vec!["a -2.".to_string(), "b 0.".to_string()]);
    }

    #[test]
    fn enumerate_context_empty_is_identity() {
        let ctx = vec![Step::from_text(0, "no numbers.")];
        let variants = enumerate_context_perturbations(&ctx, ENUMERATION_CAP).unwrap();
        assert_eq!(variants, vec![vec!["no numbers.".to_string()]]);
    }
}
