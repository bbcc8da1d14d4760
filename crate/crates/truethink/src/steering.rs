//! Latent-direction extraction and the causal steering tests.
//!
//! The direction at a layer is the difference in mean last-token hidden
//! states between true-thinking and decorative steps. Adding it to a
//! step's tokens forces the model to engage the step (engagement test);
//! subtracting it makes the model disregard the step (disengagement
//! test). Flip rates against baseline interventions quantify whether the
//! direction carries a real signal.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{
    with_attention_scale, with_steering, AttentionScaleHook, Backend, SteeringHook,
};
use crate::error::{Error, Result};
use crate::perturb::{perturb_context, perturb_step, PerturbationPlan};
use crate::scoring::{ScoredProblem, StepScore};
use crate::seeding::derive_seed;
use crate::trace::Answer;

/// Where a steering vector came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub alpha: f64,
    pub beta: f64,
    pub n_tt: usize,
    pub n_dt: usize,
    pub source_split: String,
    pub variant: String,
}

/// A layer-indexed latent direction with its norm and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub layer: usize,
    pub vector: Vec<f64>,
    pub norm: f64,
    pub provenance: Provenance,
}

impl SteeringVector {
    pub fn new(layer: usize, vector: Vec<f64>, provenance: Provenance) -> Self {
        let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        SteeringVector {
            layer,
            vector,
            norm,
            provenance,
        }
    }

    pub fn cosine(&self, other: &[f64]) -> f64 {
        let dot: f64 = self.vector.iter().zip(other).map(|(a, b)| a * b).sum();
        let other_norm = other.iter().map(|x| x * x).sum::<f64>().sqrt();
        if self.norm == 0.0 || other_norm == 0.0 {
            0.0
        } else {
            dot / (self.norm * other_norm)
        }
    }
}

/// A step referenced for hidden-state capture: the full chain it lives in
/// plus its index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRef {
    pub problem_id: String,
    pub question: String,
    pub step_texts: Vec<String>,
    pub step_index: usize,
}

impl StepRef {
    pub fn from_scored(scored: &ScoredProblem, step_index: usize) -> Self {
        StepRef {
            problem_id: scored.problem.id.clone(),
            question: scored.problem.question.clone(),
            step_texts: scored.cot.step_texts(),
            step_index,
        }
    }
}

/// Mean last-token hidden state over a class of steps.
fn class_mean<B: Backend + ?Sized>(backend: &mut B, refs: &[StepRef], layer: usize) -> Result<Vec<f64>> {
    let dim = backend.info().hidden_dim;
    let mut mean = vec![0.0f64; dim];
    for step_ref in refs {
        let (start, end) =
            backend.step_token_range(&step_ref.question, &step_ref.step_texts, step_ref.step_index)?;
        if start == end {
            return Err(Error::Contract(format!(
                "step {} of {} occupies no tokens",
                step_ref.step_index, step_ref.problem_id
            )));
        }
        let states = backend.capture_hidden(&step_ref.question, &step_ref.step_texts, layer, &[end - 1])?;
        for (m, v) in mean.iter_mut().zip(&states[0].vector) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= refs.len() as f64;
    }
    Ok(mean)
}

/// Difference-in-means direction: mean hidden state of true-thinking
/// steps minus mean of decorative steps, at the last token of each step.
pub fn extract_direction<B: Backend + ?Sized>(
    backend: &mut B,
    true_thinking: &[StepRef],
    decorative: &[StepRef],
    layer: usize,
    provenance: Provenance,
) -> Result<SteeringVector> {
    if !backend.info().capabilities.hidden_capture {
        return Err(Error::Contract(format!(
            "backend {} lacks hidden-state capture",
            backend.info().model_id
        )));
    }
    if true_thinking.is_empty() {
        return Err(Error::Selection("true-thinking class is empty".into()));
    }
    if decorative.is_empty() {
        return Err(Error::Selection("decorative class is empty".into()));
    }
    let mean_tt = class_mean(backend, true_thinking, layer)?;
    let mean_dt = class_mean(backend, decorative, layer)?;
    let vector: Vec<f64> = mean_tt.iter().zip(&mean_dt).map(|(a, b)| a - b).collect();
    let provenance = Provenance {
        n_tt: true_thinking.len(),
        n_dt: decorative.len(),
        ..provenance
    };
    Ok(SteeringVector::new(layer, vector, provenance))
}

/// A seeded isotropic direction rescaled to the reference vector's norm,
/// on the same layer.
pub fn random_vector(reference: &SteeringVector, seed: u64) -> SteeringVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..reference.vector.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x *= reference.norm / norm;
        }
    }
    SteeringVector::new(
        reference.layer,
        v,
        Provenance {
            variant: "random".into(),
            ..reference.provenance.clone()
        },
    )
}

// ---------------------------------------------------------------------------
// Causal test cases
// ---------------------------------------------------------------------------

/// Which causal test a case belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Engagement,
    Disengagement,
    SelfVerify,
}

/// One eligible steering case, with everything needed for exact replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub kind: TestKind,
    pub problem_id: String,
    pub question: String,
    pub step_index: usize,
    /// Context step texts as presented (perturbed for self-verify cases).
    pub context_texts: Vec<String>,
    /// The step text under intervention: the perturbed step for the
    /// engagement and disengagement tests, the intact self-verification
    /// step for the self-verify test.
    pub step_text: String,
    pub step_plan: Option<PerturbationPlan>,
    pub context_plans: Vec<PerturbationPlan>,
    /// Early-exit answer on the case prompt before any steering.
    pub baseline_answer: Answer,
    pub gold_answer: String,
}

impl TestCase {
    /// The full prompt step list: context plus the step under study.
    pub fn prompt_steps(&self) -> Vec<String> {
        let mut steps = self.context_texts.clone();
        steps.push(self.step_text.clone());
        steps
    }

    /// Re-check the eligibility predicate against a backend. Backends are
    /// deterministic, so emitted cases must verify exactly on replay.
    pub fn verify_eligibility<B: Backend + ?Sized>(&self, backend: &mut B) -> Result<bool> {
        let gold = Answer {
            raw: self.gold_answer.clone(),
            canonical: Some(self.gold_answer.clone()),
        };
        match self.kind {
            TestKind::Engagement => {
                let without = backend.early_exit_answer(&self.question, &self.context_texts)?;
                let with = backend.early_exit_answer(&self.question, &self.prompt_steps())?;
                Ok(without.matches(&gold) && with.matches(&gold))
            }
            TestKind::Disengagement => {
                let without = backend.early_exit_answer(&self.question, &self.context_texts)?;
                let with = backend.early_exit_answer(&self.question, &self.prompt_steps())?;
                Ok(without.matches(&gold) && !with.matches(&gold))
            }
            TestKind::SelfVerify => {
                let with = backend.early_exit_answer(&self.question, &self.prompt_steps())?;
                Ok(!with.matches(&gold))
            }
        }
    }
}

fn case_seed(seed: u64, problem_id: &str, step_index: usize, tag: &str) -> u64 {
    derive_seed(&["case", &seed.to_string(), problem_id, &step_index.to_string(), tag])
}

/// Cases where the model is correct without the step and stays correct
/// with the step perturbed: it ignores the step, so steering should be
/// able to force engagement. Steps whose perturbation drops them entirely
/// are skipped (there are no tokens to steer).
pub fn select_engagement_cases<B: Backend + ?Sized>(
    backend: &mut B,
    scored: &[ScoredProblem],
    seed: u64,
) -> Result<Vec<TestCase>> {
    select_perturbed_cases(backend, scored, seed, TestKind::Engagement)
}

/// Cases where the model is correct without the step but the perturbed
/// step breaks it: the model engages the step, so reversed steering
/// should be able to force disengagement.
pub fn select_disengagement_cases<B: Backend + ?Sized>(
    backend: &mut B,
    scored: &[ScoredProblem],
    seed: u64,
) -> Result<Vec<TestCase>> {
    select_perturbed_cases(backend, scored, seed, TestKind::Disengagement)
}

fn select_perturbed_cases<B: Backend + ?Sized>(
    backend: &mut B,
    scored: &[ScoredProblem],
    seed: u64,
    kind: TestKind,
) -> Result<Vec<TestCase>> {
    let mut cases = Vec::new();
    for problem in scored {
        let gold = problem.problem.gold();
        let texts = problem.cot.step_texts();
        for step in &problem.cot.steps {
            let tag = match kind {
                TestKind::Engagement => "engage",
                TestKind::Disengagement => "disengage",
                TestKind::SelfVerify => unreachable!("self-verify cases use their own selector"),
            };
            let (perturbed, plan) =
                perturb_step(step, case_seed(seed, &problem.problem.id, step.index, tag));
            if plan.dropped {
                continue;
            }
            let context = texts[..step.index].to_vec();
            let without = backend.early_exit_answer(&problem.problem.question, &context)?;
            if !without.matches(&gold) {
                continue;
            }
            let mut prompt = context.clone();
            prompt.push(perturbed.clone());
            let with = backend.early_exit_answer(&problem.problem.question, &prompt)?;
            let eligible = match kind {
                TestKind::Engagement => with.matches(&gold),
                TestKind::Disengagement => !with.matches(&gold),
                TestKind::SelfVerify => unreachable!(),
            };
            if eligible {
                cases.push(TestCase {
                    kind,
                    problem_id: problem.problem.id.clone(),
                    question: problem.problem.question.clone(),
                    step_index: step.index,
                    context_texts: context,
                    step_text: perturbed,
                    step_plan: Some(plan),
                    context_plans: Vec::new(),
                    baseline_answer: with,
                    gold_answer: problem.problem.gold_answer.clone(),
                });
            }
        }
    }
    Ok(cases)
}

/// Decorative self-verification cases: the model is correct with the
/// intact chain up to the self-verification step, but perturbing the
/// context breaks it even though the step still states the solution.
pub fn select_self_verification_cases<B: Backend + ?Sized>(
    backend: &mut B,
    scored: &[ScoredProblem],
    cutoff: f64,
    seed: u64,
) -> Result<Vec<TestCase>> {
    let mut cases = Vec::new();
    for problem in scored {
        let gold = problem.problem.gold();
        let texts = problem.cot.step_texts();
        for score in &problem.scores {
            if !score.is_self_verification || score.tts >= cutoff {
                continue;
            }
            let index = score.step_index;
            let step_text = texts[index].clone();
            let mut intact_prompt = texts[..index].to_vec();
            intact_prompt.push(step_text.clone());
            let intact = backend.early_exit_answer(&problem.problem.question, &intact_prompt)?;
            if !intact.matches(&gold) {
                continue;
            }
            let perturbed = perturb_context(
                &problem.cot.steps[..index],
                case_seed(seed, &problem.problem.id, index, "self-verify"),
            );
            let context_texts: Vec<String> = perturbed.iter().map(|(t, _)| t.clone()).collect();
            let context_plans: Vec<PerturbationPlan> =
                perturbed.into_iter().map(|(_, p)| p).collect();
            let mut prompt = context_texts.clone();
            prompt.push(step_text.clone());
            let broken = backend.early_exit_answer(&problem.problem.question, &prompt)?;
            if broken.matches(&gold) {
                continue;
            }
            cases.push(TestCase {
                kind: TestKind::SelfVerify,
                problem_id: problem.problem.id.clone(),
                question: problem.problem.question.clone(),
                step_index: index,
                context_texts,
                step_text,
                step_plan: None,
                context_plans,
                baseline_answer: broken,
                gold_answer: problem.problem.gold_answer.clone(),
            });
        }
    }
    Ok(cases)
}

// ---------------------------------------------------------------------------
// Flip tests
// ---------------------------------------------------------------------------

/// Intervention family a report row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TrueThinking,
    DropStepDirection,
    AttentionScale,
    RandomVector,
    ZeroVector,
}

/// Flip tallies for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct FlipCounts {
    pub eligible: usize,
    pub flips: usize,
}

impl FlipCounts {
    /// Flip rate; `None` when no case was eligible (undefined, not zero).
    pub fn rate(&self) -> Option<f64> {
        if self.eligible == 0 {
            None
        } else {
            Some(self.flips as f64 / self.eligible as f64)
        }
    }
}

/// Per-layer flip rates for one (test kind, method) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub kind: TestKind,
    pub method: Method,
    pub per_layer: BTreeMap<usize, FlipCounts>,
}

impl FlipReport {
    pub fn new(kind: TestKind, method: Method) -> Self {
        FlipReport {
            kind,
            method,
            per_layer: BTreeMap::new(),
        }
    }

    pub fn rate(&self, layer: usize) -> Option<f64> {
        self.per_layer.get(&layer).and_then(FlipCounts::rate)
    }

    /// Best layer and its rate; ties break toward the lower layer index.
    pub fn top1(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (&layer, counts) in &self.per_layer {
            if let Some(rate) = counts.rate() {
                let better = match best {
                    None => true,
                    Some((_, best_rate)) => rate > best_rate,
                };
                if better {
                    best = Some((layer, rate));
                }
            }
        }
        best
    }

    pub fn merge(&mut self, other: FlipReport) {
        for (layer, counts) in other.per_layer {
            let entry = self.per_layer.entry(layer).or_default();
            entry.eligible += counts.eligible;
            entry.flips += counts.flips;
        }
    }
}

/// Whether a steered answer counts as a flip for the given test kind.
/// Engagement flips break a correct answer; disengagement and self-verify
/// flips restore the correct answer.
fn is_flip(kind: TestKind, steered: &Answer, gold: &Answer) -> bool {
    match kind {
        TestKind::Engagement => !steered.matches(gold),
        TestKind::Disengagement | TestKind::SelfVerify => steered.matches(gold),
    }
}

/// Run one steering intervention over a set of cases at the vector's
/// layer. `sign` is +1 for the engagement test (apply the direction) and
/// -1 for the disengagement test (apply its reverse).
pub fn run_flip_test<B: Backend + ?Sized>(
    backend: &mut B,
    cases: &[TestCase],
    vector: &SteeringVector,
    sign: i8,
    method: Method,
) -> Result<FlipReport> {
    let kind = cases.first().map(|c| c.kind).unwrap_or(TestKind::Engagement);
    let mut report = FlipReport::new(kind, method);
    let counts = report.per_layer.entry(vector.layer).or_default();
    for case in cases {
        let steps = case.prompt_steps();
        let range = backend.step_token_range(&case.question, &steps, case.step_index)?;
        let hook = SteeringHook {
            layer: vector.layer,
            vector: vector.vector.clone(),
            token_range: range,
            sign,
        };
        let gold = Answer {
            raw: case.gold_answer.clone(),
            canonical: Some(case.gold_answer.clone()),
        };
        let steered = with_steering(backend, hook, |b| b.early_exit_answer(&case.question, &steps))?;
        counts.eligible += 1;
        if is_flip(case.kind, &steered, &gold) {
            counts.flips += 1;
        }
    }
    Ok(report)
}

/// Sweep a family of per-layer directions over the same cases.
pub fn layer_sweep<B: Backend + ?Sized>(
    backend: &mut B,
    cases: &[TestCase],
    directions: &BTreeMap<usize, SteeringVector>,
    sign: i8,
    method: Method,
) -> Result<FlipReport> {
    let kind = cases.first().map(|c| c.kind).unwrap_or(TestKind::Engagement);
    let mut report = FlipReport::new(kind, method);
    for vector in directions.values() {
        report.merge(run_flip_test(backend, cases, vector, sign, method)?);
    }
    Ok(report)
}

/// Attention-scaling baseline: replace the steering hook with a
/// multiplicative attention hook on the step's tokens at one layer.
pub fn attention_scaling_baseline<B: Backend + ?Sized>(
    backend: &mut B,
    cases: &[TestCase],
    layer: usize,
    scale: f64,
) -> Result<FlipReport> {
    if !backend.info().capabilities.attention_scale {
        return Err(Error::Contract(format!(
            "backend {} lacks attention scaling",
            backend.info().model_id
        )));
    }
    let kind = cases.first().map(|c| c.kind).unwrap_or(TestKind::Engagement);
    let mut report = FlipReport::new(kind, method_for_attention());
    let counts = report.per_layer.entry(layer).or_default();
    for case in cases {
        let steps = case.prompt_steps();
        let range = backend.step_token_range(&case.question, &steps, case.step_index)?;
        let hook = AttentionScaleHook {
            layer,
            token_range: range,
            scale,
        };
        let gold = Answer {
            raw: case.gold_answer.clone(),
            canonical: Some(case.gold_answer.clone()),
        };
        let steered =
            with_attention_scale(backend, hook, |b| b.early_exit_answer(&case.question, &steps))?;
        counts.eligible += 1;
        if is_flip(case.kind, &steered, &gold) {
            counts.flips += 1;
        }
    }
    Ok(report)
}

fn method_for_attention() -> Method {
    Method::AttentionScale
}

/// Classes for the DropStep-direction baseline: top and bottom steps by
/// DropStep score, with the same class sizes as the TTS selection. Ties
/// break by (problem id, step index) so the selection replays exactly.
pub fn dropstep_classes(scored: &[ScoredProblem], n_tt: usize, n_dt: usize) -> Result<(Vec<StepRef>, Vec<StepRef>)> {
    let mut all: Vec<(&ScoredProblem, &StepScore)> = scored
        .iter()
        .flat_map(|p| p.scores.iter().map(move |s| (p, s)))
        .collect();
    if all.len() < n_tt.max(n_dt) || n_tt == 0 || n_dt == 0 {
        return Err(Error::Selection(format!(
            "dropstep classes need {n_tt}+{n_dt} steps, have {}",
            all.len()
        )));
    }
    all.sort_by(|(pa, sa), (pb, sb)| {
        sb.dropstep
            .partial_cmp(&sa.dropstep)
            .expect("finite dropstep")
            .then_with(|| pa.problem.id.cmp(&pb.problem.id))
            .then_with(|| sa.step_index.cmp(&sb.step_index))
    });
    let top: Vec<StepRef> = all[..n_tt]
        .iter()
        .map(|(p, s)| StepRef::from_scored(p, s.step_index))
        .collect();
    let bottom: Vec<StepRef> = all[all.len() - n_dt..]
        .iter()
        .map(|(p, s)| StepRef::from_scored(p, s.step_index))
        .collect();
    Ok((top, bottom))
}

/// Outcome of steering decorative self-verification steps at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestoreOutcome {
    pub eligible: usize,
    pub restored: usize,
}

impl RestoreOutcome {
    pub fn accuracy(&self) -> Option<f64> {
        if self.eligible == 0 {
            None
        } else {
            Some(self.restored as f64 / self.eligible as f64)
        }
    }
}

/// Apply the direction to the tokens of decorative self-verification
/// steps under a perturbed context, and measure how often the correct
/// answer is restored. By construction the unsteered accuracy is zero.
pub fn steer_self_verification<B: Backend + ?Sized>(
    backend: &mut B,
    cases: &[TestCase],
    vector: &SteeringVector,
) -> Result<RestoreOutcome> {
    let mut outcome = RestoreOutcome {
        eligible: 0,
        restored: 0,
    };
    for case in cases {
        if case.kind != TestKind::SelfVerify {
            return Err(Error::Contract("expected self-verify cases".into()));
        }
        let steps = case.prompt_steps();
        let range = backend.step_token_range(&case.question, &steps, case.step_index)?;
        let hook = SteeringHook {
            layer: vector.layer,
            vector: vector.vector.clone(),
            token_range: range,
            sign: 1,
        };
        let gold = Answer {
            raw: case.gold_answer.clone(),
            canonical: Some(case.gold_answer.clone()),
        };
        let steered = with_steering(backend, hook, |b| b.early_exit_answer(&case.question, &steps))?;
        outcome.eligible += 1;
        if steered.matches(&gold) {
            outcome.restored += 1;
        }
    }
    Ok(outcome)
}

/// One band of the threshold ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub band: (f64, f64),
    pub n_tt: usize,
    /// Set when the band produced a near-zero direction (equal means).
    pub degenerate: bool,
    pub rate: Option<f64>,
}

/// Extract directions from TTS bands against a fixed decorative class and
/// measure the engagement flip rate per band. Empty bands are skipped
/// with a marker.
pub fn threshold_ablation<B: Backend + ?Sized>(
    backend: &mut B,
    scored: &[ScoredProblem],
    bands: &[(f64, f64)],
    decorative: &[StepRef],
    cases: &[TestCase],
    layer: usize,
) -> Result<Vec<BandReport>> {
    let mut reports = Vec::with_capacity(bands.len());
    for &(lo, hi) in bands {
        let class: Vec<StepRef> = scored
            .iter()
            .flat_map(|p| {
                p.scores
                    .iter()
                    .filter(|s| s.tts >= lo && s.tts <= hi)
                    .map(move |s| StepRef::from_scored(p, s.step_index))
            })
            .collect();
        if class.is_empty() {
            reports.push(BandReport {
                band: (lo, hi),
                n_tt: 0,
                degenerate: false,
                rate: None,
            });
            continue;
        }
        let provenance = Provenance {
            alpha: lo,
            beta: hi,
            n_tt: class.len(),
            n_dt: decorative.len(),
            source_split: "ablation".into(),
            variant: format!("band[{lo},{hi}]"),
        };
        let vector = extract_direction(backend, &class, decorative, layer, provenance)?;
        let degenerate = vector.norm < 1e-9;
        let rate = if degenerate {
            Some(0.0)
        } else {
            run_flip_test(backend, cases, &vector, 1, Method::TrueThinking)?.rate(layer)
        };
        reports.push(BandReport {
            band: (lo, hi),
            n_tt: class.len(),
            degenerate,
            rate,
        });
    }
    Ok(reports)
}

/// Attention mass on the case step's key tokens, averaged over query
/// positions after the step, before and under steering.
pub fn attention_delta<B: Backend + ?Sized>(
    backend: &mut B,
    case: &TestCase,
    vector: &SteeringVector,
    sign: i8,
    layer: usize,
) -> Result<(f64, f64)> {
    if !backend.info().capabilities.attention_capture {
        return Err(Error::Contract(format!(
            "backend {} lacks attention capture",
            backend.info().model_id
        )));
    }
    let steps = case.prompt_steps();
    let range = backend.step_token_range(&case.question, &steps, case.step_index)?;
    let before = backend
        .capture_attention(&case.question, &steps, layer)?
        .mass_on_range(range, range.1);
    let hook = SteeringHook {
        layer: vector.layer,
        vector: vector.vector.clone(),
        token_range: range,
        sign,
    };
    let after = with_steering(backend, hook, |b| {
        Ok(b.capture_attention(&case.question, &steps, layer)?
            .mass_on_range(range, range.1))
    })?;
    Ok((before, after))
}

// ---------------------------------------------------------------------------
// Vector files
// ---------------------------------------------------------------------------

/// Write a steering vector as a binary file: one JSON header line
/// (model id, layer, dimension, norm, provenance) followed by the raw
/// little-endian f32 array.
pub fn write_vector_binary(path: &std::path::Path, model_id: &str, vector: &SteeringVector) -> Result<()> {
    use std::io::Write;
    let header = serde_json::json!({
        "model_id": model_id,
        "layer": vector.layer,
        "dim": vector.vector.len(),
        "norm": vector.norm,
        "provenance": vector.provenance,
    });
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{header}")?;
    for value in &vector.vector {
        file.write_all(&(*value as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read a steering vector written by [`write_vector_binary`].
pub fn read_vector_binary(path: &std::path::Path) -> Result<(String, SteeringVector)> {
    use std::io::Read;
    let data = std::fs::read(path)?;
    let newline = data
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Record("vector file has no header line".into()))?;
    let header: serde_json::Value = serde_json::from_slice(&data[..newline])
        .map_err(|e| Error::Record(format!("bad vector header: {e}")))?;
    let model_id = header["model_id"]
        .as_str()
        .ok_or_else(|| Error::Record("vector header lacks model_id".into()))?
        .to_string();
    let layer = header["layer"].as_u64().unwrap_or(0) as usize;
    let dim = header["dim"].as_u64().unwrap_or(0) as usize;
    let provenance: Provenance = serde_json::from_value(header["provenance"].clone())
        .map_err(|e| Error::Record(format!("bad vector provenance: {e}")))?;
    let mut body = &data[newline + 1..];
    let mut vector = Vec::with_capacity(dim);
    let mut buf = [0u8; 4];
    for _ in 0..dim {
        body.read_exact(&mut buf)
            .map_err(|_| Error::Record("vector file body shorter than header dim".into()))?;
        vector.push(f64::from(f32::from_le_bytes(buf)));
    }
    Ok((model_id, SteeringVector::new(layer, vector, provenance)))
}

/// Plain-text alternative: header comments then one value per line.
pub fn write_vector_text(path: &std::path::Path, model_id: &str, vector: &SteeringVector) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# model_id: {model_id}")?;
    writeln!(file, "# layer: {}", vector.layer)?;
    writeln!(file, "# dim: {}", vector.vector.len())?;
    writeln!(file, "# norm: {}", vector.norm)?;
    for value in &vector.vector {
        writeln!(file, "{value}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn provenance() -> Provenance {
        Provenance {
            alpha: 0.9,
            beta: 0.0,
            n_tt: 1,
            n_dt: 1,
            source_split: "train".into(),
            variant: "full".into(),
        }
    }

    #[test]
    fn random_vector_preserves_norm() {
        let reference = SteeringVector::new(2, vec![3.0, 4.0, 0.0, 0.0], provenance());
        let a = random_vector(&reference, 1);
        let b = random_vector(&reference, 2);
        assert!((a.norm - reference.norm).abs() / reference.norm < 1e-9);
        assert!((b.norm - reference.norm).abs() / reference.norm < 1e-9);
        assert_ne!(a.vector, b.vector);
        assert_eq!(a.layer, reference.layer);
    }

    #[test]
    fn random_vector_nearly_orthogonal_in_high_dim() {
        let mut v = vec![0.0; 256];
        v[0] = 1.0;
        let reference = SteeringVector::new(1, v, provenance());
        let mut total = 0.0;
        let n = 50;
        for seed in 0..n {
            let r = random_vector(&reference, seed);
            total += reference.cosine(&r.vector).abs();
        }
        assert!(total / f64::from(n) < 0.2);
    }

    #[test]
    fn flip_counts_rate_undefined_for_zero_eligible() {
        let counts = FlipCounts::default();
        assert_eq!(counts.rate(), None);
        let some = FlipCounts {
            eligible: 4,
            flips: 1,
        };
        assert_eq!(some.rate(), Some(0.25));
    }

    #[test]
    fn top1_breaks_ties_toward_lower_layer() {
        let mut report = FlipReport::new(TestKind::Engagement, Method::TrueThinking);
        report.per_layer.insert(2, FlipCounts { eligible: 4, flips: 2 });
        report.per_layer.insert(5, FlipCounts { eligible: 4, flips: 2 });
        report.per_layer.insert(3, FlipCounts { eligible: 4, flips: 1 });
        assert_eq!(report.top1(), Some((2, 0.5)));
    }

    #[test]
    fn vector_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ttv");
        let vector = SteeringVector::new(3, vec![0.5, -1.25, 2.0], provenance());
        write_vector_binary(&path, "synthetic", &vector).unwrap();
        let (model_id, loaded) = read_vector_binary(&path).unwrap();
        assert_eq!(model_id, "synthetic");
        assert_eq!(loaded.layer, 3);
        for (a, b) in loaded.vector.iter().zip(&vector.vector) {
            assert!((a - b).abs() < 1e-6);
        }
        let text_path = dir.path().join("v.txt");
        write_vector_text(&text_path, "synthetic", &vector).unwrap();
        let body = std::fs::read_to_string(&text_path).unwrap();
        assert!(body.lines().filter(|l| !l.starts_with('#')).count() == 3);
    }
}
