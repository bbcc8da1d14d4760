//! A deterministic backend over fully known causal worlds.
//!
//! Each world scripts a chain of thought from role-tagged steps:
//!
//! - **Operand** steps carry one value that feeds the answer rule.
//! - **Alternate** steps restate the whole derivation (operand values plus
//!   result) and act as a self-contained alternative route to the answer.
//! - **Decorative** and **SelfVerify** steps restate or narrate without
//!   being engaged by default; steering can engage them.
//!
//! The model's computation is explicit. A step is *engaged* iff the gate
//! inner product of its last-token hidden state with the gate direction
//! `w` exceeds the threshold. Engaged statement-style steps (alternates,
//! or decorative/self-verify steps forced on by steering) must be
//! internally coherent to be trusted: a multi-slot statement is checked
//! against the answer rule over its own restated values, so independent
//! offsets on its slots always break it. The final answer is the latest
//! coherent engaged statement, falling back to the answer rule over the
//! engaged operand values as presented.
//!
//! With the place-value rule, distinct offset assignments can never
//! collide back onto the original answer, which makes every regime
//! separation exact rather than approximate.
//!
//! Hidden states are `base + engaged * margin * w` at the gate layer,
//! with seeded bases constructed exactly orthogonal to `w`; difference in
//! means over engaged vs. disengaged steps therefore recovers `margin * w`
//! up to base noise that stays orthogonal to `w`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{
    AttentionMap, Backend, Capabilities, HiddenState, Hook, SessionInfo, validate_hook,
    EARLY_EXIT_CUE,
};
use crate::error::{Error, Result};
use crate::perturb::{enumerate_context_perturbations, enumerate_perturbations, ENUMERATION_CAP};
use crate::seeding::derive_seed;
use crate::trace::{scan_numeric_spans, Answer, ChainOfThought, Problem, Step};

/// Role of a scripted step inside a synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepRole {
    Operand,
    Alternate,
    Decorative,
    SelfVerify,
}

/// One scripted step: a role, a template with `{}` numeric slots, and its
/// default engagement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub role: StepRole,
    /// Template text; each `{}` receives one value at build time. Literal
    /// digits outside slots are not allowed.
    pub template: String,
    /// Default engagement (decorative and self-verify steps must be false).
    pub engaged: bool,
    /// Forces an operand's value instead of drawing it from the seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_value: Option<i64>,
}

/// How engaged operand values combine into the final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerRule {
    /// Sum of `value * 10^rank` over operand ranks. Offset assignments can
    /// never cancel, so perturbed routes never collide with the answer.
    PlaceValue,
    Sum,
    Product,
}

impl AnswerRule {
    fn combine(self, values: &[(usize, i64)]) -> i64 {
        match self {
            AnswerRule::PlaceValue => values
                .iter()
                .map(|(rank, v)| v * 10i64.pow(*rank as u32))
                .sum(),
            AnswerRule::Sum => values.iter().map(|(_, v)| v).sum(),
            AnswerRule::Product => values.iter().map(|(_, v)| v).product(),
        }
    }
}

/// Full specification of a synthetic world: scripted steps, the answer
/// rule, and the latent geometry of the engagement gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub steps: Vec<StepSpec>,
    pub answer_rule: AnswerRule,
    pub latent_dim: usize,
    pub num_layers: usize,
    /// 1-based layer hosting the engagement gate.
    pub gate_layer: usize,
    /// Unit vector; engagement means the hidden state's projection on it
    /// exceeds `gate_threshold`.
    pub gate_direction: Vec<f64>,
    pub gate_threshold: f64,
    /// Gate component carried by engaged steps; must exceed the threshold.
    pub margin: f64,
    /// Residual confidence mass assigned off the computed answer.
    pub epsilon: f64,
    /// Scale of the seeded base embeddings (orthogonal to the direction).
    pub base_scale: f64,
    /// Sharpness of the engagement-to-attention coupling.
    pub attention_sharpness: f64,
}

/// Latent geometry shared by a batch of worlds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub latent_dim: usize,
    pub num_layers: usize,
    pub gate_layer: usize,
    pub gate_threshold: f64,
    pub margin: f64,
    pub epsilon: f64,
    pub base_scale: f64,
    pub attention_sharpness: f64,
    pub direction_seed: u64,
}

impl GeometryConfig {
    /// The default instrument geometry: 64 dims, 6 layers, gate at 3.
    pub fn standard(epsilon: f64) -> Self {
        GeometryConfig {
            latent_dim: 64,
            num_layers: 6,
            gate_layer: 3,
            gate_threshold: 1.0,
            margin: 2.0,
            epsilon,
            base_scale: 0.25,
            attention_sharpness: 1.5,
            direction_seed: 7,
        }
    }
}

/// A seeded random unit vector.
pub fn unit_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

impl SyntheticSpec {
    /// Assemble a spec from shared geometry plus scripted steps.
    pub fn from_geometry(geometry: &GeometryConfig, answer_rule: AnswerRule, steps: Vec<StepSpec>) -> Self {
        SyntheticSpec {
            steps,
            answer_rule,
            latent_dim: geometry.latent_dim,
            num_layers: geometry.num_layers,
            gate_layer: geometry.gate_layer,
            gate_direction: unit_direction(geometry.latent_dim, geometry.direction_seed),
            gate_threshold: geometry.gate_threshold,
            margin: geometry.margin,
            epsilon: geometry.epsilon,
            base_scale: geometry.base_scale,
            attention_sharpness: geometry.attention_sharpness,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_layers == 0 {
            return Err(Error::WorldSpec("latent_dim and num_layers must be >= 1".into()));
        }
        if self.gate_layer < 1 || self.gate_layer > self.num_layers {
            return Err(Error::WorldSpec(format!(
                "gate layer {} out of range 1..={}",
                self.gate_layer, self.num_layers
            )));
        }
        if self.gate_direction.len() != self.latent_dim {
            return Err(Error::WorldSpec("gate direction length != latent_dim".into()));
        }
        let norm = self.gate_direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::WorldSpec(format!("gate direction norm {norm} != 1")));
        }
        if !(self.gate_threshold > 0.0 && self.margin > self.gate_threshold) {
            return Err(Error::WorldSpec(
                "need 0 < gate_threshold < margin for a crossable gate".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::WorldSpec(format!("epsilon {} out of [0, 0.5)", self.epsilon)));
        }
        let engaged_ops = self
            .steps
            .iter()
            .filter(|s| s.role == StepRole::Operand && s.engaged)
            .count();
        if engaged_ops == 0 {
            return Err(Error::WorldSpec(
                "need at least one default-engaged operand step".into(),
            ));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let slots = step.template.matches("{}").count();
            if step.template.chars().any(|c| c.is_ascii_digit()) {
                return Err(Error::WorldSpec(format!(
                    "step {i}: literal digits in template are not allowed"
                )));
            }
            match step.role {
                StepRole::Operand => {
                    if slots != 1 {
                        return Err(Error::WorldSpec(format!(
                            "step {i}: operand template needs exactly one slot, has {slots}"
                        )));
                    }
                }
                StepRole::Alternate => {
                    if slots != engaged_ops + 1 {
                        return Err(Error::WorldSpec(format!(
                            "step {i}: alternate template needs {} slots (operand values + result), has {slots}",
                            engaged_ops + 1
                        )));
                    }
                }
                StepRole::Decorative | StepRole::SelfVerify => {
                    if slots > 1 {
                        return Err(Error::WorldSpec(format!(
                            "step {i}: decorative templates take at most one slot, has {slots}"
                        )));
                    }
                    if step.engaged {
                        return Err(Error::WorldSpec(format!(
                            "step {i}: decorative and self-verify steps must default to disengaged"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A built world: rendered problem, scripted chain of thought, and the
/// ground truth needed to predict every intervention outcome analytically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub spec: SyntheticSpec,
    pub seed: u64,
    pub problem: Problem,
    pub cot: ChainOfThought,
    /// Role labels aligned with `cot.steps`.
    pub roles: Vec<StepRole>,
    /// Slot values rendered into each step.
    pub slot_values: Vec<Vec<i64>>,
    /// Ranks (among operand steps) of the default-engaged operands, the
    /// ones statement identities are checked against.
    pub engaged_operand_ranks: Vec<usize>,
    /// Rank among operand steps, per step (operands only).
    pub operand_rank: Vec<Option<usize>>,
    /// The scripted answer under default engagement.
    pub answer: i64,
}

/// Instantiate a world: draw slot values from the seed, render templates,
/// and compute the scripted answer under default engagement.
pub fn build_world(spec: &SyntheticSpec, seed: u64) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&["world-values", &seed.to_string()]));
    let draw_digit = |rng: &mut ChaCha8Rng| -> i64 {
        use rand::Rng;
        rng.gen_range(1..=9)
    };

    // First pass: operand values and ranks.
    let mut operand_rank = vec![None; spec.steps.len()];
    let mut operand_values_by_index: BTreeMap<usize, i64> = BTreeMap::new();
    let mut rank = 0usize;
    let mut operand_values: Vec<(usize, i64)> = Vec::new();
    let mut engaged_operand_ranks = Vec::new();
    for (i, step) in spec.steps.iter().enumerate() {
        if step.role == StepRole::Operand {
            let value = step.fixed_value.unwrap_or_else(|| draw_digit(&mut rng));
            operand_rank[i] = Some(rank);
            if step.engaged {
                operand_values.push((rank, value));
                engaged_operand_ranks.push(rank);
            }
            operand_values_by_index.insert(i, value);
            rank += 1;
        }
    }

    let answer = spec.answer_rule.combine(&operand_values);

    // Second pass: render each step.
    let mut slot_values: Vec<Vec<i64>> = Vec::with_capacity(spec.steps.len());
    let mut texts: Vec<String> = Vec::with_capacity(spec.steps.len());
    for (i, step) in spec.steps.iter().enumerate() {
        let slots = step.template.matches("{}").count();
        let values: Vec<i64> = match step.role {
            StepRole::Operand => vec![operand_values_by_index[&i]],
            StepRole::Alternate => {
                let mut v: Vec<i64> = engaged_operand_ranks
                    .iter()
                    .map(|r| operand_values.iter().find(|(rank, _)| rank == r).unwrap().1)
                    .collect();
                v.push(answer);
                v
            }
            StepRole::Decorative | StepRole::SelfVerify => {
                if slots == 1 {
                    vec![answer]
                } else {
                    Vec::new()
                }
            }
        };
        texts.push(render_template(&step.template, &values));
        slot_values.push(values);
    }

    let question = format!(
        "Problem {seed}: combine the given values as stated; weigh the k-th value by the k-th power of ten."
    );
    let problem = Problem {
        id: format!("w{seed}"),
        question,
        gold_answer: answer.to_string(),
    };

    let raw_text = texts.join(" ");
    let mut steps: Vec<Step> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Step::from_text(i, t.clone()))
        .collect();
    // Token ranges under the synthetic whitespace tokenizer, full prompt.
    let layout = TokenLayout::new(&problem.question, &texts);
    for (step, range) in steps.iter_mut().zip(&layout.step_ranges) {
        step.token_range = Some(*range);
    }

    // Rendered spans must line up with the slots we wrote.
    for (i, step) in steps.iter().enumerate() {
        if step.numeric_spans.len() != slot_values[i].len() {
            return Err(Error::WorldSpec(format!(
                "step {i}: rendered text exposes {} literals but {} slots were written",
                step.numeric_spans.len(),
                slot_values[i].len()
            )));
        }
    }

    let cot = ChainOfThought {
        problem_id: problem.id.clone(),
        steps,
        raw_text,
        final_answer: Answer {
            raw: answer.to_string(),
            canonical: Some(answer.to_string()),
        },
    };

    Ok(World {
        spec: spec.clone(),
        seed,
        problem,
        cot,
        roles: spec.steps.iter().map(|s| s.role).collect(),
        slot_values,
        engaged_operand_ranks,
        operand_rank,
        answer,
    })
}

fn render_template(template: &str, values: &[i64]) -> String {
    let mut out = String::with_capacity(template.len() + values.len() * 3);
    let mut rest = template;
    let mut idx = 0;
    while let Some(pos) = rest.find("{}") {
        out.push_str(&rest[..pos]);
        out.push_str(&values[idx].to_string());
        idx += 1;
        rest = &rest[pos + 2..];
    }
    out.push_str(rest);
    out
}

// ---------------------------------------------------------------------------
// Token layout
// ---------------------------------------------------------------------------

/// Whitespace tokenization of a synthetic prompt: question words, then
/// each presented step's words, then one cue token.
struct TokenLayout {
    step_ranges: Vec<(usize, usize)>,
    total: usize,
}

impl TokenLayout {
    fn new(question: &str, steps: &[String]) -> Self {
        let question_len = question.split_whitespace().count();
        let mut cursor = question_len;
        let mut step_ranges = Vec::with_capacity(steps.len());
        for step in steps {
            let len = step.split_whitespace().count();
            step_ranges.push((cursor, cursor + len));
            cursor += len;
        }
        TokenLayout {
            step_ranges,
            total: cursor + 1,
        }
    }

    /// Index of the step owning a token position, if any.
    fn step_of(&self, pos: usize) -> Option<usize> {
        self.step_ranges
            .iter()
            .position(|&(s, e)| pos >= s && pos < e)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// World evaluation (the model definition)
// ---------------------------------------------------------------------------

impl World {
    pub fn gate_direction(&self) -> &[f64] {
        &self.spec.gate_direction
    }

    /// Seeded base embedding at (layer, token position), exactly
    /// orthogonal to the gate direction.
    fn base_embedding(&self, layer: usize, pos: usize) -> Vec<f64> {
        let seed = derive_seed(&[
            "base",
            &self.seed.to_string(),
            &layer.to_string(),
            &pos.to_string(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..self.spec.latent_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * self.spec.base_scale
            })
            .collect();
        let w = &self.spec.gate_direction;
        let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
        for (vi, wi) in v.iter_mut().zip(w) {
            *vi -= dot * wi;
        }
        v
    }

    /// Raw hidden state before hooks: base plus the gate component for the
    /// last token of default-engaged steps at the gate layer.
    fn raw_hidden(&self, layout: &TokenLayout, layer: usize, pos: usize) -> Vec<f64> {
        let mut h = self.base_embedding(layer, pos);
        if layer == self.spec.gate_layer {
            if let Some(step_idx) = layout.step_of(pos) {
                let (start, end) = layout.step_ranges[step_idx];
                debug_assert!(start < end);
                if pos + 1 == end && self.spec.steps[step_idx].engaged {
                    for (hi, wi) in h.iter_mut().zip(&self.spec.gate_direction) {
                        *hi += self.spec.margin * wi;
                    }
                }
            }
        }
        h
    }

    /// Hidden state with active steering hooks applied.
    fn hidden_with_hooks(&self, layout: &TokenLayout, layer: usize, pos: usize, hooks: &[Hook]) -> Vec<f64> {
        let mut h = self.raw_hidden(layout, layer, pos);
        for hook in hooks {
            if let Hook::Steering(s) = hook {
                if s.layer == layer && pos >= s.token_range.0 && pos < s.token_range.1 {
                    let sign = f64::from(s.sign);
                    for (hi, vi) in h.iter_mut().zip(&s.vector) {
                        *hi += sign * vi;
                    }
                }
            }
        }
        h
    }

    /// Gate projection of a presented step's last token at a layer.
    fn gate_dot(&self, layout: &TokenLayout, step_idx: usize, layer: usize, hooks: &[Hook]) -> f64 {
        let (start, end) = layout.step_ranges[step_idx];
        if start == end {
            return f64::NEG_INFINITY;
        }
        let h = self.hidden_with_hooks(layout, layer, end - 1, hooks);
        h.iter()
            .zip(&self.spec.gate_direction)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// True when an attention-scale hook with scale 0 masks any token of
    /// the step at any layer, hiding it from the computation.
    fn masked(&self, layout: &TokenLayout, step_idx: usize, hooks: &[Hook]) -> bool {
        let (start, end) = layout.step_ranges[step_idx];
        hooks.iter().any(|h| match h {
            Hook::AttentionScale(a) => {
                a.scale == 0.0 && a.token_range.0 < end && start < a.token_range.1
            }
            Hook::Steering(_) => false,
        })
    }

    /// The model's computed answer over presented step texts (a prefix of
    /// the scripted chain, possibly perturbed; empty strings mark dropped
    /// steps) under the active hooks.
    pub fn computed_answer(&self, question: &str, steps: &[String], hooks: &[Hook]) -> Option<i64> {
        debug_assert_eq!(question, self.problem.question);
        let layout = TokenLayout::new(question, steps);
        let mut statement: Option<i64> = None;
        let mut operands: Vec<(usize, i64)> = Vec::new();

        for (i, text) in steps.iter().enumerate() {
            if i >= self.roles.len() || text.is_empty() {
                continue;
            }
            if self.masked(&layout, i, hooks) {
                continue;
            }
            let engaged =
                self.gate_dot(&layout, i, self.spec.gate_layer, hooks) > self.spec.gate_threshold;
            if !engaged {
                continue;
            }
            let values: Vec<i64> = scan_numeric_spans(text)
                .iter()
                .map(|span| {
                    let negative = text[..span.start].trim_end().ends_with('-');
                    let v = span.value as i64;
                    if negative {
                        -v
                    } else {
                        v
                    }
                })
                .collect();
            match self.roles[i] {
                StepRole::Operand => {
                    if let (Some(rank), Some(v)) = (self.operand_rank[i], values.first()) {
                        operands.push((rank, *v));
                    }
                }
                StepRole::Alternate => {
                    // Trusted only when the restated derivation checks out.
                    if values.len() == self.engaged_operand_ranks.len() + 1 {
                        let restated: Vec<(usize, i64)> = self
                            .engaged_operand_ranks
                            .iter()
                            .zip(&values)
                            .map(|(rank, v)| (*rank, *v))
                            .collect();
                        let implied = self.spec.answer_rule.combine(&restated);
                        if implied == *values.last().unwrap() {
                            statement = Some(implied);
                        }
                    }
                }
                StepRole::Decorative | StepRole::SelfVerify => {
                    // Single-value statements carry no checkable identity.
                    if let Some(v) = values.last() {
                        statement = Some(*v);
                    }
                }
            }
        }

        if let Some(v) = statement {
            Some(v)
        } else if operands.is_empty() {
            None
        } else {
            Some(self.spec.answer_rule.combine(&operands))
        }
    }

    /// Confidence assigned to `target`: `1 - epsilon` when the computed
    /// answer matches its canonical form, else 0 (the epsilon mass is
    /// spread over the unbounded tail of other answers).
    pub fn confidence_of(&self, question: &str, steps: &[String], target: &Answer, hooks: &[Hook]) -> Result<f64> {
        let canonical = target
            .canonical
            .as_deref()
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Contract("empty confidence target".into()))?;
        Ok(match self.computed_answer(question, steps, hooks) {
            Some(v) if v.to_string() == canonical => 1.0 - self.spec.epsilon,
            _ => 0.0,
        })
    }
}

// ---------------------------------------------------------------------------
// Backend implementation
// ---------------------------------------------------------------------------

/// A session over a batch of synthetic worlds sharing one latent geometry.
pub struct SyntheticBackend {
    info: SessionInfo,
    worlds: BTreeMap<String, World>,
    hooks: Vec<Hook>,
    /// Prompt-length limit, in tokens, for the truncation error path.
    pub max_tokens: usize,
}

impl SyntheticBackend {
    pub fn new(worlds: Vec<World>) -> Result<Self> {
        let first = worlds
            .first()
            .ok_or_else(|| Error::WorldSpec("need at least one world".into()))?;
        let (dim, layers, gate, dir) = (
            first.spec.latent_dim,
            first.spec.num_layers,
            first.spec.gate_layer,
            first.spec.gate_direction.clone(),
        );
        let mut map = BTreeMap::new();
        for world in worlds {
            if world.spec.latent_dim != dim
                || world.spec.num_layers != layers
                || world.spec.gate_layer != gate
                || world.spec.gate_direction != dir
            {
                return Err(Error::WorldSpec(
                    "all worlds in one session must share latent geometry".into(),
                ));
            }
            if map.insert(world.problem.question.clone(), world).is_some() {
                return Err(Error::WorldSpec("duplicate world question".into()));
            }
        }
        Ok(SyntheticBackend {
            info: SessionInfo {
                model_id: "synthetic".into(),
                num_layers: layers,
                hidden_dim: dim,
                capabilities: Capabilities::ALL,
            },
            worlds: map,
            hooks: Vec::new(),
            max_tokens: 100_000,
        })
    }

    pub fn world(&self, question: &str) -> Result<&World> {
        self.worlds
            .get(question)
            .ok_or_else(|| Error::Contract(format!("unknown synthetic question: {question:?}")))
    }

    pub fn worlds(&self) -> impl Iterator<Item = &World> {
        self.worlds.values()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < 1 || layer > self.info.num_layers {
            return Err(Error::Contract(format!(
                "layer {layer} out of range 1..={}",
                self.info.num_layers
            )));
        }
        Ok(())
    }
}

impl Backend for SyntheticBackend {
    fn info(&self) -> &SessionInfo {
        &self.info
    }

    fn generate_cot(&mut self, question: &str) -> Result<(String, Answer)> {
        let world = self.world(question)?;
        let layout = TokenLayout::new(question, &world.cot.step_texts());
        if layout.total > self.max_tokens {
            return Err(Error::Truncated(format!(
                "prompt needs {} tokens, limit is {}",
                layout.total, self.max_tokens
            )));
        }
        Ok((world.cot.raw_text.clone(), world.cot.final_answer.clone()))
    }

    fn early_exit_confidence(&mut self, question: &str, steps: &[String], target: &Answer) -> Result<f64> {
        let world = self.world(question)?;
        world.confidence_of(question, steps, target, &self.hooks)
    }

    fn early_exit_answer(&mut self, question: &str, steps: &[String]) -> Result<Answer> {
        let world = self.world(question)?;
        Ok(match world.computed_answer(question, steps, &self.hooks) {
            Some(v) => Answer {
                raw: format!("{EARLY_EXIT_CUE} {v}"),
                canonical: Some(v.to_string()),
            },
            None => Answer::unparsable(format!("{EARLY_EXIT_CUE} unknown")),
        })
    }

    fn capture_hidden(
        &mut self,
        question: &str,
        steps: &[String],
        layer: usize,
        positions: &[usize],
    ) -> Result<Vec<HiddenState>> {
        self.check_layer(layer)?;
        let world = self.world(question)?;
        let layout = TokenLayout::new(question, steps);
        positions
            .iter()
            .map(|&pos| {
                if pos >= layout.total {
                    return Err(Error::Contract(format!(
                        "token position {pos} outside prompt of {} tokens",
                        layout.total
                    )));
                }
                Ok(HiddenState {
                    layer,
                    token_index: pos,
                    vector: world.hidden_with_hooks(&layout, layer, pos, &self.hooks),
                })
            })
            .collect()
    }

    fn capture_attention(&mut self, question: &str, steps: &[String], layer: usize) -> Result<AttentionMap> {
        self.check_layer(layer)?;
        let world = self.world(question)?;
        let layout = TokenLayout::new(question, steps);

        // Per-token pre-normalization weight: engagement-coupled for step
        // tokens, neutral for question and cue tokens, times any
        // attention-scale hooks at this layer.
        let mut weights = vec![0.5f64; layout.total];
        for (i, &(start, end)) in layout.step_ranges.iter().enumerate() {
            if start == end {
                continue;
            }
            let dot = world.gate_dot(&layout, i, layer, &self.hooks);
            let wt = sigmoid(world.spec.attention_sharpness * (dot - world.spec.gate_threshold));
            for w in weights.iter_mut().take(end).skip(start) {
                *w = wt;
            }
        }
        for hook in &self.hooks {
            if let Hook::AttentionScale(a) = hook {
                if a.layer == layer {
                    for w in weights
                        .iter_mut()
                        .take(a.token_range.1.min(layout.total))
                        .skip(a.token_range.0)
                    {
                        *w *= a.scale;
                    }
                }
            }
        }

        let matrix = (0..layout.total)
            .map(|q| {
                let row = &weights[..=q];
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    row.iter().map(|w| w / sum).collect()
                } else {
                    vec![1.0 / row.len() as f64; row.len()]
                }
            })
            .collect();
        Ok(AttentionMap { layer, matrix })
    }

    fn step_token_range(&mut self, question: &str, steps: &[String], step_index: usize) -> Result<(usize, usize)> {
        if step_index >= steps.len() {
            return Err(Error::Contract(format!(
                "step index {step_index} out of range for {} steps",
                steps.len()
            )));
        }
        let layout = TokenLayout::new(question, steps);
        Ok(layout.step_ranges[step_index])
    }

    fn push_hook(&mut self, hook: Hook) -> Result<()> {
        validate_hook(&self.info, &self.hooks, &hook)?;
        self.hooks.push(hook);
        Ok(())
    }

    fn pop_hook(&mut self) -> Result<()> {
        self.hooks
            .pop()
            .map(|_| ())
            .ok_or_else(|| Error::Contract("no active hook to remove".into()))
    }

    fn active_hooks(&self) -> &[Hook] {
        &self.hooks
    }
}

// ---------------------------------------------------------------------------
// Exhaustive oracle
// ---------------------------------------------------------------------------

/// The four exactly-computed confidence cells plus derived effects for one
/// step: expectations over the full perturbation enumeration under the
/// synthetic confidence rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleScores {
    pub s1_1: f64,
    pub s0_1: f64,
    pub s1_0: f64,
    pub s0_0: f64,
    pub ate_nec: f64,
    pub ate_suf: f64,
    pub tts: f64,
    pub dropstep: f64,
}

/// Exact scores for one step by exhaustive enumeration. Contexts and the
/// step enumerate independently; the doubly-perturbed cell enumerates
/// their cartesian product with context variants outermost, matching the
/// estimator's evaluation order so expectations agree bit for bit.
pub fn oracle_scores(world: &World, step_index: usize, cap: usize) -> Result<OracleScores> {
    let steps = &world.cot.steps;
    if step_index >= steps.len() {
        return Err(Error::Contract(format!(
            "step index {step_index} out of range for {} steps",
            steps.len()
        )));
    }
    let question = &world.problem.question;
    let target = world.cot.final_answer.clone();
    let context: Vec<Step> = steps[..step_index].to_vec();
    let intact_context: Vec<String> = context.iter().map(|s| s.text.clone()).collect();
    let step = &steps[step_index];

    let conf = |texts: &[String]| -> Result<f64> {
        world.confidence_of(question, texts, &target, &[])
    };
    let with_step = |ctx: &[String], step_text: &str| -> Vec<String> {
        let mut v = ctx.to_vec();
        v.push(step_text.to_string());
        v
    };

    // (x=1, c=1): no randomness.
    let s1_1 = conf(&with_step(&intact_context, &step.text))?;

    // (x=0, c=1): enumerate the step's offsets.
    let step_variants = enumerate_perturbations(step, cap)?;
    let mut sum = 0.0;
    for (text, _) in &step_variants {
        sum += conf(&with_step(&intact_context, text))?;
    }
    let s0_1 = sum / step_variants.len() as f64;

    // (x=1, c=0): enumerate the context's offsets.
    let context_variants = enumerate_context_perturbations(&context, cap)?;
    let mut sum = 0.0;
    for ctx in &context_variants {
        sum += conf(&with_step(ctx, &step.text))?;
    }
    let s1_0 = sum / context_variants.len() as f64;

    // (x=0, c=0): cartesian product, context outermost.
    let joint: usize = context_variants
        .len()
        .checked_mul(step_variants.len())
        .filter(|&n| n <= cap)
        .ok_or_else(|| {
            Error::Enumeration(format!(
                "{} x {} joint assignments exceed the cap of {cap}",
                context_variants.len(),
                step_variants.len()
            ))
        })?;
    let mut sum = 0.0;
    for ctx in &context_variants {
        for (text, _) in &step_variants {
            sum += conf(&with_step(ctx, text))?;
        }
    }
    let s0_0 = sum / joint as f64;

    // DropStep against the gold answer.
    let gold = world.problem.gold();
    let with_s = world.confidence_of(question, &with_step(&intact_context, &step.text), &gold, &[])?;
    let without_s = world.confidence_of(question, &intact_context, &gold, &[])?;

    let ate_nec = s1_1 - s0_1;
    let ate_suf = s1_0 - s0_0;
    Ok(OracleScores {
        s1_1,
        s0_1,
        s1_0,
        s0_0,
        ate_nec,
        ate_suf,
        tts: 0.5 * (ate_nec.abs() + ate_suf.abs()),
        dropstep: with_s - without_s,
    })
}

// ---------------------------------------------------------------------------
// Fixture worlds
// ---------------------------------------------------------------------------

/// Serializable batch of world specifications, the `synth-fixtures` file
/// format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureFile {
    pub worlds: Vec<FixtureEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub seed: u64,
    pub spec: SyntheticSpec,
}

impl FixtureFile {
    pub fn build(&self) -> Result<Vec<World>> {
        self.worlds.iter().map(|e| build_world(&e.spec, e.seed)).collect()
    }
}

fn op(template: &str) -> StepSpec {
    StepSpec {
        role: StepRole::Operand,
        template: template.into(),
        engaged: true,
        fixed_value: None,
    }
}

/// Pure two-operand conjunction with a numeric decorative restatement.
pub fn and_world(geometry: &GeometryConfig) -> SyntheticSpec {
    SyntheticSpec::from_geometry(
        geometry,
        AnswerRule::PlaceValue,
        vec![
            op("Start with the units value {}."),
            op("The tens value comes to {}."),
            StepSpec {
                role: StepRole::Decorative,
                template: "As a side remark, the board shows {} in the corner.".into(),
                engaged: false,
                fixed_value: None,
            },
        ],
    )
}

/// Two operands plus an alternate route restating the full derivation.
pub fn or_world(geometry: &GeometryConfig) -> SyntheticSpec {
    SyntheticSpec::from_geometry(
        geometry,
        AnswerRule::PlaceValue,
        vec![
            op("Start with the units value {}."),
            op("The tens value comes to {}."),
            StepSpec {
                role: StepRole::Alternate,
                template: "Independently: units {} with tens {} give {} in total.".into(),
                engaged: true,
                fixed_value: None,
            },
            StepSpec {
                role: StepRole::Decorative,
                template: "The margin note repeats {} for the record.".into(),
                engaged: false,
                fixed_value: None,
            },
        ],
    )
}

/// A single necessary-and-sufficient operand flanked by decoration.
pub fn critical_world(geometry: &GeometryConfig) -> SyntheticSpec {
    SyntheticSpec::from_geometry(
        geometry,
        AnswerRule::PlaceValue,
        vec![
            StepSpec {
                role: StepRole::Decorative,
                template: "We sketch the setup before computing anything.".into(),
                engaged: false,
                fixed_value: None,
            },
            op("The only value that matters is {}."),
            StepSpec {
                role: StepRole::SelfVerify,
                template: "Wait, let me double-check: the total should be {}.".into(),
                engaged: false,
                fixed_value: None,
            },
        ],
    )
}

/// Two operands followed by a decorative self-verification of the total.
pub fn self_verify_world(geometry: &GeometryConfig) -> SyntheticSpec {
    SyntheticSpec::from_geometry(
        geometry,
        AnswerRule::PlaceValue,
        vec![
            op("Start with the units value {}."),
            op("The tens value comes to {}."),
            StepSpec {
                role: StepRole::SelfVerify,
                template: "Wait, let me verify the result: it should come to {}.".into(),
                engaged: false,
                fixed_value: None,
            },
        ],
    )
}

/// Ends with a zero-weight operand: the prefix already carries the answer,
/// so the trailing operand is redundant yet engaged.
pub fn redundant_tail_world(geometry: &GeometryConfig) -> SyntheticSpec {
    SyntheticSpec::from_geometry(
        geometry,
        AnswerRule::PlaceValue,
        vec![
            op("Start with the units value {}."),
            op("The tens value comes to {}."),
            StepSpec {
                role: StepRole::Operand,
                template: "Finally add the remaining {} hundreds.".into(),
                engaged: true,
                fixed_value: Some(0),
            },
        ],
    )
}

/// The standard mixed batch: `count` worlds cycling through all regimes.
pub fn standard_fixture(geometry: &GeometryConfig, base_seed: u64, count: usize) -> FixtureFile {
    let specs = [
        and_world(geometry),
        or_world(geometry),
        critical_world(geometry),
        self_verify_world(geometry),
        redundant_tail_world(geometry),
    ];
    let worlds = (0..count)
        .map(|i| FixtureEntry {
            seed: base_seed + i as u64,
            spec: specs[i % specs.len()].clone(),
        })
        .collect();
    FixtureFile { worlds }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> GeometryConfig {
        GeometryConfig::standard(0.0)
    }

    fn build(spec: &SyntheticSpec, seed: u64) -> World {
        build_world(spec, seed).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = and_world(&geometry());
        let a = build(&spec, 3);
        let b = build(&spec, 3);
        assert_eq!(a.cot.raw_text, b.cot.raw_text);
        assert_eq!(a.answer, b.answer);
    }

    #[test]
    fn place_value_answer_matches_slots() {
        let spec = and_world(&geometry());
        let world = build(&spec, 1);
        let expected = world.slot_values[0][0] + 10 * world.slot_values[1][0];
        assert_eq!(world.answer, expected);
        assert_eq!(world.problem.gold_answer, expected.to_string());
    }

    #[test]
    fn sum_rule_combines_operands() {
        let mut spec = and_world(&geometry());
        spec.answer_rule = AnswerRule::Sum;
        let world = build(&spec, 2);
        assert_eq!(world.answer, world.slot_values[0][0] + world.slot_values[1][0]);
    }

    #[test]
    fn alternate_restates_derivation() {
        let spec = or_world(&geometry());
        let world = build(&spec, 4);
        let alt = &world.slot_values[2];
        assert_eq!(alt.len(), 3);
        assert_eq!(alt[0], world.slot_values[0][0]);
        assert_eq!(alt[1], world.slot_values[1][0]);
        assert_eq!(alt[2], world.answer);
    }

    #[test]
    fn full_intact_prefix_answers_scripted_value() {
        let spec = or_world(&geometry());
        let world = build(&spec, 5);
        let texts = world.cot.step_texts();
        assert_eq!(
            world.computed_answer(&world.problem.question, &texts, &[]),
            Some(world.answer)
        );
    }

    #[test]
    fn decorative_steps_never_enter_the_answer() {
        let spec = and_world(&geometry());
        let world = build(&spec, 6);
        let mut texts = world.cot.step_texts();
        // Corrupt the decorative step's number; the answer must not move.
        texts[2] = texts[2].replace(char::is_numeric, "9");
        assert_eq!(
            world.computed_answer(&world.problem.question, &texts, &[]),
            Some(world.answer)
        );
    }

    #[test]
    fn backend_confidence_is_certain_on_intact_cot() {
        let spec = and_world(&geometry());
        let world = build(&spec, 7);
        let mut backend = SyntheticBackend::new(vec![world.clone()]).unwrap();
        let texts = world.cot.step_texts();
        let p = backend
            .early_exit_confidence(&world.problem.question, &texts, &world.cot.final_answer)
            .unwrap();
        assert_eq!(p, 1.0);
        let other = Answer {
            raw: "0".into(),
            canonical: Some("0".into()),
        };
        let q = backend
            .early_exit_confidence(&world.problem.question, &texts, &other)
            .unwrap();
        assert!(q <= 1e-6);
    }

    #[test]
    fn empty_steps_fall_back_to_no_answer() {
        let spec = and_world(&geometry());
        let world = build(&spec, 8);
        let mut backend = SyntheticBackend::new(vec![world.clone()]).unwrap();
        let ans = backend.early_exit_answer(&world.problem.question, &[]).unwrap();
        assert!(ans.is_unparsable());
    }

    #[test]
    fn truncation_error_when_prompt_exceeds_limit() {
        let spec = and_world(&geometry());
        let world = build(&spec, 9);
        let mut backend = SyntheticBackend::new(vec![world.clone()]).unwrap();
        backend.max_tokens = 3;
        assert!(matches!(
            backend.generate_cot(&world.problem.question),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn attention_rows_normalize() {
        let spec = self_verify_world(&geometry());
        let world = build(&spec, 10);
        let mut backend = SyntheticBackend::new(vec![world.clone()]).unwrap();
        let map = backend
            .capture_attention(&world.problem.question, &world.cot.step_texts(), 3)
            .unwrap();
        for row in &map.matrix {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn engaged_steps_draw_more_attention_than_decorative() {
        let spec = self_verify_world(&geometry());
        let world = build(&spec, 11);
        let mut backend = SyntheticBackend::new(vec![world.clone()]).unwrap();
        let texts = world.cot.step_texts();
        let map = backend
            .capture_attention(&world.problem.question, &texts, world.spec.gate_layer)
            .unwrap();
        let op_range = world.cot.steps[0].token_range.unwrap();
        let sv_range = world.cot.steps[2].token_range.unwrap();
        let queries_from = sv_range.1;
        let per_token_op = map.mass_on_range(op_range, queries_from) / (op_range.1 - op_range.0) as f64;
        let per_token_sv = map.mass_on_range(sv_range, queries_from) / (sv_range.1 - sv_range.0) as f64;
        assert!(per_token_op > per_token_sv);
    }

    #[test]
    fn oracle_and_world_regimes() {
        let spec = and_world(&geometry());
        let world = build(&spec, 12);
        // Final operand: fully necessary, not sufficient (context broken).
        let scores = oracle_scores(&world, 1, ENUMERATION_CAP).unwrap();
        assert_eq!(scores.s1_1, 1.0);
        assert_eq!(scores.s0_1, 0.0);
        assert_eq!(scores.ate_nec, 1.0);
        assert_eq!(scores.ate_suf, 0.0);
        assert_eq!(scores.tts, 0.5);
        // Decorative step: no effect in any cell.
        let decorative = oracle_scores(&world, 2, ENUMERATION_CAP).unwrap();
        assert_eq!(decorative.tts, 0.0);
        assert_eq!(decorative.dropstep, 0.0);
    }

    #[test]
    fn oracle_alternate_is_sufficient_not_necessary() {
        let spec = or_world(&geometry());
        let world = build(&spec, 13);
        let scores = oracle_scores(&world, 2, ENUMERATION_CAP).unwrap();
        assert_eq!(scores.ate_nec, 0.0);
        assert_eq!(scores.ate_suf, 1.0);
        assert_eq!(scores.tts, 0.5);
        assert!(scores.dropstep.abs() <= 0.05);
    }

    #[test]
    fn oracle_critical_operand_is_necessary_and_sufficient() {
        let spec = critical_world(&geometry());
        let world = build(&spec, 14);
        let scores = oracle_scores(&world, 1, ENUMERATION_CAP).unwrap();
        assert_eq!(scores.tts, 1.0);
        assert_eq!(scores.ate_nec, 1.0);
        assert_eq!(scores.ate_suf, 1.0);
        assert_eq!(scores.dropstep, 1.0);
    }

    #[test]
    fn oracle_self_verify_is_decorative() {
        let spec = self_verify_world(&geometry());
        let world = build(&spec, 15);
        let scores = oracle_scores(&world, 2, ENUMERATION_CAP).unwrap();
        assert_eq!(scores.tts, 0.0);
        assert!(world.cot.steps[2].is_self_verification);
    }

    #[test]
    fn steering_gate_engages_self_verify_statement() {
        let spec = self_verify_world(&geometry());
        let world = build(&spec, 16);
        let mut backend = SyntheticBackend::new(vec![world.clone()]).unwrap();
        let question = world.problem.question.clone();

        // Perturb the context so the operand route is broken.
        let perturbed: Vec<String> = crate::perturb::perturb_context(&world.cot.steps[..2], 99)
            .into_iter()
            .map(|(t, _)| t)
            .collect();
        let mut texts = perturbed;
        texts.push(world.cot.steps[2].text.clone());

        let before = backend.early_exit_answer(&question, &texts).unwrap();
        assert_ne!(before.canonical.as_deref(), Some(world.problem.gold_answer.as_str()));

        // Engage the self-verification restatement via the gate direction.
        let range = backend.step_token_range(&question, &texts, 2).unwrap();
        let vector: Vec<f64> = world.gate_direction().iter().map(|w| w * world.spec.margin).collect();
        let hook = crate::backend::SteeringHook {
            layer: world.spec.gate_layer,
            vector,
            token_range: range,
            sign: 1,
        };
        let after = crate::backend::with_steering(&mut backend, hook, |b| {
            b.early_exit_answer(&question, &texts)
        })
        .unwrap();
        assert_eq!(after.canonical.as_deref(), Some(world.problem.gold_answer.as_str()));
    }

    #[test]
    fn zero_vector_hook_is_a_no_op() {
        let spec = and_world(&geometry());
        let world = build(&spec, 17);
        let mut backend = SyntheticBackend::new(vec![world.clone()]).unwrap();
        let question = world.problem.question.clone();
        let texts = world.cot.step_texts();
        let plain = backend.early_exit_answer(&question, &texts).unwrap();
        let range = backend.step_token_range(&question, &texts, 1).unwrap();
        let hook = crate::backend::SteeringHook {
            layer: world.spec.gate_layer,
            vector: vec![0.0; world.spec.latent_dim],
            token_range: range,
            sign: 1,
        };
        let hooked = crate::backend::with_steering(&mut backend, hook, |b| {
            b.early_exit_answer(&question, &texts)
        })
        .unwrap();
        assert_eq!(plain, hooked);
    }

    #[test]
    fn attention_mask_hides_a_step_from_computation() {
        let spec = redundant_tail_world(&geometry());
        let world = build(&spec, 18);
        let mut backend = SyntheticBackend::new(vec![world.clone()]).unwrap();
        let question = world.problem.question.clone();
        // Perturb the trailing zero-weight operand so it poisons the sum.
        let (bad_tail, _) = crate::perturb::perturb_step(&world.cot.steps[2], 5);
        let texts = vec![
            world.cot.steps[0].text.clone(),
            world.cot.steps[1].text.clone(),
            bad_tail,
        ];
        let poisoned = backend.early_exit_answer(&question, &texts).unwrap();
        assert_ne!(poisoned.canonical.as_deref(), Some(world.problem.gold_answer.as_str()));

        let range = backend.step_token_range(&question, &texts, 2).unwrap();
        let hook = crate::backend::AttentionScaleHook {
            layer: 1,
            token_range: range,
            scale: 0.0,
        };
        let masked = crate::backend::with_attention_scale(&mut backend, hook, |b| {
            b.early_exit_answer(&question, &texts)
        })
        .unwrap();
        assert_eq!(masked.canonical.as_deref(), Some(world.problem.gold_answer.as_str()));
    }

    #[test]
    fn capture_hidden_is_deterministic_and_orthogonal_base() {
        let spec = and_world(&geometry());
        let world = build(&spec, 19);
        let mut backend = SyntheticBackend::new(vec![world.clone()]).unwrap();
        let question = world.problem.question.clone();
        let texts = world.cot.step_texts();
        let pos = world.cot.steps[2].token_range.unwrap().1 - 1;
        let a = backend.capture_hidden(&question, &texts, 2, &[pos]).unwrap();
        let b = backend.capture_hidden(&question, &texts, 2, &[pos]).unwrap();
        assert_eq!(a, b);
        // Decorative last token at a non-gate layer: pure base, orthogonal to w.
        let dot: f64 = a[0]
            .vector
            .iter()
            .zip(world.gate_direction())
            .map(|(x, y)| x * y)
            .sum();
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn spec_validation_catches_errors() {
        let geom = geometry();
        let mut spec = and_world(&geom);
        spec.steps[2].engaged = true;
        assert!(spec.validate().is_err());

        let mut spec = and_world(&geom);
        spec.steps[0].template = "value {} out of 10".into();
        assert!(spec.validate().is_err());

        let mut spec = and_world(&geom);
        spec.gate_direction = vec![2.0; spec.latent_dim];
        assert!(spec.validate().is_err());
    }
}
