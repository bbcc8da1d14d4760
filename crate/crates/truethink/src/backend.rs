//! The model-access contract every scoring and steering operation runs
//! through.
//!
//! A [`Backend`] wraps one model session. All operations are deterministic
//! functions of (model weights, prompt, active hooks): generation is
//! greedy, confidence is teacher-forced, and hooks are installed and
//! removed in stack order via [`with_steering`] / [`with_attention_scale`].
//!
//! Step lists are passed as plain texts; an **empty string marks a dropped
//! step** so positional alignment with the original chain is preserved.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::Answer;

/// The standardized early-exit cue appended after a partial trace to
/// elicit the model's current answer.
pub const EARLY_EXIT_CUE: &str = "The final result is";

/// What a backend claims to support. Operations check the matching flag
/// and return a contract error when it is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub confidence: bool,
    pub hidden_capture: bool,
    pub steering: bool,
    pub attention_scale: bool,
    pub attention_capture: bool,
}

impl Capabilities {
    pub const ALL: Capabilities = Capabilities {
        confidence: true,
        hidden_capture: true,
        steering: true,
        attention_scale: true,
        attention_capture: true,
    };
}

/// Static description of one model session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub model_id: String,
    /// Number of transformer layers L; layers are indexed 1..=L.
    pub num_layers: usize,
    /// Residual stream width d.
    pub hidden_dim: usize,
    pub capabilities: Capabilities,
}

/// A residual-stream vector at one (layer, token) position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub layer: usize,
    pub token_index: usize,
    pub vector: Vec<f64>,
}

/// Activation-addition hook: adds `sign * vector` to the residual stream
/// at `layer` for every token in `token_range`, for prefill and for every
/// decode step attending over those positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringHook {
    pub layer: usize,
    pub vector: Vec<f64>,
    /// Half-open token range `[start, end)`.
    pub token_range: (usize, usize),
    /// +1 applies the vector, -1 applies its negation.
    pub sign: i8,
}

/// Attention-scaling hook: multiplies pre-normalization attention weights
/// toward key positions in `token_range` by `scale`, then renormalizes.
/// 0 suppresses the range, 1 is the identity, large values amplify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionScaleHook {
    pub layer: usize,
    pub token_range: (usize, usize),
    pub scale: f64,
}

/// Either kind of intervention hook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Hook {
    Steering(SteeringHook),
    AttentionScale(AttentionScaleHook),
}

impl Hook {
    pub fn layer(&self) -> usize {
        match self {
            Hook::Steering(h) => h.layer,
            Hook::AttentionScale(h) => h.layer,
        }
    }

    pub fn token_range(&self) -> (usize, usize) {
        match self {
            Hook::Steering(h) => h.token_range,
            Hook::AttentionScale(h) => h.token_range,
        }
    }
}

/// Head-averaged, row-normalized attention at one layer.
/// `matrix[q][k]` is the attention of query token `q` to key token `k`;
/// each row sums to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub matrix: Vec<Vec<f64>>,
}

impl AttentionMap {
    /// Attention mass on key tokens `[start, end)`, averaged over query
    /// rows `query_from..`. Returns 0 for an empty selection.
    pub fn mass_on_range(&self, key_range: (usize, usize), query_from: usize) -> f64 {
        let rows: Vec<&Vec<f64>> = self.matrix.iter().skip(query_from).collect();
        if rows.is_empty() {
            return 0.0;
        }
        let total: f64 = rows
            .iter()
            .map(|row| {
                row.iter()
                    .take(key_range.1.min(row.len()))
                    .skip(key_range.0)
                    .sum::<f64>()
            })
            .sum();
        total / rows.len() as f64
    }
}

/// One model session. Calls on a session are serialized by the caller;
/// every call must be treated as expensive and cacheable.
pub trait Backend {
    fn info(&self) -> &SessionInfo;

    /// Greedy-decode a full reasoning trace for `question` and parse its
    /// final answer. Errors with [`Error::Truncated`] when generation hits
    /// the length limit before an answer appears.
    fn generate_cot(&mut self, question: &str) -> Result<(String, Answer)>;

    /// Probability of `target`'s canonical token sequence under teacher
    /// forcing, after `question` + `steps` + the early-exit cue.
    fn early_exit_confidence(&mut self, question: &str, steps: &[String], target: &Answer)
        -> Result<f64>;

    /// Greedy decode after the early-exit cue, canonicalized. An
    /// undecodable answer comes back as an unparsable [`Answer`].
    fn early_exit_answer(&mut self, question: &str, steps: &[String]) -> Result<Answer>;

    /// Residual-stream vectors at `layer` for the given token positions of
    /// a single forward pass over `question` + `steps`.
    fn capture_hidden(
        &mut self,
        question: &str,
        steps: &[String],
        layer: usize,
        positions: &[usize],
    ) -> Result<Vec<HiddenState>>;

    /// Head-averaged, row-normalized attention at `layer` for one forward
    /// pass over `question` + `steps` + cue.
    fn capture_attention(&mut self, question: &str, steps: &[String], layer: usize)
        -> Result<AttentionMap>;

    /// Token range `[start, end)` occupied by `steps[step_index]` in this
    /// backend's tokenization of the prompt. Empty-string (dropped) steps
    /// occupy an empty range.
    fn step_token_range(
        &mut self,
        question: &str,
        steps: &[String],
        step_index: usize,
    ) -> Result<(usize, usize)>;

    /// Install a hook. Fails when the capability is missing, the layer is
    /// out of range, or an active hook already covers an overlapping range
    /// on the same layer.
    fn push_hook(&mut self, hook: Hook) -> Result<()>;

    /// Remove the most recently installed hook.
    fn pop_hook(&mut self) -> Result<()>;

    fn active_hooks(&self) -> &[Hook];
}

/// Validate a hook against a session; shared by backend implementations.
pub fn validate_hook(info: &SessionInfo, active: &[Hook], hook: &Hook) -> Result<()> {
    match hook {
        Hook::Steering(h) => {
            if !info.capabilities.steering {
                return Err(Error::Contract(format!(
                    "backend {} does not support steering",
                    info.model_id
                )));
            }
            if h.vector.len() != info.hidden_dim {
                return Err(Error::Contract(format!(
                    "steering vector has length {}, expected {}",
                    h.vector.len(),
                    info.hidden_dim
                )));
            }
            if h.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("steering vector has non-finite entries".into()));
            }
            if h.sign != 1 && h.sign != -1 {
                return Err(Error::Contract(format!("steering sign must be +1 or -1, got {}", h.sign)));
            }
        }
        Hook::AttentionScale(h) => {
            if !info.capabilities.attention_scale {
                return Err(Error::Contract(format!(
                    "backend {} does not support attention scaling",
                    info.model_id
                )));
            }
            if !(h.scale.is_finite() && h.scale >= 0.0) {
                return Err(Error::Contract(format!(
                    "attention scale must be finite and >= 0, got {}",
                    h.scale
                )));
            }
        }
    }
    let layer = hook.layer();
    if layer < 1 || layer > info.num_layers {
        return Err(Error::Contract(format!(
            "layer {layer} out of range 1..={}",
            info.num_layers
        )));
    }
    let (start, end) = hook.token_range();
    if start >= end {
        return Err(Error::Contract(format!(
            "hook token range {start}..{end} is empty"
        )));
    }
    for other in active {
        if other.layer() == layer {
            let (os, oe) = other.token_range();
            if start < oe && os < end {
                return Err(Error::Contract(format!(
                    "hook range {start}..{end} overlaps active hook {os}..{oe} on layer {layer}"
                )));
            }
        }
    }
    Ok(())
}

/// Run `inner` with a steering hook installed; the hook is removed
/// afterwards even when `inner` fails.
pub fn with_steering<B, R>(
    backend: &mut B,
    hook: SteeringHook,
    inner: impl FnOnce(&mut B) -> Result<R>,
) -> Result<R>
where
    B: Backend + ?Sized,
{
    backend.push_hook(Hook::Steering(hook))?;
    let out = inner(backend);
    backend.pop_hook()?;
    out
}

/// Run `inner` with an attention-scaling hook installed; removed afterwards.
pub fn with_attention_scale<B, R>(
    backend: &mut B,
    hook: AttentionScaleHook,
    inner: impl FnOnce(&mut B) -> Result<R>,
) -> Result<R>
where
    B: Backend + ?Sized,
{
    backend.push_hook(Hook::AttentionScale(hook))?;
    let out = inner(backend);
    backend.pop_hook()?;
    out
}
