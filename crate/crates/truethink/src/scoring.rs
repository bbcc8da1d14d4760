//! Estimation of the four confidence cells, the necessity and sufficiency
//! effects, the True-Thinking Score, and the DropStep baseline; plus
//! threshold selection and distribution statistics.
//!
//! For a step `s` with context `C` (all steps before it), the estimator
//! fills a 2x2 grid of confidences `S_x(c)` in the reference answer `y*`:
//! `x` toggles the intact step against a perturbed version, `c` toggles
//! the intact context against one with every numeric literal offset. Then
//!
//! ```text
//! ATE_nec(1) = S_1(1) - S_0(1)        necessity under intact context
//! ATE_suf(0) = S_1(0) - S_0(0)        sufficiency under perturbed context
//! TTS        = (|ATE_nec(1)| + |ATE_suf(0)|) / 2
//! ```
//!
//! In `enumerate` mode each random cell averages over the full offset
//! enumeration (contexts outermost in the doubly-perturbed cell); in
//! `monte_carlo` mode it averages over seeded draws with disjoint streams
//! per (run seed, problem, step, cell).

use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::perturb::{
    enumerate_context_perturbations, enumerate_perturbations, perturb_context, perturb_step,
    PerturbationPlan, ENUMERATION_CAP,
};
use crate::seeding::derive_seed;
use crate::trace::{Answer, ChainOfThought, Problem, Step};

/// Estimation mode for the confidence cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    Enumerate,
    MonteCarlo,
}

/// Score variant: the full two-context score or the necessity-only
/// ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    Full,
    NecOnly,
}

/// Configuration for scoring a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub mode: ScoreMode,
    /// Draws per random cell in Monte Carlo mode.
    pub num_samples: usize,
    pub seed: u64,
    pub variant: ScoreVariant,
    /// True-thinking selection threshold.
    pub alpha: f64,
    /// Decorative selection threshold.
    pub beta: f64,
    /// TTS below which a self-verification step counts as decorative.
    pub decorative_self_verify_cutoff: f64,
    /// Cap on exhaustive enumeration per cell.
    pub enumeration_cap: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            mode: ScoreMode::Enumerate,
            num_samples: 5,
            seed: 0,
            variant: ScoreVariant::Full,
            alpha: 0.9,
            beta: 0.0,
            decorative_self_verify_cutoff: 0.005,
            enumeration_cap: ENUMERATION_CAP,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.beta && self.beta < self.alpha && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= beta < alpha <= 1, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// The estimated score of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub problem_id: String,
    pub step_index: usize,
    pub s1_1: f64,
    pub s0_1: f64,
    pub s1_0: f64,
    pub s0_0: f64,
    pub ate_nec: f64,
    pub ate_suf: f64,
    pub tts: f64,
    pub dropstep: f64,
    /// Backend confidence evaluations spent on this step.
    pub n_evals: usize,
    pub is_self_verification: bool,
    /// Normalized position of the step within its chain, in [0, 1].
    pub position: f64,
    /// Plans consumed by the perturbed cells, for exact replay.
    pub plans: Vec<PerturbationPlan>,
}

/// Necessity effect under intact context.
pub fn ate_nec(s1_1: f64, s0_1: f64) -> f64 {
    s1_1 - s0_1
}

/// Sufficiency effect under perturbed context.
pub fn ate_suf(s1_0: f64, s0_0: f64) -> f64 {
    s1_0 - s0_0
}

/// The True-Thinking Score: half the sum of the absolute effects.
pub fn tts(s1_1: f64, s0_1: f64, s1_0: f64, s0_0: f64) -> f64 {
    0.5 * ((s1_1 - s0_1).abs() + (s1_0 - s0_0).abs())
}

/// One estimated confidence cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellEstimate {
    pub value: f64,
    pub n_evals: usize,
    pub plans: Vec<PerturbationPlan>,
}

fn mc_seed(config: &ScoreConfig, problem_id: &str, step_index: usize, cell: &str, draw: usize) -> u64 {
    derive_seed(&[
        "estimate",
        &config.seed.to_string(),
        problem_id,
        &step_index.to_string(),
        cell,
        &draw.to_string(),
    ])
}

/// Estimate one cell `S_x(c)` for a step.
///
/// `y_star` is the reference answer fixed once from the full chain; the
/// same target is used for all four cells.
pub fn estimate_s<B: Backend + ?Sized>(
    backend: &mut B,
    problem: &Problem,
    cot: &ChainOfThought,
    step_index: usize,
    x: u8,
    c: u8,
    y_star: &Answer,
    config: &ScoreConfig,
) -> Result<CellEstimate> {
    if !backend.info().capabilities.confidence {
        return Err(Error::Contract(format!(
            "backend {} lacks the confidence capability",
            backend.info().model_id
        )));
    }
    if step_index >= cot.steps.len() {
        return Err(Error::Contract(format!(
            "step index {step_index} out of range for {} steps",
            cot.steps.len()
        )));
    }
    let step = &cot.steps[step_index];
    let context: Vec<Step> = cot.steps[..step_index].to_vec();
    let intact_context: Vec<String> = context.iter().map(|s| s.text.clone()).collect();
    let question = &problem.question;

    let mut conf = |ctx: &[String], step_text: &str| -> Result<f64> {
        let mut texts = ctx.to_vec();
        texts.push(step_text.to_string());
        backend.early_exit_confidence(question, &texts, y_star)
    };

    match (x, c) {
        // Intact step, intact context: a single deterministic evaluation.
        (1, 1) => Ok(CellEstimate {
            value: conf(&intact_context, &step.text)?,
            n_evals: 1,
            plans: Vec::new(),
        }),
        (0, 1) => match config.mode {
            ScoreMode::Enumerate => {
                let variants = enumerate_perturbations(step, config.enumeration_cap)?;
                let mut sum = 0.0;
                for (text, _) in &variants {
                    sum += conf(&intact_context, text)?;
                }
                Ok(CellEstimate {
                    value: sum / variants.len() as f64,
                    n_evals: variants.len(),
                    plans: variants.into_iter().map(|(_, p)| p).collect(),
                })
            }
            ScoreMode::MonteCarlo => {
                let mut sum = 0.0;
                let mut plans = Vec::new();
                for draw in 0..config.num_samples {
                    let seed = mc_seed(config, &problem.id, step_index, "x0c1", draw);
                    let (text, plan) = perturb_step(step, seed);
                    sum += conf(&intact_context, &text)?;
                    plans.push(plan);
                }
                Ok(CellEstimate {
                    value: sum / config.num_samples as f64,
                    n_evals: config.num_samples,
                    plans,
                })
            }
        },
        (1, 0) => match config.mode {
            ScoreMode::Enumerate => {
                let variants = enumerate_context_perturbations(&context, config.enumeration_cap)?;
                let mut sum = 0.0;
                for ctx in &variants {
                    sum += conf(ctx, &step.text)?;
                }
                Ok(CellEstimate {
                    value: sum / variants.len() as f64,
                    n_evals: variants.len(),
                    plans: Vec::new(),
                })
            }
            ScoreMode::MonteCarlo => {
                let mut sum = 0.0;
                let mut plans = Vec::new();
                for draw in 0..config.num_samples {
                    let seed = mc_seed(config, &problem.id, step_index, "x1c0", draw);
                    let perturbed = perturb_context(&context, seed);
                    let texts: Vec<String> = perturbed.iter().map(|(t, _)| t.clone()).collect();
                    plans.extend(perturbed.into_iter().map(|(_, p)| p));
                    sum += conf(&texts, &step.text)?;
                }
                Ok(CellEstimate {
                    value: sum / config.num_samples as f64,
                    n_evals: config.num_samples,
                    plans,
                })
            }
        },
        (0, 0) => match config.mode {
            ScoreMode::Enumerate => {
                let ctx_variants = enumerate_context_perturbations(&context, config.enumeration_cap)?;
                let step_variants = enumerate_perturbations(step, config.enumeration_cap)?;
                let total = ctx_variants
                    .len()
                    .checked_mul(step_variants.len())
                    .filter(|&n| n <= config.enumeration_cap)
                    .ok_or_else(|| {
                        Error::Enumeration(format!(
                            "{} x {} joint assignments exceed the cap of {}; use monte_carlo mode",
                            ctx_variants.len(),
                            step_variants.len(),
                            config.enumeration_cap
                        ))
                    })?;
                let mut sum = 0.0;
                for ctx in &ctx_variants {
                    for (text, _) in &step_variants {
                        sum += conf(ctx, text)?;
                    }
                }
                Ok(CellEstimate {
                    value: sum / total as f64,
                    n_evals: total,
                    plans: step_variants.into_iter().map(|(_, p)| p).collect(),
                })
            }
            ScoreMode::MonteCarlo => {
                let mut sum = 0.0;
                let mut plans = Vec::new();
                for draw in 0..config.num_samples {
                    let ctx_seed = mc_seed(config, &problem.id, step_index, "x0c0-ctx", draw);
                    let step_seed = mc_seed(config, &problem.id, step_index, "x0c0-step", draw);
                    let perturbed = perturb_context(&context, ctx_seed);
                    let texts: Vec<String> = perturbed.iter().map(|(t, _)| t.clone()).collect();
                    let (step_text, plan) = perturb_step(step, step_seed);
                    plans.push(plan);
                    sum += conf(&texts, &step_text)?;
                }
                Ok(CellEstimate {
                    value: sum / config.num_samples as f64,
                    n_evals: config.num_samples,
                    plans,
                })
            }
        },
        _ => Err(Error::Contract(format!("cell indicators must be 0 or 1, got x={x} c={c}"))),
    }
}

/// DropStep baseline: confidence gain in the gold answer from appending
/// the step to its context.
pub fn dropstep_score<B: Backend + ?Sized>(
    backend: &mut B,
    problem: &Problem,
    cot: &ChainOfThought,
    step_index: usize,
) -> Result<f64> {
    let gold = problem.gold();
    let context: Vec<String> = cot.steps[..step_index].iter().map(|s| s.text.clone()).collect();
    let mut with_step = context.clone();
    with_step.push(cot.steps[step_index].text.clone());
    let p_with = backend.early_exit_confidence(&problem.question, &with_step, &gold)?;
    let p_without = backend.early_exit_confidence(&problem.question, &context, &gold)?;
    Ok(p_with - p_without)
}

/// Score one step: all four cells, both effects, TTS, and DropStep.
pub fn score_step<B: Backend + ?Sized>(
    backend: &mut B,
    problem: &Problem,
    cot: &ChainOfThought,
    step_index: usize,
    y_star: &Answer,
    config: &ScoreConfig,
) -> Result<StepScore> {
    let cell_1_1 = estimate_s(backend, problem, cot, step_index, 1, 1, y_star, config)?;
    let cell_0_1 = estimate_s(backend, problem, cot, step_index, 0, 1, y_star, config)?;
    let (s1_0, s0_0, suf_evals, mut plans) = match config.variant {
        ScoreVariant::Full => {
            let cell_1_0 = estimate_s(backend, problem, cot, step_index, 1, 0, y_star, config)?;
            let cell_0_0 = estimate_s(backend, problem, cot, step_index, 0, 0, y_star, config)?;
            (
                cell_1_0.value,
                cell_0_0.value,
                cell_1_0.n_evals + cell_0_0.n_evals,
                cell_0_0.plans,
            )
        }
        // The necessity-only ablation never perturbs the context; both
        // sufficiency cells collapse to zero effect.
        ScoreVariant::NecOnly => (0.0, 0.0, 0, Vec::new()),
    };
    let mut all_plans = cell_0_1.plans.clone();
    all_plans.append(&mut plans);

    let nec = ate_nec(cell_1_1.value, cell_0_1.value);
    let suf = ate_suf(s1_0, s0_0);
    let tts_value = match config.variant {
        ScoreVariant::Full => tts(cell_1_1.value, cell_0_1.value, s1_0, s0_0),
        ScoreVariant::NecOnly => nec.abs(),
    };

    let step = &cot.steps[step_index];
    let n_steps = cot.steps.len().max(1);
    Ok(StepScore {
        problem_id: problem.id.clone(),
        step_index,
        s1_1: cell_1_1.value,
        s0_1: cell_0_1.value,
        s1_0,
        s0_0,
        ate_nec: nec,
        ate_suf: suf,
        tts: tts_value,
        dropstep: dropstep_score(backend, problem, cot, step_index)?,
        n_evals: cell_1_1.n_evals + cell_0_1.n_evals + suf_evals + 2,
        is_self_verification: step.is_self_verification,
        position: step_index as f64 / (n_steps - 1).max(1) as f64,
        plans: all_plans,
    })
}

/// A scored problem: the chain plus one score per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredProblem {
    pub problem: Problem,
    pub cot: ChainOfThought,
    pub y_star: Answer,
    pub scores: Vec<StepScore>,
}

/// Score every step of a chain. The reference `y*` is fixed once from the
/// full intact chain and reused for all cells; when it is unparsable the
/// chain is skipped (returns `None`).
pub fn score_cot<B: Backend + ?Sized>(
    backend: &mut B,
    problem: &Problem,
    cot: &ChainOfThought,
    config: &ScoreConfig,
) -> Result<Option<ScoredProblem>> {
    config.validate()?;
    let y_star = backend.early_exit_answer(&problem.question, &cot.step_texts())?;
    if y_star.is_unparsable() {
        return Ok(None);
    }
    let mut scores = Vec::with_capacity(cot.steps.len());
    for index in 0..cot.steps.len() {
        scores.push(score_step(backend, problem, cot, index, &y_star, config)?);
    }
    Ok(Some(ScoredProblem {
        problem: problem.clone(),
        cot: cot.clone(),
        y_star,
        scores,
    }))
}

/// Split scores into true-thinking (`tts >= alpha`) and decorative
/// (`tts <= beta`) sets. Either side empty is an error naming the
/// threshold that failed.
pub fn select_threshold_sets<'a>(
    scores: &'a [StepScore],
    alpha: f64,
    beta: f64,
) -> Result<(Vec<&'a StepScore>, Vec<&'a StepScore>)> {
    if beta >= alpha {
        return Err(Error::Config(format!(
            "alpha must exceed beta, got alpha={alpha} beta={beta}"
        )));
    }
    let true_thinking: Vec<&StepScore> = scores.iter().filter(|s| s.tts >= alpha).collect();
    let decorative: Vec<&StepScore> = scores.iter().filter(|s| s.tts <= beta).collect();
    if true_thinking.is_empty() {
        return Err(Error::Selection(format!(
            "no step reaches the true-thinking threshold alpha={alpha}"
        )));
    }
    if decorative.is_empty() {
        return Err(Error::Selection(format!(
            "no step falls under the decorative threshold beta={beta}"
        )));
    }
    Ok((true_thinking, decorative))
}

/// Summary statistics over a batch of step scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub frac_ge_03: f64,
    pub frac_ge_07: f64,
    /// Mean TTS per normalized step-position decile.
    pub position_decile_mean: Vec<f64>,
}

/// Mean, median, tail fractions, and the positional profile of TTS.
pub fn distribution_stats(scores: &[StepScore]) -> Result<DistributionStats> {
    if scores.is_empty() {
        return Err(Error::Selection("no scores to summarize".into()));
    }
    let mut values: Vec<f64> = scores.iter().map(|s| s.tts).collect();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    let frac_ge = |t: f64| values.iter().filter(|&&v| v >= t).count() as f64 / n as f64;

    let mut decile_sum = [0.0f64; 10];
    let mut decile_count = [0usize; 10];
    for score in scores {
        let bucket = ((score.position * 10.0).floor() as usize).min(9);
        decile_sum[bucket] += score.tts;
        decile_count[bucket] += 1;
    }
    let position_decile_mean = decile_sum
        .iter()
        .zip(decile_count)
        .map(|(sum, count)| if count > 0 { sum / count as f64 } else { f64::NAN })
        .collect();

    Ok(DistributionStats {
        count: n,
        mean,
        median,
        frac_ge_03: frac_ge(0.3),
        frac_ge_07: frac_ge(0.7),
        position_decile_mean,
    })
}

/// Self-verification steps whose TTS falls below the cutoff.
pub fn find_decorative_self_verification(scores: &[StepScore], cutoff: f64) -> Vec<&StepScore> {
    scores
        .iter()
        .filter(|s| s.is_self_verification && s.tts < cutoff)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tts_direct_evaluations() {
        assert!((tts(0.9, 0.3, 0.7, 0.2) - 0.55).abs() < 1e-12);
        assert_eq!(tts(0.4, 0.4, 0.4, 0.4), 0.0);
        assert_eq!(tts(1.0, 0.0, 1.0, 0.0), 1.0);
    }

    #[test]
    fn tts_swap_symmetry() {
        let a = tts(0.9, 0.2, 0.4, 0.1);
        let b = tts(0.4, 0.1, 0.9, 0.2);
        assert_eq!(a, b);
    }

    #[test]
    fn ate_signs() {
        assert!((ate_nec(0.9, 0.3) - 0.6).abs() < 1e-12);
        assert!(ate_nec(0.3, 0.9) < 0.0);
        assert_eq!(ate_suf(0.5, 0.5), 0.0);
    }

    fn score_with(tts: f64, index: usize, n: usize, sv: bool) -> StepScore {
        StepScore {
            problem_id: "p".into(),
            step_index: index,
            s1_1: 0.0,
            s0_1: 0.0,
            s1_0: 0.0,
            s0_0: 0.0,
            ate_nec: 0.0,
            ate_suf: 0.0,
            tts,
            dropstep: 0.0,
            n_evals: 0,
            is_self_verification: sv,
            position: index as f64 / (n - 1).max(1) as f64,
            plans: Vec::new(),
        }
    }

    #[test]
    fn stats_counting() {
        let scores: Vec<StepScore> = [0.0, 0.0, 1.0, 1.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| score_with(t, i, 4, false))
            .collect();
        let stats = distribution_stats(&scores).unwrap();
        assert_eq!(stats.frac_ge_07, 0.5);
        assert_eq!(stats.frac_ge_03, 0.5);
        assert_eq!(stats.mean, 0.5);
        assert_eq!(stats.median, 0.5);
    }

    #[test]
    fn stats_all_zero() {
        let scores: Vec<StepScore> = (0..5).map(|i| score_with(0.0, i, 5, false)).collect();
        let stats = distribution_stats(&scores).unwrap();
        assert_eq!(stats.mean, 0.0);
        assert_eq!(stats.frac_ge_03, 0.0);
        assert_eq!(stats.frac_ge_07, 0.0);
    }

    #[test]
    fn stats_one_high_in_twenty() {
        let mut scores: Vec<StepScore> = (0..19).map(|i| score_with(0.0, i, 20, false)).collect();
        scores.push(score_with(1.0, 19, 20, false));
        let stats = distribution_stats(&scores).unwrap();
        assert!((stats.frac_ge_07 - 0.05).abs() < 1e-12);
        // The high step sits at position 1.0, the last decile.
        assert_eq!(stats.position_decile_mean[9], 1.0);
    }

    #[test]
    fn threshold_selection_errors_name_the_threshold() {
        let scores: Vec<StepScore> = vec![score_with(0.0, 0, 2, false), score_with(1.0, 1, 2, false)];
        let (tt, dt) = select_threshold_sets(&scores, 0.9, 0.0).unwrap();
        assert_eq!(tt.len(), 1);
        assert_eq!(dt.len(), 1);
        match select_threshold_sets(&scores, 1.1, 0.0) {
            Err(Error::Config(_)) | Err(Error::Selection(_)) => {}
            other => panic!("expected an error, got {other:?}"),
        }
    }

    #[test]
    fn beta_zero_admits_only_exact_zero() {
        let scores: Vec<StepScore> = vec![
            score_with(0.0, 0, 3, false),
            score_with(0.001, 1, 3, false),
            score_with(0.95, 2, 3, false),
        ];
        let (_, dt) = select_threshold_sets(&scores, 0.9, 0.0).unwrap();
        assert_eq!(dt.len(), 1);
        assert_eq!(dt[0].step_index, 0);
    }

    #[test]
    fn decorative_self_verification_filter() {
        let scores: Vec<StepScore> = vec![
            score_with(0.0, 0, 3, true),
            score_with(0.5, 1, 3, true),
            score_with(0.0, 2, 3, false),
        ];
        let found = find_decorative_self_verification(&scores, 0.005);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].step_index, 0);
        assert!(find_decorative_self_verification(&scores[2..], 0.005).is_empty());
    }

    #[test]
    fn config_validation() {
        let mut config = ScoreConfig::default();
        assert!(config.validate().is_ok());
        config.beta = 0.95;
        assert!(config.validate().is_err());
        config.beta = 0.0;
        config.num_samples = 0;
        assert!(config.validate().is_err());
    }
}
