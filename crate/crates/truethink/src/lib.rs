//! Measures, for each verbalized chain-of-thought step, its causal
//! contribution to a model's final answer, and extracts a latent steering
//! direction that can force or suppress internal use of a step.
//!
//! The short version:
//!
//! - [`trace`] models problems, steps, and answers, and segments raw
//!   traces into steps.
//! - [`perturb`] produces the numeric-offset and step-drop perturbations
//!   every estimate is built from.
//! - [`backend`] is the model contract: early-exit answers, teacher-forced
//!   confidence, hidden-state capture, steering and attention hooks.
//! - [`synthetic`] implements fully known causal worlds whose scores and
//!   steering outcomes are computable in closed form: the test oracle.
//! - [`scoring`] estimates the necessity/sufficiency effects and the
//!   True-Thinking Score per step.
//! - [`steering`] extracts difference-in-means directions and runs the
//!   engagement/disengagement causal tests and their baselines.
//! - [`runner`] orchestrates scoring/extraction/steering runs with an
//!   append-only record store, caching, CSV tables, and SVG plots.
//!
//! The guide under `book/` walks through the same material with runnable
//! examples; its snippets compile as doctests of the [`guide`] module.

pub mod backend;
pub mod cache;
pub mod error;
pub mod guide;
pub mod perturb;
pub mod runner;
pub mod scoring;
pub mod seeding;
pub mod steering;
pub mod synthetic;
pub mod trace;

pub use backend::{Backend, Capabilities, SessionInfo, EARLY_EXIT_CUE};
pub use error::{Error, Result};
pub use scoring::{ScoreConfig, ScoreMode, ScoreVariant, StepScore};
pub use steering::{FlipReport, SteeringVector, TestCase, TestKind};
pub use synthetic::{build_world, oracle_scores, SyntheticBackend, SyntheticSpec};
pub use trace::{Answer, ChainOfThought, DatasetSplit, Problem, Step};
