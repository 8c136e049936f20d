//! Held-out evaluation: greedy decoding, one image per task, success
//! when the generated image matches the ground-truth concept embedding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept_world::{FrozenEmbedder, Task};
use crate::policy_lm::Vocab;
use crate::rewards::{consistency_reward, format_reward};
use crate::rgpo::{derive_seed, Models};

use super::{build_prompt, PipelineError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Consistency threshold that counts as a success.
    pub tau: f64,
    pub max_completion_len: usize,
    pub euler_steps: usize,
    pub seed: u64,
    /// Replace the learned generator with the ground-truth renderer, to
    /// check the scoring path end to end.
    pub oracle: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            max_completion_len: 64,
            euler_steps: 8,
            seed: 1234,
            oracle: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Fraction of tasks whose image consistency reached `tau`.
    pub accuracy: f64,
    pub mean_consistency: f64,
    pub mean_format: f64,
}

/// Score the stack on a task list. `thinking` selects the system prompt:
/// true asks for a reasoning span, false for an empty one. Decoding is
/// greedy, so a report is a pure function of models and config.
pub fn evaluate(
    models: &Models<f32>,
    tasks: &[Task],
    thinking: bool,
    ecfg: &EvalConfig,
) -> Result<EvalReport, PipelineError> {
    let vocab = Vocab::new();
    let embedder = FrozenEmbedder::new();
    let scores = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| -> Result<(f64, f64), PipelineError> {
            let prompt = build_prompt(&task.instruction, thinking);
            let prompt_ids = vocab.tokenize(&prompt)?;
            let completion = match models.policy.sample(
                &prompt_ids,
                0.0,
                0,
                ecfg.max_completion_len,
                derive_seed(ecfg.seed, 1, i as u64),
            ) {
                Ok(c) => c,
                Err(crate::policy_lm::PolicyError::ContextOverflow { .. }) => {
                    return Ok((0.0, 0.0));
                }
                Err(e) => return Err(e.into()),
            };
            let text = vocab.detokenize(&completion.ids)?;
            let fmt = format_reward(&text);
            let image = if ecfg.oracle {
                crate::concept_world::render(&crate::concept_world::parse_prompt(
                    &task.gt_prompt,
                )?)
            } else {
                let mut full = prompt_ids.clone();
                full.extend_from_slice(&completion.ids);
                models.generate_image(
                    &full,
                    prompt_ids.len(),
                    ecfg.euler_steps,
                    derive_seed(ecfg.seed, 2, i as u64),
                )?
            };
            let cons = consistency_reward(&embedder, &image, &task.gt_prompt)?;
            Ok((cons, fmt))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = scores.len();
    let inv = 1.0 / n.max(1) as f64;
    Ok(EvalReport {
        n,
        accuracy: scores.iter().filter(|(c, _)| *c >= ecfg.tau).count() as f64 * inv,
        mean_consistency: scores.iter().map(|(c, _)| c).sum::<f64>() * inv,
        mean_format: scores.iter().map(|(_, f)| f).sum::<f64>() * inv,
    })
}
