//! Staged training orchestration: teacher pretraining, connector
//! alignment, chain-of-thought supervised fine-tuning, reinforcement
//! learning, plus checkpointing and evaluation.

mod checkpoint;
mod eval;
mod stages;

use std::io::{BufRead, BufWriter, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::concept_world::{ConceptError, SplitCounts, Task, TaskMode};
use crate::gen_decoder::DecoderError;
use crate::numerics::TensorError;
use crate::policy_lm::{PolicyError, VocabError};
use crate::rgpo::{RgpoConfig, RgpoError, StepMetrics};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use eval::{evaluate, EvalConfig, EvalReport};
pub use stages::{
    load_models, load_teacher, stage0_teacher, stage1_pretrain, stage2_sft, stage3_rgpo,
    teacher_consistency, Stage0Report, Stage1Report, Stage2Report, Stage3Report,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Rgpo(#[from] RgpoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {got}, expected {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint is from stage {got}, expected stage {expected}")]
    WrongStage { got: u32, expected: u32 },
    #[error("teacher consistency gate {gate} not reached: {got:.4} after {steps} steps")]
    GateNotReached { gate: f64, got: f64, steps: u64 },
    #[error("frozen parameters drifted: {0:?}")]
    FrozenDrift(Vec<String>),
    #[error("non-finite loss at step {0}; last good checkpoint retained")]
    NonFiniteLoss(u64),
    #[error("malformed metrics line {0}")]
    BadMetrics(usize),
}

/// The fixed reasoning system prompt. The vocabulary is lowercase-only,
/// so the prompt is too.
pub const SYSTEM_PROMPT_THINK: &str = "you first think step by step inside <think> </think>, \
then give the final image description inside <answer> </answer>.";

/// System prompt for the non-thinking mode: the think span stays empty.
pub const SYSTEM_PROMPT_DIRECT: &str = "you give an empty <think> </think> span, \
then the final image description inside <answer> </answer>.";

/// The tokenized context a completion is conditioned on.
pub fn build_prompt(instruction: &str, thinking: bool) -> String {
    let sys = if thinking {
        SYSTEM_PROMPT_THINK
    } else {
        SYSTEM_PROMPT_DIRECT
    };
    format!("<bos>{sys};{instruction};")
}

pub fn prompt_for_task(task: &Task) -> String {
    build_prompt(&task.instruction, task.mode == TaskMode::Reasoning)
}

/// Supervised target: the explanation inside the think span for
/// reasoning tasks, an empty span for direct ones.
pub fn target_completion(task: &Task) -> String {
    let think = match task.mode {
        TaskMode::Reasoning => task.explanation.as_str(),
        TaskMode::Direct => "",
    };
    format!(
        "<think>{think}</think><answer>{}</answer><img>",
        task.gt_prompt
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage0Config {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Mean-consistency threshold that ends the stage early.
    pub gate: f64,
    pub check_every: u64,
    /// Mid-stage checkpoint cadence; 0 saves only at stage end.
    pub save_every: u64,
}

impl Default for Stage0Config {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 3e-4,
            gate: 0.9,
            check_every: 50,
            save_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub distill_weight: f64,
    pub save_every: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 800,
            batch: 8,
            lr: 3e-4,
            distill_weight: 1.0,
            save_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Next-token cross-entropy on the policy; a deviation from the
    /// source protocol, required because the toy policy has no
    /// pretraining to fall back on.
    pub text_loss: bool,
    pub diffusion_loss: bool,
    pub save_every: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 6000,
            batch: 8,
            lr: 3e-4,
            text_loss: true,
            diffusion_loss: true,
            save_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    pub updates: u64,
    pub tasks_per_update: usize,
    pub lr: f64,
    pub cosine_schedule: bool,
    /// The surrogate covers text tokens only, so the connector's sole
    /// gradient here is the image KL; training it can only bend the
    /// stage-2 hidden-to-conditioning map around the drifting policy,
    /// which erodes direct generation. Off by default.
    pub train_connector: bool,
    pub train_decoder: bool,
    pub checkpoint_every: u64,
    /// Global gradient-norm ceiling across the whole stack; variance
    /// normalization makes near-tie groups produce outsized advantages,
    /// and the clip keeps those spikes from destabilizing the policy.
    pub grad_clip: f64,
    pub rgpo: RgpoConfig,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            updates: 500,
            tasks_per_update: 4,
            lr: 1e-4,
            cosine_schedule: true,
            train_connector: false,
            train_decoder: false,
            checkpoint_every: 50,
            grad_clip: 1.0,
            rgpo: RgpoConfig::default(),
        }
    }
}

/// Whole-run configuration; its hash is stored in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_seed: u64,
    pub counts: SplitCounts,
    pub stage0: Stage0Config,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Append-only line-delimited metrics stream.
pub struct MetricsWriter {
    w: BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, PipelineError> {
        Ok(Self {
            w: BufWriter::new(std::fs::File::create(path)?),
        })
    }

    /// Reopen an existing stream, dropping records past `keep_steps` so a
    /// resumed run rewrites exactly the records it recomputes. Kept lines
    /// are copied byte for byte; re-serializing parsed floats can shift
    /// the last digit and break bit-exact resume.
    pub fn reopen_truncated(path: &Path, keep_steps: u64) -> Result<Self, PipelineError> {
        let mut kept: Vec<String> = Vec::new();
        if path.exists() {
            let f = std::fs::File::open(path)?;
            for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let m: StepMetrics = serde_json::from_str(&line)
                    .map_err(|_| PipelineError::BadMetrics(i + 1))?;
                if m.step < keep_steps {
                    kept.push(line);
                }
            }
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for line in &kept {
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(Self { w })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<(), PipelineError> {
        serde_json::to_writer(&mut self.w, m).map_err(io_from_json)?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }
}

fn io_from_json(e: serde_json::Error) -> PipelineError {
    PipelineError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, PipelineError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|_| PipelineError::BadMetrics(i + 1))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept_world::Split;
    use crate::policy_lm::Vocab;

    #[test]
    fn prompts_tokenize_under_context() {
        let vocab = Vocab::new();
        let p = build_prompt("draw a shape with one more side than a square", true);
        let ids = vocab.tokenize(&p).unwrap();
        assert!(ids.len() < 200, "prompt unexpectedly long: {}", ids.len());
        let q = build_prompt("draw a red pentagon", false);
        vocab.tokenize(&q).unwrap();
    }

    #[test]
    fn targets_roundtrip_through_vocab() {
        let vocab = Vocab::new();
        let t = Task {
            instruction: "draw a shape with 4+1 sides in red".into(),
            gt_prompt: "red pentagon".into(),
            explanation: "4+1=5, so a pentagon".into(),
            mode: TaskMode::Reasoning,
            split: Split::Train,
        };
        let target = target_completion(&t);
        let ids = vocab.tokenize(&target).unwrap();
        assert_eq!(vocab.detokenize(&ids).unwrap(), target);
        assert!(target.starts_with("<think>"));
        assert!(target.ends_with("<img>"));
    }

    #[test]
    fn direct_targets_have_empty_think() {
        let t = Task {
            instruction: "draw a red pentagon".into(),
            gt_prompt: "red pentagon".into(),
            explanation: String::new(),
            mode: TaskMode::Direct,
            split: Split::Train,
        };
        assert!(target_completion(&t).starts_with("<think></think>"));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.stage3.lr = 1e-3;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn metrics_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mk = |step| StepMetrics {
            step,
            loss: 0.5,
            reward_mean: 1.0,
            reward_format_mean: 1.0,
            reward_consistency_mean: 0.4,
            completion_len_mean: 30.0,
            kl_text: 0.01,
            kl_image: 0.02,
        };
        let mut w = MetricsWriter::create(&path).unwrap();
        for s in 0..5 {
            w.append(&mk(s)).unwrap();
        }
        drop(w);
        assert_eq!(read_metrics(&path).unwrap().len(), 5);
        let mut w = MetricsWriter::reopen_truncated(&path, 3).unwrap();
        w.append(&mk(3)).unwrap();
        drop(w);
        let got = read_metrics(&path).unwrap();
        assert_eq!(got.len(), 4);
        assert_eq!(got.last().unwrap().step, 3);
    }
}
