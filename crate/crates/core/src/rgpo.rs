//! Group-relative policy optimization with dual KL regularization.
//!
//! A batch step samples a group of completions per task at temperature 1,
//! renders an image for each, scores them, and normalizes rewards into
//! group advantages. The update maximizes a clipped importance-ratio
//! surrogate penalized by a token-level KL to a frozen reference policy
//! and a feature-level KL between the current and reference diffusion
//! pathways, replayed at a random flow step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept_world::{ConceptError, FrozenEmbedder, Image};
use crate::gen_decoder::{
    image_to_latent, interpolate, Connector, DecoderError, DecoderModel,
};
use crate::numerics::{BoundParams, Elem, ParamStore, Tape, Tensor, TensorError, Var};
use crate::policy_lm::{PolicyError, PolicyModel, TokenSequence, Vocab, VocabError};
use crate::rewards::{total_reward, RewardConfig, RewardScore};

#[derive(Debug, Error)]
pub enum RgpoError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// How group advantages are normalized. `PaperVar` divides the centered
/// reward by the population variance; `Std` divides by its square root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    PaperVar,
    Std,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RgpoConfig {
    pub group_size: usize,
    pub beta_text: f64,
    pub beta_image: f64,
    pub eps_clip: f64,
    pub advantage_mode: AdvantageMode,
    pub max_completion_len: usize,
    pub euler_steps: usize,
    /// Optimizer steps taken on each rollout batch. Steps past the first
    /// move off-policy, which is where the clipped ratio starts to bind.
    pub updates_per_batch: usize,
    pub reward: RewardConfig,
}

impl Default for RgpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            beta_text: 0.01,
            beta_image: 0.06,
            eps_clip: 0.2,
            advantage_mode: AdvantageMode::Std,
            max_completion_len: 64,
            euler_steps: 8,
            updates_per_batch: 2,
            reward: RewardConfig::default(),
        }
    }
}

impl RgpoConfig {
    pub fn validate(&self) -> Result<(), RgpoError> {
        if self.group_size < 2 {
            return Err(RgpoError::InvalidConfig(format!(
                "group size must be at least 2, got {}",
                self.group_size
            )));
        }
        if !(0.0..1.0).contains(&self.eps_clip) {
            return Err(RgpoError::InvalidConfig(format!(
                "clip range must be in [0,1), got {}",
                self.eps_clip
            )));
        }
        if self.updates_per_batch == 0 {
            return Err(RgpoError::InvalidConfig(
                "updates_per_batch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Stateless seed derivation: the same (base, stream, index) always maps
/// to the same child seed, so resumed runs replay identical randomness.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The trainable generation stack: policy, connector bridge, and
/// diffusion decoder.
#[derive(Debug, Clone)]
pub struct Models<E: Elem> {
    pub policy: PolicyModel<E>,
    pub connector: Connector<E>,
    pub decoder: DecoderModel<E>,
}

/// One tape's leaf bindings for all three parameter stores.
pub struct ModelBinds {
    pub policy: BoundParams,
    pub connector: BoundParams,
    pub decoder: BoundParams,
}

impl<E: Elem> Models<E> {
    pub fn bind(&self, tape: &mut Tape<E>) -> ModelBinds {
        ModelBinds {
            policy: self.policy.params.bind(tape),
            connector: self.connector.params.bind(tape),
            decoder: self.decoder.params.bind(tape),
        }
    }

    /// Render the image a token sequence conditions: policy hidden states
    /// from `cond_start` onward run through the connector into the Euler
    /// sampler. Conditioning on the completion span rather than the whole
    /// prompt keeps the decoder input short.
    pub fn generate_image(
        &self,
        full_ids: &[u32],
        cond_start: usize,
        euler_steps: usize,
        image_seed: u64,
    ) -> Result<Image, RgpoError> {
        let hidden = self.policy.hidden_states(full_ids)?;
        let cond_in = hidden.row_slice(cond_start, full_ids.len());
        let cond = self.connector.forward_tensor(&cond_in)?;
        Ok(self.decoder.sample_image(&cond, euler_steps, image_seed)?)
    }
}

/// One sampled completion with its image, score, and advantage.
#[derive(Debug, Clone)]
pub struct RolloutOutput {
    pub completion: TokenSequence,
    pub text: String,
    pub image: Image,
    pub image_seed: u64,
    pub reward: RewardScore,
    pub advantage: f64,
    /// Set when the prompt did not fit the context window; such outputs
    /// score zero and are skipped by the update.
    pub overflowed: bool,
}

/// A group of `G` outputs for a single task prompt.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt_ids: Vec<u32>,
    pub gt_prompt: String,
    pub outputs: Vec<RolloutOutput>,
}

/// Sample a group of completions and images for one prompt and score
/// them. Never fails on malformed generations; only infrastructure
/// errors propagate.
pub fn rollout<E: Elem>(
    models: &Models<E>,
    embedder: &FrozenEmbedder,
    vocab: &Vocab,
    prompt_ids: &[u32],
    gt_prompt: &str,
    cfg: &RgpoConfig,
    seed: u64,
) -> Result<RolloutGroup, RgpoError> {
    cfg.validate()?;
    let mut outputs = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let sample_seed = derive_seed(seed, 1, i as u64);
        let image_seed = derive_seed(seed, 2, i as u64);
        let completion = match models.policy.sample(
            prompt_ids,
            1.0,
            0,
            cfg.max_completion_len,
            sample_seed,
        ) {
            Ok(c) => c,
            Err(PolicyError::ContextOverflow { .. }) => {
                outputs.push(RolloutOutput {
                    completion: TokenSequence::new(Vec::new()),
                    text: String::new(),
                    image: Image::zeros(),
                    image_seed,
                    reward: RewardScore {
                        format: 0.0,
                        consistency: 0.0,
                        total: 0.0,
                    },
                    advantage: 0.0,
                    overflowed: true,
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut full = prompt_ids.to_vec();
        full.extend_from_slice(&completion.ids);
        let image = models.generate_image(&full, prompt_ids.len(), cfg.euler_steps, image_seed)?;
        let text = vocab.detokenize(&completion.ids)?;
        let reward = total_reward(embedder, &text, &image, gt_prompt, &cfg.reward)?;
        outputs.push(RolloutOutput {
            completion,
            text,
            image,
            image_seed,
            reward,
            advantage: 0.0,
            overflowed: false,
        });
    }
    let adv = advantages(
        &outputs.iter().map(|o| o.reward.total).collect::<Vec<_>>(),
        cfg.advantage_mode,
    );
    for (o, a) in outputs.iter_mut().zip(adv) {
        o.advantage = a;
    }
    Ok(RolloutGroup {
        prompt_ids: prompt_ids.to_vec(),
        gt_prompt: gt_prompt.to_string(),
        outputs,
    })
}

/// Group-normalized advantages. A zero-variance group gets all-zero
/// advantages rather than a division by zero.
pub fn advantages(rewards: &[f64], mode: AdvantageMode) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return vec![0.0; n];
    }
    let denom = match mode {
        AdvantageMode::PaperVar => var,
        AdvantageMode::Std => var.sqrt(),
    };
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Per-output constants for the differentiable objective, computed under
/// the frozen reference stack and the recorded rollout randomness.
#[derive(Debug, Clone)]
pub struct OutputRefData<E: Elem> {
    /// Behavior-policy log-probs recorded at sampling time.
    pub old_lp: Vec<f64>,
    /// Reference-policy log-probs of the same tokens.
    pub ref_lp: Vec<f64>,
    /// Replayed flow time, drawn uniformly per output.
    pub t: f64,
    /// Replayed interpolant between the rollout noise and the generated
    /// image's latent.
    pub xt: Tensor<E>,
    /// Final-block noise-position features of the reference pathway.
    pub ref_feats: Tensor<E>,
}

/// Evaluate the reference stack on every output of a group, replaying
/// each output's flow step at a seeded random time.
pub fn prepare_ref_data<E: Elem>(
    reference: &Models<E>,
    group: &RolloutGroup,
    seed: u64,
) -> Result<Vec<OutputRefData<E>>, RgpoError> {
    let mut out = Vec::with_capacity(group.outputs.len());
    for (i, o) in group.outputs.iter().enumerate() {
        if o.overflowed || o.completion.ids.is_empty() {
            out.push(OutputRefData {
                old_lp: Vec::new(),
                ref_lp: Vec::new(),
                t: 0.0,
                xt: Tensor::zeros(vec![reference.decoder.cfg.latent_dim()]),
                ref_feats: Tensor::zeros(vec![
                    reference.decoder.cfg.noise_tokens,
                    reference.decoder.cfg.width,
                ]),
            });
            continue;
        }
        let old_lp = o
            .completion
            .logprobs
            .clone()
            .expect("rollout records logprobs");
        let (ref_lp, _) = reference
            .policy
            .sequence_logprob(&group.prompt_ids, &o.completion.ids)?;
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 3, i as u64));
        let t: f64 = rng.gen();
        let eps = reference.decoder.sample_noise(o.image_seed);
        let x0 = image_to_latent::<E>(&o.image);
        let xt = interpolate(&x0, &eps, t)?;
        let mut full = group.prompt_ids.clone();
        full.extend_from_slice(&o.completion.ids);
        let hidden = reference.policy.hidden_states(&full)?;
        let cond_in = hidden.row_slice(group.prompt_ids.len(), full.len());
        let cond = reference.connector.forward_tensor(&cond_in)?;
        let (_, feats) = reference.decoder.forward_tensors(&cond, &xt, t)?;
        let ref_feats = feats.last().expect("at least one block").clone();
        out.push(OutputRefData {
            old_lp,
            ref_lp,
            t,
            xt,
            ref_feats,
        });
    }
    Ok(out)
}

/// Mean over tokens of `min(rho * A, clip(rho, 1-eps, 1+eps) * A)` with
/// `rho = exp(lp_new - lp_old)`.
pub fn surrogate_on<E: Elem>(
    tape: &mut Tape<E>,
    lp_new: Var,
    old_lp: &[f64],
    advantage: f64,
    eps_clip: f64,
) -> Result<Var, TensorError> {
    let old = tape.constant(Tensor::from_f64_slice(vec![old_lp.len()], old_lp)?);
    let d = tape.sub(lp_new, old)?;
    let rho = tape.exp(d)?;
    let plain = tape.mul_scalar(rho, advantage)?;
    let clipped = tape.clamp(rho, 1.0 - eps_clip, 1.0 + eps_clip)?;
    let clipped = tape.mul_scalar(clipped, advantage)?;
    let m = tape.min_elem(plain, clipped)?;
    tape.mean(m)
}

/// Token-averaged `u - log u - 1` with `u = exp(lp_ref - lp_new)`; zero
/// exactly when the policies agree on every sampled token.
pub fn text_kl_on<E: Elem>(
    tape: &mut Tape<E>,
    lp_new: Var,
    ref_lp: &[f64],
) -> Result<Var, TensorError> {
    let r = tape.constant(Tensor::from_f64_slice(vec![ref_lp.len()], ref_lp)?);
    let d = tape.sub(r, lp_new)?;
    let u = tape.exp(d)?;
    let v = tape.sub(u, d)?;
    let v = tape.add_scalar(v, -1.0)?;
    tape.mean(v)
}

/// Position-averaged KL between row softmaxes of the current and
/// reference feature maps; gradient flows through the current side only.
pub fn image_kl_on<E: Elem>(
    tape: &mut Tape<E>,
    feats: Var,
    ref_feats: &Tensor<E>,
) -> Result<Var, TensorError> {
    let (rows, cols) = ref_feats.rows_cols();
    // reference log-softmax, computed in f64 off the tape
    let rf = ref_feats.to_f64_vec();
    let mut lq = vec![0.0f64; rows * cols];
    for i in 0..rows {
        let row = &rf[i * cols..(i + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        for j in 0..cols {
            lq[i * cols + j] = row[j] - lse;
        }
    }
    let lq = tape.constant(Tensor::from_f64_slice(vec![rows, cols], &lq)?);
    let p = tape.softmax(feats)?;
    let logp = tape.log(p)?;
    let diff = tape.sub(logp, lq)?;
    let terms = tape.mul(p, diff)?;
    let s = tape.sum(terms)?;
    tape.mul_scalar(s, 1.0 / rows as f64)
}

/// Per-output scalar components of the objective, for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct ObjectiveParts {
    pub surrogate: f64,
    pub kl_text: f64,
    pub kl_image: f64,
}

/// Build one output's objective `surr - beta_T * KL_T - beta_I * KL_I`
/// on the tape. Returns the objective Var and its scalar components.
#[allow(clippy::too_many_arguments)]
pub fn output_objective_on<E: Elem>(
    tape: &mut Tape<E>,
    models: &Models<E>,
    binds: &ModelBinds,
    prompt_ids: &[u32],
    output: &RolloutOutput,
    refd: &OutputRefData<E>,
    cfg: &RgpoConfig,
) -> Result<(Var, ObjectiveParts), RgpoError> {
    let mut full = prompt_ids.to_vec();
    full.extend_from_slice(&output.completion.ids);
    let (logits, hidden) = models.policy.forward_on(tape, &binds.policy, &full)?;
    let rows = tape.slice_rows(logits, prompt_ids.len() - 1, full.len() - 1)?;
    let idx: Vec<usize> = output.completion.ids.iter().map(|&i| i as usize).collect();
    let lp_new = tape.gather_log_softmax(rows, &idx)?;

    let surr = surrogate_on(tape, lp_new, &refd.old_lp, output.advantage, cfg.eps_clip)?;
    let ktext = text_kl_on(tape, lp_new, &refd.ref_lp)?;

    let cond_h = tape.slice_rows(hidden, prompt_ids.len(), full.len())?;
    let cond = models.connector.forward_on(tape, &binds.connector, cond_h)?;
    let xt = tape.constant(refd.xt.clone());
    let dec = models.decoder.forward_on(tape, &binds.decoder, cond, xt, refd.t)?;
    let feats = *dec.layer_feats.last().expect("at least one block");
    let kimg = image_kl_on(tape, feats, &refd.ref_feats)?;

    let parts = ObjectiveParts {
        surrogate: tape.value(surr).scalar_value().to_f64(),
        kl_text: tape.value(ktext).scalar_value().to_f64(),
        kl_image: tape.value(kimg).scalar_value().to_f64(),
    };
    let pt = tape.mul_scalar(ktext, cfg.beta_text)?;
    let pi = tape.mul_scalar(kimg, cfg.beta_image)?;
    let obj = tape.sub(surr, pt)?;
    let obj = tape.sub(obj, pi)?;
    Ok((obj, parts))
}

/// Whole-group loss `-(1/G) * sum_i objective_i` on a single tape. Used
/// as the reference graph for gradient verification; training uses the
/// per-output tapes below, which sum to the same gradient.
pub fn rgpo_loss_on<E: Elem>(
    tape: &mut Tape<E>,
    models: &Models<E>,
    binds: &ModelBinds,
    group: &RolloutGroup,
    ref_data: &[OutputRefData<E>],
    cfg: &RgpoConfig,
) -> Result<Var, RgpoError> {
    let g = group.outputs.len();
    let mut acc: Option<Var> = None;
    for (o, refd) in group.outputs.iter().zip(ref_data) {
        if o.overflowed || o.completion.ids.is_empty() {
            continue;
        }
        let (obj, _) =
            output_objective_on(tape, models, binds, &group.prompt_ids, o, refd, cfg)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, obj)?,
            None => obj,
        });
    }
    match acc {
        Some(a) => Ok(tape.mul_scalar(a, -1.0 / g as f64)?),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Gradients of the stack for one group, as parameter-shaped stores, plus
/// the loss value and averaged objective components.
pub struct GroupGrads<E: Elem> {
    pub policy: ParamStore<E>,
    pub connector: ParamStore<E>,
    pub decoder: ParamStore<E>,
    pub loss: f64,
    pub parts: ObjectiveParts,
}

/// A parameter-shaped store of zeros, used as a gradient accumulator.
pub fn zeros_like<E: Elem>(p: &ParamStore<E>) -> ParamStore<E> {
    let mut out = ParamStore::new();
    for (name, t) in p.iter() {
        out.insert(name, Tensor::zeros(t.shape.clone()));
    }
    out
}

/// Add `scale` times the tape gradients of `bound`'s leaves into `acc`,
/// matched by name.
pub fn accumulate_grads<E: Elem>(
    acc: &mut ParamStore<E>,
    tape: &Tape<E>,
    bound: &BoundParams,
    scale: f64,
) {
    let s = E::from_f64(scale);
    for name in acc.names() {
        let var = bound.var(&name);
        if let Some(g) = tape.grad(var) {
            let dst = acc.get_mut(&name);
            for (d, &gv) in dst.data.iter_mut().zip(&g.data) {
                *d += s * gv;
            }
        }
    }
}

/// Backpropagate one group. Each output gets its own tape so outputs run
/// in parallel; gradients are summed in a fixed output order afterwards,
/// making the result identical to a sequential evaluation.
pub fn group_gradients<E: Elem>(
    models: &Models<E>,
    group: &RolloutGroup,
    ref_data: &[OutputRefData<E>],
    cfg: &RgpoConfig,
) -> Result<GroupGrads<E>, RgpoError> {
    let g = group.outputs.len();
    let scale = -1.0 / g as f64;
    let per_output: Vec<Option<(Tape<E>, ModelBinds, f64, ObjectiveParts)>> = group
        .outputs
        .par_iter()
        .zip(ref_data)
        .map(|(o, refd)| -> Result<_, RgpoError> {
            if o.overflowed || o.completion.ids.is_empty() {
                return Ok(None);
            }
            let mut tape = Tape::new();
            let binds = models.bind(&mut tape);
            let (obj, parts) =
                output_objective_on(&mut tape, models, &binds, &group.prompt_ids, o, refd, cfg)?;
            let obj_val = tape.value(obj).scalar_value().to_f64();
            tape.backward(obj)?;
            Ok(Some((tape, binds, obj_val, parts)))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut grads = GroupGrads {
        policy: zeros_like(&models.policy.params),
        connector: zeros_like(&models.connector.params),
        decoder: zeros_like(&models.decoder.params),
        loss: 0.0,
        parts: ObjectiveParts::default(),
    };
    let mut contributing = 0usize;
    for entry in per_output.iter() {
        let Some((tape, binds, obj_val, parts)) = entry else {
            continue;
        };
        contributing += 1;
        grads.loss += scale * obj_val;
        grads.parts.surrogate += parts.surrogate;
        grads.parts.kl_text += parts.kl_text;
        grads.parts.kl_image += parts.kl_image;
        accumulate_grads(&mut grads.policy, tape, &binds.policy, scale);
        accumulate_grads(&mut grads.connector, tape, &binds.connector, scale);
        accumulate_grads(&mut grads.decoder, tape, &binds.decoder, scale);
    }
    if contributing > 0 {
        let inv = 1.0 / contributing as f64;
        grads.parts.surrogate *= inv;
        grads.parts.kl_text *= inv;
        grads.parts.kl_image *= inv;
    }
    Ok(grads)
}

/// Adam with bias correction. Moments live in parameter-shaped stores so
/// they checkpoint alongside the weights; arithmetic runs in f64.
#[derive(Debug, Clone)]
pub struct Adam<E: Elem> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore<E>,
    pub v: ParamStore<E>,
}

impl<E: Elem> Adam<E> {
    pub fn new(lr: f64, params: &ParamStore<E>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros_like(params),
            v: zeros_like(params),
        }
    }

    /// One update over every tensor in the store. `lr_scale` multiplies
    /// the base learning rate, for schedules.
    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &ParamStore<E>, lr_scale: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr * lr_scale;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name);
            let v = self.v.get_mut(name);
            for i in 0..p.data.len() {
                let gi = g.data[i].to_f64();
                let mi = self.beta1 * m.data[i].to_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data[i].to_f64() + (1.0 - self.beta2) * gi * gi;
                m.data[i] = E::from_f64(mi);
                v.data[i] = E::from_f64(vi);
                let mhat = mi / b1t;
                let vhat = vi / b2t;
                let delta = lr * mhat / (vhat.sqrt() + self.eps);
                p.data[i] = E::from_f64(p.data[i].to_f64() - delta);
            }
        }
    }
}

/// Half-cosine learning-rate decay from 1 at step 0 to 0 at `total`.
pub fn cosine_lr_scale(step: u64, total: u64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// One training-step record of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub reward_mean: f64,
    pub reward_format_mean: f64,
    pub reward_consistency_mean: f64,
    pub completion_len_mean: f64,
    pub kl_text: f64,
    pub kl_image: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen_decoder::DecoderCfg;
    use crate::policy_lm::LmConfig;

    fn tiny_models() -> Models<f32> {
        let vocab = Vocab::new();
        let lm = LmConfig {
            ctx: 96,
            ..LmConfig::tiny(vocab.size())
        };
        // full-size latent so sampled latents map onto images, tiny width
        let dc = DecoderCfg {
            width: 8,
            heads: 2,
            noise_tokens: 4,
            token_dim: 48,
            ..DecoderCfg::tiny()
        };
        Models {
            policy: PolicyModel::init(lm, 11),
            connector: Connector::init(8, 2, 16, 12),
            decoder: DecoderModel::init(dc, 13),
        }
    }

    #[test]
    fn derive_seed_is_stable_and_spreads() {
        assert_eq!(derive_seed(7, 1, 0), derive_seed(7, 1, 0));
        assert_ne!(derive_seed(7, 1, 0), derive_seed(7, 1, 1));
        assert_ne!(derive_seed(7, 1, 0), derive_seed(7, 2, 0));
        assert_ne!(derive_seed(7, 1, 0), derive_seed(8, 1, 0));
    }

    #[test]
    fn advantages_zero_variance_group() {
        assert_eq!(
            advantages(&[0.5, 0.5, 0.5], AdvantageMode::PaperVar),
            vec![0.0; 3]
        );
    }

    #[test]
    fn advantages_match_hand_computation() {
        let r = [1.0, 0.0];
        // mean 0.5, population variance 0.25
        let a = advantages(&r, AdvantageMode::PaperVar);
        assert!((a[0] - 2.0).abs() < 1e-12);
        assert!((a[1] + 2.0).abs() < 1e-12);
        let s = advantages(&r, AdvantageMode::Std);
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn advantages_sum_to_zero_and_shift_invariant() {
        let r = [0.3, 1.7, 0.9, 1.1];
        let a = advantages(&r, AdvantageMode::PaperVar);
        assert!(a.iter().sum::<f64>().abs() < 1e-12);
        let shifted: Vec<f64> = r.iter().map(|x| x + 5.0).collect();
        let b = advantages(&shifted, AdvantageMode::PaperVar);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn text_kl_zero_when_policies_agree() {
        let mut tape = Tape::<f64>::new();
        let lp = tape.leaf(Tensor::from_f64_slice(vec![3], &[-1.0, -2.0, -0.5]).unwrap());
        let kl = text_kl_on(&mut tape, lp, &[-1.0, -2.0, -0.5]).unwrap();
        assert_eq!(tape.value(kl).scalar_value(), 0.0);
    }

    #[test]
    fn text_kl_positive_when_they_differ() {
        let mut tape = Tape::<f64>::new();
        let lp = tape.leaf(Tensor::from_f64_slice(vec![2], &[-1.0, -2.0]).unwrap());
        let kl = text_kl_on(&mut tape, lp, &[-1.5, -1.0]).unwrap();
        assert!(tape.value(kl).scalar_value() > 0.0);
    }

    #[test]
    fn image_kl_zero_on_identical_features() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::from_f64_slice(vec![2, 3], &[0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap();
        let f = tape.leaf(t.clone());
        let kl = image_kl_on(&mut tape, f, &t).unwrap();
        assert!(tape.value(kl).scalar_value().abs() < 1e-12);
    }

    #[test]
    fn image_kl_positive_otherwise() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::from_f64_slice(vec![1, 2], &[0.0, 1.0]).unwrap());
        let r = Tensor::from_f64_slice(vec![1, 2], &[1.0, 0.0]).unwrap();
        let kl = image_kl_on(&mut tape, f, &r).unwrap();
        assert!(tape.value(kl).scalar_value() > 0.1);
    }

    #[test]
    fn surrogate_single_token_cases() {
        // ratio 1.5 with clip 0.2: min(1.5 A, 1.2 A)
        let mut tape = Tape::<f64>::new();
        let lp = tape.leaf(Tensor::from_f64_slice(vec![1], &[1.5f64.ln()]).unwrap());
        let s = surrogate_on(&mut tape, lp, &[0.0], 1.0, 0.2).unwrap();
        assert!((tape.value(s).scalar_value() - 1.2).abs() < 1e-9);
        // negative advantage keeps the more pessimistic branch
        let mut tape = Tape::<f64>::new();
        let lp = tape.leaf(Tensor::from_f64_slice(vec![1], &[0.5f64.ln()]).unwrap());
        let s = surrogate_on(&mut tape, lp, &[0.0], -1.0, 0.2).unwrap();
        assert!((tape.value(s).scalar_value() + 0.8).abs() < 1e-9);
    }

    #[test]
    fn rollout_is_deterministic_and_scored() {
        let models = tiny_models();
        let emb = FrozenEmbedder::new();
        let vocab = Vocab::new();
        let cfg = RgpoConfig {
            max_completion_len: 8,
            euler_steps: 2,
            ..RgpoConfig::default()
        };
        let prompt = vocab.tokenize("<bos>draw").unwrap();
        let a = rollout(&models, &emb, &vocab, &prompt, "red triangle", &cfg, 5).unwrap();
        let b = rollout(&models, &emb, &vocab, &prompt, "red triangle", &cfg, 5).unwrap();
        assert_eq!(a.outputs.len(), cfg.group_size);
        for (x, y) in a.outputs.iter().zip(&b.outputs) {
            assert_eq!(x.completion.ids, y.completion.ids);
            assert_eq!(x.image.pixels, y.image.pixels);
            assert_eq!(x.reward.total, y.reward.total);
            assert_eq!(x.advantage, y.advantage);
        }
    }

    #[test]
    fn group_size_below_two_rejected() {
        let cfg = RgpoConfig {
            group_size: 1,
            ..RgpoConfig::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(RgpoError::InvalidConfig(_))
        ));
    }

    #[test]
    fn parallel_grads_match_single_tape_loss() {
        let models = tiny_models();
        let emb = FrozenEmbedder::new();
        let vocab = Vocab::new();
        let cfg = RgpoConfig {
            max_completion_len: 6,
            euler_steps: 1,
            ..RgpoConfig::default()
        };
        let prompt = vocab.tokenize("<bos>go").unwrap();
        let group = rollout(&models, &emb, &vocab, &prompt, "blue square", &cfg, 9).unwrap();
        let refd = prepare_ref_data(&models, &group, 9).unwrap();

        let grads = group_gradients(&models, &group, &refd, &cfg).unwrap();

        let mut tape = Tape::new();
        let binds = models.bind(&mut tape);
        let loss = rgpo_loss_on(&mut tape, &models, &binds, &group, &refd, &cfg).unwrap();
        let loss_val = tape.value(loss).scalar_value().to_f64();
        tape.backward(loss).unwrap();
        assert!((grads.loss - loss_val).abs() < 1e-6);
        for name in models.policy.params.names() {
            let single = tape.grad(binds.policy.var(&name)).unwrap();
            let multi = grads.policy.get(&name);
            for (a, b) in single.data.iter().zip(&multi.data) {
                assert!((a - b).abs() < 1e-5, "grad mismatch in {name}");
            }
        }
    }

    #[test]
    fn reference_stack_gives_zero_text_kl() {
        let models = tiny_models();
        let emb = FrozenEmbedder::new();
        let vocab = Vocab::new();
        let cfg = RgpoConfig {
            max_completion_len: 6,
            euler_steps: 1,
            ..RgpoConfig::default()
        };
        let prompt = vocab.tokenize("<bos>go").unwrap();
        let group = rollout(&models, &emb, &vocab, &prompt, "blue square", &cfg, 3).unwrap();
        // reference equal to the current policy: both KL terms vanish
        let refd = prepare_ref_data(&models, &group, 3).unwrap();
        let grads = group_gradients(&models, &group, &refd, &cfg).unwrap();
        assert!(grads.parts.kl_text.abs() < 1e-6);
        assert!(grads.parts.kl_image.abs() < 1e-6);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::from_f64_slice(vec![2], &[3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1, &params);
        for _ in 0..200 {
            let g = {
                let w = params.get("w");
                Tensor {
                    shape: vec![2],
                    data: w.data.iter().map(|&x| 2.0 * x).collect(),
                }
            };
            let mut gs = ParamStore::new();
            gs.insert("w", g);
            opt.step(&mut params, &gs, 1.0);
        }
        for &x in &params.get("w").data {
            assert!(x.abs() < 1e-2);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr_scale(0, 100), 1.0);
        assert!((cosine_lr_scale(50, 100) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr_scale(100, 100), 0.0);
        assert_eq!(cosine_lr_scale(150, 100), 0.0);
    }
}
