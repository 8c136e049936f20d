//! Connector plus rectified-flow diffusion decoder.
//!
//! The decoder is a bidirectional transformer over a condition sequence
//! `[cond tokens..., time token, noise tokens...]`. Output heads on the
//! noise-token positions predict a velocity toward the target latent;
//! training regresses it onto `x0 - eps`, sampling integrates it with an
//! N-step Euler loop. A frozen copy of the same architecture, conditioned
//! through its own prompt-embedding table, serves as the distillation
//! teacher.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::concept_world::{Image, IMG_DIM};
use crate::numerics::{
    attention, BoundParams, Elem, ParamStore, Tape, Tensor, TensorError, Var,
};
use crate::policy_lm::{blocks_forward, init_blocks};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("time step {0} outside [0,1]")]
    TimeOutOfRange(f64),
    #[error("empty connector input")]
    EmptyInput,
    #[error("non-finite state during Euler integration at step {0}")]
    NonFiniteState(usize),
}

pub const NOISE_TOKENS: usize = 4;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderCfg {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
    pub noise_tokens: usize,
    pub token_dim: usize,
    /// Vocabulary size of the teacher's own prompt-embedding table;
    /// zero for a connector-conditioned student.
    pub prompt_vocab: usize,
    pub prompt_ctx: usize,
}

impl Default for DecoderCfg {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 4,
            heads: 4,
            ff: 256,
            noise_tokens: NOISE_TOKENS,
            token_dim: IMG_DIM / NOISE_TOKENS,
            prompt_vocab: 0,
            prompt_ctx: 64,
        }
    }
}

impl DecoderCfg {
    pub fn latent_dim(&self) -> usize {
        self.noise_tokens * self.token_dim
    }

    /// Reduced-width instance for f64 gradient verification.
    pub fn tiny() -> Self {
        Self {
            width: 8,
            blocks: 2,
            heads: 2,
            ff: 16,
            noise_tokens: 2,
            token_dim: 4,
            prompt_vocab: 0,
            prompt_ctx: 8,
        }
    }
}

/// One rectified-flow training example: target latent, noise draw, time
/// step, and the straight-line interpolant between them.
#[derive(Debug, Clone)]
pub struct FlowBatch<E: Elem> {
    pub x0: Tensor<E>,
    pub eps: Tensor<E>,
    pub t: f64,
    pub xt: Tensor<E>,
}

impl<E: Elem> FlowBatch<E> {
    pub fn new(x0: Tensor<E>, eps: Tensor<E>, t: f64) -> Result<Self, DecoderError> {
        let xt = interpolate(&x0, &eps, t)?;
        Ok(Self { x0, eps, t, xt })
    }

    /// The regression target `x0 - eps`.
    pub fn velocity_target(&self) -> Tensor<E> {
        let data = self
            .x0
            .data
            .iter()
            .zip(&self.eps.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor {
            shape: self.x0.shape.clone(),
            data,
        }
    }
}

/// `xt = (1 - t) * eps + t * x0`.
pub fn interpolate<E: Elem>(
    x0: &Tensor<E>,
    eps: &Tensor<E>,
    t: f64,
) -> Result<Tensor<E>, DecoderError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DecoderError::TimeOutOfRange(t));
    }
    if x0.shape != eps.shape {
        return Err(DecoderError::Tensor(TensorError::ShapeMismatch {
            expected: x0.shape.clone(),
            got: eps.shape.clone(),
            context: "interpolate",
        }));
    }
    let (tv, om) = (E::from_f64(t), E::from_f64(1.0 - t));
    let data = x0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&a, &b)| om * b + tv * a)
        .collect();
    Ok(Tensor {
        shape: x0.shape.clone(),
        data,
    })
}

/// Decoder forward products: predicted velocity plus per-layer block
/// outputs at the noise-token positions.
pub struct DecoderOut {
    pub velocity: Var,
    pub layer_feats: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DecoderModel<E: Elem> {
    pub cfg: DecoderCfg,
    pub params: ParamStore<E>,
}

impl<E: Elem> DecoderModel<E> {
    pub fn init(cfg: DecoderCfg, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let std = 0.02;
        params.insert(
            "noise_in.w",
            Tensor::randn(vec![cfg.token_dim, cfg.width], std, &mut rng),
        );
        params.insert(
            "noise_pos",
            Tensor::randn(vec![cfg.noise_tokens, cfg.width], std, &mut rng),
        );
        params.insert(
            "time_in.w",
            Tensor::randn(vec![cfg.width, cfg.width], std, &mut rng),
        );
        params.insert(
            "head.w",
            Tensor::randn(vec![cfg.width, cfg.token_dim], std, &mut rng),
        );
        if cfg.prompt_vocab > 0 {
            params.insert(
                "prompt_emb",
                Tensor::randn(vec![cfg.prompt_vocab, cfg.width], std, &mut rng),
            );
            params.insert(
                "prompt_pos",
                Tensor::randn(vec![cfg.prompt_ctx, cfg.width], std, &mut rng),
            );
        }
        init_blocks(&mut params, "", cfg.width, cfg.blocks, cfg.ff, &mut rng);
        Self { cfg, params }
    }

    /// Teacher conditioning: its own prompt-embedding table plus
    /// positional rows.
    pub fn prompt_cond_on(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        ids: &[u32],
    ) -> Result<Var, DecoderError> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let emb = tape.gather(bound.var("prompt_emb"), &idx)?;
        let pos = tape.slice_rows(bound.var("prompt_pos"), 0, ids.len())?;
        Ok(tape.add(emb, pos)?)
    }

    /// Bidirectional forward over `[cond..., time, noise...]`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        cond: Var,
        xt: Var,
        t: f64,
    ) -> Result<DecoderOut, DecoderError> {
        let cfg = &self.cfg;
        let cond_len = tape.value(cond).rows_cols().0;
        // time token: sinusoidal encoding projected to model width
        let enc = tape.constant(time_encoding::<E>(t, cfg.width));
        let time_tok = tape.matmul(enc, bound.var("time_in.w"))?;
        // noise tokens: latent reshaped and projected, plus position rows
        let xt2 = tape.reshape(xt, vec![cfg.noise_tokens, cfg.token_dim])?;
        let noise = tape.matmul(xt2, bound.var("noise_in.w"))?;
        let noise = tape.add(noise, bound.var("noise_pos"))?;
        let mut x = tape.concat_rows(&[cond, time_tok, noise])?;

        let n0 = cond_len + 1;
        let n1 = n0 + cfg.noise_tokens;
        let mut layer_feats = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            x = decoder_block(tape, bound, b, x, cfg)?;
            layer_feats.push(tape.slice_rows(x, n0, n1)?);
        }
        let y = tape.layer_norm(x, bound.var("ln_f.g"), bound.var("ln_f.b"), LN_EPS)?;
        let noise_out = tape.slice_rows(y, n0, n1)?;
        let vel2 = tape.matmul(noise_out, bound.var("head.w"))?;
        let velocity = tape.reshape(vel2, vec![cfg.latent_dim()])?;
        Ok(DecoderOut {
            velocity,
            layer_feats,
        })
    }

    /// No-grad convenience: velocity and per-layer noise-token features as
    /// plain tensors.
    pub fn forward_tensors(
        &self,
        cond: &Tensor<E>,
        xt: &Tensor<E>,
        t: f64,
    ) -> Result<(Tensor<E>, Vec<Tensor<E>>), DecoderError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let c = tape.constant(cond.clone());
        let x = tape.constant(xt.clone());
        let out = self.forward_on(&mut tape, &bound, c, x, t)?;
        let vel = tape.value(out.velocity).clone();
        let feats = out
            .layer_feats
            .iter()
            .map(|&f| tape.value(f).clone())
            .collect();
        Ok((vel, feats))
    }

    /// N-step Euler integration from seeded Gaussian noise, clamped into
    /// an image at the end. Deterministic given `seed`.
    pub fn sample_image(
        &self,
        cond: &Tensor<E>,
        n_steps: usize,
        seed: u64,
    ) -> Result<Image, DecoderError> {
        assert!(n_steps >= 1);
        let latent = self.sample_latent(cond, n_steps, seed)?;
        Ok(latent_to_image(&latent))
    }

    /// The raw latent after integration, before clamping.
    pub fn sample_latent(
        &self,
        cond: &Tensor<E>,
        n_steps: usize,
        seed: u64,
    ) -> Result<Tensor<E>, DecoderError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = Tensor::<E>::randn(vec![self.cfg.latent_dim()], 1.0, &mut rng);
        euler_integrate(x, n_steps, |x, t| Ok(self.forward_tensors(cond, x, t)?.0))
    }

    /// The noise draw `sample_latent` starts from, for flow-step replay.
    pub fn sample_noise(&self, seed: u64) -> Tensor<E> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::randn(vec![self.cfg.latent_dim()], 1.0, &mut rng)
    }
}

/// Fixed-step Euler integration of `dx/dt = velocity(x, t)` from t=0 to
/// t=1, with a finiteness check after every step.
pub fn euler_integrate<E: Elem, F>(
    mut x: Tensor<E>,
    n_steps: usize,
    mut velocity: F,
) -> Result<Tensor<E>, DecoderError>
where
    F: FnMut(&Tensor<E>, f64) -> Result<Tensor<E>, DecoderError>,
{
    assert!(n_steps >= 1);
    let h = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let t = k as f64 * h;
        let vel = velocity(&x, t)?;
        for (xi, vi) in x.data.iter_mut().zip(&vel.data) {
            *xi += E::from_f64(h) * *vi;
        }
        if !x.all_finite() {
            return Err(DecoderError::NonFiniteState(k));
        }
    }
    Ok(x)
}

fn decoder_block<E: Elem>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    b: usize,
    x: Var,
    cfg: &DecoderCfg,
) -> Result<Var, DecoderError> {
    let p = format!("blk{b}");
    let ln1 = tape.layer_norm(
        x,
        bound.var(&format!("{p}.ln1.g")),
        bound.var(&format!("{p}.ln1.b")),
        LN_EPS,
    )?;
    let qkv = tape.matmul(ln1, bound.var(&format!("{p}.qkv.w")))?;
    let q = tape.slice_cols(qkv, 0, cfg.width)?;
    let k = tape.slice_cols(qkv, cfg.width, 2 * cfg.width)?;
    let v = tape.slice_cols(qkv, 2 * cfg.width, 3 * cfg.width)?;
    let att = attention(tape, q, k, v, cfg.heads, false)?;
    let att = tape.matmul(att, bound.var(&format!("{p}.proj.w")))?;
    let x = tape.add(x, att)?;
    let ln2 = tape.layer_norm(
        x,
        bound.var(&format!("{p}.ln2.g")),
        bound.var(&format!("{p}.ln2.b")),
        LN_EPS,
    )?;
    let h1 = tape.matmul(ln2, bound.var(&format!("{p}.ff.w1")))?;
    let h1 = tape.tanh(h1)?;
    let h2 = tape.matmul(h1, bound.var(&format!("{p}.ff.w2")))?;
    Ok(tape.add(x, h2)?)
}

fn time_encoding<E: Elem>(t: f64, width: usize) -> Tensor<E> {
    let half = width / 2;
    let mut data = vec![E::zero(); width];
    for i in 0..half {
        let omega = 1000f64.powf(i as f64 / (half.max(2) - 1) as f64);
        data[2 * i] = E::from_f64((t * omega).sin());
        data[2 * i + 1] = E::from_f64((t * omega).cos());
    }
    Tensor {
        shape: vec![1, width],
        data,
    }
}

/// Clamp a latent into [0,1] pixels.
pub fn latent_to_image<E: Elem>(latent: &Tensor<E>) -> Image {
    let pixels = latent
        .data
        .iter()
        .map(|v| v.to_f64().clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(pixels)
}

pub fn image_to_latent<E: Elem>(img: &Image) -> Tensor<E> {
    Tensor {
        shape: vec![IMG_DIM],
        data: img.pixels.iter().map(|&p| E::from_f64(p as f64)).collect(),
    }
}

/// Mean squared error between the predicted velocity and `x0 - eps`.
pub fn diffusion_loss<E: Elem>(
    tape: &mut Tape<E>,
    velocity: Var,
    batch: &FlowBatch<E>,
) -> Result<Var, DecoderError> {
    let target = batch.velocity_target();
    Ok(tape.mse(velocity, &target)?)
}

/// Row-wise softmax feature map used by the distillation and image-KL
/// objectives.
pub fn feature_map<E: Elem>(feats: &Tensor<E>) -> Tensor<E> {
    let (rows, cols) = feats.rows_cols();
    let mut data = feats.data.clone();
    for i in 0..rows {
        crate::numerics::softmax_row_raw(&mut data[i * cols..(i + 1) * cols]);
    }
    Tensor {
        shape: feats.shape.clone(),
        data,
    }
}

fn row_entropy<E: Elem>(probs: &Tensor<E>) -> Vec<f64> {
    let (rows, cols) = probs.rows_cols();
    (0..rows)
        .map(|i| {
            -probs.data[i * cols..(i + 1) * cols]
                .iter()
                .map(|p| {
                    let p = p.to_f64();
                    if p > 0.0 {
                        p * p.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .collect()
}

/// Per-position KL(softmax(teacher) || softmax(student)), averaged over
/// positions and summed over the selected layers. Teacher features are
/// constants and carry no gradient.
pub fn distill_loss<E: Elem>(
    tape: &mut Tape<E>,
    student_feats: &[Var],
    teacher_feats: &[Tensor<E>],
) -> Result<Var, DecoderError> {
    if student_feats.len() != teacher_feats.len() {
        return Err(DecoderError::Tensor(TensorError::Invalid(format!(
            "distill layer count mismatch: {} vs {}",
            student_feats.len(),
            teacher_feats.len()
        ))));
    }
    let mut total: Option<Var> = None;
    for (&s, t) in student_feats.iter().zip(teacher_feats) {
        if tape.shape(s) != t.shape.as_slice() {
            return Err(DecoderError::Tensor(TensorError::ShapeMismatch {
                expected: tape.shape(s).to_vec(),
                got: t.shape.clone(),
                context: "distill_loss",
            }));
        }
        let probs = feature_map(t);
        let mean_entropy =
            row_entropy(&probs).iter().sum::<f64>() / probs.rows_cols().0 as f64;
        let ce = tape.cross_entropy_logits(s, &probs)?;
        let mean_ce = tape.mean(ce)?;
        let kl = tape.add_scalar(mean_ce, -mean_entropy)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, kl)?,
            None => kl,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// The two-block bidirectional bridge from policy hidden states into the
/// decoder's conditioning space.
#[derive(Debug, Clone)]
pub struct Connector<E: Elem> {
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
    pub params: ParamStore<E>,
}

impl<E: Elem> Connector<E> {
    pub fn init(width: usize, heads: usize, ff: usize, seed: u64) -> Self {
        let blocks = 2;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_blocks(&mut params, "", width, blocks, ff, &mut rng);
        Self {
            width,
            blocks,
            heads,
            ff,
            params,
        }
    }

    /// Same-length mapping of policy states into condition tokens.
    pub fn forward_on(
        &self,
        tape: &mut Tape<E>,
        bound: &BoundParams,
        states: Var,
    ) -> Result<Var, DecoderError> {
        if tape.value(states).rows_cols().0 == 0 {
            return Err(DecoderError::EmptyInput);
        }
        Ok(blocks_forward(
            tape,
            bound,
            "",
            states,
            self.blocks,
            self.heads,
            self.width,
            false,
        )?)
    }

    pub fn forward_tensor(&self, states: &Tensor<E>) -> Result<Tensor<E>, DecoderError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let s = tape.constant(states.clone());
        let out = self.forward_on(&mut tape, &bound, s)?;
        Ok(tape.value(out).clone())
    }
}
