//! The four training stages.
//!
//! Every stage draws its randomness through stateless seed derivation
//! keyed on (run seed, stream, step), accumulates per-sample gradients in
//! a fixed order, and checkpoints complete state including optimizer
//! moments, so an interrupted run resumes byte-for-byte.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::concept_world::{
    gen_dataset, parse_prompt, render, Concept, FrozenEmbedder, Split, Task, TaskMode,
};
use crate::gen_decoder::{
    diffusion_loss, distill_loss, image_to_latent, Connector, DecoderCfg, DecoderModel,
    FlowBatch,
};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::policy_lm::{LmConfig, PolicyModel, Vocab};
use crate::rewards::consistency_reward;
use crate::rgpo::{
    accumulate_grads, cosine_lr_scale, derive_seed, group_gradients, prepare_ref_data, rollout,
    zeros_like, Adam, Models, StepMetrics,
};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use super::{
    prompt_for_task, target_completion, MetricsWriter, PipelineError, TrainConfig,
};

pub const CONNECTOR_WIDTH: usize = 64;
pub const CONNECTOR_HEADS: usize = 4;
pub const CONNECTOR_FF: usize = 256;

fn teacher_arch() -> DecoderCfg {
    DecoderCfg {
        prompt_vocab: Vocab::new().size(),
        prompt_ctx: 32,
        ..DecoderCfg::default()
    }
}

fn meta(cfg: &TrainConfig, stage: u32, step: u64, opt_step: u64) -> CheckpointMeta {
    CheckpointMeta {
        version: super::checkpoint::CKPT_VERSION,
        stage,
        step,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        opt_step,
    }
}

fn expect_stage(ckpt: &Checkpoint, stage: u32) -> Result<(), PipelineError> {
    if ckpt.meta.stage != stage {
        return Err(PipelineError::WrongStage {
            got: ckpt.meta.stage,
            expected: stage,
        });
    }
    Ok(())
}

fn pack_models(ckpt: &mut Checkpoint, models: &Models<f32>, teacher: &DecoderModel<f32>) {
    ckpt.insert_store("policy", &models.policy.params);
    ckpt.insert_store("connector", &models.connector.params);
    ckpt.insert_store("decoder", &models.decoder.params);
    ckpt.insert_store("teacher", &teacher.params);
}

/// Reconstruct the full stack from a stage-1/2/3 checkpoint, validating
/// every tensor shape against the live architecture.
pub fn load_models(ckpt: &Checkpoint) -> Result<(Models<f32>, DecoderModel<f32>), PipelineError> {
    let lm = LmConfig::default();
    let policy_t = PolicyModel::<f32>::init(lm, 0);
    let conn_t = Connector::<f32>::init(CONNECTOR_WIDTH, CONNECTOR_HEADS, CONNECTOR_FF, 0);
    let dec_t = DecoderModel::<f32>::init(DecoderCfg::default(), 0);
    let teach_t = DecoderModel::<f32>::init(teacher_arch(), 0);
    let models = Models {
        policy: PolicyModel::from_params(lm, ckpt.extract_store("policy", &policy_t.params)?),
        connector: Connector {
            params: ckpt.extract_store("connector", &conn_t.params)?,
            ..conn_t
        },
        decoder: DecoderModel {
            cfg: dec_t.cfg,
            params: ckpt.extract_store("decoder", &dec_t.params)?,
        },
    };
    let teacher = DecoderModel {
        cfg: teach_t.cfg,
        params: ckpt.extract_store("teacher", &teach_t.params)?,
    };
    Ok((models, teacher))
}

pub fn load_teacher(ckpt: &Checkpoint) -> Result<DecoderModel<f32>, PipelineError> {
    let t = DecoderModel::<f32>::init(teacher_arch(), 0);
    Ok(DecoderModel {
        cfg: t.cfg,
        params: ckpt.extract_store("teacher", &t.params)?,
    })
}

fn save_opt(ckpt: &mut Checkpoint, prefix: &str, opt: &Adam<f32>) {
    ckpt.insert_store(&format!("opt.{prefix}.m"), &opt.m);
    ckpt.insert_store(&format!("opt.{prefix}.v"), &opt.v);
}

fn load_opt(
    ckpt: &Checkpoint,
    prefix: &str,
    lr: f64,
    params: &ParamStore<f32>,
) -> Result<Adam<f32>, PipelineError> {
    let mut opt = Adam::new(lr, params);
    opt.m = ckpt.extract_store(&format!("opt.{prefix}.m"), &opt.m)?;
    opt.v = ckpt.extract_store(&format!("opt.{prefix}.v"), &opt.v)?;
    opt.t = ckpt.meta.opt_step;
    Ok(opt)
}

fn check_hash(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<(), PipelineError> {
    if ckpt.meta.config_hash != cfg.hash() {
        return Err(PipelineError::CorruptCheckpoint(
            "resume checkpoint was written under a different config".into(),
        ));
    }
    Ok(())
}

fn add_scaled(acc: &mut ParamStore<f32>, src: &ParamStore<f32>, s: f64) {
    let s = s as f32;
    for (name, dst) in acc.iter_mut() {
        for (d, &g) in dst.data.iter_mut().zip(&src.get(name).data) {
            *d += s * g;
        }
    }
}

/// Rescale a set of gradient stores so their joint L2 norm is at most
/// `max_norm`. Norm accumulation runs in f64 for a thread-independent
/// result.
fn clip_global_norm(stores: &mut [&mut ParamStore<f32>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    for s in stores.iter() {
        for (_, t) in s.iter() {
            for &g in &t.data {
                sq += (g as f64) * (g as f64);
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for s in stores.iter_mut() {
            for (_, t) in s.iter_mut() {
                for g in t.data.iter_mut() {
                    *g *= scale;
                }
            }
        }
    }
}

fn teacher_cond(teacher: &DecoderModel<f32>, ids: &[u32]) -> Result<Tensor<f32>, PipelineError> {
    let mut tape = Tape::new();
    let bound = teacher.params.bind(&mut tape);
    let cond = teacher.prompt_cond_on(&mut tape, &bound, ids)?;
    Ok(tape.value(cond).clone())
}

/// Mean embedding consistency of teacher samples over all concepts, with
/// sampling seeds fixed independently of the training step.
pub fn teacher_consistency(teacher: &DecoderModel<f32>) -> Result<f64, PipelineError> {
    let vocab = Vocab::new();
    let embedder = FrozenEmbedder::new();
    let concepts = Concept::all();
    let scores = concepts
        .par_iter()
        .enumerate()
        .map(|(i, c)| -> Result<f64, PipelineError> {
            let ids = vocab.tokenize(&c.prompt())?;
            let cond = teacher_cond(teacher, &ids)?;
            let img = teacher.sample_image(&cond, 8, derive_seed(0xEAA7, 0, i as u64))?;
            Ok(consistency_reward(&embedder, &img, &c.prompt())?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Stage0Report {
    pub steps_run: u64,
    pub final_consistency: f64,
    pub losses: Vec<f64>,
}

/// Train the prompt-conditioned teacher decoder with diffusion loss until
/// its samples hit the consistency gate.
pub fn stage0_teacher(
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Stage0Report, PipelineError> {
    let sc = &cfg.stage0;
    let vocab = Vocab::new();
    let concepts = Concept::all();
    let prompts: Vec<Vec<u32>> = concepts
        .iter()
        .map(|c| vocab.tokenize(&c.prompt()))
        .collect::<Result<_, _>>()?;
    let latents: Vec<Tensor<f32>> = concepts.iter().map(|c| image_to_latent(&render(c))).collect();

    let mut teacher;
    let mut opt;
    let mut start = 0u64;
    if let Some(rp) = resume {
        let ckpt = load_checkpoint(rp)?;
        expect_stage(&ckpt, 0)?;
        check_hash(&ckpt, cfg)?;
        teacher = load_teacher(&ckpt)?;
        opt = load_opt(&ckpt, "teacher", sc.lr, &teacher.params)?;
        start = ckpt.meta.step;
    } else {
        teacher = DecoderModel::init(teacher_arch(), derive_seed(cfg.seed, 10, 0));
        opt = Adam::new(sc.lr, &teacher.params);
    }

    let mut losses = Vec::new();
    let mut consistency;
    let mut steps_run = start;
    for step in start..sc.steps {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 11, step));
        let batch: Vec<usize> = (0..sc.batch).map(|_| rng.gen_range(0..concepts.len())).collect();
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(j, &ci)| -> Result<_, PipelineError> {
                let sidx = step * sc.batch as u64 + j as u64;
                let mut srng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 12, sidx));
                let t: f64 = srng.gen();
                let eps = teacher.sample_noise(derive_seed(cfg.seed, 13, sidx));
                let fb = FlowBatch::new(latents[ci].clone(), eps, t)?;
                let mut tape = Tape::new();
                let bound = teacher.params.bind(&mut tape);
                let cond = teacher.prompt_cond_on(&mut tape, &bound, &prompts[ci])?;
                let xt = tape.constant(fb.xt.clone());
                let dec = teacher.forward_on(&mut tape, &bound, cond, xt, t)?;
                let loss = diffusion_loss(&mut tape, dec.velocity, &fb)?;
                let lv = tape.value(loss).scalar_value();
                tape.backward(loss)?;
                Ok((tape, bound, lv))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut grads = zeros_like(&teacher.params);
        let mut loss_sum = 0.0;
        for (tape, bound, lv) in &results {
            accumulate_grads(&mut grads, tape, bound, 1.0 / sc.batch as f64);
            loss_sum += lv;
        }
        drop(results);
        let loss = loss_sum / sc.batch as f64;
        if !loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss(step));
        }
        losses.push(loss);
        opt.step(&mut teacher.params, &grads, 1.0);
        steps_run = step + 1;

        if sc.save_every > 0 && steps_run % sc.save_every == 0 {
            let mut ckpt = Checkpoint::new(meta(cfg, 0, steps_run, opt.t));
            ckpt.insert_store("teacher", &teacher.params);
            save_opt(&mut ckpt, "teacher", &opt);
            save_checkpoint(&ckpt, out)?;
        }
        if steps_run % sc.check_every == 0 {
            consistency = teacher_consistency(&teacher)?;
            if consistency >= sc.gate {
                break;
            }
        }
    }
    consistency = teacher_consistency(&teacher)?;
    if consistency < sc.gate {
        return Err(PipelineError::GateNotReached {
            gate: sc.gate,
            got: consistency,
            steps: steps_run,
        });
    }
    let mut ckpt = Checkpoint::new(meta(cfg, 0, steps_run, opt.t));
    ckpt.insert_store("teacher", &teacher.params);
    save_opt(&mut ckpt, "teacher", &opt);
    save_checkpoint(&ckpt, out)?;
    Ok(Stage0Report {
        steps_run,
        final_consistency: consistency,
        losses,
    })
}

#[derive(Debug, Clone)]
pub struct Stage1Report {
    pub losses: Vec<f64>,
    pub distill_first: f64,
    pub distill_last: f64,
}

/// Align the connector: policy and decoder frozen, loss is diffusion plus
/// weighted feature distillation from the teacher pathway.
pub fn stage1_pretrain(
    cfg: &TrainConfig,
    teacher_ckpt: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Stage1Report, PipelineError> {
    let sc = &cfg.stage1;
    let vocab = Vocab::new();
    let concepts = Concept::all();

    let tckpt = load_checkpoint(teacher_ckpt)?;
    expect_stage(&tckpt, 0)?;
    let teacher = load_teacher(&tckpt)?;

    let mut models;
    let mut opt;
    let mut start = 0u64;
    if let Some(rp) = resume {
        let ckpt = load_checkpoint(rp)?;
        expect_stage(&ckpt, 1)?;
        check_hash(&ckpt, cfg)?;
        let (m, _) = load_models(&ckpt)?;
        models = m;
        opt = load_opt(&ckpt, "connector", sc.lr, &models.connector.params)?;
        start = ckpt.meta.step;
    } else {
        // student decoder: teacher weights without the prompt table
        let dec_t = DecoderModel::<f32>::init(DecoderCfg::default(), 0);
        let mut dec_params = ParamStore::new();
        for (name, _) in dec_t.params.iter() {
            dec_params.insert(name, teacher.params.get(name).clone());
        }
        models = Models {
            policy: PolicyModel::init(LmConfig::default(), derive_seed(cfg.seed, 20, 0)),
            connector: Connector::init(
                CONNECTOR_WIDTH,
                CONNECTOR_HEADS,
                CONNECTOR_FF,
                derive_seed(cfg.seed, 21, 0),
            ),
            decoder: DecoderModel {
                cfg: dec_t.cfg,
                params: dec_params,
            },
        };
        opt = Adam::new(sc.lr, &models.connector.params);
    }
    let policy_before = models.policy.params.clone();
    let decoder_before = models.decoder.params.clone();

    // frozen per-concept caches: caption hidden states, teacher
    // conditions, target latents
    let caches = concepts
        .par_iter()
        .map(|c| -> Result<_, PipelineError> {
            let caption = format!("<bos>{}<img>", c.prompt());
            let hidden = models.policy.hidden_states(&vocab.tokenize(&caption)?)?;
            let tcond = teacher_cond(&teacher, &vocab.tokenize(&c.prompt())?)?;
            let x0 = image_to_latent::<f32>(&render(c));
            Ok((hidden, tcond, x0))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut losses = Vec::new();
    let mut distill_first = f64::NAN;
    let mut distill_last = f64::NAN;
    for step in start..sc.steps {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 22, step));
        let batch: Vec<usize> = (0..sc.batch).map(|_| rng.gen_range(0..concepts.len())).collect();
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(j, &ci)| -> Result<_, PipelineError> {
                let (hidden, tcond, x0) = &caches[ci];
                let sidx = step * sc.batch as u64 + j as u64;
                let mut srng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 23, sidx));
                let t: f64 = srng.gen();
                let eps = models.decoder.sample_noise(derive_seed(cfg.seed, 24, sidx));
                let fb = FlowBatch::new(x0.clone(), eps, t)?;
                let (_, tfeats) = teacher.forward_tensors(tcond, &fb.xt, t)?;

                let mut tape = Tape::new();
                let bc = models.connector.params.bind(&mut tape);
                let bd = models.decoder.params.bind(&mut tape);
                let h = tape.constant(hidden.clone());
                let cond = models.connector.forward_on(&mut tape, &bc, h)?;
                let xt = tape.constant(fb.xt.clone());
                let dec = models.decoder.forward_on(&mut tape, &bd, cond, xt, t)?;
                let dl = diffusion_loss(&mut tape, dec.velocity, &fb)?;
                let dist = distill_loss(&mut tape, &dec.layer_feats, &tfeats)?;
                let dist_v = tape.value(dist).scalar_value() as f64;
                let wdist = tape.mul_scalar(dist, sc.distill_weight)?;
                let loss = tape.add(dl, wdist)?;
                let lv = tape.value(loss).scalar_value() as f64;
                tape.backward(loss)?;
                Ok((tape, bc, lv, dist_v))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut grads = zeros_like(&models.connector.params);
        let mut loss_sum = 0.0;
        let mut dist_sum = 0.0;
        for (tape, bc, lv, dv) in &results {
            accumulate_grads(&mut grads, tape, bc, 1.0 / sc.batch as f64);
            loss_sum += lv;
            dist_sum += dv;
        }
        drop(results);
        let loss = loss_sum / sc.batch as f64;
        if !loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss(step));
        }
        if distill_first.is_nan() {
            distill_first = dist_sum / sc.batch as f64;
        }
        distill_last = dist_sum / sc.batch as f64;
        losses.push(loss);
        opt.step(&mut models.connector.params, &grads, 1.0);

        if sc.save_every > 0 && (step + 1) % sc.save_every == 0 {
            let mut ckpt = Checkpoint::new(meta(cfg, 1, step + 1, opt.t));
            pack_models(&mut ckpt, &models, &teacher);
            save_opt(&mut ckpt, "connector", &opt);
            save_checkpoint(&ckpt, out)?;
        }
    }

    let mut drift = models.policy.params.diff_names(&policy_before);
    drift.extend(models.decoder.params.diff_names(&decoder_before));
    if !drift.is_empty() {
        return Err(PipelineError::FrozenDrift(drift));
    }

    let mut ckpt = Checkpoint::new(meta(cfg, 1, sc.steps, opt.t));
    pack_models(&mut ckpt, &models, &teacher);
    save_opt(&mut ckpt, "connector", &opt);
    save_checkpoint(&ckpt, out)?;
    Ok(Stage1Report {
        losses,
        distill_first,
        distill_last,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Report {
    pub losses: Vec<f64>,
    pub text_losses: Vec<f64>,
    pub diffusion_losses: Vec<f64>,
}

/// Supervised fine-tuning on chain-of-thought targets: policy gets
/// next-token cross-entropy, connector and decoder get diffusion loss on
/// teacher-forced hidden states.
pub fn stage2_sft(
    cfg: &TrainConfig,
    prev: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<Stage2Report, PipelineError> {
    let sc = &cfg.stage2;
    let vocab = Vocab::new();
    let tasks: Vec<Task> = gen_dataset(cfg.data_seed, &cfg.counts)?
        .into_iter()
        .filter(|t| t.split == Split::Train)
        .collect();

    let prev_ckpt = load_checkpoint(prev)?;
    expect_stage(&prev_ckpt, 1)?;
    let (loaded, teacher) = load_models(&prev_ckpt)?;

    let mut models;
    let mut opt_p;
    let mut opt_c;
    let mut opt_d;
    let mut start = 0u64;
    if let Some(rp) = resume {
        let ckpt = load_checkpoint(rp)?;
        expect_stage(&ckpt, 2)?;
        check_hash(&ckpt, cfg)?;
        let (m, _) = load_models(&ckpt)?;
        models = m;
        opt_p = load_opt(&ckpt, "policy", sc.lr, &models.policy.params)?;
        opt_c = load_opt(&ckpt, "connector", sc.lr, &models.connector.params)?;
        opt_d = load_opt(&ckpt, "decoder", sc.lr, &models.decoder.params)?;
        start = ckpt.meta.step;
    } else {
        models = loaded;
        opt_p = Adam::new(sc.lr, &models.policy.params);
        opt_c = Adam::new(sc.lr, &models.connector.params);
        opt_d = Adam::new(sc.lr, &models.decoder.params);
    }

    // fixed per-task encodings
    struct Sample {
        prompt_ids: Vec<u32>,
        target_ids: Vec<u32>,
        x0: Tensor<f32>,
    }
    let samples = tasks
        .iter()
        .map(|t| -> Result<Sample, PipelineError> {
            let prompt_ids = vocab.tokenize(&prompt_for_task(t))?;
            let target_ids = vocab.tokenize(&target_completion(t))?;
            let total = prompt_ids.len() + target_ids.len();
            if total > models.policy.cfg.ctx {
                return Err(PipelineError::Policy(
                    crate::policy_lm::PolicyError::ContextOverflow {
                        len: total,
                        ctx: models.policy.cfg.ctx,
                    },
                ));
            }
            let x0 = image_to_latent::<f32>(&render(&parse_prompt(&t.gt_prompt)?));
            Ok(Sample {
                prompt_ids,
                target_ids,
                x0,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut losses = Vec::new();
    let mut text_losses = Vec::new();
    let mut diff_losses = Vec::new();
    for step in start..sc.steps {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 40, step));
        let batch: Vec<usize> = (0..sc.batch).map(|_| rng.gen_range(0..samples.len())).collect();
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(j, &si)| -> Result<_, PipelineError> {
                let s = &samples[si];
                let sidx = step * sc.batch as u64 + j as u64;
                let mut srng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 41, sidx));
                let t: f64 = srng.gen();
                let eps = models.decoder.sample_noise(derive_seed(cfg.seed, 42, sidx));
                let fb = FlowBatch::new(s.x0.clone(), eps, t)?;

                let mut full = s.prompt_ids.clone();
                full.extend_from_slice(&s.target_ids);
                let mut tape = Tape::new();
                let binds = models.bind(&mut tape);
                let (logits, hidden) = models.policy.forward_on(&mut tape, &binds.policy, &full)?;

                let mut ce_v = 0.0;
                let mut dl_v = 0.0;
                let mut terms = Vec::new();
                if sc.text_loss {
                    let rows =
                        tape.slice_rows(logits, s.prompt_ids.len() - 1, full.len() - 1)?;
                    let idx: Vec<usize> = s.target_ids.iter().map(|&i| i as usize).collect();
                    let lp = tape.gather_log_softmax(rows, &idx)?;
                    let mlp = tape.mean(lp)?;
                    let ce = tape.mul_scalar(mlp, -1.0)?;
                    ce_v = tape.value(ce).scalar_value();
                    terms.push(ce);
                }
                if sc.diffusion_loss {
                    let cond_h = tape.slice_rows(hidden, s.prompt_ids.len(), full.len())?;
                    let cond = models.connector.forward_on(&mut tape, &binds.connector, cond_h)?;
                    let xt = tape.constant(fb.xt.clone());
                    let dec =
                        models.decoder.forward_on(&mut tape, &binds.decoder, cond, xt, t)?;
                    let dl = diffusion_loss(&mut tape, dec.velocity, &fb)?;
                    dl_v = tape.value(dl).scalar_value();
                    terms.push(dl);
                }
                let mut loss = terms[0];
                for &t2 in &terms[1..] {
                    loss = tape.add(loss, t2)?;
                }
                let lv = tape.value(loss).scalar_value();
                tape.backward(loss)?;
                Ok((tape, binds, lv, ce_v, dl_v))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut gp = zeros_like(&models.policy.params);
        let mut gc = zeros_like(&models.connector.params);
        let mut gd = zeros_like(&models.decoder.params);
        let (mut lsum, mut csum, mut dsum) = (0.0, 0.0, 0.0);
        let w = 1.0 / sc.batch as f64;
        for (tape, binds, lv, cv, dv) in &results {
            accumulate_grads(&mut gp, tape, &binds.policy, w);
            accumulate_grads(&mut gc, tape, &binds.connector, w);
            accumulate_grads(&mut gd, tape, &binds.decoder, w);
            lsum += lv;
            csum += cv;
            dsum += dv;
        }
        drop(results);
        let loss = lsum * w;
        if !loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss(step));
        }
        losses.push(loss);
        text_losses.push(csum * w);
        diff_losses.push(dsum * w);
        if sc.text_loss {
            opt_p.step(&mut models.policy.params, &gp, 1.0);
        }
        if sc.diffusion_loss {
            opt_c.step(&mut models.connector.params, &gc, 1.0);
            opt_d.step(&mut models.decoder.params, &gd, 1.0);
        }

        if sc.save_every > 0 && (step + 1) % sc.save_every == 0 {
            let mut ckpt = Checkpoint::new(meta(cfg, 2, step + 1, opt_p.t));
            pack_models(&mut ckpt, &models, &teacher);
            save_opt(&mut ckpt, "policy", &opt_p);
            save_opt(&mut ckpt, "connector", &opt_c);
            save_opt(&mut ckpt, "decoder", &opt_d);
            save_checkpoint(&ckpt, out)?;
        }
    }

    let mut ckpt = Checkpoint::new(meta(cfg, 2, sc.steps, opt_p.t));
    pack_models(&mut ckpt, &models, &teacher);
    save_opt(&mut ckpt, "policy", &opt_p);
    save_opt(&mut ckpt, "connector", &opt_c);
    save_opt(&mut ckpt, "decoder", &opt_d);
    save_checkpoint(&ckpt, out)?;
    Ok(Stage2Report {
        losses,
        text_losses,
        diffusion_losses: diff_losses,
    })
}

#[derive(Debug, Clone)]
pub struct Stage3Report {
    pub updates_run: u64,
    pub metrics: Vec<StepMetrics>,
}

/// Reinforcement learning: rollout groups, group-relative advantages,
/// clipped surrogate with dual KL regularization against the frozen
/// stage-2 reference stack.
pub fn stage3_rgpo(
    cfg: &TrainConfig,
    prev: &Path,
    out: &Path,
    metrics_path: Option<&Path>,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<Stage3Report, PipelineError> {
    let sc = &cfg.stage3;
    sc.rgpo.validate().map_err(PipelineError::Rgpo)?;
    let vocab = Vocab::new();
    let embedder = FrozenEmbedder::new();
    let tasks: Vec<Task> = gen_dataset(cfg.data_seed, &cfg.counts)?
        .into_iter()
        .filter(|t| t.split == Split::Train && t.mode == TaskMode::Reasoning)
        .collect();

    let prev_ckpt = load_checkpoint(prev)?;
    expect_stage(&prev_ckpt, 2)?;
    let (reference, teacher) = load_models(&prev_ckpt)?;

    let mut models;
    let mut opt_p;
    let mut opt_c;
    let mut opt_d;
    let mut start = 0u64;
    if let Some(rp) = resume {
        let ckpt = load_checkpoint(rp)?;
        expect_stage(&ckpt, 3)?;
        check_hash(&ckpt, cfg)?;
        let (m, _) = load_models(&ckpt)?;
        models = m;
        opt_p = load_opt(&ckpt, "policy", sc.lr, &models.policy.params)?;
        opt_c = load_opt(&ckpt, "connector", sc.lr, &models.connector.params)?;
        opt_d = load_opt(&ckpt, "decoder", sc.lr, &models.decoder.params)?;
        start = ckpt.meta.step;
    } else {
        models = reference.clone();
        opt_p = Adam::new(sc.lr, &models.policy.params);
        opt_c = Adam::new(sc.lr, &models.connector.params);
        opt_d = Adam::new(sc.lr, &models.decoder.params);
    }

    let mut writer = match metrics_path {
        Some(p) => Some(if resume.is_some() {
            MetricsWriter::reopen_truncated(p, start)?
        } else {
            MetricsWriter::create(p)?
        }),
        None => None,
    };

    // early stop point for pause/resume; resumed runs reproduce the
    // uninterrupted trajectory bit for bit
    let until = stop_after.map_or(sc.updates, |s| s.min(sc.updates));
    let mut all_metrics = Vec::new();
    let mut updates_run = start;
    for update in start..until {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, 50, update));
        let picked: Vec<usize> = (0..sc.tasks_per_update)
            .map(|_| rng.gen_range(0..tasks.len()))
            .collect();
        let per_task = picked
            .par_iter()
            .enumerate()
            .map(|(k, &ti)| -> Result<_, PipelineError> {
                let task = &tasks[ti];
                let seed_t = derive_seed(cfg.seed, 51, update * 10_000 + k as u64);
                let prompt_ids = vocab.tokenize(&prompt_for_task(task))?;
                let group = rollout(
                    &models,
                    &embedder,
                    &vocab,
                    &prompt_ids,
                    &task.gt_prompt,
                    &sc.rgpo,
                    seed_t,
                )?;
                let refd = prepare_ref_data(&reference, &group, seed_t)?;
                Ok((group, refd))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let nt = per_task.len() as f64;
        let mut m = StepMetrics {
            step: update,
            loss: 0.0,
            reward_mean: 0.0,
            reward_format_mean: 0.0,
            reward_consistency_mean: 0.0,
            completion_len_mean: 0.0,
            kl_text: 0.0,
            kl_image: 0.0,
        };
        let mut n_outputs = 0usize;
        for (group, _) in &per_task {
            for o in &group.outputs {
                m.reward_mean += o.reward.total;
                m.reward_format_mean += o.reward.format;
                m.reward_consistency_mean += o.reward.consistency;
                m.completion_len_mean += o.completion.ids.len() as f64;
                n_outputs += 1;
            }
        }
        let inv = 1.0 / n_outputs.max(1) as f64;
        m.reward_mean *= inv;
        m.reward_format_mean *= inv;
        m.reward_consistency_mean *= inv;
        m.completion_len_mean *= inv;

        let lr_scale = if sc.cosine_schedule {
            cosine_lr_scale(update, sc.updates)
        } else {
            1.0
        };
        // several clipped optimizer steps on the same rollout batch;
        // metrics record the first, fully on-policy pass
        for inner in 0..sc.rgpo.updates_per_batch {
            let per_task_grads = per_task
                .par_iter()
                .map(|(group, refd)| group_gradients(&models, group, refd, &sc.rgpo))
                .collect::<Result<Vec<_>, _>>()?;
            let mut gp = zeros_like(&models.policy.params);
            let mut gc = zeros_like(&models.connector.params);
            let mut gd = zeros_like(&models.decoder.params);
            let mut loss = 0.0;
            for grads in &per_task_grads {
                add_scaled(&mut gp, &grads.policy, 1.0 / nt);
                add_scaled(&mut gc, &grads.connector, 1.0 / nt);
                add_scaled(&mut gd, &grads.decoder, 1.0 / nt);
                loss += grads.loss / nt;
                if inner == 0 {
                    m.kl_text += grads.parts.kl_text / nt;
                    m.kl_image += grads.parts.kl_image / nt;
                }
            }
            if inner == 0 {
                m.loss = loss;
            }
            if !loss.is_finite() {
                return Err(PipelineError::NonFiniteLoss(update));
            }
            clip_global_norm(&mut [&mut gp, &mut gc, &mut gd], sc.grad_clip);
            opt_p.step(&mut models.policy.params, &gp, lr_scale);
            if sc.train_connector {
                opt_c.step(&mut models.connector.params, &gc, lr_scale);
            }
            if sc.train_decoder {
                opt_d.step(&mut models.decoder.params, &gd, lr_scale);
            }
        }
        if let Some(w) = writer.as_mut() {
            w.append(&m)?;
        }
        all_metrics.push(m);
        updates_run = update + 1;

        if sc.checkpoint_every > 0 && updates_run % sc.checkpoint_every == 0 {
            let mut ckpt = Checkpoint::new(meta(cfg, 3, updates_run, opt_p.t));
            pack_models(&mut ckpt, &models, &teacher);
            save_opt(&mut ckpt, "policy", &opt_p);
            save_opt(&mut ckpt, "connector", &opt_c);
            save_opt(&mut ckpt, "decoder", &opt_d);
            save_checkpoint(&ckpt, out)?;
        }
    }

    let mut ckpt = Checkpoint::new(meta(cfg, 3, updates_run, opt_p.t));
    pack_models(&mut ckpt, &models, &teacher);
    save_opt(&mut ckpt, "policy", &opt_p);
    save_opt(&mut ckpt, "connector", &opt_c);
    save_opt(&mut ckpt, "decoder", &opt_d);
    save_checkpoint(&ckpt, out)?;
    Ok(Stage3Report {
        updates_run,
        metrics: all_metrics,
    })
}
