//! Finite-difference verification of every tape kernel and of the
//! composite training losses, all in f64 at reduced widths.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use cogen_core::concept_world::FrozenEmbedder;
use cogen_core::gen_decoder::{
    diffusion_loss, distill_loss, Connector, DecoderCfg, DecoderModel, FlowBatch,
};
use cogen_core::numerics::{
    attention, check_gradients, finite_diff_grad, Tape, Tensor, Var,
};
use cogen_core::policy_lm::{LmConfig, PolicyModel, Vocab};
use cogen_core::rgpo::{
    derive_seed, prepare_ref_data, rgpo_loss_on, rollout, Models, RgpoConfig,
};

const TOL: f64 = 1e-5;

fn randn(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn positive(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut t = randn(shape, seed);
    for v in t.data.iter_mut() {
        *v = v.abs() + 0.5;
    }
    t
}

fn check<F>(name: &str, x: &Tensor<f64>, f: F)
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, cogen_core::TensorError>,
{
    let report = check_gradients(f, x, TOL).unwrap();
    assert!(
        report.pass,
        "{name}: max rel err {:.3e}, {} failing coords",
        report.max_rel_err,
        report.failing().len()
    );
}

#[test]
fn elementwise_kernels() {
    let x = randn(vec![3, 4], 1);
    let y = randn(vec![3, 4], 2);
    check("add", &x, |t, v| {
        let c = t.constant(y.clone());
        let s = t.add(v, c)?;
        t.sum(s)
    });
    check("sub", &x, |t, v| {
        let c = t.constant(y.clone());
        let s = t.sub(v, c)?;
        t.sum(s)
    });
    check("mul", &x, |t, v| {
        let c = t.constant(y.clone());
        let s = t.mul(v, c)?;
        t.sum(s)
    });
    check("add_scalar", &x, |t, v| {
        let s = t.add_scalar(v, 2.5)?;
        t.sum(s)
    });
    check("mul_scalar", &x, |t, v| {
        let s = t.mul_scalar(v, -1.7)?;
        t.sum(s)
    });
    check("exp", &x, |t, v| {
        let s = t.exp(v)?;
        t.sum(s)
    });
    check("tanh", &x, |t, v| {
        let s = t.tanh(v)?;
        t.sum(s)
    });
    let p = positive(vec![3, 4], 3);
    check("log", &p, |t, v| {
        let s = t.log(v)?;
        t.sum(s)
    });
}

#[test]
fn shape_kernels() {
    let x = randn(vec![4, 6], 4);
    check("transpose", &x, |t, v| {
        let y = t.transpose(v)?;
        let e = t.exp(y)?;
        t.sum(e)
    });
    check("reshape", &x, |t, v| {
        let y = t.reshape(v, vec![6, 4])?;
        let e = t.tanh(y)?;
        t.sum(e)
    });
    check("slice_rows", &x, |t, v| {
        let y = t.slice_rows(v, 1, 3)?;
        let e = t.exp(y)?;
        t.sum(e)
    });
    check("slice_cols", &x, |t, v| {
        let y = t.slice_cols(v, 2, 5)?;
        let e = t.exp(y)?;
        t.sum(e)
    });
    let other = randn(vec![2, 6], 5);
    check("concat_rows", &x, |t, v| {
        let c = t.constant(other.clone());
        let y = t.concat_rows(&[v, c])?;
        let e = t.tanh(y)?;
        t.sum(e)
    });
    let oc = randn(vec![4, 3], 6);
    check("concat_cols", &x, |t, v| {
        let c = t.constant(oc.clone());
        let y = t.concat_cols(&[v, c])?;
        let e = t.tanh(y)?;
        t.sum(e)
    });
    check("gather", &x, |t, v| {
        let y = t.gather(v, &[2, 0, 2, 3])?;
        let e = t.exp(y)?;
        t.sum(e)
    });
}

#[test]
fn matmul_and_reductions() {
    let x = randn(vec![3, 5], 7);
    let w = randn(vec![5, 4], 8);
    check("matmul_lhs", &x, |t, v| {
        let c = t.constant(w.clone());
        let y = t.matmul(v, c)?;
        let e = t.tanh(y)?;
        t.sum(e)
    });
    check("matmul_rhs", &w, |t, v| {
        let c = t.constant(x.clone());
        let y = t.matmul(c, v)?;
        let e = t.tanh(y)?;
        t.sum(e)
    });
    check("sum", &x, |t, v| t.sum(v));
    check("mean", &x, |t, v| {
        let e = t.exp(v)?;
        t.mean(e)
    });
}

#[test]
fn nonsmooth_kernels_away_from_kinks() {
    // values placed away from clamp edges and min ties so central
    // differences stay on one branch
    let x = Tensor::from_f64_slice(vec![2, 3], &[-2.0, -0.4, 0.1, 0.6, 1.8, 0.9]).unwrap();
    check("clamp", &x, |t, v| {
        let y = t.clamp(v, -1.0, 1.0)?;
        let e = t.exp(y)?;
        t.sum(e)
    });
    let other = Tensor::from_f64_slice(vec![2, 3], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
    check("min_elem", &x, |t, v| {
        let c = t.constant(other.clone());
        let y = t.min_elem(v, c)?;
        let e = t.exp(y)?;
        t.sum(e)
    });
}

#[test]
fn softmax_family() {
    let x = randn(vec![3, 5], 9);
    check("softmax", &x, |t, v| {
        let y = t.softmax(v)?;
        let e = t.exp(y)?;
        t.sum(e)
    });
    let sq = randn(vec![4, 4], 10);
    check("causal_softmax", &sq, |t, v| {
        let y = t.causal_softmax(v)?;
        let e = t.exp(y)?;
        t.sum(e)
    });
    check("gather_log_softmax", &x, |t, v| {
        let lp = t.gather_log_softmax(v, &[1, 4, 0])?;
        t.mean(lp)
    });
    let probs = {
        let mut p = positive(vec![3, 5], 11);
        let (rows, cols) = p.rows_cols();
        for r in 0..rows {
            let s: f64 = p.data[r * cols..(r + 1) * cols].iter().sum();
            for v in &mut p.data[r * cols..(r + 1) * cols] {
                *v /= s;
            }
        }
        p
    };
    check("cross_entropy_logits", &x, |t, v| {
        let ce = t.cross_entropy_logits(v, &probs)?;
        t.mean(ce)
    });
}

#[test]
fn normalization_and_similarity() {
    let x = randn(vec![3, 6], 12);
    let g = positive(vec![6], 13);
    let b = randn(vec![6], 14);
    check("layer_norm_x", &x, |t, v| {
        let gv = t.constant(g.clone());
        let bv = t.constant(b.clone());
        let y = t.layer_norm(v, gv, bv, 1e-5)?;
        let e = t.tanh(y)?;
        t.sum(e)
    });
    check("layer_norm_gain", &g, |t, v| {
        let xv = t.constant(x.clone());
        let bv = t.constant(b.clone());
        let y = t.layer_norm(xv, v, bv, 1e-5)?;
        let e = t.tanh(y)?;
        t.sum(e)
    });
    let a = randn(vec![5], 15);
    let c = randn(vec![5], 16);
    check("cosine_sim", &a, |t, v| {
        let cv = t.constant(c.clone());
        t.cosine_sim(v, cv)
    });
    let target = randn(vec![3, 6], 17);
    check("mse", &x, |t, v| t.mse(v, &target));
}

#[test]
fn attention_kernel() {
    let q = randn(vec![4, 6], 18);
    let k = randn(vec![4, 6], 19);
    let v0 = randn(vec![4, 6], 20);
    for causal in [false, true] {
        check("attention_q", &q, |t, vr| {
            let kv = t.constant(k.clone());
            let vv = t.constant(v0.clone());
            let y = attention(t, vr, kv, vv, 2, causal)?;
            let e = t.tanh(y)?;
            t.sum(e)
        });
        check("attention_k", &k, |t, vr| {
            let qv = t.constant(q.clone());
            let vv = t.constant(v0.clone());
            let y = attention(t, qv, vr, vv, 2, causal)?;
            let e = t.tanh(y)?;
            t.sum(e)
        });
        check("attention_v", &v0, |t, vr| {
            let qv = t.constant(q.clone());
            let kv = t.constant(k.clone());
            let y = attention(t, qv, kv, vr, 2, causal)?;
            let e = t.tanh(y)?;
            t.sum(e)
        });
    }
}

fn tiny_decoder() -> DecoderModel<f64> {
    let dc = DecoderCfg {
        width: 8,
        heads: 2,
        noise_tokens: 4,
        token_dim: 48,
        ..DecoderCfg::tiny()
    };
    DecoderModel::init(dc, 31)
}

#[test]
fn diffusion_loss_gradient_through_decoder() {
    let dec = tiny_decoder();
    let x0 = randn(vec![dec.cfg.latent_dim()], 32);
    let eps = randn(vec![dec.cfg.latent_dim()], 33);
    let fb = FlowBatch::new(x0, eps, 0.4).unwrap();
    let cond = randn(vec![3, 8], 34);
    check("diffusion_loss_cond", &cond, |t, v| {
        let bound = dec.params.bind(t);
        let xt = t.constant(fb.xt.clone());
        let out = dec.forward_on(t, &bound, v, xt, 0.4).map_err(wrap)?;
        diffusion_loss(t, out.velocity, &fb).map_err(wrap)
    });
}

#[test]
fn distill_loss_gradient_through_decoder() {
    let dec = tiny_decoder();
    let teacher = tiny_decoder();
    let x0 = randn(vec![dec.cfg.latent_dim()], 35);
    let eps = randn(vec![dec.cfg.latent_dim()], 36);
    let fb = FlowBatch::new(x0, eps, 0.7).unwrap();
    let tcond = randn(vec![3, 8], 37);
    let (_, tfeats) = teacher.forward_tensors(&tcond, &fb.xt, 0.7).unwrap();
    let cond = randn(vec![3, 8], 38);
    check("distill_loss_cond", &cond, |t, v| {
        let bound = dec.params.bind(t);
        let xt = t.constant(fb.xt.clone());
        let out = dec.forward_on(t, &bound, v, xt, 0.7).map_err(wrap)?;
        distill_loss(t, &out.layer_feats, &tfeats).map_err(wrap)
    });
}

fn wrap<E: std::fmt::Display>(e: E) -> cogen_core::TensorError {
    cogen_core::TensorError::Invalid(e.to_string())
}

fn tiny_stack() -> Models<f64> {
    let vocab = Vocab::new();
    let lm = LmConfig {
        ctx: 96,
        ..LmConfig::tiny(vocab.size())
    };
    let dc = DecoderCfg {
        width: 8,
        heads: 2,
        noise_tokens: 4,
        token_dim: 48,
        ..DecoderCfg::tiny()
    };
    Models {
        policy: PolicyModel::init(lm, 41),
        connector: Connector::init(8, 2, 16, 42),
        decoder: DecoderModel::init(dc, 43),
    }
}

/// Full objective (clipped surrogate plus both KL terms) versus central
/// differences over a handful of coordinates in each sub-model.
#[test]
fn rgpo_loss_gradient_matches_finite_differences() {
    let models = tiny_stack();
    let vocab = Vocab::new();
    let embedder = FrozenEmbedder::new();
    let cfg = RgpoConfig {
        max_completion_len: 24,
        euler_steps: 2,
        ..RgpoConfig::default()
    };
    let prompt_ids = vocab.tokenize("<bos>draw a red pentagon;").unwrap();
    let group = rollout(
        &models,
        &embedder,
        &vocab,
        &prompt_ids,
        "red pentagon",
        &cfg,
        derive_seed(99, 0, 0),
    )
    .unwrap();
    // perturb theta so ratios and KL terms are non-trivial
    let mut theta = models.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    for store in [
        &mut theta.policy.params,
        &mut theta.connector.params,
        &mut theta.decoder.params,
    ] {
        for (_, t) in store.iter_mut() {
            let noise = Tensor::<f64>::randn(t.shape.clone(), 0.01, &mut rng);
            for (v, n) in t.data.iter_mut().zip(&noise.data) {
                *v += *n;
            }
        }
    }
    let refd = prepare_ref_data(&models, &group, 5).unwrap();

    let loss_of = |m: &Models<f64>| -> f64 {
        let mut tape = Tape::new();
        let binds = m.bind(&mut tape);
        let loss = rgpo_loss_on(&mut tape, m, &binds, &group, &refd, &cfg).unwrap();
        tape.value(loss).scalar_value()
    };

    // analytic gradients for every parameter in one backward pass
    let mut tape = Tape::new();
    let binds = theta.bind(&mut tape);
    let loss = rgpo_loss_on(&mut tape, &theta, &binds, &group, &refd, &cfg).unwrap();
    tape.backward(loss).unwrap();

    let probes: [(&str, &str); 3] = [
        ("policy", "blk0.qkv.w"),
        ("connector", "blk0.qkv.w"),
        ("decoder", "blk0.qkv.w"),
    ];
    for (which, name) in probes {
        let (store, bound) = match which {
            "policy" => (&theta.policy.params, &binds.policy),
            "connector" => (&theta.connector.params, &binds.connector),
            _ => (&theta.decoder.params, &binds.decoder),
        };
        let analytic = tape
            .grad(bound.var(name))
            .map(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(name).shape.clone()));
        let base = store.get(name).clone();
        for k in [0usize, 1, 7] {
            let h = 1e-5;
            let eval_at = |delta: f64| -> f64 {
                let mut m = theta.clone();
                let s = match which {
                    "policy" => &mut m.policy.params,
                    "connector" => &mut m.connector.params,
                    _ => &mut m.decoder.params,
                };
                let t = s.get_mut(name);
                t.data[k] = base.data[k] + delta;
                loss_of(&m)
            };
            let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let a = analytic.data[k];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            assert!(
                rel <= TOL,
                "{which}.{name}[{k}]: analytic {a:.6e} vs numeric {numeric:.6e} (rel {rel:.2e})"
            );
        }
    }
    // keep finite_diff_grad itself exercised
    let f = |x: &Tensor<f64>| -> Result<f64, cogen_core::TensorError> {
        Ok(x.data.iter().map(|v| v * v).sum())
    };
    let x = randn(vec![3], 50);
    let g = finite_diff_grad(f, &x, 1e-6).unwrap();
    for (gk, xk) in g.data.iter().zip(&x.data) {
        assert!((gk - 2.0 * xk).abs() < 1e-6);
    }
}
