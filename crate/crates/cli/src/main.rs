//! `cogen`: command-line surface over the training stack.
//!
//! Exit codes: 0 success, 1 unexpected error, 2 invalid input, 3 missing
//! prerequisite checkpoint, 4 non-finite loss abort, 5 checkpoint
//! mismatch on eval. Diagnostics go to stderr.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cogen_core::concept_world::{
    export_tasks, gen_dataset, ConceptError, FrozenEmbedder, Image, Split, SplitCounts, Task,
    TaskMode,
};
use cogen_core::pipeline::{
    evaluate, load_checkpoint, load_models, prompt_for_task, read_metrics, stage0_teacher,
    stage1_pretrain, stage2_sft, stage3_rgpo, EvalReport, PipelineError, TrainConfig,
};
use cogen_core::policy_lm::Vocab;
use cogen_core::rewards::parse_cot;
use cogen_core::rgpo::rollout;

#[derive(Parser)]
#[command(name = "cogen", version, about = "toy reasoning-to-image training stack")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset splits as line-delimited JSON.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the three split files.
        #[arg(long)]
        out: PathBuf,
        /// Split sizes as train_direct,train_reasoning,eval_direct,eval_reasoning.
        #[arg(long)]
        counts: Option<String>,
    },
    /// Run one training stage, writing its checkpoint into --out.
    Train {
        #[arg(long)]
        stage: u32,
        /// TOML training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Artifact directory holding stage checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this stage's existing checkpoint in --out.
        #[arg(long, default_value_t = false)]
        resume: bool,
        /// Pause stage 3 after this many updates; resume later with
        /// the same config.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a checkpoint on the held-out splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        thinking: OnOff,
        /// Machine-readable JSON report destination.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Swap the learned generator for the ground-truth renderer.
        #[arg(long, default_value_t = false)]
        oracle: bool,
    },
    /// Sample one rollout group for a task and dump everything.
    RolloutInspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Index into the generated dataset.
        #[arg(long)]
        task_id: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'G', long, default_value_t = 4)]
        group_size: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the generated portable pixmaps.
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit curve files (SVG + CSV) from a metrics stream.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("COGEN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon_threads(n);
        }
    }
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::GenData { seed, out, counts } => gen_data(seed, &out, counts.as_deref()),
        Cmd::Train {
            stage,
            config,
            out,
            resume,
            stop_after,
        } => train(stage, config.as_deref(), &out, resume, stop_after),
        Cmd::Eval {
            ckpt,
            thinking,
            report,
            config,
            oracle,
        } => eval(
            &ckpt,
            matches!(thinking, OnOff::On),
            &report,
            config.as_deref(),
            oracle,
        ),
        Cmd::RolloutInspect {
            ckpt,
            task_id,
            seed,
            group_size,
            config,
            out,
        } => rollout_inspect(&ckpt, task_id, seed, group_size, config.as_deref(), &out),
        Cmd::Plot { metrics, out } => plot_cmd(&metrics, &out),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

// rayon is a transitive dependency of the core crate; the global pool is
// configured once, before any parallel work.
fn rayon_threads(n: usize) -> Result<(), String> {
    cogen_core::configure_threads(n).map_err(|e| e.to_string())
}

type CmdResult = Result<(), (u8, String)>;

fn fail<T>(code: u8, msg: impl Into<String>) -> Result<T, (u8, String)> {
    Err((code, msg.into()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, (u8, String)> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| (2u8, format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| (2u8, format!("bad config: {e}")))
        }
    }
}

fn parse_counts(s: &str) -> Result<SplitCounts, (u8, String)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        return fail(2, format!("--counts needs 4 comma-separated values, got {s:?}"));
    }
    let mut v = [0usize; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|e| (2u8, format!("bad count {p:?}: {e}")))?;
    }
    Ok(SplitCounts {
        train_direct: v[0],
        train_reasoning: v[1],
        eval_direct: v[2],
        eval_reasoning: v[3],
    })
}

fn gen_data(seed: u64, out: &Path, counts: Option<&str>) -> CmdResult {
    let counts = match counts {
        Some(s) => parse_counts(s)?,
        None => SplitCounts::default(),
    };
    let tasks = match gen_dataset(seed, &counts) {
        Ok(t) => t,
        Err(e @ ConceptError::CountsExceeded(_)) => return fail(2, e.to_string()),
        Err(e) => return fail(1, e.to_string()),
    };
    std::fs::create_dir_all(out).map_err(|e| (1u8, e.to_string()))?;
    for (split, name) in [
        (Split::Train, "train.jsonl"),
        (Split::EvalDirect, "eval_direct.jsonl"),
        (Split::EvalReasoning, "eval_reasoning.jsonl"),
    ] {
        let subset: Vec<Task> = tasks.iter().filter(|t| t.split == split).cloned().collect();
        std::fs::write(out.join(name), export_tasks(&subset))
            .map_err(|e| (1u8, e.to_string()))?;
        println!("{name}: {} tasks", subset.len());
    }
    Ok(())
}

fn stage_path(out: &Path, stage: u32) -> PathBuf {
    out.join(format!("stage{stage}.ckpt"))
}

fn train_error(e: PipelineError) -> (u8, String) {
    let code = match e {
        PipelineError::NonFiniteLoss(_) => 4,
        _ => 1,
    };
    (code, e.to_string())
}

fn train(
    stage: u32,
    config: Option<&Path>,
    out: &Path,
    resume: bool,
    stop_after: Option<u64>,
) -> CmdResult {
    if stage > 3 {
        return fail(2, format!("unknown stage {stage}"));
    }
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out).map_err(|e| (1u8, e.to_string()))?;
    let this = stage_path(out, stage);
    let resume_from = if resume && this.exists() {
        Some(this.clone())
    } else {
        None
    };
    if stage >= 1 {
        let prev = stage_path(out, stage - 1);
        if !prev.exists() {
            return fail(
                3,
                format!("stage {stage} needs {} first", prev.display()),
            );
        }
    }
    match stage {
        0 => {
            let r = stage0_teacher(&cfg, &this, resume_from.as_deref()).map_err(train_error)?;
            println!(
                "stage 0 done: {} steps, teacher consistency {:.4}",
                r.steps_run, r.final_consistency
            );
        }
        1 => {
            let prev = stage_path(out, 0);
            let r = stage1_pretrain(&cfg, &prev, &this, resume_from.as_deref())
                .map_err(train_error)?;
            println!(
                "stage 1 done: distill loss {:.4} -> {:.4}",
                r.distill_first, r.distill_last
            );
        }
        2 => {
            let prev = stage_path(out, 1);
            let r =
                stage2_sft(&cfg, &prev, &this, resume_from.as_deref()).map_err(train_error)?;
            println!(
                "stage 2 done: loss {:.4} -> {:.4}",
                r.losses.first().copied().unwrap_or(f64::NAN),
                r.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        _ => {
            let prev = stage_path(out, 2);
            let metrics = out.join("stage3_metrics.jsonl");
            let r = stage3_rgpo(
                &cfg,
                &prev,
                &this,
                Some(&metrics),
                resume_from.as_deref(),
                stop_after,
            )
            .map_err(train_error)?;
            let last = r.metrics.last();
            println!(
                "stage 3 done: {} updates, reward {:.4}, consistency {:.4}",
                r.updates_run,
                last.map_or(f64::NAN, |m| m.reward_mean),
                last.map_or(f64::NAN, |m| m.reward_consistency_mean)
            );
            println!("metrics: {}", metrics.display());
        }
    }
    println!("checkpoint: {}", this.display());
    Ok(())
}

#[derive(Serialize)]
struct FullReport {
    thinking: bool,
    oracle: bool,
    eval_direct: EvalReport,
    eval_reasoning: EvalReport,
}

fn eval(
    ckpt_path: &Path,
    thinking: bool,
    report: &Path,
    config: Option<&Path>,
    oracle: bool,
) -> CmdResult {
    let cfg = load_config(config)?;
    let ckpt = load_checkpoint(ckpt_path).map_err(|e| (5u8, e.to_string()))?;
    let (models, _) = load_models(&ckpt).map_err(|e| (5u8, e.to_string()))?;
    let tasks = gen_dataset(cfg.data_seed, &cfg.counts).map_err(|e| (1u8, e.to_string()))?;
    let mut ecfg = cfg.eval.clone();
    ecfg.oracle = oracle;
    let split = |s: Split| -> Vec<Task> {
        tasks.iter().filter(|t| t.split == s).cloned().collect()
    };
    let eval_direct = evaluate(&models, &split(Split::EvalDirect), thinking, &ecfg)
        .map_err(|e| (1u8, e.to_string()))?;
    let eval_reasoning = evaluate(&models, &split(Split::EvalReasoning), thinking, &ecfg)
        .map_err(|e| (1u8, e.to_string()))?;
    let full = FullReport {
        thinking,
        oracle,
        eval_direct,
        eval_reasoning,
    };
    let json = serde_json::to_string_pretty(&full).map_err(|e| (1u8, e.to_string()))?;
    if let Some(dir) = report.parent() {
        std::fs::create_dir_all(dir).map_err(|e| (1u8, e.to_string()))?;
    }
    std::fs::write(report, &json).map_err(|e| (1u8, e.to_string()))?;
    println!(
        "eval (thinking={}): direct accuracy {:.3} consistency {:.3} | reasoning accuracy {:.3} consistency {:.3}",
        if thinking { "on" } else { "off" },
        full.eval_direct.accuracy,
        full.eval_direct.mean_consistency,
        full.eval_reasoning.accuracy,
        full.eval_reasoning.mean_consistency,
    );
    println!("report: {}", report.display());
    Ok(())
}

fn write_ppm(path: &Path, img: &Image) -> std::io::Result<()> {
    let mut bytes = b"P6\n8 8\n255\n".to_vec();
    for &v in &img.pixels {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, bytes)
}

fn rollout_inspect(
    ckpt_path: &Path,
    task_id: usize,
    seed: u64,
    group_size: usize,
    config: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let cfg = load_config(config)?;
    let ckpt = load_checkpoint(ckpt_path).map_err(|e| (5u8, e.to_string()))?;
    let (models, _) = load_models(&ckpt).map_err(|e| (5u8, e.to_string()))?;
    let tasks = gen_dataset(cfg.data_seed, &cfg.counts).map_err(|e| (1u8, e.to_string()))?;
    let Some(task) = tasks.get(task_id) else {
        return fail(2, format!("unknown task id {task_id} (dataset has {})", tasks.len()));
    };
    let vocab = Vocab::new();
    let embedder = FrozenEmbedder::new();
    let mut rcfg = cfg.stage3.rgpo.clone();
    rcfg.group_size = group_size;
    let prompt_ids = vocab
        .tokenize(&prompt_for_task(task))
        .map_err(|e| (1u8, e.to_string()))?;
    let group = rollout(&models, &embedder, &vocab, &prompt_ids, &task.gt_prompt, &rcfg, seed)
        .map_err(|e| (1u8, e.to_string()))?;

    std::fs::create_dir_all(out).map_err(|e| (1u8, e.to_string()))?;
    println!("task {task_id} [{}]: {}", mode_name(task.mode), task.instruction);
    println!("ground truth: {}", task.gt_prompt);
    for (i, o) in group.outputs.iter().enumerate() {
        let p = parse_cot(&o.text);
        println!("--- sample {i} ---");
        println!("  completion: {:?}", o.text);
        println!("  think:      {:?}", p.think);
        println!("  answer:     {:?}", p.answer);
        println!(
            "  reward: format {:.3} consistency {:.3} total {:.3}  advantage {:+.4}",
            o.reward.format, o.reward.consistency, o.reward.total, o.advantage
        );
        let img_path = out.join(format!("task{task_id}_sample{i}.ppm"));
        write_ppm(&img_path, &o.image).map_err(|e| (1u8, e.to_string()))?;
        println!("  image: {}", img_path.display());
    }
    let adv_sum: f64 = group.outputs.iter().map(|o| o.advantage).sum();
    println!("advantage sum: {adv_sum:+.2e}");
    Ok(())
}

fn mode_name(m: TaskMode) -> &'static str {
    match m {
        TaskMode::Direct => "direct",
        TaskMode::Reasoning => "reasoning",
    }
}

fn plot_cmd(metrics_path: &Path, out: &Path) -> CmdResult {
    let metrics = match read_metrics(metrics_path) {
        Ok(m) => m,
        Err(e @ PipelineError::BadMetrics(_)) => return fail(2, e.to_string()),
        Err(e) => return fail(1, e.to_string()),
    };
    if metrics.is_empty() {
        return fail(2, "metrics file has no records");
    }
    std::fs::create_dir_all(out).map_err(|e| (1u8, e.to_string()))?;
    for panel in plot::panels() {
        let csv = out.join(format!("{}.csv", panel.name));
        let svg = out.join(format!("{}.svg", panel.name));
        plot::write_csv(&csv, &metrics, &panel).map_err(|e| (1u8, e.to_string()))?;
        plot::write_svg(&svg, &metrics, &panel).map_err(|e| (1u8, e.to_string()))?;
        println!("{} {}", csv.display(), svg.display());
    }
    println!("{} records plotted", metrics.len());
    Ok(())
}

