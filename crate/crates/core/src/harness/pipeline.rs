//! Per-seed experiment stages: data generation, HasAnswer training,
//! scheduler training and evaluation. Each stage reads the previous
//! stage's files from `<out_dir>/seed-<seed>/` and writes its own.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::answerability::{train_has_answer, HasAnswerLog, HasAnswerModel};
use crate::datagen::{generate, read_dataset, write_dataset, Dataset};
use crate::encoder::EncoderModel;
use crate::error::{ApeError, Result};
use crate::numerics::{checkpoint, Rng};
use crate::policy_training::{build_tables, train_scheduler, LearningCurve};
use crate::scheduler::{schedule, BudgetConfig, Policy, ScheduleTrace, SchedulerParams};

use super::config::{RunConfig, Split};
use super::eval::{run_eval, EvalReport, EvalRun, PolicyEntry};

pub fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed-{seed}"))
}

pub fn dataset_path(cfg: &RunConfig, seed: u64, split: Split) -> PathBuf {
    seed_dir(cfg, seed).join("data").join(format!("{}.tsv", split.name()))
}

pub fn encoder_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("encoder.ckpt")
}

pub fn hasanswer_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("hasanswer.ckpt")
}

pub fn scheduler_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("scheduler.ckpt")
}

pub fn eval_path(cfg: &RunConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("eval.csv")
}

pub fn traces_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("traces")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| ApeError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| ApeError::io(path, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ApeError::MissingCheckpoint(path.to_path_buf()))
    }
}

/// Generates and writes the three splits for `seed`.
pub fn gen_data(cfg: &RunConfig, seed: u64) -> Result<Vec<Dataset>> {
    Split::ALL
        .iter()
        .map(|&split| {
            let data = generate(&cfg.gen_config(split, seed))?;
            write_dataset(&data, &dataset_path(cfg, seed, split))?;
            Ok(data)
        })
        .collect()
}

pub fn load_split(cfg: &RunConfig, seed: u64, split: Split) -> Result<Dataset> {
    let path = dataset_path(cfg, seed, split);
    require(&path)?;
    read_dataset(&path)
}

pub fn load_encoder(cfg: &RunConfig, seed: u64) -> Result<EncoderModel> {
    let path = encoder_path(cfg, seed);
    require(&path)?;
    EncoderModel::load(cfg.encoder_config(seed), &path)
}

pub fn load_has_answer(cfg: &RunConfig, seed: u64) -> Result<HasAnswerModel> {
    let path = hasanswer_path(cfg, seed);
    require(&path)?;
    HasAnswerModel::load(
        cfg.encoder.model_dim,
        cfg.hasanswer.hidden_size,
        cfg.hasanswer.pooling,
        &path,
    )
}

pub fn load_scheduler(cfg: &RunConfig, seed: u64) -> Result<SchedulerParams> {
    let path = scheduler_path(cfg, seed);
    require(&path)?;
    SchedulerParams::load(
        cfg.gen.num_passages,
        cfg.encoder.num_layers,
        cfg.scheduler_hidden,
        cfg.scheduler_embed_dim,
        &path,
    )
}

/// Builds the seeded encoder, trains HasAnswer on the `hasanswer` split and
/// writes both checkpoints plus the training log.
pub fn train_hasanswer_stage(cfg: &RunConfig, seed: u64) -> Result<(HasAnswerModel, HasAnswerLog)> {
    let data = load_split(cfg, seed, Split::HasAnswer)?;
    let encoder = EncoderModel::new(cfg.encoder_config(seed))?;
    checkpoint::save(&encoder, &encoder_path(cfg, seed))?;
    let (model, log) = train_has_answer(&data, &encoder, &cfg.hasanswer, seed)?;
    checkpoint::save(&model, &hasanswer_path(cfg, seed))?;
    write_text(&seed_dir(cfg, seed).join("hasanswer_log.csv"), &log.to_csv())?;
    Ok((model, log))
}

/// REINFORCE on the `scheduler` split with the frozen checkpoints.
pub fn train_scheduler_stage(cfg: &RunConfig, seed: u64) -> Result<(SchedulerParams, LearningCurve)> {
    let encoder = load_encoder(cfg, seed)?;
    let has_answer = load_has_answer(cfg, seed)?;
    let data = load_split(cfg, seed, Split::Scheduler)?;
    let init = cfg.scheduler_init_params(seed);
    let (params, curve) = train_scheduler(&data, &encoder, &has_answer, init, &cfg.rl, seed)?;
    checkpoint::save(&params, &scheduler_path(cfg, seed))?;
    write_text(&seed_dir(cfg, seed).join("learning_curve.csv"), &curve.to_csv())?;
    Ok((params, curve))
}

fn policy_for(name: &str) -> Result<Policy> {
    match name {
        "ape_argmax" => Ok(Policy::Argmax),
        "round_robin" => Ok(Policy::RoundRobin),
        "static_topk" => Ok(Policy::StaticTopK),
        "greedy_p" => Ok(Policy::GreedyP),
        other => Err(ApeError::Config(format!("unknown evaluation policy '{other}'"))),
    }
}

/// `question<TAB>id` headers followed by each question's trace.
pub fn format_trace_dump(ids: &[String], traces: &[ScheduleTrace]) -> String {
    let mut s = String::new();
    for (id, t) in ids.iter().zip(traces) {
        let _ = writeln!(s, "question\t{id}");
        s.push_str(&t.to_text());
    }
    s
}

pub fn parse_trace_dump(text: &str) -> Result<Vec<(String, ScheduleTrace)>> {
    let mut out = Vec::new();
    let mut current: Option<(String, usize, String)> = None;
    for (i, line) in text.lines().enumerate() {
        if let Some(id) = line.strip_prefix("question\t") {
            if let Some((prev, start, body)) = current.take() {
                out.push((prev, parse_block(&body, start)?));
            }
            current = Some((id.to_string(), i + 1, String::new()));
        } else if let Some((_, _, body)) = current.as_mut() {
            body.push_str(line);
            body.push('\n');
        } else {
            return Err(ApeError::Parse {
                line: i + 1,
                offset: 0,
                message: "trace line before any question header".into(),
            });
        }
    }
    if let Some((id, start, body)) = current {
        out.push((id, parse_block(&body, start)?));
    }
    Ok(out)
}

fn parse_block(body: &str, header_line: usize) -> Result<ScheduleTrace> {
    ScheduleTrace::parse(body).map_err(|e| match e {
        ApeError::Parse { line, offset, message } => ApeError::Parse {
            line: header_line + line,
            offset,
            message,
        },
        other => other,
    })
}

pub fn trace_file_name(run: &EvalRun) -> String {
    format!("{}_k{}_B{}.tsv", run.row.policy, run.row.k, run.row.budget)
}

/// Evaluates every configured policy on the `eval` split and writes
/// `eval.csv` and one trace dump per `(policy, k, B)`.
pub fn eval_stage(cfg: &RunConfig, seed: u64) -> Result<(EvalReport, Vec<EvalRun>)> {
    let encoder = load_encoder(cfg, seed)?;
    let has_answer = load_has_answer(cfg, seed)?;
    let trained = if cfg.eval_policies.iter().any(|p| p == "ape_argmax") {
        Some(load_scheduler(cfg, seed)?)
    } else {
        None
    };
    let zero = cfg.scheduler_zero_params();
    let data = load_split(cfg, seed, Split::Eval)?;
    let tables = build_tables(&data, &encoder, &has_answer)?;
    let entries = cfg
        .eval_policies
        .iter()
        .map(|name| {
            Ok(PolicyEntry {
                name: name.clone(),
                policy: policy_for(name)?,
                params: if name == "ape_argmax" {
                    trained.as_ref().expect("loaded above")
                } else {
                    &zero
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (report, runs) = run_eval(
        &data,
        &tables,
        &entries,
        &cfg.eval_k,
        &cfg.eval_budget_multipliers,
        cfg.encoder.num_layers,
        seed,
        cfg.eval_timing,
    )?;
    write_text(&eval_path(cfg, seed), &report.to_csv())?;
    let ids: Vec<String> = data.iter().map(|q| q.id.clone()).collect();
    for run in &runs {
        write_text(
            &traces_dir(cfg, seed).join(trace_file_name(run)),
            &format_trace_dump(&ids, &run.traces),
        )?;
    }
    Ok((report, runs))
}

/// All four stages for one seed.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<EvalReport> {
    gen_data(cfg, seed)?;
    train_hasanswer_stage(cfg, seed)?;
    train_scheduler_stage(cfg, seed)?;
    Ok(eval_stage(cfg, seed)?.0)
}

/// Runs every configured seed and writes the combined report to
/// `<out_dir>/eval_report.csv`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.to_text())?;
    let mut combined = EvalReport::default();
    for &seed in &cfg.seeds {
        combined.rows.extend(run_seed(cfg, seed)?.rows);
    }
    write_text(&cfg.out_dir.join("eval_report.csv"), &combined.to_csv())?;
    Ok(combined)
}

/// One live-encoder episode for question `index` of the `eval` split.
pub fn trace_question(
    cfg: &RunConfig,
    seed: u64,
    index: usize,
    policy: &str,
    k: usize,
    budget: usize,
) -> Result<ScheduleTrace> {
    let encoder = load_encoder(cfg, seed)?;
    let has_answer = load_has_answer(cfg, seed)?;
    let data = load_split(cfg, seed, Split::Eval)?;
    let instance = data.get(index).ok_or_else(|| {
        ApeError::Argument(format!("question {index} out of range ({} questions)", data.len()))
    })?;
    let params = if policy == "ape_argmax" {
        load_scheduler(cfg, seed)?
    } else {
        cfg.scheduler_zero_params()
    };
    let budget_cfg = BudgetConfig {
        budget,
        k,
        policy: policy_for(policy)?,
        step_cost: cfg.rl.step_cost,
    };
    let mut rng = Rng::derive(seed, index as u64);
    Ok(schedule(instance, &encoder, &has_answer, &params, &budget_cfg, &mut rng)?.trace)
}
