//! Continual-learning orchestration: the task loop, anchor management,
//! checkpoints, evaluation, metrics and the multi-seed experiment runner.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::env::{build_stream, detokenize, ClassId, OutputGrammar, TaskStream};
use crate::error::{Error, Result};
use crate::optim::{
    policy_gradient_step, sft_step, Algorithm, SftExample, StepLog, STEP_LOG_HEADER,
};
use crate::policy::{
    derive_seed, greedy_decode, read_params, sample_rollout, snapshot, write_params, FeatureMap,
    PolicyParams, PromptId, Rollout, RolloutGroup,
};
use crate::retention::{
    annotate_anchor, apply_gating_variant, ctan_update, drift, group_advantages, kl_to_anchor,
    mean, population_std, retention_reward, total_reward, AdvantageMode, CtanState, GatingVariant,
    CTAN_STATE_BYTES,
};
use crate::verifiers::{classification_reward, extract_answer, normalize_name, CLASSIFICATION_R_MAX};

/// Accuracy after training task `i` on eval task `j <= i` (both 1-based).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMatrix {
    rows: Vec<Vec<f64>>,
}

impl EvalMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = EvalMatrix::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Appends the row for the next training task; it must have one entry per
    /// observed task, each in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::input(format!(
                "row for task {} needs {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after_task: usize, eval_task: usize) -> Option<f64> {
        self.rows
            .get(after_task.checked_sub(1)?)?
            .get(eval_task.checked_sub(1)?)
            .copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Last accuracy and forgetting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub last_accuracy: f64,
    pub forgetting: f64,
}

/// `A` is the macro mean of the final row; `F` averages, over every task but
/// the last, the drop from its best accuracy at any point (including right
/// after learning it) to its final accuracy.
pub fn compute_metrics(m: &EvalMatrix) -> Result<Metrics> {
    let n = m.num_tasks();
    if n == 0 {
        return Err(Error::input("evaluation matrix is empty"));
    }
    if m.rows.iter().enumerate().any(|(i, r)| r.len() != i + 1) {
        return Err(Error::input("evaluation matrix is incomplete"));
    }
    let last = &m.rows[n - 1];
    let last_accuracy = mean(last);
    let forgetting = if n == 1 {
        0.0
    } else {
        (0..n - 1)
            .map(|j| {
                let best = (j..n).map(|i| m.rows[i][j]).fold(f64::NEG_INFINITY, f64::max);
                best - last[j]
            })
            .sum::<f64>()
            / (n - 1) as f64
    };
    Ok(Metrics {
        last_accuracy,
        forgetting,
    })
}

/// Resolved behaviour of one experiment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arm {
    pub algorithm: Algorithm,
    pub mode: AdvantageMode,
    pub retention: bool,
    pub gating: Option<GatingVariant>,
}

impl Arm {
    pub fn new(algorithm: Algorithm, cfg: &ExperimentConfig) -> Self {
        let default_mode = match algorithm {
            Algorithm::Rapo => AdvantageMode::Ctan,
            _ => AdvantageMode::BatchSigma,
        };
        Arm {
            algorithm,
            mode: cfg.run.normalization.resolve(default_mode),
            retention: algorithm == Algorithm::Rapo,
            gating: match algorithm {
                Algorithm::GrpoV1 => Some(GatingVariant::LowDriftOnly),
                Algorithm::GrpoV2 => Some(GatingVariant::HighDriftOnly),
                _ => None,
            },
        }
    }
}

/// `sigma_hat` as loaded at the start of a task and as saved at its end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskBoundary {
    pub task: usize,
    pub sigma_hat_start: f64,
    pub sigma_hat_end: f64,
}

/// Mutable state threaded through the task loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub actor: PolicyParams,
    pub ctan: CtanState,
    pub tasks_completed: usize,
    pub step: usize,
    pub eval: EvalMatrix,
    pub logs: Vec<StepLog>,
    pub boundaries: Vec<TaskBoundary>,
}

/// Everything a run needs that does not change while it executes.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub stream: &'a TaskStream,
    pub arm: Arm,
    pub seed: u64,
}

impl RunContext<'_> {
    pub fn initial_state(&self) -> Result<RunState> {
        Ok(RunState {
            actor: self.stream.pretrained_policy(&self.cfg.init),
            ctan: CtanState::new(self.cfg.ctan.beta)?,
            tasks_completed: 0,
            step: 0,
            eval: EvalMatrix::new(),
            logs: Vec::new(),
            boundaries: Vec::new(),
        })
    }
}

struct ScoredGroup {
    group: RolloutGroup,
    task_rewards: Vec<f64>,
    drifts: Vec<f64>,
}

fn class_names(stream: &TaskStream, t: usize) -> Result<std::collections::BTreeSet<String>> {
    stream.candidate_names(t)
}

fn sample_group(
    ctx: &RunContext<'_>,
    actor: &PolicyParams,
    anchor: &PolicyParams,
    fmap: &dyn FeatureMap,
    task: usize,
    epoch: usize,
    prompt: (PromptId, ClassId),
    vocab: &std::collections::BTreeSet<String>,
) -> Result<ScoredGroup> {
    let (prompt_id, gold) = prompt;
    let grammar = ctx.stream.grammar();
    let gold_name = OutputGrammar::class_name(gold);
    let mut rollouts = Vec::with_capacity(ctx.cfg.optim.group_size);
    let mut task_rewards = Vec::with_capacity(ctx.cfg.optim.group_size);
    let mut drifts = Vec::with_capacity(ctx.cfg.optim.group_size);
    for i in 0..ctx.cfg.optim.group_size {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            ctx.seed,
            task as u64,
            epoch as u64,
            prompt_id,
            i as u64,
        ]));
        let mut r = sample_rollout(actor, fmap, prompt_id, &mut rng);
        r.text = detokenize(&r.tokens, grammar);
        let reward = classification_reward(&r.text, &gold_name, vocab);
        let mut r = annotate_anchor(&r, anchor, fmap)?;
        task_rewards.push(reward.r_task);
        drifts.push(drift(&r)?);
        r.reward = Some(reward);
        rollouts.push(r);
    }
    Ok(ScoredGroup {
        group: RolloutGroup {
            prompt_id,
            rollouts,
        },
        task_rewards,
        drifts,
    })
}

/// One optimization step of an RL arm on a batch of prompts.
fn rl_step(
    ctx: &RunContext<'_>,
    state: &mut RunState,
    anchor: &PolicyParams,
    task: usize,
    epoch: usize,
    batch: &[(PromptId, ClassId)],
    vocab: &std::collections::BTreeSet<String>,
) -> Result<StepLog> {
    let fmap = ctx.stream.feature_map();
    let cfg = ctx.cfg;
    let actor = &state.actor;
    let mut groups: Vec<ScoredGroup> = batch
        .par_iter()
        .map(|&p| sample_group(ctx, actor, anchor, &fmap, task, epoch, p, vocab))
        .collect::<Result<_>>()?;

    let retention_on = ctx.arm.retention && cfg.retention.is_active(task);
    let gating_on = cfg.retention.is_active(task);
    let mut totals: Vec<Vec<f64>> = Vec::with_capacity(groups.len());
    let mut ret_sum = 0.0;
    let mut n_rollouts = 0usize;
    for g in &mut groups {
        let task_rewards = match ctx.arm.gating {
            Some(v) if gating_on => {
                apply_gating_variant(&g.task_rewards, &g.drifts, CLASSIFICATION_R_MAX, v)
            }
            _ => g.task_rewards.clone(),
        };
        let mut tot = Vec::with_capacity(task_rewards.len());
        for ((r, &rt), &d) in g.group.rollouts.iter_mut().zip(&task_rewards).zip(&g.drifts) {
            let r_ret = retention_reward(d, &cfg.retention);
            ret_sum += r_ret;
            n_rollouts += 1;
            let total = if retention_on {
                total_reward(rt, r_ret, &cfg.retention, task)
            } else {
                rt
            };
            if let Some(b) = r.reward.as_mut() {
                *b = b.with_retention(r_ret, total);
            }
            tot.push(total);
        }
        totals.push(tot);
    }

    let flat: Vec<f64> = totals.iter().flatten().copied().collect();
    let sigma_batch = population_std(&flat);
    state.ctan = ctan_update(state.ctan, sigma_batch);

    let mut advantages = Vec::with_capacity(flat.len());
    for tot in &totals {
        advantages.extend(group_advantages(tot, ctx.arm.mode, &state.ctan, cfg.ctan.eps)?);
    }
    let adv_magnitude: f64 = advantages.iter().map(|a| a.abs()).sum();

    let kl_anchor = if cfg.run.log_kl {
        let kls: Vec<f64> = groups
            .par_iter()
            .map(|g| kl_to_anchor(&g.group, &state.actor, anchor, &fmap))
            .collect::<Result<_>>()?;
        mean(&kls)
    } else {
        0.0
    };

    let rollouts: Vec<&Rollout> = groups.iter().flat_map(|g| g.group.rollouts.iter()).collect();
    let mut actor = state.actor.clone();
    for _ in 0..cfg.optim.inner_epochs {
        let (next, _) =
            policy_gradient_step(&actor, Some(anchor), &fmap, &rollouts, &advantages, &cfg.optim)?;
        actor = next;
    }
    state.actor = actor;

    let reward_mean = mean(&groups.iter().flat_map(|g| g.task_rewards.iter().copied()).collect::<Vec<_>>());
    Ok(StepLog {
        step: state.step,
        reward_mean,
        sigma_batch,
        sigma_hat: state.ctan.sigma_hat,
        adv_magnitude,
        ret_reward_mean: ret_sum / n_rollouts.max(1) as f64,
        kl_anchor,
    })
}

fn sft_batch_step(
    ctx: &RunContext<'_>,
    state: &mut RunState,
    anchor: &PolicyParams,
    batch: &[(PromptId, ClassId)],
) -> Result<StepLog> {
    let fmap = ctx.stream.feature_map();
    let grammar = ctx.stream.grammar();
    let examples: Vec<SftExample> = batch
        .iter()
        .map(|&(p, c)| (p, grammar.sentence(c, &[])))
        .collect();
    let kl_anchor = if ctx.cfg.run.log_kl {
        let group = RolloutGroup {
            prompt_id: examples[0].0,
            rollouts: examples
                .iter()
                .map(|(p, toks)| {
                    let lp = crate::policy::log_prob_tokens(&state.actor, &fmap, *p, toks)?;
                    Ok(Rollout {
                        prompt_id: *p,
                        tokens: toks.clone(),
                        anchor_logprobs: Some(lp.clone()),
                        actor_logprobs: lp,
                        text: String::new(),
                        reward: None,
                    })
                })
                .collect::<Result<_>>()?,
        };
        kl_to_anchor(&group, &state.actor, anchor, &fmap)?
    } else {
        0.0
    };
    state.actor = sft_step(&state.actor, &fmap, &examples, ctx.cfg.run.sft_learning_rate)?;
    Ok(StepLog {
        step: state.step,
        reward_mean: 0.0,
        sigma_batch: 0.0,
        sigma_hat: state.ctan.sigma_hat,
        adv_magnitude: 0.0,
        ret_reward_mean: 0.0,
        kl_anchor,
    })
}

/// Trains task `t` (1-based) starting from the end-of-`t-1` state: freezes an
/// anchor copy of the incoming weights, runs `epochs_per_task` passes over
/// task `t`'s training prompts only, then evaluates on tasks `1..=t`.
pub fn train_task(ctx: &RunContext<'_>, mut state: RunState, t: usize) -> Result<RunState> {
    if t == 0 || t > ctx.stream.num_tasks() {
        return Err(Error::input(format!("task {t} out of range")));
    }
    if state.tasks_completed + 1 != t {
        return Err(Error::state(format!(
            "task {t} requires tasks 1..{} to be completed first (have {})",
            t,
            state.tasks_completed
        )));
    }
    let before = ctx.stream.train_access_counts();
    let anchor = snapshot(&state.actor);
    let sigma_hat_start = state.ctan.sigma_hat;
    let prompts = ctx.stream.train_prompts(t)?;
    let vocab = class_names(ctx.stream, t)?;
    let per_step = ctx.cfg.optim.prompts_per_step;

    for epoch in 0..ctx.cfg.optim.epochs_per_task {
        let mut order = prompts.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[ctx.seed, t as u64, epoch as u64, 0x5348]));
        order.shuffle(&mut rng);
        for batch in order.chunks(per_step) {
            let log = match ctx.arm.algorithm {
                Algorithm::Sft => sft_batch_step(ctx, &mut state, &anchor, batch)?,
                _ => rl_step(ctx, &mut state, &anchor, t, epoch, batch, &vocab)?,
            };
            state.logs.push(log);
            state.step += 1;
        }
    }

    let after = ctx.stream.train_access_counts();
    for (i, (a, b)) in after.iter().zip(&before).enumerate() {
        let expected = if i + 1 == t { b + 1 } else { *b };
        if *a != expected {
            return Err(Error::state(format!(
                "rehearsal-free contract violated: task {} training data read while training task {t}",
                i + 1
            )));
        }
    }

    let row = evaluate(&state.actor, ctx.stream, t)?;
    state.eval.push_row(row)?;
    state.boundaries.push(TaskBoundary {
        task: t,
        sigma_hat_start,
        sigma_hat_end: state.ctan.sigma_hat,
    });
    state.tasks_completed = t;
    Ok(state)
}

/// Whether the greedy response to `prompt` names `gold`.
pub fn greedy_correct(actor: &PolicyParams, stream: &TaskStream, prompt: PromptId, gold: ClassId) -> bool {
    let fmap = stream.feature_map();
    let toks = greedy_decode(actor, &fmap, prompt);
    let text = detokenize(&toks, stream.grammar());
    extract_answer(&text)
        .map(|a| normalize_name(a) == normalize_name(&OutputGrammar::class_name(gold)))
        .unwrap_or(false)
}

/// Greedy-decoding accuracy on the held-out prompts of every task `1..=t`,
/// presented with the candidate vocabulary of task `t`.
pub fn evaluate(actor: &PolicyParams, stream: &TaskStream, t: usize) -> Result<Vec<f64>> {
    if t == 0 || t > stream.num_tasks() {
        return Err(Error::input(format!("cannot evaluate up to task {t}")));
    }
    (1..=t)
        .map(|j| {
            let prompts = stream.eval_prompts(j, t)?;
            let hits = prompts
                .par_iter()
                .filter(|&&(p, gold)| greedy_correct(actor, stream, p, gold))
                .count();
            Ok(hits as f64 / prompts.len() as f64)
        })
        .collect()
}

/// Writes weights followed by the CTAN state.
pub fn save_checkpoint(path: &Path, actor: &PolicyParams, ctan: &CtanState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_params(actor, &mut w)?;
        w.write_all(&ctan.to_bytes())?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, CtanState)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::state(format!("missing checkpoint {}: {e}", path.display())))?;
    let mut r = bytes.as_slice();
    let params = read_params(&mut r)?;
    let tail: &[u8; CTAN_STATE_BYTES] = r
        .try_into()
        .map_err(|_| Error::input("checkpoint trailer is not a CTAN state"))?;
    Ok((params, CtanState::from_bytes(tail)?))
}

/// Bookkeeping persisted next to the checkpoints so a killed run can resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    tasks_completed: usize,
    step: usize,
    eval: EvalMatrix,
    logs: Vec<StepLog>,
    boundaries: Vec<TaskBoundary>,
}

fn checkpoint_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("checkpoint_task{t:02}.bin"))
}

fn save_progress(dir: &Path, state: &RunState) -> Result<()> {
    save_checkpoint(&checkpoint_path(dir, state.tasks_completed), &state.actor, &state.ctan)?;
    let progress = Progress {
        tasks_completed: state.tasks_completed,
        step: state.step,
        eval: state.eval.clone(),
        logs: state.logs.clone(),
        boundaries: state.boundaries.clone(),
    };
    let tmp = dir.join("progress.json.tmp");
    fs::write(&tmp, serde_json::to_vec(&progress).map_err(|e| Error::state(e.to_string()))?)?;
    fs::rename(tmp, dir.join("progress.json"))?;
    Ok(())
}

fn load_progress(dir: &Path) -> Result<Option<RunState>> {
    let path = dir.join("progress.json");
    if !path.exists() {
        return Ok(None);
    }
    let progress: Progress = serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| Error::state(format!("corrupt progress file: {e}")))?;
    let (actor, ctan) = load_checkpoint(&checkpoint_path(dir, progress.tasks_completed))?;
    Ok(Some(RunState {
        actor,
        ctan,
        tasks_completed: progress.tasks_completed,
        step: progress.step,
        eval: progress.eval,
        logs: progress.logs,
        boundaries: progress.boundaries,
    }))
}

/// Canonical float rendering used in every CSV this crate writes.
pub fn fmt_float(x: f64) -> String {
    let s = format!("{x:.9}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn write_steps_csv<W: Write>(logs: &[StepLog], w: &mut W) -> Result<()> {
    writeln!(w, "{STEP_LOG_HEADER}")?;
    for l in logs {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            l.step,
            fmt_float(l.reward_mean),
            fmt_float(l.sigma_batch),
            fmt_float(l.sigma_hat),
            fmt_float(l.adv_magnitude),
            fmt_float(l.ret_reward_mean),
            fmt_float(l.kl_anchor)
        )?;
    }
    Ok(())
}

pub fn write_eval_csv<W: Write>(m: &EvalMatrix, w: &mut W) -> Result<()> {
    writeln!(w, "after_task,eval_task,accuracy")?;
    for (i, row) in m.rows().iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            writeln!(w, "{},{},{}", i + 1, j + 1, fmt_float(*v))?;
        }
    }
    Ok(())
}

/// Outcome of one (algorithm, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub eval: EvalMatrix,
    pub last_accuracy: f64,
    pub forgetting: f64,
    pub logs: Vec<StepLog>,
    pub boundaries: Vec<TaskBoundary>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for this run's checkpoints and CSVs.
    pub dir: Option<PathBuf>,
    /// Continue from `progress.json` in `dir` if present.
    pub resume: bool,
    /// Return after this many tasks, as if the process had been killed.
    pub stop_after_task: Option<usize>,
}

/// Either a finished run or one interrupted by `stop_after_task`.
#[derive(Debug, Clone)]
pub enum RunOutcome {
    Completed(Box<RunRecord>),
    Stopped { tasks_completed: usize },
}

impl RunOutcome {
    pub fn into_record(self) -> Option<RunRecord> {
        match self {
            RunOutcome::Completed(r) => Some(*r),
            RunOutcome::Stopped { .. } => None,
        }
    }
}

/// Runs one algorithm on the stream built from `seed`.
pub fn run_seed(cfg: &ExperimentConfig, algorithm: Algorithm, seed: u64, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let stream = build_stream(&cfg.stream, seed)?;
    let ctx = RunContext {
        cfg,
        stream: &stream,
        arm: Arm::new(algorithm, cfg),
        seed,
    };
    if let Some(dir) = &opts.dir {
        fs::create_dir_all(dir)?;
    }
    let mut state = match (&opts.dir, opts.resume) {
        (Some(dir), true) => match load_progress(dir)? {
            Some(s) => s,
            None => ctx.initial_state()?,
        },
        _ => ctx.initial_state()?,
    };
    for t in state.tasks_completed + 1..=stream.num_tasks() {
        state = train_task(&ctx, state, t)?;
        if let Some(dir) = &opts.dir {
            save_progress(dir, &state)?;
        }
        if opts.stop_after_task == Some(t) && t < stream.num_tasks() {
            return Ok(RunOutcome::Stopped { tasks_completed: t });
        }
    }
    let metrics = compute_metrics(&state.eval)?;
    let checkpoints = opts
        .dir
        .as_ref()
        .map(|d| (1..=stream.num_tasks()).map(|t| checkpoint_path(d, t)).collect())
        .unwrap_or_default();
    let record = RunRecord {
        algorithm,
        seed,
        config: cfg.clone(),
        eval: state.eval,
        last_accuracy: metrics.last_accuracy,
        forgetting: metrics.forgetting,
        logs: state.logs,
        boundaries: state.boundaries,
        checkpoints,
    };
    if let Some(dir) = &opts.dir {
        write_run_files(dir, &record)?;
    }
    Ok(RunOutcome::Completed(Box::new(record)))
}

fn write_run_files(dir: &Path, record: &RunRecord) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(dir.join("steps.csv"))?);
    write_steps_csv(&record.logs, &mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join("evalmatrix.csv"))?);
    write_eval_csv(&record.eval, &mut w)?;
    w.flush()?;
    fs::write(
        dir.join("record.json"),
        serde_json::to_vec_pretty(record).map_err(|e| Error::state(e.to_string()))?,
    )?;
    Ok(())
}

/// Mean and standard deviation of `A` and `F` for one algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algorithm: Algorithm,
    pub runs: usize,
    pub a_mean: f64,
    pub a_std: f64,
    pub f_mean: f64,
    pub f_std: f64,
}

/// Sample standard deviation; zero for fewer than two values.
fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Aggregates records per algorithm, in [`Algorithm::ALL`] order.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    Algorithm::ALL
        .iter()
        .filter_map(|&algo| {
            let rs: Vec<&RunRecord> = records.iter().filter(|r| r.algorithm == algo).collect();
            if rs.is_empty() {
                return None;
            }
            let a: Vec<f64> = rs.iter().map(|r| r.last_accuracy).collect();
            let f: Vec<f64> = rs.iter().map(|r| r.forgetting).collect();
            Some(SummaryRow {
                algorithm: algo,
                runs: rs.len(),
                a_mean: mean(&a),
                a_std: sample_std(&a),
                f_mean: mean(&f),
                f_std: sample_std(&f),
            })
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "algo,A_mean,A_std,F_mean,F_std";

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: &mut W) -> Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.algorithm,
            fmt_float(r.a_mean),
            fmt_float(r.a_std),
            fmt_float(r.f_mean),
            fmt_float(r.f_std)
        )?;
    }
    Ok(())
}

/// Table-style rendering (percentages, mean ± std).
pub fn format_summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<10} {:>18} {:>18}\n", "method", "A (%)", "F (%)");
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>10.2} ± {:<5.2} {:>10.2} ± {:<5.2}\n",
            r.algorithm.name(),
            100.0 * r.a_mean,
            100.0 * r.a_std,
            100.0 * r.f_mean,
            100.0 * r.f_std
        ));
    }
    s
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

pub fn run_dir(out: &Path, algorithm: Algorithm, seed: u64) -> PathBuf {
    out.join(algorithm.name()).join(format!("seed_{seed}"))
}

/// Runs every (algorithm, seed) pair, in parallel across pairs. With an
/// output directory each run writes its own files and `summary.csv` is
/// written at the top level; with `resume`, runs continue from their last
/// saved task.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    algorithms: &[Algorithm],
    out: Option<&Path>,
    resume: bool,
) -> Result<Experiment> {
    if seeds.is_empty() {
        return Err(Error::config("seed list is empty"));
    }
    if algorithms.is_empty() {
        return Err(Error::config("algorithm list is empty"));
    }
    cfg.validate()?;
    let jobs: Vec<(Algorithm, u64)> = algorithms
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(algo, seed)| {
            let opts = RunOptions {
                dir: out.map(|o| run_dir(o, algo, seed)),
                resume,
                stop_after_task: None,
            };
            run_seed(cfg, algo, seed, &opts).map(|o| o.into_record().expect("run completes"))
        })
        .collect::<Result<_>>()?;
    let summary = summarize(&records);
    if let Some(out) = out {
        fs::create_dir_all(out)?;
        let mut w = BufWriter::new(fs::File::create(out.join("summary.csv"))?);
        write_summary_csv(&summary, &mut w)?;
        w.flush()?;
    }
    Ok(Experiment { records, summary })
}

/// Re-aggregates `record.json` files found under `dir` and rewrites
/// `summary.csv`.
pub fn report(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut records = Vec::new();
    for algo in Algorithm::ALL {
        let adir = dir.join(algo.name());
        if !adir.is_dir() {
            continue;
        }
        let mut entries: Vec<PathBuf> = fs::read_dir(&adir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("record.json").is_file())
            .collect();
        entries.sort();
        for e in entries {
            let rec: RunRecord = serde_json::from_slice(&fs::read(e.join("record.json"))?)
                .map_err(|err| Error::state(format!("corrupt record in {}: {err}", e.display())))?;
            records.push(rec);
        }
    }
    if records.is_empty() {
        return Err(Error::state(format!("no run records under {}", dir.display())));
    }
    let summary = summarize(&records);
    let mut w = BufWriter::new(fs::File::create(dir.join("summary.csv"))?);
    write_summary_csv(&summary, &mut w)?;
    w.flush()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::StreamConfig;

    #[test]
    fn metrics_example() {
        let m = EvalMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8]]).unwrap();
        let x = compute_metrics(&m).unwrap();
        assert!((x.forgetting - 0.2).abs() < 1e-12);
        assert!((x.last_accuracy - 0.75).abs() < 1e-12);
    }

    #[test]
    fn constant_matrix_has_no_forgetting() {
        let m = EvalMatrix::from_rows(vec![vec![0.6], vec![0.6, 0.6], vec![0.6, 0.6, 0.6]]).unwrap();
        assert_eq!(compute_metrics(&m).unwrap().forgetting, 0.0);
    }

    #[test]
    fn single_task_metrics() {
        let m = EvalMatrix::from_rows(vec![vec![0.4]]).unwrap();
        let x = compute_metrics(&m).unwrap();
        assert_eq!(x.forgetting, 0.0);
        assert_eq!(x.last_accuracy, 0.4);
    }

    #[test]
    fn historical_best_includes_later_rows() {
        // task 1 improves after task 2, then drops
        let m = EvalMatrix::from_rows(vec![
            vec![0.5],
            vec![0.9, 0.5],
            vec![0.3, 0.5, 0.7],
        ])
        .unwrap();
        let x = compute_metrics(&m).unwrap();
        assert!((x.forgetting - (0.6 + 0.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_matrices_rejected() {
        assert!(compute_metrics(&EvalMatrix::new()).is_err());
        let mut m = EvalMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        assert!(m.push_row(vec![1.5]).is_err());
    }

    #[test]
    fn float_format_is_canonical() {
        assert_eq!(fmt_float(0.5), "0.500000000");
        assert_eq!(fmt_float(-1e-12), "0.000000000");
        assert_eq!(fmt_float(-0.25), "-0.250000000");
    }

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.stream = StreamConfig {
            num_tasks: 2,
            classes_per_task: 2,
            shots_per_class: 2,
            eval_per_class: 3,
            ..StreamConfig::default()
        };
        cfg.optim.epochs_per_task = 2;
        cfg.optim.group_size = 4;
        cfg
    }

    #[test]
    fn train_task_requires_predecessor() {
        let cfg = tiny();
        let stream = build_stream(&cfg.stream, 1).unwrap();
        let ctx = RunContext {
            cfg: &cfg,
            stream: &stream,
            arm: Arm::new(Algorithm::Grpo, &cfg),
            seed: 1,
        };
        let s = ctx.initial_state().unwrap();
        assert!(matches!(train_task(&ctx, s, 2), Err(Error::State(_))));
    }

    #[test]
    fn evaluation_is_pure() {
        let cfg = tiny();
        let stream = build_stream(&cfg.stream, 3).unwrap();
        let actor = stream.pretrained_policy(&Default::default());
        let a = evaluate(&actor, &stream, 2).unwrap();
        let b = evaluate(&actor, &stream, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn hard_wired_policy_scores_perfectly() {
        let cfg = tiny();
        let stream = build_stream(&cfg.stream, 3).unwrap();
        let init = crate::env::PretrainedInit {
            zero_shot_scale: 0.0,
            ..Default::default()
        };
        let mut actor = stream.pretrained_policy(&init);
        // Plant the rule on every route: class weights equal to the prompts'
        // own embeddings make gold the argmax for task 1.
        let g = *stream.grammar();
        let p = cfg.stream.prompt_dim;
        for &c in stream.task_classes(1).unwrap() {
            let proto: Vec<f64> = {
                let xs: Vec<&Vec<f64>> = stream
                    .samples()
                    .iter()
                    .filter(|s| s.class == c)
                    .map(|s| &s.embedding)
                    .collect();
                (0..p).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / xs.len() as f64).collect()
            };
            for route in 0..stream.num_routes() {
                let off = crate::env::NUM_STAGES + p * (1 + route);
                for (i, v) in proto.iter().enumerate() {
                    actor.weights_mut().set(off + i, g.class_token(c), 60.0 * v);
                }
            }
        }
        let acc = evaluate(&actor, &stream, 1).unwrap();
        assert_eq!(acc, vec![1.0]);
    }

    #[test]
    fn empty_seed_list_is_config_error() {
        let cfg = tiny();
        assert!(matches!(
            run_experiment(&cfg, &[], &[Algorithm::Grpo], None, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let stream = build_stream(&cfg.stream, 1).unwrap();
        let actor = stream.pretrained_policy(&Default::default());
        let ctan = CtanState {
            sigma_hat: 0.3141,
            beta: 0.999,
            initialized: true,
        };
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &actor, &ctan).unwrap();
        let (a, c) = load_checkpoint(&path).unwrap();
        assert_eq!(a, actor);
        assert_eq!(c, ctan);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.bin")),
            Err(Error::State(_))
        ));
    }
}
