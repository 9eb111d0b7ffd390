//! Synthetic rehearsal-free class-incremental task stream.
//!
//! Each class owns a random prototype direction; a prompt is a noisy copy of
//! its class prototype, and the gold label is the prototype with the largest
//! inner product (the planted linear rule). Classes are partitioned into
//! disjoint tasks. Because all classes share one low-dimensional weight block,
//! learning a new task overwrites weights the older tasks rely on.
//!
//! Outputs follow a fixed token grammar:
//!
//! ```text
//! THINK_OPEN filler* THINK_CLOSE ANS_OPEN class ANS_CLOSE EOS
//! ```
//!
//! A [`PromptId`] packs the sample index together with the vocabulary level
//! the prompt is presented with (the number of tasks whose classes are listed
//! as candidates).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{derive_seed, FeatureMap, Matrix, PolicyParams, PromptId, TokenId};

pub type ClassId = usize;

pub const THINK_OPEN: TokenId = 0;
pub const THINK_CLOSE: TokenId = 1;
pub const ANS_OPEN: TokenId = 2;
pub const ANS_CLOSE: TokenId = 3;
pub const EOS: TokenId = 4;
const FIRST_FILLER: TokenId = 5;

/// Logit offset applied to class tokens that are not listed in the prompt's
/// candidate vocabulary.
pub const CANDIDATE_MASK: f64 = -30.0;

/// Fixed logit of every class token at the answer slot. The answer slot has
/// no bias feature, so class scores differ only through the prompt features.
pub const ANSWER_PRIOR: f64 = 8.0;

const LEVEL_BITS: u32 = 8;

/// Packs a sample index and vocabulary level into a prompt id.
pub fn compose_prompt(sample: usize, vocab_level: usize) -> PromptId {
    ((sample as u64) << LEVEL_BITS) | vocab_level as u64
}

/// Inverse of [`compose_prompt`].
pub fn decompose_prompt(prompt: PromptId) -> (usize, usize) {
    (
        (prompt >> LEVEL_BITS) as usize,
        (prompt & ((1 << LEVEL_BITS) - 1)) as usize,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    Eos,
    Filler(usize),
    Class(ClassId),
}

/// Token layout of the output grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputGrammar {
    pub num_fillers: usize,
    pub num_classes: usize,
    pub max_filler_run: usize,
}

/// Position of a prefix inside the grammar. Anything that has left the
/// grammar (or already emitted EOS) is `OffGrammar`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Start,
    Think { run: usize, last_filler: Option<usize> },
    AfterThink { route: usize },
    AnswerSlot { route: usize },
    AfterAnswer,
    AfterClose,
    OffGrammar,
}

impl Stage {
    /// Index into the stage one-hot block of the feature vector.
    fn slot(self, max_run: usize) -> usize {
        match self {
            Stage::Start => 0,
            Stage::Think { run, .. } if run < max_run => 1,
            Stage::Think { .. } => 2,
            Stage::AfterThink { .. } => 3,
            Stage::AnswerSlot { .. } => 4,
            Stage::AfterAnswer => 5,
            Stage::AfterClose => 6,
            Stage::OffGrammar => 7,
        }
    }
}

pub const NUM_STAGES: usize = 8;

impl OutputGrammar {
    pub fn vocab_size(&self) -> usize {
        FIRST_FILLER + self.num_fillers + self.num_classes
    }

    pub fn filler(&self, i: usize) -> TokenId {
        assert!(i < self.num_fillers);
        FIRST_FILLER + i
    }

    pub fn class_token(&self, c: ClassId) -> TokenId {
        assert!(c < self.num_classes);
        FIRST_FILLER + self.num_fillers + c
    }

    pub fn kind(&self, tok: TokenId) -> Option<TokenKind> {
        Some(match tok {
            THINK_OPEN => TokenKind::ThinkOpen,
            THINK_CLOSE => TokenKind::ThinkClose,
            ANS_OPEN => TokenKind::AnswerOpen,
            ANS_CLOSE => TokenKind::AnswerClose,
            EOS => TokenKind::Eos,
            t if t < FIRST_FILLER + self.num_fillers => TokenKind::Filler(t - FIRST_FILLER),
            t if t < self.vocab_size() => TokenKind::Class(t - FIRST_FILLER - self.num_fillers),
            _ => return None,
        })
    }

    pub fn class_name(c: ClassId) -> String {
        format!("CLASS_{c}")
    }

    /// Walks a prefix through the grammar automaton.
    pub fn stage(&self, prefix: &[TokenId]) -> Stage {
        let mut stage = Stage::Start;
        for &tok in prefix {
            let kind = self.kind(tok);
            stage = match (stage, kind) {
                (Stage::Start, Some(TokenKind::ThinkOpen)) => Stage::Think {
                    run: 0,
                    last_filler: None,
                },
                (Stage::Think { run, .. }, Some(TokenKind::Filler(f)))
                    if run < self.max_filler_run =>
                {
                    Stage::Think {
                        run: run + 1,
                        last_filler: Some(f),
                    }
                }
                (Stage::Think { last_filler, .. }, Some(TokenKind::ThinkClose)) => {
                    Stage::AfterThink {
                        route: last_filler.map_or(0, |f| f + 1),
                    }
                }
                (Stage::AfterThink { route }, Some(TokenKind::AnswerOpen)) => {
                    Stage::AnswerSlot { route }
                }
                (Stage::AnswerSlot { .. }, Some(TokenKind::Class(_))) => Stage::AfterAnswer,
                (Stage::AfterAnswer, Some(TokenKind::AnswerClose)) => Stage::AfterClose,
                _ => Stage::OffGrammar,
            };
            if stage == Stage::OffGrammar {
                break;
            }
        }
        stage
    }

    /// Whether `tokens` is exactly one complete grammar sentence.
    pub fn is_format_valid(&self, tokens: &[TokenId]) -> bool {
        match tokens.split_last() {
            Some((&EOS, body)) => self.stage(body) == Stage::AfterClose,
            _ => false,
        }
    }

    /// The class emitted in the answer slot of a format-valid sequence.
    pub fn answer_class(&self, tokens: &[TokenId]) -> Option<ClassId> {
        if !self.is_format_valid(tokens) {
            return None;
        }
        match self.kind(tokens[tokens.len() - 3]) {
            Some(TokenKind::Class(c)) => Some(c),
            _ => None,
        }
    }

    /// Canonical sentence for `class` with the given filler ids in the think span.
    pub fn sentence(&self, class: ClassId, fillers: &[usize]) -> Vec<TokenId> {
        let mut out = vec![THINK_OPEN];
        out.extend(fillers.iter().map(|&f| self.filler(f)));
        out.extend([THINK_CLOSE, ANS_OPEN, self.class_token(class), ANS_CLOSE, EOS]);
        out
    }

    fn token_text(&self, tok: TokenId) -> String {
        match self.kind(tok) {
            Some(TokenKind::ThinkOpen) => "<think>".into(),
            Some(TokenKind::ThinkClose) => "</think>".into(),
            Some(TokenKind::AnswerOpen) => " <answer>".into(),
            Some(TokenKind::AnswerClose) => "</answer>".into(),
            Some(TokenKind::Eos) => String::new(),
            Some(TokenKind::Filler(f)) => format!("r{f}"),
            Some(TokenKind::Class(c)) => Self::class_name(c),
            None => format!("<unk{tok}>"),
        }
    }
}

/// Renders tokens as text. Well-formed sentences become
/// `<think>r0 r2</think> <answer>CLASS_k</answer>`; anything else is rendered
/// token by token, so malformed output fails the string-level format check.
pub fn detokenize(tokens: &[TokenId], grammar: &OutputGrammar) -> String {
    let mut out = String::new();
    let mut prev_filler = false;
    for &tok in tokens {
        let is_filler = matches!(grammar.kind(tok), Some(TokenKind::Filler(_)));
        if is_filler && prev_filler {
            out.push(' ');
        }
        out.push_str(&grammar.token_text(tok));
        prev_filler = is_filler;
    }
    out
}

/// Parameters of the synthetic stream and its feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub shots_per_class: usize,
    pub eval_per_class: usize,
    /// Dimension of the prompt embedding. The policy's feature dimension is
    /// `NUM_STAGES + (num_fillers + 2) * prompt_dim`.
    pub prompt_dim: usize,
    /// Standard deviation of the isotropic noise added to class prototypes.
    pub prompt_noise: f64,
    pub num_fillers: usize,
    pub max_filler_run: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            num_tasks: 10,
            classes_per_task: 5,
            shots_per_class: 5,
            eval_per_class: 40,
            prompt_dim: 12,
            prompt_noise: 0.2,
            num_fillers: 3,
            max_filler_run: 6,
        }
    }
}

/// Maximum number of classes the answer-token block supports.
pub const MAX_CLASSES: usize = 240;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class: ClassId,
    pub split: Split,
    pub embedding: Vec<f64>,
}

/// Shape of the initial policy; see [`TaskStream::pretrained_policy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainedInit {
    pub strength: f64,
    pub zero_shot_scale: f64,
    pub zero_shot_noise: f64,
    pub off_route_gain: f64,
    pub route_scale: f64,
}

impl Default for PretrainedInit {
    fn default() -> Self {
        PretrainedInit {
            strength: 8.0,
            zero_shot_scale: 3.0,
            zero_shot_noise: 0.5,
            off_route_gain: 0.0,
            route_scale: 4.0,
        }
    }
}

/// Immutable description of the task stream plus an access audit.
#[derive(Debug)]
pub struct TaskStream {
    config: StreamConfig,
    seed: u64,
    grammar: OutputGrammar,
    /// `class_to_task[c]` is the 1-based task index of class `c`.
    class_to_task: Vec<usize>,
    task_classes: Vec<Vec<ClassId>>,
    samples: Vec<Sample>,
    train_by_task: Vec<Vec<usize>>,
    eval_by_task: Vec<Vec<usize>>,
    prototypes: Vec<Vec<f64>>,
    train_reads: Vec<AtomicUsize>,
}

impl TaskStream {
    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grammar(&self) -> &OutputGrammar {
        &self.grammar
    }

    pub fn num_tasks(&self) -> usize {
        self.config.num_tasks
    }

    pub fn num_classes(&self) -> usize {
        self.class_to_task.len()
    }

    pub fn feature_dim(&self) -> usize {
        NUM_STAGES + (self.num_routes() + 1) * self.config.prompt_dim
    }

    /// Routes are numbered `0..num_routes()`: 0 for an empty think span,
    /// otherwise one plus the last filler.
    pub fn num_routes(&self) -> usize {
        self.config.num_fillers + 1
    }

    /// Maximum rollout length: a sentence with a full filler run.
    pub fn max_len(&self) -> usize {
        self.config.max_filler_run + 6
    }

    pub fn class_to_task(&self) -> &[usize] {
        &self.class_to_task
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_tasks() {
            return Err(Error::input(format!(
                "task index {t} outside 1..={}",
                self.num_tasks()
            )));
        }
        Ok(())
    }

    pub fn task_classes(&self, t: usize) -> Result<&[ClassId]> {
        self.check_task(t)?;
        Ok(&self.task_classes[t - 1])
    }

    /// Union of the class sets of tasks `1..=t`.
    pub fn candidate_vocabulary(&self, t: usize) -> Result<BTreeSet<ClassId>> {
        self.check_task(t)?;
        Ok(self.task_classes[..t].iter().flatten().copied().collect())
    }

    /// Normalized-name view of [`candidate_vocabulary`](Self::candidate_vocabulary)
    /// for the string verifiers.
    pub fn candidate_names(&self, t: usize) -> Result<BTreeSet<String>> {
        Ok(self
            .candidate_vocabulary(t)?
            .into_iter()
            .map(OutputGrammar::class_name)
            .collect())
    }

    /// Training prompts of task `t`, presented with vocabulary level `t`.
    /// Every call is recorded in the access audit.
    pub fn train_prompts(&self, t: usize) -> Result<Vec<(PromptId, ClassId)>> {
        self.check_task(t)?;
        self.train_reads[t - 1].fetch_add(1, Ordering::Relaxed);
        Ok(self.train_by_task[t - 1]
            .iter()
            .map(|&s| (compose_prompt(s, t), self.samples[s].class))
            .collect())
    }

    /// Held-out prompts of task `task` presented with vocabulary level `level`.
    pub fn eval_prompts(&self, task: usize, level: usize) -> Result<Vec<(PromptId, ClassId)>> {
        self.check_task(task)?;
        self.check_task(level)?;
        if level < task {
            return Err(Error::input(format!(
                "task {task} cannot be evaluated before it is observed (level {level})"
            )));
        }
        Ok(self.eval_by_task[task - 1]
            .iter()
            .map(|&s| (compose_prompt(s, level), self.samples[s].class))
            .collect())
    }

    /// Number of `train_prompts` calls per task so far.
    pub fn train_access_counts(&self) -> Vec<usize> {
        self.train_reads
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn feature_map(&self) -> GrammarFeatures<'_> {
        GrammarFeatures { stream: self }
    }

    /// Unit-norm class prototypes that prompts are drawn around.
    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    /// Random unit directions, one per route, that the pretrained think
    /// policy scores prompts against.
    pub fn route_directions(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0x524f_5554]));
        (0..self.num_routes())
            .map(|_| unit_gaussian(&mut rng, self.config.prompt_dim))
            .collect()
    }

    /// The route whose direction best matches a class prototype.
    pub fn native_routes(&self) -> Vec<usize> {
        let dirs = self.route_directions();
        self.prototypes.iter().map(|u| argmax_class(&dirs, u)).collect()
    }

    /// Initial policy that already follows the output grammar and has a
    /// prompt-dependent reasoning habit.
    ///
    /// Every allowed token at a stage gets logit `init.strength`. While
    /// thinking, closing the span and each filler additionally score the
    /// prompt against their route's direction, scaled by `init.route_scale`,
    /// so similar prompts tend to take the same route. The answer blocks hold
    /// a corrupted copy of the class prototypes (`init.zero_shot_scale` times
    /// prototype plus Gaussian noise of std `init.zero_shot_noise`), standing
    /// in for imperfect prior knowledge of the class names: full strength on
    /// the class's native route, `init.off_route_gain` times that elsewhere.
    pub fn pretrained_policy(&self, init: &PretrainedInit) -> PolicyParams {
        let g = &self.grammar;
        let p = self.config.prompt_dim;
        let strength = init.strength;
        let mut w = Matrix::zeros(self.feature_dim(), g.vocab_size());
        w.set(0, THINK_OPEN, strength);
        w.set(1, THINK_CLOSE, strength);
        for f in 0..g.num_fillers {
            w.set(1, g.filler(f), strength);
        }
        w.set(2, THINK_CLOSE, strength);
        w.set(3, ANS_OPEN, strength);
        w.set(5, ANS_CLOSE, strength);
        w.set(6, EOS, strength);
        w.set(7, EOS, strength);

        let dirs = self.route_directions();
        for (route, dir) in dirs.iter().enumerate() {
            let tok = if route == 0 { THINK_CLOSE } else { g.filler(route - 1) };
            for (i, v) in dir.iter().enumerate() {
                w.set(NUM_STAGES + i, tok, init.route_scale * v);
            }
        }

        if init.zero_shot_scale != 0.0 {
            let native = self.native_routes();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0x5a53]));
            for (c, proto) in self.prototypes.iter().enumerate() {
                let noisy: Vec<f64> = proto
                    .iter()
                    .map(|u| init.zero_shot_scale * (u + init.zero_shot_noise * gaussian(&mut rng)))
                    .collect();
                for route in 0..self.num_routes() {
                    let gain = if route == native[c] { 1.0 } else { init.off_route_gain };
                    let off = NUM_STAGES + p * (1 + route);
                    for (i, v) in noisy.iter().enumerate() {
                        w.set(off + i, g.class_token(c), gain * v);
                    }
                }
            }
        }
        PolicyParams::from_weights(w, self.max_len()).expect("valid pretrained shape")
    }

    /// Writes the stream as `task,class,prompt_id,split` rows preceded by
    /// `#`-comment lines describing the configuration.
    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        writeln!(w, "# rapo task stream")?;
        writeln!(
            w,
            "# seed={} num_tasks={} classes_per_task={} shots_per_class={} eval_per_class={}",
            self.seed, c.num_tasks, c.classes_per_task, c.shots_per_class, c.eval_per_class
        )?;
        writeln!(w, "task,class,prompt_id,split")?;
        for t in 1..=self.num_tasks() {
            for (pool, split) in [
                (&self.train_by_task[t - 1], "train"),
                (&self.eval_by_task[t - 1], "eval"),
            ] {
                for &s in pool {
                    let level = t;
                    writeln!(
                        w,
                        "{t},{},{},{split}",
                        OutputGrammar::class_name(self.samples[s].class),
                        compose_prompt(s, level)
                    )?;
                }
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn argmax_class(prototypes: &[Vec<f64>], x: &[f64]) -> ClassId {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (c, u) in prototypes.iter().enumerate() {
        let v: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    best
}

/// Builds the class partition and prompt pools. Deterministic in `seed`.
pub fn build_stream(config: &StreamConfig, seed: u64) -> Result<TaskStream> {
    let num_classes = config.num_tasks * config.classes_per_task;
    if config.num_tasks == 0 || config.classes_per_task == 0 || config.shots_per_class == 0 {
        return Err(Error::config("num_tasks, classes_per_task and shots_per_class must be positive"));
    }
    if num_classes > MAX_CLASSES {
        return Err(Error::config(format!(
            "{num_classes} classes exceed the answer-token capacity of {MAX_CLASSES}"
        )));
    }
    if config.num_tasks >= 1 << LEVEL_BITS {
        return Err(Error::config("too many tasks for the prompt id layout"));
    }
    if config.eval_per_class < config.shots_per_class {
        return Err(Error::config("eval_per_class must be at least shots_per_class"));
    }
    if config.prompt_dim == 0 || config.num_fillers == 0 {
        return Err(Error::config("prompt_dim and num_fillers must be positive"));
    }
    if !(config.prompt_noise >= 0.0) {
        return Err(Error::config("prompt_noise must be non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5354_5245_414d]));
    let dim = config.prompt_dim;

    let prototypes: Vec<Vec<f64>> = (0..num_classes).map(|_| unit_gaussian(&mut rng, dim)).collect();

    let mut order: Vec<ClassId> = (0..num_classes).collect();
    order.shuffle(&mut rng);
    let mut class_to_task = vec![0; num_classes];
    let task_classes: Vec<Vec<ClassId>> = order
        .chunks(config.classes_per_task)
        .enumerate()
        .map(|(i, chunk)| {
            let mut cs = chunk.to_vec();
            cs.sort_unstable();
            for &c in &cs {
                class_to_task[c] = i + 1;
            }
            cs
        })
        .collect();

    let mut samples = Vec::new();
    let mut train_by_task = vec![Vec::new(); config.num_tasks];
    let mut eval_by_task = vec![Vec::new(); config.num_tasks];
    for (t, classes) in task_classes.iter().enumerate() {
        for &c in classes {
            for (split, count) in [
                (Split::Train, config.shots_per_class),
                (Split::Eval, config.eval_per_class),
            ] {
                for _ in 0..count {
                    let embedding = loop {
                        let raw: Vec<f64> = prototypes[c]
                            .iter()
                            .map(|u| u + config.prompt_noise * gaussian(&mut rng))
                            .collect();
                        let scale = raw.iter().fold(1.0f64, |m, x| m.max(x.abs()));
                        let x: Vec<f64> = raw.into_iter().map(|v| v / scale).collect();
                        if argmax_class(&prototypes, &x) == c {
                            break x;
                        }
                    };
                    let idx = samples.len();
                    samples.push(Sample {
                        class: c,
                        split,
                        embedding,
                    });
                    match split {
                        Split::Train => train_by_task[t].push(idx),
                        Split::Eval => eval_by_task[t].push(idx),
                    }
                }
            }
        }
    }

    Ok(TaskStream {
        config: config.clone(),
        seed,
        grammar: OutputGrammar {
            num_fillers: config.num_fillers,
            num_classes,
            max_filler_run: config.max_filler_run,
        },
        class_to_task,
        task_classes,
        samples,
        train_by_task,
        eval_by_task,
        prototypes,
        train_reads: (0..config.num_tasks).map(|_| AtomicUsize::new(0)).collect(),
    })
}

/// Feature map of the synthetic stream.
///
/// Layout: a one-hot stage block of width [`NUM_STAGES`], a think block that
/// carries the prompt embedding while the policy is choosing reasoning
/// tokens, and one answer block per reasoning route. At the answer slot the
/// prompt embedding is written into the block of the route the think span
/// took, so each route has its own class weights.
#[derive(Debug, Clone, Copy)]
pub struct GrammarFeatures<'a> {
    stream: &'a TaskStream,
}

impl GrammarFeatures<'_> {
    /// Additive logit offsets for a context. At the answer slot every class
    /// token gets [`ANSWER_PRIOR`], and those outside the prompt's candidate
    /// vocabulary are additionally suppressed.
    pub fn candidate_offsets(&self, prompt: PromptId, prefix: &[TokenId], out: &mut [f64]) {
        let g = &self.stream.grammar;
        if let Stage::AnswerSlot { .. } = g.stage(prefix) {
            let (_, level) = decompose_prompt(prompt);
            for c in 0..g.num_classes {
                out[g.class_token(c)] += ANSWER_PRIOR;
                if self.stream.class_to_task[c] > level {
                    out[g.class_token(c)] += CANDIDATE_MASK;
                }
            }
        }
    }
}

impl FeatureMap for GrammarFeatures<'_> {
    fn dim(&self) -> usize {
        self.stream.feature_dim()
    }

    fn embed(&self, prompt: PromptId, prefix: &[TokenId], out: &mut [f64]) {
        out.fill(0.0);
        let s = self.stream;
        let stage = s.grammar.stage(prefix);
        if !matches!(stage, Stage::AnswerSlot { .. }) {
            out[stage.slot(s.config.max_filler_run)] = 1.0;
        }
        let (sample, _) = decompose_prompt(prompt);
        let Some(x) = s.samples.get(sample).map(|smp| &smp.embedding) else {
            return;
        };
        let p = s.config.prompt_dim;
        match stage {
            Stage::Think { run, .. } if run < s.config.max_filler_run => {
                out[NUM_STAGES..NUM_STAGES + p].copy_from_slice(x);
            }
            Stage::AnswerSlot { route } => {
                let off = NUM_STAGES + p * (1 + route);
                out[off..off + p].copy_from_slice(x);
            }
            _ => {}
        }
    }

    fn logit_offsets(&self, prompt: PromptId, prefix: &[TokenId], out: &mut [f64]) {
        self.candidate_offsets(prompt, prefix, out);
    }

    fn end_token(&self) -> Option<TokenId> {
        Some(EOS)
    }
}

/// Short human-readable summary, used by the examples.
pub fn describe(stream: &TaskStream) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} tasks x {} classes, {} shots/class, vocab {} tokens, feature dim {}",
        stream.num_tasks(),
        stream.config.classes_per_task,
        stream.config.shots_per_class,
        stream.grammar.vocab_size(),
        stream.feature_dim()
    );
    for t in 1..=stream.num_tasks() {
        let names: Vec<String> = stream.task_classes[t - 1]
            .iter()
            .map(|&c| OutputGrammar::class_name(c))
            .collect();
        let _ = writeln!(s, "  task {t}: {}", names.join(" "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StreamConfig {
        StreamConfig {
            num_tasks: 3,
            classes_per_task: 2,
            shots_per_class: 2,
            eval_per_class: 3,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn default_stream_counts() {
        let s = build_stream(&StreamConfig::default(), 1).unwrap();
        assert_eq!(s.num_classes(), 50);
        let train: usize = (1..=10).map(|t| s.train_prompts(t).unwrap().len()).sum();
        assert_eq!(train, 250);
        for t in 1..=10 {
            assert_eq!(s.eval_prompts(t, t).unwrap().len(), 200);
        }
        assert_eq!(s.feature_dim(), NUM_STAGES + 5 * 12);
    }

    #[test]
    fn same_seed_same_partition() {
        let a = build_stream(&StreamConfig::default(), 5).unwrap();
        let b = build_stream(&StreamConfig::default(), 5).unwrap();
        assert_eq!(a.class_to_task(), b.class_to_task());
        assert_eq!(a.samples(), b.samples());
        let c = build_stream(&StreamConfig::default(), 6).unwrap();
        assert_ne!(a.class_to_task(), c.class_to_task());
    }

    #[test]
    fn task_class_sets_are_disjoint() {
        let s = build_stream(&StreamConfig::default(), 2).unwrap();
        for a in 1..=10 {
            for b in (a + 1)..=10 {
                let x: BTreeSet<_> = s.task_classes(a).unwrap().iter().collect();
                assert!(s.task_classes(b).unwrap().iter().all(|c| !x.contains(c)));
            }
        }
    }

    #[test]
    fn candidate_vocabulary_grows_by_task() {
        let s = build_stream(&StreamConfig::default(), 3).unwrap();
        let first: BTreeSet<_> = s.task_classes(1).unwrap().iter().copied().collect();
        assert_eq!(s.candidate_vocabulary(1).unwrap(), first);
        assert_eq!(s.candidate_vocabulary(10).unwrap().len(), 50);
        for t in 1..=10 {
            let v = s.candidate_vocabulary(t).unwrap();
            assert_eq!(v.len(), 5 * t);
            assert!(v.iter().all(|&c| s.class_to_task()[c] <= t));
        }
        assert!(s.candidate_vocabulary(0).is_err());
        assert!(s.candidate_vocabulary(11).is_err());
    }

    #[test]
    fn eval_gold_stays_in_later_vocabularies() {
        let s = build_stream(&small(), 4).unwrap();
        for t in 1..=3 {
            for level in t..=3 {
                let vocab = s.candidate_vocabulary(level).unwrap();
                for (_, gold) in s.eval_prompts(t, level).unwrap() {
                    assert!(vocab.contains(&gold));
                }
            }
            if t > 1 {
                assert!(s.eval_prompts(t, t - 1).is_err());
            }
        }
    }

    #[test]
    fn train_prompts_belong_to_requested_task_and_are_audited() {
        let s = build_stream(&small(), 4).unwrap();
        let classes: BTreeSet<_> = s.task_classes(2).unwrap().iter().copied().collect();
        for (_, c) in s.train_prompts(2).unwrap() {
            assert!(classes.contains(&c));
        }
        assert_eq!(s.train_access_counts(), vec![0, 1, 0]);
    }

    #[test]
    fn gold_follows_planted_rule() {
        // Samples were rejection-sampled so that the nearest prototype is the
        // gold class; embeddings are bounded.
        let s = build_stream(&StreamConfig::default(), 9).unwrap();
        for smp in s.samples() {
            assert!(smp.embedding.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn capacity_is_checked() {
        let cfg = StreamConfig {
            num_tasks: 50,
            classes_per_task: 5,
            ..StreamConfig::default()
        };
        assert!(matches!(build_stream(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn detokenize_valid_sentence() {
        let g = OutputGrammar {
            num_fillers: 2,
            num_classes: 5,
            max_filler_run: 6,
        };
        let toks = vec![THINK_OPEN, THINK_CLOSE, ANS_OPEN, g.class_token(3), ANS_CLOSE, EOS];
        assert!(g.is_format_valid(&toks));
        assert_eq!(detokenize(&toks, &g), "<think></think> <answer>CLASS_3</answer>");
        let with_think = g.sentence(1, &[0, 1]);
        assert_eq!(
            detokenize(&with_think, &g),
            "<think>r0 r1</think> <answer>CLASS_1</answer>"
        );
        assert_eq!(g.answer_class(&with_think), Some(1));
    }

    #[test]
    fn detokenize_missing_close_tag() {
        let g = OutputGrammar {
            num_fillers: 2,
            num_classes: 5,
            max_filler_run: 6,
        };
        let toks = vec![THINK_OPEN, THINK_CLOSE, ANS_OPEN, g.class_token(3), EOS];
        assert!(!g.is_format_valid(&toks));
        let text = detokenize(&toks, &g);
        assert!(!text.contains("</answer>"));
    }

    #[test]
    fn detokenize_is_injective_on_valid_sentences() {
        let g = OutputGrammar {
            num_fillers: 2,
            num_classes: 3,
            max_filler_run: 3,
        };
        let mut seen = std::collections::HashMap::new();
        let mut runs: Vec<Vec<usize>> = vec![vec![]];
        for len in 1..=3 {
            let mut next = Vec::new();
            for r in runs.iter().filter(|r| r.len() == len - 1) {
                for f in 0..2 {
                    let mut x = r.clone();
                    x.push(f);
                    next.push(x);
                }
            }
            runs.extend(next);
        }
        for run in &runs {
            for c in 0..3 {
                let toks = g.sentence(c, run);
                assert!(g.is_format_valid(&toks));
                let text = detokenize(&toks, &g);
                if let Some(prev) = seen.insert(text.clone(), toks.clone()) {
                    panic!("{text} produced by {prev:?} and {toks:?}");
                }
            }
        }
        assert_eq!(seen.len(), runs.len() * 3);
    }

    #[test]
    fn filler_run_cap_is_enforced() {
        let g = OutputGrammar {
            num_fillers: 1,
            num_classes: 2,
            max_filler_run: 2,
        };
        assert!(g.is_format_valid(&g.sentence(0, &[0, 0])));
        assert!(!g.is_format_valid(&g.sentence(0, &[0, 0, 0])));
    }

    #[test]
    fn features_are_bounded_and_deterministic() {
        let s = build_stream(&small(), 8).unwrap();
        let fmap = s.feature_map();
        let g = s.grammar();
        let p = compose_prompt(0, 1);
        let sentence = g.sentence(0, &[1, 0]);
        let mut a = vec![0.0; fmap.dim()];
        let mut b = vec![0.0; fmap.dim()];
        for k in 0..=sentence.len() {
            fmap.embed(p, &sentence[..k], &mut a);
            fmap.embed(p, &sentence[..k], &mut b);
            assert_eq!(a, b);
            assert!(a.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn candidate_mask_hides_future_classes() {
        let s = build_stream(&small(), 8).unwrap();
        let fmap = s.feature_map();
        let g = s.grammar();
        let prefix = [THINK_OPEN, THINK_CLOSE, ANS_OPEN];
        let mut off = vec![0.0; g.vocab_size()];
        fmap.logit_offsets(compose_prompt(0, 1), &prefix, &mut off);
        for c in 0..g.num_classes {
            let expect = if s.class_to_task()[c] == 1 { ANSWER_PRIOR } else { ANSWER_PRIOR + CANDIDATE_MASK };
            assert_eq!(off[g.class_token(c)], expect);
        }
        let mut off3 = vec![0.0; g.vocab_size()];
        fmap.logit_offsets(compose_prompt(0, 3), &prefix, &mut off3);
        for c in 0..g.num_classes {
            assert_eq!(off3[g.class_token(c)], ANSWER_PRIOR);
        }
    }

    #[test]
    fn prompt_id_round_trip() {
        assert_eq!(decompose_prompt(compose_prompt(1234, 7)), (1234, 7));
    }

    #[test]
    fn dump_lists_every_prompt() {
        let s = build_stream(&small(), 1).unwrap();
        let mut buf = Vec::new();
        s.dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows = text.lines().filter(|l| !l.starts_with('#')).count();
        assert_eq!(rows, 1 + s.samples().len());
        assert!(text.contains("task,class,prompt_id,split"));
    }
}
