//! Training loops for language representations (span corruption), task
//! representations (supervised) and backbone pretraining.
//!
//! Batches are a pure function of `(seed, step)`: each epoch is a fresh
//! permutation of the data (drop-last), and the corruption of the `i`-th
//! example of step `s` uses its own random stream. Resuming therefore only
//! needs the trainable tensors, optimizer state and step count.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{FreezeMask, Gradients, Group, Mat, ParamKey};
use crate::checkpoint::{artifact_checkpoint, Checkpoint};
use crate::data::{self, fit_input, TaskKind, TextToTextExample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TinyTransformer};
use crate::objective::{span_corrupt, CorruptionSpec};
use crate::optim::{Optimizer, OptimizerKind};
use crate::peft::{
    assemble, assemble_language, init_soft_prompt, AdapterStack, Artifact, ArtifactKind, PeftConfiguration,
    PeftState, Role, Variant,
};
use crate::rng;
use crate::tokenizer::{TokenId, Vocab};

pub type Pair = (Vec<TokenId>, Vec<TokenId>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Language,
    Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub optimizer: OptimizerKind,
    pub eval_every_steps: usize,
    pub max_input_length: usize,
    pub seed: u64,
}

impl TrainingHyperparams {
    /// Published full-scale values.
    pub fn paper(kind: ArtifactKind, phase: Phase) -> Self {
        let (learning_rate, weight_decay, optimizer) = match kind {
            ArtifactKind::Adapter => (5e-5, 0.0, OptimizerKind::Adamw),
            ArtifactKind::Prompt => (5e-1, 1e-5, OptimizerKind::Adafactor),
        };
        let (total_steps, eval_every_steps) = match phase {
            Phase::Language => (100_000, 500),
            Phase::Task => (50_000, 1000),
        };
        Self {
            learning_rate,
            weight_decay,
            batch_size: 32,
            total_steps,
            optimizer,
            eval_every_steps,
            max_input_length: 256,
            seed: 0,
        }
    }

    /// Desk-scale defaults: 2000 steps, evaluation every 50, batch 8.
    /// Adapters use a larger learning rate than the published one so that
    /// they move measurably in 2000 steps.
    pub fn desk(kind: ArtifactKind) -> Self {
        let mut hp = Self::paper(kind, Phase::Task);
        hp.total_steps = 2000;
        hp.eval_every_steps = 50;
        hp.batch_size = 8;
        if kind == ArtifactKind::Adapter {
            hp.learning_rate = 1e-3;
        }
        hp
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("hyperparameter {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_every_steps == 0 {
            return bad("eval_every_steps must be positive");
        }
        if self.total_steps > 0 && self.eval_every_steps > self.total_steps {
            return bad("eval_every_steps must not exceed total_steps");
        }
        if self.max_input_length == 0 {
            return bad("max_input_length must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    /// Mean training loss of the updates since the previous evaluation
    /// (the first batch's loss at step 0).
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub variant: Option<Variant>,
    pub hyperparams: TrainingHyperparams,
    pub dir: Option<PathBuf>,
    pub history: Vec<HistoryRow>,
    /// Loss of every update, in order.
    pub train_losses: Vec<f64>,
    pub best_step: usize,
    pub best_val_loss: f64,
    /// Trained artifact at the best step.
    pub best: Artifact,
    /// Trained artifact after the last step.
    pub last: Artifact,
    /// Every installed PEFT tensor after the final step.
    pub final_state: PeftState,
    /// Updates executed by this invocation (excludes resumed steps).
    pub steps_executed: usize,
}

/// Mean of the last `window` values ending at position `end` (exclusive).
pub fn smoothed(losses: &[f64], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let s = &losses[start..end];
    s.iter().sum::<f64>() / s.len() as f64
}

/// Data indices for `step`: position `step · B .. (step + 1) · B` of the
/// concatenated per-epoch permutations, each epoch dropping its remainder.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Result<Vec<usize>> {
    if n < batch {
        return Err(Error::EmptyDataset(format!(
            "{n} training records for batch size {batch}"
        )));
    }
    let per_epoch = n / batch;
    let epoch = step / per_epoch;
    let offset = (step % per_epoch) * batch;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream_at(seed, "shuffle", epoch as u64));
    Ok(perm[offset..offset + batch].to_vec())
}

/// Something whose trainable tensors the loop updates.
trait Trainee {
    fn loss_and_grad(&self, batch: &[Pair]) -> Result<(f64, Gradients)>;
    fn loss(&self, pairs: &[Pair]) -> Result<f64>;
    fn param_mut(&mut self, key: ParamKey) -> Option<&mut Mat>;
    /// `(name, key, value)` of every trainable tensor.
    fn trainable(&self) -> Vec<(String, ParamKey, Mat)>;
}

struct PeftTrainee<'m> {
    model: &'m TinyTransformer,
    state: PeftState,
    mask: FreezeMask,
}

impl Trainee for PeftTrainee<'_> {
    fn loss_and_grad(&self, batch: &[Pair]) -> Result<(f64, Gradients)> {
        self.model.batch_loss_and_grad(batch, &self.state, &self.mask)
    }

    fn loss(&self, pairs: &[Pair]) -> Result<f64> {
        self.model.batch_loss(pairs, &self.state)
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut Mat> {
        if !self.mask.contains(&key.group) {
            return None;
        }
        self.state.tensor_mut(key)
    }

    fn trainable(&self) -> Vec<(String, ParamKey, Mat)> {
        self.state
            .tensors()
            .into_iter()
            .filter(|(k, _, _)| self.mask.contains(&k.group))
            .map(|(k, n, m)| (n, k, m.clone()))
            .collect()
    }
}

impl PeftTrainee<'_> {
    /// Every tensor outside the freeze mask, backbone included.
    fn frozen(&self) -> Vec<(String, Mat)> {
        let mut out: Vec<(String, Mat)> = self
            .model
            .tensors()
            .map(|(_, n, m)| (n.to_string(), m.clone()))
            .collect();
        out.extend(
            self.state
                .tensors()
                .into_iter()
                .filter(|(k, _, _)| !self.mask.contains(&k.group))
                .map(|(_, n, m)| (n, m.clone())),
        );
        out
    }

    fn check_frozen(&self, before: &[(String, Mat)]) -> Result<()> {
        let after = self.frozen();
        if after.len() != before.len() {
            return Err(Error::FreezeViolation("frozen tensor set".into()));
        }
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Err(Error::FreezeViolation(name.clone()));
            }
        }
        Ok(())
    }
}

struct BackboneTrainee {
    model: TinyTransformer,
    empty: PeftState,
    mask: FreezeMask,
}

impl Trainee for BackboneTrainee {
    fn loss_and_grad(&self, batch: &[Pair]) -> Result<(f64, Gradients)> {
        self.model.batch_loss_and_grad(batch, &self.empty, &self.mask)
    }

    fn loss(&self, pairs: &[Pair]) -> Result<f64> {
        self.model.batch_loss(pairs, &self.empty)
    }

    fn param_mut(&mut self, key: ParamKey) -> Option<&mut Mat> {
        self.model.tensor_mut(key)
    }

    fn trainable(&self) -> Vec<(String, ParamKey, Mat)> {
        self.model
            .tensors()
            .map(|(k, n, m)| (n.to_string(), k, m.clone()))
            .collect()
    }
}

fn restore_trainee(trainee: &mut dyn Trainee, ck: &Checkpoint, prefix: &str) -> Result<()> {
    let current = trainee.trainable();
    let mut plan = Vec::new();
    for (name, key, value) in &current {
        let stored = ck
            .get(&format!("{prefix}{name}"))
            .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor `{prefix}{name}`")))?;
        if stored.dim() != value.dim() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: value.shape().to_vec(),
                actual: stored.shape().to_vec(),
            });
        }
        plan.push((*key, stored));
    }
    for (key, stored) in plan {
        trainee.param_mut(key).expect("trainable key").assign(stored);
    }
    Ok(())
}

/// Where the loop writes its files, and an optional state to resume from.
#[derive(Debug, Clone, Default)]
pub struct RunFiles {
    pub dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps even if `total_steps` is larger;
    /// the state file then allows resuming. Used to exercise resumption.
    pub stop_at: Option<usize>,
}

pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const MANIFEST_FILE: &str = "run.json";

struct LoopOutcome {
    history: Vec<HistoryRow>,
    train_losses: Vec<f64>,
    best_step: usize,
    best_val_loss: f64,
    best: Vec<(String, ParamKey, Mat)>,
    steps_executed: usize,
}

fn state_checkpoint(
    trainee: &dyn Trainee,
    optimizer: &Optimizer,
    step: usize,
    history: &[HistoryRow],
    train_losses: &[f64],
    best: &(usize, f64, Vec<(String, ParamKey, Mat)>),
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.metadata.insert("step".into(), step.to_string());
    ck.metadata.insert("history".into(), serde_json::to_string(history)?);
    ck.metadata.insert("train_losses".into(), serde_json::to_string(train_losses)?);
    ck.metadata.insert("best_step".into(), best.0.to_string());
    ck.metadata.insert("best_val_loss".into(), serde_json::to_string(&best.1)?);
    for (name, _, m) in trainee.trainable() {
        ck.push(name, m);
    }
    for (name, _, m) in &best.2 {
        ck.push(format!("best.{name}"), m.clone());
    }
    for (name, m) in optimizer.state_tensors() {
        ck.push(name, m);
    }
    Ok(ck)
}

fn run_loop(
    trainee: &mut dyn Trainee,
    hp: &TrainingHyperparams,
    n_data: usize,
    example: &dyn Fn(u64, usize) -> Result<Pair>,
    val: &[Pair],
    files: &RunFiles,
) -> Result<LoopOutcome> {
    hp.validate()?;
    if n_data == 0 {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    let mut optimizer = Optimizer::new(hp.optimizer, hp.learning_rate, hp.weight_decay);
    let mut step = 0usize;
    let mut history: Vec<HistoryRow> = Vec::new();
    let mut train_losses: Vec<f64> = Vec::new();
    let mut best: (usize, f64, Vec<(String, ParamKey, Mat)>) = (0, f64::INFINITY, Vec::new());

    if let Some(path) = &files.resume {
        let ck = Checkpoint::load(path)?;
        let meta = |k: &str| -> Result<&str> { ck.meta(k) };
        step = meta("step")?
            .parse()
            .map_err(|_| Error::CheckpointFormat("bad step".into()))?;
        history = serde_json::from_str(meta("history")?)?;
        train_losses = serde_json::from_str(meta("train_losses")?)?;
        best.0 = meta("best_step")?
            .parse()
            .map_err(|_| Error::CheckpointFormat("bad best_step".into()))?;
        best.1 = serde_json::from_str(meta("best_val_loss")?)?;
        restore_trainee(trainee, &ck, "")?;
        best.2 = trainee
            .trainable()
            .into_iter()
            .map(|(n, k, m)| {
                let stored = ck
                    .get(&format!("best.{n}"))
                    .cloned()
                    .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor `best.{n}`")))?;
                if stored.dim() != m.dim() {
                    return Err(Error::ShapeMismatch {
                        name: n.clone(),
                        expected: m.shape().to_vec(),
                        actual: stored.shape().to_vec(),
                    });
                }
                Ok((n, k, stored))
            })
            .collect::<Result<_>>()?;
        let optim: Vec<(String, Mat)> = ck
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("optim."))
            .cloned()
            .collect();
        optimizer.load_state(&optim)?;
    }

    let end = files.stop_at.map_or(hp.total_steps, |s| s.min(hp.total_steps));
    let start = step;
    let evaluate = |trainee: &dyn Trainee, step: usize, train_loss: f64| -> Result<HistoryRow> {
        let val_loss = trainee.loss(val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        Ok(HistoryRow {
            step,
            train_loss,
            val_loss,
        })
    };

    if step == 0 && history.is_empty() {
        let batch = make_batch(hp, n_data, example, 0)?;
        let first = trainee.loss(&batch)?;
        let row = evaluate(trainee, 0, first)?;
        best = (0, row.val_loss, trainee.trainable());
        history.push(row);
    }

    while step < end {
        let batch = make_batch(hp, n_data, example, step)?;
        let (loss, grads) = trainee.loss_and_grad(&batch)?;
        if !loss.is_finite() || grads.values().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteLoss { step });
        }
        for (key, g) in &grads {
            let p = trainee
                .param_mut(*key)
                .ok_or_else(|| Error::InvalidInput(format!("gradient for frozen parameter {key:?}")))?;
            optimizer.update(*key, p, g)?;
        }
        train_losses.push(loss);
        step += 1;
        if step % hp.eval_every_steps == 0 || step == hp.total_steps {
            let last_eval = history.last().map_or(0, |r| r.step);
            let mean = smoothed(&train_losses, step, step - last_eval);
            let row = evaluate(trainee, step, mean)?;
            if row.val_loss < best.1 {
                best = (step, row.val_loss, trainee.trainable());
            }
            history.push(row);
            if let Some(dir) = &files.dir {
                state_checkpoint(trainee, &optimizer, step, &history, &train_losses, &best)?
                    .save(&dir.join(STATE_FILE))?;
            }
        }
    }
    if let Some(dir) = &files.dir {
        if step % hp.eval_every_steps != 0 && step != hp.total_steps {
            // Stopped early between evaluations: persist for resumption.
            state_checkpoint(trainee, &optimizer, step, &history, &train_losses, &best)?
                .save(&dir.join(STATE_FILE))?;
        }
        write_history(&history, &dir.join(HISTORY_FILE))?;
    }
    Ok(LoopOutcome {
        history,
        train_losses,
        best_step: best.0,
        best_val_loss: best.1,
        best: best.2,
        steps_executed: step - start,
    })
}

fn make_batch(
    hp: &TrainingHyperparams,
    n_data: usize,
    example: &dyn Fn(u64, usize) -> Result<Pair>,
    step: usize,
) -> Result<Vec<Pair>> {
    batch_indices(n_data, hp.batch_size, step, hp.seed)?
        .into_iter()
        .enumerate()
        .map(|(i, idx)| example((step * hp.batch_size + i) as u64, idx))
        .collect()
}

pub fn write_history(history: &[HistoryRow], path: &Path) -> Result<()> {
    let mut out = String::from("step\ttrain_loss\tval_loss\n");
    for r in history {
        out.push_str(&format!("{}\t{}\t{}\n", r.step, r.train_loss, r.val_loss));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a new artifact with the tensors of `trained` into a copy of
/// `template`.
fn artifact_with(template: &Artifact, trained: &[(String, ParamKey, Mat)]) -> Artifact {
    let mut state = PeftState::empty();
    state.install(template.clone());
    for (_, key, m) in trained {
        if let Some(slot) = state.tensor_mut(*key) {
            slot.assign(m);
        }
    }
    let group = template.kind().group(template.role());
    state.take(group).expect("installed above")
}

/// Token budget for source text once prompts are prepended.
fn source_budget(model: &TinyTransformer, state: &PeftState) -> Result<usize> {
    let max = model.config().max_input_length;
    max.checked_sub(state.prompt_len() + 1)
        .filter(|&b| b > 0)
        .ok_or(Error::LengthOverflow {
            len: state.prompt_len() + 1,
            max,
        })
}

/// Encoded unlabelled documents, cut to `budget` bytes.
fn corpus_ids(corpus: &[String], vocab: &Vocab, budget: usize) -> Vec<Vec<TokenId>> {
    corpus
        .iter()
        .map(|d| {
            let mut ids = vocab.encode_bare(d);
            ids.truncate(budget);
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect()
}

fn corrupt(ids: &[TokenId], vocab: &Vocab, seed: u64, stream: &str, index: u64) -> Result<Pair> {
    let mut rng = rng::stream_at(seed, stream, index);
    span_corrupt(ids, &CorruptionSpec::default(), vocab, &mut rng)
}

/// A fresh (untrained) language or task artifact.
pub fn init_artifact(
    model: &TinyTransformer,
    kind: ArtifactKind,
    role: Role,
    instruction: &str,
    bottleneck: usize,
    prompt_tokens: usize,
    seed: u64,
) -> Result<Artifact> {
    Ok(match kind {
        ArtifactKind::Adapter => Artifact::Adapter(AdapterStack::new(model.config(), bottleneck, role, seed)?),
        ArtifactKind::Prompt => Artifact::Prompt(init_soft_prompt(
            instruction,
            prompt_tokens,
            model.embedding(),
            model.vocab(),
            role,
        )?),
    })
}

/// Default adapter bottleneck: a quarter of the model width.
pub fn default_bottleneck(config: &ModelConfig) -> usize {
    (config.d_model / 4).max(1)
}

fn write_manifest(dir: &Path, manifest: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&path, e))
}

/// Span-corruption training of a language artifact on `corpus`; 15% of the
/// documents are held out for validation.
pub fn train_language_representation(
    model: &TinyTransformer,
    artifact: Artifact,
    corpus: &[String],
    hp: &TrainingHyperparams,
    files: &RunFiles,
) -> Result<TrainRun> {
    let template = artifact.clone();
    let assembly = assemble_language(model, artifact)?;
    let vocab = *model.vocab();
    let budget = source_budget(model, &assembly.state)?.min(hp.max_input_length.saturating_sub(1));
    let docs = corpus_ids(corpus, &vocab, budget);
    if docs.len() < 2 {
        return Err(Error::EmptyDataset("language corpus".into()));
    }
    let (train_docs, val_docs) = data::split_train_val(&docs, data::VALIDATION_FRACTION, hp.seed)?;
    let val: Vec<Pair> = val_docs
        .iter()
        .enumerate()
        .map(|(i, d)| corrupt(d, &vocab, hp.seed, "val_corrupt", i as u64))
        .collect::<Result<_>>()?;
    let example = |global: u64, idx: usize| corrupt(&train_docs[idx], &vocab, hp.seed, "corrupt", global);
    let mut trainee = PeftTrainee {
        model,
        state: assembly.state,
        mask: assembly.trainable,
    };
    let frozen = trainee.frozen();
    let out = run_loop(&mut trainee, hp, train_docs.len(), &example, &val, files)?;
    trainee.check_frozen(&frozen)?;
    finish_run(None, hp, files, out, &template, &trainee)
}

fn finish_run(
    variant: Option<Variant>,
    hp: &TrainingHyperparams,
    files: &RunFiles,
    out: LoopOutcome,
    template: &Artifact,
    trainee: &PeftTrainee<'_>,
) -> Result<TrainRun> {
    let best = artifact_with(template, &out.best);
    let last = artifact_with(template, &trainee.trainable());
    if let Some(dir) = &files.dir {
        artifact_checkpoint(&best).save(&dir.join(BEST_FILE))?;
        write_manifest(
            dir,
            &serde_json::json!({
                "variant": variant.map(Variant::name),
                "artifact": template.kind().name(),
                "role": match template.role() { Role::Language => "language", Role::Task => "task" },
                "hyperparams": hp,
                "seed": hp.seed,
                "best_step": out.best_step,
                "best_val_loss": out.best_val_loss,
                "steps_completed": out.train_losses.len(),
            }),
        )?;
    }
    Ok(TrainRun {
        variant,
        hyperparams: hp.clone(),
        dir: files.dir.clone(),
        history: out.history,
        train_losses: out.train_losses,
        best_step: out.best_step,
        best_val_loss: out.best_val_loss,
        best,
        last,
        final_state: trainee.state.clone(),
        steps_executed: out.steps_executed,
    })
}

/// Encodes templated examples, trimming QA contexts to the length budget.
pub fn encode_examples(examples: &[TextToTextExample], vocab: &Vocab, budget: usize) -> Result<Vec<Pair>> {
    examples
        .iter()
        .map(|ex| {
            if ex.task == TaskKind::Lm {
                return Err(Error::InvalidInput("task training needs labelled examples".into()));
            }
            let mut ex = ex.clone();
            fit_input(&mut ex, budget)?;
            Ok((vocab.encode(&ex.input_text), vocab.encode(&ex.target_text)))
        })
        .collect()
}

/// Supervised training of the configuration's task artifact.
pub fn train_task_representation(
    model: &TinyTransformer,
    config: PeftConfiguration,
    train: &[TextToTextExample],
    val: &[TextToTextExample],
    hp: &TrainingHyperparams,
    files: &RunFiles,
) -> Result<TrainRun> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    let variant = config.variant;
    let template = config.task.clone();
    let assembly = assemble(model, config)?;
    let vocab = *model.vocab();
    let budget = source_budget(model, &assembly.state)?.min(hp.max_input_length.saturating_sub(1));
    let train_pairs = encode_examples(train, &vocab, budget)?;
    let val_pairs = encode_examples(val, &vocab, budget)?;
    let example = |_: u64, idx: usize| Ok(train_pairs[idx].clone());
    let mut trainee = PeftTrainee {
        model,
        state: assembly.state,
        mask: assembly.trainable,
    };
    let frozen = trainee.frozen();
    let out = run_loop(&mut trainee, hp, train_pairs.len(), &example, &val_pairs, files)?;
    trainee.check_frozen(&frozen)?;
    finish_run(Some(variant), hp, files, out, &template, &trainee)
}

/// Settings for the generic backbone pretraining stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub documents: usize,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            documents: 4000,
            seed: 0,
        }
    }
}

/// Keyword prefixing the copy examples mixed into pretraining.
pub const COPY_KEYWORD: &str = "copy";

/// One pretraining pair for document `doc` (example `global` of the run):
/// span corruption of the document or a copy of its first few words.
pub fn pretrain_example(doc: &str, vocab: &Vocab, seed: u64, global: u64) -> Result<Pair> {
    let mut rng = rng::stream_at(seed, "pretrain_mix", global);
    if rng.random_bool(0.5) {
        return corrupt(&vocab.encode_bare(doc), vocab, seed, "pretrain_corrupt", global);
    }
    let words: Vec<&str> = doc.split_whitespace().collect();
    let take = rng.random_range(1..=words.len().min(6));
    let text = words[..take].join(" ");
    Ok((vocab.encode(&format!("{COPY_KEYWORD}: {text}")), vocab.encode(&text)))
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub history: Vec<HistoryRow>,
    pub train_losses: Vec<f64>,
}

/// Trains every backbone weight on span corruption plus copying
/// over the `generic` synthetic profile.
pub fn pretrain_backbone(config: &ModelConfig, spec: &PretrainSpec) -> Result<(TinyTransformer, PretrainReport)> {
    let model = TinyTransformer::new(config.clone())?;
    let vocab = *model.vocab();
    let profile = data::LanguageProfile::builtin("generic")?;
    let corpus = data::synth_corpus(&profile, spec.documents, spec.seed);
    let (train, val_docs) = data::split_train_val(&corpus, 0.05, spec.seed)?;
    let val: Vec<Pair> = val_docs
        .iter()
        .enumerate()
        .map(|(i, d)| pretrain_example(d, &vocab, spec.seed ^ 0xA5A5, i as u64))
        .collect::<Result<_>>()?;
    let hp = TrainingHyperparams {
        learning_rate: spec.learning_rate,
        weight_decay: 0.0,
        batch_size: spec.batch_size,
        total_steps: spec.steps,
        optimizer: OptimizerKind::Adamw,
        eval_every_steps: (spec.steps / 10).max(1),
        max_input_length: config.max_input_length,
        seed: spec.seed,
    };
    let example = |global: u64, idx: usize| pretrain_example(&train[idx], &vocab, spec.seed, global);
    let mut trainee = BackboneTrainee {
        model,
        empty: PeftState::empty(),
        mask: [Group::Backbone].into_iter().collect(),
    };
    let out = run_loop(&mut trainee, &hp, train.len(), &example, &val, &RunFiles::default())?;
    Ok((
        trainee.model,
        PretrainReport {
            history: out.history,
            train_losses: out.train_losses,
        },
    ))
}
