//! Experiment orchestration: backbone, language and task artifacts,
//! evaluation grid and reports, all cached under the output directory.
//!
//! Every artifact lives in a directory named after a digest of the config
//! sections it depends on plus its cell id, so a rerun finds finished work
//! and skips it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{artifact_from_checkpoint, backbone_checkpoint, backbone_from_checkpoint, Checkpoint};
use crate::config::{ExperimentConfig, LanguageSpec, TaskSpec};
use crate::data::{self, TextToTextExample};
use crate::error::{Error, Result};
use crate::evaluation::{
    aggregate_seeds, evaluate, result_rows, summarize, transfer_matrix, write_aggregate, write_heatmap,
    write_results, write_summary, Cell, CellId, EvalResult, GridSpec, TransferMatrix,
};
use crate::model::TinyTransformer;
use crate::peft::{assemble, Artifact, ArtifactKind, PeftConfiguration, Role, Variant};
use crate::training::{
    init_artifact, pretrain_backbone, train_language_representation, train_task_representation, write_history,
    Phase, RunFiles, TrainingHyperparams, BEST_FILE, STATE_FILE,
};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const RESULTS_FILE: &str = "results.tsv";
pub const AGGREGATE_FILE: &str = "aggregate.tsv";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const HEATMAP_FILE: &str = "heatmap.tsv";
pub const COMPLETENESS_FILE: &str = "completeness.txt";

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Overrides the configured output directory.
    pub output_dir: Option<PathBuf>,
    /// Overrides the configured seeds.
    pub seeds: Option<Vec<u64>>,
    pub force: bool,
    /// Worker threads for independent cells; 0 or 1 runs serially.
    pub jobs: usize,
}

/// What a `matrix` or `report` invocation produced.
#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub matrices: Vec<(u64, TransferMatrix)>,
    /// Optimizer updates run by this invocation, pretraining included.
    pub steps_executed: usize,
    /// Absent cells and baselines, labelled with their seed.
    pub missing: Vec<String>,
    pub requested: usize,
}

impl MatrixOutcome {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

pub struct Pipeline {
    config: ExperimentConfig,
    out: PathBuf,
    seeds: Vec<u64>,
    force: bool,
    jobs: usize,
    steps: AtomicUsize,
    /// Directories (re)built by this invocation; `--force` skips them too.
    fresh: Mutex<BTreeSet<PathBuf>>,
    locks: Mutex<BTreeMap<PathBuf, Arc<Mutex<()>>>>,
}

fn digest(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable key");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

fn kind_tag(kind: ArtifactKind) -> &'static str {
    kind.name()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn remove_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, options: PipelineOptions) -> Result<Self> {
        config.validate()?;
        let seeds = options.seeds.unwrap_or_else(|| config.seeds.clone());
        if seeds.is_empty() {
            return Err(Error::ConfigKey {
                key: "seeds".into(),
                reason: "at least one seed is required".into(),
            });
        }
        Ok(Self {
            out: options.output_dir.unwrap_or_else(|| config.output_dir.clone()),
            config,
            seeds,
            force: options.force,
            jobs: options.jobs.max(1),
            steps: AtomicUsize::new(0),
            fresh: Mutex::new(BTreeSet::new()),
            locks: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn steps_executed(&self) -> usize {
        self.steps.load(Ordering::SeqCst)
    }

    /// Whether finished work in `path` may be reused.
    fn reusable(&self, path: &Path) -> bool {
        !self.force || self.fresh.lock().expect("fresh set").contains(path)
    }

    fn mark_fresh(&self, path: &Path) {
        self.fresh.lock().expect("fresh set").insert(path.to_path_buf());
    }

    fn lock(&self, path: &Path) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table")
            .entry(path.to_path_buf())
            .or_default()
            .clone()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))
    }

    /// Runs `f` over `items` on the worker pool, keeping input order.
    fn parallel<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Result<Vec<R>> {
        if self.jobs == 1 {
            return Ok(items.iter().map(f).collect());
        }
        Ok(self.pool()?.install(|| items.par_iter().map(&f).collect()))
    }

    // ---- keys and paths -------------------------------------------------

    fn language_identity(&self, lang: &LanguageSpec) -> Result<serde_json::Value> {
        let corpus = match &lang.corpus {
            Some(p) => Some(file_digest(p)?),
            None => None,
        };
        Ok(json!({ "spec": lang, "corpus": corpus }))
    }

    fn task_identity(&self, task: &TaskSpec) -> Result<serde_json::Value> {
        let mut files = BTreeMap::new();
        for (lang, paths) in &task.datasets {
            files.insert(lang.clone(), (file_digest(&paths.train)?, file_digest(&paths.test)?));
        }
        Ok(json!({ "spec": task, "files": files }))
    }

    pub fn backbone_key(&self) -> String {
        digest(&json!({ "model": self.config.model, "pretrain": self.config.pretrain }))
    }

    pub fn backbone_dir(&self) -> PathBuf {
        self.out.join("backbone").join(self.backbone_key())
    }

    fn hyperparams(&self, phase: Phase, kind: ArtifactKind, seed: u64) -> TrainingHyperparams {
        let mut hp = self.config.hyperparams.get(phase, kind).clone();
        hp.seed = seed;
        hp
    }

    fn size_setting(&self, kind: ArtifactKind) -> usize {
        match kind {
            ArtifactKind::Adapter => self.config.peft.bottleneck_for(&self.config.model),
            ArtifactKind::Prompt => self.config.peft.prompt_tokens,
        }
    }

    fn language_key(&self, lang: &str, kind: ArtifactKind, seed: u64) -> Result<String> {
        let spec = self.config.language(lang)?;
        Ok(digest(&json!({
            "backbone": self.backbone_key(),
            "language": self.language_identity(spec)?,
            "kind": kind_tag(kind),
            "size": self.size_setting(kind),
            "hyperparams": self.hyperparams(Phase::Language, kind, seed),
        })))
    }

    pub fn language_dir(&self, lang: &str, kind: ArtifactKind, seed: u64) -> Result<PathBuf> {
        let key = self.language_key(lang, kind, seed)?;
        Ok(self
            .out
            .join("language")
            .join(format!("{lang}.{}.seed{seed}.{key}", kind_tag(kind))))
    }

    fn task_key(&self, task: &str, source: &str, variant: Variant, seed: u64) -> Result<String> {
        let spec = self.config.task(task)?;
        let language = match variant.language_kind() {
            Some(kind) => Some(self.language_key(source, kind, seed)?),
            None => None,
        };
        Ok(digest(&json!({
            "backbone": self.backbone_key(),
            "task": self.task_identity(spec)?,
            "source": self.language_identity(self.config.language(source)?)?,
            "variant": variant,
            "language_artifact": language,
            "size": self.size_setting(variant.task_kind()),
            "hyperparams": self.hyperparams(Phase::Task, variant.task_kind(), seed),
        })))
    }

    pub fn task_dir(&self, task: &str, source: &str, variant: Variant, seed: u64) -> Result<PathBuf> {
        let key = self.task_key(task, source, variant, seed)?;
        Ok(self
            .out
            .join("task")
            .join(format!("{task}.{variant}.{source}.seed{seed}.{key}")))
    }

    fn eval_path(&self, task: &str, variant: Variant, source: &str, target: &str, seed: u64) -> Result<PathBuf> {
        let language = match variant.language_kind() {
            Some(kind) => Some(self.language_key(target, kind, seed)?),
            None => None,
        };
        let key = digest(&json!({
            "task_artifact": self.task_key(task, source, variant, seed)?,
            "target_language_artifact": language,
            "target": self.language_identity(self.config.language(target)?)?,
        }));
        Ok(self.out.join("eval").join(format!("{key}.json")))
    }

    fn baseline_path(&self, task: &str, target: &str) -> Result<PathBuf> {
        let key = digest(&json!({
            "backbone": self.backbone_key(),
            "task": self.task_identity(self.config.task(task)?)?,
            "target": self.language_identity(self.config.language(target)?)?,
        }));
        Ok(self.out.join("eval").join(format!("baseline.{key}.json")))
    }

    // ---- data -----------------------------------------------------------

    /// Writes every language corpus and task dataset to `<out>/data`.
    pub fn synth(&self) -> Result<Vec<PathBuf>> {
        let dir = self.out.join("data");
        create_dir(&dir)?;
        let mut written = Vec::new();
        for lang in &self.config.languages {
            let path = dir.join(format!("{}.corpus.jsonl", lang.name));
            let docs: Vec<TextToTextExample> = lang
                .documents()?
                .into_iter()
                .map(|d| TextToTextExample::unlabelled(d, lang.name.clone()))
                .collect();
            data::save_dataset(&docs, &path)?;
            written.push(path);
            for task in &self.config.tasks {
                let (train, test) = task.examples(lang)?;
                for (split, set) in [("train", &train), ("test", &test)] {
                    let path = dir.join(format!("{}.{}.{split}.jsonl", task.name, lang.name));
                    data::save_dataset(set, &path)?;
                    written.push(path);
                }
            }
        }
        Ok(written)
    }

    // ---- training -------------------------------------------------------

    /// The pretrained backbone, trained on first use.
    pub fn backbone(&self) -> Result<TinyTransformer> {
        let dir = self.backbone_dir();
        let path = dir.join(BACKBONE_FILE);
        let lock = self.lock(&dir);
        let _guard = lock.lock().expect("backbone lock");
        if path.exists() && self.reusable(&dir) {
            return backbone_from_checkpoint(&Checkpoint::load(&path)?);
        }
        log::info!("pretraining backbone into {}", dir.display());
        let (model, report) = pretrain_backbone(&self.config.model, &self.config.pretrain)?;
        self.steps.fetch_add(report.train_losses.len(), Ordering::SeqCst);
        create_dir(&dir)?;
        write_history(&report.history, &dir.join("history.tsv"))?;
        backbone_checkpoint(&model)?.save(&path)?;
        self.mark_fresh(&dir);
        Ok(model)
    }

    fn load_artifact(&self, dir: &Path) -> Result<Option<Artifact>> {
        let path = dir.join(BEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        artifact_from_checkpoint(&Checkpoint::load(&path)?, &self.config.model).map(Some)
    }

    /// Files for a run in `dir`: resumes from an interrupted state, or wipes
    /// the directory first under `--force`.
    fn run_files(&self, dir: &Path) -> Result<RunFiles> {
        if !self.reusable(dir) {
            remove_dir(dir)?;
        }
        create_dir(dir)?;
        let state = dir.join(STATE_FILE);
        Ok(RunFiles {
            dir: Some(dir.to_path_buf()),
            resume: state.exists().then_some(state),
            stop_at: None,
        })
    }

    /// Trained language artifact; trains it when absent.
    pub fn language(&self, model: &TinyTransformer, lang: &str, kind: ArtifactKind, seed: u64) -> Result<Artifact> {
        let dir = self.language_dir(lang, kind, seed)?;
        let lock = self.lock(&dir);
        let _guard = lock.lock().expect("artifact lock");
        if self.reusable(&dir) {
            if let Some(a) = self.load_artifact(&dir)? {
                return Ok(a);
            }
        }
        let spec = self.config.language(lang)?;
        log::info!("training language {} {lang} seed {seed}", kind_tag(kind));
        let artifact = init_artifact(
            model,
            kind,
            Role::Language,
            &spec.instruction_text(),
            self.config.peft.bottleneck_for(&self.config.model),
            self.config.peft.prompt_tokens,
            seed,
        )?;
        let corpus = spec.documents()?;
        let hp = self.hyperparams(Phase::Language, kind, seed);
        let files = self.run_files(&dir)?;
        let run = train_language_representation(model, artifact, &corpus, &hp, &files)?;
        self.steps.fetch_add(run.steps_executed, Ordering::SeqCst);
        self.mark_fresh(&dir);
        Ok(run.best)
    }

    fn cached_language(&self, lang: &str, kind: ArtifactKind, seed: u64) -> Result<Option<Artifact>> {
        self.load_artifact(&self.language_dir(lang, kind, seed)?)
    }

    /// Trained task artifact for `variant` in `source`; trains it (and the
    /// source language artifact it stacks on) when absent.
    pub fn task(
        &self,
        model: &TinyTransformer,
        task: &str,
        source: &str,
        variant: Variant,
        seed: u64,
    ) -> Result<Artifact> {
        let dir = self.task_dir(task, source, variant, seed)?;
        let lock = self.lock(&dir);
        let _guard = lock.lock().expect("artifact lock");
        if self.reusable(&dir) {
            if let Some(a) = self.load_artifact(&dir)? {
                return Ok(a);
            }
        }
        let language = match variant.language_kind() {
            Some(kind) => Some(self.language(model, source, kind, seed)?),
            None => None,
        };
        let spec = self.config.task(task)?;
        log::info!("training {task} {variant} on {source} seed {seed}");
        let artifact = init_artifact(
            model,
            variant.task_kind(),
            Role::Task,
            &spec.instruction_text(source)?,
            self.config.peft.bottleneck_for(&self.config.model),
            self.config.peft.prompt_tokens,
            seed,
        )?;
        let (train, _) = spec.examples(self.config.language(source)?)?;
        let (train, val) = data::split_train_val(&train, data::VALIDATION_FRACTION, spec.data_seed)?;
        let hp = self.hyperparams(Phase::Task, variant.task_kind(), seed);
        let files = self.run_files(&dir)?;
        let config = PeftConfiguration {
            variant,
            language,
            task: artifact,
        };
        let run = train_task_representation(model, config, &train, &val, &hp, &files)?;
        self.steps.fetch_add(run.steps_executed, Ordering::SeqCst);
        self.mark_fresh(&dir);
        Ok(run.best)
    }

    // ---- evaluation -----------------------------------------------------

    fn grid(&self) -> GridSpec {
        let names = self.config.language_names();
        GridSpec {
            tasks: self.config.tasks.iter().map(|t| t.kind).collect(),
            variants: self.config.configurations.clone(),
            sources: names.clone(),
            targets: names,
        }
    }

    fn task_name(&self, id: &CellId) -> &str {
        &self
            .config
            .tasks
            .iter()
            .find(|t| t.kind == id.task)
            .expect("grid built from config")
            .name
    }

    fn read_eval(path: &Path) -> Result<Option<EvalResult>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    fn write_eval(path: &Path, result: &EvalResult) -> Result<()> {
        if let Some(dir) = path.parent() {
            create_dir(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(result)?).map_err(|e| Error::io(path, e))
    }

    /// Evaluates one cell from trained artifacts; `None` when an artifact
    /// is missing.
    fn evaluate_cell(&self, model: &TinyTransformer, id: &CellId, seed: u64) -> Result<Option<EvalResult>> {
        let task = self.task_name(id).to_string();
        let path = self.eval_path(&task, id.variant, &id.source, &id.target, seed)?;
        if self.reusable(&path) {
            if let Some(r) = Self::read_eval(&path)? {
                return Ok(Some(r));
            }
        }
        let Some(task_artifact) = self.load_artifact(&self.task_dir(&task, &id.source, id.variant, seed)?)? else {
            return Ok(None);
        };
        let language = match id.variant.language_kind() {
            Some(kind) => match self.cached_language(&id.target, kind, seed)? {
                Some(a) => Some(a),
                None => return Ok(None),
            },
            None => None,
        };
        let assembly = assemble(
            model,
            PeftConfiguration {
                variant: id.variant,
                language,
                task: task_artifact,
            },
        )?;
        let (_, test) = self.config.task(&task)?.examples(self.config.language(&id.target)?)?;
        let mut result = evaluate(model, &assembly.state, &test, id.task)?;
        result.variant = Some(id.variant);
        result.source_language = Some(id.source.clone());
        result.target_language = id.target.clone();
        Self::write_eval(&path, &result)?;
        self.mark_fresh(&path);
        Ok(Some(result))
    }

    fn evaluate_baseline(&self, model: &TinyTransformer, task: &TaskSpec, target: &str) -> Result<EvalResult> {
        let path = self.baseline_path(&task.name, target)?;
        if self.reusable(&path) {
            if let Some(r) = Self::read_eval(&path)? {
                return Ok(r);
            }
        }
        let (_, test) = task.examples(self.config.language(target)?)?;
        let assembly = crate::peft::Assembly::baseline(model);
        let mut result = evaluate(model, &assembly.state, &test, task.kind)?;
        result.target_language = target.to_string();
        Self::write_eval(&path, &result)?;
        self.mark_fresh(&path);
        Ok(result)
    }

    /// Trains whatever is missing, evaluates the full grid for every seed
    /// and writes the reports.
    pub fn matrix(&self) -> Result<MatrixOutcome> {
        let model = self.backbone()?;
        let mut errors: BTreeMap<String, String> = BTreeMap::new();

        let mut lang_jobs = Vec::new();
        for &seed in &self.seeds {
            for kind in [ArtifactKind::Adapter, ArtifactKind::Prompt] {
                if !self.config.configurations.iter().any(|v| v.language_kind() == Some(kind)) {
                    continue;
                }
                for lang in self.config.language_names() {
                    lang_jobs.push((lang, kind, seed));
                }
            }
        }
        let results = self.parallel(&lang_jobs, |(lang, kind, seed)| self.language(&model, lang, *kind, *seed))?;
        for ((lang, kind, seed), r) in lang_jobs.iter().zip(results) {
            if let Err(e) = r {
                log::warn!("language {} {lang} seed {seed}: {e}", kind_tag(*kind));
                errors.insert(format!("language/{lang}/{}/seed{seed}", kind_tag(*kind)), e.to_string());
            }
        }

        let mut task_jobs = Vec::new();
        for &seed in &self.seeds {
            for task in &self.config.tasks {
                for &variant in &self.config.configurations {
                    for source in self.config.language_names() {
                        task_jobs.push((task.name.clone(), source, variant, seed));
                    }
                }
            }
        }
        let results = self.parallel(&task_jobs, |(task, source, variant, seed)| {
            self.task(&model, task, source, *variant, *seed)
        })?;
        for ((task, source, variant, seed), r) in task_jobs.iter().zip(results) {
            if let Err(e) = r {
                log::warn!("task {task} {variant} {source} seed {seed}: {e}");
                errors.insert(format!("task/{task}/{variant}/{source}/seed{seed}"), e.to_string());
            }
        }

        self.collect(Some(&model), errors)
    }

    /// Builds the reports from cached evaluations only; nothing trains.
    pub fn report(&self) -> Result<MatrixOutcome> {
        self.collect(None, BTreeMap::new())
    }

    fn collect(&self, model: Option<&TinyTransformer>, errors: BTreeMap<String, String>) -> Result<MatrixOutcome> {
        let grid = self.grid();
        let cells: Vec<(CellId, u64)> = self
            .seeds
            .iter()
            .flat_map(|&s| grid.cells().into_iter().map(move |c| (c, s)))
            .collect();
        let evaluated = self.parallel(&cells, |(id, seed)| match model {
            Some(m) => self.evaluate_cell(m, id, *seed),
            None => {
                let task = self.task_name(id).to_string();
                Self::read_eval(&self.eval_path(&task, id.variant, &id.source, &id.target, *seed)?)
            }
        })?;
        let mut by_cell: BTreeMap<(CellId, u64), Result<Option<EvalResult>>> =
            cells.into_iter().zip(evaluated).collect();

        let baseline_jobs: Vec<(String, String)> = self
            .config
            .tasks
            .iter()
            .flat_map(|t| self.config.language_names().into_iter().map(move |l| (t.name.clone(), l)))
            .collect();
        let baselines = self.parallel(&baseline_jobs, |(task, target)| -> Result<Option<EvalResult>> {
            let spec = self.config.task(task)?;
            match model {
                Some(m) => self.evaluate_baseline(m, spec, target).map(Some),
                None => Self::read_eval(&self.baseline_path(task, target)?),
            }
        })?;
        let mut by_baseline: BTreeMap<(data::TaskKind, String), Result<Option<EvalResult>>> = baseline_jobs
            .iter()
            .zip(baselines)
            .map(|((task, target), r)| ((self.config.task(task).expect("listed").kind, target.clone()), r))
            .collect();

        let mut matrices = Vec::new();
        let mut missing = Vec::new();
        for (i, &seed) in self.seeds.iter().enumerate() {
            let matrix = transfer_matrix(
                &grid,
                |id| by_cell.remove(&(id.clone(), seed)).expect("evaluated above"),
                |task, target| {
                    // Baselines do not depend on the seed.
                    let key = (task, target.to_string());
                    if i + 1 == self.seeds.len() {
                        by_baseline.remove(&key).expect("evaluated above")
                    } else {
                        match by_baseline.get(&key).expect("evaluated above") {
                            Ok(r) => Ok(r.clone()),
                            Err(e) => Err(Error::InvalidInput(e.to_string())),
                        }
                    }
                },
            );
            missing.extend(matrix.absent().into_iter().map(|m| format!("seed {seed}: {m}")));
            matrices.push((seed, matrix));
        }
        for (what, why) in &errors {
            log::debug!("{what}: {why}");
        }
        let requested = self.seeds.len() * (grid.cells().len() + grid.baselines().len());
        let outcome = MatrixOutcome {
            matrices,
            steps_executed: self.steps_executed(),
            missing,
            requested,
        };
        self.write_reports(&outcome)?;
        Ok(outcome)
    }

    fn write_reports(&self, outcome: &MatrixOutcome) -> Result<()> {
        create_dir(&self.out)?;
        let rows: Vec<_> = outcome
            .matrices
            .iter()
            .flat_map(|(seed, m)| result_rows(m, *seed))
            .collect();
        write_results(&rows, &self.out.join(RESULTS_FILE))?;
        write_aggregate(&aggregate_seeds(&rows), &self.out.join(AGGREGATE_FILE))?;
        let mean = mean_matrix(&outcome.matrices);
        write_summary(&summarize(&mean), &self.out.join(SUMMARY_FILE))?;
        write_heatmap(&mean, &self.out.join(HEATMAP_FILE))?;
        let mut report = format!(
            "{} of {} requested cells present\n",
            outcome.requested - outcome.missing.len(),
            outcome.requested
        );
        for m in &outcome.missing {
            report.push_str(&format!("absent: {m}\n"));
        }
        let path = self.out.join(COMPLETENESS_FILE);
        fs::write(&path, report).map_err(|e| Error::io(&path, e))
    }
}

/// Cell-wise mean of the metrics over seeds; a cell absent in any seed is
/// absent in the mean.
pub fn mean_matrix(matrices: &[(u64, TransferMatrix)]) -> TransferMatrix {
    let (_, first) = &matrices[0];
    let mean_cell = |cells: Vec<&Cell>| -> Cell {
        let mut present = Vec::new();
        for c in cells {
            match c {
                Cell::Present(r) => present.push(r),
                Cell::Absent(why) => return Cell::Absent(why.clone()),
            }
        }
        let mut out = present[0].clone();
        for (name, value) in out.metrics.iter_mut() {
            *value = present.iter().map(|r| r.metrics[name]).sum::<f64>() / present.len() as f64;
        }
        Cell::Present(out)
    };
    let cells = first
        .cells
        .keys()
        .map(|id| (id.clone(), mean_cell(matrices.iter().map(|(_, m)| &m.cells[id]).collect())))
        .collect();
    let baselines = first
        .baselines
        .keys()
        .map(|k| (k.clone(), mean_cell(matrices.iter().map(|(_, m)| &m.baselines[k]).collect())))
        .collect();
    TransferMatrix {
        grid: first.grid.clone(),
        cells,
        baselines,
    }
}
