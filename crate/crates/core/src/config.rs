//! Declarative experiment configuration (TOML).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, LanguageProfile, TaskKind, TextToTextExample};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::peft::{ArtifactKind, Variant, DEFAULT_PROMPT_TOKENS};
use crate::training::{default_bottleneck, Phase, PretrainSpec, TrainingHyperparams};

pub const DEFAULT_LANGUAGE_INSTRUCTION: &str = "Generate the output in {Language}:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub configurations: Vec<Variant>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainSpec,
    #[serde(default)]
    pub peft: PeftSettings,
    pub languages: Vec<LanguageSpec>,
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub hyperparams: HyperparamTable,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftSettings {
    /// Adapter bottleneck; `0` means a quarter of `d_model`.
    #[serde(default)]
    pub bottleneck: usize,
    #[serde(default = "default_prompt_tokens")]
    pub prompt_tokens: usize,
}

fn default_prompt_tokens() -> usize {
    DEFAULT_PROMPT_TOKENS
}

impl Default for PeftSettings {
    fn default() -> Self {
        Self {
            bottleneck: 0,
            prompt_tokens: DEFAULT_PROMPT_TOKENS,
        }
    }
}

impl PeftSettings {
    pub fn bottleneck_for(&self, model: &ModelConfig) -> usize {
        if self.bottleneck == 0 {
            default_bottleneck(model)
        } else {
            self.bottleneck
        }
    }
}

/// One language: unlabelled text comes from a built-in synthetic profile or
/// from a corpus file (JSONL `text` records or plain lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
    #[serde(default = "default_language_instruction")]
    pub instruction: String,
}

fn default_corpus_size() -> usize {
    2000
}

fn default_language_instruction() -> String {
    DEFAULT_LANGUAGE_INSTRUCTION.to_string()
}

/// Train and test files for one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// One task: either generated (`generator = "toy_qa"`) for every language
/// or read from per-language dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub datasets: BTreeMap<String, DatasetPaths>,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub data_seed: u64,
    /// Initialization instruction with a `{Language}` placeholder; the
    /// built-in one for `kind` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    /// Must equal the built-in label set of `kind` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalizers: Option<Vec<String>>,
}

fn default_train_size() -> usize {
    600
}

fn default_test_size() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindHyperparams {
    pub adapter: TrainingHyperparams,
    pub prompt: TrainingHyperparams,
}

impl KindHyperparams {
    pub fn get(&self, kind: ArtifactKind) -> &TrainingHyperparams {
        match kind {
            ArtifactKind::Adapter => &self.adapter,
            ArtifactKind::Prompt => &self.prompt,
        }
    }
}

impl Default for KindHyperparams {
    fn default() -> Self {
        Self {
            adapter: TrainingHyperparams::desk(ArtifactKind::Adapter),
            prompt: TrainingHyperparams::desk(ArtifactKind::Prompt),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperparamTable {
    #[serde(default)]
    pub language: KindHyperparams,
    #[serde(default)]
    pub task: KindHyperparams,
}

impl HyperparamTable {
    pub fn get(&self, phase: Phase, kind: ArtifactKind) -> &TrainingHyperparams {
        match phase {
            Phase::Language => self.language.get(kind),
            Phase::Task => self.task.get(kind),
        }
    }
}

fn key_error(key: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::ConfigKey {
        key: key.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses TOML; schema errors name the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| key_error("<document>", e.message()))?;
        let config: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let key = e.path().to_string();
            key_error(key, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| key_error("<document>", e.to_string()))
    }

    /// Reads `path`; relative corpus and dataset paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for l in &mut self.languages {
            if let Some(c) = &mut l.corpus {
                fix(c);
            }
        }
        for t in &mut self.tasks {
            for d in t.datasets.values_mut() {
                fix(&mut d.train);
                fix(&mut d.test);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| key_error("model", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(key_error("seeds", "at least one seed is required"));
        }
        if self.configurations.is_empty() {
            return Err(key_error("configurations", "at least one configuration is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, v) in self.configurations.iter().enumerate() {
            if !seen.insert(*v) {
                return Err(key_error(format!("configurations[{i}]"), format!("duplicate `{v}`")));
            }
        }
        if self.peft.prompt_tokens == 0 {
            return Err(key_error("peft.prompt_tokens", "must be positive"));
        }
        if self.pretrain.steps == 0 || self.pretrain.batch_size == 0 || self.pretrain.documents < 2 {
            return Err(key_error("pretrain", "steps, batch_size and documents must be positive"));
        }
        if self.languages.is_empty() {
            return Err(key_error("languages", "at least one language is required"));
        }
        let mut names = BTreeSet::new();
        for (i, l) in self.languages.iter().enumerate() {
            let key = |f: &str| format!("languages[{i}].{f}");
            if l.name.is_empty() || l.name.contains(['/', '\\', '\t', '\n']) {
                return Err(key_error(key("name"), "must be a non-empty plain name"));
            }
            if !names.insert(l.name.as_str()) {
                return Err(key_error(key("name"), format!("duplicate language `{}`", l.name)));
            }
            match (&l.profile, &l.corpus) {
                (Some(p), None) => {
                    LanguageProfile::builtin(p).map_err(|e| key_error(key("profile"), e.to_string()))?;
                }
                (None, Some(_)) => {}
                _ => return Err(key_error(key("profile"), "exactly one of `profile` or `corpus` is required")),
            }
            if l.corpus_size < 2 {
                return Err(key_error(key("corpus_size"), "must be at least 2"));
            }
            data::fill_language(&l.instruction, &l.name).map_err(|e| key_error(key("instruction"), e.to_string()))?;
        }
        if self.tasks.is_empty() {
            return Err(key_error("tasks", "at least one task is required"));
        }
        let mut kinds = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            let key = |f: &str| format!("tasks[{i}].{f}");
            if t.kind == TaskKind::Lm {
                return Err(key_error(key("kind"), "lm is not a downstream task"));
            }
            if !kinds.insert(t.kind) {
                return Err(key_error(key("kind"), format!("two tasks of kind `{}`", t.kind)));
            }
            match (&t.generator, t.datasets.is_empty()) {
                (Some(g), true) => {
                    if g != "toy_qa" || t.kind != TaskKind::Qa {
                        return Err(key_error(key("generator"), format!("unknown generator `{g}` for kind `{}`", t.kind)));
                    }
                    if t.train_size < 3 || t.test_size == 0 {
                        return Err(key_error(key("train_size"), "need train_size >= 3 and test_size >= 1"));
                    }
                }
                (None, false) => {
                    for l in &self.languages {
                        if !t.datasets.contains_key(&l.name) {
                            return Err(key_error(key("datasets"), format!("no dataset for language `{}`", l.name)));
                        }
                    }
                    for lang in t.datasets.keys() {
                        if !names.contains(lang.as_str()) {
                            return Err(key_error(format!("tasks[{i}].datasets.{lang}"), "unknown language"));
                        }
                    }
                }
                _ => return Err(key_error(key("generator"), "exactly one of `generator` or `datasets` is required")),
            }
            if let Some(instr) = &t.instruction {
                data::fill_language(instr, "x").map_err(|e| key_error(key("instruction"), e.to_string()))?;
            }
            if let Some(v) = &t.verbalizers {
                let builtin: Vec<String> = t
                    .kind
                    .verbalizers()
                    .unwrap_or_default()
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
                let mut given = v.clone();
                let mut want = builtin.clone();
                given.sort();
                want.sort();
                if given != want {
                    return Err(key_error(key("verbalizers"), format!("expected {builtin:?}")));
                }
            }
        }
        for phase in [Phase::Language, Phase::Task] {
            for kind in [ArtifactKind::Adapter, ArtifactKind::Prompt] {
                let p = match phase {
                    Phase::Language => "language",
                    Phase::Task => "task",
                };
                self.hyperparams
                    .get(phase, kind)
                    .validate()
                    .map_err(|e| key_error(format!("hyperparams.{p}.{}", kind.name()), e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn language(&self, name: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown language `{name}`")))
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task `{name}`")))
    }

    pub fn language_names(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.name.clone()).collect()
    }
}

impl LanguageSpec {
    pub fn instruction_text(&self) -> String {
        self.instruction.replace("{Language}", &self.name)
    }

    /// Unlabelled documents: synthesized from the profile, or read from
    /// the corpus file.
    pub fn documents(&self) -> Result<Vec<String>> {
        if let Some(p) = &self.profile {
            let mut profile = LanguageProfile::builtin(p)?;
            profile.name = self.name.clone();
            return Ok(data::synth_corpus(&profile, self.corpus_size, 0));
        }
        let path = self.corpus.as_ref().expect("validated");
        read_corpus(path)
    }
}

/// JSONL corpora use their `text` fields; anything else is one document
/// per non-empty line.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(data::load_dataset(path)?.into_iter().map(|e| e.input_text).collect());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

impl TaskSpec {
    pub fn instruction_text(&self, language: &str) -> Result<String> {
        match &self.instruction {
            Some(t) => data::fill_language(t, language),
            None => data::task_instruction(self.kind, language),
        }
    }

    /// `(train, test)` examples for `language`.
    pub fn examples(&self, language: &LanguageSpec) -> Result<(Vec<TextToTextExample>, Vec<TextToTextExample>)> {
        if self.generator.is_some() {
            let mut profile = match &language.profile {
                Some(p) => LanguageProfile::builtin(p)?,
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "generator `toy_qa` needs a profile for language `{}`",
                        language.name
                    )))
                }
            };
            profile.name = language.name.clone();
            let mut all = data::toy_qa(&profile, self.train_size + self.test_size, self.data_seed);
            let test = all.split_off(self.train_size);
            return Ok((all, test));
        }
        let paths = self
            .datasets
            .get(&language.name)
            .ok_or_else(|| Error::InvalidConfig(format!("task `{}` has no data for `{}`", self.name, language.name)))?;
        let load = |p: &Path| -> Result<Vec<TextToTextExample>> {
            let ex = data::load_dataset(p)?;
            if let Some(bad) = ex.iter().find(|e| e.task != self.kind) {
                return Err(Error::InvalidInput(format!(
                    "{}: record of task `{}` in a `{}` dataset",
                    p.display(),
                    bad.task,
                    self.kind
                )));
            }
            Ok(ex)
        };
        Ok((load(&paths.train)?, load(&paths.test)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
configurations = ["task_adapter", "soft_task_prompt"]

[[languages]]
name = "alpha"
profile = "alpha"

[[tasks]]
name = "toy"
kind = "qa"
generator = "toy_qa"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.peft.prompt_tokens, 50);
        assert_eq!(c.peft.bottleneck_for(&c.model), 16);
        assert_eq!(c.hyperparams.get(Phase::Task, ArtifactKind::Prompt).learning_rate, 0.5);
        assert_eq!(c.languages[0].instruction_text(), "Generate the output in alpha:");
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    fn err_key(text: &str) -> String {
        match ExperimentConfig::from_toml(text) {
            Err(Error::ConfigKey { key, .. }) => key,
            other => panic!("expected a key error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_variant_names_key() {
        let bad = MINIMAL.replace("\"soft_task_prompt\"", "\"soft_everything\"");
        assert_eq!(err_key(&bad), "configurations[1]");
    }

    #[test]
    fn nested_errors_name_key() {
        let bad = MINIMAL.replace("kind = \"qa\"", "kind = \"pos\"");
        assert_eq!(err_key(&bad), "tasks[0].kind");
        let bad = MINIMAL.replace("profile = \"alpha\"", "profile = \"alpha\"\nbogus = 1");
        assert_eq!(err_key(&bad), "languages[0].bogus");
        let bad = MINIMAL.replace("profile = \"alpha\"", "profile = \"gamma\"");
        assert_eq!(err_key(&bad), "languages[0].profile");
        let bad = format!("{MINIMAL}\n[hyperparams.task.prompt]\nlearning_rate = 0.5\n");
        assert!(err_key(&bad).starts_with("hyperparams.task.prompt"));
    }

    #[test]
    fn instruction_needs_placeholder() {
        let bad = MINIMAL.replace("profile = \"alpha\"", "profile = \"alpha\"\ninstruction = \"Speak\"");
        assert_eq!(err_key(&bad), "languages[0].instruction");
    }

    #[test]
    fn verbalizers_must_match_kind() {
        let ok = MINIMAL.replace("kind = \"qa\"\ngenerator = \"toy_qa\"", "kind = \"qa\"\ngenerator = \"toy_qa\"\nverbalizers = []");
        assert!(ExperimentConfig::from_toml(&ok).is_ok());
        let bad = ok.replace("verbalizers = []", "verbalizers = [\"Yes\"]");
        assert_eq!(err_key(&bad), "tasks[0].verbalizers");
    }

    #[test]
    fn toy_examples_split() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let (train, test) = c.tasks[0].examples(&c.languages[0]).unwrap();
        assert_eq!((train.len(), test.len()), (600, 100));
        assert!(train.iter().all(|e| e.language == "alpha"));
    }
}
