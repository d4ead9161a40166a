//! Bottleneck adapters, soft prompts and the six language × task
//! composition variants.
//!
//! Adapters sit after the feed-forward sub-layer of every encoder and
//! decoder layer. When a language and a task adapter are both present the
//! language adapter runs first and the task adapter consumes its output.
//! Prompts are prepended to the encoder input, language rows first.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{FreezeMask, Group, Mat, ParamKey};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TinyTransformer};
use crate::rng;
use crate::tokenizer::Vocab;

pub const DEFAULT_PROMPT_TOKENS: usize = 50;
pub const ADAPTER_TENSORS: [&str; 4] = ["down_w", "down_b", "up_w", "up_b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Language,
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Adapter,
    Prompt,
}

impl ArtifactKind {
    pub fn name(self) -> &'static str {
        match self {
            ArtifactKind::Adapter => "adapter",
            ArtifactKind::Prompt => "prompt",
        }
    }

    pub fn group(self, role: Role) -> Group {
        match (self, role) {
            (ArtifactKind::Adapter, Role::Language) => Group::LangAdapter,
            (ArtifactKind::Adapter, Role::Task) => Group::TaskAdapter,
            (ArtifactKind::Prompt, Role::Language) => Group::LangPrompt,
            (ArtifactKind::Prompt, Role::Task) => Group::TaskPrompt,
        }
    }
}

impl FromStr for ArtifactKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapter" => Ok(ArtifactKind::Adapter),
            "prompt" => Ok(ArtifactKind::Prompt),
            other => Err(Error::InvalidInput(format!("unknown artifact kind `{other}`"))),
        }
    }
}

/// Bottleneck adapter: `h + up(relu(down(h)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// `d_model × r`
    pub down_w: Mat,
    /// `1 × r`
    pub down_b: Mat,
    /// `r × d_model`
    pub up_w: Mat,
    /// `1 × d_model`
    pub up_b: Mat,
}

impl Adapter {
    /// Down-projection drawn from N(0, 0.02); up-projection zero, so the
    /// fresh adapter is the identity map.
    pub fn new(d_model: usize, bottleneck: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if bottleneck == 0 || bottleneck > d_model {
            return Err(Error::InvalidConfig(format!(
                "adapter bottleneck {bottleneck} must be in 1..={d_model}"
            )));
        }
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        Ok(Self {
            down_w: Mat::from_shape_simple_fn((d_model, bottleneck), || normal.sample(rng)),
            down_b: Mat::zeros((1, bottleneck)),
            up_w: Mat::zeros((bottleneck, d_model)),
            up_b: Mat::zeros((1, d_model)),
        })
    }

    pub fn d_model(&self) -> usize {
        self.down_w.nrows()
    }

    pub fn bottleneck(&self) -> usize {
        self.down_w.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        adapter_parameter_count(self.d_model(), self.bottleneck())
    }

    pub fn tensors(&self) -> [&Mat; 4] {
        [&self.down_w, &self.down_b, &self.up_w, &self.up_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 4] {
        [
            &mut self.down_w,
            &mut self.down_b,
            &mut self.up_w,
            &mut self.up_b,
        ]
    }

    /// Applies the adapter to each row of `h`.
    pub fn forward(&self, h: &Mat) -> Result<Mat> {
        if h.ncols() != self.d_model() {
            return Err(Error::WidthMismatch {
                expected: self.d_model(),
                actual: h.ncols(),
            });
        }
        let hidden = (h.dot(&self.down_w) + &self.down_b).mapv(|x| x.max(0.0));
        Ok(h + &(hidden.dot(&self.up_w) + &self.up_b))
    }
}

pub fn adapter_parameter_count(d_model: usize, bottleneck: usize) -> usize {
    d_model * bottleneck + bottleneck + bottleneck * d_model + d_model
}

/// Language adapter first, task adapter on its output.
pub fn stack_adapters(h: &Mat, language: &Adapter, task: &Adapter) -> Result<Mat> {
    if language.d_model() != task.d_model() {
        return Err(Error::WidthMismatch {
            expected: language.d_model(),
            actual: task.d_model(),
        });
    }
    task.forward(&language.forward(h)?)
}

/// One adapter per transformer layer (encoder layers, then decoder layers).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    pub role: Role,
    pub layers: Vec<Adapter>,
}

impl AdapterStack {
    pub fn new(config: &ModelConfig, bottleneck: usize, role: Role, seed: u64) -> Result<Self> {
        let stream = match role {
            Role::Language => "lang_adapter",
            Role::Task => "task_adapter",
        };
        let mut rng = rng::stream(seed, stream);
        let layers = (0..config.n_layers())
            .map(|_| Adapter::new(config.d_model, bottleneck, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { role, layers })
    }

    pub fn d_model(&self) -> usize {
        self.layers.first().map_or(0, Adapter::d_model)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Adapter::parameter_count).sum()
    }
}

/// A `token_count × d_model` matrix of trainable pseudo-token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    pub role: Role,
    pub embedding: Mat,
    pub init_instruction: String,
}

impl SoftPrompt {
    pub fn token_count(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.embedding.ncols()
    }
}

/// Embeds `instruction` (without its EOS) through the frozen table and
/// cycles the rows until `token_count` rows exist, truncating if the
/// instruction is longer. The result is an independent copy.
pub fn init_soft_prompt(
    instruction: &str,
    token_count: usize,
    embedding_table: &Mat,
    vocab: &Vocab,
    role: Role,
) -> Result<SoftPrompt> {
    if instruction.is_empty() {
        return Err(Error::InvalidInput("empty prompt instruction".into()));
    }
    if token_count == 0 {
        return Err(Error::InvalidInput("soft prompt needs at least one token".into()));
    }
    let ids = vocab.encode_bare(instruction);
    let mut embedding = Mat::zeros((token_count, embedding_table.ncols()));
    for (i, mut row) in embedding.rows_mut().into_iter().enumerate() {
        row.assign(&embedding_table.row(ids[i % ids.len()] as usize));
    }
    Ok(SoftPrompt {
        role,
        embedding,
        init_instruction: instruction.to_string(),
    })
}

/// Row-wise concatenation, language rows first.
pub fn concat_prompts(language: &SoftPrompt, task: &SoftPrompt) -> Result<Mat> {
    if language.d_model() != task.d_model() {
        return Err(Error::WidthMismatch {
            expected: language.d_model(),
            actual: task.d_model(),
        });
    }
    if language.token_count() == 0 || task.token_count() == 0 {
        return Err(Error::InvalidInput("soft prompt needs at least one token".into()));
    }
    Ok(concatenate(
        Axis(0),
        &[language.embedding.view(), task.embedding.view()],
    )
    .expect("equal widths"))
}

/// A trained (or freshly initialized) language or task representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Adapter(AdapterStack),
    Prompt(SoftPrompt),
}

impl Artifact {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            Artifact::Adapter(_) => ArtifactKind::Adapter,
            Artifact::Prompt(_) => ArtifactKind::Prompt,
        }
    }

    pub fn role(&self) -> Role {
        match self {
            Artifact::Adapter(a) => a.role,
            Artifact::Prompt(p) => p.role,
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            Artifact::Adapter(a) => a.d_model(),
            Artifact::Prompt(p) => p.d_model(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Artifact::Adapter(a) => a.parameter_count(),
            Artifact::Prompt(p) => p.embedding.len(),
        }
    }
}

/// Adapters and prompts installed into a backbone's slots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PeftState {
    pub lang_adapter: Option<AdapterStack>,
    pub task_adapter: Option<AdapterStack>,
    pub lang_prompt: Option<SoftPrompt>,
    pub task_prompt: Option<SoftPrompt>,
}

impl PeftState {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn install(&mut self, artifact: Artifact) {
        match artifact {
            Artifact::Adapter(a) => match a.role {
                Role::Language => self.lang_adapter = Some(a),
                Role::Task => self.task_adapter = Some(a),
            },
            Artifact::Prompt(p) => match p.role {
                Role::Language => self.lang_prompt = Some(p),
                Role::Task => self.task_prompt = Some(p),
            },
        }
    }

    pub fn take(&mut self, group: Group) -> Option<Artifact> {
        match group {
            Group::LangAdapter => self.lang_adapter.take().map(Artifact::Adapter),
            Group::TaskAdapter => self.task_adapter.take().map(Artifact::Adapter),
            Group::LangPrompt => self.lang_prompt.take().map(Artifact::Prompt),
            Group::TaskPrompt => self.task_prompt.take().map(Artifact::Prompt),
            Group::Backbone => None,
        }
    }

    /// Adapters active in `layer`, in application order.
    pub fn adapters_at(&self, layer: usize) -> impl Iterator<Item = (Group, &Adapter)> {
        let lang = self
            .lang_adapter
            .as_ref()
            .map(|s| (Group::LangAdapter, &s.layers[layer]));
        let task = self
            .task_adapter
            .as_ref()
            .map(|s| (Group::TaskAdapter, &s.layers[layer]));
        lang.into_iter().chain(task)
    }

    pub fn prompt_len(&self) -> usize {
        self.lang_prompt.as_ref().map_or(0, SoftPrompt::token_count)
            + self.task_prompt.as_ref().map_or(0, SoftPrompt::token_count)
    }

    /// The prepended prompt matrix, language rows first.
    pub fn combined_prompt(&self) -> Option<Mat> {
        match (&self.lang_prompt, &self.task_prompt) {
            (Some(l), Some(t)) => Some(concat_prompts(l, t).expect("validated at assembly")),
            (Some(p), None) | (None, Some(p)) => Some(p.embedding.clone()),
            (None, None) => None,
        }
    }

    /// Every tensor with its key and checkpoint name.
    pub fn tensors(&self) -> Vec<(ParamKey, String, &Mat)> {
        let mut out = Vec::new();
        for (group, stack) in [
            (Group::LangAdapter, &self.lang_adapter),
            (Group::TaskAdapter, &self.task_adapter),
        ] {
            if let Some(stack) = stack {
                for (layer, adapter) in stack.layers.iter().enumerate() {
                    for (t, (name, m)) in ADAPTER_TENSORS.iter().zip(adapter.tensors()).enumerate() {
                        out.push((
                            ParamKey::new(group, layer * 4 + t),
                            format!("{}.{layer}.{name}", group.name()),
                            m,
                        ));
                    }
                }
            }
        }
        for (group, prompt) in [
            (Group::LangPrompt, &self.lang_prompt),
            (Group::TaskPrompt, &self.task_prompt),
        ] {
            if let Some(p) = prompt {
                out.push((
                    ParamKey::new(group, 0),
                    format!("{}.embedding", group.name()),
                    &p.embedding,
                ));
            }
        }
        out
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> Option<&mut Mat> {
        let idx = key.index as usize;
        match key.group {
            Group::LangAdapter | Group::TaskAdapter => {
                let stack = if key.group == Group::LangAdapter {
                    self.lang_adapter.as_mut()
                } else {
                    self.task_adapter.as_mut()
                }?;
                let adapter = stack.layers.get_mut(idx / 4)?;
                adapter.tensors_mut().into_iter().nth(idx % 4)
            }
            Group::LangPrompt if idx == 0 => self.lang_prompt.as_mut().map(|p| &mut p.embedding),
            Group::TaskPrompt if idx == 0 => self.task_prompt.as_mut().map(|p| &mut p.embedding),
            _ => None,
        }
    }

    pub fn parameter_count(&self, groups: &FreezeMask) -> usize {
        self.tensors()
            .into_iter()
            .filter(|(k, _, _)| groups.contains(&k.group))
            .map(|(_, _, m)| m.len())
            .sum()
    }
}

/// The six language × task composition variants, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "task_adapter")]
    TaskAdapterOnly,
    #[serde(rename = "soft_task_prompt")]
    SoftTaskPromptOnly,
    #[serde(rename = "lang_adapter+task_adapter")]
    LangAdapterTaskAdapter,
    #[serde(rename = "lang_adapter+soft_task_prompt")]
    LangAdapterSoftTaskPrompt,
    #[serde(rename = "soft_lang_prompt+task_adapter")]
    SoftLangPromptTaskAdapter,
    #[serde(rename = "soft_lang_prompt+soft_task_prompt")]
    SoftLangPromptSoftTaskPrompt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::TaskAdapterOnly,
        Variant::SoftTaskPromptOnly,
        Variant::LangAdapterTaskAdapter,
        Variant::LangAdapterSoftTaskPrompt,
        Variant::SoftLangPromptTaskAdapter,
        Variant::SoftLangPromptSoftTaskPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TaskAdapterOnly => "task_adapter",
            Variant::SoftTaskPromptOnly => "soft_task_prompt",
            Variant::LangAdapterTaskAdapter => "lang_adapter+task_adapter",
            Variant::LangAdapterSoftTaskPrompt => "lang_adapter+soft_task_prompt",
            Variant::SoftLangPromptTaskAdapter => "soft_lang_prompt+task_adapter",
            Variant::SoftLangPromptSoftTaskPrompt => "soft_lang_prompt+soft_task_prompt",
        }
    }

    /// Position in the canonical ordering, used for tie-breaking.
    pub fn ordinal(self) -> usize {
        Variant::ALL.iter().position(|&v| v == self).expect("listed")
    }

    pub fn language_kind(self) -> Option<ArtifactKind> {
        match self {
            Variant::TaskAdapterOnly | Variant::SoftTaskPromptOnly => None,
            Variant::LangAdapterTaskAdapter | Variant::LangAdapterSoftTaskPrompt => {
                Some(ArtifactKind::Adapter)
            }
            Variant::SoftLangPromptTaskAdapter | Variant::SoftLangPromptSoftTaskPrompt => {
                Some(ArtifactKind::Prompt)
            }
        }
    }

    pub fn task_kind(self) -> ArtifactKind {
        match self {
            Variant::TaskAdapterOnly
            | Variant::LangAdapterTaskAdapter
            | Variant::SoftLangPromptTaskAdapter => ArtifactKind::Adapter,
            _ => ArtifactKind::Prompt,
        }
    }

    /// Groups that receive gradients during task training.
    pub fn trainable(self) -> FreezeMask {
        [self.task_kind().group(Role::Task)].into_iter().collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown configuration `{s}`")))
    }
}

/// A variant plus the artifacts it installs.
#[derive(Debug, Clone)]
pub struct PeftConfiguration {
    pub variant: Variant,
    pub language: Option<Artifact>,
    pub task: Artifact,
}

/// A backbone with installed artifacts and the groups that may train.
#[derive(Debug, Clone)]
pub struct Assembly<'m> {
    pub backbone: &'m TinyTransformer,
    pub state: PeftState,
    pub trainable: FreezeMask,
}

impl<'m> Assembly<'m> {
    /// Backbone alone, nothing trainable.
    pub fn baseline(backbone: &'m TinyTransformer) -> Self {
        Self {
            backbone,
            state: PeftState::empty(),
            trainable: FreezeMask::new(),
        }
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.state.parameter_count(&self.trainable)
    }
}

fn check_artifact(
    backbone: &TinyTransformer,
    artifact: &Artifact,
    kind: ArtifactKind,
    role: Role,
    variant: &'static str,
) -> Result<()> {
    if artifact.kind() != kind || artifact.role() != role {
        return Err(Error::MissingArtifact {
            variant,
            artifact: match (kind, role) {
                (ArtifactKind::Adapter, Role::Language) => "language adapter",
                (ArtifactKind::Adapter, Role::Task) => "task adapter",
                (ArtifactKind::Prompt, Role::Language) => "soft language prompt",
                (ArtifactKind::Prompt, Role::Task) => "soft task prompt",
            },
        });
    }
    let d_model = backbone.config().d_model;
    if artifact.d_model() != d_model {
        return Err(Error::WidthMismatch {
            expected: d_model,
            actual: artifact.d_model(),
        });
    }
    if let Artifact::Adapter(stack) = artifact {
        if stack.layers.len() != backbone.config().n_layers() {
            return Err(Error::InvalidConfig(format!(
                "adapter stack has {} layers, backbone has {}",
                stack.layers.len(),
                backbone.config().n_layers()
            )));
        }
    }
    Ok(())
}

/// Installs the configuration's artifacts; only the task artifact trains.
pub fn assemble(backbone: &TinyTransformer, config: PeftConfiguration) -> Result<Assembly<'_>> {
    let variant = config.variant;
    let name = variant.name();
    check_artifact(backbone, &config.task, variant.task_kind(), Role::Task, name)?;
    let mut state = PeftState::empty();
    match (variant.language_kind(), config.language) {
        (None, _) => {}
        (Some(kind), Some(language)) => {
            check_artifact(backbone, &language, kind, Role::Language, name)?;
            state.install(language);
        }
        (Some(kind), None) => {
            return Err(Error::MissingArtifact {
                variant: name,
                artifact: match kind {
                    ArtifactKind::Adapter => "language adapter",
                    ArtifactKind::Prompt => "soft language prompt",
                },
            })
        }
    }
    state.install(config.task);
    Ok(Assembly {
        backbone,
        state,
        trainable: variant.trainable(),
    })
}

/// Installs a lone language artifact for span-corruption training.
pub fn assemble_language(backbone: &TinyTransformer, artifact: Artifact) -> Result<Assembly<'_>> {
    check_artifact(backbone, &artifact, artifact.kind(), Role::Language, "language training")?;
    let group = artifact.kind().group(Role::Language);
    let mut state = PeftState::empty();
    state.install(artifact);
    Ok(Assembly {
        backbone,
        state,
        trainable: [group].into_iter().collect(),
    })
}

/// Closed-form count of parameters that train under `variant`.
pub fn trainable_parameter_count(
    variant: Variant,
    config: &ModelConfig,
    bottleneck: usize,
    prompt_tokens: usize,
) -> usize {
    match variant.task_kind() {
        ArtifactKind::Adapter => config.n_layers() * adapter_parameter_count(config.d_model, bottleneck),
        ArtifactKind::Prompt => prompt_tokens * config.d_model,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_adapter(down: f64, up: f64) -> Adapter {
        Adapter {
            down_w: array![[down]],
            down_b: array![[0.0]],
            up_w: array![[up]],
            up_b: array![[0.0]],
        }
    }

    #[test]
    fn adapter_scalar_cases() {
        let a = scalar_adapter(1.0, 3.0);
        assert_eq!(a.forward(&array![[2.0]]).unwrap(), array![[8.0]]);
        assert_eq!(a.forward(&array![[-1.0]]).unwrap(), array![[-1.0]]);
        assert!(a.forward(&array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Adapter::new(8, 2, &mut rng).unwrap();
        let h = Mat::from_shape_fn((3, 8), |(i, j)| (i as f64 - j as f64) * 0.7);
        assert_eq!(a.forward(&h).unwrap(), h);
        assert!(Adapter::new(8, 0, &mut rng).is_err());
        assert!(Adapter::new(8, 9, &mut rng).is_err());
    }

    #[test]
    fn stacking_scalar_case_and_order() {
        let lang = scalar_adapter(1.0, 1.0);
        let task = scalar_adapter(1.0, 2.0);
        assert_eq!(stack_adapters(&array![[1.0]], &lang, &task).unwrap(), array![[6.0]]);
        // This pair happens to commute; the one below does not.
        let a = Adapter {
            down_w: array![[1.0]],
            down_b: array![[-1.0]],
            up_w: array![[2.0]],
            up_b: array![[0.0]],
        };
        let b = scalar_adapter(1.0, -0.5);
        let h = array![[2.0]];
        assert_ne!(
            stack_adapters(&h, &a, &b).unwrap(),
            stack_adapters(&h, &b, &a).unwrap()
        );
    }

    #[test]
    fn stacking_with_identity_reduces_to_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let identity = Adapter::new(4, 2, &mut rng).unwrap();
        let mut trained = Adapter::new(4, 2, &mut rng).unwrap();
        trained.up_w.mapv_inplace(|_| 0.3);
        trained.up_b.fill(-0.1);
        let h = Mat::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f64 * 0.25 - 1.0);
        let single = trained.forward(&h).unwrap();
        assert_eq!(stack_adapters(&h, &trained, &identity).unwrap(), single);
        assert_eq!(stack_adapters(&h, &identity, &trained).unwrap(), single);
    }

    #[test]
    fn prompt_init_cycles_and_truncates() {
        let vocab = Vocab::default();
        let table = Mat::from_shape_fn((vocab.size(), 3), |(i, j)| (i * 10 + j) as f64);
        let p = init_soft_prompt("abc", 7, &table, &vocab, Role::Task).unwrap();
        let expect = [b'a', b'b', b'c', b'a', b'b', b'c', b'a'];
        for (i, &b) in expect.iter().enumerate() {
            assert_eq!(p.embedding.row(i), table.row(b as usize));
        }
        let p = init_soft_prompt("abcde", 2, &table, &vocab, Role::Task).unwrap();
        assert_eq!(p.token_count(), 2);
        assert_eq!(p.embedding.row(1), table.row(b'b' as usize));
        assert!(init_soft_prompt("", 2, &table, &vocab, Role::Task).is_err());
        assert!(init_soft_prompt("a", 0, &table, &vocab, Role::Task).is_err());

        let p = init_soft_prompt(
            "Generate the output in Slovak:",
            DEFAULT_PROMPT_TOKENS,
            &table,
            &vocab,
            Role::Language,
        )
        .unwrap();
        assert_eq!(p.token_count(), 50);
    }

    #[test]
    fn concatenation_puts_language_first() {
        let lang = SoftPrompt {
            role: Role::Language,
            embedding: Mat::from_elem((50, 4), 1.0),
            init_instruction: "l".into(),
        };
        let task = SoftPrompt {
            role: Role::Task,
            embedding: Mat::from_elem((50, 4), 2.0),
            init_instruction: "t".into(),
        };
        let c = concat_prompts(&lang, &task).unwrap();
        assert_eq!(c.nrows(), 100);
        assert!(c.slice(ndarray::s![..50, ..]).iter().all(|&x| x == 1.0));
        assert!(c.slice(ndarray::s![50.., ..]).iter().all(|&x| x == 2.0));

        let empty = SoftPrompt {
            role: Role::Task,
            embedding: Mat::zeros((0, 4)),
            init_instruction: "t".into(),
        };
        assert!(concat_prompts(&lang, &empty).is_err());
        let narrow = SoftPrompt {
            embedding: Mat::zeros((3, 5)),
            ..task
        };
        assert!(concat_prompts(&lang, &narrow).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("lang_prompt+oops".parse::<Variant>().is_err());
    }

    #[test]
    fn closed_form_counts() {
        let cfg = ModelConfig::desk();
        assert_eq!(adapter_parameter_count(64, 16), 2128);
        assert_eq!(trainable_parameter_count(Variant::TaskAdapterOnly, &cfg, 16, 50), 8512);
        assert_eq!(trainable_parameter_count(Variant::SoftTaskPromptOnly, &cfg, 16, 50), 3200);
        assert_eq!(
            trainable_parameter_count(Variant::SoftLangPromptTaskAdapter, &cfg, 16, 50),
            trainable_parameter_count(Variant::TaskAdapterOnly, &cfg, 16, 50)
        );
    }
}
