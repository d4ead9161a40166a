//! Single-file tensor container.
//!
//! Layout: `PWCK`, a little-endian `u32` version, a little-endian `u64`
//! manifest length, the JSON manifest, then raw little-endian `f64` payloads.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TinyTransformer};
use crate::peft::{AdapterStack, Artifact, ArtifactKind, Role, SoftPrompt, ADAPTER_TENSORS};

pub const MAGIC: &[u8; 4] = b"PWCK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const DTYPE: &str = "f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    metadata: BTreeMap<String, String>,
}

/// Named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing metadata `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        let mut seen = BTreeSet::new();
        for (name, m) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::CheckpointFormat(format!("duplicate tensor `{name}`")));
            }
            let length = (m.len() * 8) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: DTYPE.into(),
                shape: m.shape().to_vec(),
                offset,
                length,
            });
            offset += length;
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, m) in &self.tensors {
            for x in m.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CheckpointFormat("truncated header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::CheckpointFormat("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::CheckpointFormat("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
            .map_err(|e| Error::CheckpointFormat(format!("manifest: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut seen = BTreeSet::new();
        for e in &manifest.tensors {
            if e.dtype != DTYPE {
                return Err(Error::CheckpointFormat(format!(
                    "tensor `{}` has dtype {}, expected {DTYPE}",
                    e.name, e.dtype
                )));
            }
            if e.shape.len() != 2 {
                return Err(Error::CheckpointFormat(format!("tensor `{}` is not 2-d", e.name)));
            }
            if e.length != (e.shape.iter().product::<usize>() * 8) as u64 {
                return Err(Error::CheckpointFormat(format!(
                    "tensor `{}` length disagrees with its shape",
                    e.name
                )));
            }
            if e.offset.checked_add(e.length).is_none_or(|end| end > payload.len() as u64) {
                return Err(Error::CheckpointFormat(format!(
                    "truncated payload for tensor `{}`",
                    e.name
                )));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::CheckpointFormat(format!("duplicate tensor `{}`", e.name)));
            }
        }

        let tensors = manifest
            .tensors
            .into_iter()
            .map(|e| {
                let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
                let values = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let m = Mat::from_shape_vec((e.shape[0], e.shape[1]), values).expect("validated shape");
                (e.name, m)
            })
            .collect();
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so a crash never leaves a half-written file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every tensor whose name does not start with one of `skip`
    /// into the slot `target` returns for it. All names and shapes are
    /// checked before anything is written.
    pub fn restore_into<'t>(
        &self,
        skip: &[&str],
        mut target: impl FnMut(&str) -> Option<&'t mut Mat>,
    ) -> Result<()> {
        let mut slots = Vec::new();
        for (name, value) in &self.tensors {
            if skip.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let slot = target(name).ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            if slot.dim() != value.dim() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    actual: value.shape().to_vec(),
                });
            }
            slots.push((slot, value));
        }
        for (slot, value) in slots {
            slot.assign(value);
        }
        Ok(())
    }
}

/// Backbone tensors with the model configuration in the metadata.
pub fn backbone_checkpoint(model: &TinyTransformer) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.metadata
        .insert("model_config".into(), serde_json::to_string(model.config())?);
    for (_, name, m) in model.tensors() {
        ck.push(name, m.clone());
    }
    Ok(ck)
}

pub fn backbone_from_checkpoint(ck: &Checkpoint) -> Result<TinyTransformer> {
    let config: ModelConfig = serde_json::from_str(ck.meta("model_config")?)?;
    let mut model = TinyTransformer::new(config)?;
    restore_backbone(ck, &mut model)?;
    Ok(model)
}

/// Overwrites `model` with the checkpoint's backbone tensors. Every
/// backbone tensor must be present.
pub fn restore_backbone(ck: &Checkpoint, model: &mut TinyTransformer) -> Result<()> {
    for (_, name, _) in model.tensors() {
        if ck.get(name).is_none() {
            return Err(Error::CheckpointFormat(format!("missing tensor `{name}`")));
        }
    }
    let mut slots: BTreeMap<&str, &mut Mat> = model.tensors_mut().collect();
    ck.restore_into(&["optim.", "state."], |name| slots.remove(name))
}

fn artifact_names(artifact: &Artifact) -> Vec<String> {
    let group = artifact.kind().group(artifact.role());
    match artifact {
        Artifact::Adapter(stack) => (0..stack.layers.len())
            .flat_map(|l| ADAPTER_TENSORS.iter().map(move |t| format!("{}.{l}.{t}", group.name())))
            .collect(),
        Artifact::Prompt(_) => vec![format!("{}.embedding", group.name())],
    }
}

fn artifact_tensors_mut(artifact: &mut Artifact) -> Vec<&mut Mat> {
    match artifact {
        Artifact::Adapter(stack) => stack.layers.iter_mut().flat_map(|a| a.tensors_mut()).collect(),
        Artifact::Prompt(p) => vec![&mut p.embedding],
    }
}

fn artifact_tensors(artifact: &Artifact) -> Vec<&Mat> {
    match artifact {
        Artifact::Adapter(stack) => stack.layers.iter().flat_map(|a| a.tensors()).collect(),
        Artifact::Prompt(p) => vec![&p.embedding],
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Language => "language",
        Role::Task => "task",
    }
}

/// An adapter stack or prompt under its canonical tensor names.
pub fn artifact_checkpoint(artifact: &Artifact) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.metadata.insert("kind".into(), artifact.kind().name().into());
    ck.metadata.insert("role".into(), role_name(artifact.role()).into());
    match artifact {
        Artifact::Adapter(stack) => {
            let r = stack.layers.first().map_or(0, |a| a.bottleneck());
            ck.metadata.insert("bottleneck".into(), r.to_string());
        }
        Artifact::Prompt(p) => {
            ck.metadata.insert("token_count".into(), p.token_count().to_string());
            ck.metadata.insert("init_instruction".into(), p.init_instruction.clone());
        }
    }
    for (name, m) in artifact_names(artifact).into_iter().zip(artifact_tensors(artifact)) {
        ck.push(name, m.clone());
    }
    ck
}

fn parse_meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.meta(key)?
        .parse()
        .map_err(|_| Error::CheckpointFormat(format!("bad metadata `{key}`")))
}

/// Rebuilds an artifact shaped for `config`; a checkpoint written for a
/// different width fails with a shape error naming the first tensor.
pub fn artifact_from_checkpoint(ck: &Checkpoint, config: &ModelConfig) -> Result<Artifact> {
    let kind: ArtifactKind = ck.meta("kind")?.parse()?;
    let role = match ck.meta("role")? {
        "language" => Role::Language,
        "task" => Role::Task,
        other => return Err(Error::CheckpointFormat(format!("unknown role `{other}`"))),
    };
    let mut artifact = match kind {
        ArtifactKind::Adapter => {
            let r: usize = parse_meta(ck, "bottleneck")?;
            let mut stack = AdapterStack::new(config, r.min(config.d_model).max(1), role, 0)?;
            // Shape the slots with the stored bottleneck even when it
            // exceeds this model's width, so the mismatch is reported.
            for a in &mut stack.layers {
                a.down_w = Mat::zeros((config.d_model, r));
                a.down_b = Mat::zeros((1, r));
                a.up_w = Mat::zeros((r, config.d_model));
            }
            Artifact::Adapter(stack)
        }
        ArtifactKind::Prompt => Artifact::Prompt(SoftPrompt {
            role,
            embedding: Mat::zeros((parse_meta(ck, "token_count")?, config.d_model)),
            init_instruction: ck.meta("init_instruction")?.to_string(),
        }),
    };
    let names = artifact_names(&artifact);
    let mut slots: BTreeMap<String, &mut Mat> =
        names.iter().cloned().zip(artifact_tensors_mut(&mut artifact)).collect();
    ck.restore_into(&["optim.", "state."], |name| slots.remove(name))?;
    if let Some(name) = names.iter().find(|n| ck.get(n).is_none()) {
        return Err(Error::CheckpointFormat(format!("missing tensor `{name}`")));
    }
    Ok(artifact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.metadata.insert("step".into(), "7".into());
        ck.push("a", array![[1.0, -0.0], [f64::MIN_POSITIVE, 1e300]]);
        ck.push("b", array![[std::f64::consts::PI]]);
        ck.push("empty", Mat::zeros((0, 3)));
        ck
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        for ((n1, a), (n2, b)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(a.dim(), b.dim());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PWCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn wrong_version_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 15, 40, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CheckpointFormat(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ck = sample();
        ck.push("a", array![[0.0]]);
        assert!(ck.to_bytes().is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let ck = sample();
        let mut a = Mat::zeros((2, 2));
        let mut b = Mat::zeros((1, 1));
        let mut e = Mat::zeros((0, 3));
        let mut slots: BTreeMap<&str, &mut Mat> = [("a", &mut a), ("b", &mut b), ("empty", &mut e)].into_iter().collect();
        ck.restore_into(&[], |n| slots.remove(n)).unwrap();
        assert_eq!(b[[0, 0]], std::f64::consts::PI);

        let mut only_a = Mat::zeros((2, 2));
        let mut slots: BTreeMap<&str, &mut Mat> = [("a", &mut only_a)].into_iter().collect();
        let err = ck.restore_into(&[], |n| slots.remove(n)).unwrap_err();
        assert!(matches!(err, Error::UnknownTensor(ref n) if n == "b"));
        // Nothing is written when validation fails.
        assert_eq!(only_a, Mat::zeros((2, 2)));

        let mut wrong = Mat::zeros((3, 2));
        let mut slots: BTreeMap<&str, &mut Mat> = [("a", &mut wrong)].into_iter().collect();
        let err = ck.restore_into(&["b", "empty"], |n| slots.remove(n)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { ref name, .. } if name == "a"));
    }

    #[test]
    fn backbone_round_trip() {
        let model = TinyTransformer::new(ModelConfig::tiny()).unwrap();
        let ck = backbone_checkpoint(&model).unwrap();
        let back = backbone_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        for ((_, n1, a), (_, n2, b)) in model.tensors().zip(back.tensors()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn artifact_round_trip_and_width_mismatch() {
        let tiny = ModelConfig::tiny();
        let stack = AdapterStack::new(&tiny, 4, Role::Task, 3).unwrap();
        let artifact = Artifact::Adapter(stack);
        let ck = artifact_checkpoint(&artifact);
        assert_eq!(ck.tensors[0].0, "task_adapter.0.down_w");
        let back = artifact_from_checkpoint(&ck, &tiny).unwrap();
        assert_eq!(back, artifact);

        let err = artifact_from_checkpoint(&ck, &ModelConfig::desk()).unwrap_err();
        assert!(
            matches!(err, Error::ShapeMismatch { ref name, .. } if name == "task_adapter.0.down_w"),
            "{err}"
        );
    }
}
