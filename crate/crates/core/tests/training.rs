use peftweave::data::{language_instruction, task_instruction, toy_qa, synth_corpus, LanguageProfile, TaskKind};
use peftweave::model::{ModelConfig, TinyTransformer};
use peftweave::peft::{Artifact, ArtifactKind, PeftConfiguration, Role, Variant};
use peftweave::training::*;
use peftweave::Error;

fn model() -> TinyTransformer {
    TinyTransformer::new(ModelConfig::tiny()).unwrap()
}

fn hp(kind: ArtifactKind, steps: usize, every: usize) -> TrainingHyperparams {
    TrainingHyperparams {
        total_steps: steps,
        eval_every_steps: every,
        batch_size: 4,
        ..TrainingHyperparams::desk(kind)
    }
}

fn toy() -> (Vec<peftweave::data::TextToTextExample>, Vec<peftweave::data::TextToTextExample>) {
    let data = toy_qa(&LanguageProfile::builtin("alpha").unwrap(), 40, 3);
    (data[..32].to_vec(), data[32..].to_vec())
}

fn task_config(m: &TinyTransformer, variant: Variant) -> PeftConfiguration {
    let instruction = task_instruction(TaskKind::Qa, "alpha").unwrap();
    let language = variant.language_kind().map(|kind| {
        init_artifact(m, kind, Role::Language, &language_instruction("alpha"), 4, 5, 1).unwrap()
    });
    PeftConfiguration {
        variant,
        language,
        task: init_artifact(m, variant.task_kind(), Role::Task, &instruction, 4, 5, 2).unwrap(),
    }
}

fn tensors(a: &Artifact) -> Vec<u64> {
    match a {
        Artifact::Adapter(s) => s
            .layers
            .iter()
            .flat_map(|l| l.tensors().into_iter().flat_map(|m| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
            .collect(),
        Artifact::Prompt(p) => p.embedding.iter().map(|x| x.to_bits()).collect(),
    }
}

#[test]
fn zero_steps_returns_the_initial_artifact() {
    let m = model();
    let (train, val) = toy();
    let config = task_config(&m, Variant::TaskAdapterOnly);
    let init = config.task.clone();
    let run = train_task_representation(&m, config, &train, &val, &hp(ArtifactKind::Adapter, 0, 1), &RunFiles::default())
        .unwrap();
    assert_eq!(run.steps_executed, 0);
    assert!(run.train_losses.is_empty());
    assert_eq!(run.history.len(), 1);
    assert_eq!(tensors(&run.best), tensors(&init));
    assert_eq!(tensors(&run.last), tensors(&init));
}

#[test]
fn runs_are_deterministic() {
    let m = model();
    let (train, val) = toy();
    let h = hp(ArtifactKind::Prompt, 12, 4);
    let a = train_task_representation(&m, task_config(&m, Variant::SoftTaskPromptOnly), &train, &val, &h, &RunFiles::default())
        .unwrap();
    let b = train_task_representation(&m, task_config(&m, Variant::SoftTaskPromptOnly), &train, &val, &h, &RunFiles::default())
        .unwrap();
    assert_eq!(tensors(&a.last), tensors(&b.last));
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.train_losses), bits(&b.train_losses));
}

#[test]
fn one_loss_per_step_and_evaluation_schedule() {
    let m = model();
    let (train, val) = toy();
    let run = train_task_representation(
        &m,
        task_config(&m, Variant::TaskAdapterOnly),
        &train,
        &val,
        &hp(ArtifactKind::Adapter, 10, 4),
        &RunFiles::default(),
    )
    .unwrap();
    assert_eq!(run.train_losses.len(), 10);
    let steps: Vec<usize> = run.history.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 4, 8, 10]);
}

#[test]
fn ties_keep_the_earliest_best() {
    let m = model();
    let (train, val) = toy();
    // The learning rate is too small to change any value, so every
    // evaluation ties with step 0.
    let mut h = hp(ArtifactKind::Adapter, 8, 2);
    h.learning_rate = 1e-300;
    let run = train_task_representation(&m, task_config(&m, Variant::TaskAdapterOnly), &train, &val, &h, &RunFiles::default())
        .unwrap();
    let first = run.history[0].val_loss;
    assert!(run.history.iter().all(|r| r.val_loss == first));
    assert_eq!(run.best_step, 0);
}

#[test]
fn divergence_is_reported() {
    let m = model();
    let (train, val) = toy();
    let mut h = hp(ArtifactKind::Prompt, 50, 5);
    h.learning_rate = 1e200;
    let err = train_task_representation(&m, task_config(&m, Variant::SoftTaskPromptOnly), &train, &val, &h, &RunFiles::default())
        .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn language_artifact_stays_frozen_during_task_training() {
    let m = model();
    let (train, val) = toy();
    for variant in [Variant::LangAdapterTaskAdapter, Variant::SoftLangPromptTaskAdapter] {
        let config = task_config(&m, variant);
        let lang = config.language.clone().unwrap();
        let task = config.task.clone();
        let run = train_task_representation(&m, config, &train, &val, &hp(ArtifactKind::Adapter, 6, 3), &RunFiles::default())
            .unwrap();
        assert_ne!(tensors(&run.last), tensors(&task));
        let mut installed = run.final_state.clone();
        let group = variant.language_kind().unwrap().group(Role::Language);
        assert_eq!(tensors(&installed.take(group).unwrap()), tensors(&lang));
    }
}

#[test]
fn files_are_written() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&LanguageProfile::builtin("beta").unwrap(), 20, 0);
    let art = init_artifact(&m, ArtifactKind::Prompt, Role::Language, &language_instruction("beta"), 4, 5, 0).unwrap();
    let files = RunFiles {
        dir: Some(dir.path().to_path_buf()),
        ..RunFiles::default()
    };
    let run = train_language_representation(&m, art, &corpus, &hp(ArtifactKind::Prompt, 6, 3), &files).unwrap();
    for f in [STATE_FILE, BEST_FILE, HISTORY_FILE, MANIFEST_FILE] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 1 + run.history.len());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["steps_completed"], 6);
    assert_eq!(manifest["role"], "language");
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let m = model();
    let (train, val) = toy();
    let h = hp(ArtifactKind::Adapter, 12, 4);
    let full = train_task_representation(&m, task_config(&m, Variant::TaskAdapterOnly), &train, &val, &h, &RunFiles::default())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stopped = RunFiles {
        dir: Some(dir.path().to_path_buf()),
        resume: None,
        stop_at: Some(7),
    };
    let part = train_task_representation(&m, task_config(&m, Variant::TaskAdapterOnly), &train, &val, &h, &stopped).unwrap();
    assert_eq!(part.steps_executed, 7);
    let resumed = RunFiles {
        dir: Some(dir.path().to_path_buf()),
        resume: Some(dir.path().join(STATE_FILE)),
        stop_at: None,
    };
    let rest = train_task_representation(&m, task_config(&m, Variant::TaskAdapterOnly), &train, &val, &h, &resumed).unwrap();
    assert_eq!(rest.steps_executed, 5);
    assert_eq!(tensors(&rest.last), tensors(&full.last));
    assert_eq!(tensors(&rest.best), tensors(&full.best));
    assert_eq!(rest.history, full.history);
}
