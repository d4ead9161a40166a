use std::collections::BTreeMap;
use std::path::PathBuf;

use peftweave::data::{language_instruction, render_template, task_instruction, RecordFields, TaskKind};
use serde::Deserialize;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/templates")
}

#[derive(Deserialize)]
struct Golden {
    task: String,
    language: String,
    fields: RecordFields,
    input: String,
    target: String,
}

#[derive(Deserialize)]
struct Instructions {
    language: String,
    language_instruction: String,
    task_instructions: BTreeMap<String, String>,
}

#[test]
fn rendered_records_match_the_golden_files() {
    for name in ["qa", "nli", "ner", "cwcd"] {
        let text = std::fs::read_to_string(dir().join(format!("{name}.json"))).unwrap();
        let g: Golden = serde_json::from_str(&text).unwrap();
        let ex = render_template(&g.fields, &g.task, &g.language).unwrap();
        assert_eq!(ex.input_text.as_bytes(), g.input.as_bytes(), "{name} input");
        assert_eq!(ex.target_text.as_bytes(), g.target.as_bytes(), "{name} target");
        assert_eq!(ex.language, g.language);
    }
}

#[test]
fn instructions_match_the_golden_file() {
    let text = std::fs::read_to_string(dir().join("instructions.json")).unwrap();
    let g: Instructions = serde_json::from_str(&text).unwrap();
    assert_eq!(language_instruction(&g.language), g.language_instruction);
    assert_eq!(g.task_instructions.len(), 4);
    for (task, expected) in &g.task_instructions {
        let kind: TaskKind = task.parse().unwrap();
        assert_eq!(task_instruction(kind, &g.language).unwrap().as_bytes(), expected.as_bytes(), "{task}");
    }
}
