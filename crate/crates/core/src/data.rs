//! Text-to-text records, task templates, verbalizers, dataset files and
//! synthetic corpora.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const NLI_VERBALIZERS: [&str; 3] = ["Yes", "No", "Maybe"];
pub const CWCD_VERBALIZERS: [&str; 2] = ["Checkworthy", "Not checkworthy"];
pub const NER_TYPES: [&str; 3] = ["PER", "ORG", "LOC"];
pub const VALIDATION_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Qa,
    Nli,
    Ner,
    Cwcd,
    Lm,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Qa => "qa",
            TaskKind::Nli => "nli",
            TaskKind::Ner => "ner",
            TaskKind::Cwcd => "cwcd",
            TaskKind::Lm => "lm",
        }
    }

    /// Verbalizer strings for classification tasks.
    pub fn verbalizers(self) -> Option<&'static [&'static str]> {
        match self {
            TaskKind::Nli => Some(&NLI_VERBALIZERS),
            TaskKind::Cwcd => Some(&CWCD_VERBALIZERS),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(TaskKind::Qa),
            "nli" => Ok(TaskKind::Nli),
            "ner" => Ok(TaskKind::Ner),
            "cwcd" => Ok(TaskKind::Cwcd),
            "lm" => Ok(TaskKind::Lm),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

/// One record in text-to-text form. Unlabelled text uses task `lm` with
/// an empty target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextToTextExample {
    #[serde(rename = "input")]
    pub input_text: String,
    #[serde(rename = "target")]
    pub target_text: String,
    pub language: String,
    pub task: TaskKind,
}

impl TextToTextExample {
    pub fn unlabelled(text: impl Into<String>, language: impl Into<String>) -> Self {
        Self {
            input_text: text.into(),
            target_text: String::new(),
            language: language.into(),
            task: TaskKind::Lm,
        }
    }
}

/// Raw record fields keyed by name.
pub type RecordFields = BTreeMap<String, String>;

fn field<'a>(fields: &'a RecordFields, name: &str) -> Result<&'a str> {
    fields
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| Error::MissingField(name.to_string()))
}

/// Language-representation initialization instruction.
pub fn language_instruction(language: &str) -> String {
    format!("Generate the output in {language}:")
}

/// Task-representation initialization instruction.
pub fn task_instruction(task: TaskKind, language: &str) -> Result<String> {
    Ok(match task {
        TaskKind::Qa => format!("Answer the question in {language} language:"),
        TaskKind::Nli => format!(
            "Select Yes, No or Maybe based on the implication of the premise on the hypothesis in {language}:"
        ),
        TaskKind::Ner => format!("Identify NER tags (ORG, PER, LOC) in the text in {language}:"),
        TaskKind::Cwcd => format!("Determine whether a given claim in {language} is checkworthy:"),
        TaskKind::Lm => return Err(Error::UnknownTask("lm has no task instruction".into())),
    })
}

/// Substitutes `{Language}` in a user-supplied instruction template.
pub fn fill_language(template: &str, language: &str) -> Result<String> {
    if !template.contains("{Language}") {
        return Err(Error::InvalidInput(format!(
            "instruction template `{template}` lacks the {{Language}} placeholder"
        )));
    }
    Ok(template.replace("{Language}", language))
}

pub fn qa_input(question: &str, context: &str) -> String {
    format!("question: {question} context: {context}")
}

pub fn nli_input(premise: &str, hypothesis: &str) -> String {
    format!("{premise} \n\n Question: Does this imply that \"{hypothesis}\"? Yes, no, or maybe?")
}

pub fn ner_input(tokens: &[String]) -> String {
    format!("tag: {}", tokens.join(" "))
}

pub fn cwcd_input(claim: &str) -> String {
    format!("checkworthiness claim: {claim}")
}

fn nli_label(label: &str) -> Result<&'static str> {
    match label.trim().to_lowercase().as_str() {
        "yes" | "entailment" | "0" => Ok("Yes"),
        "maybe" | "neutral" | "1" => Ok("Maybe"),
        "no" | "contradiction" | "2" => Ok("No"),
        other => Err(Error::InvalidInput(format!("unknown NLI label `{other}`"))),
    }
}

fn cwcd_label(label: &str) -> Result<&'static str> {
    match label.trim().to_lowercase().as_str() {
        "checkworthy" | "yes" | "true" | "1" => Ok("Checkworthy"),
        "not checkworthy" | "no" | "false" | "0" => Ok("Not checkworthy"),
        other => Err(Error::InvalidInput(format!("unknown checkworthiness label `{other}`"))),
    }
}

/// Instantiates the task template.
///
/// Fields: qa `question`, `context`, `answer`; nli `premise`, `hypothesis`,
/// `label`; ner whitespace-separated `tokens` and `tags`; cwcd `claim`,
/// `label`.
pub fn render_template(fields: &RecordFields, task: &str, language: &str) -> Result<TextToTextExample> {
    let task: TaskKind = task.parse()?;
    let (input_text, target_text) = match task {
        TaskKind::Qa => (
            qa_input(field(fields, "question")?, field(fields, "context")?),
            field(fields, "answer")?.to_string(),
        ),
        TaskKind::Nli => (
            nli_input(field(fields, "premise")?, field(fields, "hypothesis")?),
            nli_label(field(fields, "label")?)?.to_string(),
        ),
        TaskKind::Ner => {
            let tokens: Vec<String> = field(fields, "tokens")?.split_whitespace().map(String::from).collect();
            let tags: Vec<String> = field(fields, "tags")?.split_whitespace().map(String::from).collect();
            (ner_input(&tokens), serialize_ner(&tokens, &tags)?)
        }
        TaskKind::Cwcd => (
            cwcd_input(field(fields, "claim")?),
            cwcd_label(field(fields, "label")?)?.to_string(),
        ),
        TaskKind::Lm => return Err(Error::UnknownTask("lm records are not templated".into())),
    };
    if input_text.is_empty() || target_text.is_empty() {
        return Err(Error::InvalidInput("template produced an empty text".into()));
    }
    Ok(TextToTextExample {
        input_text,
        target_text,
        language: language.to_string(),
        task,
    })
}

/// Cuts `example.input_text` to at most `max_bytes` bytes. QA inputs lose
/// the tail of their context (the template ends with it); other tasks are
/// rejected when too long.
pub fn fit_input(example: &mut TextToTextExample, max_bytes: usize) -> Result<()> {
    let len = example.input_text.len();
    if len <= max_bytes {
        return Ok(());
    }
    let keep_at_least = match example.task {
        TaskKind::Qa => example
            .input_text
            .find(" context: ")
            .map(|i| i + " context: ".len()),
        _ => None,
    };
    match keep_at_least {
        Some(min) if min <= max_bytes => {
            let mut cut = max_bytes;
            while !example.input_text.is_char_boundary(cut) {
                cut -= 1;
            }
            example.input_text.truncate(cut);
            Ok(())
        }
        _ => Err(Error::LengthOverflow { len, max: max_bytes }),
    }
}

fn valid_tag(tag: &str) -> bool {
    tag == "O"
        || tag
            .strip_prefix("B-")
            .or_else(|| tag.strip_prefix("I-"))
            .is_some_and(|t| NER_TYPES.contains(&t))
}

/// `token <TAG> token <TAG> …`.
pub fn serialize_ner(tokens: &[String], tags: &[String]) -> Result<String> {
    if tokens.len() != tags.len() {
        return Err(Error::NerParse(format!(
            "{} tokens but {} tags",
            tokens.len(),
            tags.len()
        )));
    }
    let mut parts = Vec::with_capacity(2 * tokens.len());
    for (tok, tag) in tokens.iter().zip(tags) {
        if tok.is_empty() || tok.contains(['<', '>']) || tok.contains(char::is_whitespace) {
            return Err(Error::NerParse(format!("token `{tok}` cannot be serialized")));
        }
        if !valid_tag(tag) {
            return Err(Error::NerParse(format!("unknown tag `{tag}`")));
        }
        parts.push(tok.clone());
        parts.push(format!("<{tag}>"));
    }
    Ok(parts.join(" "))
}

/// Strict inverse of [`serialize_ner`].
pub fn parse_ner(text: &str) -> Result<(Vec<String>, Vec<String>)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() % 2 != 0 {
        return Err(Error::NerParse("odd number of items".into()));
    }
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for pair in words.chunks(2) {
        let tag = pair[1]
            .strip_prefix('<')
            .and_then(|t| t.strip_suffix('>'))
            .filter(|t| valid_tag(t))
            .ok_or_else(|| Error::NerParse(format!("`{}` is not a tag", pair[1])))?;
        if pair[0].contains(['<', '>']) {
            return Err(Error::NerParse(format!("`{}` is not a token", pair[0])));
        }
        tokens.push(pair[0].to_string());
        tags.push(tag.to_string());
    }
    Ok((tokens, tags))
}

/// Deterministic shuffled split with `round(fraction · N)` validation
/// records, clamped so both sides are non-empty.
pub fn split_train_val<T: Clone>(dataset: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::EmptyDataset(format!("cannot split {n} records")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("validation fraction {fraction} must lie in (0, 1)")));
    }
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| dataset[i].clone()).collect(),
        val_idx.into_iter().map(|i| dataset[i].clone()).collect(),
    ))
}

fn parse_line(line: &str, number: usize) -> Result<TextToTextExample> {
    let malformed = |reason: String| Error::MalformedRecord { line: number, reason };
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("record is not an object".into()))?;
    let get = |name: &str| -> Result<Option<String>> {
        match obj.get(name) {
            None => Ok(None),
            Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(malformed(format!("field `{name}` is not a string"))),
        }
    };
    let require = |name: &str| -> Result<String> {
        get(name)?.ok_or_else(|| malformed(format!("missing field `{name}`")))
    };
    let language = require("language")?;
    if let Some(text) = get("text")? {
        return Ok(TextToTextExample::unlabelled(text, language));
    }
    let task: TaskKind = require("task")?
        .parse()
        .map_err(|e: Error| malformed(format!("field `task`: {e}")))?;
    let input_text = require("input")?;
    let target_text = match task {
        TaskKind::Lm => get("target")?.unwrap_or_default(),
        _ => require("target")?,
    };
    if task != TaskKind::Lm && (input_text.is_empty() || target_text.is_empty()) {
        return Err(malformed("empty `input` or `target`".into()));
    }
    Ok(TextToTextExample {
        input_text,
        target_text,
        language,
        task,
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<TextToTextExample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn save_dataset(dataset: &[TextToTextExample], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for ex in dataset {
        let line = if ex.task == TaskKind::Lm && ex.target_text.is_empty() {
            serde_json::json!({ "text": ex.input_text, "language": ex.language })
        } else {
            serde_json::to_value(ex)?
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// A synthetic language: letters drawn from a Zipf-weighted alphabet,
/// grouped into words and documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub name: String,
    pub alphabet: String,
    pub zipf_exponent: f64,
    pub word_length: (usize, usize),
    pub words_per_document: (usize, usize),
}

impl LanguageProfile {
    /// Built-in profiles: `generic` (uniform a–z), `alpha`, `beta`.
    pub fn builtin(name: &str) -> Result<Self> {
        let (alphabet, zipf) = match name {
            "generic" => ("abcdefghijklmnopqrstuvwxyz", 0.0),
            "alpha" => ("aeiourstl", 2.5),
            "beta" => ("zyxwvkqjh", 2.5),
            other => {
                return Err(Error::InvalidConfig(format!("unknown language profile `{other}`")))
            }
        };
        Ok(Self {
            name: name.to_string(),
            alphabet: alphabet.to_string(),
            zipf_exponent: zipf,
            word_length: (2, 6),
            words_per_document: (6, 14),
        })
    }

    fn letters(&self) -> Vec<char> {
        self.alphabet.chars().collect()
    }

    fn cumulative_weights(&self) -> Vec<f64> {
        let n = self.alphabet.chars().count();
        let mut acc = 0.0;
        (1..=n)
            .map(|k| {
                acc += (k as f64).powf(-self.zipf_exponent);
                acc
            })
            .collect()
    }

    pub fn word(&self, rng: &mut impl Rng) -> String {
        let letters = self.letters();
        let cdf = self.cumulative_weights();
        let total = *cdf.last().expect("non-empty alphabet");
        let len = rng.random_range(self.word_length.0..=self.word_length.1);
        (0..len)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                letters[cdf.partition_point(|&c| c <= u).min(letters.len() - 1)]
            })
            .collect()
    }

    pub fn document(&self, rng: &mut impl Rng) -> String {
        let words = rng.random_range(self.words_per_document.0..=self.words_per_document.1);
        (0..words).map(|_| self.word(rng)).collect::<Vec<_>>().join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() || self.alphabet.contains(char::is_whitespace) {
            return Err(Error::InvalidConfig(format!(
                "profile `{}` needs a non-empty alphabet without whitespace",
                self.name
            )));
        }
        if self.word_length.0 == 0 || self.word_length.0 > self.word_length.1 {
            return Err(Error::InvalidConfig(format!("profile `{}` has a bad word_length", self.name)));
        }
        if self.words_per_document.0 == 0 || self.words_per_document.0 > self.words_per_document.1 {
            return Err(Error::InvalidConfig(format!(
                "profile `{}` has a bad words_per_document",
                self.name
            )));
        }
        Ok(())
    }
}

/// `size` documents of unlabelled text.
pub fn synth_corpus(profile: &LanguageProfile, size: usize, seed: u64) -> Vec<String> {
    let mut rng = rng::stream(seed, &format!("corpus.{}", profile.name));
    (0..size).map(|_| profile.document(&mut rng)).collect()
}

/// Relative character frequencies.
pub fn unigram_distribution<'a>(texts: impl IntoIterator<Item = &'a String>) -> BTreeMap<char, f64> {
    let mut counts: BTreeMap<char, f64> = BTreeMap::new();
    let mut total = 0.0;
    for t in texts {
        for c in t.chars() {
            *counts.entry(c).or_default() += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.values_mut().for_each(|v| *v /= total);
    }
    counts
}

pub fn total_variation(p: &BTreeMap<char, f64>, q: &BTreeMap<char, f64>) -> f64 {
    let keys: std::collections::BTreeSet<&char> = p.keys().chain(q.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

pub const TOY_QUESTION: &str = "what does the context say?";

/// Toy copy task in QA form, in `profile`'s language: the answer is the
/// whole context, so the target is a suffix of the input.
pub fn toy_qa(profile: &LanguageProfile, size: usize, seed: u64) -> Vec<TextToTextExample> {
    let mut rng = rng::stream(seed, &format!("toy_qa.{}", profile.name));
    (0..size)
        .map(|_| {
            let words = rng.random_range(1..=4);
            let context: Vec<String> = (0..words).map(|_| profile.word(&mut rng)).collect();
            let mut fields = RecordFields::new();
            fields.insert("question".into(), TOY_QUESTION.into());
            fields.insert("context".into(), context.join(" "));
            fields.insert("answer".into(), context.join(" "));
            render_template(&fields, "qa", &profile.name).expect("complete QA record")
        })
        .collect()
}
