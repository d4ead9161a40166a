//! Task metrics, the cross-lingual transfer matrix and summary reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{parse_ner, TaskKind, TextToTextExample, NER_TYPES};
use crate::error::{Error, Result};
use crate::model::TinyTransformer;
use crate::peft::{PeftState, Variant};
use crate::tokenizer::Vocab;

/// Generation cap for free-form answers (QA).
pub const QA_MAX_NEW_TOKENS: usize = 32;

/// Lowercase, drop ASCII punctuation, drop the articles `a`, `an`, `the`
/// and collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let pred: Vec<&str> = pred.split_whitespace().collect();
    let gold: Vec<&str> = gold.split_whitespace().collect();
    if pred.is_empty() || gold.is_empty() {
        return (pred == gold) as u8 as f64;
    }
    let mut gold_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for g in &gold {
        *gold_counts.entry(g).or_default() += 1;
    }
    let mut common = 0usize;
    for p in &pred {
        if let Some(c) = gold_counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-overlap F1, maximized over the gold answers.
pub fn squad_f1(prediction: &str, gold_answers: &[&str]) -> Result<f64> {
    if gold_answers.is_empty() {
        return Err(Error::InvalidInput("no gold answers".into()));
    }
    Ok(gold_answers
        .iter()
        .map(|g| token_f1(prediction, g))
        .fold(0.0, f64::max))
}

pub fn exact_match(prediction: &str, gold_answers: &[&str]) -> Result<f64> {
    if gold_answers.is_empty() {
        return Err(Error::InvalidInput("no gold answers".into()));
    }
    let p = normalize_answer(prediction);
    Ok(gold_answers.iter().any(|g| normalize_answer(g) == p) as u8 as f64)
}

/// Fraction of predictions equal to their gold label; a prediction outside
/// `verbalizers` is wrong.
pub fn accuracy(predictions: &[&str], golds: &[&str], verbalizers: &[&str]) -> Result<f64> {
    if predictions.len() != golds.len() || predictions.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    let allowed: BTreeSet<String> = verbalizers.iter().map(|v| normalize_answer(v)).collect();
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| {
            let p = normalize_answer(p);
            allowed.contains(&p) && p == normalize_answer(g)
        })
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Binary F1 for `positive`; predictions outside `verbalizers` never count
/// as positive.
pub fn binary_f1(predictions: &[&str], golds: &[&str], positive: &str) -> Result<f64> {
    if predictions.len() != golds.len() || predictions.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    let pos = normalize_answer(positive);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in predictions.iter().zip(golds) {
        let p = normalize_answer(p) == pos;
        let g = normalize_answer(g) == pos;
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_from_counts(tp, tp + fp, tp + fn_))
}

fn f1_from_counts(tp: usize, n_pred: usize, n_gold: usize) -> f64 {
    if n_pred == 0 && n_gold == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_gold as f64;
    2.0 * p * r / (p + r)
}

/// Entity `(text, type)` pairs from a BIO tag sequence. A stray `I-X`
/// opens a new entity.
pub fn bio_entities(tokens: &[String], tags: &[String]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut current: Option<(Vec<&str>, &str)> = None;
    for (tok, tag) in tokens.iter().zip(tags) {
        let (prefix, ty) = match tag.split_once('-') {
            Some((p, t)) if NER_TYPES.contains(&t) => (p, t),
            _ => ("O", ""),
        };
        let continues = prefix == "I" && current.as_ref().is_some_and(|(_, t)| *t == ty);
        if continues {
            current.as_mut().expect("open entity").0.push(tok);
            continue;
        }
        if let Some((words, t)) = current.take() {
            out.push((words.join(" "), t.to_string()));
        }
        if prefix == "B" || prefix == "I" {
            current = Some((vec![tok], ty));
        }
    }
    if let Some((words, t)) = current {
        out.push((words.join(" "), t.to_string()));
    }
    out
}

/// Best-effort reading of a generated tag sequence: a token immediately
/// followed by a valid tag keeps it, anything else is untagged.
pub fn parse_ner_lenient(text: &str) -> (Vec<String>, Vec<String>) {
    let items: Vec<&str> = text.split_whitespace().collect();
    let as_tag = |s: &str| -> Option<String> {
        let t = s.strip_prefix('<')?.strip_suffix('>')?;
        let ok = t == "O"
            || t.strip_prefix("B-")
                .or_else(|| t.strip_prefix("I-"))
                .is_some_and(|ty| NER_TYPES.contains(&ty));
        ok.then(|| t.to_string())
    };
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut i = 0;
    while i < items.len() {
        if as_tag(items[i]).is_some() {
            i += 1;
            continue;
        }
        tokens.push(items[i].to_string());
        match items.get(i + 1).and_then(|s| as_tag(s)) {
            Some(tag) => {
                tags.push(tag);
                i += 2;
            }
            None => {
                tags.push("O".into());
                i += 1;
            }
        }
    }
    (tokens, tags)
}

/// `(true positives, predicted entities, gold entities)` for one pair,
/// matching entities as a multiset of `(text, type)`.
pub fn ner_counts(pred_text: &str, gold_text: &str) -> Result<(usize, usize, usize)> {
    let (gt, gg) = parse_ner(gold_text)?;
    let gold = bio_entities(&gt, &gg);
    let (pt, pg) = parse_ner_lenient(pred_text);
    let pred = bio_entities(&pt, &pg);
    let mut remaining: BTreeMap<&(String, String), usize> = BTreeMap::new();
    for g in &gold {
        *remaining.entry(g).or_default() += 1;
    }
    let mut tp = 0;
    for p in &pred {
        if let Some(c) = remaining.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                tp += 1;
            }
        }
    }
    Ok((tp, pred.len(), gold.len()))
}

/// Micro-averaged entity F1 over a corpus of `(prediction, gold)` pairs.
pub fn ner_span_f1<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pairs {
        let (a, b, c) = ner_counts(p, g)?;
        tp += a;
        np += b;
        ng += c;
    }
    Ok(f1_from_counts(tp, np, ng))
}

/// Longest verbalizer in tokens, plus `EOS`.
pub fn classification_token_cap(verbalizers: &[&str], vocab: &Vocab) -> usize {
    verbalizers
        .iter()
        .map(|v| vocab.encode(v).len())
        .max()
        .unwrap_or(1)
}

/// New-token budget for one example.
pub fn generation_cap(task: TaskKind, example: &TextToTextExample, vocab: &Vocab, max_len: usize) -> usize {
    let cap = match task.verbalizers() {
        Some(v) => classification_token_cap(v, vocab),
        None => match task {
            TaskKind::Ner => 3 * example.input_text.len() + 1,
            _ => QA_MAX_NEW_TOKENS,
        },
    };
    cap.clamp(1, max_len)
}

/// Metric names required per task.
pub fn required_metrics(task: TaskKind) -> &'static [&'static str] {
    match task {
        TaskKind::Qa => &["f1", "exact_match"],
        TaskKind::Nli => &["accuracy"],
        TaskKind::Ner | TaskKind::Cwcd => &["f1"],
        TaskKind::Lm => &[],
    }
}

/// Metric used when tasks are averaged together.
pub fn primary_metric(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Nli => "accuracy",
        _ => "f1",
    }
}

/// Scores predictions against the examples' targets.
pub fn score_predictions(task: TaskKind, predictions: &[String], examples: &[TextToTextExample]) -> Result<BTreeMap<String, f64>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("test set".into()));
    }
    if predictions.len() != examples.len() {
        return Err(Error::InvalidInput("prediction count differs from example count".into()));
    }
    let preds: Vec<&str> = predictions.iter().map(String::as_str).collect();
    let golds: Vec<&str> = examples.iter().map(|e| e.target_text.as_str()).collect();
    let mut m = BTreeMap::new();
    match task {
        TaskKind::Qa => {
            let n = preds.len() as f64;
            let mut f1 = 0.0;
            let mut em = 0.0;
            for (p, g) in preds.iter().zip(&golds) {
                f1 += squad_f1(p, &[g])?;
                em += exact_match(p, &[g])?;
            }
            m.insert("f1".into(), f1 / n);
            m.insert("exact_match".into(), em / n);
        }
        TaskKind::Nli => {
            m.insert("accuracy".into(), accuracy(&preds, &golds, &crate::data::NLI_VERBALIZERS)?);
        }
        TaskKind::Cwcd => {
            m.insert("f1".into(), binary_f1(&preds, &golds, crate::data::CWCD_VERBALIZERS[0])?);
            m.insert("accuracy".into(), accuracy(&preds, &golds, &crate::data::CWCD_VERBALIZERS)?);
        }
        TaskKind::Ner => {
            m.insert("f1".into(), ner_span_f1(preds.iter().copied().zip(golds.iter().copied()))?);
        }
        TaskKind::Lm => return Err(Error::UnknownTask("lm has no evaluation metric".into())),
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: TaskKind,
    /// `None` for the backbone-only baseline.
    pub variant: Option<Variant>,
    pub source_language: Option<String>,
    pub target_language: String,
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
}

/// Greedy predictions for every example.
pub fn predict(model: &TinyTransformer, peft: &PeftState, test: &[TextToTextExample], task: TaskKind) -> Result<Vec<String>> {
    let vocab = model.vocab();
    let max_len = model.config().max_input_length;
    test.iter()
        .map(|ex| {
            let src = vocab.encode(&ex.input_text);
            let cap = generation_cap(task, ex, vocab, max_len);
            Ok(vocab.decode(&model.generate(&src, peft, cap)?))
        })
        .collect()
}

/// Generates and scores; labels other than the target language are left
/// for the caller.
pub fn evaluate(model: &TinyTransformer, peft: &PeftState, test: &[TextToTextExample], task: TaskKind) -> Result<EvalResult> {
    let first = test.first().ok_or_else(|| Error::EmptyDataset("test set".into()))?;
    let predictions = predict(model, peft, test, task)?;
    Ok(EvalResult {
        task,
        variant: None,
        source_language: None,
        target_language: first.language.clone(),
        metrics: score_predictions(task, &predictions, test)?,
        n_examples: test.len(),
    })
}

/// One cell of the grid.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub task: TaskKind,
    pub variant: Variant,
    pub source: String,
    pub target: String,
}

impl CellId {
    pub fn label(&self) -> String {
        format!("{}/{}/{}->{}", self.task, self.variant, self.source, self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub tasks: Vec<TaskKind>,
    pub variants: Vec<Variant>,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
}

impl GridSpec {
    pub fn cells(&self) -> Vec<CellId> {
        let mut out = Vec::new();
        for &task in &self.tasks {
            for &variant in &self.variants {
                for source in &self.sources {
                    for target in &self.targets {
                        out.push(CellId {
                            task,
                            variant,
                            source: source.clone(),
                            target: target.clone(),
                        });
                    }
                }
            }
        }
        out
    }

    pub fn baselines(&self) -> Vec<(TaskKind, String)> {
        self.tasks
            .iter()
            .flat_map(|&t| self.targets.iter().map(move |l| (t, l.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Present(EvalResult),
    Absent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub grid: GridSpec,
    pub cells: BTreeMap<CellId, Cell>,
    pub baselines: BTreeMap<(TaskKind, String), Cell>,
}

impl TransferMatrix {
    pub fn present(&self) -> impl Iterator<Item = (&CellId, &EvalResult)> {
        self.cells.iter().filter_map(|(id, c)| match c {
            Cell::Present(r) => Some((id, r)),
            Cell::Absent(_) => None,
        })
    }

    pub fn absent(&self) -> Vec<String> {
        let cells = self.cells.iter().filter_map(|(id, c)| match c {
            Cell::Absent(why) => Some(format!("{}: {why}", id.label())),
            Cell::Present(_) => None,
        });
        let baselines = self.baselines.iter().filter_map(|((t, l), c)| match c {
            Cell::Absent(why) => Some(format!("{t}/baseline/{l}: {why}")),
            Cell::Present(_) => None,
        });
        cells.chain(baselines).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.absent().is_empty()
    }

    pub fn baseline(&self, task: TaskKind, target: &str) -> Option<&EvalResult> {
        match self.baselines.get(&(task, target.to_string())) {
            Some(Cell::Present(r)) => Some(r),
            _ => None,
        }
    }
}

/// Fills every grid cell and baseline through the supplied evaluators.
/// `Ok(None)` or an error marks the cell absent; the matrix always covers
/// the whole grid.
pub fn transfer_matrix(
    grid: &GridSpec,
    mut cell: impl FnMut(&CellId) -> Result<Option<EvalResult>>,
    mut baseline: impl FnMut(TaskKind, &str) -> Result<Option<EvalResult>>,
) -> TransferMatrix {
    let to_cell = |r: Result<Option<EvalResult>>| match r {
        Ok(Some(result)) => Cell::Present(result),
        Ok(None) => Cell::Absent("missing checkpoint".into()),
        Err(e) => Cell::Absent(e.to_string()),
    };
    let cells = grid.cells().into_iter().map(|id| {
        let c = to_cell(cell(&id));
        (id, c)
    }).collect();
    let baselines = grid
        .baselines()
        .into_iter()
        .map(|(t, l)| {
            let c = to_cell(baseline(t, &l));
            ((t, l), c)
        })
        .collect();
    TransferMatrix {
        grid: grid.clone(),
        cells,
        baselines,
    }
}

/// `100 · (result − baseline) / baseline`; `None` when the baseline is zero.
pub fn relative_improvement(result: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (result - baseline) / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Best,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub source: String,
    pub target: String,
    pub variant: Variant,
    pub mean: f64,
    pub tasks: usize,
    pub rank: Option<Rank>,
}

/// Mean primary metric over tasks per (source, target, variant), with the
/// best and second-best variant marked in each (source, target) column.
/// Ties go to the variant that comes first in canonical order.
pub fn summarize(matrix: &TransferMatrix) -> Vec<SummaryRow> {
    let mut acc: BTreeMap<(String, String, Variant), (f64, usize)> = BTreeMap::new();
    for (id, r) in matrix.present() {
        let v = r.metrics.get(primary_metric(id.task)).copied().unwrap_or(0.0);
        let e = acc.entry((id.source.clone(), id.target.clone(), id.variant)).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let mut rows: Vec<SummaryRow> = acc
        .into_iter()
        .map(|((source, target, variant), (sum, n))| SummaryRow {
            source,
            target,
            variant,
            mean: sum / n as f64,
            tasks: n,
            rank: None,
        })
        .collect();
    let mut columns: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        columns.entry((r.source.clone(), r.target.clone())).or_default().push(i);
    }
    for idx in columns.values() {
        let mut order = idx.clone();
        order.sort_by(|&a, &b| {
            rows[b]
                .mean
                .total_cmp(&rows[a].mean)
                .then(rows[a].variant.ordinal().cmp(&rows[b].variant.ordinal()))
        });
        if let Some(&i) = order.first() {
            rows[i].rank = Some(Rank::Best);
        }
        if let Some(&i) = order.get(1) {
            rows[i].rank = Some(Rank::Second);
        }
    }
    rows
}

/// Flat result row as written to the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: TaskKind,
    pub config: String,
    pub source_lang: String,
    pub target_lang: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

pub const RESULTS_HEADER: &str = "task\tconfig\tsource_lang\ttarget_lang\tmetric\tvalue\tn\tseed";

pub fn result_rows(matrix: &TransferMatrix, seed: u64) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for ((task, target), cell) in &matrix.baselines {
        if let Cell::Present(r) = cell {
            for (metric, value) in &r.metrics {
                rows.push(ResultRow {
                    task: *task,
                    config: "baseline".into(),
                    source_lang: "-".into(),
                    target_lang: target.clone(),
                    metric: metric.clone(),
                    value: *value,
                    n: r.n_examples,
                    seed,
                });
            }
        }
    }
    for (id, r) in matrix.present() {
        for (metric, value) in &r.metrics {
            rows.push(ResultRow {
                task: id.task,
                config: id.variant.name().into(),
                source_lang: id.source.clone(),
                target_lang: id.target.clone(),
                metric: metric.clone(),
                value: *value,
                n: r.n_examples,
                seed,
            });
        }
    }
    rows
}

pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.task, r.config, r.source_lang, r.target_lang, r.metric, r.value, r.n, r.seed
        )
        .expect("string write");
    }
    write_file(path, &out)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULTS_HEADER => {}
        _ => {
            return Err(Error::MalformedRecord {
                line: 1,
                reason: "missing results header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |what: &str| Error::MalformedRecord {
                line: i + 1,
                reason: format!("bad {what}"),
            };
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 8 {
                return Err(bad("column count"));
            }
            Ok(ResultRow {
                task: f[0].parse().map_err(|_| bad("task"))?,
                config: f[1].to_string(),
                source_lang: f[2].to_string(),
                target_lang: f[3].to_string(),
                metric: f[4].to_string(),
                value: f[5].parse().map_err(|_| bad("value"))?,
                n: f[6].parse().map_err(|_| bad("n"))?,
                seed: f[7].parse().map_err(|_| bad("seed"))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: TaskKind,
    pub config: String,
    pub source_lang: String,
    pub target_lang: String,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for one seed.
    pub std: f64,
    pub seeds: Vec<u64>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows across seeds into mean ± standard deviation cells.
pub fn aggregate_seeds(rows: &[ResultRow]) -> Vec<AggregateRow> {
    type Key = (TaskKind, String, String, String, String);
    let mut groups: BTreeMap<Key, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.task, r.config.clone(), r.source_lang.clone(), r.target_lang.clone(), r.metric.clone()))
            .or_default()
            .push((r.seed, r.value));
    }
    groups
        .into_iter()
        .map(|((task, config, source_lang, target_lang, metric), mut vals)| {
            vals.sort_by_key(|(s, _)| *s);
            let values: Vec<f64> = vals.iter().map(|(_, v)| *v).collect();
            let (mean, std) = mean_std(&values);
            AggregateRow {
                task,
                config,
                source_lang,
                target_lang,
                metric,
                mean,
                std,
                seeds: vals.into_iter().map(|(s, _)| s).collect(),
            }
        })
        .collect()
}

pub fn write_aggregate(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut out = String::from("task\tconfig\tsource_lang\ttarget_lang\tmetric\tmean\tstd\tseeds\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.task,
            r.config,
            r.source_lang,
            r.target_lang,
            r.metric,
            r.mean,
            r.std,
            seeds.join(",")
        )
        .expect("string write");
    }
    write_file(path, &out)
}

/// Relative improvement of each variant's task-averaged primary metric
/// over the task-averaged baseline at the target. Rows are sources,
/// columns targets; `None` marks an undefined value.
pub fn relative_table(matrix: &TransferMatrix, variant: Variant) -> BTreeMap<(String, String), Option<f64>> {
    let mut out = BTreeMap::new();
    for source in &matrix.grid.sources {
        for target in &matrix.grid.targets {
            let mut res = Vec::new();
            let mut base = Vec::new();
            for &task in &matrix.grid.tasks {
                let id = CellId {
                    task,
                    variant,
                    source: source.clone(),
                    target: target.clone(),
                };
                let metric = primary_metric(task);
                if let (Some(Cell::Present(r)), Some(b)) = (matrix.cells.get(&id), matrix.baseline(task, target)) {
                    if let (Some(x), Some(y)) = (r.metrics.get(metric), b.metrics.get(metric)) {
                        res.push(*x);
                        base.push(*y);
                    }
                }
            }
            let value = if res.is_empty() {
                None
            } else {
                let r = res.iter().sum::<f64>() / res.len() as f64;
                let b = base.iter().sum::<f64>() / base.len() as f64;
                relative_improvement(r, b)
            };
            out.insert((source.clone(), target.clone()), value);
        }
    }
    out
}

/// Heatmap file: one block per variant, rows = source, columns = target,
/// values = relative improvement in percent (`NA` when undefined).
pub fn write_heatmap(matrix: &TransferMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for &variant in &matrix.grid.variants {
        let table = relative_table(matrix, variant);
        writeln!(out, "# {variant}").expect("string write");
        writeln!(out, "source\\target\t{}", matrix.grid.targets.join("\t")).expect("string write");
        for s in &matrix.grid.sources {
            let cells: Vec<String> = matrix
                .grid
                .targets
                .iter()
                .map(|t| match table[&(s.clone(), t.clone())] {
                    Some(v) => format!("{v:.2}"),
                    None => "NA".into(),
                })
                .collect();
            writeln!(out, "{s}\t{}", cells.join("\t")).expect("string write");
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = String::from("source_lang\ttarget_lang\tconfig\tmean\ttasks\trank\n");
    for r in rows {
        let rank = match r.rank {
            Some(Rank::Best) => "best",
            Some(Rank::Second) => "second",
            None => "",
        };
        writeln!(out, "{}\t{}\t{}\t{}\t{}\t{rank}", r.source, r.target, r.variant, r.mean, r.tasks)
            .expect("string write");
    }
    write_file(path, &out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("The  Cat!"), "cat");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("a b the c"), "b c");
        assert_eq!(normalize_answer("Theory, an ant."), "theory ant");
    }

    #[test]
    fn cached_scores_parse_back_bitwise() {
        for n in 1..200u32 {
            for k in 0..=n {
                let x = f64::from(k) / f64::from(n) * 0.7 + 0.1;
                let back: f64 = serde_json::from_str(&serde_json::to_string(&x).unwrap()).unwrap();
                assert_eq!(back.to_bits(), x.to_bits(), "{x}");
            }
        }
    }

    #[test]
    fn qa_metric_examples() {
        assert_eq!(squad_f1("cat sat", &["the cat sat"]).unwrap(), 1.0);
        // "a" is an article, so "a b" reduces to "b": P = 1, R = 1/2.
        assert!((squad_f1("a b", &["b c"]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(squad_f1("x b", &["b c"]).unwrap(), 0.5);
        assert_eq!(squad_f1("blue", &["red"]).unwrap(), 0.0);
        assert_eq!(squad_f1("", &["the"]).unwrap(), 1.0);
        assert_eq!(squad_f1("", &["cat"]).unwrap(), 0.0);
        assert_eq!(squad_f1("red", &["blue", "red"]).unwrap(), 1.0);
        assert!(squad_f1("x", &[]).is_err());
        assert_eq!(exact_match("same", &["same"]).unwrap(), 1.0);
        assert_eq!(exact_match("The cat", &["cat"]).unwrap(), 1.0);
        assert_eq!(exact_match("cat", &["cats"]).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_examples() {
        let v = crate::data::NLI_VERBALIZERS;
        assert_eq!(accuracy(&["Yes", "No"], &["Yes", "No"], &v).unwrap(), 1.0);
        assert_eq!(accuracy(&["Yes", "Yes", "Yes", "No"], &["Yes", "No", "Maybe", "Maybe"], &v).unwrap(), 0.25);
        assert_eq!(accuracy(&["maybe yes"], &["Yes"], &v).unwrap(), 0.0);
        assert!(accuracy(&[], &[], &v).is_err());
        assert!(accuracy(&["Yes"], &[], &v).is_err());
    }

    #[test]
    fn ner_examples() {
        let gold = "Anna <B-PER> left <O> Paris <B-LOC>";
        assert_eq!(ner_span_f1([(gold, gold)]).unwrap(), 1.0);
        let pred = "Anna <B-PER> left <O> Paris <O>";
        assert!((ner_span_f1([(pred, gold)]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ner_span_f1([("just some words", gold)]).unwrap(), 0.0);
        assert_eq!(ner_span_f1([("x <O>", "y <O>")]).unwrap(), 1.0);
        assert!(ner_span_f1([("x", "broken <B-PER")]).is_err());
    }

    #[test]
    fn bio_decoding() {
        let toks: Vec<String> = ["New", "York", "Times", "is", "big"].iter().map(|s| s.to_string()).collect();
        let tags: Vec<String> = ["B-ORG", "I-ORG", "I-ORG", "O", "I-LOC"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            bio_entities(&toks, &tags),
            vec![("New York Times".into(), "ORG".into()), ("big".into(), "LOC".into())]
        );
        let tags: Vec<String> = ["B-ORG", "I-PER", "B-PER", "I-PER", "O"].iter().map(|s| s.to_string()).collect();
        assert_eq!(
            bio_entities(&toks, &tags),
            vec![
                ("New".into(), "ORG".into()),
                ("York".into(), "PER".into()),
                ("Times is".into(), "PER".into())
            ]
        );
    }

    #[test]
    fn token_caps() {
        let vocab = Vocab::default();
        assert_eq!(classification_token_cap(&crate::data::NLI_VERBALIZERS, &vocab), 6);
        assert_eq!(classification_token_cap(&crate::data::CWCD_VERBALIZERS, &vocab), 16);
        assert_eq!(classification_token_cap(&["Only"], &vocab), 5);
    }

    #[test]
    fn relative_improvement_examples() {
        assert!((relative_improvement(0.48, 0.40).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(relative_improvement(0.4, 0.4).unwrap(), 0.0);
        assert!(relative_improvement(0.4, 0.0).is_none());
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }
}
