//! Desk-scale evaluation: multiple-choice accuracy, ROUGE-1, instruction
//! format checks, and greedy-decoding task runs on a toy model.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{argmax, AblationSet, ToyModel};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_ALPHABET: [char; 4] = ['A', 'B', 'C', 'D'];
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
/// Accepted end-of-sequence markers after an answer.
pub const EOS_MARKERS: [&str; 4] = ["<eos>", "</s>", "<|endoftext|>", "<|eot_id|>"];
const ANSWER_PREFIX: &str = "Answer: [";

/// Exact-match accuracy in percent; `None` predictions count as wrong.
pub fn accuracy<S: AsRef<str>>(preds: &[Option<S>], gold: &[S]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy needs equal nonempty lists, got {} predictions and {} gold",
            preds.len(),
            gold.len()
        )));
    }
    let correct = preds
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.as_ref().is_some_and(|p| p.as_ref() == g.as_ref()))
        .count();
    Ok(correct as f64 / preds.len() as f64 * 100.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Lowercase, split on whitespace, trim non-alphanumeric characters from each
/// token's ends, drop what is left empty.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase().trim_matches(|c: char| !c.is_alphanumeric()).to_owned())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Clipped multiset unigram overlap.
pub fn unigram_overlap(gen: &[String], reference: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in gen {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

pub fn rouge1(gen: &str, reference: &str) -> Rouge {
    let g = rouge_tokens(gen);
    let r = rouge_tokens(reference);
    if g.is_empty() || r.is_empty() {
        return Rouge::default();
    }
    let overlap = unigram_overlap(&g, &r) as f64;
    let precision = overlap / g.len() as f64;
    let recall = overlap / r.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Rouge { precision, recall, f1 }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionFlags {
    pub thought_present: bool,
    pub valid_format: bool,
    pub stopped: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtTokens {
    pub open: String,
    pub close: String,
}

impl Default for ThoughtTokens {
    fn default() -> Self {
        Self {
            open: THINK_OPEN.into(),
            close: THINK_CLOSE.into(),
        }
    }
}

/// Occurrences of `Answer: [X]` with `X` in the alphabet: (letter, end byte).
fn answer_matches(output: &str, alphabet: &[char]) -> Vec<(char, usize)> {
    let mut found = Vec::new();
    for (start, _) in output.match_indices(ANSWER_PREFIX) {
        let rest = &output[start + ANSWER_PREFIX.len()..];
        let mut chars = rest.chars();
        if let (Some(x), Some(']')) = (chars.next(), chars.next()) {
            if alphabet.contains(&x) {
                found.push((x, start + ANSWER_PREFIX.len() + x.len_utf8() + 1));
            }
        }
    }
    found
}

fn only_trailer(mut rest: &str) -> bool {
    loop {
        rest = rest.trim_start();
        if rest.is_empty() {
            return true;
        }
        match EOS_MARKERS.iter().find(|m| rest.starts_with(*m)) {
            Some(m) => rest = &rest[m.len()..],
            None => return false,
        }
    }
}

pub fn instruction_checks_with(output: &str, alphabet: &[char], thought: &ThoughtTokens) -> InstructionFlags {
    let thought_present = output
        .find(&thought.open)
        .is_some_and(|open| output[open + thought.open.len()..].contains(thought.close.as_str()));
    let matches = answer_matches(output, alphabet);
    let valid_format = matches.len() == 1;
    let stopped = valid_format && only_trailer(&output[matches[0].1..]);
    InstructionFlags {
        thought_present,
        valid_format,
        stopped,
    }
}

pub fn instruction_checks(output: &str, alphabet: &[char]) -> InstructionFlags {
    instruction_checks_with(output, alphabet, &ThoughtTokens::default())
}

/// The answer letter when the output has exactly one well-formed answer.
pub fn extract_answer(output: &str, alphabet: &[char]) -> Option<char> {
    match answer_matches(output, alphabet).as_slice() {
        [(x, _)] => Some(*x),
        _ => None,
    }
}

/// A prompt given as text (byte-level ids) or as explicit token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prompt {
    Text(String),
    Ids(Vec<u32>),
}

impl Prompt {
    pub fn token_ids(&self) -> Vec<u32> {
        match self {
            Prompt::Text(s) => s.bytes().map(u32::from).collect(),
            Prompt::Ids(ids) => ids.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub prompt: Prompt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

pub fn parse_dataset(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::InvalidArgument(format!("dataset line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Render generated ids: byte ids as UTF-8 (lossy), EOS as `<eos>`, other
/// ids as `<|id|>`.
pub fn decode_tokens(ids: &[u32], eos: Option<u32>) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &id in ids {
        if Some(id) == eos {
            flush(&mut bytes, &mut out);
            out.push_str("<eos>");
        } else if id < 256 {
            bytes.push(id as u8);
        } else {
            flush(&mut bytes, &mut out);
            out.push_str(&format!("<|{id}|>"));
        }
    }
    flush(&mut bytes, &mut out);
    out
}

/// How a multiple-choice prediction is read off the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McMode {
    /// Parse `Answer: [X]` from the greedy continuation.
    #[default]
    Generate,
    /// Highest next-token logit among the choice letters.
    ChoiceLogit,
}

impl FromStr for McMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generate" => Ok(McMode::Generate),
            "choice-logit" => Ok(McMode::ChoiceLogit),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mc mode {s:?} (generate | choice-logit)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_tokens: usize,
    pub mc_mode: McMode,
    pub alphabet: Vec<char>,
    pub thought: ThoughtTokens,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_tokens: 32,
            mc_mode: McMode::Generate,
            alphabet: DEFAULT_ALPHABET.to_vec(),
            thought: ThoughtTokens::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub prompt: Prompt,
    pub gold: String,
    pub multiple_choice: bool,
    pub generated: Option<String>,
    pub extracted: Option<String>,
    pub correct: bool,
    pub flags: InstructionFlags,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<Rouge>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub evaluated: usize,
    pub failed: usize,
    pub accuracy: Option<f64>,
    pub rouge1: Option<Rouge>,
    /// Percent of evaluated multiple-choice examples.
    pub thought_rate: Option<f64>,
    pub format_rate: Option<f64>,
    pub stop_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub config: EvalConfig,
    pub examples: Vec<ExampleRecord>,
    pub aggregate: Aggregate,
}

fn percent(n: usize, d: usize) -> Option<f64> {
    (d > 0).then(|| n as f64 / d as f64 * 100.0)
}

/// Recompute the aggregates from per-example records; failed examples are
/// counted and excluded.
pub fn aggregate(examples: &[ExampleRecord]) -> Aggregate {
    let ok: Vec<&ExampleRecord> = examples.iter().filter(|e| e.error.is_none()).collect();
    let mc: Vec<&&ExampleRecord> = ok.iter().filter(|e| e.multiple_choice).collect();
    let rouges: Vec<Rouge> = ok.iter().filter_map(|e| e.rouge1).collect();
    let rouge1 = (!rouges.is_empty()).then(|| {
        let n = rouges.len() as f64;
        Rouge {
            precision: rouges.iter().map(|r| r.precision).sum::<f64>() / n,
            recall: rouges.iter().map(|r| r.recall).sum::<f64>() / n,
            f1: rouges.iter().map(|r| r.f1).sum::<f64>() / n,
        }
    });
    let count = |f: fn(&InstructionFlags) -> bool| mc.iter().filter(|e| f(&e.flags)).count();
    Aggregate {
        evaluated: ok.len(),
        failed: examples.len() - ok.len(),
        accuracy: percent(ok.iter().filter(|e| e.correct).count(), ok.len()),
        rouge1,
        thought_rate: percent(count(|f| f.thought_present), mc.len()),
        format_rate: percent(count(|f| f.valid_format), mc.len()),
        stop_rate: percent(count(|f| f.stopped), mc.len()),
    }
}

fn choice_logit<T: Real>(
    model: &ToyModel<T>,
    prompt: &[u32],
    n_choices: usize,
    alphabet: &[char],
    ablation: Option<&AblationSet>,
) -> Result<char> {
    let letters = &alphabet[..n_choices.min(alphabet.len())];
    let logits = model.next_token_logits(prompt, ablation)?;
    let mut scores = Vec::with_capacity(letters.len());
    for &c in letters {
        let id = c as usize;
        if id >= logits.len() {
            return Err(Error::Model(format!("choice letter {c:?} outside the vocabulary")));
        }
        scores.push(logits[id]);
    }
    Ok(letters[argmax(&scores)?])
}

fn run_example<T: Real>(
    model: &ToyModel<T>,
    ex: &Example,
    cfg: &EvalConfig,
    ablation: Option<&AblationSet>,
) -> Result<(String, Option<String>, InstructionFlags)> {
    let prompt = ex.prompt.token_ids();
    let ids = model.generate_greedy(&prompt, cfg.max_tokens, ablation)?;
    let text = decode_tokens(&ids, model.spec().eos_token_id);
    match &ex.choices {
        Some(choices) => {
            let flags = instruction_checks_with(&text, &cfg.alphabet, &cfg.thought);
            let extracted = match cfg.mc_mode {
                McMode::Generate => extract_answer(&text, &cfg.alphabet),
                McMode::ChoiceLogit => Some(choice_logit(model, &prompt, choices.len(), &cfg.alphabet, ablation)?),
            };
            Ok((text, extracted.map(String::from), flags))
        }
        None => {
            let mut answer = text.trim_end();
            while let Some(m) = EOS_MARKERS.iter().find(|m| answer.ends_with(*m)) {
                answer = answer[..answer.len() - m.len()].trim_end();
            }
            let answer = answer.trim().to_owned();
            Ok((text, Some(answer), InstructionFlags::default()))
        }
    }
}

/// Greedy-decode every example (in parallel) and aggregate in dataset order.
pub fn run_task<T: Real>(
    model: &ToyModel<T>,
    task: &str,
    dataset: &[Example],
    cfg: &EvalConfig,
    ablation: Option<&AblationSet>,
) -> Result<EvalRecord> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    if cfg.alphabet.is_empty() {
        return Err(Error::InvalidArgument("answer alphabet is empty".into()));
    }
    let examples: Vec<ExampleRecord> = dataset
        .par_iter()
        .map(|ex| {
            let mc = ex.choices.is_some();
            let gold = ex.gold.trim().to_owned();
            match run_example(model, ex, cfg, ablation) {
                Ok((text, extracted, flags)) => ExampleRecord {
                    id: ex.id.clone(),
                    prompt: ex.prompt.clone(),
                    correct: extracted.as_deref() == Some(gold.as_str()),
                    rouge1: ex.reference.as_ref().map(|r| rouge1(&text, r)),
                    gold,
                    multiple_choice: mc,
                    generated: Some(text),
                    extracted,
                    flags,
                    error: None,
                },
                Err(e) => ExampleRecord {
                    id: ex.id.clone(),
                    prompt: ex.prompt.clone(),
                    gold,
                    multiple_choice: mc,
                    generated: None,
                    extracted: None,
                    correct: false,
                    flags: InstructionFlags::default(),
                    rouge1: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(EvalRecord {
        task: task.to_owned(),
        config: cfg.clone(),
        aggregate: aggregate(&examples),
        examples,
    })
}
