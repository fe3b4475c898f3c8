//! Deterministic synthetic skill datasets.
//!
//! Every generator is a pure function of `(n, seed)`, draws unique prompts,
//! and checks each label against an independent re-derivation from the
//! prompt before returning.

mod formats;
mod tasks;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::tokenizer;
use crate::rng::Rng;

pub use formats::{gen_format_tasks, sample_formats, Casing, PromptFormat, FORMAT_GRAMMAR_SIZE};
pub use tasks::{gen_code_skill, gen_corpus, gen_hard_compose, gen_math_skill, MathOp};

pub const MATH_TAG: &str = "math";
pub const CODE_TAG: &str = "code";
pub const HARD_TAG: &str = "hard_compose";
pub const FORMAT_TAG: &str = "format";
pub const CORPUS_TAG: &str = "corpus";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub answer: String,
    /// Numeric ground truth for exec-accuracy, where there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<i64>,
}

/// JSON-lines row; mask offsets index the token string `prompt ++ answer`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Row {
    prompt: String,
    answer: String,
    mask_begin: usize,
    mask_end: usize,
    skill_tag: String,
    format_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillDataset {
    pub skill_tag: String,
    pub format_id: Option<usize>,
    pub seed: u64,
    pub examples: Vec<Example>,
}

impl SkillDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Token pairs `(prompt, answer)` for batching.
    pub fn encoded(&self) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        self.examples.iter().map(|e| Ok((tokenizer::encode(&e.prompt)?, tokenizer::encode(&e.answer)?))).collect()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.prompt.clone()).collect()
    }

    /// Numeric references; errors if any example lacks one.
    pub fn references(&self) -> Result<Vec<i64>> {
        self.examples
            .iter()
            .map(|e| e.reference.ok_or_else(|| Error::contract(format!("example {:?} has no numeric reference", e.prompt))))
            .collect()
    }

    /// Splits off the last `n_test` examples. Prompts are unique within a
    /// generated dataset, so the halves are disjoint.
    pub fn split_off_test(mut self, n_test: usize) -> Result<(SkillDataset, SkillDataset)> {
        if n_test >= self.examples.len() {
            return Err(Error::contract(format!("cannot hold out {n_test} of {} examples", self.examples.len())));
        }
        let test_examples = self.examples.split_off(self.examples.len() - n_test);
        let test = SkillDataset { examples: test_examples, ..self.clone() };
        Ok((self, test))
    }

    /// Re-derives every label from its prompt.
    pub fn verify(&self) -> Result<()> {
        for e in &self.examples {
            let ok = match self.skill_tag.as_str() {
                MATH_TAG => tasks::verify_math(e),
                CODE_TAG => tasks::verify_code(e),
                HARD_TAG => tasks::verify_hard(e),
                FORMAT_TAG => formats::verify_format(e, self.format_id),
                CORPUS_TAG => e.prompt.is_empty() && tokenizer::is_encodable(&e.answer),
                other => return Err(Error::contract(format!("unknown skill tag {other:?}"))),
            };
            if !ok {
                return Err(Error::contract(format!("label check failed for {:?} -> {:?}", e.prompt, e.answer)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let begin = e.prompt.chars().count();
            let row = Row {
                prompt: e.prompt.clone(),
                answer: e.answer.clone(),
                mask_begin: begin,
                mask_end: begin + e.answer.chars().count(),
                skill_tag: self.skill_tag.clone(),
                format_id: self.format_id,
                reference: e.reference,
            };
            out.push_str(&serde_json::to_string(&row).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<SkillDataset> {
        let file = fs::File::open(path)?;
        let mut examples = Vec::new();
        let mut tag: Option<(String, Option<usize>)> = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row =
                serde_json::from_str(&line).map_err(|e| FormatError::HeaderJson(format!("dataset line {}: {e}", i + 1)))?;
            let begin = row.prompt.chars().count();
            if row.mask_begin != begin || row.mask_end != begin + row.answer.chars().count() {
                return Err(Error::contract(format!("dataset line {}: mask does not cover exactly the answer", i + 1)));
            }
            match &tag {
                None => tag = Some((row.skill_tag.clone(), row.format_id)),
                Some((t, f)) if *t != row.skill_tag || *f != row.format_id => {
                    return Err(Error::contract(format!("dataset line {}: mixed skill tags or formats", i + 1)));
                }
                _ => {}
            }
            examples.push(Example { prompt: row.prompt, answer: row.answer, reference: row.reference });
        }
        let (skill_tag, format_id) = tag.ok_or_else(|| Error::contract("empty dataset file"))?;
        Ok(SkillDataset { skill_tag, format_id, seed: 0, examples })
    }
}

/// Draws `n` examples with distinct prompts from `draw` (distinct texts
/// when prompts are empty).
pub(crate) fn unique_examples(n: usize, seed: u64, mut draw: impl FnMut(&mut Rng) -> Example) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::contract("dataset size must be positive"));
    }
    let mut rng = Rng::seed(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let mut misses = 0usize;
    while out.len() < n {
        let e = draw(&mut rng);
        let key = if e.prompt.is_empty() { &e.answer } else { &e.prompt };
        if seen.insert(key.clone()) {
            out.push(e);
        } else {
            misses += 1;
            if misses > 50 * n + 1000 {
                return Err(Error::contract(format!("generator cannot produce {n} distinct prompts")));
            }
        }
    }
    Ok(out)
}

pub(crate) fn finish(skill_tag: &str, format_id: Option<usize>, seed: u64, examples: Vec<Example>) -> Result<SkillDataset> {
    let ds = SkillDataset { skill_tag: skill_tag.to_string(), format_id, seed, examples };
    ds.verify()?;
    for e in &ds.examples {
        if !tokenizer::is_encodable(&e.prompt) || !tokenizer::is_encodable(&e.answer) {
            return Err(Error::contract(format!("example {:?} is not encodable", e.prompt)));
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests;
