//! Scoring: exact match, F1, exec-accuracy, Elo with bootstrap, and the
//! super-linearity report.

mod elo;
pub mod interp;
mod report;

use serde::{Deserialize, Serialize};

pub use elo::{
    elo_bootstrap, elo_replay, elo_update, read_judgments, write_judgments, BootstrapConfig, EloParams, EloTable, JudgmentRecord,
    Outcome,
};
pub use report::{bar_chart_svg, superlinearity_report, Improvements, SuperlinearityReport};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub conformant: bool,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub n: usize,
    pub correct: usize,
    pub conformant: usize,
    pub accuracy: f64,
    pub conformance: f64,
    pub outcomes: Vec<ExecOutcome>,
}

/// Scores one generation against a numeric reference.
pub fn exec_outcome(generation: &str, reference: i64) -> ExecOutcome {
    match interp::extract_program(generation) {
        None => ExecOutcome { conformant: false, correct: false },
        Some(expr) => {
            let value = expr.eval(&interp::Env::new());
            ExecOutcome { conformant: true, correct: value == Ok(reference) }
        }
    }
}

/// Fraction of generations whose program evaluates to the reference, plus
/// the fraction that contain a parseable program at all.
pub fn exec_accuracy(generations: &[String], references: &[i64]) -> Result<ExecReport> {
    if generations.len() != references.len() {
        return Err(Error::contract(format!("{} generations for {} references", generations.len(), references.len())));
    }
    let outcomes: Vec<ExecOutcome> = generations.iter().zip(references).map(|(g, &r)| exec_outcome(g, r)).collect();
    let n = outcomes.len();
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let conformant = outcomes.iter().filter(|o| o.conformant).count();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(ExecReport { n, correct, conformant, accuracy: frac(correct), conformance: frac(conformant), outcomes })
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of generations equal to their reference up to whitespace.
pub fn exact_match(generations: &[String], references: &[String]) -> Result<f64> {
    if generations.len() != references.len() || generations.is_empty() {
        return Err(Error::contract("exact_match needs equally many, non-zero generations and references"));
    }
    let hits = generations.iter().zip(references).filter(|(g, r)| normalize(g) == normalize(r)).count();
    Ok(hits as f64 / generations.len() as f64)
}

/// Token-level F1 between a prediction and a reference (whitespace tokens,
/// multiset overlap).
pub fn f1_score(prediction: &str, reference: &str) -> f64 {
    let pred: Vec<&str> = prediction.split_whitespace().collect();
    let gold: Vec<&str> = reference.split_whitespace().collect();
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut remaining = gold.clone();
    let mut overlap = 0usize;
    for tok in &pred {
        if let Some(i) = remaining.iter().position(|g| g == tok) {
            remaining.swap_remove(i);
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn mean_f1(generations: &[String], references: &[String]) -> Result<f64> {
    if generations.len() != references.len() || generations.is_empty() {
        return Err(Error::contract("mean_f1 needs equally many, non-zero generations and references"));
    }
    Ok(generations.iter().zip(references).map(|(g, r)| f1_score(g, r)).sum::<f64>() / generations.len() as f64)
}

/// The text after the last `answer:` marker, trimmed to its first line.
pub fn final_answer(text: &str) -> Option<&str> {
    let i = text.rfind("answer:")?;
    Some(text[i + "answer:".len()..].lines().next().unwrap_or("").trim())
}
