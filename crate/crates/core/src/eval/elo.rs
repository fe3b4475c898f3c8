use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AWins,
    BWins,
    Tie,
}

impl Outcome {
    /// Score of model A.
    pub fn score_a(self) -> f64 {
        match self {
            Outcome::AWins => 1.0,
            Outcome::BWins => 0.0,
            Outcome::Tie => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub question_id: String,
    pub model_a: String,
    pub model_b: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EloParams {
    pub initial: f64,
    pub k: f64,
    pub base: f64,
    pub scale: f64,
}

impl Default for EloParams {
    fn default() -> Self {
        Self { initial: 200.0, k: 4.0, base: 10.0, scale: 400.0 }
    }
}

/// One rating update. The two changes cancel, so the sum is conserved.
pub fn elo_update(r_a: f64, r_b: f64, outcome: Outcome, params: &EloParams) -> (f64, f64) {
    let e_a = 1.0 / (1.0 + params.base.powf((r_b - r_a) / params.scale));
    let change = params.k * (outcome.score_a() - e_a);
    (r_a + change, r_b - change)
}

/// Replays records in order starting every model at `params.initial`.
pub fn elo_replay<'a>(
    records: impl IntoIterator<Item = &'a JudgmentRecord>,
    models: &BTreeSet<String>,
    params: &EloParams,
) -> BTreeMap<String, f64> {
    let mut ratings: BTreeMap<String, f64> = models.iter().map(|m| (m.clone(), params.initial)).collect();
    for rec in records {
        let ra = *ratings.entry(rec.model_a.clone()).or_insert(params.initial);
        let rb = *ratings.entry(rec.model_b.clone()).or_insert(params.initial);
        let (na, nb) = elo_update(ra, rb, rec.outcome, params);
        ratings.insert(rec.model_a.clone(), na);
        ratings.insert(rec.model_b.clone(), nb);
    }
    ratings
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub seed: u64,
    pub params: EloParams,
    /// Models to report. Listed models without any record are dropped with a
    /// warning; `None` reports every model seen in the records.
    pub models: Option<Vec<String>>,
    pub threads: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { n_boot: 5000, seed: 0, params: EloParams::default(), models: None, threads: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    /// Median over bootstrap replicates.
    pub ratings: BTreeMap<String, f64>,
    /// 2.5th and 97.5th percentiles over replicates.
    pub ci: BTreeMap<String, (f64, f64)>,
    /// Single replay in file order.
    pub point: BTreeMap<String, f64>,
    pub n_boot: usize,
}

impl EloTable {
    /// Models sorted by descending median rating.
    pub fn ranking(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self.ratings.iter().map(|(m, r)| (m.as_str(), *r)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
        v
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<24} {:>10} {:>10} {:>10} {:>10}\n", "model", "median", "ci_lo", "ci_hi", "point");
        for (m, r) in self.ranking() {
            let (lo, hi) = self.ci[m];
            out.push_str(&format!("{m:<24} {r:>10.2} {lo:>10.2} {hi:>10.2} {:>10.2}\n", self.point[m]));
        }
        out
    }
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 1]`.
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bootstrap Elo: each replicate draws `records.len()` records with
/// replacement (which also randomizes replay order) and replays them.
/// Replicate `i` uses the seed `derive_seed(seed, i)`, so the table does not
/// depend on the thread count.
pub fn elo_bootstrap(records: &[JudgmentRecord], config: &BootstrapConfig) -> Result<EloTable> {
    if records.is_empty() {
        return Err(Error::contract("elo_bootstrap needs at least one judgment record"));
    }
    if config.n_boot == 0 {
        return Err(Error::contract("n_boot must be positive"));
    }
    for r in records {
        if r.model_a == r.model_b {
            return Err(Error::contract(format!("record {} compares {} with itself", r.question_id, r.model_a)));
        }
    }
    let seen: BTreeSet<String> = records.iter().flat_map(|r| [r.model_a.clone(), r.model_b.clone()]).collect();
    let models: BTreeSet<String> = match &config.models {
        None => seen.clone(),
        Some(list) => list
            .iter()
            .filter(|m| {
                let present = seen.contains(*m);
                if !present {
                    warn!("model {m:?} appears in no judgment record; excluded from the Elo table");
                }
                present
            })
            .cloned()
            .collect(),
    };
    let replicate = |i: usize| -> BTreeMap<String, f64> {
        let mut rng = Rng::seed(Rng::derive_seed(config.seed, i as u64));
        let sample: Vec<&JudgmentRecord> = (0..records.len()).map(|_| &records[rng.below(records.len())]).collect();
        elo_replay(sample, &seen, &config.params)
    };
    let threads = config.threads.clamp(1, config.n_boot);
    let reps: Vec<BTreeMap<String, f64>> = if threads == 1 {
        (0..config.n_boot).map(replicate).collect()
    } else {
        let chunk = config.n_boot.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let replicate = &replicate;
                    s.spawn(move || (t * chunk..((t + 1) * chunk).min(config.n_boot)).map(replicate).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("bootstrap worker panicked")).collect()
        })
    };
    let point_all = elo_replay(records, &seen, &config.params);
    let mut ratings = BTreeMap::new();
    let mut ci = BTreeMap::new();
    let mut point = BTreeMap::new();
    for m in &models {
        let mut vals: Vec<f64> = reps.iter().map(|r| r[m]).collect();
        vals.sort_by(f64::total_cmp);
        ratings.insert(m.clone(), percentile(&vals, 0.5));
        ci.insert(m.clone(), (percentile(&vals, 0.025), percentile(&vals, 0.975)));
        point.insert(m.clone(), point_all[m]);
    }
    Ok(EloTable { ratings, ci, point, n_boot: config.n_boot })
}

pub fn read_judgments(path: impl AsRef<Path>) -> Result<Vec<JudgmentRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JudgmentRecord =
            serde_json::from_str(&line).map_err(|e| FormatError::HeaderJson(format!("judgment line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_judgments(records: &[JudgmentRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}
