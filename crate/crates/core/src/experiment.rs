//! End-to-end desk-scale experiments: base pretraining presets, the
//! convex-teacher recovery check, math+code composition on hard problems,
//! and the three-format comparison of CAT against DATA-MIX.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{LoraAdapter, LoraConfig};
use crate::bench::{
    gen_code_skill, gen_corpus, gen_format_tasks, gen_hard_compose, gen_math_skill, sample_formats, Example, PromptFormat,
    SkillDataset,
};
use crate::error::{Error, Result};
use crate::eval::{exact_match, exec_accuracy, superlinearity_report, SuperlinearityReport};
use crate::merge::Alphas;
use crate::model::generate::sample_token;
use crate::model::tokenizer::{self, BOS, EOS, PAD};
use crate::model::{Attachment, Batch, CatBundle, GenOptions, Granularity, ToyConfig, ToyModel};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{pretrain_base, train_cat_coefficients, train_datamix, train_skill, CatTrainConfig, Schedule, TrainConfig};

/// How to pretrain a base model on the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainPreset {
    pub model: ToyConfig,
    pub corpus_rows: usize,
    pub train: TrainConfig,
}

impl PretrainPreset {
    /// Small base used for teacher recovery and the format experiment.
    pub fn small() -> Self {
        Self {
            model: ToyConfig::default(),
            corpus_rows: 16_000,
            train: TrainConfig {
                epochs: 1,
                lr: 1e-3,
                warmup_steps: 50,
                schedule: Schedule::Constant,
                grad_accum: 1,
                val_fraction: 0.0,
                ..TrainConfig::default()
            },
        }
    }

    /// Larger base for composition. Eight heads let the model copy long
    /// numbers out of the prompt.
    pub fn composition() -> Self {
        Self {
            model: ToyConfig { n_heads: 8, ..ToyConfig::default() },
            corpus_rows: 50_000,
            train: TrainConfig {
                epochs: 1,
                lr: 1e-3,
                warmup_steps: 100,
                schedule: Schedule::Constant,
                grad_accum: 1,
                val_fraction: 0.01,
                ..TrainConfig::default()
            },
        }
    }

    pub fn pretrain(&self, seed: u64) -> Result<ToyModel> {
        let mut model = ToyModel::init(self.model.clone(), seed)?;
        let corpus = gen_corpus(self.corpus_rows, seed)?;
        let train = TrainConfig { seed, ..self.train.clone() };
        let report = pretrain_base(&mut model, &[&corpus], &train)?;
        log::info!("pretrained base on {} rows, {} steps, val {:?}", self.corpus_rows, report.steps, report.best_val_loss);
        Ok(model)
    }

    /// Loads the base from `dir` when present, otherwise pretrains and saves.
    pub fn pretrain_cached(&self, seed: u64, dir: impl AsRef<Path>) -> Result<ToyModel> {
        let dir = dir.as_ref();
        if dir.join(crate::model::CONFIG_FILE).exists() {
            return ToyModel::load(dir);
        }
        let model = self.pretrain(seed)?;
        model.save(dir)?;
        Ok(model)
    }
}

/// Samples one continuation per prompt from `teacher` at temperature 1,
/// never emitting `PAD` or `BOS`, and pairs it with the prompt.
pub fn teacher_dataset(teacher: &ToyModel, prompts: &[String], max_new_tokens: usize, seed: u64) -> Result<SkillDataset> {
    let mut rng = Rng::seed(seed);
    let vocab = teacher.config.vocab_size;
    let mut examples = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(32) {
        let mut seqs: Vec<Vec<usize>> =
            chunk.iter().map(|p| Ok(std::iter::once(BOS).chain(tokenizer::encode(p)?).collect())).collect::<Result<_>>()?;
        let starts: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let mut done: Vec<bool> = seqs.iter().map(|s| s.len() >= teacher.config.max_seq_len).collect();
        for _ in 0..max_new_tokens {
            if done.iter().all(|d| *d) {
                break;
            }
            let logits = teacher.logits(&Batch::from_prefixes(&seqs)?)?;
            let seq_len = logits.rows() / seqs.len();
            for (i, s) in seqs.iter_mut().enumerate() {
                if done[i] {
                    continue;
                }
                let at = (i * seq_len + s.len() - 1) * vocab;
                let mut row = logits.data()[at..at + vocab].to_vec();
                row[PAD] = f64::NEG_INFINITY;
                row[BOS] = f64::NEG_INFINITY;
                let tok = sample_token(&row, 1.0, 1.0, &mut rng);
                if tok == EOS {
                    done[i] = true;
                } else {
                    s.push(tok);
                    done[i] = s.len() >= teacher.config.max_seq_len;
                }
            }
        }
        for (prompt, (s, start)) in chunk.iter().zip(seqs.iter().zip(starts)) {
            examples.push(Example { prompt: prompt.clone(), answer: tokenizer::decode(&s[start..]), reference: None });
        }
    }
    Ok(SkillDataset { skill_tag: "teacher".into(), format_id: None, seed, examples })
}

/// Two random adapters whose factors are both drawn from `N(0, std²)`, so
/// each shifts the base's outputs noticeably.
pub fn random_adapter_pair(base: &ToyModel, lora: &LoraConfig, std: f64, seed: u64) -> Result<[LoraAdapter; 2]> {
    let mut rng = Rng::seed(seed);
    let mut draw = |s: u64| -> Result<LoraAdapter> {
        let mut a = base.new_adapter(lora.clone(), s)?;
        for p in a.layers.values_mut() {
            p.a = Tensor::randn(p.a.shape().to_vec(), std, &mut rng);
            p.b = Tensor::randn(p.b.shape().to_vec(), std, &mut rng);
        }
        Ok(a)
    };
    Ok([draw(Rng::derive_seed(seed, 1))?, draw(Rng::derive_seed(seed, 2))?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub target: (f64, f64),
    pub lora: LoraConfig,
    pub factor_std: f64,
    pub n_samples: usize,
    pub max_new_tokens: usize,
    pub cat: CatTrainConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            target: (0.3, 0.7),
            lora: LoraConfig::with_rank(8),
            factor_std: 0.2,
            n_samples: 2000,
            max_new_tokens: 16,
            cat: CatTrainConfig {
                mixture_fraction: 1.0,
                epochs: 4,
                lr: 2e-2,
                schedule: Schedule::LinearDecay,
                warmup_steps: 10,
                granularity: Granularity::Block,
                val_fraction: 0.0,
                ..CatTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecovery {
    pub target: (f64, f64),
    /// Learned `(α₁, α₂)` per coefficient key.
    pub learned: BTreeMap<String, (f64, f64)>,
    /// Largest `|α − α*|` over all keys and both adapters.
    pub max_error: f64,
}

/// Builds a frozen teacher carrying `α₁*Δ₁ + α₂*Δ₂` in every layer, samples
/// its answers to math prompts, and fits CAT coefficients to them from the
/// usual initialization.
pub fn teacher_recovery(base: &ToyModel, cfg: &TeacherConfig, seed: u64) -> Result<TeacherRecovery> {
    let adapters = random_adapter_pair(base, &cfg.lora, cfg.factor_std, Rng::derive_seed(seed, 10))?;
    let (t1, t2) = cfg.target;
    let bundle = CatBundle::from_alphas(adapters.to_vec(), &Alphas::pair(t1, t2), cfg.cat.granularity)?;
    let teacher = base.with_attachment(Attachment::Cat(bundle))?;
    let prompts = gen_math_skill(cfg.n_samples, Rng::derive_seed(seed, 11))?.prompts();
    let data = teacher_dataset(&teacher, &prompts, cfg.max_new_tokens, Rng::derive_seed(seed, 12))?;
    let cat = CatTrainConfig { seed, ..cfg.cat.clone() };
    let trained = train_cat_coefficients(base, &adapters, &[&data], &cat)?;
    let learned: BTreeMap<String, (f64, f64)> =
        trained.value.coefficients.iter().map(|(k, c)| (k.clone(), (c.data()[0], c.data()[1]))).collect();
    let max_error = learned.values().map(|&(a, b)| (a - t1).abs().max((b - t2).abs())).fold(0.0, f64::max);
    Ok(TeacherRecovery { target: cfg.target, learned, max_error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub lora: LoraConfig,
    pub skill: TrainConfig,
    pub cat: CatTrainConfig,
    pub max_new_tokens: usize,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        Self {
            n_train: 4096,
            n_test: 100,
            lora: LoraConfig::with_rank(8),
            skill: TrainConfig { epochs: 5, lr: 1e-2, warmup_steps: 20, grad_accum: 1, ..TrainConfig::default() },
            cat: CatTrainConfig { lr: 1e-2, ..CatTrainConfig::default() },
            max_new_tokens: 40,
        }
    }
}

/// Exec-accuracy and format conformance of one model on the hard set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecScore {
    pub model: String,
    pub accuracy: f64,
    pub conformance: f64,
    pub sample: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionResult {
    pub seed: u64,
    /// Base, math, code, static CAT (0.5, 0.5) and learned CAT, in order.
    pub scores: Vec<ExecScore>,
    pub learned_alphas: BTreeMap<String, Vec<f64>>,
    /// Uses the learned CAT as the merged model.
    pub report: SuperlinearityReport,
}

impl CompositionResult {
    pub fn score(&self, model: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.model == model).map(|s| s.accuracy)
    }

    /// Learned-CAT accuracy minus the better single skill.
    pub fn margin(&self) -> f64 {
        let single = self.score("math").unwrap_or(0.0).max(self.score("code").unwrap_or(0.0));
        self.score("cat").unwrap_or(0.0) - single
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12} {:>9} {:>9}  sample\n", "model", "exec acc", "conform");
        for s in &self.scores {
            out.push_str(&format!("{:<12} {:>9.3} {:>9.3}  {:?}\n", s.model, s.accuracy, s.conformance, s.sample));
        }
        out
    }
}

fn exec_score(name: &str, model: &ToyModel, test: &SkillDataset, max_new: usize) -> Result<ExecScore> {
    let gens = model.generate_text(&test.prompts(), &GenOptions::greedy(max_new))?;
    let r = exec_accuracy(&gens, &test.references()?)?;
    Ok(ExecScore { model: name.into(), accuracy: r.accuracy, conformance: r.conformance, sample: gens[0].clone() })
}

/// Trains math and code adapters on `base`, merges them with CAT, and scores
/// every model by exec-accuracy on hard word problems.
pub fn composition(base: &ToyModel, cfg: &CompositionConfig, seed: u64) -> Result<CompositionResult> {
    let math = gen_math_skill(cfg.n_train, Rng::derive_seed(seed, 21))?;
    let code = gen_code_skill(cfg.n_train, Rng::derive_seed(seed, 22))?;
    let hard = gen_hard_compose(cfg.n_test, Rng::derive_seed(seed, 23))?;
    let skill = TrainConfig { seed, ..cfg.skill.clone() };
    let am = train_skill(base, &math, &cfg.lora, &skill)?.value;
    let ac = train_skill(base, &code, &cfg.lora, &skill)?.value;
    let pair = vec![am.clone(), ac.clone()];
    let cat = CatTrainConfig { seed, ..cfg.cat.clone() };
    let learned = train_cat_coefficients(base, &pair, &[&math, &code], &cat)?.value;
    let learned_alphas = learned.coefficients.iter().map(|(k, c)| (k.clone(), c.data().to_vec())).collect();
    let fixed = CatBundle::new(pair, 0.5, cat.granularity)?;
    let models = [
        ("base", Attachment::None),
        ("math", Attachment::Adapter(am)),
        ("code", Attachment::Adapter(ac)),
        ("cat_static", Attachment::Cat(fixed)),
        ("cat", Attachment::Cat(learned)),
    ];
    let mut scores = Vec::with_capacity(models.len());
    for (name, att) in models {
        scores.push(exec_score(name, &base.with_attachment(att)?, &hard, cfg.max_new_tokens)?);
    }
    let acc = |i: usize| scores[i].accuracy;
    let report = superlinearity_report(acc(0), acc(1), acc(2), acc(4))?;
    Ok(CompositionResult { seed, scores, learned_alphas, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatConfig {
    /// Formats drawn from the grammar; the first `n_train_formats` are
    /// trained on and the rest are held out.
    pub n_formats: usize,
    pub n_train_formats: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub lora: LoraConfig,
    pub skill: TrainConfig,
    pub cat: CatTrainConfig,
}

impl Default for FormatConfig {
    fn default() -> Self {
        Self {
            n_formats: 7,
            n_train_formats: 3,
            n_train: 1024,
            n_test: 128,
            lora: LoraConfig::with_rank(8),
            skill: TrainConfig { epochs: 3, lr: 3e-3, warmup_steps: 20, grad_accum: 1, ..TrainConfig::default() },
            cat: CatTrainConfig { lr: 1e-2, ..CatTrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatComparison {
    pub formats: Vec<PromptFormat>,
    pub n_train_formats: usize,
    /// `(method, exact-match accuracy per format)`.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl FormatComparison {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10}", "method");
        for (i, f) in self.formats.iter().enumerate() {
            let mark = if i < self.n_train_formats { "*" } else { "" };
            out.push_str(&format!(" {:>8}", format!("f{}{mark}", f.id().unwrap_or(0))));
        }
        out.push_str(&format!(" {:>8}\n", "held-out"));
        for (name, accs) in &self.rows {
            out.push_str(&format!("{name:<10}"));
            for a in accs {
                out.push_str(&format!(" {a:>8.3}"));
            }
            out.push_str(&format!(" {:>8.3}\n", self.held_out_mean(name).unwrap_or(f64::NAN)));
        }
        out.push_str("* trained format\n");
        out
    }

    /// Mean accuracy of `method` over the held-out formats.
    pub fn held_out_mean(&self, method: &str) -> Option<f64> {
        let (_, accs) = self.rows.iter().find(|(m, _)| m == method)?;
        let held = &accs[self.n_train_formats..];
        (!held.is_empty()).then(|| held.iter().sum::<f64>() / held.len() as f64)
    }
}

/// One adapter per training format, merged by learned CAT (k = 3), against
/// a single DATA-MIX adapter of rank `k·r` on the pooled formats; every
/// model is scored on every format.
pub fn format_comparison(base: &ToyModel, cfg: &FormatConfig, seed: u64) -> Result<FormatComparison> {
    if cfg.n_train_formats == 0 || cfg.n_train_formats > cfg.n_formats {
        return Err(Error::contract("n_train_formats must be in 1..=n_formats"));
    }
    let formats = sample_formats(cfg.n_formats, Rng::derive_seed(seed, 31))?;
    let all = gen_format_tasks(&formats, cfg.n_train + cfg.n_test, Rng::derive_seed(seed, 32))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ds in all {
        let (tr, te) = ds.split_off_test(cfg.n_test)?;
        train.push(tr);
        test.push(te);
    }
    let skill = TrainConfig { seed, ..cfg.skill.clone() };
    let used: Vec<&SkillDataset> = train[..cfg.n_train_formats].iter().collect();
    let singles: Vec<LoraAdapter> =
        used.iter().map(|d| train_skill(base, d, &cfg.lora, &skill).map(|t| t.value)).collect::<Result<_>>()?;
    let cat = CatTrainConfig { seed, ..cfg.cat.clone() };
    let learned = train_cat_coefficients(base, &singles, &used, &cat)?.value;
    let mix = train_datamix(base, &used, &cfg.lora, &skill)?.value;
    let mut models = vec![("base".to_string(), Attachment::None)];
    for (i, a) in singles.into_iter().enumerate() {
        models.push((format!("lora_f{}", formats[i].id().unwrap_or(i)), Attachment::Adapter(a)));
    }
    models.push(("cat".into(), Attachment::Cat(learned)));
    models.push(("data_mix".into(), Attachment::Adapter(mix)));
    let opts = GenOptions::greedy(4);
    let mut rows = Vec::with_capacity(models.len());
    for (name, att) in models {
        let m = base.with_attachment(att)?;
        let accs = test
            .iter()
            .map(|t| {
                let gens = m.generate_text(&t.prompts(), &opts)?;
                let refs: Vec<String> = t.examples.iter().map(|e| e.answer.clone()).collect();
                exact_match(&gens, &refs)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((name, accs));
    }
    Ok(FormatComparison { formats, n_train_formats: cfg.n_train_formats, rows })
}
