use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use skillmerge_core::bench::{
    gen_code_skill, gen_corpus, gen_format_tasks, gen_hard_compose, gen_math_skill, sample_formats, SkillDataset,
};
use skillmerge_core::container::TensorFile;
use skillmerge_core::eval::{
    elo_bootstrap, exact_match, exec_accuracy, mean_f1, read_judgments, superlinearity_report, BootstrapConfig, EloParams,
};
use skillmerge_core::experiment::PretrainPreset;
use skillmerge_core::merge::{default_grid, merge, sweep_grid, Alphas, MergeMethod, MergeSpec};
use skillmerge_core::model::{Attachment, CatBundle, GenOptions, Granularity, MoeBundle, ToyModel};
use skillmerge_core::train::{
    dataset_loss, lorahub_weights, train_cat_coefficients, train_datamix, train_datamix_continual, train_moe_router, train_skill,
    CatTrainConfig, LoraHubConfig, TrainConfig, TrainReport,
};
use skillmerge_core::{read_checkpoint, write_checkpoint, Error, LoraAdapter, LoraConfig, MergedDelta};

use crate::error::{CliError, CliResult};
use crate::manifest::Run;
use crate::{
    AttachArgs, Command, EloArgs, EvalArgs, GenArgs, GranularityArg, LoraArgs, LorahubArgs, MergeArgs, Metric, Preset,
    PretrainArgs, ReportArgs, SweepArgs, Task, TrainDatamixArgs, TrainMixArgs, TrainSkillArgs,
};

const ROUTER_SUFFIX: &str = ".router";
const EVAL_BATCH: usize = 32;

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Pretrain(a) => pretrain(a),
        Command::TrainSkill(a) => train_skill_cmd(a),
        Command::TrainDatamix(a) => train_datamix_cmd(a),
        Command::Merge(a) => merge_cmd(a),
        Command::TrainCat(a) => train_mix(a, false),
        Command::TrainMoe(a) => train_mix(a, true),
        Command::Lorahub(a) => lorahub(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Elo(a) => elo(a),
        Command::Report(a) => report(a),
    }
}

/// Learned or fitted CAT weights together with the adapters they mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatCoefficients {
    pub granularity: Granularity,
    pub alphas: Alphas,
    pub adapters: Vec<String>,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>, run: &mut Run) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    run.input(path);
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_model(path: &Path, run: &mut Run) -> CliResult<ToyModel> {
    run.input(path);
    if !path.exists() {
        return Err(missing(path));
    }
    Ok(ToyModel::load(path)?)
}

fn load_dataset(path: &Path, run: &mut Run) -> CliResult<SkillDataset> {
    run.input(path);
    if !path.exists() {
        return Err(missing(path));
    }
    Ok(SkillDataset::read(path)?)
}

fn load_adapter(path: &Path, run: &mut Run) -> CliResult<LoraAdapter> {
    run.input(path);
    if !path.exists() {
        return Err(missing(path));
    }
    Ok(read_checkpoint(path)?)
}

fn missing(path: &Path) -> CliError {
    CliError::io(path.display(), std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"))
}

fn write_json(path: &Path, value: &impl Serialize, run: &mut Run) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path.display(), e))?;
    run.output(path);
    Ok(())
}

fn write_dataset(ds: &SkillDataset, path: &Path, run: &mut Run) -> CliResult<()> {
    ds.write(path)?;
    run.output(path);
    Ok(())
}

fn write_metrics(report: &TrainReport, out: &Path, run: &mut Run) -> CliResult<()> {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".metrics.jsonl");
    let path = out.with_file_name(name);
    fs::write(&path, report.to_jsonl()).map_err(|e| CliError::io(path.display(), e))?;
    run.output(&path);
    Ok(())
}

fn lora_config(args: &LoraArgs) -> LoraConfig {
    let mut cfg = LoraConfig::with_rank(args.rank);
    if let Some(a) = args.lora_alpha {
        cfg.lora_alpha = a;
    }
    if let Some(p) = args.lora_dropout {
        cfg.lora_dropout = p;
    }
    cfg
}

fn finish(run: Run) -> CliResult<()> {
    if let Some(path) = run.finish()? {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn gen(a: GenArgs) -> CliResult<()> {
    let mut run =
        Run::new("gen", json!({"task": format!("{:?}", a.task), "n": a.n, "n_test": a.n_test, "n_formats": a.n_formats}), a.seed);
    if a.n_test > 0 && a.test_out.is_none() {
        return Err(CliError::usage("--n-test needs --test-out"));
    }
    let total = a.n + a.n_test;
    let sets: Vec<(String, SkillDataset)> = match a.task {
        Task::Math => vec![(String::new(), gen_math_skill(total, a.seed)?)],
        Task::Code => vec![(String::new(), gen_code_skill(total, a.seed)?)],
        Task::Hard => vec![(String::new(), gen_hard_compose(total, a.seed)?)],
        Task::Corpus => vec![(String::new(), gen_corpus(total, a.seed)?)],
        Task::Format => {
            let formats = sample_formats(a.n_formats, a.seed)?;
            gen_format_tasks(&formats, total, a.seed)?
                .into_iter()
                .map(|d| (format!("format_{}.jsonl", d.format_id.unwrap_or(0)), d))
                .collect()
        }
    };
    let target = |dir: &Path, name: &str| if name.is_empty() { dir.to_path_buf() } else { dir.join(name) };
    for dir in std::iter::once(&a.out).chain(a.test_out.as_ref()) {
        if a.task == Task::Format {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
            run.output(dir);
        }
    }
    for (name, ds) in sets {
        let (train, test) = if a.n_test > 0 { ds.split_off_test(a.n_test).map(|(tr, te)| (tr, Some(te)))? } else { (ds, None) };
        write_dataset(&train, &target(&a.out, &name), &mut run)?;
        if let (Some(test), Some(dir)) = (test, a.test_out.as_ref()) {
            write_dataset(&test, &target(dir, &name), &mut run)?;
        }
    }
    finish(run)
}

fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let mut preset = match a.preset {
        Preset::Small => PretrainPreset::small(),
        Preset::Composition => PretrainPreset::composition(),
    };
    let mut run = Run::new("pretrain", Value::Null, a.seed);
    if let Some(rows) = a.rows {
        preset.corpus_rows = rows;
    }
    if a.config.is_some() {
        preset.train = read_config(a.config.as_deref(), &mut run)?;
    }
    run.set_config(serde_json::to_value(&preset)?);
    let model = preset.pretrain(a.seed)?;
    model.save(&a.out)?;
    run.output(&a.out);
    finish(run)
}

fn train_skill_cmd(a: TrainSkillArgs) -> CliResult<()> {
    let mut run = Run::new("train-skill", Value::Null, a.seed);
    let mut cfg: TrainConfig = read_config(a.config.as_deref(), &mut run)?;
    cfg.seed = a.seed;
    let lora = lora_config(&a.lora);
    let model = load_model(&a.model, &mut run)?;
    let data = load_dataset(&a.dataset, &mut run)?;
    run.set_config(json!({"train": cfg, "lora": lora}));
    let trained = train_skill(&model, &data, &lora, &cfg)?;
    write_checkpoint(&trained.value, &a.out)?;
    run.output(&a.out);
    write_metrics(&trained.report, &a.out, &mut run)?;
    finish(run)
}

fn train_datamix_cmd(a: TrainDatamixArgs) -> CliResult<()> {
    let mut run = Run::new("train-datamix", Value::Null, a.seed);
    let mut cfg: TrainConfig = read_config(a.config.as_deref(), &mut run)?;
    cfg.seed = a.seed;
    let lora = lora_config(&a.lora);
    let model = load_model(&a.model, &mut run)?;
    let data: Vec<SkillDataset> = a.datasets.iter().map(|p| load_dataset(p, &mut run)).collect::<CliResult<_>>()?;
    let refs: Vec<&SkillDataset> = data.iter().collect();
    if a.continual {
        if a.instruction.is_empty() {
            return Err(CliError::usage("--continual needs at least one --instruction dataset"));
        }
        let instr: Vec<SkillDataset> = a.instruction.iter().map(|p| load_dataset(p, &mut run)).collect::<CliResult<_>>()?;
        let instr_refs: Vec<&SkillDataset> = instr.iter().collect();
        run.set_config(json!({"train": cfg, "lora": lora, "continual": true}));
        let out = train_datamix_continual(&model, &refs, &instr_refs, &lora, &cfg)?;
        fs::create_dir_all(&a.out).map_err(|e| CliError::io(a.out.display(), e))?;
        run.output(&a.out);
        let model_dir = a.out.join("model");
        out.model.save(&model_dir)?;
        run.output(&model_dir);
        let adapter = a.out.join("adapter.st");
        write_checkpoint(&out.adapter.value, &adapter)?;
        run.output(&adapter);
        write_metrics(&out.adapter.report, &adapter, &mut run)?;
        return finish(run);
    }
    if !a.instruction.is_empty() {
        return Err(CliError::usage("--instruction is only meaningful with --continual"));
    }
    run.set_config(json!({"train": cfg, "lora": lora, "k": data.len()}));
    let trained = train_datamix(&model, &refs, &lora, &cfg)?;
    write_checkpoint(&trained.value, &a.out)?;
    run.output(&a.out);
    write_metrics(&trained.report, &a.out, &mut run)?;
    finish(run)
}

fn parse_method(name: &str) -> CliResult<MergeMethod> {
    MergeMethod::parse(name).ok_or_else(|| CliError::usage(format!("unknown merge method {name:?}")))
}

fn merge_cmd(a: MergeArgs) -> CliResult<()> {
    let method = parse_method(&a.method)?;
    let mut spec = match method {
        MergeMethod::CatStatic | MergeMethod::CatLearned => MergeSpec::cat(a.alpha1, a.alpha2),
        MergeMethod::Linear => MergeSpec::linear(a.alpha1, a.alpha2),
        MergeMethod::Ties => {
            MergeSpec::ties(a.density.ok_or_else(|| CliError::usage("ties needs --density"))?, a.alpha1, a.alpha2)
        }
        MergeMethod::Dare => {
            MergeSpec::dare(a.density.ok_or_else(|| CliError::usage("dare needs --density"))?, a.alpha1, a.alpha2, a.seed)
        }
        MergeMethod::Slerp => MergeSpec::slerp(a.t.ok_or_else(|| CliError::usage("slerp needs --t"))?),
    };
    spec.method = method;
    if a.dare_b_only {
        if method != MergeMethod::Dare {
            return Err(CliError::usage("--dare-b-only applies to dare only"));
        }
        spec.dare_b_only = true;
    }
    let mut run = Run::new("merge", serde_json::to_value(&spec)?, a.seed);
    let a1 = load_adapter(&a.adapter1, &mut run)?;
    let a2 = load_adapter(&a.adapter2, &mut run)?;
    let mut merged = merge(&spec, &a1, &a2)?;
    merged.provenance.sources = vec![a.adapter1.display().to_string(), a.adapter2.display().to_string()];
    merged.write(&a.out)?;
    run.output(&a.out);
    finish(run)
}

fn granularity(arg: Option<GranularityArg>, default: Granularity) -> Granularity {
    match arg {
        Some(GranularityArg::Block) => Granularity::Block,
        Some(GranularityArg::Module) => Granularity::Module,
        None => default,
    }
}

fn train_mix(a: TrainMixArgs, moe: bool) -> CliResult<()> {
    let name = if moe { "train-moe" } else { "train-cat" };
    let mut run = Run::new(name, Value::Null, a.seed);
    let mut cfg: CatTrainConfig = read_config(a.config.as_deref(), &mut run)?;
    cfg.seed = a.seed;
    cfg.granularity = granularity(a.alpha_granularity, cfg.granularity);
    let model = load_model(&a.model, &mut run)?;
    let adapters: Vec<LoraAdapter> = a.adapters.iter().map(|p| load_adapter(p, &mut run)).collect::<CliResult<_>>()?;
    let data: Vec<SkillDataset> = a.datasets.iter().map(|p| load_dataset(p, &mut run)).collect::<CliResult<_>>()?;
    let refs: Vec<&SkillDataset> = data.iter().collect();
    run.set_config(serde_json::to_value(&cfg)?);
    let sources: Vec<String> = a.adapters.iter().map(|p| p.display().to_string()).collect();
    if moe {
        let trained = train_moe_router(&model, &adapters, &refs, &cfg)?;
        let mut file = TensorFile::new();
        for (id, r) in &trained.value.routers {
            file.insert(format!("{id}{ROUTER_SUFFIX}"), r.clone());
        }
        file.metadata.insert("adapters".into(), serde_json::to_string(&sources)?);
        file.write(&a.out)?;
        run.output(&a.out);
        write_metrics(&trained.report, &a.out, &mut run)?;
    } else {
        let trained = train_cat_coefficients(&model, &adapters, &refs, &cfg)?;
        let coeffs =
            CatCoefficients { granularity: trained.value.granularity, alphas: trained.value.alphas(), adapters: sources };
        write_json(&a.out, &coeffs, &mut run)?;
        write_metrics(&trained.report, &a.out, &mut run)?;
    }
    finish(run)
}

fn lorahub(a: LorahubArgs) -> CliResult<()> {
    let mut run = Run::new("lorahub", Value::Null, a.seed);
    let cfg: LoraHubConfig = read_config(a.config.as_deref(), &mut run)?;
    let model = load_model(&a.model, &mut run)?;
    let adapters: Vec<LoraAdapter> = a.adapters.iter().map(|p| load_adapter(p, &mut run)).collect::<CliResult<_>>()?;
    let data = load_dataset(&a.dataset, &mut run)?;
    let shots: Vec<_> = data.examples.iter().take(a.shots).cloned().collect();
    run.set_config(json!({"hub": cfg, "shots": a.shots}));
    let fit = lorahub_weights(&model, &adapters, &shots, &cfg)?;
    let coeffs = CatCoefficients {
        granularity: Granularity::Block,
        alphas: Alphas::Global(fit.weights.clone()),
        adapters: a.adapters.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&a.out, &json!({"coefficients": coeffs, "objective": fit.objective, "evals": fit.evals}), &mut run)?;
    finish(run)
}

/// Scores `model` on `data`; higher is better except for `Loss`.
fn score(model: &ToyModel, data: &SkillDataset, metric: Metric, max_new: usize) -> skillmerge_core::Result<(f64, Value)> {
    if metric == Metric::Loss {
        let loss = dataset_loss(model, data, EVAL_BATCH)?;
        return Ok((loss, json!({})));
    }
    let gens = model.generate_text(&data.prompts(), &GenOptions::greedy(max_new))?;
    let answers: Vec<String> = data.examples.iter().map(|e| e.answer.clone()).collect();
    match metric {
        Metric::Accuracy => Ok((exact_match(&gens, &answers)?, json!({"generations": gens}))),
        Metric::F1 => Ok((mean_f1(&gens, &answers)?, json!({"generations": gens}))),
        Metric::Exec => {
            let r = exec_accuracy(&gens, &data.references()?)?;
            Ok((r.accuracy, json!({"conformance": r.conformance, "generations": gens})))
        }
        Metric::Loss => unreachable!("handled above"),
    }
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let method = parse_method(&a.method)?;
    if !matches!(method, MergeMethod::Ties | MergeMethod::Dare | MergeMethod::Linear) {
        return Err(CliError::usage("sweep supports ties, dare and linear"));
    }
    let mut grid = default_grid();
    if let Some(d) = a.densities.clone() {
        grid.densities = d;
    }
    if let Some(v) = a.alpha1.clone() {
        grid.alpha1 = v;
    }
    if let Some(v) = a.alpha2.clone() {
        grid.alpha2 = v;
    }
    let config = json!({"method": method.name(), "grid": grid, "metric": format!("{:?}", a.metric), "workers": a.workers});
    let mut run = Run::new("sweep", config, a.seed);
    let model = load_model(&a.model, &mut run)?;
    let a1 = load_adapter(&a.adapter1, &mut run)?;
    let a2 = load_adapter(&a.adapter2, &mut run)?;
    let data = load_dataset(&a.dataset, &mut run)?;
    let metric = a.metric;
    let result = sweep_grid(method, &grid, &a1, &a2, a.seed, a.workers, |delta: &MergedDelta| {
        let m = model.with_attachment(Attachment::Dense(delta.clone()))?;
        let (v, _) = score(&m, &data, metric, a.max_new_tokens)?;
        Ok(if metric == Metric::Loss { -v } else { v })
    })?;
    write_json(&a.out, &result, &mut run)?;
    println!(
        "{} points; best {} λ={:?} α={:?} score {:.6}",
        result.rows.len(),
        method.name(),
        result.best.density,
        result.best.alphas,
        result.best_score
    );
    finish(run)
}

fn attachment(args: &AttachArgs, run: &mut Run) -> CliResult<Attachment> {
    let adapters: Vec<LoraAdapter> = args.adapters.iter().map(|p| load_adapter(p, run)).collect::<CliResult<_>>()?;
    let chosen = [args.delta.is_some(), args.cat.is_some(), args.moe.is_some()].iter().filter(|b| **b).count();
    if chosen > 1 {
        return Err(CliError::usage("use at most one of --delta, --cat and --moe"));
    }
    if let Some(path) = &args.delta {
        if !adapters.is_empty() {
            return Err(CliError::usage("--delta cannot be combined with --adapter"));
        }
        run.input(path);
        return Ok(Attachment::Dense(MergedDelta::read(path)?));
    }
    if let Some(path) = &args.cat {
        run.input(path);
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        let value: Value = serde_json::from_str(&text)?;
        let coeffs: CatCoefficients = serde_json::from_value(value.get("coefficients").cloned().unwrap_or(value))?;
        let adapters = if adapters.is_empty() {
            coeffs.adapters.iter().map(|p| load_adapter(Path::new(p), run)).collect::<CliResult<_>>()?
        } else {
            adapters
        };
        return Ok(Attachment::Cat(CatBundle::from_alphas(adapters, &coeffs.alphas, coeffs.granularity)?));
    }
    if let Some(path) = &args.moe {
        run.input(path);
        let file = TensorFile::read(path)?;
        let adapters = if adapters.is_empty() {
            let listed: Vec<String> =
                file.metadata.get("adapters").map(|s| serde_json::from_str(s)).transpose()?.unwrap_or_default();
            listed.iter().map(|p| load_adapter(Path::new(p), run)).collect::<CliResult<_>>()?
        } else {
            adapters
        };
        let mut bundle = MoeBundle::new(adapters)?;
        let mut routers = BTreeMap::new();
        for (name, t) in file.tensors {
            let id = name
                .strip_suffix(ROUTER_SUFFIX)
                .ok_or_else(|| Error::Merge(format!("unexpected tensor {name:?} in router checkpoint")))?;
            routers.insert(id.to_string(), t);
        }
        if routers.keys().ne(bundle.routers.keys()) {
            return Err(Error::Merge("router layers do not match the adapters".into()).into());
        }
        bundle.routers = routers;
        return Ok(Attachment::Moe(bundle));
    }
    match adapters.len() {
        0 => Ok(Attachment::None),
        1 => Ok(Attachment::Adapter(adapters.into_iter().next().expect("one adapter"))),
        _ => Err(CliError::usage("several --adapter flags need --cat or --moe")),
    }
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let mut run = Run::new("eval", json!({"metric": format!("{:?}", a.metric), "max_new_tokens": a.max_new_tokens}), 0);
    let base = load_model(&a.model, &mut run)?;
    let att = attachment(&a.attach, &mut run)?;
    let data = load_dataset(&a.dataset, &mut run)?;
    let model = base.with_attachment(att)?;
    let (value, mut extra) = score(&model, &data, a.metric, a.max_new_tokens)?;
    if !a.keep_generations {
        if let Some(o) = extra.as_object_mut() {
            o.remove("generations");
        }
    }
    let metric = format!("{:?}", a.metric).to_lowercase();
    let mut report = json!({"metric": metric, "value": value, "n": data.len()});
    if let (Some(r), Some(e)) = (report.as_object_mut(), extra.as_object()) {
        r.extend(e.clone());
    }
    println!("{metric} {value:.6} over {} examples", data.len());
    if let Some(out) = &a.out {
        write_json(out, &report, &mut run)?;
    }
    finish(run)
}

fn elo(a: EloArgs) -> CliResult<()> {
    let config = BootstrapConfig {
        n_boot: a.n_boot,
        seed: a.seed,
        params: EloParams { initial: a.initial, k: a.k, ..EloParams::default() },
        models: (!a.models.is_empty()).then(|| a.models.clone()),
        threads: a.threads,
    };
    let mut run = Run::new("elo", serde_json::to_value(&config)?, a.seed);
    run.input(&a.records);
    if !a.records.exists() {
        return Err(missing(&a.records));
    }
    let records = read_judgments(&a.records)?;
    let table = elo_bootstrap(&records, &config)?;
    print!("{}", table.to_table());
    if let Some(out) = &a.out {
        write_json(out, &table, &mut run)?;
    }
    finish(run)
}

fn report(a: ReportArgs) -> CliResult<()> {
    let scale = if a.percent { 0.01 } else { 1.0 };
    let r = superlinearity_report(a.base * scale, a.skill1 * scale, a.skill2 * scale, a.merged * scale)?;
    let mut run = Run::new(
        "report",
        json!({"base": a.base, "skill1": a.skill1, "skill2": a.skill2, "merged": a.merged, "percent": a.percent}),
        0,
    );
    print!("{}", r.to_table());
    if let Some(out) = &a.out {
        write_json(out, &r, &mut run)?;
    }
    finish(run)
}
