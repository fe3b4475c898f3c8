use super::*;
use crate::bench::{gen_code_skill, gen_math_skill};
use crate::model::{CatBundle, Granularity, ToyConfig};

fn tiny() -> ToyModel {
    let cfg = ToyConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 128, ..ToyConfig::default() };
    ToyModel::init(cfg, 3).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 1, lr: 1e-2, warmup_steps: 1, batch_size: 4, grad_accum: 2, seed, ..TrainConfig::default() }
}

/// Random non-zero `B` so the adapter changes the model.
fn loud_adapter(model: &ToyModel, r: usize, std: f64, seed: u64) -> LoraAdapter {
    let mut a = model.new_adapter(LoraConfig::with_rank(r), seed).unwrap();
    let mut rng = Rng::seed(seed ^ 0xabc);
    for p in a.layers.values_mut() {
        p.a = Tensor::randn(p.a.shape().to_vec(), std, &mut rng);
        p.b = Tensor::randn(p.b.shape().to_vec(), std, &mut rng);
    }
    a
}

#[test]
fn one_example_overfits_within_200_steps() {
    // A briefly pretrained base, with the output head sharpened to the
    // logit scale of a converged model so a frozen head does not cap the
    // achievable confidence.
    let mut model = ToyModel::init(ToyConfig::default(), 0).unwrap();
    let warm = gen_code_skill(400, 77).unwrap();
    let pre = TrainConfig { epochs: 3, lr: 1e-2, warmup_steps: 10, grad_accum: 1, ..TrainConfig::default() };
    pretrain_base(&mut model, &[&warm], &pre).unwrap();
    model.base.lm_head = model.base.lm_head.scale(3.0);
    let ds = gen_code_skill(1, 5).unwrap();
    assert!(!warm.prompts().contains(&ds.examples[0].prompt));
    let cfg = TrainConfig {
        epochs: 200,
        lr: 1e-2,
        warmup_steps: 10,
        batch_size: 4,
        grad_accum: 1,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let lora = LoraConfig { lora_dropout: 0.0, ..LoraConfig::with_rank(8) };
    let out = train_skill(&model, &ds, &lora, &cfg).unwrap();
    assert_eq!(out.report.steps, 200);
    let trained = model.with_attachment(Attachment::Adapter(out.value)).unwrap();
    let loss = dataset_loss(&trained, &ds, 4).unwrap();
    assert!(loss < 0.01, "loss {loss}");
}

#[test]
fn training_is_bit_reproducible() {
    let model = tiny();
    let ds = gen_math_skill(40, 1).unwrap();
    let lora = LoraConfig::with_rank(4);
    let a = train_skill(&model, &ds, &lora, &quick(7)).unwrap();
    let b = train_skill(&model, &ds, &lora, &quick(7)).unwrap();
    assert_eq!(a, b);
    let c = train_skill(&model, &ds, &lora, &quick(8)).unwrap();
    assert_ne!(a.value, c.value);
}

#[test]
fn training_lowers_the_loss_and_keeps_the_base_frozen() {
    let model = tiny();
    let ds = gen_math_skill(80, 2).unwrap();
    let cfg = TrainConfig { epochs: 3, ..quick(1) };
    let before = dataset_loss(&model, &ds, 8).unwrap();
    let out = train_skill(&model, &ds, &LoraConfig::with_rank(4), &cfg).unwrap();
    let after = dataset_loss(&model.with_attachment(Attachment::Adapter(out.value)).unwrap(), &ds, 8).unwrap();
    assert!(after < before, "{after} vs {before}");
    assert!(out.report.best_epoch.is_some());
    let lines = out.report.to_jsonl();
    assert_eq!(lines.lines().count(), out.report.metrics.len());
    assert!(lines.contains("\"split\":\"val\""));
}

#[test]
fn warmup_must_fit_inside_the_run() {
    let model = tiny();
    let ds = gen_math_skill(8, 2).unwrap();
    let cfg = TrainConfig { warmup_steps: 100, ..quick(0) };
    assert!(matches!(train_skill(&model, &ds, &LoraConfig::with_rank(2), &cfg), Err(Error::Contract(_))));
    let cfg = TrainConfig { lr: 0.0, ..quick(0) };
    assert!(train_skill(&model, &ds, &LoraConfig::with_rank(2), &cfg).is_err());
}

#[test]
fn nan_weights_abort_with_divergence() {
    let mut model = tiny();
    model.base.lm_head.data_mut()[0] = f64::NAN;
    let ds = gen_math_skill(8, 2).unwrap();
    let err = train_skill(&model, &ds, &LoraConfig::with_rank(2), &TrainConfig { warmup_steps: 0, ..quick(0) }).unwrap_err();
    assert!(matches!(err, Error::Divergence(ref m) if m.contains("step 0")), "{err}");
}

#[test]
fn datamix_rank_and_parameter_count() {
    let model = ToyModel::init(ToyConfig::default(), 0).unwrap();
    let lora = LoraConfig::with_rank(32);
    let mixed = datamix_config(&lora, 2);
    assert_eq!(mixed.r, 64);
    assert_eq!(mixed.scaling(), lora.scaling());
    let single = model.new_adapter(lora, 0).unwrap().num_params();
    assert_eq!(model.new_adapter(mixed, 0).unwrap().num_params(), 2 * single);
}

#[test]
fn datamix_ignores_dataset_order_and_reduces_to_single_skill() {
    let model = tiny();
    let m = gen_math_skill(24, 1).unwrap();
    let c = gen_code_skill(24, 1).unwrap();
    let lora = LoraConfig::with_rank(2);
    let ab = train_datamix(&model, &[&m, &c], &lora, &quick(3)).unwrap();
    let ba = train_datamix(&model, &[&c, &m], &lora, &quick(3)).unwrap();
    assert_eq!(ab.value, ba.value);
    assert_eq!(ab.value.config.r, 4);
    let one = train_datamix(&model, &[&m], &lora, &quick(3)).unwrap();
    assert_eq!(one, train_skill(&model, &m, &lora, &quick(3)).unwrap());
    assert!(train_datamix(&model, &[], &lora, &quick(3)).is_err());
}

#[test]
fn continual_mode_folds_the_first_stage() {
    let model = tiny();
    let corpus = crate::bench::gen_corpus(24, 1).unwrap();
    let m = gen_math_skill(24, 1).unwrap();
    let out = train_datamix_continual(&model, &[&corpus], &[&m], &LoraConfig::with_rank(2), &quick(1)).unwrap();
    assert_ne!(out.model.base, model.base);
    assert_eq!(out.adapter.value.config.r, 4);
    assert!(matches!(out.model.attachment, Attachment::None));
}

#[test]
fn pretraining_changes_the_base() {
    let mut model = tiny();
    let before = model.base.clone();
    let corpus = crate::bench::gen_corpus(24, 3).unwrap();
    let report = pretrain_base(&mut model, &[&corpus], &quick(0)).unwrap();
    assert!(report.steps > 0);
    assert_ne!(model.base, before);
}

#[test]
fn mixture_takes_the_minimum_fraction_from_each() {
    assert_eq!(mixture_size(&[1000, 400], 0.05), 20);
    assert_eq!(mixture_size(&[10, 30], 0.05), 1);
    assert_eq!(mixture_size(&[], 0.05), 0);
    let a = gen_math_skill(100, 0).unwrap();
    let b = gen_code_skill(60, 0).unwrap();
    let mix = build_mixture(&[&a, &b], 0.1, 4).unwrap();
    assert_eq!(mix.len(), 12);
    assert_eq!(mix.iter().filter(|e| e.answer.starts_with("return")).count(), 6);
    let empty = SkillDataset { examples: Vec::new(), ..a.clone() };
    assert!(matches!(build_mixture(&[&a, &empty], 0.1, 0), Err(Error::Contract(_))));
}

#[test]
fn cat_training_freezes_adapters_and_moves_coefficients() {
    let model = tiny();
    let a1 = loud_adapter(&model, 2, 0.3, 1);
    let a2 = loud_adapter(&model, 2, 0.3, 2);
    let d1 = gen_math_skill(200, 1).unwrap();
    let d2 = gen_code_skill(200, 1).unwrap();
    let cfg = CatTrainConfig { lr: 1e-2, mixture_fraction: 0.2, ..CatTrainConfig::default() };
    let out = train_cat_coefficients(&model, &[a1.clone(), a2.clone()], &[&d1, &d2], &cfg).unwrap();
    assert_eq!(out.value.adapters, vec![a1, a2]);
    assert_eq!(out.value.coefficients.len(), 5);
    assert!(out.value.coefficients.values().any(|c| c.data() != [0.5, 0.5]));
    let bad = CatTrainConfig { mixture_fraction: 0.0, ..cfg };
    assert!(bad.validate().is_err());
}

#[test]
fn zero_second_adapter_gets_no_coefficient_gradient() {
    let model = tiny();
    let a1 = loud_adapter(&model, 2, 0.3, 1);
    let zero = a1.zeros_like();
    let bundle = CatBundle::new(vec![a1, zero], 0.5, Granularity::Module).unwrap();
    let m = model.with_attachment(Attachment::Cat(bundle)).unwrap();
    let batch = Batch::from_pairs(&gen_math_skill(4, 0).unwrap().encoded().unwrap()).unwrap();
    let (_, grads) = m.loss_and_grads(&batch, Trainable::Coefficients, &ForwardOptions::default()).unwrap();
    assert!(grads.values().all(|g| g.data()[1] == 0.0));
    assert!(grads.values().any(|g| g.data()[0] != 0.0));
}

#[test]
fn moe_router_training_keeps_weights_normalized() {
    let model = tiny();
    let a1 = loud_adapter(&model, 2, 0.3, 1);
    let a2 = loud_adapter(&model, 2, 0.3, 2);
    let d1 = gen_math_skill(100, 1).unwrap();
    let d2 = gen_code_skill(100, 1).unwrap();
    let cfg = CatTrainConfig { lr: 1e-2, mixture_fraction: 0.2, ..CatTrainConfig::default() };
    let out = train_moe_router(&model, &[a1.clone(), a2.clone()], &[&d1, &d2], &cfg).unwrap();
    assert_eq!(out.value.adapters, vec![a1, a2]);
    assert!(out.value.routers.values().any(|r| r.data().iter().any(|&x| x != 0.0)));
    let m = model.with_attachment(Attachment::Moe(out.value)).unwrap();
    let routes = m.moe_routing(&Batch::from_pairs(&d1.encoded().unwrap()[..3]).unwrap()).unwrap();
    assert_eq!(routes.len(), 5);
    for t in routes.values() {
        for row in t.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn nelder_mead_finds_a_quadratic_minimum() {
    let target = [0.2, 0.9];
    let cfg = LoraHubConfig { l2: 0.0, ..LoraHubConfig::default() };
    let f = |w: &[f64]| (w[0] - target[0]).powi(2) + (w[1] - target[1]).powi(2);
    let res = minimize_weights(2, f, &cfg).unwrap();
    assert!(res.evals <= 100);
    assert!((res.weights[0] - 0.2).abs() < 1e-3 && (res.weights[1] - 0.9).abs() < 1e-3, "{res:?}");
}

#[test]
fn nelder_mead_budget_and_regularization_limits() {
    let f = |w: &[f64]| (w[0] - 0.2).powi(2) + (w[1] - 0.9).powi(2);
    let one = minimize_weights(2, f, &LoraHubConfig { budget: 1, ..LoraHubConfig::default() }).unwrap();
    assert_eq!((one.weights.as_slice(), one.evals), (&[0.5, 0.5][..], 1));
    let heavy = minimize_weights(2, f, &LoraHubConfig { l2: 1e9, budget: 400, ..LoraHubConfig::default() }).unwrap();
    assert!(heavy.weights.iter().all(|w| w.abs() < 1e-3), "{heavy:?}");
    assert!(matches!(minimize_weights(2, |_| f64::NAN, &LoraHubConfig::default()), Err(Error::Divergence(_))));
}

#[test]
fn lorahub_runs_on_the_model_objective() {
    let model = tiny();
    let a1 = loud_adapter(&model, 2, 0.2, 1);
    let a2 = loud_adapter(&model, 2, 0.2, 2);
    let shots = gen_math_skill(5, 9).unwrap().examples;
    let cfg = LoraHubConfig { budget: 20, ..LoraHubConfig::default() };
    let res = lorahub_weights(&model, &[a1.clone(), a2.clone()], &shots, &cfg).unwrap();
    assert_eq!(res.weights.len(), 2);
    assert!(res.evals <= 20);
    assert!(lorahub_weights(&model, &[a1, a2], &shots[..4], &cfg).is_err());
}
