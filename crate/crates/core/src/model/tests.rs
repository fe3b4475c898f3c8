use super::*;
use crate::adapter::LoraConfig;
use crate::autodiff::Graph;
use crate::merge::{merge_cat, Alphas};

fn small() -> ToyConfig {
    ToyConfig { vocab_size: tokenizer::VOCAB_SIZE, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_seq_len: 16 }
}

fn random_adapter(model: &ToyModel, seed: u64) -> LoraAdapter {
    let mut a = model.new_adapter(LoraConfig::with_rank(4), seed).unwrap();
    let mut rng = Rng::seed(seed ^ 0xabcd);
    for p in a.layers.values_mut() {
        p.b = Tensor::randn(p.b.shape().to_vec(), 0.3, &mut rng);
    }
    a
}

fn batch() -> Batch {
    let enc = |s: &str| tokenizer::encode(s).unwrap();
    Batch::from_pairs(&[(enc("ab+c"), enc("12")), (enc("x"), enc("yz"))]).unwrap()
}

#[test]
fn batch_layout_masks_answer_and_eos() {
    let b = batch();
    assert_eq!((b.n_seq, b.seq_len), (2, 7));
    // row 0: BOS a b + c 1 2 | EOS; targets 1, 2, EOS supervised
    assert_eq!(&b.mask[..7], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    assert_eq!(b.targets[6], tokenizer::EOS);
    // row 1: BOS x y z | EOS, then padding
    assert_eq!(&b.mask[7..], &[0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn zero_b_adapter_matches_base() {
    let model = ToyModel::init(small(), 1).unwrap();
    let base = model.logits(&batch()).unwrap();
    let adapter = model.new_adapter(LoraConfig::with_rank(4), 2).unwrap();
    let with = model.with_attachment(Attachment::Adapter(adapter)).unwrap();
    assert_eq!(with.logits(&batch()).unwrap(), base);
}

#[test]
fn cat_endpoint_matches_single_adapter() {
    let model = ToyModel::init(small(), 1).unwrap();
    let (a1, a2) = (random_adapter(&model, 3), random_adapter(&model, 4));
    let single = model.with_attachment(Attachment::Adapter(a1.clone())).unwrap().logits(&batch()).unwrap();
    let bundle = CatBundle::from_alphas(vec![a1, a2], &Alphas::pair(1.0, 0.0), Granularity::Module).unwrap();
    let cat = model.with_attachment(Attachment::Cat(bundle)).unwrap().logits(&batch()).unwrap();
    assert!(single.max_abs_diff(&cat).unwrap() < 1e-12);
}

#[test]
fn factored_cat_matches_dense_merge() {
    let model = ToyModel::init(small(), 5).unwrap();
    let (a1, a2) = (random_adapter(&model, 6), random_adapter(&model, 7));
    let alphas = Alphas::pair(0.3, 1.4);
    let dense = merge_cat(&[&a1, &a2], &alphas).unwrap();
    let bundle = CatBundle::from_alphas(vec![a1, a2], &alphas, Granularity::Block).unwrap();
    let factored = model.with_attachment(Attachment::Cat(bundle)).unwrap().logits(&batch()).unwrap();
    let dense = model.with_attachment(Attachment::Dense(dense)).unwrap().logits(&batch()).unwrap();
    assert!(factored.max_abs_diff(&dense).unwrap() < 1e-10);
}

#[test]
fn zero_router_equals_uniform_cat() {
    let model = ToyModel::init(small(), 8).unwrap();
    let (a1, a2) = (random_adapter(&model, 9), random_adapter(&model, 10));
    let moe = MoeBundle::new(vec![a1.clone(), a2.clone()]).unwrap();
    let cat = CatBundle::new(vec![a1, a2], 0.5, Granularity::Module).unwrap();
    let x = model.with_attachment(Attachment::Moe(moe)).unwrap().logits(&batch()).unwrap();
    let y = model.with_attachment(Attachment::Cat(cat)).unwrap().logits(&batch()).unwrap();
    assert!(x.max_abs_diff(&y).unwrap() < 1e-12);
}

#[test]
fn attach_then_detach_restores_base() {
    let mut model = ToyModel::init(small(), 11).unwrap();
    let base = model.logits(&batch()).unwrap();
    let adapter = random_adapter(&model, 12);
    model.attach(Attachment::Adapter(adapter)).unwrap();
    assert_ne!(model.logits(&batch()).unwrap(), base);
    model.detach();
    assert_eq!(model.logits(&batch()).unwrap(), base);
}

#[test]
fn folding_matches_attached_forward() {
    let mut model = ToyModel::init(small(), 13).unwrap();
    model.attach(Attachment::Adapter(random_adapter(&model, 14))).unwrap();
    let attached = model.logits(&batch()).unwrap();
    model.fold_attachment().unwrap();
    assert!(model.logits(&batch()).unwrap().max_abs_diff(&attached).unwrap() < 1e-12);
}

#[test]
fn logits_finite_across_seeds() {
    let tokens: Vec<usize> = (3..15).collect();
    for seed in 0..100 {
        let model = ToyModel::init(small(), seed).unwrap();
        let logits = model.forward(&tokens).unwrap();
        assert_eq!(logits.shape(), &[tokens.len(), tokenizer::VOCAB_SIZE]);
        assert!(logits.is_finite());
    }
}

#[test]
fn base_forward_is_bit_deterministic() {
    let a = ToyModel::init(small(), 21).unwrap().logits(&batch()).unwrap();
    let b = ToyModel::init(small(), 21).unwrap().logits(&batch()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn overlong_sequence_is_rejected() {
    let model = ToyModel::init(small(), 1).unwrap();
    assert!(matches!(model.forward(&[3; 17]), Err(Error::Contract(_))));
}

#[test]
fn all_ones_mask_equals_unmasked_mean_ce() {
    let model = ToyModel::init(small(), 2).unwrap();
    let seq: Vec<usize> = vec![tokenizer::BOS, 5, 9, 4, 7];
    let b = Batch::from_sequences(&[(seq.clone(), 1)]).unwrap();
    assert!(b.mask.iter().all(|&m| m == 1.0));
    let logits = model.logits(&b).unwrap();
    let v = tokenizer::VOCAB_SIZE;
    let mut total = 0.0;
    for t in 0..4 {
        let row = &logits.data()[t * v..(t + 1) * v];
        let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
        total += lse - row[seq[t + 1]];
    }
    assert!((model.masked_loss(&b).unwrap() - total / 4.0).abs() < 1e-12);
}

#[test]
fn hand_built_three_token_loss() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]]).unwrap());
    let loss = g.masked_cross_entropy(logits, &[0, 0, 1], &[0.0, 1.0, 1.0]).unwrap();
    let p1 = 1f64.exp() / (1f64.exp() + 1.0);
    let p2 = 2f64.exp() / (2f64.exp() + 1.0);
    let expected = -(p1.ln() + p2.ln()) / 2.0;
    assert!((g.value(loss).data()[0] - expected).abs() < 1e-15);
}

#[test]
fn moe_coefficient_examples() {
    let x = Tensor::vector(vec![0.3, -2.0, 5.0]);
    assert_eq!(moe_coefficients(&Tensor::zeros([3, 2]), &x).unwrap(), vec![0.5, 0.5]);
    let router = Tensor::from_rows(&[&[3f64.ln(), 0.0]]).unwrap();
    let c = moe_coefficients(&router, &Tensor::vector(vec![1.0])).unwrap();
    assert!((c[0] - 0.75).abs() < 1e-15 && (c[1] - 0.25).abs() < 1e-15);
    let mut rng = Rng::seed(3);
    for _ in 0..100 {
        let r = Tensor::randn(vec![3, 2], 2.0, &mut rng);
        let c = moe_coefficients(&r, &x).unwrap();
        assert!((c[0] + c[1] - 1.0).abs() < 1e-15);
    }
}

#[test]
fn low_temperature_matches_greedy() {
    let mut model = ToyModel::init(small(), 4).unwrap();
    model.base.lm_head = model.base.lm_head.scale(100.0);
    let prompt = tokenizer::encode("ab").unwrap();
    let greedy = model.generate(&prompt, &GenOptions::greedy(10)).unwrap();
    let cold = model.generate(&prompt, &GenOptions { temperature: 1e-9, max_new_tokens: 10, ..GenOptions::default() }).unwrap();
    assert_eq!(greedy, cold);
}

#[test]
fn seeded_sampling_is_reproducible() {
    let model = ToyModel::init(small(), 4).unwrap();
    let opts = GenOptions { temperature: 1.0, top_p: 1.0, max_new_tokens: 12, seed: 77, ..GenOptions::default() };
    let prompts = vec![tokenizer::encode("ab").unwrap(), tokenizer::encode("xyz").unwrap()];
    assert_eq!(model.generate_batch(&prompts, &opts).unwrap(), model.generate_batch(&prompts, &opts).unwrap());
}

#[test]
fn batched_generation_matches_single() {
    let model = ToyModel::init(small(), 4).unwrap();
    let p1 = tokenizer::encode("ab").unwrap();
    let p2 = tokenizer::encode("hello").unwrap();
    let opts = GenOptions::greedy(8);
    let both = model.generate_batch(&[p1.clone(), p2.clone()], &opts).unwrap();
    assert_eq!(both[0], model.generate(&p1, &opts).unwrap());
    assert_eq!(both[1], model.generate(&p2, &opts).unwrap());
}

#[test]
fn full_context_prompt_yields_empty_continuation() {
    let model = ToyModel::init(small(), 4).unwrap();
    let prompt = vec![5usize; 15];
    assert!(model.generate(&prompt, &GenOptions::default()).unwrap().is_empty());
    let longer = model.generate(&[5usize; 14], &GenOptions::greedy(5)).unwrap();
    assert!(longer.len() <= 1);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = ToyModel::init(small(), 30).unwrap();
    model.save(dir.path()).unwrap();
    assert_eq!(ToyModel::load(dir.path()).unwrap(), model);
}

#[test]
fn attachment_shape_mismatch_is_rejected() {
    let model = ToyModel::init(small(), 1).unwrap();
    let other = ToyModel::init(ToyConfig { d_model: 32, ..small() }, 1).unwrap();
    let adapter = other.new_adapter(LoraConfig::with_rank(4), 0).unwrap();
    assert!(model.with_attachment(Attachment::Adapter(adapter)).is_err());
}
