use std::collections::HashSet;

use super::*;
use crate::eval::exec_outcome;

#[test]
fn generators_are_deterministic() {
    assert_eq!(gen_math_skill(50, 3).unwrap(), gen_math_skill(50, 3).unwrap());
    assert_eq!(gen_code_skill(50, 3).unwrap(), gen_code_skill(50, 3).unwrap());
    assert_eq!(gen_hard_compose(50, 3).unwrap(), gen_hard_compose(50, 3).unwrap());
    assert_ne!(gen_math_skill(50, 3).unwrap().examples, gen_math_skill(50, 4).unwrap().examples);
}

#[test]
fn zero_size_is_rejected() {
    assert!(gen_math_skill(0, 1).is_err());
    assert!(gen_code_skill(0, 1).is_err());
    assert!(gen_hard_compose(0, 1).is_err());
    assert!(gen_format_tasks(&sample_formats(2, 1).unwrap(), 0, 1).is_err());
}

#[test]
fn prompts_are_unique_and_splits_disjoint() {
    let ds = gen_math_skill(300, 11).unwrap();
    let prompts: HashSet<_> = ds.prompts().into_iter().collect();
    assert_eq!(prompts.len(), 300);
    let (train, test) = ds.split_off_test(60).unwrap();
    assert_eq!((train.len(), test.len()), (240, 60));
    let train_prompts: HashSet<_> = train.prompts().into_iter().collect();
    assert!(test.prompts().iter().all(|p| !train_prompts.contains(p)));
}

#[test]
fn math_examples_follow_the_worked_answer_shape() {
    let ds = gen_math_skill(100, 5).unwrap();
    for e in &ds.examples {
        let c = e.reference.unwrap();
        assert!(e.answer.ends_with(&format!("answer: {c}")));
        assert_eq!(crate::eval::final_answer(&e.answer), Some(c.to_string().as_str()));
    }
}

#[test]
fn hard_compose_references_execute() {
    let ds = gen_hard_compose(200, 9).unwrap();
    for e in &ds.examples {
        let outcome = exec_outcome(&e.answer, e.reference.unwrap());
        assert!(outcome.conformant && outcome.correct, "{e:?}");
    }
}

#[test]
fn code_skill_programs_parse() {
    let ds = gen_code_skill(100, 2).unwrap();
    for e in &ds.examples {
        assert!(e.answer.starts_with("return ("));
        assert!(crate::eval::interp::parse_program(&e.answer).is_ok());
    }
}

#[test]
fn verify_rejects_corrupted_labels() {
    let mut ds = gen_hard_compose(5, 1).unwrap();
    ds.examples[2].reference = ds.examples[2].reference.map(|r| r + 1);
    assert!(ds.verify().is_err());
    let mut ds = gen_math_skill(5, 1).unwrap();
    ds.examples[0].answer.push('0');
    assert!(ds.verify().is_err());
}

#[test]
fn format_grammar_round_trips() {
    let ids: HashSet<usize> = (0..FORMAT_GRAMMAR_SIZE).map(|i| PromptFormat::from_id(i).unwrap().id().unwrap()).collect();
    assert_eq!(ids.len(), FORMAT_GRAMMAR_SIZE);
    assert!(PromptFormat::from_id(FORMAT_GRAMMAR_SIZE).is_none());
    let f = PromptFormat { casing: Casing::Title, separator: ": ".into(), space: "\n".into() };
    assert_eq!(f.render("the fox"), "Sentence: the fox\nAnswer:");
    assert_eq!(f.parse("Sentence: the fox\nAnswer:"), Some("the fox"));
}

#[test]
fn format_tasks_share_sentences_across_formats() {
    let formats = sample_formats(7, 4).unwrap();
    assert_eq!(formats.iter().map(|f| f.id()).collect::<HashSet<_>>().len(), 7);
    let sets = gen_format_tasks(&formats, 40, 8).unwrap();
    assert_eq!(sets.len(), 7);
    for (f, ds) in formats.iter().zip(&sets) {
        assert_eq!(ds.format_id, f.id());
        for (e, e0) in ds.examples.iter().zip(&sets[0].examples) {
            assert_eq!(e.answer, e0.answer);
            assert_eq!(f.parse(&e.prompt), formats[0].parse(&e0.prompt));
        }
    }
    assert!(sample_formats(FORMAT_GRAMMAR_SIZE + 1, 0).is_err());
}

#[test]
fn format_count_matches_hand_example() {
    assert_eq!(formats::count_words_with_o("the fox from oslo sat"), 3);
}

#[test]
fn jsonl_round_trip_preserves_examples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let ds = gen_format_tasks(&sample_formats(1, 0).unwrap(), 20, 1).unwrap().remove(0);
    ds.write(&path).unwrap();
    let back = SkillDataset::read(&path).unwrap();
    assert_eq!(back.examples, ds.examples);
    assert_eq!((back.skill_tag.as_str(), back.format_id), (FORMAT_TAG, ds.format_id));
    back.verify().unwrap();
}

#[test]
fn jsonl_rejects_bad_mask() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let text = gen_math_skill(2, 0).unwrap().to_jsonl().replacen("\"mask_begin\":", "\"mask_begin\":1", 1);
    std::fs::write(&path, text).unwrap();
    assert!(SkillDataset::read(&path).is_err());
}
