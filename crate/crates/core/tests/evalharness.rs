mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use tunevec_core::activations::{names, perf_drop, random_checkpoint, AblationSet, Activation, ToyModel, ToyModelSpec};
use tunevec_core::evalharness::{
    accuracy, aggregate, instruction_checks, rouge1, rouge_tokens, run_task, unigram_overlap, EvalConfig, Example,
    McMode, Prompt, DEFAULT_ALPHABET,
};
use tunevec_core::{DType, TensorRecord};

#[test]
fn rouge_examples_exact() {
    let r = rouge1("a b c", "a b d");
    assert_eq!(
        (r.precision, r.recall, r.f1),
        (2.0 / 3.0, 2.0 / 3.0, 2.0 * (2.0 / 3.0) * (2.0 / 3.0) / (4.0 / 3.0))
    );
    let r = rouge1("same words here", "same words here");
    assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    let r = rouge1("a a a", "a b");
    let (p, rc) = (1.0 / 3.0, 0.5);
    assert_eq!((r.precision, r.recall, r.f1), (p, rc, 2.0 * p * rc / (p + rc)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn overlap_is_symmetric(g in "[abc ,.]{0,30}", r in "[abc ,.]{0,30}") {
        let (gt, rt) = (rouge_tokens(&g), rouge_tokens(&r));
        prop_assert_eq!(unigram_overlap(&gt, &rt), unigram_overlap(&rt, &gt));
        let (x, y) = (rouge1(&g, &r), rouge1(&r, &g));
        prop_assert_eq!(x.precision, y.recall);
        prop_assert!((0.0..=1.0).contains(&x.f1));
    }
}

fn fragments() -> impl Strategy<Value = String> {
    let frag = prop_oneof![
        Just("<think>".to_owned()),
        Just("</think>".to_owned()),
        Just("Answer: [".to_owned()),
        Just("]".to_owned()),
        Just("<eos>".to_owned()),
        "[A-F]",
        "[ \n\t]{1,2}",
        "[a-z]{1,4}",
    ];
    prop::collection::vec(frag, 0..12).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn stopped_implies_valid_format(s in fragments()) {
        let f = instruction_checks(&s, &DEFAULT_ALPHABET);
        prop_assert!(!f.stopped || f.valid_format);
    }
}

#[test]
fn accuracy_matches_counting_and_permutation() {
    let mut rng = common::rng(4);
    for _ in 0..200 {
        let n = 1 + (rand::Rng::random_range(&mut rng, 0..30));
        let gold: Vec<String> = (0..n).map(|i| ["A", "B", "C", "D"][i % 4].to_owned()).collect();
        let preds: Vec<Option<String>> = gold
            .iter()
            .map(|g| match rand::Rng::random_range(&mut rng, 0..3) {
                0 => Some(g.clone()),
                1 => Some("Z".to_owned()),
                _ => None,
            })
            .collect();
        let mut hits = 0;
        for (p, g) in preds.iter().zip(&gold) {
            if p.as_deref() == Some(g.as_str()) {
                hits += 1;
            }
        }
        let acc = accuracy(&preds, &gold).unwrap();
        assert_eq!(acc, hits as f64 / n as f64 * 100.0);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let p2: Vec<_> = idx.iter().map(|&i| preds[i].clone()).collect();
        let g2: Vec<_> = idx.iter().map(|&i| gold[i].clone()).collect();
        assert_eq!(accuracy(&p2, &g2).unwrap(), acc);
    }
}

fn byte_spec() -> ToyModelSpec {
    ToyModelSpec {
        vocab_size: 256,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        activation: Activation::Silu,
        rope_theta: 10000.0,
        rmsnorm_eps: 1e-5,
        tied_embeddings: false,
        eos_token_id: Some(10),
    }
}

fn mc_dataset() -> Vec<Example> {
    (0..8)
        .map(|i| Example {
            id: format!("q{i}"),
            prompt: Prompt::Text(format!("Question {i}: pick one.\n")),
            choices: Some(vec!["w".into(), "x".into(), "y".into(), "z".into()]),
            gold: ["A", "B", "C", "D"][i % 4].into(),
            reference: Some("pick one".into()),
        })
        .collect()
}

#[test]
fn degenerate_task_scores_100() {
    // Zero final norm: every logit is 0, greedy picks id 0 and the first choice.
    let s = byte_spec();
    let mut c = random_checkpoint(&s, 3, DType::F32).unwrap();
    c.replace(TensorRecord::from_values(names::FINAL_NORM, DType::F32, vec![16], &[0.0f64; 16]).unwrap());
    let m = ToyModel::<f64>::from_checkpoint(&c, &s).unwrap();
    let ds: Vec<Example> = (0..3)
        .map(|i| Example {
            id: i.to_string(),
            prompt: Prompt::Ids(vec![65, 66 + i]),
            choices: Some(vec!["a".into(), "b".into()]),
            gold: "A".into(),
            reference: None,
        })
        .collect();
    let cfg = EvalConfig {
        max_tokens: 2,
        mc_mode: McMode::ChoiceLogit,
        ..Default::default()
    };
    let r = run_task(&m, "degenerate", &ds, &cfg, None).unwrap();
    assert_eq!(r.aggregate.accuracy, Some(100.0));
    let free = vec![Example {
        id: "f".into(),
        prompt: Prompt::Ids(vec![1]),
        choices: None,
        gold: "\u{0}\u{0}".into(),
        reference: None,
    }];
    // Trimming leaves NULs alone, so the free-form answer is exactly two of them.
    let r = run_task(
        &m,
        "free",
        &free,
        &EvalConfig {
            max_tokens: 2,
            ..Default::default()
        },
        None,
    )
    .unwrap();
    assert_eq!(r.aggregate.accuracy, Some(100.0));
}

#[test]
fn runs_are_deterministic_and_aggregates_recomputable() {
    let s = byte_spec();
    let c = random_checkpoint(&s, 8, DType::F32).unwrap();
    let m = ToyModel::<f64>::from_checkpoint(&c, &s).unwrap();
    let ds = mc_dataset();
    let cfg = EvalConfig {
        max_tokens: 6,
        mc_mode: McMode::ChoiceLogit,
        ..Default::default()
    };
    let a = run_task(&m, "t", &ds, &cfg, None).unwrap();
    let b = run_task(&m, "t", &ds, &cfg, None).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(aggregate(&a.examples), a.aggregate);
    let r = a.aggregate.rouge1.unwrap();
    assert!((0.0..=1.0).contains(&r.f1));

    let all = AblationSet::all(2, 32);
    let abl = run_task(&m, "t", &ds, &cfg, Some(&all)).unwrap();
    let (po, pa) = (a.aggregate.accuracy.unwrap(), abl.aggregate.accuracy.unwrap());
    match perf_drop(po, pa) {
        Some(d) => assert_eq!(d, (po - pa) / po * 100.0),
        None => assert_eq!(po, 0.0),
    }
}

#[test]
fn per_example_failures_are_counted() {
    let s = byte_spec();
    let c = random_checkpoint(&s, 8, DType::F32).unwrap();
    let m = ToyModel::<f64>::from_checkpoint(&c, &s).unwrap();
    let mut ds = mc_dataset();
    ds[2].prompt = Prompt::Ids(vec![999]);
    ds[5].prompt = Prompt::Ids(vec![]);
    let r = run_task(
        &m,
        "t",
        &ds,
        &EvalConfig {
            max_tokens: 3,
            ..Default::default()
        },
        None,
    )
    .unwrap();
    assert_eq!(r.aggregate.failed, 2);
    assert_eq!(r.aggregate.evaluated, 6);
    assert!(r.examples[2].error.is_some());
    assert!(run_task(&m, "t", &[], &EvalConfig::default(), None).is_err());
}
