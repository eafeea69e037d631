mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use tunevec_core::diffcore::{
    apply, apply_values, combine, cosine, extract, tensor_cosine, weight_similarity, Cosine, CosineOptions, EmitDType,
    Granularity, Provenance, TuningVector,
};
use tunevec_core::tensor::Tensor;
use tunevec_core::{AlignMode, Checkpoint, DType};

fn pair(seed: u64, dtype: DType) -> (Checkpoint, Checkpoint) {
    let mut rng = common::rng(seed);
    let pre = common::random_toy(&mut rng, 2, 6, 10, dtype);
    let ft = common::perturbed(&mut rng, &pre, 0.05);
    (pre, ft)
}

fn max_rel(a: &Checkpoint, b: &BTreeMap<String, Tensor<f64>>) -> f64 {
    let mut worst = 0.0f64;
    for (name, t) in b {
        for (x, y) in a.get(name).unwrap().values::<f64>().iter().zip(&t.data) {
            worst = worst.max(common::rel_err(*x, *y));
        }
    }
    worst
}

#[test]
fn extract_then_apply_recovers_both_ends() {
    for seed in 0..10 {
        let (pre, ft) = pair(seed, DType::F32);
        let tv = extract::<f64>(&pre, &ft, AlignMode::Strict).unwrap();
        assert!(max_rel(&ft, &apply_values(&pre, &tv, 1.0).unwrap()) <= 1e-12);
        assert!(max_rel(&pre, &apply_values(&ft, &tv, -1.0).unwrap()) <= 1e-12);
        let out = apply(&pre, &tv, 1.0, EmitDType::F32).unwrap();
        for rec in ft.tensors() {
            for (x, y) in rec
                .values::<f64>()
                .iter()
                .zip(out.get(rec.name()).unwrap().values::<f64>())
            {
                assert!(common::rel_err(*x, y) <= 1e-6);
            }
        }
    }
}

#[test]
fn apply_is_additive() {
    let (pre, ft1) = pair(21, DType::F32);
    let mut rng = common::rng(22);
    let ft2 = common::perturbed(&mut rng, &pre, 0.05);
    let t1 = extract::<f64>(&pre, &ft1, AlignMode::Strict).unwrap();
    let t2 = extract::<f64>(&pre, &ft2, AlignMode::Strict).unwrap();
    let sum = combine(&[t1.clone(), t2.clone()]).unwrap();
    let once = apply_values(&pre, &sum, 1.0).unwrap();

    let step: BTreeMap<String, Tensor<f64>> = apply_values(&pre, &t1, 1.0).unwrap();
    for (name, t) in &once {
        let twice: Vec<f64> = step[name]
            .data
            .iter()
            .zip(&t2.get(name).unwrap().data)
            .map(|(a, b)| a + b)
            .collect();
        for (x, y) in t.data.iter().zip(&twice) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn zero_scale_is_a_bitwise_copy() {
    let (pre, ft) = pair(3, DType::BF16);
    let tv = extract::<f64>(&pre, &ft, AlignMode::Strict).unwrap();
    let out = apply(&pre, &tv, 0.0, EmitDType::Source).unwrap();
    for rec in pre.tensors() {
        assert_eq!(out.get(rec.name()).unwrap().data(), rec.data());
    }
}

fn vec_tv(values: &[f64]) -> TuningVector<f64> {
    let mut deltas = BTreeMap::new();
    let mut dtypes = BTreeMap::new();
    deltas.insert(
        "layers.0.attn.wq".to_owned(),
        Tensor::new(vec![values.len()], values.to_vec()),
    );
    dtypes.insert("layers.0.attn.wq".to_owned(), DType::F32);
    TuningVector::from_parts(deltas, dtypes, Provenance::default()).unwrap()
}

fn global(a: &TuningVector<f64>, b: &TuningVector<f64>) -> Cosine {
    cosine(a, b, Granularity::Global, &CosineOptions::default())
        .unwrap()
        .entries["global"]
}

#[test]
fn cosine_hand_cases() {
    let c = global(&vec_tv(&[3.0, 4.0]), &vec_tv(&[4.0, 3.0])).value().unwrap();
    assert!((c - 0.96).abs() <= 1e-12);
    assert_eq!(global(&vec_tv(&[1.0, 0.0]), &vec_tv(&[0.0, 5.0])).value(), Some(0.0));
    assert_eq!(global(&vec_tv(&[0.0, 0.0]), &vec_tv(&[1.0, 5.0])), Cosine::Undefined);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cosine_properties(a in prop::collection::vec(-10.0f64..10.0, 1..64), seed in any::<u64>(), s in 0.1f64..10.0) {
        let mut rng = common::rng(seed);
        let b: Vec<f64> = common::gaussian(&mut rng, a.len());
        let (ta, tb) = (vec_tv(&a), vec_tv(&b));
        if a.iter().any(|&x| x != 0.0) {
            let own = global(&ta, &ta).value().unwrap();
            prop_assert!((own - 1.0).abs() <= 1e-12);
            let ab = global(&ta, &tb).value().unwrap();
            let ba = global(&tb, &ta).value().unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0..=1.0).contains(&ab));
            let scaled = global(&ta.scaled(s), &tb).value().unwrap();
            prop_assert!((scaled - ab).abs() <= 1e-12);
            let neg = global(&ta.negate(), &tb).value().unwrap();
            prop_assert!((neg + ab).abs() <= 1e-12);
        }
    }

    #[test]
    fn combine_is_order_independent(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = common::rng(seed);
        let tvs: Vec<TuningVector<f64>> = (0..n).map(|_| vec_tv(&common::gaussian(&mut rng, 32))).collect();
        let fwd = combine(&tvs).unwrap();
        let rev: Vec<_> = tvs.iter().rev().cloned().collect();
        let back = combine(&rev).unwrap();
        let (x, y) = (&fwd.get("layers.0.attn.wq").unwrap().data, &back.get("layers.0.attn.wq").unwrap().data);
        for (a, b) in x.iter().zip(y) {
            prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }
    }
}

#[test]
fn orthogonal_vectors_across_tensors() {
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    a.insert("x".to_owned(), Tensor::new(vec![2], vec![1.0, 2.0]));
    a.insert("y".to_owned(), Tensor::new(vec![1], vec![0.0]));
    b.insert("x".to_owned(), Tensor::new(vec![2], vec![0.0, 0.0]));
    b.insert("y".to_owned(), Tensor::new(vec![1], vec![3.0]));
    let r = tensor_cosine(&a, &b, Granularity::PerTensor, &CosineOptions::default()).unwrap();
    assert_eq!(r.entries["x"], Cosine::Undefined);
    assert_eq!(r.entries["y"], Cosine::Undefined);
    let r = tensor_cosine(&a, &b, Granularity::Global, &CosineOptions::default()).unwrap();
    assert_eq!(r.entries["global"], Cosine::Value(0.0));
}

#[test]
fn weight_similarity_of_self_is_100() {
    let (pre, _) = pair(5, DType::F16);
    let r = weight_similarity::<f64>(
        &pre,
        &pre,
        AlignMode::Strict,
        Granularity::PerComponent,
        &CosineOptions::default(),
    )
    .unwrap();
    let g = r.global_x100.unwrap().value().unwrap();
    assert!((g - 100.0).abs() < 1e-10);
    for c in r.entries.values() {
        assert!((c.value().unwrap() - 1.0).abs() < 1e-12);
    }
}
