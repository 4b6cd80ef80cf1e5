//! The guidance fusion block against a nested-loop reimplementation.

mod common;

use common::block::*;
use latrex::gftb::{gftb_forward, gftb_trace, GuidanceFusion};
use latrex::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn cross_attention_block_matches_loop_reference() {
    for seed in 0..5 {
        check(2, 1, GuidanceFusion::CrossAttention, 4, 4, seed);
    }
    check(4, 2, GuidanceFusion::CrossAttention, 3, 5, 7);
}

#[test]
fn ablation_fusions_match_loop_reference() {
    for fusion in [
        GuidanceFusion::None,
        GuidanceFusion::ScaleValue,
        GuidanceFusion::ScaleInput,
    ] {
        check(2, 1, fusion, 4, 4, 11);
    }
}

#[test]
fn single_channel_softmax_is_one() {
    let wts = weights(1, 1, GuidanceFusion::CrossAttention, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random([1, 1, 4, 4], &mut rng, 1.0);
    let g = random([1, 1, 4, 4], &mut rng, 1.0);
    let tr = gftb_trace(&x, Some(&g), &wts).unwrap();
    assert_eq!(tr.attn_m, vec![1.0]);
    assert_eq!(tr.attn_g.as_deref(), Some(&[1.0][..]));
    // Both attentions return V, so their sum is 2V.
    let r = reference(&x, Some(&g), &wts);
    let yg = tr.y_g.unwrap();
    assert_eq!(tr.y_m, yg);
    let v = conv(
        &layer_norm(
            &to_map(&x),
            p(&wts.params, "norm1.weight"),
            p(&wts.params, "norm1.bias"),
        ),
        p(&wts.params, "v.weight"),
        p(&wts.params, "v.bias"),
    );
    assert!(
        max_diff(
            &zip(&v, &v, |a, b| a + b),
            &tr.y_m.zip_map(&yg, |a, b| a + b)
        ) < 1e-12
    );
    assert!(max_diff(&r.out, &tr.out) < 1e-10);
}

#[test]
fn huge_temperature_gives_uniform_rows() {
    let mut wts = weights(4, 1, GuidanceFusion::CrossAttention, 5);
    let names: Vec<String> = wts.params.iter().map(|(n, _)| n.to_string()).collect();
    for (name, t) in names.iter().zip(wts.params.tensors_mut()) {
        if name.contains("temperature") {
            *t = Tensor::full(t.shape(), 1e12);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random([1, 4, 4, 4], &mut rng, 1.0);
    let g = random([1, 1, 4, 4], &mut rng, 1.0);
    let tr = gftb_trace(&x, Some(&g), &wts).unwrap();
    for a in tr.attn_m.iter().chain(tr.attn_g.as_ref().unwrap()) {
        assert!((a - 0.25).abs() < 1e-9);
    }
}

#[test]
fn missing_guidance_zeroes_the_guidance_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cross = weights(2, 1, GuidanceFusion::CrossAttention, 9);
    let x = random([1, 2, 4, 4], &mut rng, 1.0);
    let r = reference(&x, None, &cross);
    let out = gftb_forward(&x, None, &cross).unwrap();
    assert!(max_diff(&r.out, &out) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, c in 1usize..5, h in 1usize..6, w in 1usize..6, two_heads in any::<bool>()) {
        let heads = if two_heads && c % 2 == 0 { 2 } else { 1 };
        let wts = weights(c, heads, GuidanceFusion::CrossAttention, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([1, c, h, w], &mut rng, 2.0);
        let g = random([1, 1, h, w], &mut rng, 2.0);
        let tr = gftb_trace(&x, Some(&g), &wts).unwrap();
        prop_assert_eq!(tr.out.shape(), x.shape());
        let d = c / heads;
        for probs in [&tr.attn_m, tr.attn_g.as_ref().unwrap()] {
            for row in probs.chunks(d) {
                prop_assert!(row.iter().all(|a| *a >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
            }
        }
    }
}
