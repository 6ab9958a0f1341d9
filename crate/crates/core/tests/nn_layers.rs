mod common;

use avasr_core::nn::{
    scaled_dot_attention, AttentionInputs, AttentionMask, Decoder, Encoder, LayerDims,
    MultiHeadAttention,
};
use avasr_core::tensor::{Graph, ParamSet, Real, Tensor};
use common::{param_grad_error, FD_TOL};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn attend(k: &Tensor, v: &Tensor, q: &Tensor, mask: Option<&AttentionMask>, scaling: bool) -> Tensor {
    let mut g = Graph::new();
    let (kv, vv, qv) = (g.constant(k.clone()), g.constant(v.clone()), g.constant(q.clone()));
    let out = scaled_dot_attention(
        &mut g,
        AttentionInputs {
            keys: kv,
            values: vv,
            queries: qv,
            mask,
        },
        scaling,
    )
    .unwrap();
    g.value(out).clone()
}

#[test]
fn single_key_returns_value_row() {
    let mut r = rng(1);
    let k = Tensor::randn(&[2, 1, 4], 1.0, &mut r);
    let v = Tensor::randn(&[2, 1, 4], 1.0, &mut r);
    let q = Tensor::randn(&[2, 3, 4], 5.0, &mut r);
    let out = attend(&k, &v, &q, None, true);
    for b in 0..2 {
        for i in 0..3 {
            for c in 0..4 {
                assert_eq!(out.at(&[b, i, c]), v.at(&[b, 0, c]));
            }
        }
    }
}

#[test]
fn orthogonal_query_averages_values() {
    let k = Tensor::new(vec![1, 3, 2], vec![1., 0., 2., 0., -1., 0.]).unwrap();
    let v = Tensor::new(vec![1, 3, 2], vec![1., 2., 3., 4., 5., 9.]).unwrap();
    let q = Tensor::new(vec![1, 1, 2], vec![0., 1.]).unwrap();
    let out = attend(&k, &v, &q, None, true);
    assert!((out.at(&[0, 0, 0]) - 3.0).abs() < 1e-12);
    assert!((out.at(&[0, 0, 1]) - 5.0).abs() < 1e-12);
}

#[test]
fn two_key_instance_matches_hand_oracle() {
    let mut r = rng(2);
    let d = 3;
    let k = Tensor::randn(&[1, 2, d], 1.0, &mut r);
    let v = Tensor::randn(&[1, 2, d], 1.0, &mut r);
    let q = Tensor::randn(&[1, 1, d], 1.0, &mut r);
    let out = attend(&k, &v, &q, None, true);
    let score = |j: usize| -> f64 {
        (0..d).map(|c| q.at(&[0, 0, c]) as f64 * k.at(&[0, j, c]) as f64).sum::<f64>() / (d as f64).sqrt()
    };
    let (s0, s1) = (score(0), score(1));
    let w0 = s0.exp() / (s0.exp() + s1.exp());
    let w1 = 1.0 - w0;
    for c in 0..d {
        let expect = w0 * v.at(&[0, 0, c]) as f64 + w1 * v.at(&[0, 1, c]) as f64;
        assert!((out.at(&[0, 0, c]) as f64 - expect).abs() < 1e-10);
    }
}

#[test]
fn unscaled_variant_skips_sqrt_d() {
    let k = Tensor::new(vec![1, 2, 4], vec![1., 0., 0., 0., 0., 0., 0., 0.]).unwrap();
    let v = Tensor::new(vec![1, 2, 4], vec![1., 0., 0., 0., 0., 0., 0., 0.]).unwrap();
    let q = Tensor::new(vec![1, 1, 4], vec![2., 0., 0., 0.]).unwrap();
    let scaled = attend(&k, &v, &q, None, true).at(&[0, 0, 0]);
    let raw = attend(&k, &v, &q, None, false).at(&[0, 0, 0]);
    let w = |s: f64| s.exp() / (s.exp() + 1.0);
    assert!((scaled as f64 - w(1.0)).abs() < 1e-12);
    assert!((raw as f64 - w(2.0)).abs() < 1e-12);
}

#[test]
fn masked_keys_get_zero_weight() {
    let mut r = rng(3);
    let k = Tensor::randn(&[1, 3, 2], 1.0, &mut r);
    let v = Tensor::randn(&[1, 3, 2], 1.0, &mut r);
    let q = Tensor::randn(&[1, 2, 2], 1.0, &mut r);
    let mask = AttentionMask::key_padding(&[2], 2, 3).unwrap();
    let full = attend(&k, &v, &q, Some(&mask), true);
    let trimmed = attend(&k.slice_rows(0, 1).unwrap(), &v, &q, None, true);
    let _ = trimmed;
    let k2 = Tensor::new(vec![1, 2, 2], k.data()[..4].to_vec()).unwrap();
    let v2 = Tensor::new(vec![1, 2, 2], v.data()[..4].to_vec()).unwrap();
    let short = attend(&k2, &v2, &q, None, true);
    assert!(full.max_abs_diff(&short) < 1e-12);
}

#[test]
fn mask_errors() {
    assert!(AttentionMask::new(1, 2, 2, vec![true, false, false, false]).is_err());
    assert!(AttentionMask::key_padding(&[0], 1, 2).is_err());
    let mask = AttentionMask::full(1, 2, 2);
    let mut g = Graph::new();
    let k = g.constant(Tensor::zeros(&[1, 3, 2]));
    let q = g.constant(Tensor::zeros(&[1, 2, 2]));
    let err = scaled_dot_attention(
        &mut g,
        AttentionInputs {
            keys: k,
            values: k,
            queries: q,
            mask: Some(&mask),
        },
        true,
    );
    assert!(matches!(err, Err(avasr_core::Error::Shape { .. })));
}

#[test]
fn heads_must_divide_d_model() {
    let mut ps = ParamSet::new();
    assert!(matches!(
        MultiHeadAttention::new(&mut ps, "m", 10, 3, true, &mut rng(0)),
        Err(avasr_core::Error::Config(_))
    ));
}

fn set_identity(ps: &mut ParamSet, mha: &MultiHeadAttention) {
    for lin in [&mha.w_q, &mha.w_k, &mha.w_v, &mha.w_o] {
        let d = lin.in_dim;
        ps.get_mut(lin.weight).value = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        ps.get_mut(lin.bias).value = Tensor::zeros(&[d]);
    }
}

#[test]
fn one_head_identity_projection_is_raw_attention() {
    let mut ps = ParamSet::new();
    let mha = MultiHeadAttention::new(&mut ps, "m", 4, 1, true, &mut rng(5)).unwrap();
    set_identity(&mut ps, &mha);
    let mut r = rng(6);
    let q = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let kv = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
    let mut g = Graph::with_params(&ps);
    let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
    let out = mha.forward(&mut g, qv, kvv, None).unwrap();
    let raw = attend(&kv, &kv, &q, None, true);
    assert!(g.value(out).max_abs_diff(&raw) < 1e-12);
}

#[test]
fn one_head_is_projected_attention() {
    let mut ps = ParamSet::new();
    let mha = MultiHeadAttention::new(&mut ps, "m", 4, 1, true, &mut rng(7)).unwrap();
    let mut r = rng(8);
    let q = Tensor::randn(&[1, 3, 4], 1.0, &mut r);
    let kv = Tensor::randn(&[1, 5, 4], 1.0, &mut r);
    let mut g = Graph::with_params(&ps);
    let (qv, kvv) = (g.constant(q), g.constant(kv));
    let out = mha.forward(&mut g, qv, kvv, None).unwrap();
    let pq = mha.w_q.forward(&mut g, qv).unwrap();
    let pk = mha.w_k.forward(&mut g, kvv).unwrap();
    let pv = mha.w_v.forward(&mut g, kvv).unwrap();
    let a = scaled_dot_attention(
        &mut g,
        AttentionInputs {
            keys: pk,
            values: pv,
            queries: pq,
            mask: None,
        },
        true,
    )
    .unwrap();
    let manual = mha.w_o.forward(&mut g, a).unwrap();
    assert!(g.value(out).max_abs_diff(g.value(manual)) < 1e-12);
}

#[test]
fn cross_attention_shapes() {
    let mut ps = ParamSet::new();
    let mha = MultiHeadAttention::new(&mut ps, "m", 6, 3, true, &mut rng(9)).unwrap();
    let mut r = rng(10);
    let mut g = Graph::with_params(&ps);
    let q = g.constant(Tensor::randn(&[2, 3, 6], 1.0, &mut r));
    let kv = g.constant(Tensor::randn(&[2, 5, 6], 1.0, &mut r));
    let out = mha.forward(&mut g, q, kv, None).unwrap();
    assert_eq!(g.shape(out), &[2, 3, 6]);
    assert!(g.value(out).all_finite());
}

fn dims(dropout: Real) -> LayerDims {
    LayerDims {
        d_model: 8,
        heads: 2,
        d_ff: 16,
        dropout,
        attention_scaling: true,
    }
}

#[test]
fn encoder_padding_invariance() {
    let mut ps = ParamSet::new();
    let enc = Encoder::new(&mut ps, "enc", 2, dims(0.2), &mut rng(11)).unwrap();
    let mut r = rng(12);
    let short = Tensor::randn(&[1, 3, 8], 1.0, &mut r);
    let long = Tensor::randn(&[1, 5, 8], 1.0, &mut r);
    // Batch [short padded to 5, long].
    let mut data = short.data().to_vec();
    data.extend(Tensor::randn(&[2, 8], 7.0, &mut r).data());
    data.extend(long.data());
    let batch = Tensor::new(vec![2, 5, 8], data).unwrap();

    let mut g = Graph::with_params(&ps);
    let x = g.constant(short);
    let alone = enc.forward(&mut g, x, &AttentionMask::key_padding(&[3], 3, 3).unwrap()).unwrap();
    let xb = g.constant(batch);
    let both = enc
        .forward(&mut g, xb, &AttentionMask::key_padding(&[3, 5], 5, 5).unwrap())
        .unwrap();
    let (a, b) = (g.value(alone), g.value(both));
    for i in 0..3 {
        for c in 0..8 {
            assert!((a.at(&[0, i, c]) - b.at(&[0, i, c])).abs() < 1e-5);
        }
    }
}

#[test]
fn length_one_sequences_pass() {
    let mut ps = ParamSet::new();
    let enc = Encoder::new(&mut ps, "enc", 1, dims(0.0), &mut rng(13)).unwrap();
    let dec = Decoder::new(&mut ps, "dec", 1, dims(0.0), &mut rng(14)).unwrap();
    let mut g = Graph::with_params(&ps);
    let x = g.constant(Tensor::randn(&[1, 1, 8], 1.0, &mut rng(15)));
    let m = enc.forward(&mut g, x, &AttentionMask::full(1, 1, 1)).unwrap();
    let y = dec
        .forward(&mut g, x, m, &AttentionMask::causal(&[1], 1).unwrap(), &AttentionMask::full(1, 1, 1))
        .unwrap();
    assert_eq!(g.shape(y), &[1, 1, 8]);
    assert!(g.value(y).all_finite());
}

#[test]
fn decoder_mask_length_mismatch_is_an_error() {
    let mut ps = ParamSet::new();
    let dec = Decoder::new(&mut ps, "dec", 1, dims(0.0), &mut rng(16)).unwrap();
    let mut g = Graph::with_params(&ps);
    let y = g.constant(Tensor::zeros(&[1, 3, 8]));
    let m = g.constant(Tensor::zeros(&[1, 2, 8]));
    let r = dec.forward(&mut g, y, m, &AttentionMask::causal(&[4], 4).unwrap(), &AttentionMask::full(1, 3, 2));
    assert!(r.is_err());
}

fn decode_with(ps: &ParamSet, dec: &Decoder, y: &Tensor, mem: &Tensor) -> Tensor {
    let len = y.shape()[1];
    let mut g = Graph::with_params(ps);
    let (yv, mv) = (g.constant(y.clone()), g.constant(mem.clone()));
    let out = dec
        .forward(
            &mut g,
            yv,
            mv,
            &AttentionMask::causal(&[len], len).unwrap(),
            &AttentionMask::full(1, len, mem.shape()[1]),
        )
        .unwrap();
    g.value(out).clone()
}

#[test]
fn decoder_is_causal() {
    let mut ps = ParamSet::new();
    let dec = Decoder::new(&mut ps, "dec", 2, dims(0.2), &mut rng(17)).unwrap();
    let mut r = rng(18);
    let y = Tensor::randn(&[1, 5, 8], 1.0, &mut r);
    let mem = Tensor::randn(&[1, 4, 8], 1.0, &mut r);
    let base = decode_with(&ps, &dec, &y, &mem);
    for j in 1..5 {
        let mut changed = y.clone();
        for c in 0..8 {
            changed.data_mut()[j * 8 + c] += 3.0;
        }
        let out = decode_with(&ps, &dec, &changed, &mem);
        for i in 0..j {
            for c in 0..8 {
                assert_eq!(out.at(&[0, i, c]), base.at(&[0, i, c]), "pos {i} moved when {j} changed");
            }
        }
    }
}

#[test]
fn decoder_causality_by_finite_differences() {
    let mut ps = ParamSet::new();
    let dec = Decoder::new(&mut ps, "dec", 1, dims(0.0), &mut rng(19)).unwrap();
    let mut r = rng(20);
    let y = Tensor::randn(&[1, 4, 8], 1.0, &mut r);
    let mem = Tensor::randn(&[1, 3, 8], 1.0, &mut r);
    let h = 1e-5;
    for i in 0..4 {
        let out_i = |yy: &Tensor| -> Real {
            let o = decode_with(&ps, &dec, yy, &mem);
            (0..8).map(|c| o.at(&[0, i, c])).sum()
        };
        for j in (i + 1)..4 {
            for c in 0..8 {
                let (mut p, mut m) = (y.clone(), y.clone());
                p.data_mut()[j * 8 + c] += h;
                m.data_mut()[j * 8 + c] -= h;
                let d = (out_i(&p) - out_i(&m)) / (2.0 * h);
                assert_eq!(d, 0.0);
            }
        }
    }
}

#[test]
fn mha_gradcheck() {
    for seed in 0..20 {
        let mut ps = ParamSet::new();
        let mha = MultiHeadAttention::new(&mut ps, "m", 6, 2, true, &mut rng(seed)).unwrap();
        let mut r = rng(100 + seed);
        let q = Tensor::randn(&[2, 3, 6], 1.0, &mut r);
        let kv = Tensor::randn(&[2, 4, 6], 1.0, &mut r);
        let probe = Tensor::randn(&[2, 3, 6], 1.0, &mut r);
        let mask = AttentionMask::key_padding(&[4, 2], 3, 4).unwrap();
        let err = param_grad_error(&mut ps, |g| {
            let (qv, kvv, pv) = (g.constant(q.clone()), g.constant(kv.clone()), g.constant(probe.clone()));
            let out = mha.forward(g, qv, kvv, Some(&mask)).unwrap();
            let p = g.mul(out, pv).unwrap();
            g.sum(p)
        });
        assert!(err < FD_TOL, "seed {seed}: {err}");
    }
}

#[test]
fn encoder_decoder_gradcheck() {
    for seed in 0..20 {
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "enc", 1, dims(0.0), &mut rng(seed)).unwrap();
        let dec = Decoder::new(&mut ps, "dec", 1, dims(0.0), &mut rng(seed + 50)).unwrap();
        let mut r = rng(200 + seed);
        let x = Tensor::randn(&[2, 4, 8], 1.0, &mut r);
        let y = Tensor::randn(&[2, 3, 8], 1.0, &mut r);
        let probe = Tensor::randn(&[2, 3, 8], 1.0, &mut r);
        let pad = AttentionMask::key_padding(&[4, 3], 4, 4).unwrap();
        let causal = AttentionMask::causal(&[3, 2], 3).unwrap();
        let mem_mask = AttentionMask::key_padding(&[4, 3], 3, 4).unwrap();
        let err = param_grad_error(&mut ps, |g| {
            let (xv, yv, pv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(probe.clone()));
            let m = enc.forward(g, xv, &pad).unwrap();
            let out = dec.forward(g, yv, m, &causal, &mem_mask).unwrap();
            let p = g.mul(out, pv).unwrap();
            g.sum(p)
        });
        assert!(err < FD_TOL, "seed {seed}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_weights_are_convex(lq in 1usize..5, lk in 1usize..6, seed in 0u64..500, valid in 1usize..6) {
        let valid = valid.min(lk);
        let mut r = rng(seed);
        let k = Tensor::randn(&[1, lk, 3], 10.0, &mut r);
        let q = Tensor::randn(&[1, lq, 3], 10.0, &mut r);
        // Using one-hot value columns exposes the weights themselves.
        let v = Tensor::from_fn(&[1, lk, lk], |i| if i / lk == i % lk { 1.0 } else { 0.0 });
        let kq = Tensor::from_fn(&[1, lk, lk], |i| k.data()[(i / lk) * 3 + (i % lk) % 3]);
        let qq = Tensor::from_fn(&[1, lq, lk], |i| q.data()[(i / lk) * 3 + (i % lk) % 3]);
        let mask = AttentionMask::key_padding(&[valid], lq, lk).unwrap();
        let w = attend(&kq, &v, &qq, Some(&mask), true);
        for row in w.data().chunks(lk) {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<Real>() - 1.0).abs() < 1e-6);
            prop_assert!(row[valid..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn encoder_padding_invariance_random_lengths(len in 1usize..6, extra in 1usize..4, seed in 0u64..200) {
        let mut ps = ParamSet::new();
        let enc = Encoder::new(&mut ps, "enc", 1, dims(0.0), &mut rng(seed)).unwrap();
        let mut r = rng(seed + 1);
        let x = Tensor::randn(&[1, len, 8], 1.0, &mut r);
        let mut padded = x.data().to_vec();
        padded.extend(Tensor::randn(&[extra, 8], 5.0, &mut r).data());
        let total = len + extra;
        let mut g = Graph::with_params(&ps);
        let xv = g.constant(x);
        let a = enc.forward(&mut g, xv, &AttentionMask::full(1, len, len)).unwrap();
        let pv = g.constant(Tensor::new(vec![1, total, 8], padded).unwrap());
        let b = enc.forward(&mut g, pv, &AttentionMask::key_padding(&[len], total, total).unwrap()).unwrap();
        for i in 0..len {
            for c in 0..8 {
                prop_assert!((g.value(a).at(&[0, i, c]) - g.value(b).at(&[0, i, c])).abs() < 1e-5);
            }
        }
    }
}
