use proptest::prelude::*;
use studentkd::gradcheck::{grad_check, GradCheckOptions};
use studentkd::layers::{
    attention_forward, bilstm_forward, build_model, cnn_forward, count_params_for, dense, dropout,
    embed, forward_with, AttentionParams, Arch, BiLstmParams, CnnParams, DenseParams, LstmParams,
    Mode, ModelConfig, SeqMask, PAD_ID,
};
use studentkd::{Graph, Rng, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn tiny_config(arch: Arch, vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(arch, vocab);
    cfg.embed_dim = 3;
    cfg.hidden_dim = 2;
    cfg.cnn_hidden = 4;
    cfg
}

/// Moves every parameter off its initialization (zero biases sit on ReLU
/// kinks) while keeping the PAD row at zero.
fn generic_point(model: &studentkd::layers::Model, seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    let d = model.config().embed_dim;
    model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut t = p.clone();
            for v in t.data_mut() {
                *v += rng.uniform(-0.1, 0.1);
            }
            if i == 0 {
                t.data_mut()[..d].fill(0.0);
            }
            t
        })
        .collect()
}

/// Pads each sentence to `t_len` and returns flattened ids plus the mask.
fn pad(sentences: &[Vec<usize>], t_len: usize) -> (Vec<usize>, SeqMask) {
    let mut ids = Vec::new();
    for s in sentences {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat(PAD_ID).take(t_len - s.len()));
    }
    let mask = SeqMask::from_lengths(sentences.iter().map(Vec::len).collect(), t_len).unwrap();
    (ids, mask)
}

#[test]
fn embedding_gradient_accumulates_repeats_and_skips_pad() {
    let mut rng = Rng::new(4);
    let table = Tensor::uniform(&[10, 3], 1.0, &mut rng);
    let proj = Tensor::uniform(&[4, 3], 1.0, &mut rng);
    let ids = [5, 2, 5, 0];
    let mut g = Graph::new();
    let t = g.variable(table.clone()).unwrap();
    let x = embed(&mut g, t, &ids).unwrap();
    for (r, &id) in ids.iter().enumerate() {
        assert_eq!(g.value(x).row(r), table.row(id));
    }
    let c = g.constant(proj.clone()).unwrap();
    let y = g.mul(x, c).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    let gt = grads.get(t).unwrap();
    for j in 0..3 {
        assert_eq!(gt.get2(5, j), proj.get2(0, j) + proj.get2(2, j));
        assert_eq!(gt.get2(2, j), proj.get2(1, j));
        assert_eq!(gt.get2(0, j), 0.0);
        assert_eq!(gt.get2(7, j), 0.0);
    }
}

#[test]
fn out_of_vocabulary_id_is_rejected() {
    let mut g = Graph::new();
    let t = g.variable(Tensor::zeros(&[4, 2])).unwrap();
    assert!(matches!(
        embed(&mut g, t, &[1, 4]),
        Err(studentkd::Error::Vocab { id: 4, vocab_size: 4 })
    ));
}

/// Scalar LSTM (d = h = 1) run by hand, gates i, f, g, o.
fn scalar_lstm(xs: &[f64], wx: [f64; 4], wh: [f64; 4], b: [f64; 4]) -> Vec<f64> {
    let (mut h, mut c) = (0.0, 0.0);
    xs.iter()
        .map(|&x| {
            let z: Vec<f64> = (0..4).map(|k| wx[k] * x + wh[k] * h + b[k]).collect();
            let (i, f, gg, o) = (sigmoid(z[0]), sigmoid(z[1]), z[2].tanh(), sigmoid(z[3]));
            c = f * c + i * gg;
            h = o * c.tanh();
            h
        })
        .collect()
}

#[test]
fn bilstm_matches_scalar_recurrence() {
    let xs = [0.5, -1.2, 0.8];
    let fw = ([0.3, -0.4, 0.7, 0.2], [0.1, 0.5, -0.6, 0.9], [0.05, 1.0, -0.1, 0.2]);
    let bw = ([-0.2, 0.6, 0.4, -0.3], [0.8, -0.1, 0.3, 0.2], [0.0, 1.0, 0.1, -0.05]);
    let fwd_h = scalar_lstm(&xs, fw.0, fw.1, fw.2);
    let rev: Vec<f64> = xs.iter().rev().copied().collect();
    let mut bwd_h = scalar_lstm(&rev, bw.0, bw.1, bw.2);
    bwd_h.reverse();

    let col = |v: [f64; 4]| Tensor::new(vec![4, 1], v.to_vec()).unwrap();
    let vec4 = |v: [f64; 4]| Tensor::new(vec![4], v.to_vec()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3, 1], xs.to_vec()).unwrap()).unwrap();
    let lstm = |p: &([f64; 4], [f64; 4], [f64; 4]), g: &mut Graph<'_>| LstmParams {
        w_x: g.variable(col(p.0)).unwrap(),
        w_h: g.variable(col(p.1)).unwrap(),
        b: g.variable(vec4(p.2)).unwrap(),
    };
    let params = BiLstmParams {
        fwd: lstm(&fw, &mut g),
        bwd: lstm(&bw, &mut g),
        hidden: 1,
    };
    let mask = SeqMask::from_lengths(vec![3], 3).unwrap();
    let (seq, last) = bilstm_forward(&mut g, x, &mask, &params).unwrap();
    for t in 0..3 {
        assert!((g.value(seq).get2(t, 0) - fwd_h[t]).abs() < 1e-12);
        assert!((g.value(seq).get2(t, 1) - bwd_h[t]).abs() < 1e-12);
    }
    assert!((g.value(last).get2(0, 0) - fwd_h[2]).abs() < 1e-12);
    assert!((g.value(last).get2(0, 1) - bwd_h[0]).abs() < 1e-12);
}

#[test]
fn bilstm_outputs_are_zero_at_padding() {
    let mut rng = Rng::new(2);
    let model = build_model(tiny_config(Arch::Bilstm, 12), &mut rng).unwrap();
    let (ids, mask) = pad(&[vec![3, 4], vec![5, 6, 7, 8]], 4);
    let mut g = Graph::new();
    let vars = model.register(&mut g).unwrap();
    let x = embed(&mut g, vars[0], &ids).unwrap();
    let p = BiLstmParams {
        fwd: LstmParams { w_x: vars[1], w_h: vars[2], b: vars[3] },
        bwd: LstmParams { w_x: vars[4], w_h: vars[5], b: vars[6] },
        hidden: 2,
    };
    let (seq, _) = bilstm_forward(&mut g, x, &mask, &p).unwrap();
    for t in 2..4 {
        assert!(g.value(seq).row(t).iter().all(|&v| v == 0.0));
    }
    assert!(g.value(seq).row(1).iter().all(|&v| v != 0.0));
}

#[test]
fn attention_matches_direct_formula() {
    let mut rng = Rng::new(11);
    let seq = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 4], 1.0, &mut rng);
    let b = Tensor::uniform(&[4], 1.0, &mut rng);
    let u_w = Tensor::uniform(&[4], 1.0, &mut rng);

    let scores: Vec<f64> = (0..3)
        .map(|t| {
            (0..4)
                .map(|i| {
                    let pre: f64 = (0..4).map(|j| w.get2(i, j) * seq.get2(t, j)).sum::<f64>() + b.data()[i];
                    pre.tanh() * u_w.data()[i]
                })
                .sum()
        })
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let alpha: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    let pooled: Vec<f64> = (0..4)
        .map(|j| (0..3).map(|t| alpha[t] * seq.get2(t, j)).sum())
        .collect();

    let mut g = Graph::new();
    let s = g.constant(seq.clone()).unwrap();
    let p = AttentionParams {
        w: g.variable(w).unwrap(),
        b: g.variable(b).unwrap(),
        u_w: g.variable(u_w).unwrap(),
    };
    let mask = SeqMask::from_lengths(vec![3], 3).unwrap();
    let (out, weights) = attention_forward(&mut g, s, &mask, &p).unwrap();
    for t in 0..3 {
        assert!((g.value(weights).get2(0, t) - alpha[t]).abs() < 1e-10);
    }
    for j in 0..4 {
        assert!((g.value(out).get2(0, j) - pooled[j]).abs() < 1e-10);
    }
}

#[test]
fn attention_ignores_padded_positions() {
    let mut rng = Rng::new(12);
    let seq = Tensor::uniform(&[4, 2], 1.0, &mut rng);
    let mut g = Graph::new();
    let s = g.constant(seq).unwrap();
    let p = AttentionParams {
        w: g.variable(Tensor::uniform(&[2, 2], 1.0, &mut rng)).unwrap(),
        b: g.variable(Tensor::zeros(&[2])).unwrap(),
        u_w: g.variable(Tensor::uniform(&[2], 1.0, &mut rng)).unwrap(),
    };
    let mask = SeqMask::from_lengths(vec![2], 4).unwrap();
    let (_, weights) = attention_forward(&mut g, s, &mask, &p).unwrap();
    let w = g.value(weights);
    assert_eq!(w.get2(0, 2), 0.0);
    assert_eq!(w.get2(0, 3), 0.0);
    assert!((w.get2(0, 0) + w.get2(0, 1) - 1.0).abs() < 1e-12);
}

#[test]
fn cnn_width_one_filter_matches_brute_force_max() {
    let mut rng = Rng::new(5);
    let (t_len, d) = (6, 3);
    let x = Tensor::uniform(&[2 * t_len, d], 1.0, &mut rng);
    let f = Tensor::uniform(&[1, d], 1.0, &mut rng);
    let b = 0.05;
    let lengths = vec![4, 6];
    let mut expected = Vec::new();
    for (bi, &len) in lengths.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for p in 0..len {
            let v: f64 = (0..d).map(|j| x.get2(bi * t_len + p, j) * f.get2(0, j)).sum::<f64>() + b;
            best = best.max(v.max(0.0));
        }
        expected.push(best);
    }
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let params = CnnParams {
        kernels: vec![(g.variable(f).unwrap(), g.variable(Tensor::full(&[1], b)).unwrap())],
    };
    let mask = SeqMask::from_lengths(lengths, t_len).unwrap();
    let out = cnn_forward(&mut g, xv, &mask, &params).unwrap();
    for (bi, e) in expected.iter().enumerate() {
        assert!((g.value(out).get2(bi, 0) - e).abs() < 1e-12);
    }
}

#[test]
fn cnn_rejects_batches_shorter_than_widest_filter() {
    let mut rng = Rng::new(1);
    let model = build_model(tiny_config(Arch::Cnn, 9), &mut rng).unwrap();
    let (ids, mask) = pad(&[vec![2, 3, 4]], 3);
    assert!(matches!(model.logits(&ids, &mask), Err(studentkd::Error::Dimension { .. })));
}

#[test]
fn dense_gradient_matches_central_differences() {
    let mut rng = Rng::new(8);
    let x = Tensor::uniform(&[3, 5], 1.0, &mut rng);
    let w = Tensor::uniform(&[2, 5], 1.0, &mut rng);
    let b = Tensor::uniform(&[2], 1.0, &mut rng);
    let proj = Tensor::uniform(&[3, 2], 1.0, &mut rng);
    let opts = GradCheckOptions {
        tol: 1e-6,
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        &[x, w, b],
        |g, v| {
            let y = dense(g, v[0], &DenseParams { w: v[1], b: v[2] })?;
            let c = g.constant(proj.clone())?;
            let y = g.mul(y, c)?;
            g.sum(y)
        },
        &opts,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn dropout_preserves_the_mean_and_is_identity_in_eval() {
    let n = 100_000;
    let mut rng = Rng::new(21);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[n, 1], 1.0)).unwrap();
    let y = dropout(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
    let mean = g.value(y).sum() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
    assert!((zeros as f64 / n as f64 - 0.5).abs() < 0.01);
    let e = dropout(&mut g, x, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(e, x);
}

#[test]
fn initialization_follows_the_scheme() {
    for arch in Arch::ALL {
        let model = build_model(ModelConfig::new(arch, 50), &mut Rng::new(3)).unwrap();
        let emb = model.param("embedding").unwrap();
        assert!(emb.row(PAD_ID).iter().all(|&v| v == 0.0));
        let bound = 1.0 / 64f64.sqrt();
        assert!(emb.data().iter().all(|v| v.abs() <= bound));
        for (name, t) in model.names().iter().zip(model.params()) {
            if name.ends_with(".b") && !name.starts_with("lstm") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        if arch != Arch::Cnn {
            let b = model.param("lstm.fwd.b").unwrap().data();
            assert!(b[..64].iter().all(|&v| v == 0.0));
            assert!(b[64..128].iter().all(|&v| v == 1.0));
            assert!(b[128..].iter().all(|&v| v == 0.0));
            let wh = model.param("lstm.bwd.w_h").unwrap();
            assert!(wh.data().iter().all(|v| v.abs() <= 1.0 / 64f64.sqrt()));
        } else {
            let f = model.param("conv2.w").unwrap();
            assert_eq!(f.shape(), &[5, 64]);
            assert!(f.data().iter().all(|v| v.abs() <= 1.0 / 320f64.sqrt()));
        }
    }
}

/// Independent closed forms for the trainable element counts.
fn expected_count(arch: Arch, v: usize, d: usize, h: usize) -> usize {
    let emb = (v - 1) * d;
    let lstm = 2 * (4 * h * d + 4 * h * h + 4 * h);
    let out = 2 * 2 * h + 2;
    match arch {
        Arch::Bilstm => emb + lstm + out,
        Arch::BilstmAttn => emb + lstm + (2 * h) * (2 * h) + 2 * h + 2 * h + out,
        Arch::Cnn => emb + (3 * d + 1) + (4 * d + 1) + (5 * d + 1) + (64 * 3 + 64) + (2 * 64 + 2),
    }
}

#[test]
fn parameter_counts_match_closed_forms() {
    for arch in Arch::ALL {
        for v in [2, 100, 14_000] {
            for (d, h) in [(64, 64), (32, 16)] {
                let mut cfg = ModelConfig::new(arch, v);
                cfg.embed_dim = d;
                cfg.hidden_dim = h;
                let c = count_params_for(&cfg);
                assert_eq!(c.total, expected_count(arch, v, d, h), "{arch} v={v} d={d} h={h}");
                assert_eq!(c.ratio_vs_teacher, 110e6 / c.total as f64);
            }
        }
    }
}

#[test]
fn end_to_end_grad_check_tiny_models() {
    let sentences = [vec![2, 3, 4, 5, 6], vec![7, 2, 3]];
    let (ids, mask) = pad(&sentences, 5);
    let labels = [1, 0];
    for arch in Arch::ALL {
        let cfg = tiny_config(arch, 8);
        let model = build_model(cfg.clone(), &mut Rng::new(13)).unwrap();
        let params = generic_point(&model, 14);
        let opts = GradCheckOptions {
            exclude: vec![(0, 0..cfg.embed_dim)],
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            &params,
            |g, v| {
                let mut rng = Rng::new(99);
                let logits = forward_with(&cfg, g, v, &ids, &mask, Mode::Train, &mut rng)?;
                g.cross_entropy(logits, &labels)
            },
            &opts,
        )
        .unwrap();
        assert!(report.passed, "{arch}: max rel err {} {:?}", report.max_rel_err, report.params);
    }
}

#[test]
fn end_to_end_grad_check_default_width_sampled() {
    let sentences = [vec![2, 3, 4, 5, 6, 9], vec![7, 2, 3]];
    let (ids, mask) = pad(&sentences, 6);
    let labels = [0, 1];
    for arch in Arch::ALL {
        let cfg = ModelConfig::new(arch, 12);
        let model = build_model(cfg.clone(), &mut Rng::new(17)).unwrap();
        let params = generic_point(&model, 18);
        let opts = GradCheckOptions {
            max_coords: Some(40),
            seed: 5,
            exclude: vec![(0, 0..cfg.embed_dim)],
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            &params,
            |g, v| {
                let logits = forward_with(&cfg, g, v, &ids, &mask, Mode::Eval, &mut Rng::new(0))?;
                g.cross_entropy(logits, &labels)
            },
            &opts,
        )
        .unwrap();
        assert!(report.passed, "{arch}: max rel err {} {:?}", report.max_rel_err, report.params);
    }
}

fn eval_logits(model: &studentkd::layers::Model, sentences: &[Vec<usize>], t_len: usize) -> Tensor {
    let (ids, mask) = pad(sentences, t_len);
    model.logits(&ids, &mask).unwrap()
}

fn sentence_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..20, 1..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn logits_are_invariant_to_extra_padding(
        arch_ix in 0usize..3,
        sentence in sentence_strategy(),
        other in sentence_strategy(),
        extra in 1usize..6,
        seed in any::<u64>(),
    ) {
        let arch = Arch::ALL[arch_ix];
        let model = build_model(tiny_config(arch, 20), &mut Rng::new(seed)).unwrap();
        let base_len = sentence.len().max(5);
        let alone = eval_logits(&model, &[sentence.clone()], base_len);
        let padded = eval_logits(&model, &[sentence.clone()], base_len + extra);
        let t_mixed = sentence.len().max(other.len()).max(5) + extra;
        let mixed = eval_logits(&model, &[sentence, other], t_mixed);
        for c in 0..2 {
            prop_assert!((alone.get2(0, c) - padded.get2(0, c)).abs() < 1e-12);
            prop_assert!((alone.get2(0, c) - mixed.get2(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_permutation_permutes_logits(
        arch_ix in 0usize..3,
        sentences in prop::collection::vec(sentence_strategy(), 2..5),
        seed in any::<u64>(),
    ) {
        let arch = Arch::ALL[arch_ix];
        let model = build_model(tiny_config(arch, 20), &mut Rng::new(seed)).unwrap();
        let t_len = sentences.iter().map(Vec::len).max().unwrap().max(5);
        let forward = eval_logits(&model, &sentences, t_len);
        let reversed: Vec<Vec<usize>> = sentences.iter().rev().cloned().collect();
        let backward = eval_logits(&model, &reversed, t_len);
        let n = sentences.len();
        for i in 0..n {
            for c in 0..2 {
                prop_assert!((forward.get2(i, c) - backward.get2(n - 1 - i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic(arch_ix in 0usize..3, sentence in sentence_strategy(), seed in any::<u64>()) {
        let arch = Arch::ALL[arch_ix];
        let a = build_model(tiny_config(arch, 20), &mut Rng::new(seed)).unwrap();
        let b = build_model(tiny_config(arch, 20), &mut Rng::new(seed)).unwrap();
        let t = sentence.len().max(5);
        prop_assert!(eval_logits(&a, &[sentence.clone()], t).bit_eq(&eval_logits(&b, &[sentence], t)));
    }
}
