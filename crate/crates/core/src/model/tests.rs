use super::*;
use crate::numerics::gradcheck::check_gradients;
use crate::numerics::{Graph, Scalar};
use crate::rng::{stream, Purpose};
use proptest::prelude::*;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_items: 6,
        d_u: 4,
        d_v: 4,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn model<T: Scalar>(config: &ModelConfig, n_users: usize, seed: u64) -> ParsRecModel<T> {
    init_model(config, n_users, &mut stream(seed, Purpose::ModelInit, 0)).unwrap()
}

fn zero_param<T: Scalar>(m: &mut ParsRecModel<T>, id: crate::numerics::ParamId) {
    m.params
        .value_mut(id)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = T::zero());
}

#[test]
fn init_respects_ranges_and_seed() {
    let cfg = ModelConfig {
        n_items: 400,
        d_v: 128,
        ..ModelConfig::default()
    };
    let m: ParsRecModel<f64> = model(&cfg, 100, 1);
    let ev = m.params.value(m.arch.layout.item_emb);
    assert_eq!(ev.shape(), &[402, 128]);
    assert!(ev.data().iter().all(|v| v.abs() <= 1.0 / 20.0));
    let eu = m.params.value(m.arch.layout.user_emb);
    assert!(eu.data().iter().all(|v| v.abs() <= 0.1));

    let w1 = m.params.value(m.arch.layout.w1).data();
    let mean = w1.iter().sum::<f64>() / w1.len() as f64;
    let var = w1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w1.len() as f64;
    assert!((var / (2.0 / 256.0) - 1.0).abs() < 0.15, "{var}");
    assert!(m
        .params
        .value(m.arch.layout.b1)
        .data()
        .iter()
        .all(|&v| v == 0.0));

    assert_eq!(model::<f64>(&cfg, 100, 1), m);
    assert_ne!(model::<f64>(&cfg, 100, 2).params, m.params);
}

#[test]
fn shapes_follow_the_layout() {
    let c = tiny();
    let m: ParsRecModel<f64> = model(&c, 3, 1);
    let l = &m.arch.layout;
    let shape = |id| m.params.value(id).shape().to_vec();
    assert_eq!(shape(l.top.wq[0]), vec![8, 8]);
    assert_eq!(shape(l.top.wk[1]), vec![4, 8]);
    assert_eq!(shape(l.top.wv[0]), vec![4, 8]);
    assert_eq!(shape(l.top.wo), vec![16, 4]);
    assert_eq!(shape(l.w2), vec![8, 4]);
    assert_eq!(shape(l.w3), vec![4, 8]);
    assert_eq!(shape(l.w4), vec![8, 8]);
    assert!(l.lower.is_empty() && l.ffn_pre.is_none());
    assert!(init_model::<f64, _>(
        &ModelConfig { heads: 0, ..tiny() },
        3,
        &mut stream(0, Purpose::ModelInit, 0)
    )
    .is_err());
}

#[test]
fn history_state_is_the_mean_embedding() {
    let m: ParsRecModel<f64> = model(&tiny(), 2, 3);
    let ev = m.params.value(m.arch.layout.item_emb);
    assert_eq!(history_state(&m, &[]).unwrap(), vec![0.0; 4]);
    assert_eq!(history_state(&m, &[2]).unwrap(), ev.row(2).to_vec());
    let h = history_state(&m, &[1, 1, 4]).unwrap();
    for k in 0..4 {
        let want = (2.0 * ev.row(1)[k] + ev.row(4)[k]) / 3.0;
        assert!((h[k] - want).abs() < 1e-12);
    }
}

fn vec_mat(v: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|j| v.iter().enumerate().map(|(i, x)| x * m[i * cols + j]).sum())
        .collect()
}

#[test]
fn start_token_alone_gets_all_attention() {
    let c = ModelConfig {
        use_ln: false,
        add_q_at_ln: false,
        ..tiny()
    };
    let m: ParsRecModel<f64> = model(&c, 2, 4);
    let mut rng = stream(0, Purpose::Dropout, 0);
    let (v, rows) =
        attention_step(&m, 1, &[0.1, 0.2, 0.3, 0.4], &[c.sob()], false, &mut rng).unwrap();
    assert_eq!(rows, vec![vec![1.0], vec![1.0]]);
    let l = &m.arch.layout;
    let e = m.params.value(l.item_emb).row(c.sob()).to_vec();
    let mut cat = Vec::new();
    for i in 0..2 {
        cat.extend(vec_mat(&e, m.params.value(l.top.wv[i]).data(), 8));
    }
    let want = vec_mat(&cat, m.params.value(l.top.wo).data(), 4);
    for k in 0..4 {
        assert!((v[k] - want[k]).abs() < 1e-12);
    }
}

#[test]
fn zero_query_and_key_projections_give_uniform_attention() {
    let mut m: ParsRecModel<f64> = model(&tiny(), 2, 5);
    let top = m.arch.layout.top.clone();
    for i in 0..2 {
        zero_param(&mut m, top.wq[i]);
        zero_param(&mut m, top.wk[i]);
    }
    let mut rng = stream(0, Purpose::Dropout, 0);
    let (_, rows) = attention_step(&m, 0, &[0.0; 4], &[6, 0, 3, 5], false, &mut rng).unwrap();
    for r in rows {
        assert!(r.iter().all(|&w| (w - 0.25).abs() < 1e-15));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    for layers in [1, 2] {
        let c = ModelConfig { layers, ..tiny() };
        let m: ParsRecModel<f32> = model(&c, 2, 6);
        let mut rng = stream(0, Purpose::Dropout, 0);
        let (_, rows) = attention_step(
            &m,
            0,
            &[0.3, -0.2, 0.1, 0.5],
            &[6, 0, 1, 2, 3],
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!(r.len(), 5);
            assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

proptest! {
    #[test]
    fn attention_over_a_key_set_ignores_order(seed in 0u64..1000, perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle()) {
        let m: ParsRecModel<f64> = model(&tiny(), 2, seed);
        let prefix = [6usize, 0, 2, 3, 5];
        let shuffled: Vec<usize> = perm.iter().map(|&i| prefix[i]).collect();
        let h = [0.2, -0.1, 0.4, 0.0];
        let mut rng = stream(0, Purpose::Dropout, 0);
        let (va, ra) = attention_step(&m, 1, &h, &prefix, false, &mut rng).unwrap();
        let (vb, rb) = attention_step(&m, 1, &h, &shuffled, false, &mut rng).unwrap();
        for (x, y) in va.iter().zip(&vb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (a, b) in ra.iter().zip(&rb) {
            let mut a = a.clone();
            let mut b = b.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn arnn_step_examples() {
    let mut m: ParsRecModel<f64> = model(&tiny(), 2, 7);
    let (h, y) = arnn_step(
        &m,
        &[0.5, -1.0, 2.0, 0.1],
        &[0.3, -0.4, 0.2, 1.0, -2.0, 0.5, 0.0, 0.7],
    )
    .unwrap();
    assert!(h.iter().all(|&v| v >= 0.0));
    assert_eq!(y.len(), 8);

    let l = m.arch.layout.clone();
    for id in [l.w1, l.w2, l.b1, l.w3, l.w4, l.b2] {
        zero_param(&mut m, id);
    }
    let (h, y) = arnn_step(&m, &[0.5, -1.0, 2.0, 0.1], &[1.0; 8]).unwrap();
    assert!(h.iter().all(|&v| v == 0.0) && y.iter().all(|&v| v == 0.0));

    m.params.value_mut(l.b2).data_mut()[3] = 2.5;
    let (_, y) = arnn_step(&m, &[0.5, -1.0, 2.0, 0.1], &[1.0; 8]).unwrap();
    assert_eq!(crate::synth::argmax(&y), 3);
}

#[test]
fn session_steps_and_attention_lengths() {
    let m: ParsRecModel<f64> = model(&tiny(), 2, 8);
    let mut rng = stream(0, Purpose::Dropout, 0);
    let one = forward_session(&m, 0, &[1, 2], &[4], false, &mut rng).unwrap();
    assert_eq!(one.logits.len(), 1);
    assert_eq!(one.attention[0], vec![vec![1.0], vec![1.0]]);
    let s = forward_session(&m, 0, &[1, 2], &[4, 0, 5], false, &mut rng).unwrap();
    assert_eq!(s.logits.len(), 3);
    for (j, a) in s.attention.iter().enumerate() {
        assert!(a.iter().all(|r| r.len() == j + 1));
    }
}

#[test]
fn logits_are_causal_bitwise() {
    for layers in [1, 2] {
        let c = ModelConfig {
            layers,
            ffn_post_rnn: layers == 2,
            ..tiny()
        };
        let m: ParsRecModel<f32> = model(&c, 2, 9);
        let mut rng = stream(0, Purpose::Dropout, 0);
        let full = forward_session(&m, 1, &[3], &[0, 2, 4, 5], false, &mut rng).unwrap();
        let other = forward_session(&m, 1, &[3], &[0, 2, 5, 1], false, &mut rng).unwrap();
        let cut = forward_session(&m, 1, &[3], &[0, 2], false, &mut rng).unwrap();
        for j in 0..=2 {
            assert_eq!(full.logits[j], other.logits[j]);
        }
        for j in 0..2 {
            assert_eq!(full.logits[j], cut.logits[j]);
        }
        assert_ne!(full.logits[3], other.logits[3]);
    }
}

#[test]
fn batched_unroll_matches_single_sessions() {
    let m: ParsRecModel<f64> = model(&tiny(), 3, 10);
    let users = [0, 2, 1];
    let hist = vec![vec![1, 2], vec![], vec![5]];
    let fed = vec![vec![3, 0, 1], vec![2, 4, 1], vec![0, 1, 2]];
    let mut rng = stream(0, Purpose::Dropout, 0);
    let mut g = Graph::new(&m.params);
    let un = m
        .arch
        .unroll_fixed(&mut g, &users, &hist, &fed, false, true, &mut rng)
        .unwrap();
    for s in 0..3 {
        let one = forward_session(&m, users[s], &hist[s], &fed[s], false, &mut rng).unwrap();
        for j in 0..3 {
            let batch_row = g.value(un.logits[j]).row(s);
            for (a, b) in batch_row.iter().zip(&one.logits[j]) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(un.attention[j].row(s, 1), &one.attention[j][1][..]);
        }
    }
}

#[test]
fn loss_examples() {
    let c = ModelConfig {
        n_items: 2000,
        ..tiny()
    };
    let mut m: ParsRecModel<f64> = model(&c, 2, 11);
    let l = m.arch.layout.clone();
    for id in [l.w3, l.w4, l.b2] {
        zero_param(&mut m, id);
    }
    let mut rng = stream(0, Purpose::Dropout, 0);
    {
        let mut g = Graph::new(&m.params);
        let un = m
            .arch
            .unroll_fixed(
                &mut g,
                &[0, 1],
                &[vec![], vec![7]],
                &[vec![10, 20], vec![30]],
                false,
                false,
                &mut rng,
            )
            .unwrap();
        assert_eq!(un.fed[1], vec![20, c.eob()]);
        let loss = m.arch.session_loss(&mut g, &un).unwrap();
        assert!((g.value(loss).item() - (2002f64).ln()).abs() < 1e-9);
    }

    m.params.value_mut(l.b2).data_mut()[10] = 50.0;
    let mut g = Graph::new(&m.params);
    let un = m
        .arch
        .unroll_fixed(&mut g, &[0], &[vec![]], &[vec![10]], false, false, &mut rng)
        .unwrap();
    let loss = m.arch.session_loss(&mut g, &un).unwrap();
    assert!(g.value(loss).item() < 1e-15);

    let mut g = Graph::new(&m.params);
    let un = m
        .arch
        .unroll_fixed(
            &mut g,
            &[0],
            &[vec![]],
            &[vec![c.eob()]],
            false,
            false,
            &mut rng,
        )
        .unwrap();
    assert!(matches!(
        m.arch.session_loss(&mut g, &un),
        Err(crate::Error::Empty(_))
    ));
}

#[test]
fn single_real_step_with_padding_equals_its_own_loss() {
    let m: ParsRecModel<f64> = model(&tiny(), 2, 12);
    let mut rng = stream(0, Purpose::Dropout, 0);
    let mut g = Graph::new(&m.params);
    let un = m
        .arch
        .unroll_fixed(
            &mut g,
            &[1],
            &[vec![2]],
            &[vec![4, m.arch.eob()]],
            false,
            false,
            &mut rng,
        )
        .unwrap();
    let loss = m.arch.session_loss(&mut g, &un).unwrap();
    let row = g.value(un.logits[0]).data().to_vec();
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    assert!((g.value(loss).item() - (lse - row[4])).abs() < 1e-12);
}

fn end_to_end_check(config: ModelConfig, h: f64) -> f64 {
    let mut m: ParsRecModel<f64> = model(&config, 2, 13);
    // Nonzero biases keep ReLU inputs away from the kink when a state is zero.
    let mut rng = stream(1, Purpose::Analysis, 0);
    let vectors: Vec<_> = m
        .params
        .iter()
        .filter(|(_, p)| p.value.shape().len() == 1)
        .map(|(id, _)| id)
        .collect();
    for id in vectors {
        for v in m.params.value_mut(id).data_mut() {
            *v += rand::Rng::random_range(&mut rng, -0.3..0.3);
        }
    }
    let arch = m.arch.clone();
    let report = check_gradients(
        &mut m.params,
        |g| {
            let mut rng = stream(0, Purpose::Dropout, 0);
            let un = arch.unroll_fixed(
                g,
                &[1, 0],
                &[vec![0, 3, 3], vec![]],
                &[vec![2, 5, 1], vec![4, 0, arch.eob()]],
                false,
                false,
                &mut rng,
            )?;
            arch.session_loss(g, &un)
        },
        h,
    )
    .unwrap();
    report.max_rel_err
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let err = end_to_end_check(tiny(), 1e-6);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn ablation_variants_have_correct_gradients() {
    for c in [
        ModelConfig {
            layers: 2,
            ..tiny()
        },
        ModelConfig {
            ffn_pre_rnn: true,
            ffn_post_rnn: true,
            ..tiny()
        },
        ModelConfig {
            use_ln: false,
            add_q_at_ln: false,
            heads: 1,
            ..tiny()
        },
    ] {
        let err = end_to_end_check(c.clone(), 1e-5);
        assert!(err < 1e-4, "{c:?}: {err}");
    }
}

#[test]
fn training_mode_dropout_changes_outputs() {
    let m: ParsRecModel<f64> = model(
        &ModelConfig {
            dropout: 0.5,
            ..tiny()
        },
        2,
        14,
    );
    let mut rng = stream(0, Purpose::Dropout, 0);
    let a = forward_session(&m, 0, &[], &[1, 2], true, &mut rng).unwrap();
    let b = forward_session(&m, 0, &[], &[1, 2], false, &mut rng).unwrap();
    assert_ne!(a.logits, b.logits);
    let off: ParsRecModel<f64> = model(
        &ModelConfig {
            dropout: 0.5,
            use_dropout: false,
            ..tiny()
        },
        2,
        14,
    );
    let a = forward_session(&off, 0, &[], &[1, 2], true, &mut rng).unwrap();
    let b = forward_session(&off, 0, &[], &[1, 2], false, &mut rng).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn users_get_different_predictions() {
    let m: ParsRecModel<f32> = model(&tiny(), 2, 15);
    let mut rng = stream(0, Purpose::Dropout, 0);
    let a = forward_session(&m, 0, &[1], &[2, 3], false, &mut rng).unwrap();
    let b = forward_session(&m, 1, &[1], &[2, 3], false, &mut rng).unwrap();
    let diff = a.logits[0]
        .iter()
        .zip(&b.logits[0])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(diff > 0.0);
}
