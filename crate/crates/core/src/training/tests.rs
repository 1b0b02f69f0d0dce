use super::*;
use crate::eval::{make_splits, SplitSpec};
use crate::model::{init_model, ModelConfig, ParsRecModel};
use crate::numerics::{Graph, ParamKind};
use crate::rng::{stream, Purpose};
use crate::synth::{synthesize, Basket, Dataset, SynthConfig};
use proptest::prelude::*;

fn small_synth(users: usize, seed: u64) -> Dataset {
    synthesize(&SynthConfig {
        n_users: users,
        sessions_per_user: 8,
        n_categories: 10,
        products_per_category: 20,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model_for(ds: &Dataset, seed: u64) -> ParsRecModel<f32> {
    let cfg = ModelConfig {
        n_items: ds.n_items,
        d_u: 8,
        d_v: 8,
        ..ModelConfig::default()
    };
    init_model(&cfg, ds.n_users(), &mut stream(seed, Purpose::ModelInit, 0)).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 3,
        patience: 2,
        lr: 5e-3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn teacher_forcing_keeps_correct_predictions() {
    let mut rng = stream(0, Purpose::TeacherForcing, 0);
    assert_eq!(teacher_force_next(1, &[0, 1, 2], &mut rng).unwrap(), 1);
    assert_eq!(teacher_force_next(9, &[4], &mut rng).unwrap(), 4);
    assert!(teacher_force_next(9, &[], &mut rng).is_err());
}

#[test]
fn teacher_forcing_fallback_is_uniform() {
    let mut rng = stream(1, Purpose::TeacherForcing, 0);
    let n = 4000;
    let a = (0..n)
        .filter(|_| teacher_force_next(3, &[0, 2], &mut rng).unwrap() == 0)
        .count();
    // Binomial(4000, 1/2): sd ≈ 31.6, so 5 sd ≈ 158.
    assert!((a as i64 - 2000).abs() < 158, "{a}");
}

fn uniform_dataset(sizes: &[usize]) -> (Dataset, Vec<SessionRef>) {
    let sessions: Vec<Vec<Basket>> = sizes
        .iter()
        .map(|&n| {
            vec![Basket {
                t: 0,
                items: (0..n).collect(),
            }]
        })
        .collect();
    let ds = Dataset::from_sessions(vec![0; 20], vec![0; sizes.len()], sessions);
    let refs = (0..sizes.len())
        .map(|u| SessionRef {
            user: u,
            session: 0,
        })
        .collect();
    (ds, refs)
}

#[test]
fn batches_of_one_size_are_chunked() {
    let (ds, refs) = uniform_dataset(&[3; 10]);
    let plan = plan_batches(&ds, &refs, 4, &mut stream(0, Purpose::Batching, 0));
    let mut lens: Vec<usize> = plan.batches.iter().map(|b| b.sessions.len()).collect();
    lens.sort_unstable();
    assert_eq!(lens, vec![2, 4, 4]);
    assert!(plan.batches.iter().all(|b| b.steps == 3));
    let (ds1, r1) = uniform_dataset(&[5]);
    assert_eq!(
        plan_batches(&ds1, &r1, 256, &mut stream(0, Purpose::Batching, 0))
            .batches
            .len(),
        1
    );
}

proptest! {
    #[test]
    fn batches_partition_sessions_by_size(
        sizes in proptest::collection::vec(1usize..8, 1..80),
        bs in 1usize..20,
        seed in 0u64..100,
    ) {
        let (ds, refs) = uniform_dataset(&sizes);
        let plan = plan_batches(&ds, &refs, bs, &mut stream(seed, Purpose::Batching, 0));
        let mut seen: Vec<SessionRef> = Vec::new();
        for b in &plan.batches {
            prop_assert!(!b.sessions.is_empty() && b.sessions.len() <= bs);
            for r in &b.sessions {
                prop_assert_eq!(sizes[r.user], b.steps);
            }
            seen.extend_from_slice(&b.sessions);
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, refs);
    }
}

fn first_batch(ds: &Dataset, splits: &SplitSpec) -> Batch {
    let sessions = train_sessions(ds, splits);
    let plan = plan_batches(ds, &sessions, 32, &mut stream(0, Purpose::Batching, 1));
    plan.batches
        .into_iter()
        .max_by_key(|b| (b.sessions.len(), b.steps))
        .unwrap()
}

fn step_once(model: &mut ParsRecModel<f32>, ds: &Dataset, batch: &Batch, lr: f64) -> StepStats {
    let cfg = TrainConfig {
        lr,
        ..TrainConfig::default()
    };
    let mut optim = Optimizers::new(model, cfg.adam());
    run_training_step(
        model,
        &mut optim,
        ds,
        batch,
        cfg.clip_norm,
        &mut stream(3, Purpose::Dropout, 1),
        &mut stream(3, Purpose::TeacherForcing, 1),
    )
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let ds = small_synth(20, 1);
    let splits = make_splits(&ds);
    let batch = first_batch(&ds, &splits);
    let mut m = model_for(&ds, 0);
    let before = m.params.clone();
    step_once(&mut m, &ds, &batch, 0.0);
    assert_eq!(m.params, before);
}

#[test]
fn initial_loss_is_near_uniform() {
    let ds = small_synth(20, 2);
    let splits = make_splits(&ds);
    let batch = first_batch(&ds, &splits);
    let mut m = model_for(&ds, 0);
    let st = step_once(&mut m, &ds, &batch, 0.0);
    let uniform = ((ds.n_items + 2) as f64).ln();
    assert!((st.loss - uniform).abs() < 0.5, "{} vs {uniform}", st.loss);
}

#[test]
fn fed_items_cover_each_basket_once() {
    let ds = small_synth(20, 3);
    let splits = make_splits(&ds);
    let batch = first_batch(&ds, &splits);
    let mut m = model_for(&ds, 0);
    let st = step_once(&mut m, &ds, &batch, 1e-3);
    for (r, fed) in batch.sessions.iter().zip(&st.fed) {
        let mut a = fed.clone();
        let mut b = ds.sessions[r.user][r.session].items.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
    assert_eq!(st.targets, st.fed.iter().map(Vec::len).sum::<usize>());
}

#[test]
fn a_step_moves_touched_rows_and_dense_weights() {
    let ds = small_synth(20, 4);
    let splits = make_splits(&ds);
    let batch = first_batch(&ds, &splits);
    let mut m = model_for(&ds, 0);
    let before = m.params.clone();
    let st = step_once(&mut m, &ds, &batch, 1e-3);
    assert!(st.grad_norm > 0.0);
    for (id, p) in m.params.iter() {
        let old = before.value(id);
        match p.kind {
            ParamKind::Dense => {
                if p.name != "attn.ln_bias" && p.name != "attn.ln_gain" {
                    assert_ne!(old, &p.value, "{}", p.name);
                }
            }
            ParamKind::SparseRows => {
                let rows: Vec<usize> = if p.name == "user_emb" {
                    batch.sessions.iter().map(|r| r.user).collect()
                } else {
                    // The last fed item is only a target, never a key.
                    st.fed
                        .iter()
                        .flat_map(|f| f[..f.len() - 1].iter().copied())
                        .chain([ds.n_items])
                        .collect()
                };
                for r in rows {
                    assert_ne!(old.row(r), p.value.row(r), "{} row {r}", p.name);
                }
                let untouched = ds.n_items + 1;
                if p.name == "item_emb" {
                    assert_eq!(old.row(untouched), p.value.row(untouched));
                }
            }
        }
    }
}

#[test]
fn training_steps_are_deterministic() {
    let ds = small_synth(20, 5);
    let splits = make_splits(&ds);
    let batch = first_batch(&ds, &splits);
    let mut a = model_for(&ds, 0);
    let mut b = model_for(&ds, 0);
    let sa = step_once(&mut a, &ds, &batch, 1e-3);
    let sb = step_once(&mut b, &ds, &batch, 1e-3);
    assert_eq!(sa, sb);
    assert_eq!(a.params, b.params);
}

#[test]
fn frozen_metric_stops_after_patience() {
    let ds = small_synth(20, 6);
    let splits = make_splits(&ds);
    let mut m = model_for(&ds, 0);
    let cfg = TrainConfig {
        lr: 0.0,
        patience: 1,
        max_epochs: 10,
        ..quick(0)
    };
    let out = fit(&mut m, &ds, &splits, &cfg).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn fit_keeps_the_best_epoch_and_is_deterministic() {
    let ds = small_synth(20, 7);
    let splits = make_splits(&ds);
    let cfg = quick(4);
    let mut a = model_for(&ds, 1);
    let out = fit(&mut a, &ds, &splits, &cfg).unwrap();
    assert!(out.history.len() <= cfg.max_epochs);
    let max = out
        .history
        .iter()
        .map(|r| r.ndcg10)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_ndcg10, max);
    let report = crate::eval::evaluate_model(
        crate::eval::Scorer::Model(&a),
        &ds,
        &splits,
        crate::eval::Split::Validation,
        cfg.seed,
        &[10],
    )
    .unwrap();
    assert_eq!(report.ndcg(10), max);
    let mut b = model_for(&ds, 1);
    fit(&mut b, &ds, &splits, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    let csv = history_csv(&out.history);
    assert!(csv.starts_with("epoch,loss,hr10,ndcg10,sessprec10\n1,"));
}

fn probe_logits(m: &ParsRecModel<f32>) -> Vec<f32> {
    let mut g = Graph::new(&m.params);
    let u = m
        .arch
        .unroll_fixed(
            &mut g,
            &[0, 1],
            &[vec![1, 2, 3], vec![]],
            &[vec![4, 5], vec![6, 7]],
            false,
            false,
            &mut stream(0, Purpose::Dropout, 0),
        )
        .unwrap();
    u.logits
        .iter()
        .flat_map(|v| g.value(*v).data().to_vec())
        .collect()
}

fn trained_checkpoint() -> (ParsRecModel<f32>, Optimizers<f32>, Vec<u8>) {
    let ds = small_synth(20, 8);
    let splits = make_splits(&ds);
    let batch = first_batch(&ds, &splits);
    let mut m = model_for(&ds, 0);
    let mut optim = Optimizers::new(&m, TrainConfig::default().adam());
    run_training_step(
        &mut m,
        &mut optim,
        &ds,
        &batch,
        30.0,
        &mut stream(0, Purpose::Dropout, 0),
        &mut stream(0, Purpose::TeacherForcing, 0),
    )
    .unwrap();
    let meta = CheckpointMeta {
        epoch: 3,
        best_metric: 0.1 + 0.2,
    };
    let bytes = checkpoint_bytes(&m, Some(&optim), meta).unwrap();
    (m, optim, bytes)
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let (m, optim, bytes) = trained_checkpoint();
    let ck = parse_checkpoint(&bytes).unwrap();
    assert_eq!(ck.model.params, m.params);
    assert_eq!(ck.model.config(), m.config());
    assert_eq!(ck.optim.as_ref(), Some(&optim));
    assert_eq!(ck.meta.epoch, 3);
    assert_eq!(ck.meta.best_metric, 0.1 + 0.2);
    let a = probe_logits(&m);
    let b = probe_logits(&ck.model);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

    let plain = checkpoint_bytes(&m, None, ck.meta).unwrap();
    assert!(parse_checkpoint(&plain).unwrap().optim.is_none());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (_, _, bytes) = trained_checkpoint();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        parse_checkpoint(&magic),
        Err(crate::Error::Parse { .. })
    ));

    let text = String::from_utf8_lossy(&bytes[..200]).replace("version = 1", "version = 9");
    let mut ver = text.into_bytes();
    ver.extend_from_slice(&bytes[200..]);
    assert!(matches!(
        parse_checkpoint(&ver),
        Err(crate::Error::Version { .. })
    ));

    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(
        parse_checkpoint(cut),
        Err(crate::Error::Parse { .. })
    ));
}

#[test]
fn config_mismatch_is_reported() {
    let (m, _, bytes) = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint_expecting(&path, m.config()).is_ok());
    let other = ModelConfig {
        heads: 4,
        ..m.config().clone()
    };
    assert!(matches!(
        load_checkpoint_expecting(&path, &other),
        Err(crate::Error::Config(_))
    ));
}
