use super::*;
use crate::eval::make_splits;
use crate::model::{init_model, ModelConfig, ParsRecModel, StepAttention};
use crate::numerics::Tensor;
use crate::rng::{stream, Purpose};
use crate::synth::{
    synthesize, CovarianceBlock, CovarianceBlockPlan, Dataset, GroupPlan, SynthConfig,
};
use crate::training::{train_sessions, SessionRef};
use proptest::prelude::*;

const EXAMPLE: [[f64; 4]; 4] = [
    [0.0, 0.5, 0.5, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.2, 0.8, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

fn example_atlas(scale: f64) -> AttentionAtlas {
    let mut a = AttentionAtlas::new(vec![0, 0, 1, 1], 2);
    for (t, row) in EXAMPLE.iter().enumerate() {
        for (k, &w) in row.iter().enumerate() {
            if w != 0.0 {
                a.add(0, t, k, w * scale);
            }
        }
    }
    a
}

#[test]
fn aggregation_stages_match_hand_computation() {
    let dense = Tensor::from_rows(&EXAMPLE.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    let (s1, s2, s3) = aggregate_dense(&dense, &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(s1.data(), &[0.0, 0.5, 1.5, 0.0, 0.2, 0.8, 0.0, 1.0]);
    let close = |h: &CategoryHeatmap, want: [f64; 4]| {
        h.values
            .iter()
            .zip(want)
            .all(|(a, b)| (a - b).abs() < 1e-12)
    };
    assert!(close(&s2, [0.25, 0.75, 0.5, 0.5]));
    assert!(close(&s3, [0.25, 0.75, 0.5, 0.5]));
    assert!(close(
        &aggregate_to_categories(&example_atlas(1.0), 0),
        [0.25, 0.75, 0.5, 0.5]
    ));
}

#[test]
fn diagonal_and_empty_atlases() {
    let mut a = AttentionAtlas::new(vec![0, 0, 1, 1], 2);
    a.add(3, 0, 0, 0.7);
    a.add(3, 3, 3, 0.2);
    assert_eq!(
        aggregate_to_categories(&a, 3).values,
        vec![1.0, 0.0, 0.0, 1.0]
    );
    assert_eq!(aggregate_to_categories(&a, 9).values, vec![0.0; 4]);
}

proptest! {
    #[test]
    fn normalization_ignores_scale(scale in 1e-3f64..1e3) {
        let a = aggregate_to_categories(&example_atlas(1.0), 0);
        let b = aggregate_to_categories(&example_atlas(scale), 0);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_rows_sum_to_one_or_zero(
        w in proptest::collection::vec(0.0f64..1.0, 16),
    ) {
        let mut a = AttentionAtlas::new(vec![0, 0, 1, 1], 2);
        for (i, &x) in w.iter().enumerate() {
            if x > 0.5 {
                a.add(0, i / 4, i % 4, x);
            }
        }
        for s in aggregate_to_categories(&a, 0).row_sums() {
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn accumulate_skips_sob_and_padding() {
    let mut a = AttentionAtlas::new(vec![0; 5], 1);
    let eob = 6;
    // Two sessions, three steps; the second session is padded after step 1.
    let fed = vec![vec![1, 2], vec![3, eob], vec![4, eob]];
    let att: Vec<StepAttention<f64>> = (0..3)
        .map(|j| {
            let keys = j + 1;
            let w = vec![1.0 / keys as f64; 2 * 2 * keys];
            StepAttention {
                batch: 2,
                heads: 2,
                keys,
                weights: w,
            }
        })
        .collect();
    a.accumulate(&[0, 1], &fed, &att);
    let u0 = &a.users[&0];
    assert_eq!(u0.mass.get(&(3, 1)), Some(&0.5));
    assert_eq!(u0.mass.get(&(4, 1)), Some(&(1.0 / 3.0)));
    assert_eq!(u0.mass.get(&(4, 3)), Some(&(1.0 / 3.0)));
    assert_eq!(u0.mass.len(), 3);
    assert_eq!(u0.visits.values().sum::<u32>(), 3);
    let u1 = &a.users[&1];
    assert!(u1.mass.is_empty());
    assert_eq!(u1.visits.get(&2), Some(&1));
}

fn small_synth(users: usize) -> Dataset {
    synthesize(&SynthConfig {
        n_users: users,
        sessions_per_user: 6,
        n_categories: 10,
        products_per_category: 10,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn model_for(ds: &Dataset) -> ParsRecModel<f32> {
    let cfg = ModelConfig {
        n_items: ds.n_items,
        d_u: 8,
        d_v: 8,
        ..ModelConfig::default()
    };
    init_model(&cfg, ds.n_users(), &mut stream(0, Purpose::ModelInit, 0)).unwrap()
}

#[test]
fn collected_attention_is_bounded_and_deterministic() {
    let ds = small_synth(10);
    let splits = make_splits(&ds);
    let m = model_for(&ds);
    let sessions = train_sessions(&ds, &splits);
    let a = collect_attention(&m, &ds, &sessions, 1).unwrap();
    assert_eq!(a, collect_attention(&m, &ds, &sessions, 1).unwrap());
    // Per step the non-SOB weights sum to at most one.
    for ua in a.users.values() {
        let steps: u32 = ua.visits.values().sum();
        let mass: f64 = ua.mass.values().sum();
        assert!(ua.mass.values().all(|&w| w >= 0.0));
        assert!(mass <= steps as f64 + 1e-6);
    }
    let one = [SessionRef {
        user: 0,
        session: 0,
    }];
    let two = ds.sessions[0][0].items.len();
    let b = collect_attention(&m, &ds, &one, 1).unwrap();
    let total_keys: usize = (0..two).sum();
    assert_eq!(b.users[&0].mass.len(), total_keys);
}

#[test]
fn group_maps_and_differences() {
    let mut a = AttentionAtlas::new(vec![0, 0, 1, 1], 2);
    a.add(0, 0, 2, 1.0);
    a.add(0, 2, 0, 1.0);
    a.add(1, 0, 2, 1.0);
    a.add(1, 2, 0, 1.0);
    let g = group_heatmaps(&a, &[0, 1], 2).unwrap();
    assert_eq!(g.groups[0], aggregate_to_categories(&a, 0));
    assert!(g.difference(0, 1).unwrap().values.iter().all(|&v| v == 0.0));
    assert!(group_heatmaps(&a, &[0, 0], 2).is_err());
    for s in g.groups[1].row_sums() {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn embedding_similarity_is_symmetric_gram() {
    let ds = small_synth(4);
    let m = model_for(&ds);
    let s = embedding_similarity(&m);
    let n = ds.n_items;
    assert_eq!(s.shape(), &[n, n]);
    let ev = m.item_embeddings();
    for i in 0..n {
        let norm: f64 = ev.row(i).iter().map(|&x| (x as f64).powi(2)).sum();
        assert!((s.row(i)[i] - norm).abs() < 1e-9);
        for j in 0..n {
            assert!((s.row(i)[j] - s.row(j)[i]).abs() < 1e-6);
        }
    }
}

fn two_block_plan() -> CovarianceBlockPlan {
    let blk = |r: f64| CovarianceBlock {
        categories: vec![0, 1],
        correlations: vec![vec![1.0, r], vec![r, 1.0]],
        variance: 1.0,
    };
    CovarianceBlockPlan {
        groups: vec![
            GroupPlan {
                blocks: vec![blk(0.6)],
            },
            GroupPlan {
                blocks: vec![blk(-0.4)],
            },
        ],
    }
}

#[test]
fn structure_and_sign_helpers() {
    let plan = two_block_plan();
    let h = CategoryHeatmap::from_rows(&[
        vec![0.0, 0.6, 0.4],
        vec![0.7, 0.0, 0.3],
        vec![0.5, 0.5, 0.0],
    ]);
    let s = structure_summary(&h, &plan, 0);
    assert_eq!(s.n_positive, 2);
    assert!((s.positive - 0.65).abs() < 1e-12);
    assert_eq!(s.n_independent, 4);
    assert!((s.independent - 0.425).abs() < 1e-12);
    let diff = CategoryHeatmap::from_rows(&[
        vec![0.0, 0.1, 0.0],
        vec![-0.1, 0.0, 0.0],
        vec![0.0, 0.0, 0.0],
    ]);
    assert_eq!(sign_agreement(&diff, &plan, 0, 1), (1, 2));
}

#[test]
fn export_is_stable_and_thresholds_image_only() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("h");
    let h = CategoryHeatmap::from_rows(&[vec![0.04, 0.96], vec![0.5, 0.5]]);
    export_category_heatmap(&h, DISPLAY_THRESHOLD, &stem).unwrap();
    let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert_eq!(
        csv,
        "label,c0,c1\nc0,0.040000,0.960000\nc1,0.500000,0.500000\n"
    );
    let img = std::fs::read(stem.with_extension("ppm")).unwrap();
    let header = b"P6\n32 32\n255\n";
    assert!(img.starts_with(header));
    assert_eq!(&img[header.len()..header.len() + 3], &[255, 255, 255]);
    export_category_heatmap(&h, DISPLAY_THRESHOLD, &stem).unwrap();
    assert_eq!(std::fs::read(stem.with_extension("ppm")).unwrap(), img);
}

#[test]
fn spillover_excludes_removed_category() {
    let ds = small_synth(20);
    let splits = make_splits(&ds);
    let m = model_for(&ds);
    let r = spillover_experiment(&m, &ds, &splits, Some(2), 10, 0).unwrap();
    for g in 0..ds.n_groups {
        let row = r.row(g, 2).unwrap();
        assert_eq!(row.predicted, 0.0);
        assert_eq!(row.actual, 0);
        assert!(row.mape.is_none());
        let total: f64 = (0..ds.n_categories)
            .map(|c| r.row(g, c).unwrap().predicted)
            .sum();
        assert!((total - r.steps[g] as f64).abs() < 1e-9);
        let actual: usize = (0..ds.n_categories)
            .map(|c| r.row(g, c).unwrap().actual)
            .sum();
        assert_eq!(actual, r.steps[g]);
    }
    let full = spillover_experiment(&m, &ds, &splits, None, 10, 0).unwrap();
    assert!(full.baskets.iter().sum::<usize>() >= r.baskets.iter().sum::<usize>());
    assert!(r
        .to_csv()
        .starts_with("group,category,predicted,actual,mape\n0,0,"));
    assert!((mape(103.5, 100.0).unwrap() - 0.035).abs() < 1e-12);
    assert!(mape(1.0, 0.0).is_none());
}
