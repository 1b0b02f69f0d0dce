//! Removes one category at test time and compares predicted category sales
//! with a run on the full assortment.

use parsrec::analysis::{spillover_change, spillover_experiment};
use parsrec::eval::make_splits;
use parsrec::model::{init_model, ModelConfig, ParsRecModel};
use parsrec::rng::{stream, Purpose};
use parsrec::synth::{synthesize, SynthConfig};
use parsrec::training::{fit, TrainConfig};

fn main() -> parsrec::Result<()> {
    let ds = synthesize(&SynthConfig {
        n_users: 128,
        sessions_per_user: 30,
        products_per_category: 20,
        ..SynthConfig::default()
    })?;
    let splits = make_splits(&ds);
    let cfg = ModelConfig {
        n_items: ds.n_items,
        d_u: 16,
        d_v: 16,
        ..ModelConfig::default()
    };
    let mut model: ParsRecModel =
        init_model(&cfg, ds.n_users(), &mut stream(0, Purpose::ModelInit, 0))?;
    let train = TrainConfig {
        batch_size: 64,
        max_epochs: 6,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    fit(&mut model, &ds, &splits, &train)?;

    let (removed, k) = (2, 10);
    let cut = spillover_experiment(&model, &ds, &splits, Some(removed), k, 0)?;
    let full = spillover_experiment(&model, &ds, &splits, None, k, 0)?;
    println!("category {removed} removed, top-{k} sales");
    for g in 0..ds.n_groups {
        for c in [3, 4, 15] {
            let row = cut.row(g, c).expect("row per group and category");
            println!(
                "group {g} c{c:<2}  predicted {:8.2}  actual {:5}  share change {:+.4}  mape {}",
                row.predicted,
                row.actual,
                spillover_change(&cut, &full, g, c),
                row.mape.map_or("n/a".into(), |m| format!("{m:.4}"))
            );
        }
    }
    Ok(())
}
