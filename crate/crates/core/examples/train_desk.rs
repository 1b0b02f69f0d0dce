//! Trains on the desk synthetic set and compares against the popularity
//! baseline. `cargo run --release --example train_desk -- [epochs]`

use std::time::Instant;

use parsrec::eval::{evaluate_model, make_splits, poprec_fit, Scorer, Split, DEFAULT_KS};
use parsrec::model::{init_model, ModelConfig, ParsRecModel};
use parsrec::rng::{stream, Purpose};
use parsrec::synth::{synthesize, SynthConfig};
use parsrec::training::{fit_with, TrainConfig};

fn main() -> parsrec::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(5);
    let ds = synthesize(&SynthConfig::default())?;
    let splits = make_splits(&ds);
    println!(
        "{} users, {} items, {} actions",
        ds.n_users(),
        ds.n_items,
        ds.n_actions()
    );

    let cfg = ModelConfig {
        n_items: ds.n_items,
        ..ModelConfig::default()
    };
    let mut model: ParsRecModel =
        init_model(&cfg, ds.n_users(), &mut stream(0, Purpose::ModelInit, 0))?;
    let train = TrainConfig {
        max_epochs: epochs,
        patience: 3,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = fit_with(&mut model, &ds, &splits, &train, |r, _| {
        println!(
            "epoch {:>3}  loss {:.4}  hr10 {:.4}  ndcg10 {:.4}  ({:.0?})",
            r.epoch,
            r.loss,
            r.hr10,
            r.ndcg10,
            start.elapsed()
        );
    })?;
    println!("best epoch {}", out.best_epoch);

    let pop = poprec_fit(&ds, &splits);
    let seed = train.seed;
    let ours = evaluate_model(
        Scorer::Model(&model),
        &ds,
        &splits,
        Split::Test,
        seed,
        &DEFAULT_KS,
    )?;
    let base = evaluate_model::<f32>(
        Scorer::Pop(&pop),
        &ds,
        &splits,
        Split::Test,
        seed,
        &DEFAULT_KS,
    )?;
    println!("parsrec\n{}", ours.to_table());
    println!("poprec\n{}", base.to_table());
    Ok(())
}
