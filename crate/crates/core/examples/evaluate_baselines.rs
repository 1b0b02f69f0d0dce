//! Trains briefly on a small set and scores the model, the popularity
//! baseline and a random ranker on identical candidate lists.

use parsrec::eval::{evaluate_model, make_splits, poprec_fit, Scorer, Split, DEFAULT_KS};
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
        max_epochs: 8,
        patience: 3,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let out = fit(&mut model, &ds, &splits, &train)?;
    println!("best epoch {} of {}", out.best_epoch, out.history.len());

    let pop = poprec_fit(&ds, &splits);
    for (name, scorer) in [
        ("parsrec", Scorer::Model(&model)),
        ("poprec", Scorer::Pop(&pop)),
        ("random", Scorer::Random),
    ] {
        let r = evaluate_model(scorer, &ds, &splits, Split::Test, 0, &DEFAULT_KS)?;
        println!("{name}\n{}", r.to_table());
    }
    Ok(())
}
