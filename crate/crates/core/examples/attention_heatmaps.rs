//! Category-level attention maps per user group, written as CSV and PPM.
//! `cargo run --release --example attention_heatmaps -- [out_dir]`

use std::path::PathBuf;

use parsrec::analysis::{
    collect_attention, export_category_heatmap, group_heatmaps, sign_agreement, structure_summary,
};
use parsrec::eval::make_splits;
use parsrec::model::{init_model, ModelConfig, ParsRecModel};
use parsrec::rng::{stream, Purpose};
use parsrec::synth::{synthesize, SynthConfig};
use parsrec::training::{fit, train_sessions, TrainConfig};

fn main() -> parsrec::Result<()> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "runs/heatmaps".into()),
    );
    std::fs::create_dir_all(&out)?;
    let synth = SynthConfig {
        n_users: 128,
        sessions_per_user: 30,
        products_per_category: 20,
        ..SynthConfig::default()
    };
    let ds = synthesize(&synth)?;
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

    let atlas = collect_attention(&model, &ds, &train_sessions(&ds, &splits), 0)?;
    let maps = group_heatmaps(&atlas, &ds.user_group, ds.n_groups)?;
    for (g, h) in maps.groups.iter().enumerate() {
        export_category_heatmap(h, 0.05, &out.join(format!("group{g}")))?;
        let s = structure_summary(h, &synth.covariance, g);
        println!(
            "group {g}: mean attention positive {:.4}, negative {:.4}, independent {:.4}",
            s.positive, s.negative, s.independent
        );
    }
    if let Some(d) = maps.difference(0, 1) {
        export_category_heatmap(d, 0.0, &out.join("diff_0_1"))?;
        let (ok, n) = sign_agreement(d, &synth.covariance, 0, 1);
        println!("difference map agrees in sign with the plans on {ok}/{n} entries");
    }
    println!("wrote heatmaps to {}", out.display());
    Ok(())
}
