//! Simulates a small market-basket set, validates it and prints how strongly
//! each group's correlated category pairs co-occur.
//! `cargo run --release --example synth_dataset -- [users]`

use parsrec::synth::{cooccurrence, lift_summary, synthesize, validate_dataset, SynthConfig};

fn main() -> parsrec::Result<()> {
    let users = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(128);
    let cfg = SynthConfig {
        n_users: users,
        sessions_per_user: 40,
        ..SynthConfig::default()
    };
    let ds = synthesize(&cfg)?;
    let report = validate_dataset(&ds);
    println!(
        "{} users in {} groups, {} baskets, {} actions, valid: {}",
        ds.n_users(),
        ds.n_groups,
        report.sessions,
        report.actions,
        report.is_valid()
    );
    for g in 0..ds.n_groups {
        let l = lift_summary(&ds, &cfg.covariance, g);
        println!(
            "group {g}: lift positive {:.3}  independent {:.3}  negative {:.3}",
            l.positive, l.independent, l.negative
        );
        let co = cooccurrence(&ds, Some(g));
        let show = |a, b| {
            co.lift(a, b)
                .map_or("n/a".to_string(), |x| format!("{x:.3}"))
        };
        println!(
            "  lift(c2, c3) = {}   lift(c2, c4) = {}",
            show(2, 3),
            show(2, 4)
        );
    }
    let (u, b) = ds.iter_baskets().next().expect("at least one basket");
    println!("first basket of user {u}: {:?}", b.items);
    Ok(())
}
