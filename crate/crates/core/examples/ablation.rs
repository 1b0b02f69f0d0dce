//! Runs the architecture variant grid on a small set via the CLI layer and
//! prints the comparison table.

use parsrec::cli::{ablation_csv, cmd_ablate, parse_config, Overrides};

const CONFIG: &str = r#"
[synth]
n_users = 96
sessions_per_user = 20
products_per_category = 10

[model]
d_u = 12
d_v = 12

[train]
batch_size = 64
max_epochs = 5
patience = 2
lr = 0.003
"#;

fn main() -> parsrec::Result<()> {
    let dir = std::env::temp_dir().join("parsrec-ablation-example");
    let overrides = Overrides {
        out: Some(dir.clone()),
        ..Overrides::default()
    };
    let cfg = parse_config(CONFIG, &overrides, None)?;
    std::fs::create_dir_all(&cfg.out)?;
    let rows = cmd_ablate(&cfg, None)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
