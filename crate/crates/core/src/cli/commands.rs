use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use super::config::RunConfig;
use crate::analysis::{
    collect_attention, embedding_similarity, export_category_heatmap, export_heatmap,
    group_heatmaps, sign_agreement, spillover_change, spillover_experiment, structure_summary,
    CategoryHeatmap, SpilloverReport,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, make_splits, poprec_fit, MetricsReport, Scorer, Split, SplitSpec,
};
use crate::model::{init_model, ModelConfig, ParsRecModel};
use crate::rng::{stream, Purpose};
use crate::synth::{
    lift_summary, read_dataset, synthesize, validate_dataset, write_dataset, CovarianceBlockPlan,
    Dataset,
};
use crate::training::{
    fit_with, history_csv, load_checkpoint, save_checkpoint, train_sessions, CheckpointMeta,
    FitOutcome,
};

/// Files every run directory gets.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(cfg.out.join("seed.txt"), format!("{}\n", cfg.seed))?;
    std::fs::write(
        cfg.out.join("version.txt"),
        format!("{}\n", artifact_version()),
    )?;
    Ok(())
}

/// Crate version plus `git describe` of the working directory when available.
pub fn artifact_version() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match git {
        Some(g) if !g.is_empty() => format!("parsrec {} ({g})", env!("CARGO_PKG_VERSION")),
        _ => format!("parsrec {}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn dataset_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("dataset.jsonl")
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("model.ckpt")
}

/// `--dataset`, else the run directory's dataset, else a fresh synthesis.
pub fn obtain_dataset(cfg: &RunConfig, explicit: Option<&Path>) -> Result<Dataset> {
    let default = dataset_path(cfg);
    match explicit {
        Some(p) => read_dataset(p),
        None if default.exists() => read_dataset(&default),
        None => {
            info!("no dataset given, synthesizing from the config");
            synthesize(&cfg.synth)
        }
    }
}

fn model_config(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        n_items: ds.n_items,
        ..cfg.model.clone()
    }
}

fn plan_of(ds: &Dataset, cfg: &RunConfig) -> CovarianceBlockPlan {
    ds.config
        .as_ref()
        .map_or_else(|| cfg.synth.covariance.clone(), |c| c.covariance.clone())
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Dataset> {
    let ds = synthesize(&cfg.synth)?;
    let report = validate_dataset(&ds);
    if !report.violations.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "synthesized dataset fails validation: {}",
            report.violations[0]
        )));
    }
    write_dataset(&ds, &dataset_path(cfg))?;
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "users,{}", ds.n_users());
    let _ = writeln!(csv, "items,{}", ds.n_items);
    let _ = writeln!(csv, "sessions,{}", report.sessions);
    let _ = writeln!(csv, "actions,{}", report.actions);
    let _ = writeln!(csv, "violations,{}", report.violations.len());
    for g in 0..ds.n_groups {
        let l = lift_summary(&ds, &cfg.synth.covariance, g);
        let _ = writeln!(csv, "group{g}_lift_positive,{:.6}", l.positive);
        let _ = writeln!(csv, "group{g}_lift_independent,{:.6}", l.independent);
        let _ = writeln!(csv, "group{g}_lift_negative,{:.6}", l.negative);
    }
    std::fs::write(cfg.out.join("synth_report.csv"), csv)?;
    info!(
        "{} users, {} sessions, {} actions written to {}",
        ds.n_users(),
        report.sessions,
        report.actions,
        dataset_path(cfg).display()
    );
    Ok(ds)
}

/// Fits a fresh model with `model` overriding the architecture.
pub fn train_model(
    cfg: &RunConfig,
    model: &ModelConfig,
    ds: &Dataset,
    splits: &SplitSpec,
) -> Result<(ParsRecModel<f32>, FitOutcome)> {
    let mut m = init_model(
        model,
        ds.n_users(),
        &mut stream(cfg.seed, Purpose::ModelInit, 0),
    )?;
    let out = fit_with(&mut m, ds, splits, &cfg.train, |r, _| {
        info!(
            "epoch {:>3}  loss {:.4}  val hr@10 {:.4}  ndcg@10 {:.4}",
            r.epoch, r.loss, r.hr10, r.ndcg10
        );
    })?;
    Ok((m, out))
}

pub fn cmd_train(
    cfg: &RunConfig,
    dataset: Option<&Path>,
) -> Result<(ParsRecModel<f32>, FitOutcome)> {
    let ds = obtain_dataset(cfg, dataset)?;
    let splits = make_splits(&ds);
    let (m, out) = train_model(cfg, &model_config(cfg, &ds), &ds, &splits)?;
    std::fs::write(cfg.out.join("history.csv"), history_csv(&out.history))?;
    let meta = CheckpointMeta {
        epoch: out.best_epoch,
        best_metric: out.best_ndcg10,
    };
    save_checkpoint(&checkpoint_path(cfg), &m, Some(&out.optim), meta)?;
    info!(
        "best epoch {} (validation ndcg@10 {:.4}), checkpoint {}",
        out.best_epoch,
        out.best_ndcg10,
        checkpoint_path(cfg).display()
    );
    Ok((m, out))
}

fn load_model(
    cfg: &RunConfig,
    explicit: Option<&Path>,
    ds: &Dataset,
) -> Result<Option<ParsRecModel<f32>>> {
    let path = explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_path(cfg));
    if !path.exists() {
        if explicit.is_some() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("checkpoint {} not found", path.display()),
            )));
        }
        return Ok(None);
    }
    let ck = load_checkpoint(&path)?;
    if ck.model.config().n_items < ds.n_items || ck.model.n_users() < ds.n_users() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained for {} items / {} users, dataset has {} / {}",
            path.display(),
            ck.model.config().n_items,
            ck.model.n_users(),
            ds.n_items,
            ds.n_users()
        )));
    }
    Ok(Some(ck.model))
}

fn require_model(
    cfg: &RunConfig,
    explicit: Option<&Path>,
    ds: &Dataset,
) -> Result<ParsRecModel<f32>> {
    load_model(cfg, explicit, ds)?.ok_or_else(|| {
        Error::Config(format!(
            "no checkpoint: pass --checkpoint or run `train` into {}",
            cfg.out.display()
        ))
    })
}

/// Rows `(scorer, report)` on the test split, all with the same candidates.
pub fn cmd_eval(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<Vec<(String, MetricsReport)>> {
    let ds = obtain_dataset(cfg, dataset)?;
    let splits = make_splits(&ds);
    let model = match load_model(cfg, checkpoint, &ds)? {
        Some(m) => m,
        None => {
            info!("no checkpoint found, scoring an untrained model");
            init_model(
                &model_config(cfg, &ds),
                ds.n_users(),
                &mut stream(cfg.seed, Purpose::ModelInit, 0),
            )?
        }
    };
    let pop = poprec_fit(&ds, &splits);
    let ks = &cfg.eval.ks;
    let seed = cfg.seed;
    let rows = vec![
        (
            "parsrec".to_string(),
            evaluate_model(Scorer::Model(&model), &ds, &splits, Split::Test, seed, ks)?,
        ),
        (
            "poprec".to_string(),
            evaluate_model::<f32>(Scorer::Pop(&pop), &ds, &splits, Split::Test, seed, ks)?,
        ),
        (
            "random".to_string(),
            evaluate_model::<f32>(Scorer::Random, &ds, &splits, Split::Test, seed, ks)?,
        ),
    ];
    std::fs::write(cfg.out.join("metrics.csv"), metrics_csv(&rows))?;
    for (name, r) in &rows {
        info!("{name}\n{}", r.to_table());
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("model,metric,k,value,steps,sessions\n");
    for (name, r) in rows {
        for line in r.to_csv().lines().skip(1) {
            let _ = writeln!(s, "{name},{line}");
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct AnalyzeOutput {
    pub groups: Vec<CategoryHeatmap>,
    pub structure: Vec<crate::analysis::StructureSummary>,
    /// `(a, b, agreements, entries)`.
    pub agreement: Vec<(usize, usize, usize, usize)>,
}

pub fn cmd_analyze(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<AnalyzeOutput> {
    let ds = obtain_dataset(cfg, dataset)?;
    let splits = make_splits(&ds);
    let model = require_model(cfg, checkpoint, &ds)?;
    let plan = plan_of(&ds, cfg);
    let atlas = collect_attention(&model, &ds, &train_sessions(&ds, &splits), cfg.seed)?;
    let maps = group_heatmaps(&atlas, &ds.user_group, ds.n_groups)?;
    let t = cfg.analysis.threshold;
    let mut structure = Vec::new();
    let mut csv = String::from("group,positive,negative,independent,users\n");
    for (g, h) in maps.groups.iter().enumerate() {
        export_category_heatmap(h, t, &cfg.out.join(format!("attention_group{g}")))?;
        let s = structure_summary(h, &plan, g);
        let _ = writeln!(
            csv,
            "{g},{:.6},{:.6},{:.6},{}",
            s.positive, s.negative, s.independent, maps.users_per_group[g]
        );
        structure.push(s);
    }
    std::fs::write(cfg.out.join("structure.csv"), csv)?;
    let mut agreement = Vec::new();
    let mut csv = String::from("group_a,group_b,agreements,entries,fraction\n");
    for ((a, b), d) in &maps.differences {
        export_category_heatmap(d, t, &cfg.out.join(format!("attention_diff_{a}_{b}")))?;
        let (ok, n) = sign_agreement(d, &plan, *a, *b);
        let frac = if n > 0 {
            ok as f64 / n as f64
        } else {
            f64::NAN
        };
        let _ = writeln!(csv, "{a},{b},{ok},{n},{frac:.6}");
        agreement.push((*a, *b, ok, n));
    }
    std::fs::write(cfg.out.join("sign_agreement.csv"), csv)?;

    // Item similarity as an image, and averaged over category blocks as CSV.
    let sim = embedding_similarity(&model);
    let n = ds.n_items;
    let labels: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
    let c = ds.n_categories;
    let mut block = vec![0.0; c * c];
    let mut count = vec![0usize; c * c];
    for i in 0..n {
        for j in 0..n {
            let cell = ds.item_category[i] * c + ds.item_category[j];
            block[cell] += sim.row(i)[j];
            count[cell] += 1;
        }
    }
    block
        .iter_mut()
        .zip(&count)
        .for_each(|(b, &k)| *b /= k.max(1) as f64);
    export_heatmap(
        &block,
        c,
        c,
        &crate::analysis::category_labels(c),
        0.0,
        &cfg.out.join("embedding_category"),
    )?;
    let img_stem = cfg.out.join("embedding_similarity");
    export_heatmap(sim.data(), n, n, &labels, 0.0, &img_stem)?;
    // The item-level CSV is large and carries nothing the model does not.
    std::fs::remove_file(img_stem.with_extension("csv"))?;
    info!("heatmaps written to {}", cfg.out.display());
    Ok(AnalyzeOutput {
        groups: maps.groups,
        structure,
        agreement,
    })
}

#[derive(Debug, Clone)]
pub struct SpilloverOutput {
    pub removed: SpilloverReport,
    pub baseline: SpilloverReport,
}

pub fn cmd_spillover(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<SpilloverOutput> {
    let ds = obtain_dataset(cfg, dataset)?;
    let splits = make_splits(&ds);
    let model = require_model(cfg, checkpoint, &ds)?;
    let a = &cfg.analysis;
    let removed = spillover_experiment(
        &model,
        &ds,
        &splits,
        Some(a.removed_category),
        a.k,
        cfg.seed,
    )?;
    let baseline = spillover_experiment(&model, &ds, &splits, None, a.k, cfg.seed)?;
    std::fs::write(cfg.out.join("spillover.csv"), removed.to_csv())?;
    std::fs::write(cfg.out.join("spillover_baseline.csv"), baseline.to_csv())?;
    let mut csv = String::from("group,category,role,share_change,mape\n");
    for g in 0..ds.n_groups {
        for (cat, role) in [
            (a.correlated_category, "correlated"),
            (a.independent_category, "independent"),
        ] {
            let ch = spillover_change(&removed, &baseline, g, cat);
            let m = removed.row(g, cat).and_then(|r| r.mape).unwrap_or(f64::NAN);
            let _ = writeln!(csv, "{g},{cat},{role},{ch:.6},{m:.6}");
            info!("group {g} category {cat} ({role}): share change {ch:+.4}, MAPE {m:.4}");
        }
    }
    std::fs::write(cfg.out.join("spillover_summary.csv"), csv)?;
    Ok(SpilloverOutput { removed, baseline })
}

/// The architecture variants compared by `ablate`, default first.
pub fn ablation_grid(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("default", base.clone()),
        ("no_layer_norm", with(&|c| c.use_ln = false)),
        ("no_dropout", with(&|c| c.use_dropout = false)),
        ("no_q_at_ln", with(&|c| c.add_q_at_ln = false)),
        ("layers_2", with(&|c| c.layers = 2)),
        ("heads_1", with(&|c| c.heads = 1)),
        ("heads_4", with(&|c| c.heads = 4)),
        ("ffn_pre_rnn", with(&|c| c.ffn_pre_rnn = true)),
        ("ffn_post_rnn", with(&|c| c.ffn_post_rnn = true)),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub best_epoch: usize,
    pub test: MetricsReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,best_epoch,hr10,ndcg10,sessprec10,hr5,ndcg5\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.variant,
            r.best_epoch,
            r.test.hr(10),
            r.test.ndcg(10),
            r.test.sess_prec(10),
            r.test.hr(5),
            r.test.ndcg(5)
        );
    }
    s
}

/// Trains every variant with the same seed and data and scores it on the
/// test split.
pub fn cmd_ablate(cfg: &RunConfig, dataset: Option<&Path>) -> Result<Vec<AblationRow>> {
    let ds = obtain_dataset(cfg, dataset)?;
    let splits = make_splits(&ds);
    let mut rows = Vec::new();
    for (name, mc) in ablation_grid(&model_config(cfg, &ds)) {
        info!("ablation variant {name}");
        let (m, out) = train_model(cfg, &mc, &ds, &splits)?;
        let test = evaluate_model(
            Scorer::Model(&m),
            &ds,
            &splits,
            Split::Test,
            cfg.seed,
            &[1, 5, 10],
        )?;
        rows.push(AblationRow {
            variant: name.to_string(),
            best_epoch: out.best_epoch,
            test,
        });
        std::fs::write(cfg.out.join("ablation.csv"), ablation_csv(&rows))?;
    }
    Ok(rows)
}
