use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::build_group_sigma;
use super::linalg::{cholesky, vine_correlation_factor};
use super::sample::{
    choose_categories, choose_product, draw_prices, draw_user_profile, sample_basket_size,
    PriceTable,
};
use super::SynthConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{stream, Purpose, StreamRng};

pub const DATASET_FORMAT: &str = "parsrec-dataset";
pub const DATASET_VERSION: u32 = 1;

/// One shopping occasion. `items` keeps the order in which they were chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Basket {
    pub t: u32,
    pub items: Vec<usize>,
}

/// Per-user chronological baskets plus the simulator's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_items: usize,
    pub n_categories: usize,
    pub n_groups: usize,
    pub item_category: Vec<usize>,
    pub user_group: Vec<usize>,
    pub sessions: Vec<Vec<Basket>>,
    /// Row-major `C×C` category covariance of every group.
    pub group_sigmas: Vec<Vec<f64>>,
    pub prices: Option<PriceTable>,
    pub config: Option<SynthConfig>,
}

impl Dataset {
    /// A dataset without simulator metadata, e.g. for hand-built fixtures.
    pub fn from_sessions(
        item_category: Vec<usize>,
        user_group: Vec<usize>,
        sessions: Vec<Vec<Basket>>,
    ) -> Self {
        let n_categories = item_category.iter().max().map_or(0, |m| m + 1);
        let n_groups = user_group.iter().max().map_or(0, |m| m + 1);
        Dataset {
            n_items: item_category.len(),
            n_categories,
            n_groups,
            item_category,
            user_group,
            sessions,
            group_sigmas: Vec::new(),
            prices: None,
            config: None,
        }
    }

    pub fn n_users(&self) -> usize {
        self.sessions.len()
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.iter().map(Vec::len).sum()
    }

    pub fn n_actions(&self) -> usize {
        self.iter_baskets().map(|(_, b)| b.items.len()).sum()
    }

    pub fn iter_baskets(&self) -> impl Iterator<Item = (usize, &Basket)> {
        self.sessions
            .iter()
            .enumerate()
            .flat_map(|(u, s)| s.iter().map(move |b| (u, b)))
    }

    pub fn items_of_category(&self, category: usize) -> Vec<usize> {
        (0..self.n_items)
            .filter(|&i| self.item_category[i] == category)
            .collect()
    }

    pub fn group_sigma(&self, group: usize) -> Option<Tensor<f64>> {
        let c = self.n_categories;
        self.group_sigmas
            .get(group)
            .and_then(|s| Tensor::new(vec![c, c], s.clone()).ok())
    }
}

pub fn user_stream(seed: u64, user: usize) -> StreamRng {
    stream(seed, Purpose::SynthUser, user as u64)
}

/// Runs the simulator. Every user draws from its own stream, so the work is
/// split across threads without changing the output.
pub fn synthesize(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let c = config.n_categories;
    let mut setup = stream(config.seed, Purpose::SynthSetup, 0);
    let prices = draw_prices(config, &mut setup);
    let omega_factors = (0..c)
        .map(|_| {
            vine_correlation_factor(
                config.products_per_category,
                config.vine_beta_a,
                config.vine_beta_b,
                &mut setup,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let sigmas = (0..config.n_groups)
        .map(|g| build_group_sigma(&config.covariance, g, c))
        .collect::<Result<Vec<_>>>()?;
    let chols = sigmas.iter().map(cholesky).collect::<Result<Vec<_>>>()?;
    let alpha = vec![config.alpha; c];

    let gen_user = |u: usize| -> Result<Vec<Basket>> {
        let mut rng = user_stream(config.seed, u);
        let profile = draw_user_profile(u, config, &omega_factors, &mut rng);
        let chol = &chols[profile.group];
        (1..=config.sessions_per_user)
            .map(|t| {
                let n = sample_basket_size(config, &mut rng);
                let cats = choose_categories(&alpha, chol, n, &mut rng)?;
                let items = cats
                    .iter()
                    .map(|&cat| choose_product(&profile, cat, &prices, config, &mut rng))
                    .collect();
                Ok(Basket { t: t as u32, items })
            })
            .collect()
    };

    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(config.n_users.max(1));
    let chunk = config.n_users.div_ceil(workers.max(1)).max(1);
    let sessions: Vec<Vec<Basket>> = if workers <= 1 {
        (0..config.n_users).map(gen_user).collect::<Result<_>>()?
    } else {
        let parts = std::thread::scope(|s| {
            let handles: Vec<_> = (0..config.n_users)
                .step_by(chunk)
                .map(|start| {
                    let end = (start + chunk).min(config.n_users);
                    let gen_user = &gen_user;
                    s.spawn(move || (start..end).map(gen_user).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("synthesis worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        parts.into_iter().flatten().collect()
    };

    Ok(Dataset {
        n_items: config.n_items(),
        n_categories: c,
        n_groups: config.n_groups,
        item_category: (0..config.n_items())
            .map(|i| config.category_of(i))
            .collect(),
        user_group: (0..config.n_users).map(|u| u % config.n_groups).collect(),
        sessions,
        group_sigmas: sigmas.into_iter().map(Tensor::into_data).collect(),
        prices: Some(prices),
        config: Some(config.clone()),
    })
}

/// Sidecar path next to a dataset file: `<name>.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

#[derive(Serialize)]
struct RecordOut<'a> {
    user: usize,
    t: u32,
    items: &'a [usize],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    user: usize,
    t: u32,
    items: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    version: u32,
    n_items: usize,
    n_categories: usize,
    n_groups: usize,
    n_sessions: usize,
    n_actions: usize,
    item_category: Vec<usize>,
    user_group: Vec<usize>,
    group_sigmas: Vec<Vec<f64>>,
    prices: Option<PriceTable>,
    config: Option<SynthConfig>,
}

/// Writes the session lines to `path` and the metadata to [`meta_path`].
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (user, b) in ds.iter_baskets() {
        let rec = RecordOut {
            user,
            t: b.t,
            items: &b.items,
        };
        serde_json::to_writer(&mut out, &rec)
            .map_err(|e| Error::parse("dataset", e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let meta = Meta {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        n_items: ds.n_items,
        n_categories: ds.n_categories,
        n_groups: ds.n_groups,
        n_sessions: ds.n_sessions(),
        n_actions: ds.n_actions(),
        item_category: ds.item_category.clone(),
        user_group: ds.user_group.clone(),
        group_sigmas: ds.group_sigmas.clone(),
        prices: ds.prices.clone(),
        config: ds.config.clone(),
    };
    let mut text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::parse("dataset meta", e.to_string()))?;
    text.push('\n');
    std::fs::write(meta_path(path), text)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta_text = std::fs::read_to_string(meta_path(path))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::parse("dataset meta", e.to_string()))?;
    if meta.format != DATASET_FORMAT || meta.version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            expected: format!("{DATASET_FORMAT} v{DATASET_VERSION}"),
            found: format!("{} v{}", meta.format, meta.version),
        });
    }
    let n_users = meta.user_group.len();
    if meta.item_category.len() != meta.n_items {
        return Err(Error::parse(
            "dataset meta",
            "item_category length differs from n_items",
        ));
    }
    let mut sessions: Vec<Vec<Basket>> = vec![Vec::new(); n_users];
    let mut last: Option<(usize, u32)> = None;
    let reader = BufReader::new(File::open(path)?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let at = |d: String| Error::parse("dataset", format!("line {}: {d}", lineno + 1));
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        if rec.user >= n_users {
            return Err(at(format!("user {} out of range", rec.user)));
        }
        if let Some(&bad) = rec.items.iter().find(|&&i| i >= meta.n_items) {
            return Err(at(format!("item {bad} out of range")));
        }
        if let Some((pu, pt)) = last {
            if rec.user < pu || (rec.user == pu && rec.t <= pt) {
                return Err(at("records not in ascending (user, t) order".into()));
            }
        }
        last = Some((rec.user, rec.t));
        sessions[rec.user].push(Basket {
            t: rec.t,
            items: rec.items,
        });
    }
    let ds = Dataset {
        n_items: meta.n_items,
        n_categories: meta.n_categories,
        n_groups: meta.n_groups,
        item_category: meta.item_category,
        user_group: meta.user_group,
        sessions,
        group_sigmas: meta.group_sigmas,
        prices: meta.prices,
        config: meta.config,
    };
    if ds.n_sessions() != meta.n_sessions || ds.n_actions() != meta.n_actions {
        return Err(Error::parse(
            "dataset",
            format!(
                "expected {} sessions / {} actions, found {} / {} (truncated?)",
                meta.n_sessions,
                meta.n_actions,
                ds.n_sessions(),
                ds.n_actions()
            ),
        ));
    }
    Ok(ds)
}
