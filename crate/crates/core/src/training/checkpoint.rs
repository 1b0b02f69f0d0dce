//! Checkpoint files: a text header followed by raw little-endian payload.
//!
//! ```text
//! parsrec-checkpoint
//! version = 1
//! n_users = 64
//! epoch = 7
//! best_metric = 0.4121
//! [model]
//! n_items = 2000
//! ...
//! [optimizer]
//! lr = 0.001
//! ...
//! [tensors]
//! param/item_emb f32 2002x32 0 256256
//! dense.m/w1 f32 32x32 256256 4096
//! sparse.rows/item_emb u64 2002 ...
//! end
//! <payload>
//! ```
//!
//! Manifest lines are `name dtype dims offset bytes`, offsets relative to
//! the first payload byte.

use std::fmt::Write as _;
use std::path::Path;

use super::step::Optimizers;
use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ParsRecModel};
use crate::numerics::{AdamConfig, Moments, OptimizerState, ParamSet};
use crate::rng::{stream, Purpose};

pub const CHECKPOINT_MAGIC: &str = "parsrec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub best_metric: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ParsRecModel<f32>,
    pub optim: Option<Optimizers<f32>>,
    pub meta: CheckpointMeta,
}

enum Payload<'a> {
    F32(&'a [f32]),
    U64(Vec<u64>),
}

struct Entry<'a> {
    name: String,
    dims: Vec<usize>,
    data: Payload<'a>,
}

fn dims_text(d: &[usize]) -> String {
    d.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn opt_entries<'a>(
    tag: &str,
    state: &'a OptimizerState<f32>,
    params: &ParamSet<f32>,
    out: &mut Vec<Entry<'a>>,
) {
    for (id, mom) in &state.slots {
        let p = params.get(*id);
        let dims = p.value.shape().to_vec();
        out.push(Entry {
            name: format!("{tag}.m/{}", p.name),
            dims: dims.clone(),
            data: Payload::F32(&mom.m),
        });
        out.push(Entry {
            name: format!("{tag}.v/{}", p.name),
            dims,
            data: Payload::F32(&mom.v),
        });
        out.push(Entry {
            name: format!("{tag}.t/{}", p.name),
            dims: vec![1],
            data: Payload::U64(vec![mom.t]),
        });
        if !mom.row_steps.is_empty() {
            out.push(Entry {
                name: format!("{tag}.rows/{}", p.name),
                dims: vec![mom.row_steps.len()],
                data: Payload::U64(mom.row_steps.clone()),
            });
        }
    }
}

fn adam_text(s: &mut String, c: &AdamConfig) {
    let _ = writeln!(
        s,
        "lr = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}",
        c.lr, c.beta1, c.beta2, c.eps
    );
}

pub fn checkpoint_bytes(
    model: &ParsRecModel<f32>,
    optim: Option<&Optimizers<f32>>,
    meta: CheckpointMeta,
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    for (_, p) in model.params.iter() {
        entries.push(Entry {
            name: format!("param/{}", p.name),
            dims: p.value.shape().to_vec(),
            data: Payload::F32(p.value.data()),
        });
    }
    if let Some(o) = optim {
        opt_entries("dense", &o.dense, &model.params, &mut entries);
        opt_entries("sparse", &o.sparse, &model.params, &mut entries);
    }

    let mut h = String::new();
    let _ = writeln!(h, "{CHECKPOINT_MAGIC}\nversion = {CHECKPOINT_VERSION}");
    let _ = writeln!(h, "n_users = {}", model.n_users());
    let _ = writeln!(
        h,
        "epoch = {}\nbest_metric = {:?}",
        meta.epoch, meta.best_metric
    );
    h.push_str("[model]\n");
    h.push_str(
        &toml::to_string(model.config())
            .map_err(|e| Error::Config(format!("model config: {e}")))?,
    );
    if let Some(o) = optim {
        h.push_str("[optimizer]\n");
        adam_text(&mut h, &o.dense.config);
    }
    h.push_str("[tensors]\n");
    let mut offset = 0usize;
    for e in &entries {
        let (dtype, bytes) = match &e.data {
            Payload::F32(d) => ("f32", d.len() * 4),
            Payload::U64(d) => ("u64", d.len() * 8),
        };
        let _ = writeln!(
            h,
            "{} {dtype} {} {offset} {bytes}",
            e.name,
            dims_text(&e.dims)
        );
        offset += bytes;
    }
    h.push_str("end\n");

    let mut out = h.into_bytes();
    out.reserve(offset);
    for e in &entries {
        match &e.data {
            Payload::F32(d) => d
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Payload::U64(d) => d
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &ParsRecModel<f32>,
    optim: Option<&Optimizers<f32>>,
    meta: CheckpointMeta,
) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, optim, meta)?)?;
    Ok(())
}

struct ManifestLine {
    name: String,
    dtype: String,
    dims: Vec<usize>,
    offset: usize,
    bytes: usize,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::parse("checkpoint", detail)
}

fn kv<'a>(line: &'a str) -> Result<(&'a str, &'a str)> {
    line.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad(format!("bad value {v:?} for {key}")))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("header has no end line"))?;
    let header = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &bytes[end + marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing magic line"));
    }
    let mut section = "";
    let mut top: Vec<(String, String)> = Vec::new();
    let mut model_text = String::new();
    let mut adam = AdamConfig::default();
    let mut has_optim = false;
    let mut manifest = Vec::new();
    for line in lines {
        if line.starts_with('[') {
            section = match line {
                "[model]" => "model",
                "[optimizer]" => {
                    has_optim = true;
                    "optimizer"
                }
                "[tensors]" => "tensors",
                other => return Err(bad(format!("unknown section {other}"))),
            };
            continue;
        }
        match section {
            "" => {
                let (k, v) = kv(line)?;
                top.push((k.to_string(), v.to_string()));
            }
            "model" => {
                model_text.push_str(line);
                model_text.push('\n');
            }
            "optimizer" => {
                let (k, v) = kv(line)?;
                let x: f64 = num(k, v)?;
                match k {
                    "lr" => adam.lr = x,
                    "beta1" => adam.beta1 = x,
                    "beta2" => adam.beta2 = x,
                    "eps" => adam.eps = x,
                    _ => return Err(bad(format!("unknown optimizer key {k}"))),
                }
            }
            _ => {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(bad(format!("manifest line {line:?}")));
                }
                let dims = f[2]
                    .split('x')
                    .map(|d| num::<usize>("dims", d))
                    .collect::<Result<Vec<_>>>()?;
                manifest.push(ManifestLine {
                    name: f[0].to_string(),
                    dtype: f[1].to_string(),
                    dims,
                    offset: num("offset", f[3])?,
                    bytes: num("bytes", f[4])?,
                });
            }
        }
    }
    let get = |key: &str| -> Result<&str> {
        top.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("missing {key}")))
    };
    let version = get("version")?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Version {
            what: "checkpoint",
            expected: CHECKPOINT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let n_users: usize = num("n_users", get("n_users")?)?;
    let meta = CheckpointMeta {
        epoch: num("epoch", get("epoch")?)?,
        best_metric: num("best_metric", get("best_metric")?)?,
    };
    let config: ModelConfig =
        toml::from_str(&model_text).map_err(|e| bad(format!("model config: {e}")))?;

    let expected: usize = manifest.iter().map(|m| m.bytes).sum();
    if payload.len() != expected {
        return Err(bad(format!(
            "payload has {} bytes, manifest lists {expected} (truncated?)",
            payload.len()
        )));
    }
    let lookup = |name: &str| manifest.iter().find(|m| m.name == name);
    let read_f32 = |m: &ManifestLine, dims: &[usize]| -> Result<Vec<f32>> {
        if m.dtype != "f32" || m.dims != dims {
            return Err(Error::shape(
                "checkpoint",
                format!(
                    "{} is {} {:?}, expected f32 {dims:?}",
                    m.name, m.dtype, m.dims
                ),
            ));
        }
        let n: usize = dims.iter().product();
        if m.bytes != n * 4 || m.offset + m.bytes > payload.len() {
            return Err(bad(format!("{} has inconsistent byte range", m.name)));
        }
        Ok(payload[m.offset..m.offset + m.bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };
    let read_u64 = |m: &ManifestLine, len: usize| -> Result<Vec<u64>> {
        if m.dtype != "u64"
            || m.dims != [len]
            || m.bytes != len * 8
            || m.offset + m.bytes > payload.len()
        {
            return Err(Error::shape(
                "checkpoint",
                format!("{} is not u64 [{len}]", m.name),
            ));
        }
        Ok(payload[m.offset..m.offset + m.bytes]
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    };

    let mut model: ParsRecModel<f32> =
        init_model(&config, n_users, &mut stream(0, Purpose::ModelInit, 0))?;
    let ids: Vec<_> = model
        .params
        .iter()
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    let mut used = 0;
    for (id, name) in &ids {
        let m = lookup(&format!("param/{name}"))
            .ok_or_else(|| Error::shape("checkpoint", format!("missing parameter {name}")))?;
        let dims = model.params.value(*id).shape().to_vec();
        let data = read_f32(m, &dims)?;
        model
            .params
            .value_mut(*id)
            .data_mut()
            .copy_from_slice(&data);
        used += 1;
    }

    let optim = if has_optim {
        let mut o = Optimizers::new(&model, adam);
        for (tag, state) in [("dense", &mut o.dense), ("sparse", &mut o.sparse)] {
            for (id, mom) in state.slots.iter_mut() {
                let p = model.params.get(*id);
                let dims = p.value.shape().to_vec();
                let find = |kind: &str| {
                    lookup(&format!("{tag}.{kind}/{}", p.name)).ok_or_else(|| {
                        Error::shape("checkpoint", format!("missing {tag}.{kind} for {}", p.name))
                    })
                };
                *mom = Moments {
                    m: read_f32(find("m")?, &dims)?,
                    v: read_f32(find("v")?, &dims)?,
                    t: read_u64(find("t")?, 1)?[0],
                    row_steps: if mom.row_steps.is_empty() {
                        Vec::new()
                    } else {
                        used += 1;
                        read_u64(find("rows")?, mom.row_steps.len())?
                    },
                };
                used += 3;
            }
        }
        Some(o)
    } else {
        None
    };
    if used != manifest.len() {
        return Err(Error::shape(
            "checkpoint",
            format!(
                "{} manifest entries do not belong to this model",
                manifest.len() - used
            ),
        ));
    }
    Ok(Checkpoint { model, optim, meta })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// Loads and checks the embedded model config against `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.model.config() != expected {
        return Err(Error::Config(format!(
            "checkpoint was trained with {:?}, requested {:?}",
            ck.model.config(),
            expected
        )));
    }
    Ok(ck)
}
