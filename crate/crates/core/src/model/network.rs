use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamKind, ParamSet, Scalar, Tensor, Var};

/// Projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionIds {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub ln: Option<(ParamId, ParamId)>,
    /// Width of each head's projection.
    pub width: usize,
}

/// Two-layer ReLU block `d_v -> d_v -> d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnIds {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub user_emb: ParamId,
    pub item_emb: ParamId,
    /// Self-attention layers below the user-query layer.
    pub lower: Vec<AttentionIds>,
    pub top: AttentionIds,
    pub w1: ParamId,
    pub w2: ParamId,
    pub b1: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
    pub b2: ParamId,
    pub ffn_pre: Option<FfnIds>,
    pub ffn_post: Option<FfnIds>,
}

/// Shapes and parameter handles; forward passes run against any graph built
/// over a matching [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub config: ModelConfig,
    pub n_users: usize,
    pub layout: ParamLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsRecModel<T: Scalar = f32> {
    pub arch: Architecture,
    pub params: ParamSet<T>,
}

struct Init<'a, T: Scalar, R: Rng + ?Sized> {
    params: ParamSet<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Init<'_, T, R> {
    fn normal(&mut self, name: String, n: usize, m: usize) -> ParamId {
        let dist = Normal::new(0.0, (2.0 / (n + m) as f64).sqrt()).expect("positive std");
        let data = (0..n * m).map(|_| T::of(dist.sample(self.rng))).collect();
        let t = Tensor::new(vec![n, m], data).expect("matching size");
        self.params.add(name, ParamKind::Dense, t)
    }

    fn uniform_table(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..rows * cols)
            .map(|_| T::of(dist.sample(self.rng)))
            .collect();
        let t = Tensor::new(vec![rows, cols], data).expect("matching size");
        self.params.add(name, ParamKind::SparseRows, t)
    }

    fn filled(&mut self, name: String, n: usize, v: f64) -> ParamId {
        self.params
            .add(name, ParamKind::Dense, Tensor::filled(vec![n], T::of(v)))
    }

    fn attention(
        &mut self,
        prefix: &str,
        c: &ModelConfig,
        q_in: usize,
        width: usize,
    ) -> AttentionIds {
        let d_v = c.d_v;
        let mut ids = AttentionIds {
            wq: Vec::new(),
            wk: Vec::new(),
            wv: Vec::new(),
            wo: ParamId(0),
            ln: None,
            width,
        };
        for i in 0..c.heads {
            ids.wq
                .push(self.normal(format!("{prefix}.wq{i}"), q_in, width));
            ids.wk
                .push(self.normal(format!("{prefix}.wk{i}"), d_v, width));
            ids.wv
                .push(self.normal(format!("{prefix}.wv{i}"), d_v, width));
        }
        ids.wo = self.normal(format!("{prefix}.wo"), c.heads * width, d_v);
        if c.use_ln {
            let gain = self.filled(format!("{prefix}.ln_gain"), d_v, 1.0);
            let bias = self.filled(format!("{prefix}.ln_bias"), d_v, 0.0);
            ids.ln = Some((gain, bias));
        }
        ids
    }

    fn ffn(&mut self, prefix: &str, d: usize) -> FfnIds {
        FfnIds {
            w_in: self.normal(format!("{prefix}.w_in"), d, d),
            b_in: self.filled(format!("{prefix}.b_in"), d, 0.0),
            w_out: self.normal(format!("{prefix}.w_out"), d, d),
            b_out: self.filled(format!("{prefix}.b_out"), d, 0.0),
        }
    }
}

/// Embeddings uniform in `±1/√|U|` and `±1/√|V|` (special rows included),
/// matrices `N(0, 2/(n+m))`, biases zero, layer-norm gains one.
pub fn init_model<T: Scalar, R: Rng + ?Sized>(
    config: &ModelConfig,
    n_users: usize,
    rng: &mut R,
) -> Result<ParsRecModel<T>> {
    config.validate()?;
    if n_users == 0 {
        return Err(Error::Config("the model needs at least one user".into()));
    }
    let c = config;
    let mut init = Init {
        params: ParamSet::new(),
        rng,
    };
    let user_emb = init.uniform_table("user_emb", n_users, c.d_u, 1.0 / (n_users as f64).sqrt());
    let item_emb = init.uniform_table(
        "item_emb",
        c.vocab(),
        c.d_v,
        1.0 / (c.n_items as f64).sqrt(),
    );
    let lower = (0..c.layers - 1)
        .map(|l| init.attention(&format!("self{l}"), c, c.d_v, c.d_v))
        .collect();
    let top = init.attention("attn", c, c.d_q(), c.d_q());
    let ffn_pre = c.ffn_pre_rnn.then(|| init.ffn("ffn_pre", c.d_v));
    let w1 = init.normal("w1".into(), c.d_v, c.d_v);
    let w2 = init.normal("w2".into(), c.d_q(), c.d_v);
    let b1 = init.filled("b1".into(), c.d_v, 0.0);
    let w3 = init.normal("w3".into(), c.d_v, c.vocab());
    let w4 = init.normal("w4".into(), c.d_q(), c.vocab());
    let b2 = init.filled("b2".into(), c.vocab(), 0.0);
    let ffn_post = c.ffn_post_rnn.then(|| init.ffn("ffn_post", c.d_v));
    Ok(ParsRecModel {
        arch: Architecture {
            config: c.clone(),
            n_users,
            layout: ParamLayout {
                user_emb,
                item_emb,
                lower,
                top,
                w1,
                w2,
                b1,
                w3,
                w4,
                b2,
                ffn_pre,
                ffn_post,
            },
        },
        params: init.params,
    })
}

impl<T: Scalar> ParsRecModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn n_users(&self) -> usize {
        self.arch.n_users
    }

    pub fn cast<U: Scalar>(&self) -> ParsRecModel<U> {
        ParsRecModel {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Real-item rows of the item table (special tokens dropped).
    pub fn item_embeddings(&self) -> Tensor<T> {
        let e = self.params.value(self.arch.layout.item_emb);
        let n = self.arch.config.n_items;
        let d = e.cols();
        Tensor::new(vec![n, d], e.data()[..n * d].to_vec()).expect("item rows")
    }
}

/// Final-layer attention weights of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention<T> {
    pub batch: usize,
    pub heads: usize,
    pub keys: usize,
    /// `[session][head][key]`, row-major.
    pub weights: Vec<T>,
}

impl<T: Scalar> StepAttention<T> {
    pub fn row(&self, session: usize, head: usize) -> &[T] {
        let start = (session * self.heads + head) * self.keys;
        &self.weights[start..start + self.keys]
    }

    /// Mean over heads of one session's row.
    pub fn head_mean(&self, session: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.keys];
        for h in 0..self.heads {
            for (o, &w) in out.iter_mut().zip(self.row(session, h)) {
                *o = *o + w;
            }
        }
        let inv = T::one() / T::of(self.heads as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        out
    }
}

/// What one unrolled batch produced.
#[derive(Debug, Clone)]
pub struct Unrolled<T> {
    /// One `B×(|V|+2)` node per step; row `j` predicts position `j+1`.
    pub logits: Vec<Var>,
    /// Items fed after each step (the step's targets), `[step][session]`.
    pub fed: Vec<Vec<usize>>,
    pub attention: Vec<StepAttention<T>>,
}

/// Batch of sessions unrolled together for the same number of steps.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a> {
    pub users: &'a [usize],
    /// Items of all earlier sessions of each user (mean gives `h_0`).
    pub histories: &'a [Vec<usize>],
    pub steps: usize,
    pub training: bool,
    pub record_attention: bool,
}

struct LayerCache {
    keys: Vec<Vec<Var>>,
    values: Vec<Vec<Var>>,
}

impl LayerCache {
    fn new(heads: usize) -> Self {
        LayerCache {
            keys: vec![Vec::new(); heads],
            values: vec![Vec::new(); heads],
        }
    }
}

impl Architecture {
    pub fn sob(&self) -> usize {
        self.config.sob()
    }

    pub fn eob(&self) -> usize {
        self.config.eob()
    }

    fn project_keys<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &AttentionIds,
        cache: &mut LayerCache,
        x: Var,
    ) -> Result<()> {
        for i in 0..ids.wk.len() {
            let wk = g.param(ids.wk[i]);
            let wv = g.param(ids.wv[i]);
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            cache.keys[i].push(k);
            cache.values[i].push(v);
        }
        Ok(())
    }

    /// Multi-head attention of `query` over the cached keys, followed by
    /// output projection, dropout, optional residual and optional LN.
    #[allow(clippy::too_many_arguments)]
    fn attend<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &AttentionIds,
        cache: &LayerCache,
        query: Var,
        residual: Option<Var>,
        training: bool,
        rng: &mut R,
        mut record: Option<&mut Vec<T>>,
    ) -> Result<Var> {
        let b = g.value(query).rows();
        let n = cache.keys[0].len();
        let w = ids.width;
        let scale = T::of(1.0 / (self.config.d_k() as f64).sqrt());
        let mut heads = Vec::with_capacity(ids.wq.len());
        let mut rows: Vec<Vec<T>> = Vec::new();
        for i in 0..ids.wq.len() {
            let wq = g.param(ids.wq[i]);
            let q = g.matmul(query, wq)?;
            let q = g.reshape(q, vec![b, 1, w])?;
            let k = g.stack(&cache.keys[i])?;
            let v = g.stack(&cache.values[i])?;
            let s = g.bmm(q, k, true)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s)?;
            if record.is_some() {
                rows.push(g.value(a).data().to_vec());
            }
            let o = g.bmm(a, v, false)?;
            heads.push(g.reshape(o, vec![b, w])?);
        }
        if let Some(out) = record.as_mut() {
            out.reserve(b * ids.wq.len() * n);
            for s in 0..b {
                for r in &rows {
                    out.extend_from_slice(&r[s * n..(s + 1) * n]);
                }
            }
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let wo = g.param(ids.wo);
        let mut out = g.matmul(cat, wo)?;
        out = g.dropout(out, self.config.effective_dropout(), training, rng)?;
        if let Some(r) = residual {
            out = g.add(out, r)?;
        }
        if let Some((gain, bias)) = ids.ln {
            let (gv, bv) = (g.param(gain), g.param(bias));
            out = g.layer_norm(out, gv, bv)?;
        }
        Ok(out)
    }

    fn ffn<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &FfnIds, x: Var) -> Result<Var> {
        let (wi, bi, wo, bo) = (
            g.param(ids.w_in),
            g.param(ids.b_in),
            g.param(ids.w_out),
            g.param(ids.b_out),
        );
        let h = g.matmul(x, wi)?;
        let h = g.add_bias(h, bi)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, wo)?;
        g.add_bias(o, bo)
    }

    /// Recurrent update and prediction from the attention output `v` and
    /// the query `q`, with the optional FFN blocks around them.
    fn rnn_head<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var, q: Var) -> Result<(Var, Var)> {
        let lay = &self.layout;
        let v = match &lay.ffn_pre {
            Some(f) => self.ffn(g, f, v)?,
            None => v,
        };
        let (w1, w2, b1) = (g.param(lay.w1), g.param(lay.w2), g.param(lay.b1));
        let (w3, w4, b2) = (g.param(lay.w3), g.param(lay.w4), g.param(lay.b2));
        let a = g.matmul(v, w1)?;
        let bq = g.matmul(q, w2)?;
        let pre = g.add(a, bq)?;
        let pre = g.add_bias(pre, b1)?;
        let mut h_next = g.relu(pre)?;
        let y = g.matmul(v, w3)?;
        let yq = g.matmul(q, w4)?;
        let y = g.add(y, yq)?;
        let logits = g.add_bias(y, b2)?;
        if let Some(f) = &lay.ffn_post {
            h_next = self.ffn(g, f, h_next)?;
        }
        Ok((h_next, logits))
    }

    /// Unrolls a batch step by step.
    ///
    /// Step `j` attends over `[SOB, v'_1 .. v'_j]` with the query
    /// `[E^U_u, h_j]`, updates the hidden state and emits logits. After each
    /// step `feed(j, logits)` returns the next item of every session, which
    /// becomes both the step's target and the next key.
    pub fn unroll<T, R, F>(
        &self,
        g: &mut Graph<'_, T>,
        input: BatchInput<'_>,
        rng: &mut R,
        mut feed: F,
    ) -> Result<Unrolled<T>>
    where
        T: Scalar,
        R: Rng + ?Sized,
        F: FnMut(usize, &Tensor<T>) -> Result<Vec<usize>>,
    {
        let b = input.users.len();
        if input.histories.len() != b {
            return Err(Error::shape(
                "unroll",
                format!("{b} users but {} histories", input.histories.len()),
            ));
        }
        if b == 0 {
            return Err(Error::Empty("batch"));
        }
        let c = &self.config;
        let lay = &self.layout;
        let eu = g.param(lay.user_emb);
        let ev = g.param(lay.item_emb);
        let user = g.gather(eu, input.users)?;
        let mut h = g.bag_mean(ev, input.histories)?;
        let mut lower: Vec<LayerCache> =
            lay.lower.iter().map(|_| LayerCache::new(c.heads)).collect();
        let mut top = LayerCache::new(c.heads);
        let mut current = vec![c.sob(); b];
        let mut out = Unrolled {
            logits: Vec::with_capacity(input.steps),
            fed: Vec::with_capacity(input.steps),
            attention: Vec::new(),
        };
        for j in 0..input.steps {
            let mut x = g.gather(ev, &current)?;
            for (ids, cache) in lay.lower.iter().zip(lower.iter_mut()) {
                self.project_keys(g, ids, cache, x)?;
                x = self.attend(g, ids, cache, x, Some(x), input.training, rng, None)?;
            }
            self.project_keys(g, &lay.top, &mut top, x)?;
            let q = g.concat_cols(&[user, h])?;
            let mut rec = input.record_attention.then(Vec::new);
            let residual = c.add_q_at_ln.then_some(h);
            let v = self.attend(
                g,
                &lay.top,
                &top,
                q,
                residual,
                input.training,
                rng,
                rec.as_mut(),
            )?;
            let (h_next, logits) = self.rnn_head(g, v, q)?;
            if let Some(weights) = rec {
                out.attention.push(StepAttention {
                    batch: b,
                    heads: c.heads,
                    keys: j + 1,
                    weights,
                });
            }
            let next = feed(j, g.value(logits))?;
            if next.len() != b {
                return Err(Error::shape(
                    "unroll",
                    format!("feeder returned {} items for {b} sessions", next.len()),
                ));
            }
            out.logits.push(logits);
            current = next.clone();
            out.fed.push(next);
            h = h_next;
        }
        Ok(out)
    }

    /// Unroll with a fixed fed sequence per session (`fed[s][j]` is fed after
    /// step `j`); sequences shorter than the longest are padded with EOB.
    pub fn unroll_fixed<T: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        users: &[usize],
        histories: &[Vec<usize>],
        fed: &[Vec<usize>],
        training: bool,
        record_attention: bool,
        rng: &mut R,
    ) -> Result<Unrolled<T>> {
        let steps = fed.iter().map(Vec::len).max().unwrap_or(0);
        let eob = self.eob();
        let input = BatchInput {
            users,
            histories,
            steps,
            training,
            record_attention,
        };
        self.unroll(g, input, rng, |j, _| {
            Ok(fed
                .iter()
                .map(|s| s.get(j).copied().unwrap_or(eob))
                .collect())
        })
    }

    /// Mean cross-entropy over all non-EOB targets of the unrolled batch.
    pub fn session_loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        unrolled: &Unrolled<T>,
    ) -> Result<Var> {
        let eob = self.eob();
        let counted: usize = unrolled
            .fed
            .iter()
            .map(|s| s.iter().filter(|&&t| t != eob).count())
            .sum();
        if counted == 0 {
            return Err(Error::Empty("loss batch (every target is padding)"));
        }
        let mut total: Option<Var> = None;
        for (logits, targets) in unrolled.logits.iter().zip(&unrolled.fed) {
            if targets.iter().all(|&t| t == eob) {
                continue;
            }
            let l = g.cross_entropy_normalized(*logits, targets, eob, counted)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        Ok(total.expect("at least one counted step"))
    }
}

/// Logits and attention of a single session with a fixed fed sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionForward<T> {
    pub logits: Vec<Vec<T>>,
    /// Per step, head rows over the `j+1` keys.
    pub attention: Vec<Vec<Vec<T>>>,
}

/// Runs one session: `h_0` from `history`, then one step per fed item.
pub fn forward_session<T: Scalar, R: Rng + ?Sized>(
    model: &ParsRecModel<T>,
    user: usize,
    history: &[usize],
    fed: &[usize],
    training: bool,
    rng: &mut R,
) -> Result<SessionForward<T>> {
    let mut g = Graph::new(&model.params);
    let un = model.arch.unroll_fixed(
        &mut g,
        &[user],
        &[history.to_vec()],
        &[fed.to_vec()],
        training,
        true,
        rng,
    )?;
    Ok(SessionForward {
        logits: un
            .logits
            .iter()
            .map(|&v| g.value(v).data().to_vec())
            .collect(),
        attention: un
            .attention
            .iter()
            .map(|a| (0..a.heads).map(|h| a.row(0, h).to_vec()).collect())
            .collect(),
    })
}

/// Attention of one user state over a full prefix, for inspection.
///
/// Returns the attention output `ṽ` and the final layer's head rows.
pub fn attention_step<T: Scalar, R: Rng + ?Sized>(
    model: &ParsRecModel<T>,
    user: usize,
    h: &[T],
    prefix: &[usize],
    training: bool,
    rng: &mut R,
) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    if prefix.is_empty() {
        return Err(Error::Empty("attention prefix"));
    }
    let arch = &model.arch;
    let c = &arch.config;
    let lay = &arch.layout;
    let mut g = Graph::new(&model.params);
    let eu = g.param(lay.user_emb);
    let ev = g.param(lay.item_emb);
    let u = g.gather(eu, &[user])?;
    let hv = g.leaf(Tensor::new(vec![1, c.d_v], h.to_vec())?, false);
    let mut lower: Vec<LayerCache> = lay.lower.iter().map(|_| LayerCache::new(c.heads)).collect();
    let mut top = LayerCache::new(c.heads);
    for &item in prefix {
        let mut x = g.gather(ev, &[item])?;
        for (ids, cache) in lay.lower.iter().zip(lower.iter_mut()) {
            arch.project_keys(&mut g, ids, cache, x)?;
            x = arch.attend(&mut g, ids, cache, x, Some(x), training, rng, None)?;
        }
        arch.project_keys(&mut g, &lay.top, &mut top, x)?;
    }
    let q = g.concat_cols(&[u, hv])?;
    let mut rec = Vec::new();
    let residual = c.add_q_at_ln.then_some(hv);
    let v = arch.attend(
        &mut g,
        &lay.top,
        &top,
        q,
        residual,
        training,
        rng,
        Some(&mut rec),
    )?;
    let n = prefix.len();
    let rows = rec.chunks(n).map(<[T]>::to_vec).collect();
    Ok((g.value(v).data().to_vec(), rows))
}

/// Recurrent update and logits from an attention output and a query
/// `[E^U_u, h_j]`.
pub fn arnn_step<T: Scalar>(model: &ParsRecModel<T>, v: &[T], q: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let c = &model.arch.config;
    let mut g = Graph::new(&model.params);
    let vv = g.leaf(Tensor::new(vec![1, c.d_v], v.to_vec())?, false);
    let qv = g.leaf(Tensor::new(vec![1, c.d_q()], q.to_vec())?, false);
    let (h, y) = model.arch.rnn_head(&mut g, vv, qv)?;
    Ok((g.value(h).data().to_vec(), g.value(y).data().to_vec()))
}

/// Mean of the embeddings of every item in `history` (zero when empty).
pub fn history_state<T: Scalar>(model: &ParsRecModel<T>, history: &[usize]) -> Result<Vec<T>> {
    let mut g = Graph::new(&model.params);
    let ev = g.param(model.arch.layout.item_emb);
    let h = g.bag_mean(ev, &[history.to_vec()])?;
    Ok(g.value(h).data().to_vec())
}
