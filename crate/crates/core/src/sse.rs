//! Semantic separation: dual learnable prompts, removal of the
//! clothing-aligned component from identity text features, and the
//! stage-1 prompt objective.
//!
//! For identity `i` with text feature `f_id` and clothing feature `f_clo`:
//!
//! ```text
//! f_proj = (<f_clo, f_id> / |f_id|^2) * f_id
//! f_ort  = f_id - f_proj
//! ```
//!
//! Taken literally this keeps `f_ort` on the line spanned by `f_id`; only its
//! length (and possibly sign) changes. An identity with several outfits uses
//! the mean of its outfit features as `f_clo` when a single row per identity
//! is needed; projection is linear in `f_clo`, so this equals the mean of the
//! per-outfit projections.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::encoders::{token_id, TextEncoder, TextSegment};
use crate::error::{Error, Result};
use crate::model::{SciModel, StageSettings};
use crate::rng;
use crate::synthdata::{Dataset, PkSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SseConfig {
    /// Learnable context tokens per prompt (`M`).
    pub context_len: usize,
    pub lambda1: f32,
    pub lambda2: f32,
    /// Multiplier on cosine similarity in the contrastive losses.
    pub logit_scale: f32,
}

impl Default for SseConfig {
    fn default() -> Self {
        Self {
            context_len: 4,
            lambda1: 0.7,
            lambda2: 0.3,
            logit_scale: 1.0 / 0.07,
        }
    }
}

impl SseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 {
            return Err(Error::config("sse.context_len", "must be at least 1"));
        }
        if !(self.lambda1 >= 0.0) {
            return Err(Error::config("sse.lambda1", "must be non-negative"));
        }
        if !(self.lambda2 >= 0.0) {
            return Err(Error::config("sse.lambda2", "must be non-negative"));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::config("sse.logit_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn weights(&self) -> SseLossWeights {
        SseLossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SseLossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
}

impl Default for SseLossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.7,
            lambda2: 0.3,
        }
    }
}

/// Training identities and outfits, each mapped to a dense class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    /// Raw pid of each identity class, ascending.
    pub pids: Vec<u32>,
    /// Raw clothes id of each clothes class, ascending.
    pub clothes: Vec<u32>,
    /// Identity class owning each clothes class.
    pub clothes_pid: Vec<usize>,
    /// Clothes classes of each identity class.
    pub pid_clothes: Vec<Vec<usize>>,
}

impl LabelSpace {
    pub fn num_pids(&self) -> usize {
        self.pids.len()
    }

    pub fn num_clothes(&self) -> usize {
        self.clothes.len()
    }

    pub fn pid_index(&self, pid: u32) -> Option<usize> {
        self.pids.binary_search(&pid).ok()
    }

    pub fn clothes_index(&self, clothes_id: u32) -> Option<usize> {
        self.clothes.binary_search(&clothes_id).ok()
    }
}

/// Builds the identity and clothes class spaces from `(pid, clothes_id)`
/// labels. Each clothes id must belong to exactly one pid.
pub fn clo_pairing(labels: &[(u32, u32)]) -> Result<LabelSpace> {
    let mut owner: BTreeMap<u32, u32> = BTreeMap::new();
    for (pid, clo) in labels {
        match owner.get(clo) {
            Some(p) if p != pid => {
                return Err(Error::Data(format!(
                    "clothes id {clo} is worn by pids {p} and {pid}"
                )))
            }
            _ => {
                owner.insert(*clo, *pid);
            }
        }
    }
    let mut pids: Vec<u32> = owner.values().copied().collect();
    pids.sort_unstable();
    pids.dedup();
    let clothes: Vec<u32> = owner.keys().copied().collect();
    let clothes_pid: Vec<usize> = owner
        .values()
        .map(|p| pids.binary_search(p).expect("pid collected above"))
        .collect();
    let mut pid_clothes = vec![Vec::new(); pids.len()];
    for (c, p) in clothes_pid.iter().enumerate() {
        pid_clothes[*p].push(c);
    }
    Ok(LabelSpace {
        pids,
        clothes,
        clothes_pid,
        pid_clothes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Identity,
    Clothing,
}

/// One position of a prompt: a fixed vocabulary token or a learnable slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptToken {
    Fixed(usize),
    Context {
        kind: PromptKind,
        class: usize,
        slot: usize,
    },
}

fn ids(words: &[&str]) -> Vec<usize> {
    words
        .iter()
        .map(|w| token_id(w).expect("template word in vocabulary"))
        .collect()
}

enum Piece {
    Fixed(usize),
    Context(Var),
}

/// Learnable context tokens for every identity and every outfit.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub context_len: usize,
    pub num_pids: usize,
    pub num_clothes: usize,
    pub token_dim: usize,
    id_contexts: ParamId,
    clo_contexts: ParamId,
    id_prefix: Vec<usize>,
    id_suffix: Vec<usize>,
    clo_prefix: Vec<usize>,
    clo_suffix: Vec<usize>,
}

impl PromptBank {
    pub fn new(
        store: &mut ParamStore,
        num_pids: usize,
        num_clothes: usize,
        context_len: usize,
        token_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_pids == 0 || num_clothes == 0 || context_len == 0 {
            return Err(Error::contract("prompt bank needs identities, outfits and context slots"));
        }
        let mut r = rng::stream(seed, "prompt_bank");
        let id_contexts = store.add(
            "prompt.id_contexts",
            Tensor::randn(vec![num_pids, context_len, token_dim], 0.02, &mut r),
        );
        let clo_contexts = store.add(
            "prompt.clo_contexts",
            Tensor::randn(vec![num_clothes, context_len, token_dim], 0.02, &mut r),
        );
        Ok(Self {
            context_len,
            num_pids,
            num_clothes,
            token_dim,
            id_contexts,
            clo_contexts,
            id_prefix: ids(&["<sot>", "a", "photo", "of", "a"]),
            id_suffix: ids(&["person", ".", "<eot>"]),
            clo_prefix: ids(&["<sot>", "a", "photo", "of", "the"]),
            clo_suffix: ids(&["clothes", ".", "<eot>"]),
        })
    }

    pub fn id_contexts(&self) -> ParamId {
        self.id_contexts
    }

    pub fn clo_contexts(&self) -> ParamId {
        self.clo_contexts
    }

    fn template(&self, kind: PromptKind, class: usize) -> Vec<PromptToken> {
        let (prefix, suffix) = match kind {
            PromptKind::Identity => (&self.id_prefix, &self.id_suffix),
            PromptKind::Clothing => (&self.clo_prefix, &self.clo_suffix),
        };
        let mut seq: Vec<PromptToken> = prefix.iter().map(|t| PromptToken::Fixed(*t)).collect();
        seq.extend((0..self.context_len).map(|slot| PromptToken::Context { kind, class, slot }));
        seq.extend(suffix.iter().map(|t| PromptToken::Fixed(*t)));
        seq
    }

    pub fn id_prompt(&self, pid: usize) -> Result<Vec<PromptToken>> {
        if pid >= self.num_pids {
            return Err(Error::contract(format!("identity class {pid} out of range")));
        }
        Ok(self.template(PromptKind::Identity, pid))
    }

    pub fn clo_prompt(&self, clothes: usize) -> Result<Vec<PromptToken>> {
        if clothes >= self.num_clothes {
            return Err(Error::contract(format!("clothes class {clothes} out of range")));
        }
        Ok(self.template(PromptKind::Clothing, clothes))
    }

    /// "a photo of a [X]... person." and "a photo of the [X]... clothes."
    pub fn build_prompts(&self, pid: usize, clothes: usize) -> Result<(Vec<PromptToken>, Vec<PromptToken>)> {
        Ok((self.id_prompt(pid)?, self.clo_prompt(clothes)?))
    }

    /// Text feature `[text_dim]` of a prompt.
    pub fn encode(
        &self,
        text: &TextEncoder,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[PromptToken],
    ) -> Result<Var> {
        let mut fixed_runs: Vec<Vec<usize>> = Vec::new();
        let mut plan: Vec<Piece> = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match tokens[i] {
                PromptToken::Fixed(_) => {
                    let mut run = Vec::new();
                    while let Some(PromptToken::Fixed(t)) = tokens.get(i) {
                        run.push(*t);
                        i += 1;
                    }
                    plan.push(Piece::Fixed(fixed_runs.len()));
                    fixed_runs.push(run);
                }
                PromptToken::Context { kind, .. } => {
                    let (param, count) = match kind {
                        PromptKind::Identity => (self.id_contexts, self.num_pids),
                        PromptKind::Clothing => (self.clo_contexts, self.num_clothes),
                    };
                    let mut rows = Vec::new();
                    while let Some(PromptToken::Context { kind: k, class, slot }) = tokens.get(i) {
                        if *k != kind {
                            break;
                        }
                        if *class >= count || *slot >= self.context_len {
                            return Err(Error::contract("context token out of range"));
                        }
                        rows.push(class * self.context_len + slot);
                        i += 1;
                    }
                    let table = g.param(store, param);
                    let flat = g.reshape(table, vec![count * self.context_len, self.token_dim])?;
                    plan.push(Piece::Context(g.gather_rows(flat, &rows)?));
                }
            }
        }
        let segments: Vec<TextSegment<'_>> = plan
            .iter()
            .map(|p| match p {
                Piece::Fixed(run) => TextSegment::Ids(&fixed_runs[*run]),
                Piece::Context(v) => TextSegment::Embedded(*v),
            })
            .collect();
        text.encode(g, store, &segments)
    }
}

/// Row-wise projection of `clo` onto `id`: `(<clo,id>/|id|^2) id`.
pub fn project_rows(g: &mut Graph, clo: Var, id: Var) -> Result<Var> {
    let prod = g.mul(clo, id)?;
    let dot = g.sum_last_axis(prod)?;
    let sq = g.mul(id, id)?;
    let sq = g.sum_last_axis(sq)?;
    if g.values(sq).iter().any(|v| *v == 0.0) {
        return Err(Error::DegenerateVector("project"));
    }
    let coef = g.div(dot, sq)?;
    g.mul_col(id, coef)
}

/// `f_ort = f_id - f_proj`, row-wise.
pub fn orthogonalize_rows(g: &mut Graph, id: Var, proj: Var) -> Result<Var> {
    g.sub(id, proj)
}

fn as_row(g: &mut Graph, t: &Tensor) -> Result<Var> {
    let v = g.constant(t);
    g.reshape(v, vec![1, t.numel()])
}

/// Projection of `f_clo` onto `f_id` for single vectors.
pub fn project(f_clo: &Tensor, f_id: &Tensor) -> Result<Tensor> {
    if f_clo.numel() != f_id.numel() {
        return Err(Error::Dimension {
            op: "project",
            lhs: f_clo.shape().to_vec(),
            rhs: f_id.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let clo = as_row(&mut g, f_clo)?;
    let id = as_row(&mut g, f_id)?;
    let p = project_rows(&mut g, clo, id)?;
    g.value(p).reshape(f_id.shape().to_vec())
}

pub fn orthogonalize(f_id: &Tensor, f_proj: &Tensor) -> Result<Tensor> {
    if f_id.shape() != f_proj.shape() {
        return Err(Error::Dimension {
            op: "orthogonalize",
            lhs: f_id.shape().to_vec(),
            rhs: f_proj.shape().to_vec(),
        });
    }
    let data = f_id.data().iter().zip(f_proj.data()).map(|(a, b)| a - b).collect();
    Tensor::new(f_id.shape().to_vec(), data)
}

/// Per-row cosine similarity of two `[N x d]` matrices.
pub fn cosine_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    let prod = g.mul(an, bn)?;
    g.sum_last_axis(prod)
}

/// `scale * cos(a_i, b_k)` for every pair, `[N x K]`.
pub fn scaled_cosine_logits(g: &mut Graph, a: Var, b: Var, scale: f64) -> Result<Var> {
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    let s = g.matmul_t(an, bn)?;
    Ok(g.scale(s, scale))
}

/// Batch mean of `λ1 (1 - cos(f_ort, f_id)) + λ2 cos(f_ort, f_clo)`.
pub fn sse_similarity_loss(
    g: &mut Graph,
    f_ort: Var,
    f_id: Var,
    f_clo: Var,
    w: SseLossWeights,
) -> Result<Var> {
    let sim_id = cosine_rows(g, f_ort, f_id)?;
    let sim_clo = cosine_rows(g, f_ort, f_clo)?;
    let sim_id = g.mean(sim_id);
    let sim_clo = g.mean(sim_clo);
    let a = g.scale(sim_id, -f64::from(w.lambda1));
    let b = g.scale(sim_clo, f64::from(w.lambda2));
    let s = g.add(a, b)?;
    Ok(g.add_scalar(s, f64::from(w.lambda1)))
}

fn one_hot(rows: usize, cols: usize, labels: impl Iterator<Item = usize>) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    for (r, c) in labels.enumerate() {
        t.data_mut()[r * cols + c] = 1.0;
    }
    t
}

/// Image-to-text contrastive loss: row `i` of `texts` pairs with row `i` of
/// `images`, every other batch row is a negative.
pub fn i2t_loss(g: &mut Graph, images: Var, texts: Var, scale: f64) -> Result<Var> {
    let n = g.shape(images)[0];
    if n == 0 {
        return Err(Error::contract("i2t_loss on an empty batch"));
    }
    if g.shape(texts)[0] != n {
        return Err(Error::Dimension {
            op: "i2t_loss",
            lhs: g.shape(images).to_vec(),
            rhs: g.shape(texts).to_vec(),
        });
    }
    let logits = scaled_cosine_logits(g, images, texts, scale)?;
    g.cross_entropy(logits, &one_hot(n, n, 0..n))
}

/// Text-to-image contrastive loss with multiple positives. For each batch
/// entry `i`, text `table[labels[i]]` is contrasted against every image in
/// the batch and the log-probabilities of all images sharing that label are
/// averaged; the result is averaged over batch entries.
pub fn t2i_loss(g: &mut Graph, images: Var, labels: &[usize], table: Var, scale: f64) -> Result<Var> {
    let n = g.shape(images)[0];
    let t = g.shape(table)[0];
    if n == 0 || labels.len() != n {
        return Err(Error::contract("t2i_loss needs one label per image"));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= t) {
        return Err(Error::contract(format!("t2i label {bad} outside text table of {t}")));
    }
    let logits = scaled_cosine_logits(g, table, images, scale)?;
    let log_p = g.log_softmax(logits)?;
    let mut at = Vec::new();
    let mut weights = Vec::new();
    for y in labels {
        let positives: Vec<usize> = (0..n).filter(|p| labels[*p] == *y).collect();
        let w = -1.0 / (positives.len() as f64 * n as f64);
        for p in positives {
            at.push((*y, p));
            weights.push(w);
        }
    }
    let picked = g.pick(log_p, at)?;
    let len = weights.len();
    let w = g.constant_f64(vec![len], weights)?;
    let terms = g.mul(picked, w)?;
    Ok(g.sum(terms))
}

/// Cached text features, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureSet {
    pub f_id: Tensor,
    pub f_clo: Tensor,
    pub f_proj: Tensor,
    pub f_ort: Tensor,
}

impl TextFeatureSet {
    pub fn num_pids(&self) -> usize {
        self.f_id.rows()
    }
}

/// Identity-level `(f_proj, f_ort)` rows for the identities in `pids` given
/// their id features `[P x d]` and a clothes feature table with a row lookup.
fn identity_ort(
    g: &mut Graph,
    f_id: Var,
    f_clo: Var,
    clo_rows: &[Vec<usize>],
) -> Result<(Var, Var)> {
    let mut means = Vec::with_capacity(clo_rows.len());
    for rows in clo_rows {
        let sel = g.gather_rows(f_clo, rows)?;
        means.push(g.mean_rows(sel)?);
    }
    let clo_mean = g.concat_rows(&means)?;
    let proj = project_rows(g, clo_mean, f_id)?;
    let ort = orthogonalize_rows(g, f_id, proj)?;
    Ok((proj, ort))
}

/// Per-term values of one stage-1 batch, each summed over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptLossParts {
    pub i2t: f64,
    pub t2i: f64,
    pub sim: f64,
    pub total: f64,
}

/// Stage-1 objective on one batch: `Σ_i (L_i2t + L_t2i + L_sim)`.
///
/// `image_features` holds the frozen global image features `[N x d]`;
/// `pids` and `clothes` are class indices per row.
pub fn prompt_loss(
    g: &mut Graph,
    model: &SciModel,
    image_features: &Tensor,
    pids: &[usize],
    clothes: &[usize],
) -> Result<(Var, PromptLossParts)> {
    let n = pids.len();
    if n == 0 || clothes.len() != n || image_features.rows() != n {
        return Err(Error::contract("prompt_loss needs one pid and clothes label per feature row"));
    }
    let store = &model.store;
    let cfg = &model.config.sse;
    let scale = f64::from(cfg.logit_scale);
    let use_sse = model.config.variant.use_sse;

    let mut batch_pids: Vec<usize> = pids.to_vec();
    batch_pids.sort_unstable();
    batch_pids.dedup();
    let local_pid: Vec<usize> = pids
        .iter()
        .map(|p| batch_pids.binary_search(p).expect("collected above"))
        .collect();

    let mut id_rows = Vec::with_capacity(batch_pids.len());
    for p in &batch_pids {
        let prompt = model.bank.id_prompt(*p)?;
        id_rows.push(model.bank.encode(&model.text, g, store, &prompt)?);
    }
    let f_id = g.concat_rows(&id_rows)?;
    let v = g.constant(image_features);

    let mut parts = PromptLossParts::default();
    let f_ort_table;
    let mut sim = None;
    if use_sse {
        let mut classes: Vec<usize> = batch_pids
            .iter()
            .flat_map(|p| model.labels.pid_clothes[*p].iter().copied())
            .chain(clothes.iter().copied())
            .collect();
        classes.sort_unstable();
        classes.dedup();
        let mut clo_rows = Vec::with_capacity(classes.len());
        for c in &classes {
            let prompt = model.bank.clo_prompt(*c)?;
            clo_rows.push(model.bank.encode(&model.text, g, store, &prompt)?);
        }
        let f_clo = g.concat_rows(&clo_rows)?;
        let lookup = |c: &usize| classes.binary_search(c).expect("collected above");
        let per_pid: Vec<Vec<usize>> = batch_pids
            .iter()
            .map(|p| model.labels.pid_clothes[*p].iter().map(lookup).collect())
            .collect();
        let (_, f_ort) = identity_ort(g, f_id, f_clo, &per_pid)?;
        f_ort_table = f_ort;

        let ort_b = g.gather_rows(f_ort, &local_pid)?;
        let id_b = g.gather_rows(f_id, &local_pid)?;
        let clo_local: Vec<usize> = clothes.iter().map(lookup).collect();
        let clo_b = g.gather_rows(f_clo, &clo_local)?;
        let s = sse_similarity_loss(g, ort_b, id_b, clo_b, cfg.weights())?;
        parts.sim = g.scalar(s) * n as f64;
        sim = Some(s);
    } else {
        f_ort_table = f_id;
    }

    let ort_b = g.gather_rows(f_ort_table, &local_pid)?;
    let i2t = i2t_loss(g, v, ort_b, scale)?;
    let t2i = t2i_loss(g, v, &local_pid, f_ort_table, scale)?;
    parts.i2t = g.scalar(i2t) * n as f64;
    parts.t2i = g.scalar(t2i) * n as f64;
    let mut per_item = g.add(i2t, t2i)?;
    if let Some(s) = sim {
        per_item = g.add(per_item, s)?;
    }
    let total = g.scale(per_item, n as f64);
    parts.total = g.scalar(total);
    Ok((total, parts))
}

/// Encodes every identity and outfit prompt and derives the cached
/// identity-level `f_proj` / `f_ort`. Without SSE, `f_ort = f_id`.
pub fn compute_text_features(model: &SciModel) -> Result<TextFeatureSet> {
    let store = &model.store;
    let mut g = Graph::new();
    let mut id_rows = Vec::new();
    for p in 0..model.bank.num_pids {
        let prompt = model.bank.id_prompt(p)?;
        id_rows.push(model.bank.encode(&model.text, &mut g, store, &prompt)?);
    }
    let mut clo_rows = Vec::new();
    for c in 0..model.bank.num_clothes {
        let prompt = model.bank.clo_prompt(c)?;
        clo_rows.push(model.bank.encode(&model.text, &mut g, store, &prompt)?);
    }
    let f_id = g.concat_rows(&id_rows)?;
    let f_clo = g.concat_rows(&clo_rows)?;
    let (f_proj, f_ort) = if model.config.variant.use_sse {
        let (p, o) = identity_ort(&mut g, f_id, f_clo, &model.labels.pid_clothes)?;
        (g.value(p), g.value(o))
    } else {
        let id = g.value(f_id);
        (Tensor::zeros(id.shape().to_vec()), id)
    };
    if !f_ort.is_finite() {
        return Err(Error::Numeric("compute_text_features"));
    }
    Ok(TextFeatureSet {
        f_id: g.value(f_id),
        f_clo: g.value(f_clo),
        f_proj,
        f_ort,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub lr: f32,
    /// Batch-mean of each summed term.
    pub i2t: f64,
    pub t2i: f64,
    pub sim: f64,
    pub total: f64,
}

/// Frozen global features of the given samples, `[N x d]`.
pub fn frozen_image_features(model: &SciModel, dataset: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(indices.len());
    for i in indices {
        let mut g = Graph::new();
        let (_, global) = model.visual.encode(&mut g, &model.store, &dataset.samples[*i].image)?;
        rows.push(g.value(global).into_data());
    }
    Tensor::from_rows(&rows)
}

/// Stage 1: optimise the context tokens against frozen encoders, then cache
/// the text features.
pub fn train_stage1(
    model: &mut SciModel,
    dataset: &Dataset,
    settings: &StageSettings,
) -> Result<Vec<Stage1Epoch>> {
    if !model.text.is_frozen() || !model.visual.is_frozen() {
        return Err(Error::contract("stage 1 requires both encoders frozen"));
    }
    let mut trainable = vec![model.bank.id_contexts()];
    if model.config.variant.use_sse {
        trainable.push(model.bank.clo_contexts());
    }
    let mut log = Vec::with_capacity(settings.epochs);
    if settings.epochs > 0 {
        let sampler = PkSampler::new(dataset);
        let train_idx: Vec<usize> = dataset.indices(crate::synthdata::Split::Train);
        let features = frozen_image_features(model, dataset, &train_idx)?;
        let feature_row: BTreeMap<usize, usize> =
            train_idx.iter().enumerate().map(|(r, i)| (*i, r)).collect();
        let batches = (sampler.num_samples() / (settings.p * settings.k)).max(1);
        let mut r = rng::stream(settings.seed, "stage1.sampler");
        let mut adam = AdamState::new(
            &model.store,
            trainable.clone(),
            AdamConfig {
                lr: settings.schedule.base_lr,
                ..Default::default()
            },
        );
        for epoch in 0..settings.epochs {
            adam.lr = settings.schedule.lr_at(epoch);
            let mut sums = PromptLossParts::default();
            for _ in 0..batches {
                let batch = sampler.sample(settings.p, settings.k, &mut r)?;
                let (pids, clothes) = model.batch_labels(dataset, &batch.indices)?;
                let rows: Vec<Vec<f32>> = batch
                    .indices
                    .iter()
                    .map(|i| features.row(feature_row[i]).to_vec())
                    .collect();
                let feats = Tensor::from_rows(&rows)?;
                let mut g = Graph::new();
                let (loss, parts) = prompt_loss(&mut g, model, &feats, &pids, &clothes)?;
                if !parts.total.is_finite() {
                    return Err(Error::Numeric("stage 1 loss"));
                }
                g.backward_into(loss, &mut model.store)?;
                drop(g);
                adam.apply(&mut model.store)?;
                model.store.zero_grad();
                sums.i2t += parts.i2t;
                sums.t2i += parts.t2i;
                sums.sim += parts.sim;
                sums.total += parts.total;
            }
            let nb = batches as f64;
            log.push(Stage1Epoch {
                epoch: epoch + 1,
                lr: adam.lr,
                i2t: sums.i2t / nb,
                t2i: sums.t2i / nb,
                sim: sums.sim / nb,
                total: sums.total / nb,
            });
        }
        model.optim_stage1 = Some(adam);
    }
    model.text_cache = Some(compute_text_features(model)?);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn project_examples() {
        let p = project(&t(&[0.0, 3.0]), &t(&[2.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0]);
        let f = t(&[0.3, -1.0, 2.0]);
        let p = project(&f, &f).unwrap();
        for (a, b) in p.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let p = project(&t(&[1.0, 1.0]), &t(&[2.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
        assert!(matches!(
            project(&t(&[1.0, 1.0]), &t(&[0.0, 0.0])),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn orthogonalize_examples() {
        let f = t(&[2.0, 0.0]);
        assert_eq!(orthogonalize(&f, &t(&[0.0, 0.0])).unwrap(), f);
        assert_eq!(orthogonalize(&f, &f).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(orthogonalize(&f, &t(&[1.0, 0.0])).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn pairing_counts() {
        let two_by_two = clo_pairing(&[(0, 0), (0, 1), (1, 2), (1, 3), (0, 0)]).unwrap();
        assert_eq!(two_by_two.num_clothes(), 4);
        assert_eq!(two_by_two.pid_clothes, vec![vec![0, 1], vec![2, 3]]);
        let single = clo_pairing(&[(5, 50), (7, 70), (9, 90)]).unwrap();
        assert_eq!(single.num_clothes(), single.num_pids());
        assert!(matches!(clo_pairing(&[(0, 1), (2, 1)]), Err(Error::Data(_))));
    }

    #[test]
    fn similarity_loss_limits() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let perp = g.constant(&Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, 0.0]]).unwrap());
        let w = SseLossWeights::default();
        let zero = sse_similarity_loss(&mut g, a, a, perp, w).unwrap();
        assert!(g.scalar(zero).abs() < 1e-12);
        let one = sse_similarity_loss(&mut g, a, perp, a, w).unwrap();
        assert!((g.scalar(one) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_degenerate_sizes() {
        let mut g = Graph::new();
        let v = g.constant(&Tensor::from_rows(&[vec![0.2, -0.4, 1.0]]).unwrap());
        let f = g.constant(&Tensor::from_rows(&[vec![1.0, 0.5, 0.1]]).unwrap());
        let l = i2t_loss(&mut g, v, f, 14.0).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
        let l = t2i_loss(&mut g, v, &[0], f, 14.0).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
        let empty = g.constant_f64(vec![0, 3], vec![]).unwrap();
        assert!(i2t_loss(&mut g, empty, empty, 1.0).is_err());
    }
}
