//! Text-guided refinement of the visual feature map and the stage-2 loss
//! stack.
//!
//! The refinement chain on a projected map `F_ori [N_pix x d]`:
//!
//! ```text
//! F_con  = (θ(F) φ(F)ᵀ / N_pix) g(F)
//! F_res  = W(F_con) + F_ori
//! F_out  = F_res + softmax(F_res F_ortᵀ / √d) F_ort
//! F_diff = MLP(LN(F_out))
//! F_img  = F_ori + α ⊙ F_diff
//! ```
//!
//! `W` and `α` start at zero, so a fresh module returns `F_ori` unchanged.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::encoders::LayerNormParams;
use crate::error::{Error, Result};
use crate::model::{SciModel, StageSettings};
use crate::rng;
use crate::sse::{scaled_cosine_logits, LabelSpace};
use crate::synthdata::{Dataset, PkSampler, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Inner width of the non-local block; 0 means half the feature width.
    pub nonlocal_inner: usize,
    pub mlp_ratio: usize,
    /// Init std of the refiner's output layer. 0 gives an all-zero layer.
    pub mlp_out_init_std: f32,
    /// Label smoothing for the image-to-text identity loss.
    pub smoothing: f32,
    /// Temperature of the clothes classifier.
    pub cal_tau: f32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nonlocal_inner: 0,
            mlp_ratio: 4,
            mlp_out_init_std: 0.02,
            smoothing: 0.1,
            cal_tau: 1.0 / 16.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mlp_ratio == 0 {
            return Err(Error::config("sim.mlp_ratio", "must be positive"));
        }
        if !(self.mlp_out_init_std >= 0.0 && self.mlp_out_init_std.is_finite()) {
            return Err(Error::config("sim.mlp_out_init_std", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("sim.smoothing", "must lie in [0, 1)"));
        }
        if !(self.cal_tau > 0.0 && self.cal_tau.is_finite()) {
            return Err(Error::config("sim.cal_tau", "must be positive"));
        }
        Ok(())
    }

    pub fn inner_dim(&self, d: usize) -> usize {
        if self.nonlocal_inner == 0 {
            (d / 2).max(1)
        } else {
            self.nonlocal_inner
        }
    }
}

fn dense(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, r: &mut rng::Rng) -> ParamId {
    let std = 1.0 / (fan_in as f32).sqrt();
    store.add(name, Tensor::randn(vec![fan_in, fan_out], std, r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonLocalBlock {
    pub dim: usize,
    pub inner: usize,
    theta: ParamId,
    phi: ParamId,
    g: ParamId,
    w: ParamId,
}

impl NonLocalBlock {
    pub fn new(store: &mut ParamStore, dim: usize, inner: usize, r: &mut rng::Rng) -> Self {
        Self {
            dim,
            inner,
            theta: dense(store, "sim.nonlocal.theta", dim, inner, r),
            phi: dense(store, "sim.nonlocal.phi", dim, inner, r),
            g: dense(store, "sim.nonlocal.g", dim, inner, r),
            w: store.add("sim.nonlocal.w", Tensor::zeros(vec![inner, dim])),
        }
    }

    pub fn w(&self) -> ParamId {
        self.w
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_ori: Var) -> Result<Var> {
        let shape = g.shape(f_ori).to_vec();
        if shape.len() != 2 || shape[1] != self.dim || shape[0] == 0 {
            return Err(Error::Dimension {
                op: "nonlocal_forward",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let n = shape[0] as f64;
        let theta = g.param(store, self.theta);
        let phi = g.param(store, self.phi);
        let gw = g.param(store, self.g);
        let w = g.param(store, self.w);
        let t = g.matmul(f_ori, theta)?;
        let p = g.matmul(f_ori, phi)?;
        let v = g.matmul(f_ori, gw)?;
        let affinity = g.matmul_t(t, p)?;
        let affinity = g.scale(affinity, 1.0 / n);
        let con = g.matmul(affinity, v)?;
        let out = g.matmul(con, w)?;
        g.add(out, f_ori)
    }
}

/// `F_res + softmax(F_res F_ortᵀ / √d) F_ort`.
pub fn text_guided_attention(g: &mut Graph, f_res: Var, f_ort: Var) -> Result<Var> {
    let (rs, ts) = (g.shape(f_res).to_vec(), g.shape(f_ort).to_vec());
    if rs.len() != 2 || ts.len() != 2 || rs[1] != ts[1] || ts[0] == 0 {
        return Err(Error::contract(format!(
            "text-guided attention needs [N x d] and [T x d] with T >= 1, got {rs:?} and {ts:?}"
        )));
    }
    let scores = g.matmul_t(f_res, f_ort)?;
    let scores = g.scale(scores, 1.0 / (rs[1] as f64).sqrt());
    let a = g.softmax(scores, 1)?;
    let ctx = g.matmul(a, f_ort)?;
    g.add(f_res, ctx)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossAttnRefiner {
    pub dim: usize,
    norm: LayerNormParams,
    fc1: ParamId,
    b1: ParamId,
    fc2: ParamId,
    b2: ParamId,
    alpha: ParamId,
}

impl CrossAttnRefiner {
    pub fn new(store: &mut ParamStore, dim: usize, cfg: &SimConfig, r: &mut rng::Rng) -> Self {
        let hidden = dim * cfg.mlp_ratio;
        let norm = LayerNormParams::new(store, "sim.refine.norm", dim);
        let fc1 = dense(store, "sim.refine.fc1", dim, hidden, r);
        let b1 = store.add("sim.refine.b1", Tensor::zeros(vec![hidden]));
        let fc2 = store.add(
            "sim.refine.fc2",
            Tensor::randn(vec![hidden, dim], cfg.mlp_out_init_std, r),
        );
        let b2 = store.add("sim.refine.b2", Tensor::zeros(vec![dim]));
        let alpha = store.add("sim.alpha", Tensor::zeros(vec![dim]));
        Self {
            dim,
            norm,
            fc1,
            b1,
            fc2,
            b2,
            alpha,
        }
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }

    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.fc2, self.b2)
    }

    /// `F_diff = MLP(LN(F_out))`.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, f_out: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, f_out)?;
        let fc1 = g.param(store, self.fc1);
        let b1 = g.param(store, self.b1);
        let fc2 = g.param(store, self.fc2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(h, fc1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, fc2)?;
        g.add_row(h, b2)
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, f_ori: Var, f_diff: Var) -> Result<Var> {
        let alpha = g.param(store, self.alpha);
        fuse(g, f_ori, f_diff, alpha)
    }
}

/// `F_ori + α ⊙ F_diff`, `α` broadcast over rows.
pub fn fuse(g: &mut Graph, f_ori: Var, f_diff: Var, alpha: Var) -> Result<Var> {
    let gated = g.mul_row(f_diff, alpha)?;
    g.add(f_ori, gated)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimBlocks {
    pub nonlocal: NonLocalBlock,
    pub refiner: CrossAttnRefiner,
}

impl SimBlocks {
    pub fn new(store: &mut ParamStore, dim: usize, cfg: &SimConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "sim");
        let nonlocal = NonLocalBlock::new(store, dim, cfg.inner_dim(dim), &mut r);
        let refiner = CrossAttnRefiner::new(store, dim, cfg, &mut r);
        Self { nonlocal, refiner }
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix("sim")
    }

    /// Full refinement chain, `F_ori -> F_img`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_ori: Var, f_ort: Var) -> Result<Var> {
        let f_res = self.nonlocal.forward(g, store, f_ori)?;
        let f_out = text_guided_attention(g, f_res, f_ort)?;
        let f_diff = self.refiner.refine(g, store, f_out)?;
        self.refiner.fuse(g, store, f_ori, f_diff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdHead {
    pub num_pids: usize,
    weight: ParamId,
}

impl IdHead {
    pub fn new(store: &mut ParamStore, num_pids: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "id_head");
        let weight = store.add(
            "head.id.weight",
            Tensor::randn(vec![num_pids, dim], 1.0 / (dim as f32).sqrt(), &mut r),
        );
        Self { num_pids, weight }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, feats: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        g.matmul_t(feats, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalHead {
    pub tau: f32,
    /// Identity class of each clothes class.
    pub clothes_pid: Vec<usize>,
    weight: ParamId,
}

impl CalHead {
    pub fn new(store: &mut ParamStore, labels: &LabelSpace, dim: usize, tau: f32, seed: u64) -> Self {
        let mut r = rng::stream(seed, "cal_head");
        let weight = store.add(
            "head.cal.weight",
            Tensor::randn(vec![labels.num_clothes(), dim], 1.0 / (dim as f32).sqrt(), &mut r),
        );
        Self {
            tau,
            clothes_pid: labels.clothes_pid.clone(),
            weight,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn num_clothes(&self) -> usize {
        self.clothes_pid.len()
    }

    /// Cosine logits over clothes classes divided by `τ`, `[N x num_clothes]`.
    /// `weight` is the bound classifier matrix, possibly detached.
    pub fn logits(&self, g: &mut Graph, feats: Var, weight: Var) -> Result<Var> {
        scaled_cosine_logits(g, feats, weight, 1.0 / f64::from(self.tau))
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::contract(format!("{what}: {} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= classes) {
        return Err(Error::contract(format!("{what}: label {bad} outside {classes} classes")));
    }
    Ok(())
}

fn smoothed_targets(labels: &[usize], classes: usize, eps: f32) -> Tensor {
    let eps = f64::from(eps);
    let off = eps / classes as f64;
    let mut t = Tensor::full(vec![labels.len(), classes], off as f32);
    for (r, y) in labels.iter().enumerate() {
        t.data_mut()[r * classes + y] = (1.0 - eps + off) as f32;
    }
    t
}

/// Batch-mean softmax cross-entropy of identity logits.
pub fn id_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract("id_loss expects non-empty [N x C] logits"));
    }
    check_labels(labels, shape[0], shape[1], "id_loss")?;
    g.cross_entropy(logits, &smoothed_targets(labels, shape[1], 0.0))
}

/// Clothes-adversarial loss and the number of samples skipped because their
/// identity owns a single clothes class.
pub struct CalLoss {
    pub loss: Var,
    pub skipped: usize,
}

/// For each sample, the targets are the other outfits of its own identity
/// (uniform weight) and the negatives are every outfit of other identities:
/// `-Σ_c q(c) [l_c - lse({l_c} ∪ l_{S⁻})]`, averaged over the batch.
pub fn cal_loss(
    g: &mut Graph,
    feats: Var,
    pids: &[usize],
    clothes: &[usize],
    head: &CalHead,
    weight: Var,
) -> Result<CalLoss> {
    let n = g.shape(feats)[0];
    let q = head.num_clothes();
    check_labels(clothes, n, q, "cal_loss")?;
    if pids.len() != n {
        return Err(Error::contract("cal_loss needs one pid per row"));
    }
    for (p, c) in pids.iter().zip(clothes) {
        if head.clothes_pid[*c] != *p {
            return Err(Error::contract(format!(
                "clothes class {c} does not belong to identity {p}"
            )));
        }
    }
    let logits = head.logits(g, feats, weight)?;
    let mut subsets = Vec::new();
    let mut at = Vec::new();
    let mut weights = Vec::new();
    let mut skipped = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..q)
            .filter(|c| head.clothes_pid[*c] == pids[i] && *c != clothes[i])
            .collect();
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        let neg: Vec<usize> = (0..q).filter(|c| head.clothes_pid[*c] != pids[i]).collect();
        let w = 1.0 / (pos.len() as f64 * n as f64);
        for c in pos {
            let mut set = Vec::with_capacity(neg.len() + 1);
            set.push(c);
            set.extend_from_slice(&neg);
            subsets.push((i, set));
            at.push((i, c));
            weights.push(w);
        }
    }
    if weights.is_empty() {
        let loss = g.constant_f64(vec![], vec![0.0])?;
        return Ok(CalLoss { loss, skipped });
    }
    let lse = g.log_sum_exp_subsets(logits, subsets)?;
    let picked = g.pick(logits, at)?;
    let terms = g.sub(lse, picked)?;
    let len = weights.len();
    let w = g.constant_f64(vec![len], weights)?;
    let terms = g.mul(terms, w)?;
    Ok(CalLoss {
        loss: g.sum(terms),
        skipped,
    })
}

/// Cross-entropy of image-to-text cosine logits against label-smoothed
/// identity targets over the whole text table.
pub fn i2tce_loss(
    g: &mut Graph,
    feats: Var,
    table: Var,
    labels: &[usize],
    eps: f32,
    scale: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::contract(format!("smoothing {eps} outside [0, 1)")));
    }
    let n = g.shape(feats)[0];
    let t = g.shape(table)[0];
    if n == 0 {
        return Err(Error::contract("i2tce_loss on an empty batch"));
    }
    check_labels(labels, n, t, "i2tce_loss")?;
    let logits = scaled_cosine_logits(g, feats, table, scale)?;
    g.cross_entropy(logits, &smoothed_targets(labels, t, eps))
}

/// Pooled visual features `[N x d]` of a batch of images, refined by SIM
/// when `f_ort` is given.
pub fn pooled_features(
    g: &mut Graph,
    model: &SciModel,
    images: &[&Tensor],
    f_ort: Option<Var>,
) -> Result<Var> {
    let store = &model.store;
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let map = model.visual.feature_map(g, store, img)?;
        let f_ori = model.visual.project(g, store, map)?;
        let f_img = match f_ort {
            Some(t) => model.sim.forward(g, store, f_ori, t)?,
            None => f_ori,
        };
        rows.push(model.visual.pool(g, f_img)?);
    }
    g.concat_rows(&rows)
}

/// Values of one stage-2 main step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Parts {
    pub id: f64,
    pub cal: f64,
    pub i2tce: f64,
    pub total: f64,
    pub cal_skipped: usize,
}

/// Stage-2 objective `L_id + L_cal + L_i2tce` on a batch. The clothes
/// classifier enters detached.
pub fn stage2_loss(
    g: &mut Graph,
    model: &SciModel,
    images: &[&Tensor],
    pids: &[usize],
    clothes: &[usize],
) -> Result<(Var, Stage2Parts)> {
    let cache = model
        .text_cache
        .as_ref()
        .ok_or_else(|| Error::contract("stage 2 needs cached text features"))?;
    let table = g.constant(&cache.f_ort);
    let sim_table = model.config.variant.use_sim.then_some(table);
    let feats = pooled_features(g, model, images, sim_table)?;
    let w = g.param(&model.store, model.cal_head.weight());
    let w = g.detach(w);
    stage2_loss_on(g, model, feats, table, pids, clothes, w)
}

fn stage2_loss_on(
    g: &mut Graph,
    model: &SciModel,
    feats: Var,
    table: Var,
    pids: &[usize],
    clothes: &[usize],
    cal_weight: Var,
) -> Result<(Var, Stage2Parts)> {
    let logits = model.id_head.logits(g, &model.store, feats)?;
    let l_id = id_loss(g, logits, pids)?;
    let cal = cal_loss(g, feats, pids, clothes, &model.cal_head, cal_weight)?;
    let l_t = i2tce_loss(
        g,
        feats,
        table,
        pids,
        model.config.sim.smoothing,
        f64::from(model.config.sse.logit_scale),
    )?;
    let s = g.add(l_id, cal.loss)?;
    let total = g.add(s, l_t)?;
    let parts = Stage2Parts {
        id: g.scalar(l_id),
        cal: g.scalar(cal.loss),
        i2tce: g.scalar(l_t),
        total: g.scalar(total),
        cal_skipped: cal.skipped,
    };
    Ok((total, parts))
}

/// Cross-entropy of the clothes classifier on detached features.
pub fn clothes_classifier_loss(g: &mut Graph, model: &SciModel, feats: Var, clothes: &[usize]) -> Result<Var> {
    let feats = g.detach(feats);
    let w = g.param(&model.store, model.cal_head.weight());
    let logits = model.cal_head.logits(g, feats, w)?;
    check_labels(clothes, g.shape(feats)[0], model.cal_head.num_clothes(), "clothes classifier")?;
    g.cross_entropy(logits, &smoothed_targets(clothes, model.cal_head.num_clothes(), 0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub lr: f32,
    pub id: f64,
    pub cal: f64,
    pub i2tce: f64,
    pub total: f64,
    pub clothes_ce: f64,
    pub cal_skipped: usize,
}

/// Stage 2: visual encoder, SIM blocks and heads are trained; the prompt
/// bank, text encoder and cached text features stay fixed.
pub fn train_stage2(
    model: &mut SciModel,
    dataset: &Dataset,
    settings: &StageSettings,
) -> Result<Vec<Stage2Epoch>> {
    if model.text_cache.is_none() {
        return Err(Error::contract("stage 2 needs cached text features"));
    }
    if !model.text.is_frozen() {
        return Err(Error::contract("stage 2 requires the text encoder frozen"));
    }
    let mut log = Vec::with_capacity(settings.epochs);
    if settings.epochs == 0 {
        return Ok(log);
    }
    model.prepare_stage2();
    let main_params = model.stage2_params();
    let cal_params = vec![model.cal_head.weight()];
    let cfg = AdamConfig {
        lr: settings.schedule.base_lr,
        ..Default::default()
    };
    let mut main_opt = AdamState::new(&model.store, main_params, cfg);
    let mut cal_opt = AdamState::new(&model.store, cal_params, cfg);
    let sampler = PkSampler::new(dataset);
    if sampler.num_pids() == 0 {
        return Err(Error::Data(format!("no {:?} samples to train on", Split::Train)));
    }
    let batches = (sampler.num_samples() / (settings.p * settings.k)).max(1);
    let mut r = rng::stream(settings.seed, "stage2.sampler");

    for epoch in 0..settings.epochs {
        let lr = settings.schedule.lr_at(epoch);
        main_opt.lr = lr;
        cal_opt.lr = lr;
        let mut sums = Stage2Parts::default();
        let mut clothes_ce = 0.0;
        for _ in 0..batches {
            let batch = sampler.sample(settings.p, settings.k, &mut r)?;
            let (pids, clothes) = model.batch_labels(dataset, &batch.indices)?;
            let images: Vec<&Tensor> = batch.indices.iter().map(|i| &dataset.samples[*i].image).collect();

            let mut g = Graph::new();
            let table = {
                let cache = model.text_cache.as_ref().expect("checked above");
                g.constant(&cache.f_ort)
            };
            let sim_table = model.config.variant.use_sim.then_some(table);
            let feats = pooled_features(&mut g, model, &images, sim_table)?;

            // (a) clothes classifier on detached features
            let ce = clothes_classifier_loss(&mut g, model, feats, &clothes)?;
            clothes_ce += g.scalar(ce);
            let grads = g.backward(ce)?;
            let w_var = g.param(&model.store, model.cal_head.weight());
            grads.accumulate_into(w_var, model.store.get_mut(model.cal_head.weight()));
            cal_opt.apply(&mut model.store)?;

            // (b) main step; the classifier is read after its update
            let w_now = g.constant(model.store.get(model.cal_head.weight()));
            let (loss, parts) = stage2_loss_on(&mut g, model, feats, table, &pids, &clothes, w_now)?;
            if !parts.total.is_finite() {
                return Err(Error::Numeric("stage 2 loss"));
            }
            g.backward_into(loss, &mut model.store)?;
            drop(g);
            main_opt.apply(&mut model.store)?;
            model.store.zero_grad();

            sums.id += parts.id;
            sums.cal += parts.cal;
            sums.i2tce += parts.i2tce;
            sums.total += parts.total;
            sums.cal_skipped += parts.cal_skipped;
        }
        let nb = batches as f64;
        log.push(Stage2Epoch {
            epoch: epoch + 1,
            lr,
            id: sums.id / nb,
            cal: sums.cal / nb,
            i2tce: sums.i2tce / nb,
            total: sums.total / nb,
            clothes_ce: clothes_ce / nb,
            cal_skipped: sums.cal_skipped,
        });
    }
    model.optim_stage2 = Some((main_opt, cal_opt));
    Ok(log)
}

/// L2-normalised retrieval embedding `[d]`.
pub fn extract_embedding(model: &SciModel, image: &Tensor) -> Result<Tensor> {
    embedding_with(model, image, model.config.variant.use_sim)
}

/// Embedding of the unrefined encoder path.
pub fn baseline_embedding(model: &SciModel, image: &Tensor) -> Result<Tensor> {
    embedding_with(model, image, false)
}

fn embedding_with(model: &SciModel, image: &Tensor, refine: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let table = if refine {
        let cache = model
            .text_cache
            .as_ref()
            .ok_or_else(|| Error::contract("refined embedding needs cached text features"))?;
        Some(g.constant(&cache.f_ort))
    } else {
        None
    };
    let pooled = pooled_features(&mut g, model, &[image], table)?;
    let e = g.l2_normalize_rows(pooled)?;
    g.value(e).reshape(vec![model.visual.text_dim])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn attention_single_key_and_symmetric() {
        let mut g = Graph::new();
        let f = g.constant(&rows(&[&[1.0, 2.0], &[-1.0, 0.5]]));
        let t = g.constant(&rows(&[&[0.5, -0.5]]));
        let out = text_guided_attention(&mut g, f, t).unwrap();
        assert_eq!(g.value(out).data(), &[1.5, 1.5, -0.5, 0.0]);

        let z = g.constant(&Tensor::zeros(vec![3, 2]));
        let t2 = g.constant(&rows(&[&[1.0, 0.0], &[0.0, 3.0]]));
        let out = text_guided_attention(&mut g, z, t2).unwrap();
        for r in g.value(out).data().chunks(2) {
            assert_eq!(r, &[0.5, 1.5]);
        }
        let bad = g.constant(&rows(&[&[1.0, 0.0, 0.0]]));
        assert!(text_guided_attention(&mut g, f, bad).is_err());
    }

    #[test]
    fn fuse_cases() {
        let mut g = Graph::new();
        let f = g.constant(&rows(&[&[1.0, -2.0], &[3.0, 4.0]]));
        let neg = g.constant(&rows(&[&[-1.0, 2.0], &[-3.0, -4.0]]));
        let zero = g.constant(&Tensor::zeros(vec![2]));
        let one = g.constant(&Tensor::full(vec![2], 1.0));
        let same = fuse(&mut g, f, neg, zero).unwrap();
        assert_eq!(g.values(same), g.values(f));
        let gone = fuse(&mut g, f, neg, one).unwrap();
        assert!(g.values(gone).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nonlocal_zero_w_is_identity() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, "t");
        let block = NonLocalBlock::new(&mut store, 8, 4, &mut r);
        for n in [1, 6] {
            let x = Tensor::randn(vec![n, 8], 1.0, &mut r);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let y = block.forward(&mut g, &store, xv).unwrap();
            assert_eq!(g.value(y), x);
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_diff() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(4, "t");
        let cfg = SimConfig {
            mlp_out_init_std: 0.0,
            ..Default::default()
        };
        let refiner = CrossAttnRefiner::new(&mut store, 8, &cfg, &mut r);
        let x = Tensor::randn(vec![5, 8], 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let d = refiner.refine(&mut g, &store, xv).unwrap();
        assert!(g.values(d).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn id_loss_uniform_and_range() {
        let mut g = Graph::new();
        let l = g.constant(&Tensor::zeros(vec![3, 5]));
        let loss = id_loss(&mut g, l, &[0, 4, 2]).unwrap();
        assert!((g.scalar(loss) - 5f64.ln()).abs() < 1e-9);
        assert!(matches!(id_loss(&mut g, l, &[0, 5, 1]), Err(Error::Contract(_))));
    }

    fn head(clothes_pid: Vec<usize>, tau: f32, store: &mut ParamStore, dim: usize) -> CalHead {
        let mut pid_clothes = vec![Vec::new(); clothes_pid.iter().max().unwrap() + 1];
        for (c, p) in clothes_pid.iter().enumerate() {
            pid_clothes[*p].push(c);
        }
        let labels = LabelSpace {
            pids: (0..pid_clothes.len() as u32).collect(),
            clothes: (0..clothes_pid.len() as u32).collect(),
            clothes_pid,
            pid_clothes,
        };
        CalHead::new(store, &labels, dim, tau, 0)
    }

    #[test]
    fn cal_single_outfit_skips_everything() {
        let mut store = ParamStore::new();
        let h = head(vec![0, 1, 2], 1.0 / 16.0, &mut store, 4);
        let mut g = Graph::new();
        let mut r = rng::stream(1, "t");
        let f = g.constant(&Tensor::randn(vec![3, 4], 1.0, &mut r));
        let w = g.param(&store, h.weight());
        let out = cal_loss(&mut g, f, &[0, 1, 2], &[0, 1, 2], &h, w).unwrap();
        assert_eq!(g.scalar(out.loss), 0.0);
        assert_eq!(out.skipped, 3);
    }

    #[test]
    fn i2tce_uniform_is_log_classes() {
        let mut g = Graph::new();
        let f = g.constant(&rows(&[&[1.0, 0.0], &[2.0, 0.0]]));
        let table = g.constant(&rows(&[&[0.0, 1.0], &[0.0, -1.0], &[0.0, 2.0]]));
        for eps in [0.0, 0.1, 0.5] {
            let l = i2tce_loss(&mut g, f, table, &[0, 2], eps, 10.0).unwrap();
            assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-6);
        }
        assert!(i2tce_loss(&mut g, f, table, &[0, 2], 1.0, 1.0).is_err());
    }
}
