//! Randomly initialised stand-ins for the visual and text towers.
//!
//! Both encoders keep their weights in the model's [`ParamStore`] and only
//! hold [`ParamId`]s. Freezing flips `requires_grad` on those ids, so a frozen
//! encoder never receives gradients and the optimiser never touches it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub const LN_EPS: f64 = 1e-5;

/// Fixed vocabulary for the prompt templates.
pub const VOCAB: [&str; 10] = [
    "<pad>", "<sot>", "<eot>", "a", "photo", "of", "the", "person", "clothes", ".",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|w| *w == word)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub channels: usize,
    pub token_dim: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub text_heads: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 16,
            patch: 4,
            channels: 32,
            token_dim: 32,
            text_dim: 64,
            vocab_size: 16,
            max_len: 16,
            text_heads: 2,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.height", self.height),
            ("encoder.width", self.width),
            ("encoder.patch", self.patch),
            ("encoder.channels", self.channels),
            ("encoder.token_dim", self.token_dim),
            ("encoder.text_dim", self.text_dim),
            ("encoder.max_len", self.max_len),
            ("encoder.text_heads", self.text_heads),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.height.is_multiple_of(self.patch) {
            return Err(Error::config("encoder.height", "must be divisible by encoder.patch"));
        }
        if !self.width.is_multiple_of(self.patch) {
            return Err(Error::config("encoder.width", "must be divisible by encoder.patch"));
        }
        if self.vocab_size < VOCAB.len() {
            return Err(Error::config(
                "encoder.vocab_size",
                format!("must be at least {}", VOCAB.len()),
            ));
        }
        if !self.token_dim.is_multiple_of(self.text_heads) {
            return Err(Error::config(
                "encoder.text_heads",
                "must divide encoder.token_dim",
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_pixels(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

fn dense(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, r: &mut rng::Rng) -> ParamId {
    let std = 1.0 / (fan_in as f32).sqrt();
    store.add(name, Tensor::randn(vec![fan_in, fan_out], std, r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(vec![dim], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Scaled dot-product attention of one head: `softmax(q kᵀ / √d) v`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *g.shape(q).last().unwrap_or(&1);
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scores, 1)?;
    g.matmul(weights, v)
}

#[derive(Debug, Clone, PartialEq)]
struct HeadParams {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    out: ParamId,
}

/// Piece of a text-encoder input sequence.
#[derive(Debug, Clone, Copy)]
pub enum TextSegment<'a> {
    /// Fixed vocabulary ids, looked up in the token table.
    Ids(&'a [usize]),
    /// Pre-embedded rows `[n x token_dim]` (learnable context slots).
    Embedded(Var),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub token_dim: usize,
    pub text_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    token_embedding: ParamId,
    positional: ParamId,
    ln_attn: LayerNormParams,
    heads: Vec<HeadParams>,
    ln_final: LayerNormParams,
    projection: ParamId,
    frozen: bool,
}

impl TextEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore) -> Self {
        let mut r = rng::stream(cfg.seed, "text_encoder");
        let d = cfg.token_dim;
        let head_dim = d / cfg.text_heads;
        let token_embedding = store.add(
            "text.token_embedding",
            Tensor::randn(vec![cfg.vocab_size, d], 0.02, &mut r),
        );
        let positional = store.add(
            "text.positional",
            Tensor::randn(vec![cfg.max_len, d], 0.01, &mut r),
        );
        let ln_attn = LayerNormParams::new(store, "text.ln_attn", d);
        let heads = (0..cfg.text_heads)
            .map(|h| HeadParams {
                q: dense(store, &format!("text.head{h}.q"), d, head_dim, &mut r),
                k: dense(store, &format!("text.head{h}.k"), d, head_dim, &mut r),
                v: dense(store, &format!("text.head{h}.v"), d, head_dim, &mut r),
                out: dense(store, &format!("text.head{h}.out"), head_dim, d, &mut r),
            })
            .collect();
        let ln_final = LayerNormParams::new(store, "text.ln_final", d);
        let projection = dense(store, "text.projection", d, cfg.text_dim, &mut r);
        Self {
            token_dim: d,
            text_dim: cfg.text_dim,
            max_len: cfg.max_len,
            vocab_size: cfg.vocab_size,
            token_embedding,
            positional,
            ln_attn,
            heads,
            ln_final,
            projection,
            frozen: false,
        }
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix("text")
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, store: &mut ParamStore, frozen: bool) {
        self.frozen = frozen;
        let ids = self.param_ids(store);
        store.set_requires_grad(&ids, !frozen);
    }

    /// Encodes one prompt into a `[text_dim]` feature taken at the final
    /// (end-of-text) position.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, segments: &[TextSegment<'_>]) -> Result<Var> {
        let mut parts = Vec::with_capacity(segments.len());
        for seg in segments {
            match seg {
                TextSegment::Ids(ids) => {
                    if let Some(bad) = ids.iter().find(|i| **i >= self.vocab_size) {
                        return Err(Error::contract(format!("token id {bad} outside vocabulary")));
                    }
                    let table = g.param(store, self.token_embedding);
                    parts.push(g.gather_rows(table, ids)?);
                }
                TextSegment::Embedded(v) => {
                    if g.shape(*v).len() != 2 || g.shape(*v)[1] != self.token_dim {
                        return Err(Error::Dimension {
                            op: "encode_text",
                            lhs: vec![0, self.token_dim],
                            rhs: g.shape(*v).to_vec(),
                        });
                    }
                    parts.push(*v);
                }
            }
        }
        let x = g.concat_rows(&parts)?;
        let len = g.shape(x)[0];
        if len == 0 || len > self.max_len {
            return Err(Error::contract(format!(
                "text sequence length {len} outside 1..={}",
                self.max_len
            )));
        }
        let pos_table = g.param(store, self.positional);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let x = g.add(x, pos)?;

        let h = self.ln_attn.forward(g, store, x)?;
        let mut mixed = None;
        for head in &self.heads {
            let q = g.param(store, head.q);
            let k = g.param(store, head.k);
            let v = g.param(store, head.v);
            let out = g.param(store, head.out);
            let (q, k, v) = (g.matmul(h, q)?, g.matmul(h, k)?, g.matmul(h, v)?);
            let a = attention(g, q, k, v)?;
            let a = g.matmul(a, out)?;
            mixed = Some(match mixed {
                None => a,
                Some(m) => g.add(m, a)?,
            });
        }
        let x = g.add(x, mixed.expect("at least one head"))?;
        let x = self.ln_final.forward(g, store, x)?;
        let last = g.gather_rows(x, &[len - 1])?;
        let proj = g.param(store, self.projection);
        let f = g.matmul(last, proj)?;
        g.reshape(f, vec![self.text_dim])
    }
}

/// Cuts an `H x W x 3` image into non-overlapping `p x p` patches, one row
/// per patch in grid row-major order; row layout is `(dy, dx, channel)`.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [h, w, c] = image.shape() else {
        return Err(Error::contract(format!(
            "image must be H x W x 3, got {:?}",
            image.shape()
        )));
    };
    let (h, w, c) = (*h, *w, *c);
    if c != 3 || h % patch != 0 || w % patch != 0 {
        return Err(Error::contract(format!(
            "image shape {:?} incompatible with patch {patch}",
            image.shape()
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch {
                for dx in 0..patch {
                    let base = ((pr * patch + dy) * w + pc * patch + dx) * c;
                    out.extend_from_slice(&src[base..base + c]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, width], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub channels: usize,
    pub text_dim: usize,
    patch_weight: ParamId,
    patch_bias: ParamId,
    positional: ParamId,
    conv_norm: LayerNormParams,
    conv_kernels: Vec<ParamId>,
    conv_bias: ParamId,
    attn_norm: LayerNormParams,
    attn: HeadParams,
    post_norm: LayerNormParams,
    projection: ParamId,
    /// For each of the 9 kernel taps, the source pixel of every output pixel.
    taps: Vec<Vec<Option<usize>>>,
    frozen: bool,
}

impl VisualEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore) -> Self {
        let mut r = rng::stream(cfg.seed, "visual_encoder");
        let c = cfg.channels;
        let patch_in = cfg.patch * cfg.patch * 3;
        let patch_weight = dense(store, "visual.patch.weight", patch_in, c, &mut r);
        let patch_bias = store.add("visual.patch.bias", Tensor::zeros(vec![c]));
        let positional = store.add(
            "visual.positional",
            Tensor::randn(vec![cfg.num_pixels(), c], 0.02, &mut r),
        );
        let conv_norm = LayerNormParams::new(store, "visual.conv.norm", c);
        let conv_std = 1.0 / ((9 * c) as f32).sqrt();
        let conv_kernels = (0..9)
            .map(|t| {
                store.add(
                    format!("visual.conv.tap{t}"),
                    Tensor::randn(vec![c, c], conv_std, &mut r),
                )
            })
            .collect();
        let conv_bias = store.add("visual.conv.bias", Tensor::zeros(vec![c]));
        let attn_norm = LayerNormParams::new(store, "visual.attn.norm", c);
        let attn = HeadParams {
            q: dense(store, "visual.attn.q", c, c, &mut r),
            k: dense(store, "visual.attn.k", c, c, &mut r),
            v: dense(store, "visual.attn.v", c, c, &mut r),
            out: dense(store, "visual.attn.out", c, c, &mut r),
        };
        let post_norm = LayerNormParams::new(store, "visual.post_norm", c);
        let projection = dense(store, "visual.projection", c, cfg.text_dim, &mut r);

        let (gh, gw) = cfg.grid();
        let mut taps = Vec::with_capacity(9);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let mut idx = Vec::with_capacity(gh * gw);
                for r0 in 0..gh as i64 {
                    for c0 in 0..gw as i64 {
                        let (rr, cc) = (r0 + dr, c0 + dc);
                        idx.push(if rr >= 0 && rr < gh as i64 && cc >= 0 && cc < gw as i64 {
                            Some((rr * gw as i64 + cc) as usize)
                        } else {
                            None
                        });
                    }
                }
                taps.push(idx);
            }
        }

        Self {
            height: cfg.height,
            width: cfg.width,
            patch: cfg.patch,
            channels: c,
            text_dim: cfg.text_dim,
            patch_weight,
            patch_bias,
            positional,
            conv_norm,
            conv_kernels,
            conv_bias,
            attn_norm,
            attn,
            post_norm,
            projection,
            taps,
            frozen: false,
        }
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.ids_with_prefix("visual")
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, store: &mut ParamStore, frozen: bool) {
        self.frozen = frozen;
        let ids = self.param_ids(store);
        store.set_requires_grad(&ids, !frozen);
    }

    /// Spatial feature map `[N_pix x C]`, grid positions in row-major order.
    pub fn feature_map(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<Var> {
        if image.shape() != [self.height, self.width, 3] {
            return Err(Error::contract(format!(
                "image shape {:?} does not match encoder input [{}, {}, 3]",
                image.shape(),
                self.height,
                self.width
            )));
        }
        let patches = extract_patches(image, self.patch)?;
        let patches = g.constant(&patches);
        let w = g.param(store, self.patch_weight);
        let b = g.param(store, self.patch_bias);
        let pos = g.param(store, self.positional);
        let x = g.matmul(patches, w)?;
        let x = g.add_row(x, b)?;
        let x = g.add(x, pos)?;

        // 3x3 conv block, zero padded
        let h = self.conv_norm.forward(g, store, x)?;
        let mut conv = None;
        for (tap, kernel) in self.taps.iter().zip(&self.conv_kernels) {
            let shifted = g.gather_rows_padded(h, tap.clone())?;
            let k = g.param(store, *kernel);
            let y = g.matmul(shifted, k)?;
            conv = Some(match conv {
                None => y,
                Some(acc) => g.add(acc, y)?,
            });
        }
        let cb = g.param(store, self.conv_bias);
        let conv = g.add_row(conv.expect("nine taps"), cb)?;
        let conv = g.gelu(conv);
        let x = g.add(x, conv)?;

        // spatial self-attention block
        let h = self.attn_norm.forward(g, store, x)?;
        let q = g.param(store, self.attn.q);
        let k = g.param(store, self.attn.k);
        let v = g.param(store, self.attn.v);
        let out = g.param(store, self.attn.out);
        let (q, k, v) = (g.matmul(h, q)?, g.matmul(h, k)?, g.matmul(h, v)?);
        let a = attention(g, q, k, v)?;
        let a = g.matmul(a, out)?;
        let x = g.add(x, a)?;

        self.post_norm.forward(g, store, x)
    }

    /// Per-pixel linear projection `[N_pix x C] -> [N_pix x text_dim]`.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<Var> {
        let p = g.param(store, self.projection);
        g.matmul(map, p)
    }

    /// Global feature: mean over pixels of the projected map. The projection
    /// is linear without bias, so this is the projection of the pooled map.
    pub fn pool(&self, g: &mut Graph, projected: Var) -> Result<Var> {
        g.mean_rows(projected)
    }

    /// `(feature map [N_pix x C], global feature [text_dim])`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<(Var, Var)> {
        let map = self.feature_map(g, store, image)?;
        let projected = self.project(g, store, map)?;
        let global = self.pool(g, projected)?;
        Ok((map, global))
    }
}

/// Graph-free text encoding.
pub fn encode_text(enc: &TextEncoder, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = enc.encode(&mut g, store, &[TextSegment::Ids(ids)])?;
    Ok(g.value(f))
}

/// Graph-free image encoding.
pub fn encode_image(enc: &VisualEncoder, store: &ParamStore, image: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (map, global) = enc.encode(&mut g, store, image)?;
    Ok((g.value(map), g.value(global)))
}
